//! Scenario configuration, bundled presets, batch execution, and trace /
//! report persistence for the CLI.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::engine::{Engine, EngineConfig, LeaderModel, StepRecord};
use crate::error::PlatoonError;
use crate::monitor::{MonitorReport, StabilityMonitor};
use crate::ocp::{SolverOptions, WeightSet};
use crate::topology::{Topology, TopologyKind};
use crate::vehicle::VehicleParams;

/// Fully resolved scenario: engine configuration plus run controls.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub name: String,
    pub engine: EngineConfig,
    pub leader: LeaderModel,
    pub duration: f64,
    pub settling_threshold: f64,
    pub monitor: bool,
    pub out_dir: Option<PathBuf>,
}

impl ScenarioConfig {
    pub fn steps(&self) -> usize {
        (self.duration / self.engine.dt).round() as usize
    }

    pub fn validate(&self) -> Result<(), PlatoonError> {
        self.engine.validate()?;
        self.leader.validate()?;
        if !(self.duration > 0.0) {
            return Err(PlatoonError::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.settling_threshold > 0.0) {
            return Err(PlatoonError::Config("settling threshold must be positive".into()));
        }
        Ok(())
    }
}

// -------------------------------------------------------------------------
// Flat config file format (strict: unknown keys are rejected).
// -------------------------------------------------------------------------

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EngineSection {
    dt: f64,
    horizon: usize,
    spacing: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LeaderSection {
    initial_position: f64,
    breakpoints: Vec<(f64, f64)>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopologySection {
    preset: Option<String>,
    followers: Option<usize>,
    adjacency: Option<Vec<Vec<u8>>>,
    pinning: Option<Vec<u8>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    duration: f64,
    #[serde(default = "default_settling")]
    settling_threshold: f64,
    #[serde(default = "default_true")]
    monitor: bool,
    out_dir: Option<PathBuf>,
}

fn default_settling() -> f64 {
    0.05
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct VehicleSection {
    mass: f64,
    tau: f64,
    drag_coeff: f64,
    wheel_radius: f64,
    driveline_eff: Option<f64>,
    rolling_coeff: Option<f64>,
    gravity: Option<f64>,
    accel_max: Option<f64>,
    accel_min: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightSection {
    q: f64,
    r: f64,
    f: f64,
    g: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    engine: EngineSection,
    leader: LeaderSection,
    topology: TopologySection,
    run: RunSection,
    solver: Option<SolverOptions>,
    vehicle: BTreeMap<String, VehicleSection>,
    weights: BTreeMap<String, WeightSection>,
}

fn indexed_section<T>(
    map: BTreeMap<String, T>,
    section: &str,
    n: usize,
) -> Result<Vec<T>, PlatoonError> {
    let mut out: Vec<Option<T>> = (0..n).map(|_| None).collect();
    for (key, value) in map {
        let idx: usize = key.parse().map_err(|_| {
            PlatoonError::Config(format!("[{section}.{key}]: index must be an integer"))
        })?;
        if idx == 0 || idx > n {
            return Err(PlatoonError::Config(format!(
                "[{section}.{idx}]: index out of range 1..={n}"
            )));
        }
        out[idx - 1] = Some(value);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, v)| {
            v.ok_or_else(|| PlatoonError::Config(format!("missing section [{section}.{}]", i + 1)))
        })
        .collect()
}

/// Parse and validate a scenario file. Unknown keys are rejected.
pub fn load_scenario(path: &Path) -> Result<ScenarioConfig, PlatoonError> {
    let text = std::fs::read_to_string(path)?;
    let file: ScenarioFile = toml::from_str(&text)
        .map_err(|e| PlatoonError::Config(format!("{}: {e}", path.display())))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    resolve(name, file)
}

fn resolve(name: String, file: ScenarioFile) -> Result<ScenarioConfig, PlatoonError> {
    let topology = match (&file.topology.preset, &file.topology.adjacency, &file.topology.pinning) {
        (Some(preset), None, None) => {
            let followers = file.topology.followers.ok_or_else(|| {
                PlatoonError::Config("[topology]: preset form needs 'followers'".into())
            })?;
            Topology::from_preset(preset.parse()?, followers)?
        }
        (None, Some(adjacency), Some(pinning)) => {
            Topology::new(adjacency.clone(), pinning.clone())?
        }
        _ => {
            return Err(PlatoonError::Config(
                "[topology]: give either 'preset' + 'followers' or 'adjacency' + 'pinning'".into(),
            ))
        }
    };
    let n = topology.follower_count();

    let params: Vec<VehicleParams> = indexed_section(file.vehicle, "vehicle", n)?
        .into_iter()
        .map(|v| {
            let mut p =
                VehicleParams::passenger_car(v.mass, v.tau, v.drag_coeff, v.wheel_radius);
            if let Some(x) = v.driveline_eff {
                p.driveline_eff = x;
            }
            if let Some(x) = v.rolling_coeff {
                p.rolling_coeff = x;
            }
            if let Some(x) = v.gravity {
                p.gravity = x;
            }
            if let Some(x) = v.accel_max {
                p.accel_max = x;
            }
            if let Some(x) = v.accel_min {
                p.accel_min = x;
            }
            p
        })
        .collect();

    let weights: Vec<WeightSet> = indexed_section(file.weights, "weights", n)?
        .into_iter()
        .map(|w| WeightSet::scaled(w.q, w.r, w.f, w.g))
        .collect();

    let cfg = ScenarioConfig {
        name,
        engine: EngineConfig {
            dt: file.engine.dt,
            horizon: file.engine.horizon,
            spacing: file.engine.spacing,
            params,
            topology,
            weights,
            solver: file.solver.unwrap_or_default(),
        },
        leader: LeaderModel {
            initial_position: file.leader.initial_position,
            breakpoints: file.leader.breakpoints,
        },
        duration: file.run.duration,
        settling_threshold: file.run.settling_threshold,
        monitor: file.run.monitor,
        out_dir: file.run.out_dir,
    };
    cfg.validate()?;
    Ok(cfg)
}

// -------------------------------------------------------------------------
// Bundled presets: the seven-follower reference platoon under the four
// unidirectional topologies, with either the ramped or a constant leader.
// -------------------------------------------------------------------------

/// Per-vehicle (mass, tau, drag, radius) of the reference platoon.
pub const REFERENCE_VEHICLES: [(f64, f64, f64, f64); 7] = [
    (1035.7, 0.51, 0.99, 0.30),
    (1849.1, 0.75, 1.15, 0.38),
    (1934.0, 0.78, 1.17, 0.39),
    (1678.7, 0.70, 1.12, 0.37),
    (1757.7, 0.73, 1.13, 0.38),
    (1743.1, 0.72, 1.13, 0.37),
    (1392.2, 0.62, 1.06, 0.34),
];

/// Reference cost weights: F = 10 I everywhere, G = 5 I for every node
/// with a predecessor, Q = 10 I exactly on the pinned nodes, scalar R = 1.
pub fn reference_weights(topology: &Topology) -> Vec<WeightSet> {
    (1..=topology.follower_count())
        .map(|i| {
            let q = if topology.is_pinned(i) { 10.0 } else { 0.0 };
            let g = if i == 1 { 0.0 } else { 5.0 };
            WeightSet::scaled(q, 1.0, 10.0, g)
        })
        .collect()
}

/// The reference leader: 20 m/s cruise, a 2 m/s ramp between t = 1 s and
/// t = 2 s, then 22 m/s.
pub fn ramp_leader() -> LeaderModel {
    LeaderModel { initial_position: 0.0, breakpoints: vec![(1.0, 20.0), (2.0, 22.0)] }
}

pub fn reference_scenario(kind: TopologyKind, ramped: bool) -> ScenarioConfig {
    let topology = Topology::from_preset(kind, 7).expect("preset");
    let params = REFERENCE_VEHICLES
        .iter()
        .map(|&(m, tau, ca, r)| VehicleParams::passenger_car(m, tau, ca, r))
        .collect();
    let weights = reference_weights(&topology);
    let leader = if ramped { ramp_leader() } else { LeaderModel::constant(0.0, 20.0) };
    let prefix = if ramped { "ramp" } else { "cruise" };
    ScenarioConfig {
        name: format!("{prefix}_{kind}"),
        engine: EngineConfig {
            dt: 0.1,
            horizon: 20,
            spacing: 20.0,
            params,
            topology,
            weights,
            solver: SolverOptions::default(),
        },
        leader,
        duration: 40.0,
        settling_threshold: 0.05,
        monitor: true,
        out_dir: None,
    }
}

pub fn preset_names() -> Vec<String> {
    let mut names = Vec::new();
    for prefix in ["ramp", "cruise"] {
        for kind in [TopologyKind::Pf, TopologyKind::Plf, TopologyKind::Tpf, TopologyKind::Tplf] {
            names.push(format!("{prefix}_{kind}"));
        }
    }
    names
}

pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let (prefix, kind) = name.split_once('_')?;
    let ramped = match prefix {
        "ramp" => true,
        "cruise" => false,
        _ => return None,
    };
    let kind: TopologyKind = kind.parse().ok()?;
    Some(reference_scenario(kind, ramped))
}

/// Load a scenario from a preset name or a config file path.
pub fn load(scenario: &str) -> Result<ScenarioConfig, PlatoonError> {
    if let Some(cfg) = preset(scenario) {
        return Ok(cfg);
    }
    let path = Path::new(scenario);
    if path.exists() {
        load_scenario(path)
    } else {
        Err(PlatoonError::Config(format!(
            "'{scenario}' is neither a bundled preset nor an existing file (presets: {})",
            preset_names().join(", ")
        )))
    }
}

// -------------------------------------------------------------------------
// Execution, trace output and summaries.
// -------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: usize,
    pub max_spacing_error: f64,
    pub max_velocity_error: f64,
    /// First time after which the spacing error stays below the threshold.
    pub settling_time: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSummary {
    pub scenario: String,
    pub steps: usize,
    pub dt: f64,
    pub nodes: Vec<NodeSummary>,
    pub max_spacing_error: f64,
    pub final_max_spacing_error: f64,
    pub monitor_pass: usize,
    pub monitor_fail: usize,
    pub steps_to_consensus: Option<usize>,
    pub wall_seconds: f64,
}

pub struct RunArtifacts {
    pub records: Vec<StepRecord>,
    pub report: Option<MonitorReport>,
    pub summary: RunSummary,
}

pub const TRACE_HEADER: &str = "t,node,s,v,T,u,spacing_err,velocity_err,J_i,status";

fn write_trace_row(
    w: &mut impl Write,
    record: &StepRecord,
    node: usize,
) -> std::io::Result<()> {
    let nr = &record.nodes[node];
    writeln!(
        w,
        "{},{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{}",
        record.t,
        node + 1,
        nr.state.position,
        nr.state.velocity,
        nr.state.torque,
        nr.applied_input,
        record.spacing_errors[node],
        record.velocity_errors[node],
        nr.cost,
        nr.status,
    )
}

pub fn summarize(
    scenario: &str,
    dt: f64,
    settling_threshold: f64,
    records: &[StepRecord],
    report: Option<&MonitorReport>,
    wall_seconds: f64,
) -> RunSummary {
    let n = records.first().map_or(0, |r| r.nodes.len());
    let mut nodes = Vec::with_capacity(n);
    let mut max_spacing = 0.0f64;
    for i in 0..n {
        let mut max_se = 0.0f64;
        let mut max_ve = 0.0f64;
        let mut settled_from: Option<usize> = None;
        for r in records {
            let se = r.spacing_errors[i].abs();
            max_se = max_se.max(se);
            max_ve = max_ve.max(r.velocity_errors[i].abs());
            if se < settling_threshold {
                settled_from.get_or_insert(r.t);
            } else {
                settled_from = None;
            }
        }
        max_spacing = max_spacing.max(max_se);
        nodes.push(NodeSummary {
            node: i + 1,
            max_spacing_error: max_se,
            max_velocity_error: max_ve,
            settling_time: settled_from.map(|t| (t + 1) as f64 * dt),
        });
    }
    let final_max = records
        .last()
        .map_or(0.0, |r| r.spacing_errors.iter().fold(0.0f64, |a, &b| a.max(b.abs())));
    RunSummary {
        scenario: scenario.to_string(),
        steps: records.len(),
        dt,
        nodes,
        max_spacing_error: max_spacing,
        final_max_spacing_error: final_max,
        monitor_pass: report.map_or(0, |r| r.asserted_pass),
        monitor_fail: report.map_or(0, |r| r.asserted_fail),
        steps_to_consensus: report.and_then(|r| r.steps_to_consensus),
        wall_seconds,
    }
}

/// Execute a scenario: run the engine, stream the trace CSV, feed the
/// monitor, and compute the summary. `out_dir = None` keeps everything in
/// memory.
pub fn run_scenario(
    cfg: &ScenarioConfig,
    out_dir: Option<&Path>,
    monitor_enabled: bool,
) -> Result<RunArtifacts, PlatoonError> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let steps = cfg.steps();
    let initial = crate::engine::equilibrium_initial_states(
        &cfg.leader,
        &cfg.engine.params,
        cfg.engine.spacing,
    );
    let mut engine = Engine::new(cfg.engine.clone(), cfg.leader.clone(), initial)?;
    let mut monitor = if monitor_enabled && cfg.monitor {
        Some(StabilityMonitor::new(
            cfg.engine.topology.clone(),
            cfg.engine.weights.clone(),
            cfg.engine.dt,
            cfg.engine.horizon,
            cfg.engine.spacing,
            cfg.engine.solver.terminal_tol,
        )?)
    } else {
        None
    };

    let mut trace: Option<std::io::BufWriter<std::fs::File>> = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let file = std::fs::File::create(dir.join(format!("{}_trace.csv", cfg.name)))?;
            let mut w = std::io::BufWriter::new(file);
            writeln!(w, "{TRACE_HEADER}")?;
            Some(w)
        }
        None => None,
    };

    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        let outcome = engine.step()?;
        if let Some(m) = monitor.as_mut() {
            m.observe(&outcome.detail);
        }
        if let Some(w) = trace.as_mut() {
            for node in 0..outcome.record.nodes.len() {
                write_trace_row(w, &outcome.record, node)?;
            }
        }
        records.push(outcome.record);
    }
    if let Some(mut w) = trace.take() {
        w.flush()?;
    }

    let report = monitor.map(|m| m.report());
    if let (Some(dir), Some(report)) = (out_dir, report.as_ref()) {
        let file = std::fs::File::create(dir.join(format!("{}_report.jsonl", cfg.name)))?;
        report.write_jsonl(std::io::BufWriter::new(file))?;
    }

    let summary = summarize(
        &cfg.name,
        cfg.engine.dt,
        cfg.settling_threshold,
        &records,
        report.as_ref(),
        start.elapsed().as_secs_f64(),
    );
    if let Some(dir) = out_dir {
        let file = std::fs::File::create(dir.join(format!("{}_summary.json", cfg.name)))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &summary)
            .map_err(|e| PlatoonError::Config(format!("summary serialization: {e}")))?;
    }

    Ok(RunArtifacts { records, report, summary })
}

/// Aligned text table of per-run metrics for side-by-side inspection.
pub fn compare_summaries(summaries: &[RunSummary]) -> Result<String, PlatoonError> {
    if summaries.is_empty() {
        return Err(PlatoonError::Config("nothing to compare: no summaries given".into()));
    }
    let mut out = String::new();
    out.push_str(&format!(
        "{:<14} {:>6} {:>16} {:>16} {:>12} {:>10} {:>10}\n",
        "scenario", "steps", "max|spacing|[m]", "final|spacing|", "settle[s]", "mon_pass", "mon_fail"
    ));
    for s in summaries {
        let settle = s
            .nodes
            .iter()
            .map(|n| n.settling_time)
            .collect::<Option<Vec<_>>>()
            .map(|ts| ts.into_iter().fold(0.0f64, f64::max));
        let settle_str = settle.map_or("-".to_string(), |t| format!("{t:.1}"));
        out.push_str(&format!(
            "{:<14} {:>6} {:>16.6} {:>16.6} {:>12} {:>10} {:>10}\n",
            s.scenario,
            s.steps,
            s.max_spacing_error,
            s.final_max_spacing_error,
            settle_str,
            s.monitor_pass,
            s.monitor_fail
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_resolve_and_validate() {
        for name in preset_names() {
            let cfg = preset(&name).unwrap();
            cfg.validate().unwrap();
            assert_eq!(cfg.engine.topology.follower_count(), 7);
            assert_eq!(cfg.steps(), 400);
        }
        assert!(preset("ramp_ring").is_none());
        assert!(preset("nonsense").is_none());
    }

    #[test]
    fn reference_vehicle_table_is_loaded_row_for_row() {
        let cfg = preset("ramp_pf").unwrap();
        assert_eq!(cfg.engine.params[0].mass, 1035.7);
        assert_eq!(cfg.engine.params[0].tau, 0.51);
        assert_eq!(cfg.engine.params[6].drag_coeff, 1.06);
        assert_eq!(cfg.engine.params[6].wheel_radius, 0.34);
        // Pinning rule: PF pins only node 1.
        assert_eq!(cfg.engine.weights[0].q, nalgebra::Matrix2::identity() * 10.0);
        for w in &cfg.engine.weights[1..] {
            assert_eq!(w.q, nalgebra::Matrix2::zeros());
        }
    }

    #[test]
    fn compare_rejects_empty_and_formats_rows() {
        assert!(compare_summaries(&[]).is_err());
        let s = RunSummary {
            scenario: "x".into(),
            steps: 10,
            dt: 0.1,
            nodes: vec![],
            max_spacing_error: 0.5,
            final_max_spacing_error: 0.01,
            monitor_pass: 3,
            monitor_fail: 0,
            steps_to_consensus: Some(2),
            wall_seconds: 0.1,
        };
        let table = compare_summaries(&[s.clone()]).unwrap();
        assert_eq!(table.lines().count(), 2);
        let table2 = compare_summaries(&[s.clone(), s]).unwrap();
        assert_eq!(table2.lines().count(), 3);
    }
}
