//! The synchronous DMPC loop: per-step local solves, plant update with the
//! first optimal input, assumed-trajectory shift, and boundary exchange.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::PlatoonError;
use crate::ocp::{AssumedTrajectory, OcpProblem, OcpSolution, SolverOptions, SolverStatus, WeightSet};
use crate::topology::Topology;
use crate::vehicle::{
    self, equilibrium_torque, input_bounds, InputBounds, Output, VehicleParams, VehicleState,
};

/// Leader motion: piecewise-linear velocity over (time, velocity)
/// breakpoints, constant before the first and after the last one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeaderModel {
    pub initial_position: f64,
    /// (time [s], velocity [m/s]) pairs with strictly increasing times.
    pub breakpoints: Vec<(f64, f64)>,
}

impl LeaderModel {
    pub fn constant(initial_position: f64, velocity: f64) -> Self {
        LeaderModel { initial_position, breakpoints: vec![(0.0, velocity)] }
    }

    pub fn validate(&self) -> Result<(), PlatoonError> {
        if self.breakpoints.is_empty() {
            return Err(PlatoonError::Config("leader profile needs at least one breakpoint".into()));
        }
        for w in self.breakpoints.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(PlatoonError::Config(
                    "leader breakpoint times must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn velocity(&self, t: f64) -> f64 {
        let bps = &self.breakpoints;
        if t <= bps[0].0 {
            return bps[0].1;
        }
        for w in bps.windows(2) {
            let (t0, v0) = w[0];
            let (t1, v1) = w[1];
            if t <= t1 {
                return v0 + (v1 - v0) * (t - t0) / (t1 - t0);
            }
        }
        bps.last().unwrap().1
    }

    /// Position = initial position + closed-form integral of the profile.
    pub fn state(&self, t: f64) -> Output {
        let bps = &self.breakpoints;
        let mut s = self.initial_position;
        let mut t_prev = 0.0_f64;
        if t <= bps[0].0.max(0.0) {
            return Output { position: s + bps[0].1 * t, velocity: bps[0].1 };
        }
        if bps[0].0 > 0.0 {
            s += bps[0].1 * bps[0].0;
            t_prev = bps[0].0;
        }
        for w in bps.windows(2) {
            let (t0, v0) = w[0];
            let (t1, v1) = w[1];
            let seg_start = t_prev.max(t0);
            if t <= t1 {
                let v_at = self.velocity(t);
                s += 0.5 * (v0 + v_at) * (t - seg_start);
                return Output { position: s, velocity: v_at };
            }
            s += 0.5 * (v0 + v1) * (t1 - seg_start);
            t_prev = t1;
        }
        let v_last = bps.last().unwrap().1;
        Output { position: s + v_last * (t - t_prev), velocity: v_last }
    }

    /// True when the velocity profile is flat over [t, t + window].
    pub fn constant_over(&self, t: f64, window: f64) -> bool {
        let v = self.velocity(t);
        (self.velocity(t + window) - v).abs() < 1e-12
            && self
                .breakpoints
                .iter()
                .filter(|(bt, _)| *bt > t && *bt < t + window)
                .all(|(_, bv)| (bv - v).abs() < 1e-12)
    }
}

/// Static configuration of one platoon run.
#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub dt: f64,
    pub horizon: usize,
    pub spacing: f64,
    pub params: Vec<VehicleParams>,
    pub topology: Topology,
    pub weights: Vec<WeightSet>,
    pub solver: SolverOptions,
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), PlatoonError> {
        if !(self.dt > 0.0) {
            return Err(PlatoonError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.horizon < 2 {
            return Err(PlatoonError::Config(format!(
                "horizon must be at least 2, got {}",
                self.horizon
            )));
        }
        if !(self.spacing > 0.0) {
            return Err(PlatoonError::Config(format!(
                "spacing must be positive, got {}",
                self.spacing
            )));
        }
        let n = self.topology.follower_count();
        if self.params.len() != n {
            return Err(PlatoonError::Config(format!(
                "expected {n} vehicle parameter sets, got {}",
                self.params.len()
            )));
        }
        if self.weights.len() != n {
            return Err(PlatoonError::Config(format!(
                "expected {n} weight sets, got {}",
                self.weights.len()
            )));
        }
        for (idx, p) in self.params.iter().enumerate() {
            p.validate().map_err(|e| {
                PlatoonError::Config(format!("vehicle {}: {e}", idx + 1))
            })?;
        }
        for (idx, w) in self.weights.iter().enumerate() {
            w.validate().map_err(|e| {
                PlatoonError::Config(format!("weights {}: {e}", idx + 1))
            })?;
        }
        // Pinning rule: only pinned nodes may (and must) weight the
        // set-point error.
        for i in 1..=n {
            let q_zero = self.weights[i - 1].q == nalgebra::Matrix2::zeros();
            if self.topology.is_pinned(i) && q_zero {
                return Err(PlatoonError::Config(format!(
                    "node {i} is pinned but has Q = 0"
                )));
            }
            if !self.topology.is_pinned(i) && !q_zero {
                return Err(PlatoonError::Config(format!(
                    "node {i} is unpinned but has a nonzero Q"
                )));
            }
        }
        if !self.topology.has_spanning_tree() {
            return Err(PlatoonError::Config(
                "topology has no spanning tree rooted at the leader".into(),
            ));
        }
        Ok(())
    }
}

/// Per-node log entry of one executed step.
#[derive(Debug, Clone, Serialize)]
pub struct NodeRecord {
    pub applied_input: f64,
    pub state: VehicleState,
    pub cost: f64,
    pub status: SolverStatus,
    pub terminal_residual: f64,
    pub iterations: usize,
}

/// One executed step. Spacing and velocity errors are recomputed from the
/// plant states, never copied out of the solver.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub t: usize,
    pub nodes: Vec<NodeRecord>,
    /// s_{i-1} - s_i - d0 at t+1, with node 1 measured against the leader.
    pub spacing_errors: Vec<f64>,
    /// v_i - v_0 at t+1.
    pub velocity_errors: Vec<f64>,
}

/// Everything the stability monitor needs about one step, beyond the record.
#[derive(Debug, Clone)]
pub struct StepDetail {
    pub t: usize,
    /// Leader true output at time t.
    pub leader: Output,
    /// True iff the leader profile is flat over [t, t + N_p + 1] steps.
    pub leader_constant_over_horizon: bool,
    /// Assumed trajectories that parameterized this step's problems.
    pub assumed: Vec<AssumedTrajectory>,
    pub solutions: Vec<OcpSolution>,
    /// l_i of the first optimal stage, per node.
    pub first_stage_costs: Vec<f64>,
}

pub struct StepOutcome {
    pub record: StepRecord,
    pub detail: StepDetail,
}

pub struct Engine {
    cfg: EngineConfig,
    leader: LeaderModel,
    bounds: Vec<InputBounds>,
    states: Vec<VehicleState>,
    assumed: Vec<AssumedTrajectory>,
    t: usize,
}

/// Constant-speed desired outputs of a pinned node over the horizon,
/// anchored at the leader's current true state.
pub fn desired_setpoint(
    node: usize,
    leader: &Output,
    spacing: f64,
    dt: f64,
    horizon: usize,
) -> Vec<Output> {
    (0..=horizon)
        .map(|k| Output {
            position: leader.position + leader.velocity * dt * k as f64 - node as f64 * spacing,
            velocity: leader.velocity,
        })
        .collect()
}

/// Shift the optimal solution one step forward per the exchange protocol:
/// drop the first input, append the terminal equilibrium torque, re-roll
/// from the one-step-ahead optimal state.
pub fn shift_assumed(
    owner: usize,
    sol: &OcpSolution,
    p: &VehicleParams,
    dt: f64,
) -> AssumedTrajectory {
    let np = sol.inputs.len();
    let mut inputs = Vec::with_capacity(np);
    inputs.extend_from_slice(&sol.inputs[1..]);
    inputs.push(equilibrium_torque(sol.states[np].velocity, p));
    AssumedTrajectory::from_inputs(owner, &sol.states[1], inputs, p, dt)
}

impl Engine {
    /// Set up the run and build the step-0 assumed trajectories: constant
    /// equilibrium input at each vehicle's current speed.
    pub fn new(
        cfg: EngineConfig,
        leader: LeaderModel,
        initial_states: Vec<VehicleState>,
    ) -> Result<Self, PlatoonError> {
        cfg.validate()?;
        leader.validate()?;
        let n = cfg.topology.follower_count();
        if initial_states.len() != n {
            return Err(PlatoonError::Config(format!(
                "expected {n} initial states, got {}",
                initial_states.len()
            )));
        }
        let v_nominal = leader.velocity(0.0);
        let bounds = cfg.params.iter().map(|p| input_bounds(p, v_nominal)).collect();
        let assumed = initial_states
            .iter()
            .enumerate()
            .map(|(idx, x)| {
                let p = &cfg.params[idx];
                let u = equilibrium_torque(x.velocity, p);
                AssumedTrajectory::from_inputs(idx + 1, x, vec![u; cfg.horizon], p, cfg.dt)
            })
            .collect();
        Ok(Engine { cfg, leader, bounds, states: initial_states, assumed, t: 0 })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.cfg
    }

    pub fn leader_model(&self) -> &LeaderModel {
        &self.leader
    }

    pub fn states(&self) -> &[VehicleState] {
        &self.states
    }

    pub fn assumed(&self) -> &[AssumedTrajectory] {
        &self.assumed
    }

    pub fn time_index(&self) -> usize {
        self.t
    }

    /// Build node i's problem from the information set only.
    fn build_problem(&self, i: usize, leader_now: &Output) -> Result<OcpProblem, PlatoonError> {
        let topo = &self.cfg.topology;
        let neighbor_assumed = topo
            .neighbor_set(i)?
            .into_iter()
            .map(|j| (j, self.assumed[j - 1].clone()))
            .collect();
        let pinned = topo.is_pinned(i);
        let leader_assumed =
            pinned.then(|| AssumedTrajectory::leader(leader_now, self.cfg.horizon, self.cfg.dt));
        let desired = pinned.then(|| {
            desired_setpoint(i, leader_now, self.cfg.spacing, self.cfg.dt, self.cfg.horizon)
        });
        Ok(OcpProblem {
            node: i,
            initial_state: self.states[i - 1],
            params: self.cfg.params[i - 1],
            bounds: self.bounds[i - 1],
            weights: self.cfg.weights[i - 1],
            dt: self.cfg.dt,
            horizon: self.cfg.horizon,
            spacing: self.cfg.spacing,
            own_assumed: self.assumed[i - 1].clone(),
            neighbor_assumed,
            leader_assumed,
            desired,
            options: self.cfg.solver,
        })
    }

    pub fn step(&mut self) -> Result<StepOutcome, PlatoonError> {
        let t = self.t;
        let n = self.cfg.topology.follower_count();
        let leader_now = self.leader.state(t as f64 * self.cfg.dt);

        let problems: Vec<OcpProblem> =
            (1..=n).map(|i| self.build_problem(i, &leader_now)).collect::<Result<_, _>>()?;

        let solutions: Vec<OcpSolution> = problems
            .par_iter()
            .map(|prob| prob.solve())
            .collect::<Result<Vec<_>, _>>()?;

        for (idx, sol) in solutions.iter().enumerate() {
            if sol.status == SolverStatus::Infeasible {
                return Err(PlatoonError::EngineHalt {
                    step: t,
                    node: idx + 1,
                    reason: format!(
                        "local problem infeasible, terminal residual {:.3e}",
                        sol.terminal_residual
                    ),
                });
            }
        }

        let first_stage_costs: Vec<f64> = problems
            .iter()
            .zip(&solutions)
            .map(|(prob, sol)| prob.stage_cost(&sol.outputs[0], sol.inputs[0], 0))
            .collect();

        // Apply the first optimal input to the true plant, then shift and
        // exchange at the step boundary.
        let prev_assumed = std::mem::replace(
            &mut self.assumed,
            Vec::with_capacity(n),
        );
        let mut nodes = Vec::with_capacity(n);
        for (idx, sol) in solutions.iter().enumerate() {
            let p = &self.cfg.params[idx];
            let u = sol.inputs[0];
            let next = vehicle::step(&self.states[idx], u, p, self.cfg.dt);
            self.states[idx] = next;
            self.assumed.push(shift_assumed(idx + 1, sol, p, self.cfg.dt));
            nodes.push(NodeRecord {
                applied_input: u,
                state: next,
                cost: sol.cost,
                status: sol.status,
                terminal_residual: sol.terminal_residual,
                iterations: sol.iterations,
            });
        }

        let leader_next = self.leader.state((t + 1) as f64 * self.cfg.dt);
        let mut spacing_errors = Vec::with_capacity(n);
        let mut velocity_errors = Vec::with_capacity(n);
        for idx in 0..n {
            let ahead = if idx == 0 { leader_next.position } else { self.states[idx - 1].position };
            spacing_errors.push(ahead - self.states[idx].position - self.cfg.spacing);
            velocity_errors.push(self.states[idx].velocity - leader_next.velocity);
        }

        let horizon_window = (self.cfg.horizon + 1) as f64 * self.cfg.dt;
        let detail = StepDetail {
            t,
            leader: leader_now,
            leader_constant_over_horizon: self
                .leader
                .constant_over(t as f64 * self.cfg.dt, horizon_window),
            assumed: prev_assumed,
            solutions,
            first_stage_costs,
        };

        self.t += 1;
        Ok(StepOutcome {
            record: StepRecord { t, nodes, spacing_errors, velocity_errors },
            detail,
        })
    }
}

/// Run a configured platoon for `steps` steps and collect the records.
pub fn run(
    cfg: EngineConfig,
    leader: LeaderModel,
    initial_states: Vec<VehicleState>,
    steps: usize,
) -> Result<Vec<StepRecord>, PlatoonError> {
    if steps == 0 {
        return Err(PlatoonError::Config("step count must be at least 1".into()));
    }
    let mut engine = Engine::new(cfg, leader, initial_states)?;
    let mut records = Vec::with_capacity(steps);
    for _ in 0..steps {
        records.push(engine.step()?.record);
    }
    Ok(records)
}

/// Initial states at the exact desired set point for a given leader state:
/// zero spacing and velocity errors, torque at the drag balance.
pub fn equilibrium_initial_states(
    leader: &LeaderModel,
    params: &[VehicleParams],
    spacing: f64,
) -> Vec<VehicleState> {
    let y0 = leader.state(0.0);
    params
        .iter()
        .enumerate()
        .map(|(idx, p)| VehicleState {
            position: y0.position - (idx as f64 + 1.0) * spacing,
            velocity: y0.velocity,
            torque: equilibrium_torque(y0.velocity, p),
        })
        .collect()
}
