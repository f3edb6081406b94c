//! The per-node open-loop optimal control problem: weighted-norm stage
//! cost, neighborhood-average terminal output constraint, drag-balance
//! terminal torque constraint, and a single-shooting solver (augmented
//! Lagrangian outer loop over projected L-BFGS inner iterations).

use nalgebra::{Matrix2, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::PlatoonError;
use crate::vehicle::{
    self, equilibrium_torque, equilibrium_torque_dv, InputBounds, Output, VehicleParams,
    VehicleState,
};

/// Smoothing constant for the weighted 2-norms inside the solver. The
/// reported cost is always the unsmoothed one.
pub const SMOOTHING_EPS: f64 = 1e-6;

/// Absolute tolerance on the terminal equality constraints for a solution
/// to count as converged.
pub const TERMINAL_TOL: f64 = 1e-6;

/// Stationarity tolerance on the projected gradient of the smoothed cost.
pub const STATIONARITY_TOL: f64 = 1e-6;

/// Residual above which the problem is declared infeasible after the
/// feasibility-restoration phase.
pub const INFEASIBLE_TOL: f64 = 1e-3;

/// Runtime-overridable solver tolerances and iteration caps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverOptions {
    pub terminal_tol: f64,
    pub stationarity_tol: f64,
    pub infeasible_tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            terminal_tol: TERMINAL_TOL,
            stationarity_tol: STATIONARITY_TOL,
            infeasible_tol: INFEASIBLE_TOL,
            max_outer: 8,
            max_inner: 50,
        }
    }
}

/// Cost weights of one node. `q` is zero for unpinned nodes, which do not
/// know the desired set point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightSet {
    pub q: Matrix2<f64>,
    pub r: f64,
    pub f: Matrix2<f64>,
    pub g: Matrix2<f64>,
}

fn min_eigenvalue_sym2(m: &Matrix2<f64>) -> f64 {
    let tr = m[(0, 0)] + m[(1, 1)];
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    let disc = (tr * tr - 4.0 * det).max(0.0).sqrt();
    0.5 * (tr - disc)
}

fn check_psd(name: &str, m: &Matrix2<f64>) -> Result<(), PlatoonError> {
    if (m[(0, 1)] - m[(1, 0)]).abs() > 1e-9 {
        return Err(PlatoonError::Problem(format!("weight {name} is not symmetric")));
    }
    let min_eig = min_eigenvalue_sym2(m);
    if min_eig < -1e-12 {
        return Err(PlatoonError::Problem(format!(
            "weight {name} has negative eigenvalue {min_eig:.3e}"
        )));
    }
    Ok(())
}

impl WeightSet {
    pub fn new(q: Matrix2<f64>, r: f64, f: Matrix2<f64>, g: Matrix2<f64>) -> Result<Self, PlatoonError> {
        let set = WeightSet { q, r, f, g };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), PlatoonError> {
        check_psd("Q", &self.q)?;
        check_psd("F", &self.f)?;
        check_psd("G", &self.g)?;
        if self.r < 0.0 {
            return Err(PlatoonError::Problem(format!(
                "weight R must be nonnegative, got {}",
                self.r
            )));
        }
        Ok(())
    }

    /// Scaled-identity constructor used by the bundled presets.
    pub fn scaled(q: f64, r: f64, f: f64, g: f64) -> Self {
        WeightSet {
            q: Matrix2::identity() * q,
            r,
            f: Matrix2::identity() * f,
            g: Matrix2::identity() * g,
        }
    }
}

/// The shifted previous-step optimal trajectory a node broadcasts.
/// `outputs` has `horizon + 1` entries; the last one is the constant-speed
/// extension of index `horizon - 1`, which is what the terminal constraint
/// of the receiving nodes consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct AssumedTrajectory {
    pub owner: usize,
    pub outputs: Vec<Output>,
    pub inputs: Vec<f64>,
}

/// Advance an output one step at constant speed: s += v dt, v unchanged.
pub fn extend_terminal(y: &Output, dt: f64) -> Output {
    Output { position: y.position + y.velocity * dt, velocity: y.velocity }
}

impl AssumedTrajectory {
    /// Build from an input sequence rolled out from `x0`. The final output
    /// slot is filled by the constant-speed extension, not the dynamics.
    pub fn from_inputs(
        owner: usize,
        x0: &VehicleState,
        inputs: Vec<f64>,
        p: &VehicleParams,
        dt: f64,
    ) -> Self {
        let states = vehicle::rollout(x0, &inputs, p, dt);
        let horizon = inputs.len();
        let mut outputs: Vec<Output> =
            states[..horizon].iter().map(vehicle::output_of).collect();
        outputs.push(extend_terminal(&outputs[horizon - 1], dt));
        AssumedTrajectory { owner, outputs, inputs }
    }

    /// The leader broadcasts its constant-speed prediction anchored at its
    /// current true state.
    pub fn leader(y0: &Output, horizon: usize, dt: f64) -> Self {
        let outputs = (0..=horizon)
            .map(|k| Output {
                position: y0.position + y0.velocity * dt * k as f64,
                velocity: y0.velocity,
            })
            .collect();
        AssumedTrajectory { owner: 0, outputs, inputs: Vec::new() }
    }

    pub fn horizon(&self) -> usize {
        self.outputs.len() - 1
    }
}

/// Desired distance vector between node i and node j: when node j sits at
/// its set point, `y_j + spacing_vector(i, j, d0)` is node i's set point.
pub fn spacing_vector(i: usize, j: usize, d0: f64) -> Vector2<f64> {
    Vector2::new(-(i as f64 - j as f64) * d0, 0.0)
}

/// Weighted Euclidean norm (x^T W x)^{1/2}.
pub fn weighted_norm(x: &Vector2<f64>, w: &Matrix2<f64>) -> f64 {
    (w * x).dot(x).max(0.0).sqrt()
}

fn smoothed_norm(x: &Vector2<f64>, w: &Matrix2<f64>) -> f64 {
    ((w * x).dot(x).max(0.0) + SMOOTHING_EPS * SMOOTHING_EPS).sqrt() - SMOOTHING_EPS
}

/// d/dx of the smoothed weighted norm.
fn smoothed_norm_grad(x: &Vector2<f64>, w: &Matrix2<f64>) -> Vector2<f64> {
    let wx = w * x;
    let denom = (wx.dot(x).max(0.0) + SMOOTHING_EPS * SMOOTHING_EPS).sqrt();
    wx / denom
}

/// One node's optimal control problem at one time step.
#[derive(Debug, Clone)]
pub struct OcpProblem {
    pub node: usize,
    pub initial_state: VehicleState,
    pub params: VehicleParams,
    pub bounds: InputBounds,
    pub weights: WeightSet,
    pub dt: f64,
    pub horizon: usize,
    pub spacing: f64,
    pub own_assumed: AssumedTrajectory,
    /// Assumed trajectories of the in-neighbors, keyed by follower index.
    pub neighbor_assumed: BTreeMap<usize, AssumedTrajectory>,
    /// Present exactly when the node is pinned to the leader.
    pub leader_assumed: Option<AssumedTrajectory>,
    /// Desired outputs over the horizon; present exactly when pinned.
    pub desired: Option<Vec<Output>>,
    pub options: SolverOptions,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolverStatus {
    Converged,
    MaxIterations,
    Infeasible,
}

impl std::fmt::Display for SolverStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SolverStatus::Converged => write!(f, "converged"),
            SolverStatus::MaxIterations => write!(f, "max_iterations"),
            SolverStatus::Infeasible => write!(f, "infeasible"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct OcpSolution {
    pub inputs: Vec<f64>,
    pub states: Vec<VehicleState>,
    pub outputs: Vec<Output>,
    /// Unsmoothed optimal cost.
    pub cost: f64,
    pub status: SolverStatus,
    pub iterations: usize,
    /// Max-abs residual of the terminal equality constraints.
    pub terminal_residual: f64,
}

impl OcpProblem {
    pub fn validate(&self) -> Result<(), PlatoonError> {
        if self.horizon < 2 {
            return Err(PlatoonError::Problem(format!(
                "horizon must be at least 2, got {}",
                self.horizon
            )));
        }
        let pinned = self.leader_assumed.is_some();
        if pinned != self.desired.is_some() {
            return Err(PlatoonError::Problem(
                "leader trajectory and desired set point must be both present or both absent".into(),
            ));
        }
        if !pinned && self.neighbor_assumed.is_empty() {
            return Err(PlatoonError::Problem(format!(
                "node {} has an empty information set",
                self.node
            )));
        }
        if !pinned && self.weights.q != Matrix2::zeros() {
            return Err(PlatoonError::Problem(format!(
                "node {} is unpinned but has a nonzero Q weight",
                self.node
            )));
        }
        if self.own_assumed.horizon() != self.horizon {
            return Err(PlatoonError::Problem("own assumed trajectory length mismatch".into()));
        }
        for (j, traj) in &self.neighbor_assumed {
            if traj.horizon() != self.horizon {
                return Err(PlatoonError::Problem(format!(
                    "assumed trajectory of neighbor {j} has wrong length"
                )));
            }
        }
        if let Some(traj) = &self.leader_assumed {
            if traj.horizon() != self.horizon {
                return Err(PlatoonError::Problem("leader trajectory length mismatch".into()));
            }
        }
        if let Some(desired) = &self.desired {
            if desired.len() != self.horizon + 1 {
                return Err(PlatoonError::Problem("desired set point length mismatch".into()));
            }
        }
        Ok(())
    }

    /// Size of the information set I_i = N_i ∪ P_i.
    pub fn info_count(&self) -> usize {
        self.neighbor_assumed.len() + usize::from(self.leader_assumed.is_some())
    }

    /// Stage cost l_i at horizon index `k` for a candidate output/input.
    pub fn stage_cost(&self, y_p: &Output, u_p: f64, k: usize) -> f64 {
        debug_assert!(k < self.horizon);
        let y = Vector2::new(y_p.position, y_p.velocity);
        let mut cost = 0.0;
        if let Some(desired) = &self.desired {
            let r = y - Vector2::new(desired[k].position, desired[k].velocity);
            cost += weighted_norm(&r, &self.weights.q);
        }
        let h = equilibrium_torque(y_p.velocity, &self.params);
        cost += (self.weights.r * (u_p - h) * (u_p - h)).sqrt();
        let ya = &self.own_assumed.outputs[k];
        cost += weighted_norm(&(y - Vector2::new(ya.position, ya.velocity)), &self.weights.f);
        for (&j, traj) in &self.neighbor_assumed {
            let d = spacing_vector(self.node, j, self.spacing);
            let yj = &traj.outputs[k];
            cost += weighted_norm(&(y - Vector2::new(yj.position, yj.velocity) - d), &self.weights.g);
        }
        cost
    }

    /// Terminal output target: the information-set average of extended
    /// assumed outputs, shifted by the desired spacing vectors.
    pub fn terminal_output_target(&self) -> Output {
        let mut acc = Vector2::zeros();
        let mut count = 0.0;
        for (&j, traj) in &self.neighbor_assumed {
            let y = &traj.outputs[self.horizon];
            acc += Vector2::new(y.position, y.velocity) + spacing_vector(self.node, j, self.spacing);
            count += 1.0;
        }
        if let Some(traj) = &self.leader_assumed {
            let y = &traj.outputs[self.horizon];
            acc += Vector2::new(y.position, y.velocity) + spacing_vector(self.node, 0, self.spacing);
            count += 1.0;
        }
        debug_assert!(count > 0.0);
        acc /= count;
        Output { position: acc.x, velocity: acc.y }
    }

    /// Unsmoothed objective of an input sequence along its own rollout.
    pub fn total_cost(&self, inputs: &[f64]) -> f64 {
        debug_assert_eq!(inputs.len(), self.horizon);
        let states = vehicle::rollout(&self.initial_state, inputs, &self.params, self.dt);
        (0..self.horizon)
            .map(|k| self.stage_cost(&vehicle::output_of(&states[k]), inputs[k], k))
            .sum()
    }

    /// Terminal constraint residuals [s - s_target, v - v_target, T - h(v)].
    pub fn terminal_residuals(&self, states: &[VehicleState]) -> Vector3<f64> {
        let target = self.terminal_output_target();
        let xn = &states[self.horizon];
        Vector3::new(
            xn.position - target.position,
            xn.velocity - target.velocity,
            xn.torque - equilibrium_torque(xn.velocity, &self.params),
        )
    }

    pub fn solve(&self) -> Result<OcpSolution, PlatoonError> {
        self.validate()?;
        Ok(Solver::new(self).run())
    }
}

/// Terminal torque that makes the vehicle coast at `v_terminal`.
pub fn terminal_torque_target(v_terminal: f64, p: &VehicleParams) -> f64 {
    equilibrium_torque(v_terminal, p)
}

// ---------------------------------------------------------------------------
// Solver internals: single shooting on the input sequence, adjoint gradients,
// augmented Lagrangian on the three terminal equalities, projected L-BFGS
// inner iterations on the box.
// ---------------------------------------------------------------------------

const LBFGS_MEMORY: usize = 10;
const PENALTY_GROWTH: f64 = 10.0;

struct Solver<'a> {
    prob: &'a OcpProblem,
    target: Output,
    iterations: usize,
}

struct BestIterate {
    inputs: Vec<f64>,
    cost: f64,
    residual: f64,
}

impl<'a> Solver<'a> {
    fn new(prob: &'a OcpProblem) -> Self {
        Solver { prob, target: prob.terminal_output_target(), iterations: 0 }
    }

    fn constraints(&self, states: &[VehicleState]) -> Vector3<f64> {
        let xn = &states[self.prob.horizon];
        Vector3::new(
            xn.position - self.target.position,
            xn.velocity - self.target.velocity,
            xn.torque - equilibrium_torque(xn.velocity, &self.prob.params),
        )
    }

    /// Smoothed objective plus augmented-Lagrangian terms, and its gradient
    /// with respect to the input sequence via the adjoint recursion.
    fn eval(&self, inputs: &[f64], lambda: &Vector3<f64>, mu: f64) -> (f64, Vec<f64>) {
        let p = &self.prob.params;
        let dt = self.prob.dt;
        let np = self.prob.horizon;
        let states = vehicle::rollout(&self.prob.initial_state, inputs, p, dt);
        let c = self.constraints(&states);

        let mut value = lambda.dot(&c) + 0.5 * mu * c.norm_squared();

        // Multiplier estimate for the adjoint seed.
        let w = lambda + mu * c;
        let vn = states[np].velocity;
        let mut adj = Vector3::new(w.x, w.y - w.z * equilibrium_torque_dv(vn, p), w.z);

        let mut grad = vec![0.0; np];
        let psi = dt / p.tau;
        for k in (0..np).rev() {
            let x = &states[k];
            let y = Vector2::new(x.position, x.velocity);
            let u = inputs[k];

            // Stage cost value and gradient in (y, u).
            let mut gy = Vector2::zeros();
            if let Some(desired) = &self.prob.desired {
                let r = y - Vector2::new(desired[k].position, desired[k].velocity);
                value += smoothed_norm(&r, &self.prob.weights.q);
                gy += smoothed_norm_grad(&r, &self.prob.weights.q);
            }
            let ya = &self.prob.own_assumed.outputs[k];
            let rf = y - Vector2::new(ya.position, ya.velocity);
            value += smoothed_norm(&rf, &self.prob.weights.f);
            gy += smoothed_norm_grad(&rf, &self.prob.weights.f);
            for (&j, traj) in &self.prob.neighbor_assumed {
                let d = spacing_vector(self.prob.node, j, self.prob.spacing);
                let yj = &traj.outputs[k];
                let rg = y - Vector2::new(yj.position, yj.velocity) - d;
                value += smoothed_norm(&rg, &self.prob.weights.g);
                gy += smoothed_norm_grad(&rg, &self.prob.weights.g);
            }

            let h = equilibrium_torque(x.velocity, p);
            let rho = u - h;
            let rw = self.prob.weights.r;
            let denom = (rw * rho * rho + SMOOTHING_EPS * SMOOTHING_EPS).sqrt();
            value += denom - SMOOTHING_EPS;
            let du = rw * rho / denom;
            let dv_from_input_term = -equilibrium_torque_dv(x.velocity, p) * du;

            // Input gradient picks up the one-step-ahead adjoint through psi.
            grad[k] = psi * adj.z + du;

            // Dynamics Jacobian at x_k, transposed onto the adjoint.
            let dvdv = 1.0 - dt / p.mass * 2.0 * p.drag_coeff * x.velocity;
            let dvdt_ = dt / p.mass * (p.driveline_eff / p.wheel_radius);
            let dtdt = 1.0 - dt / p.tau;
            adj = Vector3::new(
                adj.x + gy.x,
                dt * adj.x + dvdv * adj.y + gy.y + dv_from_input_term,
                dvdt_ * adj.y + dtdt * adj.z,
            );
        }
        (value, grad)
    }

    fn project(&self, u: f64) -> f64 {
        self.prob.bounds.clamp(u)
    }

    /// Max-abs projected gradient, the stationarity measure on the box.
    fn projected_gradient_norm(&self, inputs: &[f64], grad: &[f64]) -> f64 {
        inputs
            .iter()
            .zip(grad)
            .map(|(&u, &g)| (u - self.project(u - g)).abs())
            .fold(0.0, f64::max)
    }

    /// Inverse diagonal curvature estimate: the analytic second derivative
    /// of the smoothed input term plus a quasi-Newton estimate of the rest.
    fn input_term_precondition(
        &self,
        inputs: &[f64],
        s_hist: &[Vec<f64>],
        y_hist: &[Vec<f64>],
    ) -> Vec<f64> {
        let p = &self.prob.params;
        let rw = self.prob.weights.r;
        let states = vehicle::rollout(&self.prob.initial_state, inputs, p, self.prob.dt);
        // Smooth-part curvature from the most recent secant pair, floored
        // to stay positive definite.
        let smooth = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => {
                let sy: f64 = s.iter().zip(y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|a| a * a).sum();
                if sy > 0.0 && ss > 0.0 {
                    (sy / ss).max(1e-8)
                } else {
                    1e-4
                }
            }
            _ => 1e-4,
        };
        inputs
            .iter()
            .enumerate()
            .map(|(k, &u)| {
                let rho = u - equilibrium_torque(states[k].velocity, p);
                let base = rw * rho * rho + SMOOTHING_EPS * SMOOTHING_EPS;
                let stiff = rw * SMOOTHING_EPS * SMOOTHING_EPS / (base * base.sqrt());
                1.0 / (stiff + smooth)
            })
            .collect()
    }

    /// Projected L-BFGS with Armijo backtracking on the fixed (lambda, mu)
    /// subproblem. Returns the final projected-gradient norm.
    fn solve_subproblem(
        &mut self,
        inputs: &mut Vec<f64>,
        lambda: &Vector3<f64>,
        mu: f64,
        tol: f64,
    ) -> f64 {
        let mut s_hist: Vec<Vec<f64>> = Vec::new();
        let mut y_hist: Vec<Vec<f64>> = Vec::new();
        let mut rho_hist: Vec<f64> = Vec::new();

        let (mut value, mut grad) = self.eval(inputs, lambda, mu);
        for _ in 0..self.prob.options.max_inner {
            self.iterations += 1;
            let pg = self.projected_gradient_norm(inputs, &grad);
            if pg <= tol {
                return pg;
            }

            // The smoothed input term has curvature R eps^2 / (R rho^2 +
            // eps^2)^{3/2} — up to 1/eps near its kink — while everything
            // else is mildly curved. Seed the two-loop recursion with the
            // analytic diagonal so steps stay Newton-like there.
            let precond = self.input_term_precondition(inputs, &s_hist, &y_hist);

            // Two-loop recursion for the quasi-Newton direction.
            let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
            let m = s_hist.len();
            let mut alphas = vec![0.0; m];
            for i in (0..m).rev() {
                let a = rho_hist[i]
                    * s_hist[i].iter().zip(&dir).map(|(s, d)| s * d).sum::<f64>();
                alphas[i] = a;
                for (d, y) in dir.iter_mut().zip(&y_hist[i]) {
                    *d -= a * y;
                }
            }
            for (d, h0) in dir.iter_mut().zip(&precond) {
                *d *= h0;
            }
            for i in 0..m {
                let b = rho_hist[i]
                    * y_hist[i].iter().zip(&dir).map(|(y, d)| y * d).sum::<f64>();
                for (d, s) in dir.iter_mut().zip(&s_hist[i]) {
                    *d += (alphas[i] - b) * s;
                }
            }

            // Backtracking on the projected arc.
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let candidate: Vec<f64> = inputs
                    .iter()
                    .zip(&dir)
                    .map(|(&u, &d)| self.project(u + alpha * d))
                    .collect();
                let step_dot: f64 = candidate
                    .iter()
                    .zip(inputs.iter())
                    .zip(&grad)
                    .map(|((c, u), g)| (c - u) * g)
                    .sum();
                if step_dot >= 0.0 {
                    // Not a descent direction after projection; restart the
                    // quasi-Newton memory and fall back to projected gradient.
                    break;
                }
                let (cand_value, cand_grad) = self.eval(&candidate, lambda, mu);
                if cand_value <= value + 1e-4 * step_dot {
                    let s_vec: Vec<f64> =
                        candidate.iter().zip(inputs.iter()).map(|(c, u)| c - u).collect();
                    let y_vec: Vec<f64> =
                        cand_grad.iter().zip(&grad).map(|(cg, g)| cg - g).collect();
                    let sy: f64 = s_vec.iter().zip(&y_vec).map(|(s, y)| s * y).sum();
                    if sy > 1e-12 * s_vec.iter().map(|s| s * s).sum::<f64>().sqrt()
                        * y_vec.iter().map(|y| y * y).sum::<f64>().sqrt()
                    {
                        s_hist.push(s_vec);
                        y_hist.push(y_vec);
                        rho_hist.push(1.0 / sy);
                        if s_hist.len() > LBFGS_MEMORY {
                            s_hist.remove(0);
                            y_hist.remove(0);
                            rho_hist.remove(0);
                        }
                    }
                    *inputs = candidate;
                    value = cand_value;
                    grad = cand_grad;
                    accepted = true;
                    break;
                }
                alpha *= 0.5;
            }
            if !accepted {
                if s_hist.is_empty() {
                    // Pure projected gradient also failed to make progress.
                    return self.projected_gradient_norm(inputs, &grad);
                }
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                let mut alpha = 1.0;
                let mut moved = false;
                for _ in 0..60 {
                    let candidate: Vec<f64> = inputs
                        .iter()
                        .zip(&grad)
                        .zip(&precond)
                        .map(|((&u, &g), &h0)| self.project(u - alpha * h0 * g))
                        .collect();
                    let step_dot: f64 = candidate
                        .iter()
                        .zip(inputs.iter())
                        .zip(&grad)
                        .map(|((c, u), g)| (c - u) * g)
                        .sum();
                    let (cand_value, cand_grad) = self.eval(&candidate, lambda, mu);
                    if cand_value <= value + 1e-4 * step_dot {
                        *inputs = candidate;
                        value = cand_value;
                        grad = cand_grad;
                        moved = true;
                        break;
                    }
                    alpha *= 0.5;
                }
                if !moved {
                    return self.projected_gradient_norm(inputs, &grad);
                }
            }
        }
        let (_, grad) = self.eval(inputs, lambda, mu);
        self.projected_gradient_norm(inputs, &grad)
    }

    /// Jacobian of the three terminal constraints w.r.t. the inputs, one
    /// adjoint sweep per constraint row.
    fn constraint_jacobian(&self, states: &[VehicleState]) -> nalgebra::Matrix3xX<f64> {
        let p = &self.prob.params;
        let dt = self.prob.dt;
        let np = self.prob.horizon;
        let psi = dt / p.tau;
        let mut jac = nalgebra::Matrix3xX::zeros(np);
        let hs = equilibrium_torque_dv(states[np].velocity, p);
        let seeds =
            [Vector3::new(1.0, 0.0, 0.0), Vector3::new(0.0, 1.0, 0.0), Vector3::new(0.0, -hs, 1.0)];
        for (row, seed) in seeds.iter().enumerate() {
            let mut adj = *seed;
            for k in (0..np).rev() {
                let x = &states[k];
                jac[(row, k)] = psi * adj.z;
                let dvdv = 1.0 - dt / p.mass * 2.0 * p.drag_coeff * x.velocity;
                let dvdt_ = dt / p.mass * (p.driveline_eff / p.wheel_radius);
                let dtdt = 1.0 - dt / p.tau;
                adj = Vector3::new(adj.x, dt * adj.x + dvdv * adj.y, dvdt_ * adj.y + dtdt * adj.z);
            }
        }
        jac
    }

    /// Projection onto the terminal-constraint manifold by box-projected,
    /// row-scaled Levenberg-Marquardt least-norm corrections. Returns the
    /// final max-abs residual.
    fn project_onto_constraints(&self, inputs: &mut [f64]) -> f64 {
        let prob = self.prob;
        let rollout =
            |u: &[f64]| vehicle::rollout(&prob.initial_state, u, &prob.params, prob.dt);

        // Fixed row scaling: the position/velocity rows are orders of
        // magnitude smaller than the torque row.
        let states = rollout(inputs);
        let jac0 = self.constraint_jacobian(&states);
        let row_scale = Vector3::from_fn(|r, _| {
            let norm = jac0.row(r).norm();
            if norm > 1e-12 {
                1.0 / norm
            } else {
                1.0
            }
        });
        let scaled_sq = |c: &Vector3<f64>| {
            let s = c.component_mul(&row_scale);
            s.norm_squared()
        };

        let mut c = self.constraints(&states);
        let mut value = scaled_sq(&c);
        let mut damping = 1e-10;
        for _ in 0..100 {
            if c.amax() <= 1e-12 {
                break;
            }
            let states = rollout(inputs);
            let jac = self.constraint_jacobian(&states);
            // Scaled system: minimize || D c + D J du ||^2 + damping ||du||^2.
            let mut sjac = jac.clone();
            for r in 0..3 {
                for k in 0..sjac.ncols() {
                    sjac[(r, k)] *= row_scale[r];
                }
            }
            let sc = c.component_mul(&row_scale);
            let a = &sjac * sjac.transpose() + nalgebra::Matrix3::identity() * damping;
            let Some(inv) = a.try_inverse() else { break };
            let dy = inv * (-sc);
            let du = sjac.transpose() * dy;
            let candidate: Vec<f64> = inputs
                .iter()
                .zip(du.iter())
                .map(|(&u, &d)| self.project(u + d))
                .collect();
            let c_new = self.constraints(&rollout(&candidate));
            let value_new = scaled_sq(&c_new);

            // Gain ratio uses the step that survives box clipping: a long
            // least-norm step that mostly clips predicts little and earns
            // more damping, which shortens the next step back into the box.
            let du_taken = nalgebra::DVector::from_iterator(
                inputs.len(),
                candidate.iter().zip(inputs.iter()).map(|(cand, u)| cand - u),
            );
            let predicted_residual = sc + &sjac * du_taken;
            let predicted = value - predicted_residual.norm_squared();
            let actual = value - value_new;
            let ratio = if predicted > 0.0 { actual / predicted } else { -1.0 };

            if actual > 0.0 {
                inputs.copy_from_slice(&candidate);
                c = c_new;
                value = value_new;
            }
            if ratio > 0.75 {
                damping = (damping * 0.25).max(1e-14);
            } else if ratio < 0.25 {
                damping *= 10.0;
                if damping > 1e10 {
                    // Step size has collapsed: the residual is at a local
                    // minimum inside the box.
                    break;
                }
            }
        }
        c.amax()
    }

    /// Least-squares KKT multiplier estimate at the current point:
    /// lambda = -(J J^T)^-1 J grad_f.
    fn multiplier_estimate(&self, inputs: &[f64]) -> Vector3<f64> {
        let prob = self.prob;
        let (_, grad) = self.eval(inputs, &Vector3::zeros(), 0.0);
        let states = vehicle::rollout(&prob.initial_state, inputs, &prob.params, prob.dt);
        let jac = self.constraint_jacobian(&states);
        let jjt = &jac * jac.transpose();
        match jjt.try_inverse() {
            Some(inv) => {
                let g = nalgebra::DVector::from_column_slice(&grad);
                -(inv * (&jac * g))
            }
            None => Vector3::zeros(),
        }
    }

    fn run(mut self) -> OcpSolution {
        let prob = self.prob;
        let opts = prob.options;
        let trace = std::env::var_os("PLATOON_SOLVER_TRACE").is_some();
        let mut inputs: Vec<f64> =
            prob.own_assumed.inputs.iter().map(|&u| self.project(u)).collect();

        let mut best: Option<BestIterate> = None;
        let consider = |inputs: &[f64], residual: f64, best: &mut Option<BestIterate>| {
            if residual > opts.terminal_tol {
                return;
            }
            let cost = prob.total_cost(inputs);
            let better = match best {
                None => true,
                Some(b) => cost < b.cost,
            };
            if better {
                *best = Some(BestIterate { inputs: inputs.to_vec(), cost, residual });
            }
        };

        // Polish the warm start onto the terminal-constraint manifold and
        // keep it as a candidate: after terminal consensus the shift is
        // already (almost) feasible, so the returned cost can never exceed
        // the shifted previous solution's. If even Gauss-Newton cannot get
        // near the manifold, the target is out of reach.
        let warm_residual = self.project_onto_constraints(&mut inputs);
        consider(&inputs, warm_residual, &mut best);
        if warm_residual > opts.infeasible_tol {
            let states = vehicle::rollout(&prob.initial_state, &inputs, &prob.params, prob.dt);
            return self.finish(inputs, states, SolverStatus::Infeasible, warm_residual);
        }

        // The constraint Jacobian w.r.t. torque inputs is O(dt^2/m) while
        // the cost gradients are O(1); size the penalty so the two compete
        // from the first outer iteration.
        let jac_scale = (prob.dt * prob.dt / prob.params.mass
            * prob.params.driveline_eff
            / prob.params.wheel_radius
            * prob.horizon as f64)
            .max(1e-12);
        let mut mu = (1.0 / (jac_scale * jac_scale)).clamp(10.0, 1e10);
        let mut lambda = self.multiplier_estimate(&inputs);
        let mut last_cost = prob.total_cost(&inputs);
        for outer in 0..opts.max_outer {
            let tol = (1e-3 * 0.1_f64.powi(outer as i32)).max(0.2 * opts.stationarity_tol);
            self.solve_subproblem(&mut inputs, &lambda, mu, tol);

            // Return to the manifold, then re-estimate the multipliers and
            // measure first-order optimality of the Lagrangian there.
            let residual = self.project_onto_constraints(&mut inputs);
            consider(&inputs, residual, &mut best);
            lambda = self.multiplier_estimate(&inputs);
            let (_, lag_grad) = self.eval(&inputs, &lambda, 0.0);
            let stationarity = self.projected_gradient_norm(&inputs, &lag_grad);
            let cost = prob.total_cost(&inputs);

            if trace {
                eprintln!(
                    "node {} outer {outer}: mu {mu:.2e} stat {stationarity:.3e} res {residual:.3e} cost {cost:.6e}",
                    prob.node,
                );
            }

            if residual <= 0.1 * opts.terminal_tol && stationarity <= opts.stationarity_tol {
                break;
            }
            // Optimize-then-restore made no headway on the feasible cost:
            // tighten the penalty so the subproblem stays closer to the
            // manifold next round.
            if cost > last_cost - 1e-12 {
                mu *= PENALTY_GROWTH;
            }
            last_cost = cost;
        }

        match best {
            Some(b) => {
                let states = vehicle::rollout(&prob.initial_state, &b.inputs, &prob.params, prob.dt);
                let lambda_b = self.multiplier_estimate(&b.inputs);
                let (_, lag_grad) = self.eval(&b.inputs, &lambda_b, 0.0);
                let stat_b = self.projected_gradient_norm(&b.inputs, &lag_grad);
                let status = if b.residual <= opts.terminal_tol && stat_b <= opts.stationarity_tol {
                    SolverStatus::Converged
                } else {
                    // Feasible but short of the stationarity target.
                    SolverStatus::MaxIterations
                };
                self.finish(b.inputs, states, status, b.residual)
            }
            None => {
                let states = vehicle::rollout(&prob.initial_state, &inputs, &prob.params, prob.dt);
                let residual = self.constraints(&states).amax();
                let status = if residual > opts.infeasible_tol {
                    SolverStatus::Infeasible
                } else {
                    SolverStatus::MaxIterations
                };
                self.finish(inputs, states, status, residual)
            }
        }
    }

    #[cfg(test)]
    fn eval_for_test(prob: &OcpProblem, inputs: &[f64], lambda: &Vector3<f64>, mu: f64) -> (f64, Vec<f64>) {
        Solver::new(prob).eval(inputs, lambda, mu)
    }

    fn finish(
        self,
        inputs: Vec<f64>,
        states: Vec<VehicleState>,
        status: SolverStatus,
        terminal_residual: f64,
    ) -> OcpSolution {
        let cost = self.prob.total_cost(&inputs);
        let outputs = states.iter().map(vehicle::output_of).collect();
        OcpSolution {
            inputs,
            states,
            outputs,
            cost,
            status,
            iterations: self.iterations,
            terminal_residual,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vehicle::{equilibrium_torque, input_bounds, VehicleParams, VehicleState};
    use approx::assert_relative_eq;

    fn row1() -> VehicleParams {
        VehicleParams::passenger_car(1035.7, 0.51, 0.99, 0.30)
    }

    fn row2() -> VehicleParams {
        VehicleParams::passenger_car(1849.1, 0.75, 1.15, 0.38)
    }

    /// A two-node chain problem for node 2 around a 20 m/s cruise, with the
    /// neighbor's assumed trajectory perturbed off the set point.
    fn chain_problem(horizon: usize, perturb: f64) -> OcpProblem {
        let dt = 0.1;
        let p = row2();
        let v0 = 20.0;
        let x0 = VehicleState::new(-40.0, v0, equilibrium_torque(v0, &p));
        let own = AssumedTrajectory::from_inputs(
            2,
            &x0,
            vec![equilibrium_torque(v0, &p); horizon],
            &p,
            dt,
        );
        let p1 = row1();
        let x1 = VehicleState::new(-20.0 + perturb, v0, equilibrium_torque(v0, &p1));
        let neighbor = AssumedTrajectory::from_inputs(
            1,
            &x1,
            vec![equilibrium_torque(v0, &p1); horizon],
            &p1,
            dt,
        );
        OcpProblem {
            node: 2,
            initial_state: x0,
            params: p,
            bounds: input_bounds(&p, v0),
            weights: WeightSet::scaled(0.0, 1.0, 10.0, 5.0),
            dt,
            horizon,
            spacing: 20.0,
            own_assumed: own,
            neighbor_assumed: BTreeMap::from([(1, neighbor)]),
            leader_assumed: None,
            desired: None,
            options: SolverOptions::default(),
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let prob = chain_problem(6, 0.8);
        let lambda = Vector3::new(0.3, -0.7, 1.2);
        let mu = 50.0;
        let u_eq = equilibrium_torque(20.0, &prob.params);
        let inputs: Vec<f64> =
            (0..6).map(|k| u_eq + 40.0 * (k as f64 - 2.5)).collect();
        let (_, grad) = Solver::eval_for_test(&prob, &inputs, &lambda, mu);
        let h = 1e-4;
        for k in 0..6 {
            let mut up = inputs.clone();
            let mut dn = inputs.clone();
            up[k] += h;
            dn[k] -= h;
            let (fp, _) = Solver::eval_for_test(&prob, &up, &lambda, mu);
            let (fm, _) = Solver::eval_for_test(&prob, &dn, &lambda, mu);
            let fd = (fp - fm) / (2.0 * h);
            assert_relative_eq!(grad[k], fd, epsilon = 1e-6, max_relative = 1e-5);
        }
    }

    #[test]
    fn spacing_vector_examples() {
        assert_eq!(spacing_vector(3, 1, 20.0), Vector2::new(-40.0, 0.0));
        assert_eq!(spacing_vector(1, 0, 20.0), Vector2::new(-20.0, 0.0));
        assert_eq!(spacing_vector(2, 1, 20.0), Vector2::new(-20.0, 0.0));
        assert_eq!(spacing_vector(3, 0, 20.0), Vector2::new(-60.0, 0.0));
        assert_eq!(spacing_vector(2, 2, 20.0), Vector2::new(0.0, 0.0));
    }

    /// A pinned single-node problem tracking a constant-speed leader.
    fn pinned_problem(horizon: usize) -> OcpProblem {
        let dt = 0.1;
        let p = row1();
        let v0 = 20.0;
        let x0 = VehicleState::new(-20.0, v0, equilibrium_torque(v0, &p));
        let own = AssumedTrajectory::from_inputs(
            1,
            &x0,
            vec![equilibrium_torque(v0, &p); horizon],
            &p,
            dt,
        );
        let leader =
            AssumedTrajectory::leader(&Output { position: 0.0, velocity: v0 }, horizon, dt);
        let desired: Vec<Output> = leader
            .outputs
            .iter()
            .map(|y| Output { position: y.position - 20.0, velocity: y.velocity })
            .collect();
        OcpProblem {
            node: 1,
            initial_state: x0,
            params: p,
            bounds: input_bounds(&p, v0),
            weights: WeightSet::scaled(10.0, 1.0, 10.0, 0.0),
            dt,
            horizon,
            spacing: 20.0,
            own_assumed: own,
            neighbor_assumed: BTreeMap::new(),
            leader_assumed: Some(leader),
            desired: Some(desired),
            options: SolverOptions::default(),
        }
    }

    #[test]
    fn stage_cost_hand_values() {
        // Q = 10 I, tracking residual [1, 0.5], all other terms zero:
        // sqrt(10 * (1 + 0.25)) = sqrt(12.5).
        let mut prob = pinned_problem(4);
        prob.weights = WeightSet::scaled(10.0, 0.0, 0.0, 0.0);
        let des = prob.desired.as_ref().unwrap()[0];
        let y = Output { position: des.position + 1.0, velocity: des.velocity + 0.5 };
        let u = equilibrium_torque(y.velocity, &prob.params);
        assert_relative_eq!(prob.stage_cost(&y, u, 0), 3.5355339, epsilon = 1e-6);

        // G = 5 I, single-neighbor residual [0.2, 0]: sqrt(5 * 0.04).
        let mut prob = chain_problem(4, 0.0);
        prob.weights = WeightSet::scaled(0.0, 0.0, 0.0, 5.0);
        let yn = prob.neighbor_assumed[&1].outputs[2];
        let y = Output { position: yn.position - 20.0 + 0.2, velocity: yn.velocity };
        let u = equilibrium_torque(y.velocity, &prob.params);
        assert_relative_eq!(prob.stage_cost(&y, u, 2), 0.4472136, epsilon = 1e-6);

        // All residuals zero at the consensus point.
        let prob = chain_problem(4, 0.0);
        let y = prob.own_assumed.outputs[1];
        let u = equilibrium_torque(y.velocity, &prob.params);
        assert!(prob.stage_cost(&y, u, 1).abs() < 1e-9);
    }

    #[test]
    fn terminal_output_target_single_neighbor() {
        let mut prob = chain_problem(3, 0.0);
        prob.neighbor_assumed.get_mut(&1).unwrap().outputs[3] =
            Output { position: 100.0, velocity: 20.0 };
        let target = prob.terminal_output_target();
        assert_relative_eq!(target.position, 80.0, epsilon = 1e-12);
        assert_relative_eq!(target.velocity, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn terminal_output_target_two_members() {
        let mut prob = chain_problem(3, 0.0);
        prob.neighbor_assumed.get_mut(&1).unwrap().outputs[3] =
            Output { position: 120.0, velocity: 20.0 };
        let mut leader =
            AssumedTrajectory::leader(&Output { position: 140.0, velocity: 20.0 }, 3, prob.dt);
        leader.outputs[3] = Output { position: 140.0, velocity: 20.0 };
        prob.leader_assumed = Some(leader);
        let target = prob.terminal_output_target();
        assert_relative_eq!(target.position, 100.0, epsilon = 1e-12);
        assert_relative_eq!(target.velocity, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn terminal_output_target_of_consensus_is_set_point() {
        // All members already at their set points: the averaged target is
        // exactly this node's desired terminal output.
        let prob = chain_problem(5, 0.0);
        let target = prob.terminal_output_target();
        let own = prob.own_assumed.outputs[5];
        assert_relative_eq!(target.position, own.position, epsilon = 1e-9);
        assert_relative_eq!(target.velocity, own.velocity, epsilon = 1e-12);
    }

    #[test]
    fn terminal_torque_target_hand_values() {
        assert_relative_eq!(terminal_torque_target(20.0, &row1()), 149.2496, epsilon = 1e-3);
        assert_relative_eq!(terminal_torque_target(22.0, &row2()), 280.3685, epsilon = 1e-3);
        let mut frictionless = row1();
        frictionless.rolling_coeff = 0.0;
        assert_eq!(terminal_torque_target(0.0, &frictionless), 0.0);
    }

    #[test]
    fn extend_terminal_examples() {
        let y = extend_terminal(&Output { position: 100.0, velocity: 20.0 }, 0.1);
        assert_relative_eq!(y.position, 102.0, epsilon = 1e-12);
        assert_relative_eq!(y.velocity, 20.0, epsilon = 1e-12);

        let rest = extend_terminal(&Output { position: 0.0, velocity: 0.0 }, 0.1);
        assert_eq!((rest.position, rest.velocity), (0.0, 0.0));

        // Applying twice advances position by 2 v dt with v unchanged.
        let twice = extend_terminal(&y, 0.1);
        assert_relative_eq!(twice.position, 104.0, epsilon = 1e-12);
        assert_relative_eq!(twice.velocity, 20.0, epsilon = 1e-12);
    }

    #[test]
    fn total_cost_at_equilibrium_is_zero() {
        let prob = chain_problem(6, 0.0);
        let u_eq = equilibrium_torque(20.0, &prob.params);
        assert!(prob.total_cost(&vec![u_eq; 6]) < 1e-9);
    }

    #[test]
    fn total_cost_single_nonzero_stage() {
        // Perturbing only the last input leaves every stage output unchanged,
        // so the total cost is exactly the R term of that stage.
        let prob = chain_problem(4, 0.0);
        let u_eq = equilibrium_torque(20.0, &prob.params);
        let mut inputs = vec![u_eq; 4];
        inputs[3] += 50.0;
        assert_relative_eq!(prob.total_cost(&inputs), 50.0, epsilon = 1e-9);
    }

    #[test]
    fn total_cost_dominates_each_stage() {
        let prob = chain_problem(5, 0.5);
        let u_eq = equilibrium_torque(20.0, &prob.params);
        let inputs: Vec<f64> = (0..5).map(|k| u_eq + 30.0 * (k as f64 - 2.0)).collect();
        let states = vehicle::rollout(&prob.initial_state, &inputs, &prob.params, prob.dt);
        let total = prob.total_cost(&inputs);
        for k in 0..5 {
            let stage = prob.stage_cost(&vehicle::output_of(&states[k]), inputs[k], k);
            assert!(stage >= 0.0);
            assert!(total >= stage - 1e-12);
        }
    }

    #[test]
    fn solve_at_equilibrium_returns_zero_cost() {
        let prob = chain_problem(20, 0.0);
        let sol = prob.solve().unwrap();
        assert_eq!(sol.status, SolverStatus::Converged);
        assert!(sol.cost <= 1e-6, "cost {}", sol.cost);
        assert!(sol.terminal_residual <= TERMINAL_TOL);
        let u_eq = equilibrium_torque(20.0, &prob.params);
        for u in &sol.inputs {
            assert_relative_eq!(*u, u_eq, epsilon = 1e-6);
        }
    }

    #[test]
    fn solve_reports_displaced_target_infeasible() {
        // Neighbor displaced 1000 m ahead: with N_p = 5, dt = 0.1 and
        // |a| <= 6 the reachable span is about v0 N_p dt + a_max (N_p dt)^2 / 2
        // = 10.75 m, nowhere near the terminal target.
        let prob = chain_problem(5, 1000.0);
        let sol = prob.solve().unwrap();
        assert_eq!(sol.status, SolverStatus::Infeasible);
        assert!(sol.terminal_residual > INFEASIBLE_TOL);
    }

    #[test]
    fn weight_set_validation() {
        let id = Matrix2::identity();
        assert!(WeightSet::new(id * 10.0, 1.0, id * 10.0, id * 5.0).is_ok());
        // Asymmetric Q.
        let asym = Matrix2::new(1.0, 0.5, -0.5, 1.0);
        assert!(WeightSet::new(asym, 1.0, id, id).is_err());
        // Indefinite F.
        let indef = Matrix2::new(1.0, 2.0, 2.0, 1.0);
        assert!(WeightSet::new(id, 1.0, indef, id).is_err());
        // Negative scalar R.
        assert!(WeightSet::new(id, -1.0, id, id).is_err());
        // Zero matrices are admissible (unpinned nodes have Q = 0).
        assert!(WeightSet::new(Matrix2::zeros(), 0.0, id, Matrix2::zeros()).is_ok());
    }

    #[test]
    fn problem_validation_rejects_malformed_inputs() {
        // Horizon too short.
        let mut prob = chain_problem(3, 0.0);
        prob.horizon = 1;
        assert!(prob.validate().is_err());

        // Unpinned node with a nonzero Q weight.
        let mut prob = chain_problem(3, 0.0);
        prob.weights.q = Matrix2::identity() * 10.0;
        assert!(prob.validate().is_err());

        // Empty information set.
        let mut prob = chain_problem(3, 0.0);
        prob.neighbor_assumed.clear();
        assert!(prob.validate().is_err());

        // Leader trajectory without a desired set point.
        let mut prob = chain_problem(3, 0.0);
        prob.leader_assumed = Some(AssumedTrajectory::leader(
            &Output { position: 0.0, velocity: 20.0 },
            3,
            prob.dt,
        ));
        assert!(prob.validate().is_err());

        // Neighbor trajectory of the wrong length.
        let mut prob = chain_problem(3, 0.0);
        prob.neighbor_assumed.get_mut(&1).unwrap().outputs.pop();
        assert!(prob.validate().is_err());

        // The untouched fixture is valid.
        assert!(chain_problem(3, 0.0).validate().is_ok());
    }

    #[test]
    fn smoothed_norm_close_to_true_norm() {
        let w = Matrix2::identity() * 10.0;
        for x in [
            Vector2::new(1.0, 0.5),
            Vector2::new(-0.3, 2.0),
            Vector2::new(0.0, 0.0),
            Vector2::new(1e-7, -1e-7),
        ] {
            let exact = weighted_norm(&x, &w);
            let smooth = smoothed_norm(&x, &w);
            assert!((exact - smooth).abs() <= SMOOTHING_EPS);
            assert!(smooth >= 0.0);
        }
    }
}
