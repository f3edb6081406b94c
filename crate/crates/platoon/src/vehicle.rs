//! Third-order longitudinal vehicle model: position, velocity and a
//! first-order lag on the integrated driveline torque.

use serde::{Deserialize, Serialize};

/// Physical constants of one following vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Vehicle mass [kg].
    pub mass: f64,
    /// Inertial lag of the powertrain [s].
    pub tau: f64,
    /// Aerodynamic drag coefficient [N s^2 / m^2].
    pub drag_coeff: f64,
    /// Tire radius [m].
    pub wheel_radius: f64,
    /// Mechanical efficiency of the driveline.
    pub driveline_eff: f64,
    /// Rolling resistance coefficient.
    pub rolling_coeff: f64,
    /// Gravity constant [m/s^2].
    pub gravity: f64,
    /// Maximum commanded acceleration [m/s^2], used to size the torque box.
    pub accel_max: f64,
    /// Maximum commanded deceleration [m/s^2] (negative).
    pub accel_min: f64,
}

impl VehicleParams {
    /// Table-style constructor: mass, lag, drag and radius vary per vehicle,
    /// the rest take passenger-car defaults.
    pub fn passenger_car(mass: f64, tau: f64, drag_coeff: f64, wheel_radius: f64) -> Self {
        VehicleParams {
            mass,
            tau,
            drag_coeff,
            wheel_radius,
            driveline_eff: 1.0,
            rolling_coeff: 0.01,
            gravity: 9.8,
            accel_max: 6.0,
            accel_min: -6.0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.mass > 0.0) {
            return Err(format!("mass must be positive, got {}", self.mass));
        }
        if !(self.tau > 0.0) {
            return Err(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.wheel_radius > 0.0) {
            return Err(format!("wheel_radius must be positive, got {}", self.wheel_radius));
        }
        if !(self.driveline_eff > 0.0 && self.driveline_eff <= 1.0) {
            return Err(format!("driveline_eff must be in (0, 1], got {}", self.driveline_eff));
        }
        if !(self.drag_coeff >= 0.0) {
            return Err(format!("drag_coeff must be nonnegative, got {}", self.drag_coeff));
        }
        if !(self.rolling_coeff >= 0.0) {
            return Err(format!("rolling_coeff must be nonnegative, got {}", self.rolling_coeff));
        }
        if !(self.gravity > 0.0) {
            return Err(format!("gravity must be positive, got {}", self.gravity));
        }
        if !(self.accel_min < 0.0 && 0.0 < self.accel_max) {
            return Err(format!(
                "acceleration bounds must straddle zero, got [{}, {}]",
                self.accel_min, self.accel_max
            ));
        }
        Ok(())
    }
}

/// Full state of one vehicle: position s [m], velocity v [m/s], torque T [N m].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub position: f64,
    pub velocity: f64,
    pub torque: f64,
}

impl VehicleState {
    pub fn new(position: f64, velocity: f64, torque: f64) -> Self {
        VehicleState { position, velocity, torque }
    }
}

/// Measured output: position and velocity (torque is dropped).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub position: f64,
    pub velocity: f64,
}

impl Output {
    pub fn new(position: f64, velocity: f64) -> Self {
        Output { position, velocity }
    }
}

/// Fixed box on the torque input.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InputBounds {
    pub u_min: f64,
    pub u_max: f64,
}

impl InputBounds {
    pub fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.u_min, self.u_max)
    }

    pub fn contains(&self, u: f64, tol: f64) -> bool {
        u >= self.u_min - tol && u <= self.u_max + tol
    }
}

/// External drag force at speed `v`: aerodynamic plus rolling resistance.
pub fn drag_force(v: f64, p: &VehicleParams) -> f64 {
    p.drag_coeff * v * v + p.mass * p.gravity * p.rolling_coeff
}

/// Driveline torque that exactly balances drag at speed `v` (the h_i map).
pub fn equilibrium_torque(v: f64, p: &VehicleParams) -> f64 {
    p.wheel_radius / p.driveline_eff * drag_force(v, p)
}

/// Derivative of `equilibrium_torque` with respect to velocity.
pub fn equilibrium_torque_dv(v: f64, p: &VehicleParams) -> f64 {
    p.wheel_radius / p.driveline_eff * 2.0 * p.drag_coeff * v
}

/// One step of the discrete-time dynamics. The input is applied unclipped;
/// bound enforcement belongs to the caller.
pub fn step(x: &VehicleState, u: f64, p: &VehicleParams, dt: f64) -> VehicleState {
    debug_assert!(dt > 0.0);
    let accel = (p.driveline_eff / p.wheel_radius * x.torque - drag_force(x.velocity, p)) / p.mass;
    VehicleState {
        position: x.position + x.velocity * dt,
        velocity: x.velocity + accel * dt,
        torque: x.torque - x.torque / p.tau * dt + u / p.tau * dt,
    }
}

/// Simulate an input sequence forward from `x0`. The result has one more
/// entry than `inputs` and starts with `x0`.
pub fn rollout(x0: &VehicleState, inputs: &[f64], p: &VehicleParams, dt: f64) -> Vec<VehicleState> {
    let mut states = Vec::with_capacity(inputs.len() + 1);
    states.push(*x0);
    for &u in inputs {
        let next = step(states.last().unwrap(), u, p, dt);
        states.push(next);
    }
    states
}

/// Output projection y = [s, v].
pub fn output_of(x: &VehicleState) -> Output {
    Output { position: x.position, velocity: x.velocity }
}

/// Convert the acceleration limits into a fixed torque box, sized at the
/// nominal cruise speed so the box stays constant over the run.
pub fn input_bounds(p: &VehicleParams, v_nominal: f64) -> InputBounds {
    debug_assert!(v_nominal >= 0.0);
    let drag = drag_force(v_nominal, p);
    let scale = p.wheel_radius / p.driveline_eff;
    InputBounds {
        u_min: scale * (p.mass * p.accel_min + drag),
        u_max: scale * (p.mass * p.accel_max + drag),
    }
}
