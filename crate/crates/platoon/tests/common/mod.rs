//! Helpers shared between integration-test binaries: random feasible
//! short-horizon instances with a grid-search oracle, and random
//! spanning-tree digraph construction.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use platoon::ocp::{AssumedTrajectory, OcpProblem, SolverOptions, WeightSet};
use platoon::topology::Topology;
use platoon::vehicle::{
    equilibrium_torque, input_bounds, output_of, rollout, Output, VehicleParams, VehicleState,
};

pub const NP: usize = 3;
pub const GRID: usize = 21;

/// A random two-node instance that is feasible by construction: the first
/// two inputs are sampled, the third is solved from the terminal torque
/// equality, and the neighbor's terminal output is placed so the consensus
/// target is exactly the reachable terminal state.
pub fn random_instance(rng: &mut ChaCha8Rng) -> (OcpProblem, Vec<f64>) {
    let dt = 0.1;
    let p = VehicleParams::passenger_car(1849.1, 0.75, 1.15, 0.38);
    let v0 = rng.gen_range(18.0..22.0);
    let x0 = VehicleState::new(rng.gen_range(-60.0..-20.0), v0, equilibrium_torque(v0, &p));
    let u_eq = equilibrium_torque(v0, &p);

    // Feasible inputs: sample the first two, solve the third so that
    // T(3) = h(v(3)); v(3) depends only on T(2), never on u(2).
    let mut feasible = vec![
        u_eq + rng.gen_range(-300.0..300.0),
        u_eq + rng.gen_range(-300.0..300.0),
        0.0,
    ];
    let partial = rollout(&x0, &feasible, &p, dt);
    let psi = dt / p.tau;
    let t2 = partial[2].torque;
    let v3 = partial[3].velocity;
    feasible[2] = (equilibrium_torque(v3, &p) - (1.0 - psi) * t2) / psi;
    let states = rollout(&x0, &feasible, &p, dt);
    let terminal = output_of(&states[NP]);

    let bounds = input_bounds(&p, v0);
    assert!(feasible.iter().all(|&u| u > bounds.u_min && u < bounds.u_max));

    let own = AssumedTrajectory::from_inputs(2, &x0, vec![u_eq; NP], &p, dt);

    // Neighbor outputs: noisy around the set point at the running stages
    // (that noise is what generates a nonzero G cost), exact consensus at
    // the terminal stage.
    let spacing = 20.0;
    let mut neighbor_outputs: Vec<Output> = own
        .outputs
        .iter()
        .map(|y| Output {
            position: y.position + spacing + rng.gen_range(-2.0..2.0),
            velocity: y.velocity + rng.gen_range(-0.5..0.5),
        })
        .collect();
    neighbor_outputs[NP] =
        Output { position: terminal.position + spacing, velocity: terminal.velocity };
    let neighbor = AssumedTrajectory {
        owner: 1,
        outputs: neighbor_outputs,
        inputs: vec![u_eq; NP],
    };

    let prob = OcpProblem {
        node: 2,
        initial_state: x0,
        params: p,
        bounds,
        weights: WeightSet::scaled(0.0, 0.0, 10.0, 5.0),
        dt,
        horizon: NP,
        spacing,
        own_assumed: own,
        neighbor_assumed: BTreeMap::from([(1, neighbor)]),
        leader_assumed: None,
        desired: None,
        options: SolverOptions::default(),
    };
    (prob, feasible)
}

fn terminal_residual(prob: &OcpProblem, inputs: &[f64]) -> [f64; 3] {
    let states = rollout(&prob.initial_state, inputs, &prob.params, prob.dt);
    let r = prob.terminal_residuals(&states);
    [r.x, r.y, r.z]
}

/// Row sensitivities of the residuals to each input, used to express all
/// three residuals in comparable input units inside the merit.
fn residual_row_scales(prob: &OcpProblem, center: &[f64]) -> [f64; 3] {
    let h = 1.0;
    let base = terminal_residual(prob, center);
    let mut norms = [0.0f64; 3];
    for k in 0..NP {
        let mut bumped = center.to_vec();
        bumped[k] += h;
        let r = terminal_residual(prob, &bumped);
        for row in 0..3 {
            let d = (r[row] - base[row]) / h;
            norms[row] += d * d;
        }
    }
    norms.map(|n| 1.0 / n.sqrt().max(1e-12))
}

/// Penalized merit: the true objective plus the residuals converted to
/// input units and weighted heavily enough to dominate.
fn merit(prob: &OcpProblem, inputs: &[f64], scales: &[f64; 3]) -> f64 {
    let r = terminal_residual(prob, inputs);
    let penalty: f64 = r.iter().zip(scales).map(|(c, s)| c.abs() * s).sum();
    prob.total_cost(inputs) + 1e4 * penalty
}

/// Exhaustive grid search over the box, then one refinement pass around
/// the best cell with the same grid density. Returns the refined input
/// sequence and its unpenalized cost.
pub fn grid_oracle(prob: &OcpProblem) -> (Vec<f64>, f64) {
    let lo = prob.bounds.u_min;
    let hi = prob.bounds.u_max;
    let center = vec![0.5 * (lo + hi); NP];
    let scales = residual_row_scales(prob, &center);

    let search = |ranges: &[(f64, f64); NP]| -> Vec<f64> {
        let axis = |r: &(f64, f64)| -> Vec<f64> {
            (0..GRID)
                .map(|i| r.0 + (r.1 - r.0) * i as f64 / (GRID - 1) as f64)
                .collect()
        };
        let axes: Vec<Vec<f64>> = ranges.iter().map(axis).collect();
        let mut best = vec![axes[0][0], axes[1][0], axes[2][0]];
        let mut best_merit = f64::INFINITY;
        for &u0 in &axes[0] {
            for &u1 in &axes[1] {
                for &u2 in &axes[2] {
                    let m = merit(prob, &[u0, u1, u2], &scales);
                    if m < best_merit {
                        best_merit = m;
                        best = vec![u0, u1, u2];
                    }
                }
            }
        }
        best
    };

    let coarse = search(&[(lo, hi); NP]);
    let cell = (hi - lo) / (GRID - 1) as f64;
    let mut refined_ranges = [(0.0, 0.0); NP];
    for k in 0..NP {
        refined_ranges[k] = ((coarse[k] - cell).max(lo), (coarse[k] + cell).min(hi));
    }
    let fine = search(&refined_ranges);
    let cost = prob.total_cost(&fine);
    (fine, cost)
}

/// A random digraph guaranteed to have a spanning tree rooted at the
/// leader: follower i hooks to a parent in {leader, 1, .., i-1}, plus
/// arbitrary extra edges and pins.
pub fn spanning_tree_topology(
    parents: &[usize],
    extra_edges: &[(usize, usize)],
    extra_pins: &[usize],
    unidirectional: bool,
) -> Topology {
    let n = parents.len();
    let mut adjacency = vec![vec![0u8; n]; n];
    let mut pinning = vec![0u8; n];
    for (i, &p) in parents.iter().enumerate() {
        if p == 0 {
            pinning[i] = 1;
        } else {
            adjacency[i][p - 1] = 1;
        }
    }
    for &(i, j) in extra_edges {
        let (i, j) = (i % n, j % n);
        if i == j {
            continue;
        }
        if unidirectional && j > i {
            continue;
        }
        adjacency[i][j] = 1;
    }
    for &i in extra_pins {
        pinning[i % n] = 1;
    }
    Topology::new(adjacency, pinning).unwrap()
}

/// Draw a random spanning-tree digraph with up to `max_n` followers.
pub fn random_spanning_tree(rng: &mut ChaCha8Rng, max_n: usize, unidirectional: bool) -> Topology {
    let n = rng.gen_range(1..=max_n);
    let parents: Vec<usize> = (0..n).map(|i| rng.gen_range(0..=i)).collect();
    let extra_edges: Vec<(usize, usize)> = (0..rng.gen_range(0..2 * n))
        .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
        .collect();
    let extra_pins: Vec<usize> =
        (0..rng.gen_range(0..2)).map(|_| rng.gen_range(0..n)).collect();
    spanning_tree_topology(&parents, &extra_edges, &extra_pins, unidirectional)
}
