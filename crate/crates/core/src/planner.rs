//! Sampling-based MPPI controller over the rasterized maps.
//!
//! Rollouts perturb a shifted nominal control sequence with Gaussian noise,
//! accumulate map cost plus soft speed-limit and goal terms, and the next
//! nominal is the softmax-weighted average. Per-rollout RNG streams are
//! derived from (seed, rollout index), so evaluation order and thread count
//! never change the plan.

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::bev::BevGrid;
use crate::config::{PlannerConfig, VehicleConfig};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleState {
    pub x: f64,
    pub y: f64,
    /// Radians.
    pub heading: f64,
    /// m/s, >= 0.
    pub speed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Control {
    /// m/s^2.
    pub accel: f64,
    /// rad/s.
    pub steer_rate: f64,
}

/// Everything one planning cycle needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct MppiParams {
    pub horizon: usize,
    pub dt: f64,
    pub rollouts: usize,
    pub lambda: f64,
    pub accel_std: f64,
    pub steer_rate_std: f64,
    pub lethal_penalty: f64,
    pub speed_violation_weight: f64,
    pub goal_weight: f64,
    pub unknown_cost: f64,
    pub lethal_cost_threshold: f64,
    pub wheelbase: f64,
    pub max_steer: f64,
    pub max_accel: f64,
    pub max_steer_rate: f64,
    pub s_hard_max: f64,
}

impl MppiParams {
    pub fn from_config(planner: &PlannerConfig, vehicle: &VehicleConfig, s_hard_max: f64) -> Self {
        MppiParams {
            horizon: planner.horizon,
            dt: planner.dt,
            rollouts: planner.rollouts,
            lambda: planner.lambda,
            accel_std: planner.accel_std,
            steer_rate_std: planner.steer_rate_std,
            lethal_penalty: planner.lethal_penalty,
            speed_violation_weight: planner.speed_violation_weight,
            goal_weight: planner.goal_weight,
            unknown_cost: planner.unknown_cost,
            lethal_cost_threshold: planner.lethal_cost_threshold,
            wheelbase: vehicle.wheelbase,
            max_steer: vehicle.max_steer,
            max_accel: vehicle.max_accel,
            max_steer_rate: vehicle.max_steer_rate,
            s_hard_max,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.rollouts < 2 || !(self.lambda > 0.0) || !(self.dt > 0.0) {
            return Err(Error::invalid("need horizon >= 1, rollouts >= 2, lambda > 0, dt > 0"));
        }
        if !(self.wheelbase > 0.0) {
            return Err(Error::invalid("wheelbase must be positive"));
        }
        Ok(())
    }

    fn clamp_control(&self, c: Control) -> Control {
        Control {
            accel: c.accel.clamp(-self.max_accel, self.max_accel),
            steer_rate: c.steer_rate.clamp(-self.max_steer_rate, self.max_steer_rate),
        }
    }
}

/// Kinematic bicycle step. The steering angle is actuator state integrated
/// from the steer rate; returns the new vehicle state and steering angle.
pub fn dynamics_step(
    state: &VehicleState,
    steer: f64,
    control: &Control,
    dt: f64,
    params: &MppiParams,
) -> (VehicleState, f64) {
    let new_steer = (steer + control.steer_rate * dt).clamp(-params.max_steer, params.max_steer);
    let next = VehicleState {
        x: state.x + state.speed * state.heading.cos() * dt,
        y: state.y + state.speed * state.heading.sin() * dt,
        heading: state.heading + state.speed / params.wheelbase * steer.tan() * dt,
        speed: (state.speed + control.accel * dt).clamp(0.0, params.s_hard_max),
    };
    (next, new_steer)
}

fn cell_cost_and_limit(grid: &BevGrid, x: f64, y: f64, params: &MppiParams) -> (f64, f64, bool) {
    match grid.world_to_cell(x, y) {
        Some((ix, iy)) if grid.is_known(ix, iy) => {
            let cost = grid.cost_at(ix, iy);
            let lethal = grid.ood_at(ix, iy) || cost >= params.lethal_cost_threshold;
            (cost, grid.speed_limit_at(ix, iy), lethal)
        }
        _ => (params.unknown_cost, params.s_hard_max, false),
    }
}

/// Accumulated cost of a state trajectory on the grid: per-step cell cost,
/// a lethal penalty on OOD or at/above-threshold cells, a soft quadratic
/// speed-limit violation, plus a terminal goal-distance term.
pub fn rollout_cost(
    trajectory: &[VehicleState],
    grid: &BevGrid,
    goal: (f64, f64),
    params: &MppiParams,
) -> f64 {
    debug_assert!(!trajectory.is_empty());
    let mut total = 0.0;
    for state in trajectory {
        let (cost, limit, lethal) = cell_cost_and_limit(grid, state.x, state.y, params);
        total += cost;
        if lethal {
            total += params.lethal_penalty;
        }
        let over = (state.speed - limit).max(0.0);
        total += params.speed_violation_weight * over * over * params.dt;
    }
    let last = trajectory.last().expect("non-empty trajectory");
    let goal_dist = ((last.x - goal.0).powi(2) + (last.y - goal.1).powi(2)).sqrt();
    total + params.goal_weight * goal_dist
}

#[derive(Debug, Clone)]
pub struct MppiPlan {
    /// Weighted nominal update; `controls[0]` is the command to execute.
    pub controls: Vec<Control>,
    pub min_cost: f64,
    pub mean_cost: f64,
}

fn simulate(
    state: &VehicleState,
    steer: f64,
    controls: &[Control],
    params: &MppiParams,
) -> Vec<VehicleState> {
    let mut trajectory = Vec::with_capacity(controls.len());
    let mut s = *state;
    let mut d = steer;
    for c in controls {
        let (next, nd) = dynamics_step(&s, d, c, params.dt, params);
        s = next;
        d = nd;
        trajectory.push(s);
    }
    trajectory
}

/// One MPPI cycle. `nominal` is the previous plan (shifted internally by one
/// step); pass an empty slice on the first cycle. Deterministic given
/// (state, grid, goal, params, seed).
pub fn mppi_plan(
    state: &VehicleState,
    steer: f64,
    grid: &BevGrid,
    goal: (f64, f64),
    nominal: &[Control],
    params: &MppiParams,
    seed: u64,
) -> Result<MppiPlan> {
    params.validate()?;
    let h = params.horizon;
    // Shift the previous nominal one step, repeating the last control.
    let mut base = vec![Control::default(); h];
    if !nominal.is_empty() {
        for t in 0..h {
            let idx = (t + 1).min(nominal.len() - 1);
            base[t] = nominal[idx.min(nominal.len() - 1)];
        }
    }

    let rollouts: Vec<(Vec<Control>, f64)> = (0..params.rollouts as u64)
        .into_par_iter()
        .map(|m| {
            let mut rng = seeds::stream(seed, "mppi-rollout", m);
            let accel_noise = Normal::new(0.0, params.accel_std).expect("positive std");
            let steer_noise = Normal::new(0.0, params.steer_rate_std).expect("positive std");
            let controls: Vec<Control> = base
                .iter()
                .map(|c| {
                    params.clamp_control(Control {
                        accel: c.accel + accel_noise.sample(&mut rng),
                        steer_rate: c.steer_rate + steer_noise.sample(&mut rng),
                    })
                })
                .collect();
            let trajectory = simulate(state, steer, &controls, params);
            let cost = rollout_cost(&trajectory, grid, goal, params);
            (controls, cost)
        })
        .collect();

    let min_cost = rollouts.iter().map(|(_, c)| *c).fold(f64::INFINITY, f64::min);
    if !min_cost.is_finite() {
        return Err(Error::Planner("every rollout produced a non-finite cost".into()));
    }
    let mean_cost = rollouts.iter().map(|(_, c)| *c).sum::<f64>() / rollouts.len() as f64;

    // Softmax weights over shifted costs; subtracting the minimum leaves the
    // weights unchanged and keeps the exponentials in range.
    let mut weights: Vec<f64> = rollouts
        .iter()
        .map(|(_, c)| (-(c - min_cost) / params.lambda).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }

    let mut controls = vec![Control::default(); h];
    for ((rollout, _), w) in rollouts.iter().zip(&weights) {
        for (avg, c) in controls.iter_mut().zip(rollout) {
            avg.accel += w * c.accel;
            avg.steer_rate += w * c.steer_rate;
        }
    }
    // Convex combination of clamped samples stays inside the clamps; the
    // final clamp only absorbs rounding.
    for c in &mut controls {
        *c = params.clamp_control(*c);
    }
    Ok(MppiPlan { controls, min_cost, mean_cost })
}
