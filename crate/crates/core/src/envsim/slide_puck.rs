//! A paddle strikes a puck across a table toward a goal.
//!
//! State layout (13 values):
//! `[paddle x, y, vx, vy, puck x, y, vx, vy, goal x, y, contacted, hit x, hit y]`.
//! The first ten values form the observation.

use rand::Rng;

use super::constants::*;

pub const STATE_DIM: usize = 13;
pub const OBS_DIM: usize = 10;
pub const ACT_DIM: usize = 2;

pub const PADDLE_POS: usize = 0;
pub const PADDLE_VEL: usize = 2;
pub const PUCK_POS: usize = 4;
pub const PUCK_VEL: usize = 6;
pub const GOAL_POS: usize = 8;
pub const CONTACTED: usize = 10;
pub const HIT_POS: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PuckParams {
    pub mass: f64,
    pub damping: f64,
}

pub fn initial_state<R: Rng>(rng: &mut R) -> Vec<f64> {
    let mut s = vec![0.0; STATE_DIM];
    s[PADDLE_POS..PADDLE_POS + 2].copy_from_slice(&PADDLE_START);
    s[PUCK_POS..PUCK_POS + 2].copy_from_slice(&PUCK_START);
    s[GOAL_POS..GOAL_POS + 2].copy_from_slice(&GOAL);
    for k in 0..2 {
        s[PADDLE_VEL + k] = rng.random_range(-PUCK_RESET_SPEED..=PUCK_RESET_SPEED);
        s[PUCK_VEL + k] = rng.random_range(-PUCK_RESET_SPEED..=PUCK_RESET_SPEED);
    }
    s
}

/// Velocity after one step of linear damping and table friction. Friction
/// never reverses the direction of travel.
pub fn free_puck_velocity(v: [f64; 2], params: PuckParams, dt: f64) -> [f64; 2] {
    let keep = (1.0 - params.damping / params.mass * dt).max(0.0);
    let v = [v[0] * keep, v[1] * keep];
    let speed = v[0].hypot(v[1]);
    let slowed = speed - TABLE_FRICTION * GRAVITY * dt;
    if slowed <= 0.0 {
        [0.0, 0.0]
    } else {
        [v[0] * slowed / speed, v[1] * slowed / speed]
    }
}

/// Earliest fraction of the step at which two discs moving linearly from
/// separation `d0` with relative displacement `dd` come within `reach`.
fn first_contact(d0: [f64; 2], dd: [f64; 2], reach: f64) -> Option<f64> {
    let c = d0[0] * d0[0] + d0[1] * d0[1] - reach * reach;
    if c < 0.0 {
        return Some(0.0);
    }
    let a = dd[0] * dd[0] + dd[1] * dd[1];
    let b = 2.0 * (d0[0] * dd[0] + d0[1] * dd[1]);
    if a == 0.0 || b >= 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let tau = (-b - disc.sqrt()) / (2.0 * a);
    (tau <= 1.0).then_some(tau.max(0.0))
}

/// Advance `state` by one step. Returns true if the paddle struck the puck.
///
/// Both bodies move in straight lines within a step, so contact is found by
/// a swept test; a fast paddle cannot pass through the puck.
pub fn advance(state: &mut [f64], params: PuckParams, action: [f64; 2], dt: f64) -> bool {
    // Paddle: unit mass, actuated with drag.
    let p0 = [state[PADDLE_POS], state[PADDLE_POS + 1]];
    let mut pv = [0.0; 2];
    for k in 0..2 {
        let v = state[PADDLE_VEL + k];
        pv[k] = v + (PADDLE_FORCE_MAX * action[k] - PADDLE_DRAG * v) * dt;
    }
    let q0 = [state[PUCK_POS], state[PUCK_POS + 1]];
    let mut qv = free_puck_velocity([state[PUCK_VEL], state[PUCK_VEL + 1]], params, dt);

    let d0 = [q0[0] - p0[0], q0[1] - p0[1]];
    let dd = [(qv[0] - pv[0]) * dt, (qv[1] - pv[1]) * dt];
    let mut struck = false;
    let mut p1 = [p0[0] + pv[0] * dt, p0[1] + pv[1] * dt];
    let mut q1 = [q0[0] + qv[0] * dt, q0[1] + qv[1] * dt];
    if let Some(tau) = first_contact(d0, dd, PADDLE_RADIUS + PUCK_RADIUS) {
        let pi = [p0[0] + tau * pv[0] * dt, p0[1] + tau * pv[1] * dt];
        let qi = [q0[0] + tau * qv[0] * dt, q0[1] + tau * qv[1] * dt];
        let n = [qi[0] - pi[0], qi[1] - pi[1]];
        let dist = n[0].hypot(n[1]);
        if dist > 0.0 {
            let n = [n[0] / dist, n[1] / dist];
            let closing = (pv[0] - qv[0]) * n[0] + (pv[1] - qv[1]) * n[1];
            if closing > 0.0 {
                // Impulse exchange along the contact normal, masses (1, m).
                let impulse = (1.0 + RESTITUTION) * closing / (1.0 + 1.0 / params.mass);
                for k in 0..2 {
                    pv[k] -= impulse * n[k];
                    qv[k] += impulse * n[k] / params.mass;
                }
                let rest = (1.0 - tau) * dt;
                p1 = [pi[0] + pv[0] * rest, pi[1] + pv[1] * rest];
                q1 = [qi[0] + qv[0] * rest, qi[1] + qv[1] * rest];
                if state[CONTACTED] == 0.0 {
                    state[CONTACTED] = 1.0;
                    state[HIT_POS] = pi[0];
                    state[HIT_POS + 1] = pi[1];
                }
                struck = true;
            }
        }
    }

    let [x_min, x_max, y_min, y_max] = PADDLE_WORKSPACE;
    for (k, lo, hi) in [(0, x_min, x_max), (1, y_min, y_max)] {
        if p1[k] < lo || p1[k] > hi {
            p1[k] = p1[k].clamp(lo, hi);
            pv[k] = 0.0;
        }
    }
    state[PADDLE_POS..PADDLE_POS + 2].copy_from_slice(&p1);
    state[PADDLE_VEL..PADDLE_VEL + 2].copy_from_slice(&pv);
    state[PUCK_POS..PUCK_POS + 2].copy_from_slice(&q1);
    state[PUCK_VEL..PUCK_VEL + 2].copy_from_slice(&qv);
    struck
}

/// `-3|puck - goal| - 0.1|a|^2 - 0.5|puck - hand|^2`, where the hand is the
/// paddle before the first contact and the hitting location afterwards.
pub fn reward(state: &[f64], action: &[f64]) -> f64 {
    let puck = [state[PUCK_POS], state[PUCK_POS + 1]];
    let goal = [state[GOAL_POS], state[GOAL_POS + 1]];
    let hand = if state[CONTACTED] != 0.0 {
        [state[HIT_POS], state[HIT_POS + 1]]
    } else {
        [state[PADDLE_POS], state[PADDLE_POS + 1]]
    };
    let to_goal = (puck[0] - goal[0]).hypot(puck[1] - goal[1]);
    let effort: f64 = action.iter().map(|a| a * a).sum();
    let to_hand = (puck[0] - hand[0]).powi(2) + (puck[1] - hand[1]).powi(2);
    -3.0 * to_goal - 0.1 * effort - 0.5 * to_hand
}

pub fn final_distance(state: &[f64]) -> f64 {
    (state[PUCK_POS] - state[GOAL_POS]).hypot(state[PUCK_POS + 1] - state[GOAL_POS + 1])
}

pub fn kinetic_energy(state: &[f64], mass: f64) -> f64 {
    let paddle = state[PADDLE_VEL].powi(2) + state[PADDLE_VEL + 1].powi(2);
    let puck = state[PUCK_VEL].powi(2) + state[PUCK_VEL + 1].powi(2);
    0.5 * paddle + 0.5 * mass * puck
}
