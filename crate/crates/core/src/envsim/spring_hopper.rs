//! A planar spring-legged hopper.
//!
//! The torso is a point mass carried by a prismatic leg. While the foot is on
//! the ground the leg acts as an actuated spring-damper whose rest length is
//! shifted by the action; part of the actuated force drives the torso forward,
//! bounded by the ground friction cone. Touchdown and liftoff each transfer
//! momentum to the leg mass. In flight the torso is ballistic.
//!
//! State layout (6 values): `[x, y, vx, vy, pitch, contact]`.

use rand::Rng;

use super::constants::*;

pub const STATE_DIM: usize = 6;
pub const OBS_DIM: usize = 7;
pub const ACT_DIM: usize = 1;

pub const X: usize = 0;
pub const Y: usize = 1;
pub const VX: usize = 2;
pub const VY: usize = 3;
pub const PITCH: usize = 4;
pub const CONTACT: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HopperParams {
    pub torso_mass: f64,
    pub leg_mass: f64,
    pub leg_damping: f64,
    pub friction: f64,
}

pub fn initial_state<R: Rng>(rng: &mut R, params: HopperParams) -> Vec<f64> {
    let mut noise = || rng.random_range(-HOPPER_RESET_NOISE..=HOPPER_RESET_NOISE);
    let standing = LEG_REST_LENGTH - params.torso_mass * GRAVITY / LEG_STIFFNESS;
    vec![0.0, standing + noise(), noise(), noise(), 0.0, 1.0]
}

/// `[y, vy, vx, leg extension, extension rate, pitch, contact]`.
pub fn observe(state: &[f64]) -> Vec<f64> {
    let contact = state[CONTACT] != 0.0;
    let (ext, ext_vel) = if contact {
        (state[Y], state[VY])
    } else {
        (LEG_REST_LENGTH, 0.0)
    };
    vec![state[Y], state[VY], state[VX], ext, ext_vel, state[PITCH], state[CONTACT]]
}

pub fn leg_force(state: &[f64], params: HopperParams, action: f64) -> f64 {
    if state[CONTACT] == 0.0 {
        return 0.0;
    }
    let target = LEG_REST_LENGTH + LEG_THRUST * action;
    (LEG_STIFFNESS * (target - state[Y]) - params.leg_damping * state[VY]).max(0.0)
}

pub fn advance(state: &mut [f64], params: HopperParams, action: f64, dt: f64) {
    let m = params.torso_mass;
    let (ax, ay) = if state[CONTACT] != 0.0 {
        let force = leg_force(state, params, action);
        let drive = LEG_LEAN * LEG_STIFFNESS * LEG_THRUST * action / m;
        let cone = params.friction * force / m;
        (drive.clamp(-cone, cone), force / m - GRAVITY)
    } else {
        (0.0, -GRAVITY)
    };
    state[VX] += ax * dt;
    state[VY] += ay * dt;
    state[X] += state[VX] * dt;
    state[Y] += state[VY] * dt;

    let share = m / (m + params.leg_mass);
    if state[CONTACT] == 0.0 && state[Y] < LEG_REST_LENGTH && state[VY] < 0.0 {
        state[VY] *= share;
        state[CONTACT] = 1.0;
    } else if state[CONTACT] != 0.0 && state[Y] >= LEG_REST_LENGTH && state[VY] > 0.0 {
        state[VY] *= share;
        state[CONTACT] = 0.0;
    }
    state[PITCH] += dt / PITCH_TIME_CONSTANT * (PITCH_GAIN * state[VX] - state[PITCH]);
}

pub fn is_alive(state: &[f64]) -> bool {
    state[Y] > ALIVE_HEIGHT_FRACTION * LEG_REST_LENGTH && state[PITCH].abs() < ALIVE_PITCH
}

/// `vx + 1 - 0.001 |a|^2`.
pub fn reward(state: &[f64], action: &[f64]) -> f64 {
    let effort: f64 = action.iter().map(|a| a * a).sum();
    state[VX] + 1.0 - 0.001 * effort
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn params() -> HopperParams {
        HopperParams {
            torso_mass: 2.0,
            leg_mass: 0.5,
            leg_damping: 2.0,
            friction: 0.5,
        }
    }

    #[test]
    fn reward_substitution() {
        let mut s = vec![0.0; STATE_DIM];
        assert_eq!(reward(&s, &[0.0]), 1.0);
        s[VX] = 2.0;
        assert_eq!(reward(&s, &[0.0]), 3.0);
        s[VX] = 0.0;
        assert!((reward(&s, &[1.0]) - 0.999).abs() < 1e-15);
    }

    #[test]
    fn standing_still_stays_alive() {
        let mut r = rng::stream(0, 0);
        let mut s = initial_state(&mut r, params());
        assert!(is_alive(&s));
        for _ in 0..200 {
            advance(&mut s, params(), 0.0, DT);
            assert!(is_alive(&s));
        }
        assert!(s[VX].abs() < 0.01);
    }

    #[test]
    fn pumping_produces_flight() {
        let mut s = initial_state(&mut rng::stream(1, 0), params());
        let mut flew = false;
        for _ in 0..100 {
            let a = if s[VY] >= 0.0 { 1.0 } else { -1.0 };
            advance(&mut s, params(), a, DT);
            flew |= s[CONTACT] == 0.0;
        }
        assert!(flew);
    }
}
