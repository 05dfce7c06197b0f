//! Randomized-dynamics environments.
//!
//! Two families are provided: [`Family::SlidePuck`] (strike a puck of unknown
//! mass and damping so it stops on a goal) and [`Family::SpringHopper`] (hop
//! forward on a spring leg with unknown masses, damping and ground friction).
//! Both integrate with semi-implicit Euler and clip actions to `[-1, 1]`.

pub mod constants;
mod grid;
pub mod slide_puck;
pub mod spring_hopper;

use std::io::Write;

use serde::{Deserialize, Serialize};

pub use grid::{grid_make, GridSide, ParamGrid};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    SlidePuck,
    SpringHopper,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::SlidePuck => "slide_puck",
            Family::SpringHopper => "spring_hopper",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slide_puck" => Ok(Family::SlidePuck),
            "spring_hopper" => Ok(Family::SpringHopper),
            other => Err(Error::invalid(format!("unknown environment family `{other}`"))),
        }
    }

    pub fn obs_dim(self) -> usize {
        match self {
            Family::SlidePuck => slide_puck::OBS_DIM,
            Family::SpringHopper => spring_hopper::OBS_DIM,
        }
    }

    pub fn act_dim(self) -> usize {
        match self {
            Family::SlidePuck => slide_puck::ACT_DIM,
            Family::SpringHopper => spring_hopper::ACT_DIM,
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            Family::SlidePuck => slide_puck::STATE_DIM,
            Family::SpringHopper => spring_hopper::STATE_DIM,
        }
    }

    /// Canonical parameter order used to vectorise [`EnvParams`].
    pub fn param_names(self) -> &'static [&'static str] {
        match self {
            Family::SlidePuck => &["mass", "damping"],
            Family::SpringHopper => &["torso_mass", "leg_mass", "leg_damping", "friction"],
        }
    }

    pub fn num_params(self) -> usize {
        self.param_names().len()
    }

    pub fn default_ranges(self) -> Vec<(f64, f64)> {
        match self {
            Family::SlidePuck => vec![(0.5, 2.5), (0.35, 1.15)],
            Family::SpringHopper => vec![(1.0, 3.0), (0.2, 1.0), (0.5, 4.5), (0.2, 1.0)],
        }
    }

    pub fn default_episode_limit(self) -> usize {
        match self {
            Family::SlidePuck => constants::SLIDE_PUCK_EPISODE,
            Family::SpringHopper => constants::SPRING_HOPPER_EPISODE,
        }
    }

    pub fn default_embedding_dim(self) -> usize {
        match self {
            Family::SlidePuck => 2,
            Family::SpringHopper => 8,
        }
    }
}

/// Physical parameters of one environment instance, in the family's
/// canonical order.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    family: Family,
    values: Vec<f64>,
}

impl EnvParams {
    pub fn new(family: Family, values: Vec<f64>) -> Result<Self> {
        if values.len() != family.num_params() {
            return Err(Error::dim(
                format!("{} parameter vector", family.name()),
                family.num_params(),
                values.len(),
            ));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::invalid(format!(
                "parameter `{}` must be positive and finite, got {v}",
                family.param_names()[i]
            )));
        }
        Ok(Self { family, values })
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.family
            .param_names()
            .iter()
            .position(|n| *n == name)
            .map(|i| self.values[i])
    }

    fn puck(&self) -> slide_puck::PuckParams {
        slide_puck::PuckParams {
            mass: self.values[0],
            damping: self.values[1],
        }
    }

    fn hopper(&self) -> spring_hopper::HopperParams {
        spring_hopper::HopperParams {
            torso_mass: self.values[0],
            leg_mass: self.values[1],
            leg_damping: self.values[2],
            friction: self.values[3],
        }
    }
}

/// Full simulator state plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub values: Vec<f64>,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    /// True when the episode ended by failure rather than by the step limit.
    pub fell: bool,
}

#[derive(Debug, Clone)]
pub struct EnvInstance {
    family: Family,
    params: EnvParams,
    state: Vec<f64>,
    step: usize,
    dt: f64,
    episode_limit: usize,
}

impl EnvInstance {
    pub fn new(params: EnvParams, dt: f64, episode_limit: usize) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::invalid(format!("dt must be positive, got {dt}")));
        }
        if episode_limit == 0 {
            return Err(Error::invalid("episode limit must be at least 1"));
        }
        let family = params.family();
        let mut env = Self {
            family,
            params,
            state: vec![0.0; family.state_dim()],
            step: 0,
            dt,
            episode_limit,
        };
        env.reset(0);
        Ok(env)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn params(&self) -> &EnvParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn episode_limit(&self) -> usize {
        self.episode_limit
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Draw a fresh initial state; deterministic in `seed`.
    pub fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut r = rng::stream(seed, rng::tag("env_reset"));
        self.state = match self.family {
            Family::SlidePuck => slide_puck::initial_state(&mut r),
            Family::SpringHopper => spring_hopper::initial_state(&mut r, self.params.hopper()),
        };
        self.step = 0;
        self.observe()
    }

    pub fn observe(&self) -> Vec<f64> {
        match self.family {
            Family::SlidePuck => self.state[..slide_puck::OBS_DIM].to_vec(),
            Family::SpringHopper => spring_hopper::observe(&self.state),
        }
    }

    pub fn get_state(&self) -> EnvState {
        EnvState {
            values: self.state.clone(),
            step: self.step,
        }
    }

    pub fn set_state(&mut self, state: &EnvState) -> Result<()> {
        if state.values.len() != self.family.state_dim() {
            return Err(Error::dim(
                format!("{} state", self.family.name()),
                self.family.state_dim(),
                state.values.len(),
            ));
        }
        self.state.clone_from(&state.values);
        self.step = state.step;
        Ok(())
    }

    pub fn is_alive(&self) -> bool {
        match self.family {
            Family::SlidePuck => true,
            Family::SpringHopper => spring_hopper::is_alive(&self.state),
        }
    }

    pub fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != self.family.act_dim() {
            return Err(Error::dim(
                format!("{} action", self.family.name()),
                self.family.act_dim(),
                action.len(),
            ));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite(format!("action {action:?}")));
        }
        let a: Vec<f64> = action.iter().map(|v| v.clamp(-1.0, 1.0)).collect();
        let (reward, fell) = match self.family {
            Family::SlidePuck => {
                slide_puck::advance(&mut self.state, self.params.puck(), [a[0], a[1]], self.dt);
                (slide_puck::reward(&self.state, &a), false)
            }
            Family::SpringHopper => {
                spring_hopper::advance(&mut self.state, self.params.hopper(), a[0], self.dt);
                (spring_hopper::reward(&self.state, &a), !spring_hopper::is_alive(&self.state))
            }
        };
        self.step += 1;
        Ok(Step {
            obs: self.observe(),
            reward,
            done: fell || self.step >= self.episode_limit,
            fell,
        })
    }

    /// Puck-to-goal distance for SlidePuck; `None` for other families.
    pub fn final_distance(&self) -> Option<f64> {
        match self.family {
            Family::SlidePuck => Some(slide_puck::final_distance(&self.state)),
            Family::SpringHopper => None,
        }
    }

    /// Whether the next transition can depend on the randomized parameters:
    /// the puck is sliding or the paddle is closing in on it; the hopper is
    /// alive and in stance or about to touch down.
    pub fn parameters_active(&self) -> bool {
        match self.family {
            Family::SlidePuck => {
                use slide_puck::{PADDLE_POS, PADDLE_VEL, PUCK_POS, PUCK_VEL};
                let s = &self.state;
                let speed = s[PUCK_VEL].hypot(s[PUCK_VEL + 1]);
                let moving = speed > constants::TABLE_FRICTION * constants::GRAVITY * self.dt;
                let n = [s[PUCK_POS] - s[PADDLE_POS], s[PUCK_POS + 1] - s[PADDLE_POS + 1]];
                let gap = n[0].hypot(n[1]).max(1e-12);
                let closing =
                    ((s[PADDLE_VEL] - s[PUCK_VEL]) * n[0] + (s[PADDLE_VEL + 1] - s[PUCK_VEL + 1]) * n[1]) / gap;
                let reach = gap - (constants::PADDLE_RADIUS + constants::PUCK_RADIUS);
                moving || (closing > 0.0 && reach < 2.0 * closing * self.dt)
            }
            Family::SpringHopper => {
                use spring_hopper::{CONTACT, VY, Y};
                let s = &self.state;
                let landing = s[Y] + (s[VY] - constants::GRAVITY * self.dt) * self.dt < constants::LEG_REST_LENGTH;
                spring_hopper::is_alive(s) && (s[CONTACT] != 0.0 || landing)
            }
        }
    }
}

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub done: bool,
}

/// CSV with columns `step, s0.., a0.., reward, done`.
pub fn write_trajectory_csv<W: Write>(mut out: W, records: &[StepRecord]) -> Result<()> {
    let (ns, na) = records
        .first()
        .map(|r| (r.state.len(), r.action.len()))
        .unwrap_or((0, 0));
    let mut header = vec!["step".to_string()];
    header.extend((0..ns).map(|i| format!("s{i}")));
    header.extend((0..na).map(|i| format!("a{i}")));
    header.push("reward".into());
    header.push("done".into());
    writeln!(out, "{}", header.join(","))?;
    for r in records {
        let mut row = vec![r.step.to_string()];
        row.extend(r.state.iter().map(|v| v.to_string()));
        row.extend(r.action.iter().map(|v| v.to_string()));
        row.push(r.reward.to_string());
        row.push((r.done as u8).to_string());
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
