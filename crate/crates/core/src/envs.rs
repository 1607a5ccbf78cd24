//! Toy continuous-control tasks with dense ground-truth rewards and scripted
//! experts.
//!
//! * `point_reach`: drive a point to a goal.
//! * `two_phase_pull`: reach a handle, grasp it, drag it to a target. The
//!   reward jumps by +1 on grasp, so random exploration rarely sees the
//!   second phase.
//!
//! Both share the kinematics `pos <- clip(pos + 0.1 * action)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::Tensor2;

pub const EPISODE_LEN: usize = 100;
pub const ACTION_DIM: usize = 2;
pub const STEP_GAIN: f64 = 0.1;
pub const SUCCESS_RADIUS: f64 = 0.05;
pub const GRASP_RADIUS: f64 = 0.05;
pub const POSITION_BOUND: f64 = 1.2;
pub const EXPERT_GAIN: f64 = 4.0;

pub type Vec2 = [f64; 2];
pub type Action = [f64; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    PointReach,
    TwoPhasePull,
}

impl EnvKind {
    pub fn name(self) -> &'static str {
        match self {
            EnvKind::PointReach => "point_reach",
            EnvKind::TwoPhasePull => "two_phase_pull",
        }
    }

    /// Length of the observation vector fed to networks.
    pub fn obs_dim(self) -> usize {
        match self {
            // goal - pos
            EnvKind::PointReach => 2,
            // handle - pos, grasped, target - handle
            EnvKind::TwoPhasePull => 5,
        }
    }

    /// Observation plus action, the input of reward models and critics.
    pub fn feature_dim(self) -> usize {
        self.obs_dim() + ACTION_DIM
    }

    /// Number of raw state components (the persisted form).
    pub fn raw_dim(self) -> usize {
        match self {
            EnvKind::PointReach => 4,
            EnvKind::TwoPhasePull => 7,
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "point_reach" => Ok(EnvKind::PointReach),
            "two_phase_pull" => Ok(EnvKind::TwoPhasePull),
            other => Err(Error::Config(format!(
                "unknown env kind `{other}` (expected point_reach or two_phase_pull)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EnvState {
    PointReach {
        pos: Vec2,
        goal: Vec2,
        t: usize,
    },
    TwoPhasePull {
        pos: Vec2,
        handle: Vec2,
        grasped: bool,
        target: Vec2,
        t: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: EnvState,
    pub true_reward: f64,
    pub success: bool,
    pub done: bool,
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn clip_pos(p: Vec2) -> Vec2 {
    [
        p[0].clamp(-POSITION_BOUND, POSITION_BOUND),
        p[1].clamp(-POSITION_BOUND, POSITION_BOUND),
    ]
}

fn clip_action(a: Vec2) -> Action {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

fn sample_in<R: Rng>(rng: &mut R, x: (f64, f64), y: (f64, f64)) -> Vec2 {
    [rng.random_range(x.0..x.1), rng.random_range(y.0..y.1)]
}

// Spawn regions. Each pair of regions is disjoint, so start and objective
// never coincide. Reach goals sit against the right wall, like a button on
// a panel, so moving past the goal along x is impossible.
const REACH_AGENT: ((f64, f64), (f64, f64)) = ((-0.9, -0.3), (-0.9, 0.9));
pub const REACH_GOAL: ((f64, f64), (f64, f64)) = ((1.16, POSITION_BOUND), (-0.9, 0.9));
const PULL_AGENT: ((f64, f64), (f64, f64)) = ((-0.9, -0.5), (-0.5, 0.5));
const PULL_HANDLE: ((f64, f64), (f64, f64)) = ((-0.1, 0.3), (-0.3, 0.3));
const PULL_TARGET: ((f64, f64), (f64, f64)) = ((0.5, 0.9), (-0.3, 0.3));

/// Initial state for `kind`; a pure function of `seed`.
pub fn reset(kind: EnvKind, seed: u64) -> EnvState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match kind {
        EnvKind::PointReach => EnvState::PointReach {
            pos: sample_in(&mut rng, REACH_AGENT.0, REACH_AGENT.1),
            goal: sample_in(&mut rng, REACH_GOAL.0, REACH_GOAL.1),
            t: 0,
        },
        EnvKind::TwoPhasePull => EnvState::TwoPhasePull {
            pos: sample_in(&mut rng, PULL_AGENT.0, PULL_AGENT.1),
            handle: sample_in(&mut rng, PULL_HANDLE.0, PULL_HANDLE.1),
            grasped: false,
            target: sample_in(&mut rng, PULL_TARGET.0, PULL_TARGET.1),
            t: 0,
        },
    }
}

impl EnvState {
    pub fn kind(&self) -> EnvKind {
        match self {
            EnvState::PointReach { .. } => EnvKind::PointReach,
            EnvState::TwoPhasePull { .. } => EnvKind::TwoPhasePull,
        }
    }

    pub fn t(&self) -> usize {
        match *self {
            EnvState::PointReach { t, .. } | EnvState::TwoPhasePull { t, .. } => t,
        }
    }

    pub fn pos(&self) -> Vec2 {
        match *self {
            EnvState::PointReach { pos, .. } | EnvState::TwoPhasePull { pos, .. } => pos,
        }
    }

    /// Network observation; see [`EnvKind::obs_dim`] for the layout.
    pub fn obs(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.kind().obs_dim());
        self.write_obs(&mut out);
        out
    }

    pub fn write_obs(&self, out: &mut Vec<f64>) {
        match *self {
            EnvState::PointReach { pos, goal, .. } => out.extend_from_slice(&[goal[0] - pos[0], goal[1] - pos[1]]),
            EnvState::TwoPhasePull {
                pos,
                handle,
                grasped,
                target,
                ..
            } => out.extend_from_slice(&[
                handle[0] - pos[0],
                handle[1] - pos[1],
                if grasped { 1.0 } else { 0.0 },
                target[0] - handle[0],
                target[1] - handle[1],
            ]),
        }
    }

    /// Raw state components without the step index.
    pub fn raw(&self) -> Vec<f64> {
        match *self {
            EnvState::PointReach { pos, goal, .. } => vec![pos[0], pos[1], goal[0], goal[1]],
            EnvState::TwoPhasePull {
                pos,
                handle,
                grasped,
                target,
                ..
            } => vec![
                pos[0],
                pos[1],
                handle[0],
                handle[1],
                if grasped { 1.0 } else { 0.0 },
                target[0],
                target[1],
            ],
        }
    }

    /// Inverse of [`EnvState::raw`].
    pub fn from_raw(kind: EnvKind, raw: &[f64], t: usize) -> Result<Self> {
        if raw.len() != kind.raw_dim() {
            return Err(Error::DimensionMismatch {
                context: "EnvState::from_raw",
                expected: kind.raw_dim(),
                actual: raw.len(),
            });
        }
        Ok(match kind {
            EnvKind::PointReach => EnvState::PointReach {
                pos: [raw[0], raw[1]],
                goal: [raw[2], raw[3]],
                t,
            },
            EnvKind::TwoPhasePull => EnvState::TwoPhasePull {
                pos: [raw[0], raw[1]],
                handle: [raw[2], raw[3]],
                grasped: raw[4] != 0.0,
                target: [raw[5], raw[6]],
                t,
            },
        })
    }

    /// Distance to the current objective: goal, handle before grasp, target
    /// after.
    pub fn objective_distance(&self) -> f64 {
        match *self {
            EnvState::PointReach { pos, goal, .. } => dist(pos, goal),
            EnvState::TwoPhasePull {
                pos,
                handle,
                grasped,
                target,
                ..
            } => {
                if grasped {
                    dist(handle, target)
                } else {
                    dist(pos, handle)
                }
            }
        }
    }
}

/// Environment transition. Pure; the action is clipped to `[-1, 1]`.
pub fn step(state: &EnvState, action: Action) -> Result<StepResult> {
    if !action.iter().all(|a| a.is_finite()) {
        return Err(Error::NonFinite {
            location: format!("env action {action:?}"),
        });
    }
    let t = state.t();
    if t >= EPISODE_LEN {
        return Err(Error::EpisodeOver(t));
    }
    let a = clip_action(action);
    let moved = |pos: Vec2| clip_pos([pos[0] + STEP_GAIN * a[0], pos[1] + STEP_GAIN * a[1]]);
    let t = t + 1;
    let (next_state, true_reward, success) = match *state {
        EnvState::PointReach { pos, goal, .. } => {
            let pos = moved(pos);
            let d = dist(pos, goal);
            (EnvState::PointReach { pos, goal, t }, -d, d < SUCCESS_RADIUS)
        }
        EnvState::TwoPhasePull {
            pos,
            mut handle,
            mut grasped,
            target,
            ..
        } => {
            let pos = moved(pos);
            if !grasped && dist(pos, handle) < GRASP_RADIUS {
                grasped = true;
            }
            if grasped {
                handle = pos;
            }
            let (reward, success) = if grasped {
                let d = dist(handle, target);
                (1.0 - d, d < SUCCESS_RADIUS)
            } else {
                (-dist(pos, handle), false)
            };
            (
                EnvState::TwoPhasePull {
                    pos,
                    handle,
                    grasped,
                    target,
                    t,
                },
                reward,
                success,
            )
        }
    };
    Ok(StepResult {
        next_state,
        true_reward,
        success,
        done: success || t == EPISODE_LEN,
    })
}

/// Scripted proportional controller.
pub fn expert_action(state: &EnvState) -> Action {
    let toward = |from: Vec2, to: Vec2| {
        clip_action([
            EXPERT_GAIN * (to[0] - from[0]),
            EXPERT_GAIN * (to[1] - from[1]),
        ])
    };
    match *state {
        EnvState::PointReach { pos, goal, .. } => toward(pos, goal),
        EnvState::TwoPhasePull {
            pos,
            handle,
            grasped,
            target,
            ..
        } => {
            if grasped {
                toward(handle, target)
            } else {
                toward(pos, handle)
            }
        }
    }
}

/// `H` consecutive state-action pairs and the hidden sum of their true
/// rewards.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub oracle_return: f64,
    features: Tensor2,
}

impl Segment {
    /// Builds a segment from recorded steps; `rewards[i]` is the reward of
    /// taking `actions[i]` in `states[i]`.
    pub fn new(states: Vec<EnvState>, actions: Vec<Action>, rewards: &[f64]) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::Config("segment must contain at least one step".into()));
        }
        if actions.len() != states.len() || rewards.len() != states.len() {
            return Err(Error::DimensionMismatch {
                context: "Segment::new",
                expected: states.len(),
                actual: actions.len().min(rewards.len()),
            });
        }
        let kind = states[0].kind();
        if states.iter().any(|s| s.kind() != kind) {
            return Err(Error::Config("segment mixes environment kinds".into()));
        }
        let width = kind.feature_dim();
        let mut data = Vec::with_capacity(states.len() * width);
        for (s, a) in states.iter().zip(&actions) {
            s.write_obs(&mut data);
            data.extend_from_slice(a);
        }
        let features = Tensor2::from_vec(states.len(), width, data)?;
        Ok(Self {
            oracle_return: rewards.iter().sum(),
            states,
            actions,
            features,
        })
    }

    /// Builds a segment by replaying `actions` from each recorded state.
    pub fn from_replay(states: Vec<EnvState>, actions: Vec<Action>) -> Result<Self> {
        let rewards = states
            .iter()
            .zip(&actions)
            .map(|(s, a)| step(s, *a).map(|r| r.true_reward))
            .collect::<Result<Vec<_>>>()?;
        Self::new(states, actions, &rewards)
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn kind(&self) -> EnvKind {
        self.states[0].kind()
    }

    /// One row of `obs || action` per step.
    pub fn features(&self) -> &Tensor2 {
        &self.features
    }
}

/// Sum of true rewards over the segment, recomputed from the dynamics.
pub fn oracle_return(segment: &Segment) -> Result<f64> {
    segment
        .states
        .iter()
        .zip(&segment.actions)
        .map(|(s, a)| step(s, *a).map(|r| r.true_reward))
        .sum()
}

/// A recorded rollout. `states[i]` is the state in which `actions[i]` was
/// taken and `rewards[i]` the true reward that followed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub states: Vec<EnvState>,
    pub actions: Vec<Action>,
    pub rewards: Vec<f64>,
    pub success: bool,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn push(&mut self, state: EnvState, action: Action, result: &StepResult) {
        self.states.push(state);
        self.actions.push(action);
        self.rewards.push(result.true_reward);
        self.success |= result.success;
    }

    /// Steps `start..start + len` as a segment.
    pub fn window(&self, start: usize, len: usize) -> Result<Segment> {
        if start + len > self.len() || len == 0 {
            return Err(Error::DimensionMismatch {
                context: "Episode::window",
                expected: start + len,
                actual: self.len(),
            });
        }
        Segment::new(
            self.states[start..start + len].to_vec(),
            self.actions[start..start + len].to_vec(),
            &self.rewards[start..start + len],
        )
    }
}

/// Runs `policy` from `reset(kind, seed)` until `done` (success or time
/// limit) when `stop_on_success`, otherwise for the full episode length.
pub fn rollout(
    kind: EnvKind,
    seed: u64,
    stop_on_success: bool,
    mut policy: impl FnMut(&EnvState) -> Action,
) -> Result<Episode> {
    let mut state = reset(kind, seed);
    let mut episode = Episode::default();
    while state.t() < EPISODE_LEN {
        let action = clip_action(policy(&state));
        let result = step(&state, action)?;
        episode.push(state, action, &result);
        state = result.next_state;
        if stop_on_success && result.success {
            break;
        }
    }
    Ok(episode)
}
