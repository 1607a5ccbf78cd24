//! Sectioned TOML run configuration. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::annotate::{QueryBudget, QueryOptions};
use crate::demos::{AlphaSchedule, BcConfig, MAX_DEMOS};
use crate::envs::{EnvKind, EPISODE_LEN};
use crate::error::{Error, Result};
use crate::sac::SacConfig;
use crate::triteach::{check_rate, ScheduleKind, SelectionCadence, SessionConfig, TeachSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Tri-teaching plus demonstrations.
    Trend,
    /// Tri-teaching, no demonstrations.
    TrendNoDemo,
    /// No denoising, no demonstrations.
    Pebble,
    /// No denoising, with demonstrations.
    PebbleDemo,
    /// Each member keeps its own small-loss selection.
    SelfTeach,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Trend => "trend",
            Mode::TrendNoDemo => "trend_no_demo",
            Mode::Pebble => "pebble",
            Mode::PebbleDemo => "pebble_demo",
            Mode::SelfTeach => "self_teach",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Rewards come from the preference-trained ensemble.
    Learned,
    /// Rewards come from the environment; no queries are made.
    TrueEnv,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorKind {
    Scripted,
    MockVlm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub env: EnvKind,
    pub mode: Mode,
    pub seed: u64,
    pub total_steps: u64,
    /// Random-action steps before learning when there are no demos.
    pub warmup_steps: u64,
    /// Environment step of the first query session.
    pub first_session: u64,
    pub reward_source: RewardSource,
    /// Optional JSON audit of every reward-training session.
    pub audit: bool,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            env: EnvKind::PointReach,
            mode: Mode::Trend,
            seed: 0,
            total_steps: 100_000,
            warmup_steps: 1000,
            first_session: 1000,
            reward_source: RewardSource::Learned,
            audit: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotatorSection {
    pub kind: AnnotatorKind,
    /// Label flip probability of the scripted teacher.
    pub noise_rate: f64,
    pub tie_tolerance: f64,
    pub fixture: Option<PathBuf>,
    pub exclude_ties: bool,
    pub skips_count: bool,
}

impl Default for AnnotatorSection {
    fn default() -> Self {
        Self {
            kind: AnnotatorKind::Scripted,
            noise_rate: 0.0,
            tie_tolerance: 1e-9,
            fixture: None,
            exclude_ties: false,
            skips_count: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    /// Small-loss keep rate; the mode decides when unset.
    pub selection_rate: Option<f64>,
    pub schedule: Option<ScheduleKind>,
    /// Passes over the preference dataset per session.
    pub epochs: usize,
    pub batch_size: usize,
    pub cadence: SelectionCadence,
    pub segment_len: usize,
    /// Standardize learned rewards over the replay buffer at each relabel.
    pub normalize: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            lr: 3e-4,
            selection_rate: None,
            schedule: None,
            epochs: 50,
            batch_size: 128,
            cadence: SelectionCadence::PerMinibatch,
            segment_len: 50,
            normalize: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DemoSection {
    /// Number of demonstrations; the mode decides when unset.
    pub count: Option<usize>,
    pub path: Option<PathBuf>,
    pub lambda_bc: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Decay horizon in env steps; half the run when unset.
    pub alpha_horizon: Option<u64>,
    pub bc: BcConfig,
}

impl Default for DemoSection {
    fn default() -> Self {
        Self {
            count: None,
            path: None,
            lambda_bc: 4.0,
            alpha_start: 0.5,
            alpha_end: 0.25,
            alpha_horizon: None,
            bc: BcConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub interval: u64,
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            interval: 5000,
            episodes: 20,
        }
    }
}

/// Everything a run needs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub run: RunSection,
    pub annotator: AnnotatorSection,
    pub reward: RewardSection,
    pub queries: QueryBudget,
    pub demos: DemoSection,
    pub sac: SacConfig,
    pub eval: EvalSection,
}

/// Mode defaults and overrides folded into concrete settings.
#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub gamma: f64,
    pub schedule: ScheduleKind,
    pub n_demos: usize,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| err(e.to_string()))?;
        cfg.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => err(format!("{}: {m}", path.display())),
            other => other,
        })?;
        // relative file references resolve against the config's directory
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.annotator.fixture, &mut cfg.demos.path].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the mode's defaults and rejects contradictory overrides.
    pub fn resolve(&self) -> Result<Resolved> {
        let r = &self.reward;
        let mode = self.run.mode;
        let (gamma, schedule, n_demos) = match mode {
            Mode::Pebble | Mode::PebbleDemo => {
                if let Some(g) = r.selection_rate {
                    if g != 1.0 {
                        return Err(err(format!("mode {} requires reward.selection_rate = 1.0, got {g}", mode.name())));
                    }
                }
                if let Some(s) = r.schedule {
                    if s != ScheduleKind::SelfTeach {
                        return Err(err(format!("mode {} requires reward.schedule = \"self\"", mode.name())));
                    }
                }
                let n = match (mode, self.demos.count) {
                    (Mode::Pebble, None | Some(0)) => 0,
                    (Mode::Pebble, Some(n)) => {
                        return Err(err(format!("mode pebble uses no demonstrations, got demos.count = {n}")));
                    }
                    (_, None) => 1,
                    (_, Some(0)) => return Err(err("mode pebble_demo needs demos.count >= 1")),
                    (_, Some(n)) => n,
                };
                (1.0, ScheduleKind::SelfTeach, n)
            }
            Mode::Trend => (
                r.selection_rate.unwrap_or(0.6),
                r.schedule.unwrap_or(ScheduleKind::Cyclic),
                self.demos.count.unwrap_or(1),
            ),
            Mode::TrendNoDemo => {
                if let Some(n @ 1..) = self.demos.count {
                    return Err(err(format!("mode trend_no_demo uses no demonstrations, got demos.count = {n}")));
                }
                (
                    r.selection_rate.unwrap_or(0.6),
                    r.schedule.unwrap_or(ScheduleKind::Cyclic),
                    0,
                )
            }
            Mode::SelfTeach => {
                if r.schedule == Some(ScheduleKind::Cyclic) {
                    return Err(err("mode self_teach requires reward.schedule = \"self\""));
                }
                (
                    r.selection_rate.unwrap_or(0.6),
                    ScheduleKind::SelfTeach,
                    self.demos.count.unwrap_or(1),
                )
            }
        };
        check_rate(gamma)?;
        if n_demos > MAX_DEMOS {
            return Err(err(format!("demos.count must be at most {MAX_DEMOS}, got {n_demos}")));
        }
        self.validate()?;
        Ok(Resolved {
            gamma,
            schedule,
            n_demos,
        })
    }

    fn validate(&self) -> Result<()> {
        let run = &self.run;
        if run.total_steps == 0 {
            return Err(err("run.total_steps must be positive"));
        }
        let a = &self.annotator;
        if !(0.0..=1.0).contains(&a.noise_rate) {
            return Err(err(format!("annotator.noise_rate must lie in [0, 1], got {}", a.noise_rate)));
        }
        if !(a.tie_tolerance >= 0.0) {
            return Err(err("annotator.tie_tolerance must be >= 0"));
        }
        if a.kind == AnnotatorKind::MockVlm && a.fixture.is_none() {
            return Err(err("annotator.kind = \"mock_vlm\" needs annotator.fixture"));
        }
        let r = &self.reward;
        if r.hidden.is_empty() || r.hidden.contains(&0) {
            return Err(err("reward.hidden must list positive layer widths"));
        }
        if !(r.lr > 0.0) {
            return Err(err("reward.lr must be positive"));
        }
        if r.batch_size == 0 {
            return Err(err("reward.batch_size must be positive"));
        }
        if r.segment_len == 0 || r.segment_len > EPISODE_LEN {
            return Err(err(format!("reward.segment_len must lie in 1..={EPISODE_LEN}")));
        }
        self.queries.validate()?;
        self.alpha_schedule().validate()?;
        if !(self.demos.lambda_bc >= 0.0) {
            return Err(err("demos.lambda_bc must be >= 0"));
        }
        let s = &self.sac;
        if s.batch_size == 0 || s.buffer_capacity == 0 {
            return Err(err("sac.batch_size and sac.buffer_capacity must be positive"));
        }
        if !(s.lr > 0.0) || !(0.0..=1.0).contains(&s.tau) || !(0.0..1.0).contains(&s.discount) || !(s.alpha_ent >= 0.0) {
            return Err(err("sac.lr, sac.tau, sac.discount or sac.alpha_ent out of range"));
        }
        if s.policy_hidden.contains(&0) || s.critic_hidden.contains(&0) {
            return Err(err("sac hidden widths must be positive"));
        }
        if self.eval.interval == 0 || self.eval.episodes == 0 {
            return Err(err("eval.interval and eval.episodes must be positive"));
        }
        Ok(())
    }

    pub fn alpha_schedule(&self) -> AlphaSchedule {
        AlphaSchedule {
            start: self.demos.alpha_start,
            end: self.demos.alpha_end,
            horizon: self.demos.alpha_horizon.unwrap_or(self.run.total_steps / 2),
        }
    }

    pub fn session_config(&self, resolved: &Resolved) -> SessionConfig {
        SessionConfig {
            gamma: resolved.gamma,
            schedule: TeachSchedule::from_kind(resolved.schedule),
            epochs: self.reward.epochs,
            batch_size: self.reward.batch_size,
            cadence: self.reward.cadence,
        }
    }

    pub fn query_options(&self) -> QueryOptions {
        QueryOptions {
            segment_len: self.reward.segment_len,
            tie_tolerance: self.annotator.tie_tolerance,
            exclude_ties: self.annotator.exclude_ties,
            skips_count: self.annotator.skips_count,
        }
    }
}
