//! Few-shot expert demonstrations: generation, the `trenddemo-v1` text
//! format, behavior-cloning pretraining and the mixed SAC+BC update.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{expert_action, rollout, step, EnvKind, EnvState, Episode, ACTION_DIM};
use crate::error::{Error, Result};
use crate::ndmath::{Adam, Tensor2};
use crate::sac::{GaussianPolicy, ReplayBuffer, SacAgent, SacLosses};
use crate::seed::{derive_seed, Stream};

pub const DEMO_HEADER: &str = "trenddemo-v1";
pub const MAX_DEMOS: usize = 3;
const MAX_ATTEMPTS: u64 = 1000;

/// Successful expert trajectories for one task.
#[derive(Clone, Debug, PartialEq)]
pub struct DemoSet {
    kind: EnvKind,
    trajectories: Vec<Episode>,
}

impl DemoSet {
    pub fn new(kind: EnvKind, trajectories: Vec<Episode>) -> Result<Self> {
        if trajectories.len() > MAX_DEMOS {
            return Err(Error::Config(format!(
                "at most {MAX_DEMOS} demonstrations are supported, got {}",
                trajectories.len()
            )));
        }
        for (i, ep) in trajectories.iter().enumerate() {
            if ep.is_empty() {
                return Err(Error::Config(format!("demonstration {i} is empty")));
            }
            if ep.states.iter().any(|s| s.kind() != kind) {
                return Err(Error::Config(format!("demonstration {i} is not from {kind}")));
            }
        }
        Ok(Self { kind, trajectories })
    }

    pub fn empty(kind: EnvKind) -> Self {
        Self {
            kind,
            trajectories: Vec::new(),
        }
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn trajectories(&self) -> &[Episode] {
        &self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_steps(&self) -> usize {
        self.trajectories.iter().map(Episode::len).sum()
    }

    /// Keeps the first `n` trajectories.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            kind: self.kind,
            trajectories: self.trajectories.iter().take(n).cloned().collect(),
        }
    }

    /// All demo steps as `(observations, actions)` rows.
    pub fn steps(&self) -> (Tensor2, Tensor2) {
        let n = self.num_steps();
        let od = self.kind.obs_dim();
        let mut obs = Vec::with_capacity(n * od);
        let mut act = Vec::with_capacity(n * ACTION_DIM);
        for ep in &self.trajectories {
            for (s, a) in ep.states.iter().zip(&ep.actions) {
                s.write_obs(&mut obs);
                act.extend_from_slice(a);
            }
        }
        (
            Tensor2::from_vec(n, od, obs).expect("demo observation rows"),
            Tensor2::from_vec(n, ACTION_DIM, act).expect("demo action rows"),
        )
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(DEMO_HEADER);
        s.push('\n');
        let _ = writeln!(s, "env {}", self.kind);
        for ep in &self.trajectories {
            for (state, action) in ep.states.iter().zip(&ep.actions) {
                let row: Vec<String> = state
                    .raw()
                    .iter()
                    .chain(action.iter())
                    .map(|v| format!("{v:?}"))
                    .collect();
                s.push_str(&row.join(","));
                s.push('\n');
            }
            s.push('\n');
        }
        s
    }

    /// Parses the text format. Rewards and success flags are recomputed by
    /// replaying each trajectory through the dynamics.
    pub fn from_text(text: &str, source_name: &str) -> Result<Self> {
        let perr = |line: usize, message: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == DEMO_HEADER => {}
            _ => return Err(perr(1, format!("expected header `{DEMO_HEADER}`"))),
        }
        let kind: EnvKind = match lines.next() {
            Some((i, l)) => {
                let name = l.trim().strip_prefix("env ").ok_or_else(|| perr(i + 1, "expected `env <kind>`".into()))?;
                name.trim().parse().map_err(|e: Error| perr(i + 1, e.to_string()))?
            }
            None => return Err(perr(2, "missing env line".into())),
        };
        let width = kind.raw_dim() + ACTION_DIM;
        let mut trajectories = Vec::new();
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut flush = |rows: &mut Vec<(usize, Vec<f64>)>| -> Result<()> {
            if rows.is_empty() {
                return Ok(());
            }
            trajectories.push(replay_rows(kind, rows, source_name)?);
            rows.clear();
            Ok(())
        };
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                flush(&mut rows)?;
                continue;
            }
            let values = line
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(i + 1, e.to_string()))?;
            if values.len() != width {
                return Err(perr(i + 1, format!("expected {width} values, got {}", values.len())));
            }
            rows.push((i + 1, values));
        }
        flush(&mut rows)?;
        Self::new(kind, trajectories)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text, &path.display().to_string())
    }
}

fn replay_rows(kind: EnvKind, rows: &[(usize, Vec<f64>)], source_name: &str) -> Result<Episode> {
    let raw_dim = kind.raw_dim();
    let mut ep = Episode::default();
    for (t, (line, values)) in rows.iter().enumerate() {
        let state = EnvState::from_raw(kind, &values[..raw_dim], t)?;
        let action = [values[raw_dim], values[raw_dim + 1]];
        let result = step(&state, action).map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            line: *line,
            message: e.to_string(),
        })?;
        ep.push(state, action, &result);
    }
    Ok(ep)
}

/// `n` successful full-length expert rollouts; after success the expert
/// holds position, so the tail teaches the policy to stay put. Seeds whose
/// rollout fails are skipped and the next seed is tried.
pub fn generate_demos(kind: EnvKind, n: usize, seed: u64) -> Result<DemoSet> {
    if !(1..=MAX_DEMOS).contains(&n) {
        return Err(Error::Config(format!("demo count must lie in 1..={MAX_DEMOS}, got {n}")));
    }
    let mut out = Vec::with_capacity(n);
    let mut attempt = 0;
    while out.len() < n {
        if attempt >= MAX_ATTEMPTS {
            return Err(Error::Numeric {
                module: "demos",
                step: attempt,
                detail: format!("expert failed on {attempt} consecutive resets"),
            });
        }
        let ep = rollout(kind, derive_seed(seed, Stream::Demos, attempt), false, expert_action)?;
        attempt += 1;
        if ep.success {
            out.push(ep);
        } else {
            tracing::warn!(attempt, "expert rollout failed; resampling");
        }
    }
    DemoSet::new(kind, out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BcConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Stop after this many epochs without a relative improvement of
    /// `min_rel_improvement`.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for BcConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 1e-3,
            patience: 50,
            min_rel_improvement: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BcReport {
    pub epochs: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Full-batch behavior cloning on every demo step with its own optimizer.
pub fn bc_pretrain(policy: &mut GaussianPolicy, demos: &DemoSet, cfg: &BcConfig) -> Result<BcReport> {
    if demos.is_empty() {
        return Err(Error::Config("behavior cloning needs at least one demonstration".into()));
    }
    let (obs, act) = demos.steps();
    let mut opt = Adam::new(policy.net().params(), cfg.lr);
    let mut best = f64::INFINITY;
    let mut stale = 0;
    let mut report = BcReport {
        epochs: 0,
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
    };
    for epoch in 0..cfg.epochs {
        let mut grads = policy.net().params().zeros_like();
        let loss = policy.bc_loss_and_grad(&obs, &act, 1.0, &mut grads)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                module: "bc_pretrain",
                step: epoch as u64,
                detail: "bc loss is not finite".into(),
            });
        }
        if epoch == 0 {
            report.initial_loss = loss;
        }
        opt.step(policy.net_mut().params_mut(), &grads)?;
        report.epochs = epoch + 1;
        report.final_loss = loss;
        if loss < best * (1.0 - cfg.min_rel_improvement) {
            best = loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    Ok(report)
}

/// Fraction of each policy batch drawn from demonstrations, decaying
/// linearly from `start` to `end` over `horizon` steps and constant after.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaSchedule {
    pub start: f64,
    pub end: f64,
    pub horizon: u64,
}

impl AlphaSchedule {
    pub fn constant(alpha: f64) -> Self {
        Self {
            start: alpha,
            end: alpha,
            horizon: 0,
        }
    }

    pub fn value(&self, t: u64) -> f64 {
        if self.horizon == 0 || t >= self.horizon {
            return self.end;
        }
        let frac = t as f64 / self.horizon as f64;
        self.start + (self.end - self.start) * frac
    }

    pub fn validate(&self) -> Result<()> {
        for a in [self.start, self.end] {
            if !(0.0..1.0).contains(&a) {
                return Err(Error::Config(format!("demo fraction must lie in [0, 1), got {a}")));
            }
        }
        Ok(())
    }
}

/// Demo rows used by [`mixed_policy_update`], precomputed once.
#[derive(Clone, Debug)]
pub struct DemoBank {
    obs: Tensor2,
    actions: Tensor2,
}

impl DemoBank {
    pub fn new(demos: &DemoSet) -> Self {
        let (obs, actions) = demos.steps();
        Self { obs, actions }
    }

    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.rows() == 0
    }

    fn sample<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> (Tensor2, Tensor2) {
        let idx: Vec<usize> = (0..k).map(|_| rng.random_range(0..self.len())).collect();
        let obs = Tensor2::from_fn(k, self.obs.cols(), |r, c| self.obs.get(idx[r], c));
        let act = Tensor2::from_fn(k, self.actions.cols(), |r, c| self.actions.get(idx[r], c));
        (obs, act)
    }
}

/// Number of demo rows in a batch of `batch_size` at demo fraction `alpha`.
pub fn demo_count(alpha: f64, batch_size: usize) -> usize {
    if alpha <= 0.0 {
        0
    } else {
        ((alpha * batch_size as f64 - 1e-9).ceil() as usize).min(batch_size)
    }
}

/// One policy update with `demo_count(alpha, B)` demo rows and the rest
/// from replay. Replay rows feed the critics and the actor; demo rows only
/// the BC term weighted by `lambda_bc`. With `alpha = 0` this is exactly
/// a plain SAC update on `B` replay rows.
pub fn mixed_policy_update<R: Rng + ?Sized>(
    agent: &mut SacAgent,
    replay: &ReplayBuffer,
    demos: &DemoBank,
    alpha: f64,
    lambda_bc: f64,
    rng: &mut R,
) -> Result<SacLosses> {
    let b = agent.config().batch_size;
    let k = demo_count(alpha, b);
    if k > 0 && demos.is_empty() {
        return Err(Error::Config(format!(
            "demo fraction {alpha} requested but no demonstrations are loaded"
        )));
    }
    let idx = replay.sample_indices(b - k, rng);
    let batch = replay.batch(&idx)?;
    if k == 0 {
        return agent.update(&batch, rng);
    }
    let (obs, act) = demos.sample(k, rng);
    agent.update_with_bc(&batch, Some((&obs, &act)), lambda_bc, rng)
}
