//! The training loop: demonstrations or warmup, collection, query sessions,
//! reward updates, relabeling, policy updates and evaluation.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::annotate::{query_session, Annotator, MockVlmAnnotator, NoisyScriptedAnnotator};
use crate::demos::{bc_pretrain, generate_demos, mixed_policy_update, DemoBank, DemoSet};
use crate::envs::{reset, rollout, step, EnvKind, Episode, ACTION_DIM, EPISODE_LEN};
use crate::error::{Error, Result};
use crate::ndmath::Mlp;
use crate::reward::{PreferencePair, RewardEnsemble, ENSEMBLE_SIZE};
use crate::runner::config::{AnnotatorKind, Mode, RewardSource, RunConfig};
use crate::runner::metrics::{render_csv, MetricsRow};
use crate::sac::{ActionMode, GaussianPolicy, ReplayBuffer, SacAgent, Transition};
use crate::seed::{derive_seed, stream_rng, Stream};
use crate::triteach::{train_session, SessionReport};

/// What one reward-training session touched.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionAudit {
    pub step: u64,
    pub dataset_size: usize,
    pub skipped: Vec<usize>,
    pub trained: Vec<usize>,
    pub selected_clean_ratio: [f64; ENSEMBLE_SIZE],
}

#[derive(Debug)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub audit: Vec<SessionAudit>,
    pub preferences: Vec<PreferencePair>,
    pub agent: SacAgent,
    pub ensemble: RewardEnsemble,
}

impl RunOutput {
    pub fn csv(&self) -> String {
        render_csv(&self.rows)
    }

    pub fn final_success(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.success_rate)
    }
}

#[derive(Serialize)]
struct Checkpoint<'a> {
    step: u64,
    env: EnvKind,
    mode: Mode,
    policy: &'a Mlp,
    critics: &'a [Mlp; 2],
    reward_members: &'a [Mlp; ENSEMBLE_SIZE],
}

/// Rewrites a non-finite value error as a numeric failure tagged with the
/// module and env step.
fn at(module: &'static str, t: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { location } => Error::Numeric {
            module,
            step: t,
            detail: format!("non-finite value at {location}"),
        },
        Error::Numeric { detail, .. } => Error::Numeric { module, step: t, detail },
        other => other,
    }
}

/// Deterministic-mean evaluation on a fixed set of reset seeds. Episodes
/// stop at first success.
pub fn evaluate(policy: &GaussianPolicy, kind: EnvKind, seed: u64, episodes: usize) -> Result<(f64, f64)> {
    let mut unused = ChaCha8Rng::seed_from_u64(0);
    let mut wins = 0;
    let mut total = 0.0;
    for i in 0..episodes {
        let mut failure = None;
        let ep = rollout(kind, derive_seed(seed, Stream::Eval, i as u64), true, |s| {
            match policy.act(&s.obs(), ActionMode::Mean, &mut unused) {
                Ok((a, _)) => [a[0], a[1]],
                Err(e) => {
                    failure.get_or_insert(e);
                    [0.0; ACTION_DIM]
                }
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
        wins += ep.success as usize;
        total += ep.rewards.iter().sum::<f64>();
    }
    Ok((wins as f64 / episodes as f64, total / episodes as f64))
}

fn load_demos(cfg: &RunConfig, n: usize) -> Result<DemoSet> {
    let kind = cfg.run.env;
    match &cfg.demos.path {
        Some(path) => {
            let d = DemoSet::load(path)?;
            if d.kind() != kind {
                return Err(Error::Config(format!(
                    "{} holds {} demonstrations, run uses {kind}",
                    path.display(),
                    d.kind()
                )));
            }
            if d.len() < n {
                return Err(Error::Config(format!(
                    "{} holds {} demonstrations, {n} requested",
                    path.display(),
                    d.len()
                )));
            }
            Ok(d.truncated(n))
        }
        None => generate_demos(kind, n, derive_seed(cfg.run.seed, Stream::Demos, 0)),
    }
}

fn dataset_clean_ratio(data: &[PreferencePair]) -> f64 {
    let (clean, total) = data
        .iter()
        .filter(|p| !p.is_skipped())
        .fold((0usize, 0usize), |(c, n), p| (c + p.is_clean() as usize, n + 1));
    if total == 0 {
        0.0
    } else {
        clean as f64 / total as f64
    }
}

/// Runs one experiment in memory.
pub fn run_experiment(cfg: &RunConfig) -> Result<RunOutput> {
    let resolved = cfg.resolve()?;
    let seed = cfg.run.seed;
    let kind = cfg.run.env;
    let learned = cfg.run.reward_source == RewardSource::Learned;
    if learned && cfg.run.first_session < 2 * EPISODE_LEN as u64 {
        return Err(Error::Config(format!(
            "run.first_session must be at least {} so two episodes exist to query",
            2 * EPISODE_LEN
        )));
    }

    let mut agent = SacAgent::new(
        kind.obs_dim(),
        ACTION_DIM,
        cfg.sac.clone(),
        &mut stream_rng(seed, Stream::PolicyInit),
        &mut stream_rng(seed, Stream::CriticInit),
    )?;
    let mut ensemble = RewardEnsemble::new(
        kind.feature_dim(),
        &cfg.reward.hidden,
        cfg.reward.lr,
        [0, 1, 2].map(|k| derive_seed(seed, Stream::RewardInit, k)),
        [0, 1, 2].map(|k| derive_seed(seed, Stream::RewardPermutation, k)),
    )?;

    let n_demos = resolved.n_demos;
    let demos = if n_demos > 0 {
        let d = load_demos(cfg, n_demos)?;
        let rep = bc_pretrain(agent.policy_mut(), &d, &cfg.demos.bc).map_err(at("bc_pretrain", 0))?;
        tracing::info!(epochs = rep.epochs, loss = rep.final_loss, "behavior cloning done");
        d
    } else {
        DemoSet::empty(kind)
    };
    let bank = DemoBank::new(&demos);
    let alpha = cfg.alpha_schedule();

    let mut annotator: Box<dyn Annotator> = match cfg.annotator.kind {
        AnnotatorKind::Scripted => Box::new(NoisyScriptedAnnotator::new(
            cfg.annotator.noise_rate,
            cfg.annotator.tie_tolerance,
            stream_rng(seed, Stream::Annotator),
        )?),
        AnnotatorKind::MockVlm => {
            let path = cfg.annotator.fixture.as_ref().expect("validated");
            Box::new(MockVlmAnnotator::from_file(path)?)
        }
    };

    let mut explore_rng = stream_rng(seed, Stream::Exploration);
    let mut warmup_rng = stream_rng(seed, Stream::Warmup);
    let mut replay_rng = stream_rng(seed, Stream::Replay);
    let mut query_rng = stream_rng(seed, Stream::Queries);

    let session_cfg = cfg.session_config(&resolved);
    let query_opts = cfg.query_options();
    let mut budget = cfg.queries.clone();
    budget.used = 0;
    let mut replay = ReplayBuffer::new(cfg.sac.buffer_capacity);
    let mut episodes: Vec<Episode> = Vec::new();
    let mut data: Vec<PreferencePair> = Vec::new();
    let mut audit = Vec::new();
    let mut rows = Vec::new();
    let mut last_session = SessionReport::default();

    let warmup = if n_demos == 0 { cfg.run.warmup_steps } else { 0 };
    let mut updates_on = !learned;
    // affine map applied to ensemble rewards before they reach SAC
    let mut reward_scale = (0.0, 1.0);
    let mut next_session = cfg.run.first_session;
    let total = cfg.run.total_steps;

    let mut episode_index = 0u64;
    let mut state = reset(kind, derive_seed(seed, Stream::EnvReset, episode_index));
    let mut current = Episode::default();
    let mut t = 0u64;
    while t < total {
        let obs = state.obs();
        let action = if t < warmup {
            [warmup_rng.random_range(-1.0..1.0), warmup_rng.random_range(-1.0..1.0)]
        } else {
            let (a, _) = agent
                .policy()
                .act(&obs, ActionMode::Stochastic, &mut explore_rng)
                .map_err(at("policy", t))?;
            [a[0], a[1]]
        };
        let result = step(&state, action).map_err(at("env", t))?;
        let reward = if learned {
            (ensemble.reward(&obs, &action).map_err(at("reward", t))? - reward_scale.0) / reward_scale.1
        } else {
            result.true_reward
        };
        // Time limits are not terminal, and episodes run past success.
        replay.push(Transition {
            obs,
            action: action.to_vec(),
            reward,
            next_obs: result.next_state.obs(),
            done: false,
        });
        current.push(state, action, &result);
        state = result.next_state;
        t += 1;
        if state.t() >= EPISODE_LEN {
            episodes.push(std::mem::take(&mut current));
            episode_index += 1;
            state = reset(kind, derive_seed(seed, Stream::EnvReset, episode_index));
        }

        if learned && t == next_session {
            next_session += budget.interval as u64;
            let new = query_session(&episodes, annotator.as_mut(), &mut budget, &ensemble, &query_opts, &mut query_rng)?;
            if !new.is_empty() {
                data.extend(new);
                let rep = train_session(&mut ensemble, &data, &session_cfg).map_err(at("reward", t))?;
                if let Some(k) = rep.member_losses.iter().position(|l| !l.is_finite()) {
                    return Err(Error::Numeric {
                        module: "reward",
                        step: t,
                        detail: format!("non-finite loss for member {}", k + 1),
                    });
                }
                if cfg.run.audit {
                    audit.push(SessionAudit {
                        step: t,
                        dataset_size: data.len(),
                        skipped: (0..data.len()).filter(|&i| data[i].is_skipped()).collect(),
                        trained: rep.trained_indices.iter().copied().collect(),
                        selected_clean_ratio: rep.selected_clean_ratio,
                    });
                }
                if rep.steps > 0 {
                    replay.relabel_all(&ensemble).map_err(at("relabel", t))?;
                    if cfg.reward.normalize {
                        reward_scale = replay.standardize_rewards(1e-8);
                    }
                    updates_on = true;
                }
                last_session = rep;
            }
        }

        let a_t = if n_demos > 0 { alpha.value(t) } else { 0.0 };
        if updates_on && t >= warmup {
            mixed_policy_update(&mut agent, &replay, &bank, a_t, cfg.demos.lambda_bc, &mut replay_rng).map_err(at("sac", t))?;
        }

        if t % cfg.eval.interval == 0 || t == total {
            let (success_rate, mean_return) = evaluate(agent.policy(), kind, seed, cfg.eval.episodes).map_err(at("eval", t))?;
            let row = MetricsRow {
                step: t,
                success_rate,
                mean_return,
                clean_ratio_sel: last_session.selected_clean_ratio,
                clean_ratio_dataset: dataset_clean_ratio(&data),
                reward_loss: last_session.member_losses,
                feedback_used: budget.used,
                alpha_demo: a_t,
            };
            tracing::info!(step = t, success = success_rate, ret = mean_return, feedback = budget.used, "eval");
            rows.push(row);
        }
    }

    Ok(RunOutput {
        rows,
        audit,
        preferences: data,
        agent,
        ensemble,
    })
}

/// Runs an experiment and writes `metrics.csv`, `checkpoint.json`,
/// `config.toml` and, when enabled, `audit.json` into `out`.
pub fn run_to_dir(cfg: &RunConfig, out: &Path) -> Result<RunOutput> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let output = run_experiment(cfg)?;
    let write = |name: &str, text: &str| -> Result<()> {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("metrics.csv", &output.csv())?;
    write("config.toml", &cfg.to_toml())?;
    let ckpt = Checkpoint {
        step: cfg.run.total_steps,
        env: cfg.run.env,
        mode: cfg.run.mode,
        policy: output.agent.policy().net(),
        critics: output.agent.critics(),
        reward_members: output.ensemble.members(),
    };
    write("checkpoint.json", &serde_json::to_string(&ckpt).expect("checkpoint serializes"))?;
    if cfg.run.audit {
        write("audit.json", &serde_json::to_string_pretty(&output.audit).expect("audit serializes"))?;
    }
    Ok(output)
}
