//! Soft Actor-Critic with a tanh-squashed Gaussian policy, twin critics,
//! Polyak-averaged targets, a fixed entropy temperature and a FIFO replay
//! buffer whose rewards can be rewritten in place.

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{Activation, Adam, ForwardCache, Mlp, MlpSpec, OutputActivation, ParamSet, Tensor2};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SacConfig {
    pub policy_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub lr: f64,
    pub discount: f64,
    pub tau: f64,
    /// Entropy temperature (fixed).
    pub alpha_ent: f64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            policy_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            lr: 3e-4,
            discount: 0.99,
            tau: 0.005,
            alpha_ent: 0.1,
            batch_size: 256,
            buffer_capacity: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub action: Vec<f64>,
    /// Learned reward; rewritten by [`ReplayBuffer::relabel_all`].
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

/// Anything that scores `(obs, action)` pairs.
pub trait RewardFunction {
    fn reward(&self, obs: &[f64], action: &[f64]) -> Result<f64>;

    /// Scores row `i` of `obs` with row `i` of `actions`.
    fn reward_batch(&self, obs: &Tensor2, actions: &Tensor2) -> Result<Vec<f64>> {
        (0..obs.rows())
            .map(|i| self.reward(obs.row(i), actions.row(i)))
            .collect()
    }
}

impl<F: Fn(&[f64], &[f64]) -> f64> RewardFunction for F {
    fn reward(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        Ok(self(obs, action))
    }
}

/// Columns of a sampled minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Tensor2,
    pub actions: Tensor2,
    pub rewards: Vec<f64>,
    pub next_obs: Tensor2,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions<'a>(items: impl IntoIterator<Item = &'a Transition>) -> Result<Self> {
        let items: Vec<&Transition> = items.into_iter().collect();
        let first = items.first().ok_or(Error::EmptySelection("empty transition batch"))?;
        let (od, ad) = (first.obs.len(), first.action.len());
        let n = items.len();
        let mut obs = Vec::with_capacity(n * od);
        let mut actions = Vec::with_capacity(n * ad);
        let mut next_obs = Vec::with_capacity(n * od);
        for t in &items {
            obs.extend_from_slice(&t.obs);
            actions.extend_from_slice(&t.action);
            next_obs.extend_from_slice(&t.next_obs);
        }
        Ok(Self {
            obs: Tensor2::from_vec(n, od, obs)?,
            actions: Tensor2::from_vec(n, ad, actions)?,
            rewards: items.iter().map(|t| t.reward).collect(),
            next_obs: Tensor2::from_vec(n, od, next_obs)?,
            dones: items.iter().map(|t| t.done).collect(),
        })
    }
}

/// Fixed-capacity ring buffer; the oldest transition is evicted first.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity.min(1 << 16)),
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` distinct slots drawn uniformly (fewer if the buffer is smaller).
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<usize> {
        if n == 0 || self.items.is_empty() {
            return Vec::new();
        }
        index::sample(rng, self.items.len(), n.min(self.items.len())).into_vec()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        Batch::from_transitions(indices.iter().map(|&i| &self.items[i]))
    }

    /// Overwrites every stored reward with `reward_fn(obs, action)`.
    pub fn relabel_all(&mut self, reward_fn: &dyn RewardFunction) -> Result<()> {
        const CHUNK: usize = 4096;
        for chunk in self.items.chunks_mut(CHUNK) {
            let od = chunk[0].obs.len();
            let ad = chunk[0].action.len();
            let obs = Tensor2::from_vec(
                chunk.len(),
                od,
                chunk.iter().flat_map(|t| t.obs.iter().copied()).collect(),
            )?;
            let actions = Tensor2::from_vec(
                chunk.len(),
                ad,
                chunk.iter().flat_map(|t| t.action.iter().copied()).collect(),
            )?;
            let rewards = reward_fn.reward_batch(&obs, &actions)?;
            for (t, r) in chunk.iter_mut().zip(rewards) {
                if !r.is_finite() {
                    return Err(Error::NonFinite {
                        location: "relabeled reward".into(),
                    });
                }
                t.reward = r;
            }
        }
        Ok(())
    }

    /// Shifts and scales stored rewards to zero mean and unit variance;
    /// returns the `(mean, std)` used. The std is floored at `min_std`.
    pub fn standardize_rewards(&mut self, min_std: f64) -> (f64, f64) {
        if self.items.is_empty() {
            return (0.0, 1.0);
        }
        let n = self.items.len() as f64;
        let mean = self.items.iter().map(|t| t.reward).sum::<f64>() / n;
        let var = self.items.iter().map(|t| (t.reward - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt().max(min_std);
        for t in &mut self.items {
            t.reward = (t.reward - mean) / std;
        }
        (mean, std)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Stochastic,
    Mean,
}

/// Tanh-squashed diagonal Gaussian. The network emits `[mean, log_std]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    net: Mlp,
    action_dim: usize,
}

/// Reparameterized batch sample with everything the actor gradient needs.
#[derive(Clone, Debug)]
pub struct PolicySample {
    pub actions: Tensor2,
    pub log_probs: Vec<f64>,
    pub noise: Tensor2,
    log_std: Tensor2,
    log_std_active: Vec<bool>,
    cache: ForwardCache,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln(1 - tanh(u)^2)` without cancellation.
fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

impl GaussianPolicy {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, action_dim: usize, hidden: &[usize], rng: &mut R) -> Result<Self> {
        let spec = MlpSpec::with_hidden(
            obs_dim,
            hidden,
            2 * action_dim,
            Activation::Relu,
            OutputActivation::Identity,
        )?;
        Ok(Self {
            net: Mlp::new(spec, rng),
            action_dim,
        })
    }

    pub fn from_net(net: Mlp, action_dim: usize) -> Result<Self> {
        if net.spec().output_size() != 2 * action_dim {
            return Err(Error::DimensionMismatch {
                context: "GaussianPolicy output",
                expected: 2 * action_dim,
                actual: net.spec().output_size(),
            });
        }
        Ok(Self { net, action_dim })
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.net.spec().input_size()
    }

    /// One action for one observation, with its log-probability (for
    /// `Mean` mode the log-probability of the zero-noise sample).
    pub fn act<R: Rng + ?Sized>(&self, obs: &[f64], mode: ActionMode, rng: &mut R) -> Result<(Vec<f64>, f64)> {
        let noise = match mode {
            ActionMode::Mean => vec![0.0; self.action_dim],
            ActionMode::Stochastic => (0..self.action_dim).map(|_| rng.sample(StandardNormal)).collect(),
        };
        let s = self.sample_batch(&Tensor2::row_vector(obs), &Tensor2::row_vector(&noise))?;
        Ok((s.actions.into_data(), s.log_probs[0]))
    }

    /// `tanh(mean)` for every row.
    pub fn mean_actions(&self, obs: &Tensor2) -> Result<Tensor2> {
        let out = self.net.forward_batch(obs)?;
        let d = self.action_dim;
        Ok(Tensor2::from_fn(obs.rows(), d, |r, c| out.get(r, c).tanh()))
    }

    pub fn sample_noise<R: Rng + ?Sized>(&self, rows: usize, rng: &mut R) -> Tensor2 {
        Tensor2::from_fn(rows, self.action_dim, |_, _| rng.sample(StandardNormal))
    }

    /// `a = tanh(mean + exp(log_std) * noise)` and `log pi(a | s)`.
    pub fn sample_batch(&self, obs: &Tensor2, noise: &Tensor2) -> Result<PolicySample> {
        let d = self.action_dim;
        if noise.rows() != obs.rows() || noise.cols() != d {
            return Err(Error::DimensionMismatch {
                context: "policy noise",
                expected: obs.rows() * d,
                actual: noise.rows() * noise.cols(),
            });
        }
        let cache = self.net.forward_cached(obs)?;
        let out = cache.output();
        let n = obs.rows();
        let mut actions = Tensor2::zeros(n, d);
        let mut log_std = Tensor2::zeros(n, d);
        let mut active = Vec::with_capacity(n * d);
        let mut log_probs = Vec::with_capacity(n);
        for r in 0..n {
            let mut lp = 0.0;
            for c in 0..d {
                let mean = out.get(r, c);
                let raw = out.get(r, d + c);
                let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
                active.push(raw > LOG_STD_MIN && raw < LOG_STD_MAX);
                let xi = noise.get(r, c);
                let u = mean + ls.exp() * xi;
                actions.set(r, c, u.tanh());
                log_std.set(r, c, ls);
                lp += -0.5 * xi * xi - ls - HALF_LN_2PI - log_one_minus_tanh_sq(u);
            }
            log_probs.push(lp);
        }
        Ok(PolicySample {
            actions,
            log_probs,
            noise: noise.clone(),
            log_std,
            log_std_active: active,
            cache,
        })
    }

    /// Mean squared error between `tanh(mean)` and expert actions, summed
    /// over action dimensions and averaged over rows, with its gradient
    /// scaled by `weight`.
    pub fn bc_loss_and_grad(&self, obs: &Tensor2, expert: &Tensor2, weight: f64, grads: &mut ParamSet) -> Result<f64> {
        let d = self.action_dim;
        if expert.rows() != obs.rows() || expert.cols() != d {
            return Err(Error::DimensionMismatch {
                context: "bc expert actions",
                expected: obs.rows() * d,
                actual: expert.rows() * expert.cols(),
            });
        }
        let n = obs.rows();
        if n == 0 {
            return Ok(0.0);
        }
        let cache = self.net.forward_cached(obs)?;
        let out = cache.output();
        let mut upstream = Tensor2::zeros(n, 2 * d);
        let mut loss = 0.0;
        for r in 0..n {
            for c in 0..d {
                let a = out.get(r, c).tanh();
                let diff = a - expert.get(r, c);
                loss += diff * diff;
                upstream.set(r, c, weight * 2.0 * diff * (1.0 - a * a) / n as f64);
            }
        }
        self.net.backward_batch(&cache, &upstream, Some(grads), false)?;
        Ok(loss / n as f64)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SacLosses {
    pub critic: [f64; 2],
    pub actor: f64,
    pub bc: Option<f64>,
}

/// Policy, twin critics, target critics and their optimizers.
#[derive(Clone, Debug)]
pub struct SacAgent {
    cfg: SacConfig,
    policy: GaussianPolicy,
    policy_opt: Adam,
    critics: [Mlp; 2],
    critic_opts: [Adam; 2],
    targets: [Mlp; 2],
    updates: u64,
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        action_dim: usize,
        cfg: SacConfig,
        policy_rng: &mut R,
        critic_rng: &mut R,
    ) -> Result<Self> {
        let policy = GaussianPolicy::new(obs_dim, action_dim, &cfg.policy_hidden, policy_rng)?;
        let critic_spec = MlpSpec::with_hidden(
            obs_dim + action_dim,
            &cfg.critic_hidden,
            1,
            Activation::Relu,
            OutputActivation::Identity,
        )?;
        let critics = [Mlp::new(critic_spec.clone(), critic_rng), Mlp::new(critic_spec, critic_rng)];
        Self::from_parts(cfg, policy, critics)
    }

    /// Agent around existing networks; targets start as copies of the
    /// critics.
    pub fn from_parts(cfg: SacConfig, policy: GaussianPolicy, critics: [Mlp; 2]) -> Result<Self> {
        let need = policy.obs_dim() + policy.action_dim();
        for c in &critics {
            if c.spec().input_size() != need || c.spec().output_size() != 1 {
                return Err(Error::DimensionMismatch {
                    context: "critic shape",
                    expected: need,
                    actual: c.spec().input_size(),
                });
            }
        }
        let policy_opt = Adam::new(policy.net().params(), cfg.lr);
        let critic_opts = [
            Adam::new(critics[0].params(), cfg.lr),
            Adam::new(critics[1].params(), cfg.lr),
        ];
        Ok(Self {
            targets: critics.clone(),
            cfg,
            policy,
            policy_opt,
            critics,
            critic_opts,
            updates: 0,
        })
    }

    pub fn config(&self) -> &SacConfig {
        &self.cfg
    }

    pub fn policy(&self) -> &GaussianPolicy {
        &self.policy
    }

    /// Mutable policy access, e.g. for pretraining. Resets nothing.
    pub fn policy_mut(&mut self) -> &mut GaussianPolicy {
        &mut self.policy
    }

    pub fn critics(&self) -> &[Mlp; 2] {
        &self.critics
    }

    pub fn targets(&self) -> &[Mlp; 2] {
        &self.targets
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// Swaps the two critic heads (and their targets and optimizers).
    pub fn swap_critics(&mut self) {
        self.critics.swap(0, 1);
        self.targets.swap(0, 1);
        self.critic_opts.swap(0, 1);
    }

    fn numeric(&self, what: &str) -> Error {
        Error::Numeric {
            module: "sac",
            step: self.updates,
            detail: format!("non-finite {what}"),
        }
    }

    /// Bellman targets `r + discount * (1 - done) * (min target Q - alpha log pi)`
    /// on next actions drawn with `next_noise`.
    pub fn bellman_targets(&self, batch: &Batch, next_noise: &Tensor2) -> Result<Vec<f64>> {
        let next = self.policy.sample_batch(&batch.next_obs, next_noise)?;
        let feats = batch.next_obs.hconcat(&next.actions)?;
        let q1 = self.targets[0].forward_batch(&feats)?;
        let q2 = self.targets[1].forward_batch(&feats)?;
        Ok((0..batch.len())
            .map(|i| {
                let soft = q1.get(i, 0).min(q2.get(i, 0)) - self.cfg.alpha_ent * next.log_probs[i];
                let cont = if batch.dones[i] { 0.0 } else { 1.0 };
                batch.rewards[i] + self.cfg.discount * cont * soft
            })
            .collect())
    }

    /// Mean squared Bellman residual of each head, with gradients.
    pub fn critic_losses(&self, batch: &Batch, targets: &[f64]) -> Result<[(f64, ParamSet); 2]> {
        let feats = batch.obs.hconcat(&batch.actions)?;
        let n = batch.len() as f64;
        let head = |h: usize| -> Result<(f64, ParamSet)> {
            let critic = &self.critics[h];
            let cache = critic.forward_cached(&feats)?;
            let q = cache.output();
            let mut upstream = Tensor2::zeros(batch.len(), 1);
            let mut loss = 0.0;
            for (i, y) in targets.iter().enumerate() {
                let diff = q.get(i, 0) - y;
                loss += diff * diff;
                upstream.set(i, 0, 2.0 * diff / n);
            }
            let mut grads = critic.params().zeros_like();
            critic.backward_batch(&cache, &upstream, Some(&mut grads), false)?;
            Ok((loss / n, grads))
        };
        Ok([head(0)?, head(1)?])
    }

    /// Actor loss `mean(alpha log pi(a|s) - min(Q1, Q2)(s, a))` with
    /// reparameterized actions, and its gradient in policy parameters
    /// scaled by `weight`, accumulated into `grads`.
    pub fn actor_loss_and_grad(&self, obs: &Tensor2, noise: &Tensor2, weight: f64, grads: &mut ParamSet) -> Result<f64> {
        let n = obs.rows();
        if n == 0 {
            return Ok(0.0);
        }
        let d = self.policy.action_dim;
        let od = self.policy.obs_dim();
        let alpha = self.cfg.alpha_ent;
        let sample = self.policy.sample_batch(obs, noise)?;
        let feats = obs.hconcat(&sample.actions)?;
        let c1 = self.critics[0].forward_cached(&feats)?;
        let c2 = self.critics[1].forward_cached(&feats)?;
        let inv_n = weight / n as f64;
        let mut up1 = Tensor2::zeros(n, 1);
        let mut up2 = Tensor2::zeros(n, 1);
        let mut loss = 0.0;
        for i in 0..n {
            let (q1, q2) = (c1.output().get(i, 0), c2.output().get(i, 0));
            if q1 <= q2 {
                up1.set(i, 0, -inv_n);
            } else {
                up2.set(i, 0, -inv_n);
            }
            loss += alpha * sample.log_probs[i] - q1.min(q2);
        }
        let g1 = self.critics[0]
            .backward_batch(&c1, &up1, None, true)?
            .expect("input gradient requested");
        let g2 = self.critics[1]
            .backward_batch(&c2, &up2, None, true)?
            .expect("input gradient requested");
        let mut upstream = Tensor2::zeros(n, 2 * d);
        for i in 0..n {
            for c in 0..d {
                let a = sample.actions.get(i, c);
                let dq_da = g1.get(i, od + c) + g2.get(i, od + c);
                let dl_du = inv_n * alpha * 2.0 * a + dq_da * (1.0 - a * a);
                let sigma_xi = sample.log_std.get(i, c).exp() * sample.noise.get(i, c);
                upstream.set(i, c, dl_du);
                if sample.log_std_active[i * d + c] {
                    upstream.set(i, d + c, dl_du * sigma_xi - inv_n * alpha);
                }
            }
        }
        self.policy
            .net
            .backward_batch(&sample.cache, &upstream, Some(grads), false)?;
        Ok(loss / n as f64)
    }

    /// One SAC step on `batch`: critics, then actor, then targets.
    pub fn update<R: Rng + ?Sized>(&mut self, batch: &Batch, rng: &mut R) -> Result<SacLosses> {
        self.update_with_bc(batch, None, 0.0, rng)
    }

    /// SAC step whose actor objective adds `lambda_bc` times the BC loss on
    /// `demo = (obs, expert actions)`. Demo rows never reach the critics.
    pub fn update_with_bc<R: Rng + ?Sized>(
        &mut self,
        batch: &Batch,
        demo: Option<(&Tensor2, &Tensor2)>,
        lambda_bc: f64,
        rng: &mut R,
    ) -> Result<SacLosses> {
        if batch.is_empty() {
            return Err(Error::EmptySelection("SAC update needs a non-empty replay batch"));
        }
        let next_noise = self.policy.sample_noise(batch.len(), rng);
        let actor_noise = self.policy.sample_noise(batch.len(), rng);

        let targets = self.bellman_targets(batch, &next_noise)?;
        let [(l1, g1), (l2, g2)] = self.critic_losses(batch, &targets)?;
        if !l1.is_finite() {
            return Err(self.numeric("critic 1 loss"));
        }
        if !l2.is_finite() {
            return Err(self.numeric("critic 2 loss"));
        }
        self.critic_opts[0].step(self.critics[0].params_mut(), &g1)?;
        self.critic_opts[1].step(self.critics[1].params_mut(), &g2)?;

        let mut grads = self.policy.net.params().zeros_like();
        let actor = self.actor_loss_and_grad(&batch.obs, &actor_noise, 1.0, &mut grads)?;
        if !actor.is_finite() {
            return Err(self.numeric("actor loss"));
        }
        let bc = match demo {
            Some((obs, expert)) if obs.rows() > 0 => {
                let bc = self.policy.bc_loss_and_grad(obs, expert, lambda_bc, &mut grads)?;
                if !bc.is_finite() {
                    return Err(self.numeric("bc loss"));
                }
                Some(bc)
            }
            _ => None,
        };
        self.policy_opt.step(self.policy.net.params_mut(), &grads)?;

        for h in 0..2 {
            let main = self.critics[h].params().clone();
            self.targets[h].params_mut().soft_update_from(&main, self.cfg.tau)?;
        }
        self.updates += 1;
        Ok(SacLosses {
            critic: [l1, l2],
            actor,
            bc,
        })
    }
}
