//! Bradley-Terry reward ensemble.
//!
//! A preference probability is the logistic function of the difference of
//! predicted segment returns, which is the two-way softmax over segment
//! returns written without overflow. Each member is trained with binary
//! cross-entropy against the observed label.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::Segment;
use crate::error::{Error, Result};
use crate::ndmath::{Activation, Adam, Mlp, MlpSpec, OutputActivation, ParamSet, Tensor2};
use crate::sac::RewardFunction;

pub const ENSEMBLE_SIZE: usize = 3;
const PROB_CLAMP: f64 = 1e-12;

/// Preference label over `(seg0, seg1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    /// `(1, 0)`: segment 0 preferred.
    First,
    /// `(0, 1)`: segment 1 preferred.
    Second,
    /// `(0.5, 0.5)`.
    Indifferent,
}

impl Label {
    /// The label as a distribution `(y0, y1)`.
    pub fn target(self) -> (f64, f64) {
        match self {
            Label::First => (1.0, 0.0),
            Label::Second => (0.0, 1.0),
            Label::Indifferent => (0.5, 0.5),
        }
    }

    pub fn is_strict(self) -> bool {
        self != Label::Indifferent
    }

    /// Swaps the preferred side; indifference is unchanged.
    pub fn flipped(self) -> Self {
        match self {
            Label::First => Label::Second,
            Label::Second => Label::First,
            Label::Indifferent => Label::Indifferent,
        }
    }
}

/// Two segments with the annotator's label (`None` when it abstained) and
/// the pre-corruption label, which only metrics may read.
#[derive(Clone, Debug)]
pub struct PreferencePair {
    pub seg0: Segment,
    pub seg1: Segment,
    observed: Option<Label>,
    clean_label: Label,
}

impl PreferencePair {
    pub fn new(seg0: Segment, seg1: Segment, observed: Option<Label>, clean_label: Label) -> Self {
        Self {
            seg0,
            seg1,
            observed,
            clean_label,
        }
    }

    /// The observed, possibly corrupted label; `None` for skipped pairs.
    pub fn label(&self) -> Option<Label> {
        self.observed
    }

    pub fn is_skipped(&self) -> bool {
        self.observed.is_none()
    }

    /// Metrics only.
    pub fn clean_label(&self) -> Label {
        self.clean_label
    }

    /// Metrics only: whether the observed label equals the clean one.
    pub fn is_clean(&self) -> bool {
        self.observed == Some(self.clean_label)
    }

    pub fn set_clean_label(&mut self, label: Label) {
        self.clean_label = label;
    }

    /// Same pair with the segments exchanged and both labels mirrored.
    pub fn swapped(&self) -> Self {
        Self {
            seg0: self.seg1.clone(),
            seg1: self.seg0.clone(),
            observed: self.observed.map(Label::flipped),
            clean_label: self.clean_label.flipped(),
        }
    }

    fn observed_or_err(&self) -> Result<Label> {
        self.observed.ok_or(Error::SkippedPair)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of `label` against `P[seg0 > seg1] = p`, with `p` clamped
/// away from 0 and 1.
pub fn bt_loss(p: f64, label: Label) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let (y0, y1) = label.target();
    -(y0 * p.ln() + y1 * (1.0 - p).ln())
}

/// Predicted return of `segment` under `member`.
pub fn segment_return(member: &Mlp, segment: &Segment) -> Result<f64> {
    Ok(member.forward_batch(segment.features())?.data().iter().sum())
}

/// `P[seg0 > seg1]` under `member`.
pub fn pref_prob(member: &Mlp, pair: &PreferencePair) -> Result<f64> {
    Ok(sigmoid(segment_return(member, &pair.seg0)? - segment_return(member, &pair.seg1)?))
}

/// Per-pair cross-entropy. Skipped pairs are an error.
pub fn pair_loss(member: &Mlp, pair: &PreferencePair) -> Result<f64> {
    let label = pair.observed_or_err()?;
    Ok(bt_loss(pref_prob(member, pair)?, label))
}

fn stacked_features<'a>(pairs: impl Iterator<Item = &'a PreferencePair>) -> Result<(Tensor2, Vec<(usize, usize, usize)>)> {
    let mut data = Vec::new();
    let mut spans = Vec::new();
    let mut width = None;
    let mut row = 0;
    for pair in pairs {
        let (f0, f1) = (pair.seg0.features(), pair.seg1.features());
        let w = *width.get_or_insert(f0.cols());
        if f0.cols() != w || f1.cols() != w {
            return Err(Error::DimensionMismatch {
                context: "preference batch feature width",
                expected: w,
                actual: f0.cols().max(f1.cols()),
            });
        }
        data.extend_from_slice(f0.data());
        data.extend_from_slice(f1.data());
        spans.push((row, f0.rows(), f1.rows()));
        row += f0.rows() + f1.rows();
    }
    let width = width.unwrap_or(0);
    Ok((Tensor2::from_vec(row, width, data)?, spans))
}

/// Return margins `R(seg0) - R(seg1)` for a batch of pairs in one pass.
pub fn batch_margins(member: &Mlp, pairs: &[&PreferencePair]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let (x, spans) = stacked_features(pairs.iter().copied())?;
    let out = member.forward_batch(&x)?;
    let r = out.data();
    Ok(spans
        .iter()
        .map(|&(start, n0, n1)| {
            let s0: f64 = r[start..start + n0].iter().sum();
            let s1: f64 = r[start + n0..start + n0 + n1].iter().sum();
            s0 - s1
        })
        .collect())
}

/// Per-pair losses of a batch under `member`, in batch order.
pub fn batch_losses(member: &Mlp, pairs: &[&PreferencePair]) -> Result<Vec<f64>> {
    let labels = pairs
        .iter()
        .map(|p| p.observed_or_err())
        .collect::<Result<Vec<_>>>()?;
    let margins = batch_margins(member, pairs)?;
    Ok(margins
        .iter()
        .zip(labels)
        .map(|(&m, l)| bt_loss(sigmoid(m), l))
        .collect())
}

/// Mean loss over `pairs` and its parameter gradient.
///
/// The gradient is the exact derivative of the unclamped cross-entropy,
/// `(p - y0)` per unit margin.
pub fn mean_loss_and_grad(member: &Mlp, pairs: &[&PreferencePair]) -> Result<(f64, ParamSet)> {
    if pairs.is_empty() {
        return Err(Error::EmptySelection("reward update on an empty pair set"));
    }
    let labels = pairs
        .iter()
        .map(|p| p.observed_or_err())
        .collect::<Result<Vec<_>>>()?;
    let (x, spans) = stacked_features(pairs.iter().copied())?;
    let cache = member.forward_cached(&x)?;
    let r = cache.output().data();
    let n = pairs.len() as f64;
    let mut upstream = Tensor2::zeros(x.rows(), 1);
    let mut loss = 0.0;
    for (&(start, n0, n1), label) in spans.iter().zip(labels) {
        let s0: f64 = r[start..start + n0].iter().sum();
        let s1: f64 = r[start + n0..start + n0 + n1].iter().sum();
        let p = sigmoid(s0 - s1);
        loss += bt_loss(p, label);
        let g = (p - label.target().0) / n;
        let up = upstream.data_mut();
        up[start..start + n0].iter_mut().for_each(|u| *u = g);
        up[start + n0..start + n0 + n1].iter_mut().for_each(|u| *u = -g);
    }
    let mut grads = member.params().zeros_like();
    member.backward_batch(&cache, &upstream, Some(&mut grads), false)?;
    Ok((loss / n, grads))
}

/// Exactly three reward networks of identical architecture, each with its
/// own optimizer and its own sample-order generator.
#[derive(Clone, Debug)]
pub struct RewardEnsemble {
    members: [Mlp; ENSEMBLE_SIZE],
    optimizers: [Adam; ENSEMBLE_SIZE],
    order_rngs: [ChaCha8Rng; ENSEMBLE_SIZE],
}

impl RewardEnsemble {
    /// Members initialized from `init_seeds`, sample orders drawn from
    /// `order_seeds`. Seeds within each triple must be distinct.
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        lr: f64,
        init_seeds: [u64; ENSEMBLE_SIZE],
        order_seeds: [u64; ENSEMBLE_SIZE],
    ) -> Result<Self> {
        for seeds in [&init_seeds, &order_seeds] {
            if seeds[0] == seeds[1] || seeds[1] == seeds[2] || seeds[0] == seeds[2] {
                return Err(Error::Config(
                    "ensemble members need distinct seeds".into(),
                ));
            }
        }
        let spec = MlpSpec::with_hidden(input_dim, hidden, 1, Activation::Tanh, OutputActivation::Identity)?;
        let members = init_seeds.map(|s| Mlp::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(s)));
        Self::from_members(members, lr, order_seeds)
    }

    pub fn from_members(members: [Mlp; ENSEMBLE_SIZE], lr: f64, order_seeds: [u64; ENSEMBLE_SIZE]) -> Result<Self> {
        let spec = members[0].spec();
        if members.iter().any(|m| m.spec() != spec) || spec.output_size() != 1 {
            return Err(Error::Config(
                "ensemble members must share one scalar-output architecture".into(),
            ));
        }
        let optimizers = [
            Adam::new(members[0].params(), lr),
            Adam::new(members[1].params(), lr),
            Adam::new(members[2].params(), lr),
        ];
        Ok(Self {
            members,
            optimizers,
            order_rngs: order_seeds.map(ChaCha8Rng::seed_from_u64),
        })
    }

    pub fn members(&self) -> &[Mlp; ENSEMBLE_SIZE] {
        &self.members
    }

    pub fn member(&self, k: usize) -> &Mlp {
        &self.members[k]
    }

    pub fn input_dim(&self) -> usize {
        self.members[0].spec().input_size()
    }

    /// Adam step on member `k`.
    pub fn apply_gradient(&mut self, k: usize, grads: &ParamSet) -> Result<()> {
        self.optimizers[k].step(self.members[k].params_mut(), grads)
    }

    /// Fresh permutation of `0..n` from member `k`'s order generator.
    pub fn permutation(&mut self, k: usize, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.order_rngs[k]);
        idx
    }

    /// Mean of the three member outputs.
    pub fn reward(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        let mut x = Vec::with_capacity(obs.len() + action.len());
        x.extend_from_slice(obs);
        x.extend_from_slice(action);
        let mut sum = 0.0;
        for m in &self.members {
            sum += m.forward(&x)?[0];
        }
        Ok(sum / ENSEMBLE_SIZE as f64)
    }

    /// Member-wise preference probabilities for one pair.
    pub fn pref_probs(&self, pair: &PreferencePair) -> Result<[f64; ENSEMBLE_SIZE]> {
        Ok([
            pref_prob(&self.members[0], pair)?,
            pref_prob(&self.members[1], pair)?,
            pref_prob(&self.members[2], pair)?,
        ])
    }
}

impl RewardFunction for RewardEnsemble {
    fn reward(&self, obs: &[f64], action: &[f64]) -> Result<f64> {
        RewardEnsemble::reward(self, obs, action)
    }

    fn reward_batch(&self, obs: &Tensor2, actions: &Tensor2) -> Result<Vec<f64>> {
        let x = obs.hconcat(actions)?;
        let mut sum = vec![0.0; x.rows()];
        for m in &self.members {
            let out = m.forward_batch(&x)?;
            sum.iter_mut().zip(out.data()).for_each(|(s, r)| *s += r);
        }
        Ok(sum.into_iter().map(|s| s / ENSEMBLE_SIZE as f64).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout, EnvKind, EnvState};
    use rand::Rng;

    fn random_segment(kind: EnvKind, seed: u64, len: usize) -> Segment {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        rollout(kind, seed, false, |_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .unwrap()
            .window(10, len)
            .unwrap()
    }

    fn pair(seed: u64, label: Option<Label>) -> PreferencePair {
        PreferencePair::new(
            random_segment(EnvKind::PointReach, seed, 5),
            random_segment(EnvKind::PointReach, seed + 1000, 5),
            label,
            label.unwrap_or(Label::Indifferent),
        )
    }

    fn net(seed: u64) -> Mlp {
        let spec = MlpSpec::with_hidden(4, &[16, 16], 1, Activation::Tanh, OutputActivation::Identity).unwrap();
        Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn sigmoid_closed_form() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!(sigmoid(800.0) == 1.0 && sigmoid(-800.0) >= 0.0);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_segments_give_one_half() {
        let seg = random_segment(EnvKind::PointReach, 1, 5);
        let p = PreferencePair::new(seg.clone(), seg, Some(Label::First), Label::First);
        assert_eq!(pref_prob(&net(0), &p).unwrap(), 0.5);
    }

    #[test]
    fn loss_examples() {
        assert!((bt_loss(0.5, Label::First) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bt_loss(1.0 - 1e-15, Label::First) < 1e-11);
        assert!(bt_loss(0.0, Label::First).is_finite());
        // indifferent labels: minimum ln 2 at p = 0.5 on a grid
        let best = (1..1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| bt_loss(*a, Label::Indifferent).total_cmp(&bt_loss(*b, Label::Indifferent)))
            .unwrap();
        assert_eq!(best, 0.5);
        assert!((bt_loss(0.5, Label::Indifferent) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn flipping_label_maps_loss_to_complement() {
        for p in [0.1, 0.37, 0.5, 0.93] {
            assert!((bt_loss(p, Label::Second) - bt_loss(1.0 - p, Label::First)).abs() < 1e-15);
        }
    }

    #[test]
    fn skipped_pairs_cannot_be_scored_for_training() {
        let p = pair(3, None);
        assert!(matches!(pair_loss(&net(1), &p), Err(Error::SkippedPair)));
        assert!(mean_loss_and_grad(&net(1), &[&p]).is_err());
    }

    #[test]
    fn batch_margins_match_single_pair_path() {
        let m = net(2);
        let pairs: Vec<PreferencePair> = (0..6).map(|i| pair(10 + i, Some(Label::First))).collect();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let losses = batch_losses(&m, &refs).unwrap();
        for (p, l) in pairs.iter().zip(losses) {
            assert!((pair_loss(&m, p).unwrap() - l).abs() < 1e-12);
        }
    }

    #[test]
    fn mean_loss_gradient_matches_finite_differences() {
        let m = net(4);
        let pairs: Vec<PreferencePair> = [Label::First, Label::Second, Label::Indifferent, Label::First]
            .iter()
            .enumerate()
            .map(|(i, l)| pair(20 + i as u64, Some(*l)))
            .collect();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let (_, grads) = mean_loss_and_grad(&m, &refs).unwrap();
        let g = grads.flatten();
        let h = 1e-5;
        for k in (0..g.len()).step_by(7) {
            let mut plus = m.clone();
            *plus.params_mut().flat_mut(k) += h;
            let mut minus = m.clone();
            *minus.params_mut().flat_mut(k) -= h;
            let lp = mean_loss_and_grad(&plus, &refs).unwrap().0;
            let lm = mean_loss_and_grad(&minus, &refs).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-7) < 1e-4, "{k}: {fd} vs {}", g[k]);
        }
    }

    #[test]
    fn ensemble_mean_reward() {
        let spec = MlpSpec::new(vec![8, 1], Activation::Tanh, OutputActivation::Identity).unwrap();
        let members = [1.0, 2.0, 3.0].map(|b| {
            let mut p = ParamSet::zeros(&spec);
            p.layers[0].bias[0] = b;
            Mlp::from_params(spec.clone(), p).unwrap()
        });
        let e = RewardEnsemble::from_members(members, 1e-3, [1, 2, 3]).unwrap();
        assert_eq!(e.reward(&[0.0; 6], &[0.0; 2]).unwrap(), 2.0);
    }

    #[test]
    fn ensemble_reward_matches_mean_of_forward_passes() {
        let e = RewardEnsemble::new(8, &[16], 1e-3, [1, 2, 3], [4, 5, 6]).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let obs = Tensor2::from_fn(20, 6, |_, _| r.random_range(-1.0..1.0));
        let act = Tensor2::from_fn(20, 2, |_, _| r.random_range(-1.0..1.0));
        let batch = e.reward_batch(&obs, &act).unwrap();
        for i in 0..20 {
            let mut x = obs.row(i).to_vec();
            x.extend_from_slice(act.row(i));
            let want: f64 = e.members().iter().map(|m| m.forward(&x).unwrap()[0]).sum::<f64>() / 3.0;
            assert!((batch[i] - want).abs() < 1e-12);
            assert!((e.reward(obs.row(i), act.row(i)).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_members_equal_single_member() {
        let m = net(9);
        let e = RewardEnsemble::from_members([m.clone(), m.clone(), m.clone()], 1e-3, [1, 2, 3]).unwrap();
        let x = [0.1, 0.2];
        let single = m.forward(&[0.1, 0.2, 0.7, 0.8]).unwrap()[0];
        assert!((e.reward(&x, &[0.7, 0.8]).unwrap() - single).abs() < 1e-15);
    }

    #[test]
    fn ensemble_rejects_repeated_seeds() {
        assert!(RewardEnsemble::new(8, &[4], 1e-3, [1, 1, 2], [4, 5, 6]).is_err());
        assert!(RewardEnsemble::new(8, &[4], 1e-3, [1, 2, 3], [4, 5, 4]).is_err());
    }

    #[test]
    fn segment_state_kinds_are_consistent() {
        let seg = random_segment(EnvKind::TwoPhasePull, 2, 4);
        assert!(seg.states.iter().all(|s| matches!(s, EnvState::TwoPhasePull { .. })));
    }
}
