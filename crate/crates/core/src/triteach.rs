//! Small-loss sample selection and peer teaching across the reward ensemble.
//!
//! Every member ranks the pairs of its own mini-batch by cross-entropy and
//! keeps the `ceil(gamma * N)` smallest. Under the cyclic schedule member 1
//! selects for member 2, member 2 for member 3 and member 3 for member 1;
//! under the self schedule each member keeps its own selection. All
//! selections of a step are made before any parameters move.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndmath::{Mlp, ParamSet};
use crate::reward::{batch_losses, mean_loss_and_grad, PreferencePair, RewardEnsemble, ENSEMBLE_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cyclic,
    #[serde(rename = "self")]
    SelfTeach,
}

/// Who selects training pairs for whom: `teacher_of[k]` picks for student
/// `k` (0-based member indices).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TeachSchedule {
    teacher_of: [usize; ENSEMBLE_SIZE],
}

impl TeachSchedule {
    /// 1 teaches 2, 2 teaches 3, 3 teaches 1.
    pub fn cyclic() -> Self {
        Self { teacher_of: [2, 0, 1] }
    }

    pub fn self_teach() -> Self {
        Self { teacher_of: [0, 1, 2] }
    }

    pub fn from_kind(kind: ScheduleKind) -> Self {
        match kind {
            ScheduleKind::Cyclic => Self::cyclic(),
            ScheduleKind::SelfTeach => Self::self_teach(),
        }
    }

    pub fn teacher_of(&self, student: usize) -> usize {
        self.teacher_of[student]
    }

    /// `(student, teacher)` pairs in student order.
    pub fn pairs(&self) -> [(usize, usize); ENSEMBLE_SIZE] {
        [0, 1, 2].map(|k| (k, self.teacher_of[k]))
    }

    /// The map applied `n` times.
    pub fn power(&self, n: usize) -> [usize; ENSEMBLE_SIZE] {
        [0, 1, 2].map(|k| (0..n).fold(k, |i, _| self.teacher_of[i]))
    }

    pub fn has_fixed_point(&self) -> bool {
        (0..ENSEMBLE_SIZE).any(|k| self.teacher_of[k] == k)
    }
}

/// Subset size `ceil(gamma * n)`; the small slack keeps decimal rates such
/// as 0.3 * 10 from rounding up.
pub fn selection_size(n: usize, gamma: f64) -> usize {
    ((gamma * n as f64 - 1e-9).ceil().max(1.0) as usize).min(n)
}

pub fn check_rate(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::Config(format!(
            "selection rate must lie in (0, 1], got {gamma}"
        )));
    }
    Ok(())
}

/// Indices of the `ceil(gamma * N)` smallest losses, ties to the lower
/// index, returned in ascending index order. Taking the smallest losses is
/// the minimizer of the subset-mean loss over subsets of size at least
/// `gamma * N`.
pub fn select_small_loss(losses: &[f64], gamma: f64) -> Result<Vec<usize>> {
    check_rate(gamma)?;
    if losses.is_empty() {
        return Err(Error::EmptySelection("no losses to select from"));
    }
    let m = selection_size(losses.len(), gamma);
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    let mut chosen = order[..m].to_vec();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Selection losses of `member` on a batch (evaluation only).
pub fn per_sample_losses(member: &Mlp, batch: &[&PreferencePair]) -> Result<Vec<f64>> {
    batch_losses(member, batch)
}

/// Outcome of one teaching step.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionReport {
    pub batch_size: usize,
    pub gamma: f64,
    pub teacher_of: [usize; ENSEMBLE_SIZE],
    /// For student `k`: positions inside its teacher's batch.
    pub selected: [Vec<usize>; ENSEMBLE_SIZE],
    /// For student `k`: the same pairs as dataset indices.
    pub dataset_indices: [Vec<usize>; ENSEMBLE_SIZE],
    /// Selected pairs whose observed label equals the clean one.
    pub clean_counts: [usize; ENSEMBLE_SIZE],
    /// Student loss on its selection, before the update.
    pub student_losses: [f64; ENSEMBLE_SIZE],
}

impl SelectionReport {
    pub fn clean_ratio(&self, k: usize) -> f64 {
        self.clean_counts[k] as f64 / self.selected[k].len() as f64
    }
}

/// One teaching step. `batches[j]` lists dataset indices in teacher `j`'s
/// own order; student `k` takes one Adam step on the small-loss subset of
/// `batches[schedule.teacher_of(k)]` as ranked by that teacher.
pub fn teach_step(
    ensemble: &mut RewardEnsemble,
    data: &[PreferencePair],
    batches: [&[usize]; ENSEMBLE_SIZE],
    gamma: f64,
    schedule: &TeachSchedule,
) -> Result<SelectionReport> {
    check_rate(gamma)?;
    let n = batches[0].len();
    if n == 0 {
        return Err(Error::EmptySelection("teaching step on an empty batch"));
    }
    if batches.iter().any(|b| b.len() != n) {
        return Err(Error::DimensionMismatch {
            context: "teacher batch sizes",
            expected: n,
            actual: batches.iter().map(|b| b.len()).max().unwrap_or(0),
        });
    }

    // selections from pre-update parameters
    let mut selections: [Vec<usize>; ENSEMBLE_SIZE] = Default::default();
    for j in 0..ENSEMBLE_SIZE {
        let pairs: Vec<&PreferencePair> = batches[j].iter().map(|&i| &data[i]).collect();
        if pairs.iter().any(|p| p.is_skipped()) {
            return Err(Error::SkippedPair);
        }
        selections[j] = if selection_size(n, gamma) == n {
            (0..n).collect()
        } else {
            select_small_loss(&per_sample_losses(ensemble.member(j), &pairs)?, gamma)?
        };
    }

    let mut selected: [Vec<usize>; ENSEMBLE_SIZE] = Default::default();
    let mut dataset_indices: [Vec<usize>; ENSEMBLE_SIZE] = Default::default();
    let mut clean_counts = [0; ENSEMBLE_SIZE];
    let mut student_losses = [0.0; ENSEMBLE_SIZE];
    let mut grads: Vec<ParamSet> = Vec::with_capacity(ENSEMBLE_SIZE);
    for k in 0..ENSEMBLE_SIZE {
        let j = schedule.teacher_of(k);
        selected[k] = selections[j].clone();
        dataset_indices[k] = selections[j].iter().map(|&p| batches[j][p]).collect();
        let pairs: Vec<&PreferencePair> = dataset_indices[k].iter().map(|&i| &data[i]).collect();
        let (loss, g) = mean_loss_and_grad(ensemble.member(k), &pairs)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                module: "triteach",
                step: 0,
                detail: format!("non-finite reward loss for member {}", k + 1),
            });
        }
        student_losses[k] = loss;
        clean_counts[k] = pairs.iter().filter(|p| p.is_clean()).count();
        grads.push(g);
    }
    for (k, g) in grads.iter().enumerate() {
        ensemble.apply_gradient(k, g)?;
    }
    Ok(SelectionReport {
        batch_size: n,
        gamma,
        teacher_of: schedule.teacher_of,
        selected,
        dataset_indices,
        clean_counts,
        student_losses,
    })
}

fn identity_batches(data: &[PreferencePair]) -> Vec<usize> {
    (0..data.len()).collect()
}

/// Cyclic teaching step on `batch`, every member seeing it in batch order.
pub fn tri_teach_step(ensemble: &mut RewardEnsemble, batch: &[PreferencePair], gamma: f64) -> Result<SelectionReport> {
    let idx = identity_batches(batch);
    teach_step(ensemble, batch, [&idx, &idx, &idx], gamma, &TeachSchedule::cyclic())
}

/// Self-teaching ablation on `batch`.
pub fn self_teach_step(ensemble: &mut RewardEnsemble, batch: &[PreferencePair], gamma: f64) -> Result<SelectionReport> {
    let idx = identity_batches(batch);
    teach_step(ensemble, batch, [&idx, &idx, &idx], gamma, &TeachSchedule::self_teach())
}

/// When selections are refreshed during a reward-update session.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCadence {
    /// Fresh selection on every mini-batch.
    PerMinibatch,
    /// One selection over the whole dataset at session start.
    PerSession,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub gamma: f64,
    pub schedule: TeachSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    pub cadence: SelectionCadence,
}

/// Aggregates of one reward-update session.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SessionReport {
    pub steps: usize,
    /// Pooled clean fraction of everything selected for each student.
    pub selected_clean_ratio: [f64; ENSEMBLE_SIZE],
    /// Mean student loss over the last epoch.
    pub member_losses: [f64; ENSEMBLE_SIZE],
    /// Every dataset index that entered any gradient this session.
    pub trained_indices: BTreeSet<usize>,
}

/// Runs `cfg.epochs` passes over the non-skipped part of `data`. Each member
/// visits the data in its own shuffled order.
pub fn train_session(ensemble: &mut RewardEnsemble, data: &[PreferencePair], cfg: &SessionConfig) -> Result<SessionReport> {
    check_rate(cfg.gamma)?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("reward batch size must be positive".into()));
    }
    let usable: Vec<usize> = (0..data.len()).filter(|&i| !data[i].is_skipped()).collect();
    let mut report = SessionReport::default();
    if usable.is_empty() || cfg.epochs == 0 {
        return Ok(report);
    }
    let mut clean = [0usize; ENSEMBLE_SIZE];
    let mut total = [0usize; ENSEMBLE_SIZE];
    match cfg.cadence {
        SelectionCadence::PerMinibatch => {
            for epoch in 0..cfg.epochs {
                let orders: Vec<Vec<usize>> = (0..ENSEMBLE_SIZE)
                    .map(|j| {
                        ensemble
                            .permutation(j, usable.len())
                            .into_iter()
                            .map(|p| usable[p])
                            .collect()
                    })
                    .collect();
                let mut loss_sum = [0.0; ENSEMBLE_SIZE];
                let mut batches = 0;
                for start in (0..usable.len()).step_by(cfg.batch_size) {
                    let end = (start + cfg.batch_size).min(usable.len());
                    let step = teach_step(
                        ensemble,
                        data,
                        [&orders[0][start..end], &orders[1][start..end], &orders[2][start..end]],
                        cfg.gamma,
                        &cfg.schedule,
                    )?;
                    for k in 0..ENSEMBLE_SIZE {
                        clean[k] += step.clean_counts[k];
                        total[k] += step.selected[k].len();
                        loss_sum[k] += step.student_losses[k];
                        report.trained_indices.extend(step.dataset_indices[k].iter().copied());
                    }
                    batches += 1;
                    report.steps += 1;
                }
                if epoch + 1 == cfg.epochs {
                    report.member_losses = loss_sum.map(|s| s / batches as f64);
                }
            }
        }
        SelectionCadence::PerSession => {
            let pairs: Vec<&PreferencePair> = usable.iter().map(|&i| &data[i]).collect();
            let mut pools: [Vec<usize>; ENSEMBLE_SIZE] = Default::default();
            let mut by_teacher: [Vec<usize>; ENSEMBLE_SIZE] = Default::default();
            for (j, sel) in by_teacher.iter_mut().enumerate() {
                *sel = if selection_size(usable.len(), cfg.gamma) == usable.len() {
                    (0..usable.len()).collect()
                } else {
                    select_small_loss(&per_sample_losses(ensemble.member(j), &pairs)?, cfg.gamma)?
                };
            }
            for k in 0..ENSEMBLE_SIZE {
                pools[k] = by_teacher[cfg.schedule.teacher_of(k)]
                    .iter()
                    .map(|&p| usable[p])
                    .collect();
                clean[k] = pools[k].iter().filter(|&&i| data[i].is_clean()).count();
                total[k] = pools[k].len();
                report.trained_indices.extend(pools[k].iter().copied());
            }
            for epoch in 0..cfg.epochs {
                let mut loss_sum = [0.0; ENSEMBLE_SIZE];
                let mut batches = [0usize; ENSEMBLE_SIZE];
                for (k, pool) in pools.iter().enumerate() {
                    let order = ensemble.permutation(k, pool.len());
                    for chunk in order.chunks(cfg.batch_size) {
                        let batch: Vec<&PreferencePair> = chunk.iter().map(|&p| &data[pool[p]]).collect();
                        let (loss, g) = mean_loss_and_grad(ensemble.member(k), &batch)?;
                        loss_sum[k] += loss;
                        batches[k] += 1;
                        ensemble.apply_gradient(k, &g)?;
                        report.steps += 1;
                    }
                }
                if epoch + 1 == cfg.epochs {
                    for k in 0..ENSEMBLE_SIZE {
                        report.member_losses[k] = loss_sum[k] / batches[k].max(1) as f64;
                    }
                }
            }
        }
    }
    for k in 0..ENSEMBLE_SIZE {
        report.selected_clean_ratio[k] = if total[k] == 0 {
            0.0
        } else {
            clean[k] as f64 / total[k] as f64
        };
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{rollout, EnvKind, Segment};
    use crate::reward::Label;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn select_example() {
        let got = select_small_loss(&[0.1, 0.9, 0.2, 0.8, 0.3], 0.6).unwrap();
        assert_eq!(got, vec![0, 2, 4]);
        assert_eq!(select_small_loss(&[3.0, 1.0, 2.0], 1.0).unwrap(), vec![0, 1, 2]);
        let losses: Vec<f64> = (0..128).map(|i| ((i * 37) % 128) as f64).collect();
        assert_eq!(select_small_loss(&losses, 0.6).unwrap().len(), 77);
    }

    #[test]
    fn select_breaks_ties_by_index() {
        assert_eq!(select_small_loss(&[1.0, 1.0, 1.0, 1.0], 0.5).unwrap(), vec![0, 1]);
    }

    #[test]
    fn select_rejects_bad_rates() {
        assert!(matches!(select_small_loss(&[1.0], 0.0), Err(Error::Config(_))));
        assert!(select_small_loss(&[1.0], 1.5).is_err());
        assert!(select_small_loss(&[1.0], f64::NAN).is_err());
        assert!(select_small_loss(&[], 0.5).is_err());
    }

    #[test]
    fn selection_size_rounds_up() {
        assert_eq!(selection_size(5, 0.6), 3);
        assert_eq!(selection_size(10, 0.3), 3);
        assert_eq!(selection_size(7, 0.5), 4);
        assert_eq!(selection_size(128, 0.6), 77);
        assert_eq!(selection_size(1, 0.01), 1);
    }

    #[test]
    fn schedules() {
        let c = TeachSchedule::cyclic();
        assert_eq!(c.pairs(), [(0, 2), (1, 0), (2, 1)]);
        assert!(!c.has_fixed_point());
        assert_eq!(c.power(3), [0, 1, 2]);
        assert_ne!(c.power(1), [0, 1, 2]);
        assert_ne!(c.power(2), [0, 1, 2]);
        assert!(TeachSchedule::self_teach().has_fixed_point());
    }

    fn seg(seed: u64) -> Segment {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        rollout(EnvKind::PointReach, seed, false, |_| {
            [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)]
        })
        .unwrap()
        .window(0, 4)
        .unwrap()
    }

    #[test]
    fn identical_pairs_have_identical_losses() {
        let e = RewardEnsemble::new(4, &[8], 1e-3, [1, 2, 3], [4, 5, 6]).unwrap();
        let p = PreferencePair::new(seg(1), seg(2), Some(Label::First), Label::First);
        let batch = vec![&p, &p, &p];
        let l = per_sample_losses(e.member(0), &batch).unwrap();
        assert!(l[0] == l[1] && l[1] == l[2]);
    }

    #[test]
    fn identical_members_select_alike() {
        let m = RewardEnsemble::new(4, &[8], 1e-3, [1, 2, 3], [4, 5, 6]).unwrap().member(0).clone();
        let mut e = RewardEnsemble::from_members([m.clone(), m.clone(), m], 1e-3, [4, 5, 6]).unwrap();
        let data: Vec<PreferencePair> = (0..10)
            .map(|i| {
                let l = if i % 3 == 0 { Label::Second } else { Label::First };
                PreferencePair::new(seg(10 + i), seg(50 + i), Some(l), Label::First)
            })
            .collect();
        let r = tri_teach_step(&mut e, &data, 0.6).unwrap();
        assert_eq!(r.selected[0], r.selected[1]);
        assert_eq!(r.selected[1], r.selected[2]);
        assert_eq!(e.member(0).params(), e.member(1).params());
        assert_eq!(e.member(1).params(), e.member(2).params());
    }

    #[test]
    fn skipped_pairs_are_rejected_by_step() {
        let mut e = RewardEnsemble::new(4, &[8], 1e-3, [1, 2, 3], [4, 5, 6]).unwrap();
        let data = vec![
            PreferencePair::new(seg(1), seg(2), Some(Label::First), Label::First),
            PreferencePair::new(seg(3), seg(4), None, Label::First),
        ];
        assert!(matches!(tri_teach_step(&mut e, &data, 0.5), Err(Error::SkippedPair)));
    }

    #[test]
    fn session_skips_skipped_pairs_and_reports_ratios() {
        let mut e = RewardEnsemble::new(4, &[8], 1e-3, [1, 2, 3], [4, 5, 6]).unwrap();
        let data: Vec<PreferencePair> = (0..20)
            .map(|i| {
                let obs = if i % 5 == 0 { None } else { Some(Label::First) };
                PreferencePair::new(seg(100 + i), seg(200 + i), obs, Label::First)
            })
            .collect();
        for cadence in [SelectionCadence::PerMinibatch, SelectionCadence::PerSession] {
            let cfg = SessionConfig {
                gamma: 0.6,
                schedule: TeachSchedule::cyclic(),
                epochs: 2,
                batch_size: 6,
                cadence,
            };
            let rep = train_session(&mut e, &data, &cfg).unwrap();
            assert!(rep.trained_indices.iter().all(|&i| i % 5 != 0));
            assert_eq!(rep.selected_clean_ratio, [1.0; 3]);
            assert!(rep.steps > 0);
        }
    }
}
