//! Preference queries: annotators, label noise, the replayable mock-VLM
//! fixture, disagreement-based query selection and query sessions.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{rollout, Episode, EnvKind, Segment, EPISODE_LEN};
use crate::error::{Error, Result};
use crate::reward::{batch_margins, sigmoid, Label, PreferencePair, RewardEnsemble, ENSEMBLE_SIZE};

pub const FIXTURE_HEADER: &str = "mockvlm-v1";

/// What an annotator says about a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Annotation {
    Label(Label),
    Skip,
}

/// Labels segment pairs. Queried synchronously, one pair at a time.
pub trait Annotator {
    fn annotate(&mut self, seg0: &Segment, seg1: &Segment) -> Result<Annotation>;
}

/// Oracle label from true segment returns: the larger return wins, returns
/// within `tie_tolerance` of each other are a tie.
pub fn scripted_label(seg0: &Segment, seg1: &Segment, tie_tolerance: f64) -> Label {
    let diff = seg0.oracle_return - seg1.oracle_return;
    if diff > tie_tolerance {
        Label::First
    } else if diff < -tie_tolerance {
        Label::Second
    } else {
        Label::Indifferent
    }
}

/// Flips a strict label with probability `eps`; ties pass through. A random
/// number is drawn for every strict label.
pub fn corrupt<R: Rng + ?Sized>(label: Label, eps: f64, rng: &mut R) -> Label {
    if label.is_strict() && rng.random::<f64>() < eps {
        label.flipped()
    } else {
        label
    }
}

/// Scripted teacher with symmetric label-flip noise.
#[derive(Clone, Debug)]
pub struct NoisyScriptedAnnotator {
    eps: f64,
    tie_tolerance: f64,
    rng: ChaCha8Rng,
}

impl NoisyScriptedAnnotator {
    pub fn new(eps: f64, tie_tolerance: f64, rng: ChaCha8Rng) -> Result<Self> {
        if !(0.0..=1.0).contains(&eps) {
            return Err(Error::Config(format!("noise rate must lie in [0, 1], got {eps}")));
        }
        if !(tie_tolerance >= 0.0) {
            return Err(Error::Config(format!("tie tolerance must be >= 0, got {tie_tolerance}")));
        }
        Ok(Self {
            eps,
            tie_tolerance,
            rng,
        })
    }
}

impl Annotator for NoisyScriptedAnnotator {
    fn annotate(&mut self, seg0: &Segment, seg1: &Segment) -> Result<Annotation> {
        let clean = scripted_label(seg0, seg1, self.tie_tolerance);
        Ok(Annotation::Label(corrupt(clean, self.eps, &mut self.rng)))
    }
}

/// One line of a mock-VLM fixture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VlmResponse {
    Prefer0,
    Prefer1,
    NoPreference,
}

impl VlmResponse {
    pub fn token(self) -> &'static str {
        match self {
            VlmResponse::Prefer0 => "prefer0",
            VlmResponse::Prefer1 => "prefer1",
            VlmResponse::NoPreference => "no_preference",
        }
    }

    pub fn annotation(self) -> Annotation {
        match self {
            VlmResponse::Prefer0 => Annotation::Label(Label::First),
            VlmResponse::Prefer1 => Annotation::Label(Label::Second),
            VlmResponse::NoPreference => Annotation::Skip,
        }
    }
}

/// Parses fixture text: the `mockvlm-v1` header line, then one token per
/// line. Blank lines are ignored.
pub fn parse_fixture(text: &str, source_name: &str) -> Result<Vec<VlmResponse>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == FIXTURE_HEADER => {}
        _ => {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line: 1,
                message: format!("expected header `{FIXTURE_HEADER}`"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let token = line.trim();
        out.push(match token {
            "" => continue,
            "prefer0" => VlmResponse::Prefer0,
            "prefer1" => VlmResponse::Prefer1,
            "no_preference" => VlmResponse::NoPreference,
            other => {
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: i + 1,
                    message: format!("unknown response `{other}`"),
                })
            }
        });
    }
    Ok(out)
}

pub fn render_fixture(records: &[VlmResponse]) -> String {
    let mut s = String::with_capacity(records.len() * 10 + 16);
    s.push_str(FIXTURE_HEADER);
    s.push('\n');
    for r in records {
        let _ = writeln!(s, "{}", r.token());
    }
    s
}

/// Replays recorded VLM answers in order.
#[derive(Clone, Debug)]
pub struct MockVlmAnnotator {
    source: String,
    records: Vec<VlmResponse>,
    cursor: usize,
}

impl MockVlmAnnotator {
    pub fn from_records(source: impl Into<String>, records: Vec<VlmResponse>) -> Self {
        Self {
            source: source.into(),
            records,
            cursor: 0,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let name = path.display().to_string();
        Ok(Self::from_records(name.clone(), parse_fixture(&text, &name)?))
    }

    pub fn consumed(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.records.len() - self.cursor
    }
}

impl Annotator for MockVlmAnnotator {
    fn annotate(&mut self, _seg0: &Segment, _seg1: &Segment) -> Result<Annotation> {
        let r = self.records.get(self.cursor).ok_or_else(|| Error::FixtureExhausted {
            path: self.source.clone(),
            consumed: self.cursor,
        })?;
        self.cursor += 1;
        Ok(r.annotation())
    }
}

/// A deterministic stream of segment pairs from random-action rollouts.
/// Fixtures are generated against this stream so that replaying them on the
/// same stream reproduces a known disagreement rate.
pub fn reference_pair_stream(kind: EnvKind, n: usize, segment_len: usize, seed: u64) -> Result<Vec<(Segment, Segment)>> {
    if segment_len == 0 || segment_len > EPISODE_LEN {
        return Err(Error::Config(format!(
            "segment length must lie in 1..={EPISODE_LEN}, got {segment_len}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let window = |rng: &mut ChaCha8Rng| -> Result<Segment> {
        let ep_seed = rng.random();
        let mut act_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let ep = rollout(kind, ep_seed, false, |_| {
            [act_rng.random_range(-1.0..1.0), act_rng.random_range(-1.0..1.0)]
        })?;
        let start = rng.random_range(0..=ep.len() - segment_len);
        ep.window(start, segment_len)
    };
    (0..n)
        .map(|_| Ok((window(&mut rng)?, window(&mut rng)?)))
        .collect()
}

/// Fixture for `pairs` that disagrees with the scripted oracle on exactly
/// `round(noise_rate * strict)` of the strict, non-skipped pairs;
/// `skip_rate` of all pairs answer `no_preference`. Oracle ties become
/// `no_preference`.
pub fn generate_vlm_fixture(
    pairs: &[(Segment, Segment)],
    noise_rate: f64,
    skip_rate: f64,
    tie_tolerance: f64,
    seed: u64,
) -> Result<Vec<VlmResponse>> {
    if !(0.0..=1.0).contains(&noise_rate) || !(0.0..=1.0).contains(&skip_rate) {
        return Err(Error::Config(format!(
            "fixture rates must lie in [0, 1], got noise {noise_rate}, skip {skip_rate}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = pairs.len();
    let n_skip = (skip_rate * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut skip = vec![false; n];
    for &i in &order[..n_skip] {
        skip[i] = true;
    }
    let labels: Vec<Label> = pairs
        .iter()
        .map(|(a, b)| scripted_label(a, b, tie_tolerance))
        .collect();
    let strict: Vec<usize> = (0..n).filter(|&i| !skip[i] && labels[i].is_strict()).collect();
    let n_flip = (noise_rate * strict.len() as f64).round() as usize;
    let mut flip_order = strict.clone();
    flip_order.shuffle(&mut rng);
    let mut flip = vec![false; n];
    for &i in &flip_order[..n_flip] {
        flip[i] = true;
    }
    Ok((0..n)
        .map(|i| {
            if skip[i] || !labels[i].is_strict() {
                return VlmResponse::NoPreference;
            }
            let l = if flip[i] { labels[i].flipped() } else { labels[i] };
            match l {
                Label::First => VlmResponse::Prefer0,
                _ => VlmResponse::Prefer1,
            }
        })
        .collect())
}

/// Population variance of the three members' preference probabilities.
pub fn disagreement(probs: &[f64; ENSEMBLE_SIZE]) -> f64 {
    // Centered on the first member so identical probabilities give exactly 0.
    let mean = probs[0] + probs.iter().map(|p| p - probs[0]).sum::<f64>() / ENSEMBLE_SIZE as f64;
    probs.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / ENSEMBLE_SIZE as f64
}

/// Orders candidates by decreasing disagreement (ties to the lower index)
/// and keeps the first `m`.
pub fn rank_by_disagreement(scores: &[f64], m: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(m);
    order
}

/// Indices of the `m` candidate pairs with the largest ensemble variance of
/// `P[seg0 > seg1]`.
pub fn disagreement_select(candidates: &[(Segment, Segment)], ensemble: &RewardEnsemble, m: usize) -> Result<Vec<usize>> {
    if m == 0 || m > candidates.len() {
        return Err(Error::Config(format!(
            "need 1 <= queries ({m}) <= candidates ({})",
            candidates.len()
        )));
    }
    let scratch: Vec<PreferencePair> = candidates
        .iter()
        .map(|(a, b)| PreferencePair::new(a.clone(), b.clone(), None, Label::Indifferent))
        .collect();
    let refs: Vec<&PreferencePair> = scratch.iter().collect();
    let mut probs = vec![[0.0; ENSEMBLE_SIZE]; candidates.len()];
    for k in 0..ENSEMBLE_SIZE {
        for (i, margin) in batch_margins(ensemble.member(k), &refs)?.into_iter().enumerate() {
            probs[i][k] = sigmoid(margin);
        }
    }
    let scores: Vec<f64> = probs.iter().map(disagreement).collect();
    Ok(rank_by_disagreement(&scores, m))
}

/// Feedback accounting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QueryBudget {
    /// Total queries over the run.
    pub total: usize,
    /// Queries per session (M).
    pub per_session: usize,
    /// Candidate pairs scored per session (C).
    pub pool_size: usize,
    /// Environment steps between sessions.
    pub interval: usize,
    #[serde(skip)]
    pub used: usize,
}

impl Default for QueryBudget {
    fn default() -> Self {
        Self {
            total: 1400,
            per_session: 20,
            pool_size: 200,
            interval: 2000,
            used: 0,
        }
    }
}

impl QueryBudget {
    pub fn remaining(&self) -> usize {
        self.total.saturating_sub(self.used)
    }

    pub fn validate(&self) -> Result<()> {
        if self.per_session == 0 || self.per_session > self.pool_size {
            return Err(Error::Config(format!(
                "query.per_session ({}) must lie in 1..=query.pool_size ({})",
                self.per_session, self.pool_size
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("query.interval must be positive".into()));
        }
        Ok(())
    }
}

/// Settings of a query session beyond the budget.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryOptions {
    pub segment_len: usize,
    pub tie_tolerance: f64,
    /// Drop pairs whose observed label is a tie instead of storing them.
    pub exclude_ties: bool,
    /// Whether abstentions consume budget.
    pub skips_count: bool,
}

/// Samples `pool_size` random segment pairs from `episodes`, queries the
/// annotator on the most disputed `per_session` of them and returns the new
/// pairs (skips included). Returns nothing once the budget is spent.
pub fn query_session<R: Rng + ?Sized>(
    episodes: &[Episode],
    annotator: &mut dyn Annotator,
    budget: &mut QueryBudget,
    ensemble: &RewardEnsemble,
    opts: &QueryOptions,
    rng: &mut R,
) -> Result<Vec<PreferencePair>> {
    let want = budget.per_session.min(budget.remaining());
    if want == 0 {
        tracing::info!("feedback budget exhausted; skipping query session");
        return Ok(Vec::new());
    }
    let eligible: Vec<&Episode> = episodes.iter().filter(|e| e.len() >= opts.segment_len).collect();
    if eligible.len() < 2 {
        return Err(Error::Config(format!(
            "query session needs two episodes of at least {} steps, have {}",
            opts.segment_len,
            eligible.len()
        )));
    }
    let draw = |rng: &mut R| -> Result<(usize, usize)> {
        let e = rng.random_range(0..eligible.len());
        let start = rng.random_range(0..=eligible[e].len() - opts.segment_len);
        Ok((e, start))
    };
    let mut candidates = Vec::with_capacity(budget.pool_size);
    while candidates.len() < budget.pool_size {
        let a = draw(rng)?;
        let b = draw(rng)?;
        if a == b {
            continue;
        }
        candidates.push((
            eligible[a.0].window(a.1, opts.segment_len)?,
            eligible[b.0].window(b.1, opts.segment_len)?,
        ));
    }
    let chosen = if want == candidates.len() {
        (0..want).collect()
    } else {
        disagreement_select(&candidates, ensemble, want)?
    };
    let mut out = Vec::with_capacity(want);
    for i in chosen {
        let (seg0, seg1) = candidates[i].clone();
        let clean = scripted_label(&seg0, &seg1, opts.tie_tolerance);
        let annotation = annotator.annotate(&seg0, &seg1)?;
        match annotation {
            Annotation::Skip => {
                if opts.skips_count {
                    budget.used += 1;
                }
                out.push(PreferencePair::new(seg0, seg1, None, clean));
            }
            Annotation::Label(l) => {
                budget.used += 1;
                if opts.exclude_ties && !l.is_strict() {
                    continue;
                }
                out.push(PreferencePair::new(seg0, seg1, Some(l), clean));
            }
        }
    }
    Ok(out)
}

/// Fixture file writer used by the command line.
pub fn write_fixture(path: &Path, records: &[VlmResponse]) -> Result<()> {
    std::fs::write(path, render_fixture(records)).map_err(|e| Error::io(PathBuf::from(path), e))
}
