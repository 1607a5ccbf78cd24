//! The eleven acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 5 to 8 train agents and dominate the runtime (tens of minutes
//! on one core). Their outcome depends on the training budget, so a FAIL
//! there is reported but does not fail the test. Every other criterion is a
//! contract and must pass. Run alone with
//! `cargo test --release --test acceptance -- --nocapture`.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trend_lab::annotate::{
    generate_vlm_fixture, reference_pair_stream, scripted_label, write_fixture, Annotation, Annotator,
    MockVlmAnnotator, NoisyScriptedAnnotator,
};
use trend_lab::envs::EnvKind;
use trend_lab::ndmath::{Activation, Mlp, MlpSpec, OutputActivation, Tensor2};
use trend_lab::reward::{pref_prob, sigmoid, Label, PreferencePair, RewardEnsemble};
use trend_lab::runner::{run_experiment, sweep, Mode, RunConfig};
use trend_lab::triteach::{select_small_loss, train_session, SelectionCadence, SessionConfig, TeachSchedule};

use common::{brute_force_selection, fd_max_rel_error, logistic};

const QUICK: &str = include_str!("../examples/configs/quick.toml");
const TRUE_REWARD: &str = include_str!("../examples/configs/true_reward.toml");
const REACH_NOISY: &str = include_str!("../examples/configs/point_reach_noisy.toml");
const PULL_NOISY: &str = include_str!("../examples/configs/two_phase_pull_noisy.toml");
const MOCK_VLM: &str = include_str!("../examples/configs/mock_vlm.toml");

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn fmt(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let worst = (0..50).map(fd_max_rel_error).fold(0.0, f64::max);
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst < 1e-4 && secs < 60.0, format!("max rel error {worst:.2e} in {secs:.1}s"))
}

fn bradley_terry() -> Outcome {
    let spec = MlpSpec::with_hidden(4, &[8, 8], 1, Activation::Tanh, OutputActivation::Identity).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let stream = reference_pair_stream(EnvKind::PointReach, 10_000, 3, 21).unwrap();
    let mut worst_sum: f64 = 0.0;
    let mut worst_oracle: f64 = 0.0;
    let mut net = Mlp::new(spec.clone(), &mut rng);
    for (i, (a, b)) in stream.into_iter().enumerate() {
        if i % 500 == 0 {
            net = Mlp::new(spec.clone(), &mut rng);
        }
        let pair = PreferencePair::new(a, b, None, Label::Indifferent);
        let p01 = pref_prob(&net, &pair).unwrap();
        let p10 = pref_prob(&net, &pair.swapped()).unwrap();
        worst_sum = worst_sum.max((p01 + p10 - 1.0).abs());
        // Oracle: per-row forward passes summed by hand.
        let ret = |f: &Tensor2| (0..f.rows()).map(|r| net.forward(f.row(r)).unwrap()[0]).sum::<f64>();
        let expect = logistic(ret(pair.seg0.features()) - ret(pair.seg1.features()));
        worst_oracle = worst_oracle.max((p01 - expect).abs());
    }
    let s1 = sigmoid(1.0);
    let s0 = sigmoid(0.0);
    let pass = worst_sum <= 1e-12 && worst_oracle <= 1e-12 && (s1 - 0.731059).abs() <= 1e-6 && s0 == 0.5;
    outcome(
        pass,
        format!("max |p01+p10-1| {worst_sum:.1e}, max oracle gap {worst_oracle:.1e}, sigma(1) {s1:.6}, sigma(0) {s0}"),
    )
}

fn selection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checked = 0;
    let mut mismatches = 0;
    for n in 1..=12 {
        for _ in 0..200 {
            let hi = rng.random_range(2..20);
            let losses: Vec<i64> = (0..n).map(|_| rng.random_range(0..hi)).collect();
            let as_f64: Vec<f64> = losses.iter().map(|&l| l as f64).collect();
            for g in [0.3, 0.5, 0.6, 1.0] {
                checked += 1;
                if select_small_loss(&as_f64, g).unwrap() != brute_force_selection(&losses, g) {
                    mismatches += 1;
                }
            }
        }
    }
    outcome(mismatches == 0, format!("{mismatches} mismatches over {checked} batches"))
}

fn noise_statistics() -> Outcome {
    let (a, b) = reference_pair_stream(EnvKind::PointReach, 64, 50, 4)
        .unwrap()
        .into_iter()
        .find(|(a, b)| scripted_label(a, b, 1e-9).is_strict())
        .unwrap();
    let clean = scripted_label(&a, &b, 1e-9);
    let mut rates = Vec::new();
    for (i, eps) in [0.2, 0.3, 0.4].into_iter().enumerate() {
        let mut ann = NoisyScriptedAnnotator::new(eps, 1e-9, ChaCha8Rng::seed_from_u64(100 + i as u64)).unwrap();
        let n = 100_000;
        let flips = (0..n)
            .filter(|_| ann.annotate(&a, &b).unwrap() != Annotation::Label(clean))
            .count();
        rates.push((eps, flips as f64 / n as f64));
    }
    let pass = rates.iter().all(|(e, r)| (r - e).abs() <= 0.01);
    let detail = rates.iter().map(|(e, r)| format!("eps {e}: {r:.4}")).collect::<Vec<_>>().join(", ");
    outcome(pass, detail)
}

fn sac_sanity() -> Outcome {
    let base = RunConfig::from_toml(TRUE_REWARD).unwrap();
    let steps = base.run.total_steps;
    let runs = sweep(&base, &SEEDS, 1).unwrap();
    let finals: Vec<f64> = runs.iter().map(|r| r.last().unwrap().success_rate).collect();
    let pass = steps <= 30_000 && mean(&finals) >= 0.9 && finals.iter().all(|&s| s >= 0.8);
    outcome(pass, format!("{steps} steps, final success per seed [{}]", fmt(&finals)))
}

fn clean_label_recovery() -> Outcome {
    let cfg = RunConfig::from_toml(REACH_NOISY).unwrap();
    let (sessions, per_session) = (20, 30);
    let mut selected = Vec::new();
    let mut dataset = Vec::new();
    for seed in 0..3u64 {
        let stream = reference_pair_stream(EnvKind::PointReach, sessions * per_session, 50, 500 + seed).unwrap();
        let mut ann = NoisyScriptedAnnotator::new(0.4, 1e-9, ChaCha8Rng::seed_from_u64(600 + seed)).unwrap();
        let mut ens = RewardEnsemble::new(
            EnvKind::PointReach.feature_dim(),
            &cfg.reward.hidden,
            cfg.reward.lr,
            [1, 2, 3].map(|k| 10 * seed + k),
            [4, 5, 6].map(|k| 10 * seed + k),
        )
        .unwrap();
        let session = SessionConfig {
            gamma: 0.6,
            schedule: TeachSchedule::cyclic(),
            epochs: cfg.reward.epochs,
            batch_size: cfg.reward.batch_size,
            cadence: SelectionCadence::PerMinibatch,
        };
        let mut data = Vec::new();
        let mut tail = Vec::new();
        for s in 0..sessions {
            for (a, b) in &stream[s * per_session..(s + 1) * per_session] {
                let clean = scripted_label(a, b, 1e-9);
                let Annotation::Label(l) = ann.annotate(a, b).unwrap() else {
                    unreachable!("the scripted teacher never abstains")
                };
                data.push(PreferencePair::new(a.clone(), b.clone(), Some(l), clean));
            }
            let rep = train_session(&mut ens, &data, &session).unwrap();
            if s >= sessions - 10 {
                tail.push(mean(&rep.selected_clean_ratio));
            }
        }
        selected.push(mean(&tail));
        dataset.push(data.iter().filter(|p| p.is_clean()).count() as f64 / data.len() as f64);
    }
    let (sel, base) = (mean(&selected), mean(&dataset));
    let pass = sel >= 0.70 && sel >= base + 0.05;
    outcome(
        pass,
        format!("selected clean ratio {sel:.3} [{}] vs dataset rate {base:.3}", fmt(&selected)),
    )
}

fn final_means(toml: &str, modes: &[Mode]) -> Vec<(Vec<f64>, f64)> {
    modes
        .iter()
        .map(|&m| {
            let mut cfg = RunConfig::from_toml(toml).unwrap();
            cfg.run.mode = m;
            let runs = sweep(&cfg, &SEEDS, 1).unwrap();
            let finals: Vec<f64> = runs.iter().map(|r| r.last().unwrap().success_rate).collect();
            let m = mean(&finals);
            (finals, m)
        })
        .collect()
}

fn ablation_ordering() -> Outcome {
    let modes = [Mode::Trend, Mode::TrendNoDemo, Mode::Pebble, Mode::PebbleDemo];
    let r = final_means(REACH_NOISY, &modes);
    let (trend, tri, pebble, pebble_demo) = (r[0].1, r[1].1, r[2].1, r[3].1);
    let pass = trend > tri && tri > pebble && trend >= 0.6 && pebble <= 0.3 && pebble_demo < trend;
    let detail = modes
        .iter()
        .zip(&r)
        .map(|(m, (f, avg))| format!("{} {avg:.2} [{}]", m.name(), fmt(f)))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn self_vs_tri() -> Outcome {
    let modes = [Mode::Trend, Mode::SelfTeach, Mode::PebbleDemo];
    let r = final_means(PULL_NOISY, &modes);
    let (tri, selft, none) = (r[0].1, r[1].1, r[2].1);
    let pass = tri >= selft && tri >= none && selft >= none;
    let detail = modes
        .iter()
        .zip(&r)
        .map(|(m, (f, avg))| format!("{} {avg:.2} [{}]", m.name(), fmt(f)))
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn mock_vlm_contract(dir: &Path) -> Outcome {
    let stream = reference_pair_stream(EnvKind::PointReach, 5000, 50, 7).unwrap();
    let records = generate_vlm_fixture(&stream, 0.364, 0.0, 1e-9, 7).unwrap();
    let mut vlm = MockVlmAnnotator::from_records("rate", records);
    let (mut answered, mut wrong) = (0usize, 0usize);
    for (a, b) in &stream {
        let clean = scripted_label(a, b, 1e-9);
        if let Annotation::Label(l) = vlm.annotate(a, b).unwrap() {
            if clean.is_strict() {
                answered += 1;
                wrong += (l != clean) as usize;
            }
        }
    }
    let rate = wrong as f64 / answered as f64;

    // Audit a run whose fixture abstains on a fifth of the pairs.
    let path = dir.join("vlm.txt");
    let skip_stream = reference_pair_stream(EnvKind::PointReach, 400, 50, 8).unwrap();
    write_fixture(&path, &generate_vlm_fixture(&skip_stream, 0.364, 0.2, 1e-9, 8).unwrap()).unwrap();
    let mut cfg = RunConfig::from_toml(MOCK_VLM).unwrap();
    cfg.annotator.fixture = Some(path);
    let out = run_experiment(&cfg).unwrap();
    let mut skipped_total = 0;
    let mut leaks = 0;
    for s in &out.audit {
        skipped_total = skipped_total.max(s.skipped.len());
        leaks += s.trained.iter().filter(|i| s.skipped.binary_search(i).is_ok()).count();
        leaks += s.trained.iter().filter(|&&i| out.preferences[i].is_skipped()).count();
    }
    let pass = (rate - 0.364).abs() <= 0.01 && leaks == 0 && skipped_total > 0 && !out.audit.is_empty();
    outcome(
        pass,
        format!(
            "measured rate {rate:.4}; {} sessions audited, {skipped_total} skipped pairs, {leaks} trained skips",
            out.audit.len()
        ),
    )
}

fn trend_bin(args: &[&str]) {
    let o = Command::new(env!("CARGO_BIN_EXE_trend")).args(args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

fn run_csv(dir: &Path, name: &str, config: &str, seed: &str) -> Vec<u8> {
    let cfg = dir.join(format!("{name}.toml"));
    std::fs::write(&cfg, config).unwrap();
    let out = dir.join(name);
    trend_bin(&["run", "--config", cfg.to_str().unwrap(), "--seed", seed, "--out", out.to_str().unwrap()]);
    std::fs::read(out.join("metrics.csv")).unwrap()
}

fn determinism(dir: &Path) -> Outcome {
    let a = run_csv(dir, "det_a", QUICK, "11");
    let b = run_csv(dir, "det_b", QUICK, "11");
    outcome(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

fn reduction_identity(dir: &Path) -> Outcome {
    let reduced = format!(
        "{QUICK}\n[demos]\ncount = 0\n"
    )
    .replace("[reward]\n", "[reward]\nselection_rate = 1.0\nschedule = \"self\"\n");
    let pebble = QUICK.replace("mode = \"trend\"", "mode = \"pebble\"");
    let a = run_csv(dir, "reduced", &reduced, "3");
    let b = run_csv(dir, "pebble", &pebble, "3");
    outcome(a == b && !a.is_empty(), format!("{} bytes, identical: {}", a.len(), a == b))
}

#[test]
fn acceptance_criteria() {
    let dir = tempfile::tempdir().unwrap();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("Bradley-Terry exactness", Box::new(bradley_terry)),
        ("selection oracle", Box::new(selection_oracle)),
        ("noise injection", Box::new(noise_statistics)),
        ("SAC sanity", Box::new(sac_sanity)),
        ("clean-label recovery", Box::new(clean_label_recovery)),
        ("ablation ordering", Box::new(ablation_ordering)),
        ("self vs tri teaching", Box::new(self_vs_tri)),
        ("mock VLM contract", Box::new(|| mock_vlm_contract(dir.path()))),
        ("determinism", Box::new(|| determinism(dir.path()))),
        ("reduction identity", Box::new(|| reduction_identity(dir.path()))),
    ];
    let empirical = 5..=8;
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t0 = Instant::now();
        let o = check();
        let verdict = if o.pass { "PASS" } else { "FAIL" };
        println!("criterion {:2} {verdict} {name}: {} ({:.0}s)", i + 1, o.detail, t0.elapsed().as_secs_f64());
        if !o.pass && !empirical.contains(&(i + 1)) {
            failed.push(i + 1);
        }
    }
    assert!(failed.is_empty(), "failed contract criteria: {failed:?}");
}
