//! Noisy labels at 40% flip rate, trained three ways: every pair, each
//! member filtering for itself, and members filtering for each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trend_lab::annotate::{reference_pair_stream, scripted_label, Annotation, Annotator, NoisyScriptedAnnotator};
use trend_lab::envs::EnvKind;
use trend_lab::reward::{pref_prob, PreferencePair, RewardEnsemble};
use trend_lab::triteach::{train_session, SelectionCadence, SessionConfig, TeachSchedule};

fn main() -> trend_lab::Result<()> {
    let kind = EnvKind::PointReach;
    let mut teacher = NoisyScriptedAnnotator::new(0.4, 1e-9, ChaCha8Rng::seed_from_u64(7))?;
    let mut data = Vec::new();
    for (a, b) in reference_pair_stream(kind, 400, 50, 1)? {
        let clean = scripted_label(&a, &b, 1e-9);
        if let Annotation::Label(l) = teacher.annotate(&a, &b)? {
            data.push(PreferencePair::new(a, b, Some(l), clean));
        }
    }
    let noisy = data.iter().filter(|p| !p.is_clean()).count();
    println!("{} labels, {noisy} of them wrong", data.len());

    let test: Vec<_> = reference_pair_stream(kind, 400, 50, 2)?
        .into_iter()
        .map(|(a, b)| {
            let l = scripted_label(&a, &b, 1e-9);
            PreferencePair::new(a, b, Some(l), l)
        })
        .filter(|p| p.clean_label().is_strict())
        .collect();

    for (name, gamma, schedule) in [
        ("no filtering", 1.0, TeachSchedule::self_teach()),
        ("self-teaching", 0.6, TeachSchedule::self_teach()),
        ("tri-teaching", 0.6, TeachSchedule::cyclic()),
    ] {
        let mut ens = RewardEnsemble::new(kind.feature_dim(), &[32, 32], 1e-3, [1, 2, 3], [4, 5, 6])?;
        let cfg = SessionConfig {
            gamma,
            schedule,
            epochs: 10,
            batch_size: 32,
            cadence: SelectionCadence::PerMinibatch,
        };
        let report = train_session(&mut ens, &data, &cfg)?;
        let mut acc = 0.0;
        for m in ens.members() {
            let mut right = 0;
            for p in &test {
                right += ((pref_prob(m, p)? > 0.5) == (p.clean_label().target().0 > 0.5)) as usize;
            }
            acc += right as f64 / test.len() as f64 / 3.0;
        }
        let clean: f64 = report.selected_clean_ratio.iter().sum::<f64>() / 3.0;
        println!("{name:14}: selected clean ratio {clean:.3}, held-out accuracy {acc:.3}");
    }
    Ok(())
}
