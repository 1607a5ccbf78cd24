//! Fit a Bradley-Terry reward ensemble on clean scripted preferences and
//! check how often each member ranks held-out pairs like the true reward.

use trend_lab::annotate::{reference_pair_stream, scripted_label};
use trend_lab::envs::EnvKind;
use trend_lab::reward::{pref_prob, PreferencePair, RewardEnsemble};
use trend_lab::triteach::{train_session, SelectionCadence, SessionConfig, TeachSchedule};

fn main() -> trend_lab::Result<()> {
    let kind = EnvKind::PointReach;
    let label = |(a, b): (_, _)| {
        let l = scripted_label(&a, &b, 1e-9);
        PreferencePair::new(a, b, Some(l), l)
    };
    let train: Vec<_> = reference_pair_stream(kind, 300, 50, 1)?.into_iter().map(label).collect();
    let test: Vec<_> = reference_pair_stream(kind, 300, 50, 2)?.into_iter().map(label).collect();

    let mut ens = RewardEnsemble::new(kind.feature_dim(), &[32, 32], 1e-3, [1, 2, 3], [4, 5, 6])?;
    // gamma = 1 with each member teaching itself is plain ensemble training.
    let cfg = SessionConfig {
        gamma: 1.0,
        schedule: TeachSchedule::self_teach(),
        epochs: 20,
        batch_size: 32,
        cadence: SelectionCadence::PerMinibatch,
    };
    let report = train_session(&mut ens, &train, &cfg)?;
    println!("{} gradient steps, final member losses {:?}", report.steps, report.member_losses);

    for (k, member) in ens.members().iter().enumerate() {
        let mut right = 0;
        let mut strict = 0;
        for p in test.iter().filter(|p| p.clean_label().is_strict()) {
            strict += 1;
            let prefers_first = pref_prob(member, p)? > 0.5;
            right += (prefers_first == (p.clean_label().target().0 > 0.5)) as usize;
        }
        println!("member {k}: held-out accuracy {:.3}", right as f64 / strict as f64);
    }
    Ok(())
}
