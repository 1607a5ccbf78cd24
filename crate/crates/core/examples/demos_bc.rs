//! Scripted demonstrations, behavior cloning and the decaying demo share of
//! each policy batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use trend_lab::demos::{bc_pretrain, demo_count, generate_demos, AlphaSchedule, BcConfig};
use trend_lab::envs::EnvKind;
use trend_lab::runner::evaluate;
use trend_lab::sac::GaussianPolicy;

fn main() -> trend_lab::Result<()> {
    for kind in [EnvKind::PointReach, EnvKind::TwoPhasePull] {
        for n in [1, 3] {
            let demos = generate_demos(kind, n, 11)?;
            let mut policy = GaussianPolicy::new(kind.obs_dim(), 2, &[64, 64], &mut ChaCha8Rng::seed_from_u64(0))?;
            let report = bc_pretrain(&mut policy, &demos, &BcConfig::default())?;
            let (success, _) = evaluate(&policy, kind, 5, 20)?;
            println!(
                "{} with {n} demo(s), {} steps: bc loss {:.3} -> {:.4} in {} epochs, success {success:.2}",
                kind.name(),
                demos.num_steps(),
                report.initial_loss,
                report.final_loss,
                report.epochs
            );
        }
    }

    // A 100k-step run decays the share from 0.5 to 0.25 over its first half.
    let alpha = AlphaSchedule { start: 0.5, end: 0.25, horizon: 50_000 };
    for t in [0, 25_000, 50_000, 75_000] {
        let a = alpha.value(t);
        println!("step {t:6}: alpha {a:.3}, {} of 256 batch rows from demos", demo_count(a, 256));
    }
    Ok(())
}
