//! Both toy tasks, driven by the scripted expert and by random actions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trend_lab::envs::{expert_action, rollout, EnvKind};

fn main() -> trend_lab::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [EnvKind::PointReach, EnvKind::TwoPhasePull] {
        println!("{}: obs dim {}, reward feature dim {}", kind.name(), kind.obs_dim(), kind.feature_dim());
        for seed in 0..3 {
            let expert = rollout(kind, seed, true, expert_action)?;
            let random = rollout(kind, seed, false, |_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])?;
            let ret = |e: &trend_lab::envs::Episode| e.rewards.iter().sum::<f64>();
            println!(
                "  seed {seed}: expert solves in {:3} steps (return {:7.2}), random return {:7.2}",
                expert.len(),
                ret(&expert),
                ret(&random)
            );
        }
    }
    Ok(())
}
