//! Plain SAC on point_reach with the environment's own reward. This is the
//! sanity baseline every preference-learning run is compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use trend_lab::envs::{reset, step, EnvKind, EPISODE_LEN};
use trend_lab::runner::evaluate;
use trend_lab::sac::{ActionMode, ReplayBuffer, SacAgent, SacConfig, Transition};

fn main() -> trend_lab::Result<()> {
    let kind = EnvKind::PointReach;
    let steps = 6000;
    let warmup = 1000;
    let cfg = SacConfig { batch_size: 128, ..SacConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut prng, mut crng) = (ChaCha8Rng::seed_from_u64(2), ChaCha8Rng::seed_from_u64(3));
    let mut agent = SacAgent::new(kind.obs_dim(), 2, cfg.clone(), &mut prng, &mut crng)?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity);

    let mut episode = 0;
    let mut state = reset(kind, episode);
    for t in 1..=steps {
        let obs = state.obs();
        let action = if t <= warmup {
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]
        } else {
            let (a, _) = agent.policy().act(&obs, ActionMode::Stochastic, &mut rng)?;
            [a[0], a[1]]
        };
        let result = step(&state, action)?;
        buffer.push(Transition {
            obs,
            action: action.to_vec(),
            reward: result.true_reward,
            next_obs: result.next_state.obs(),
            done: result.success,
        });
        state = result.next_state;
        if result.done || state.t() >= EPISODE_LEN {
            episode += 1;
            state = reset(kind, episode);
        }
        if t > warmup {
            let idx = buffer.sample_indices(cfg.batch_size, &mut rng);
            agent.update(&buffer.batch(&idx)?, &mut rng)?;
        }
        if t % 2000 == 0 {
            let (success, ret) = evaluate(agent.policy(), kind, 99, 20)?;
            println!("step {t:5}: success {success:.2}, mean return {ret:7.2}");
        }
    }
    Ok(())
}
