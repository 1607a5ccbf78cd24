mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use trend_lab::annotate::{reference_pair_stream, scripted_label};
use trend_lab::envs::EnvKind;
use trend_lab::ndmath::{Activation, Mlp, MlpSpec, OutputActivation};
use trend_lab::reward::{mean_loss_and_grad, pair_loss, Label, PreferencePair};

use common::{fd_max_rel_error, rel_err, FD_STEP};

#[test]
fn mlp_gradients_match_central_differences() {
    let worst = (0..50).map(fd_max_rel_error).fold(0.0, f64::max);
    assert!(worst < 1e-4, "max relative error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn random_networks_have_exact_gradients(seed in 1000u64..1_000_000) {
        prop_assert!(fd_max_rel_error(seed) < 1e-4);
    }
}

#[test]
fn preference_loss_gradient_matches_central_differences() {
    let stream = reference_pair_stream(EnvKind::PointReach, 6, 5, 3).unwrap();
    let pairs: Vec<PreferencePair> = stream
        .into_iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let clean = scripted_label(&a, &b, 1e-9);
            // Mix in a tie so the soft target is exercised too.
            let observed = if i == 2 { Label::Indifferent } else { clean };
            PreferencePair::new(a, b, Some(observed), clean)
        })
        .collect();
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let spec = MlpSpec::with_hidden(4, &[5, 5], 1, Activation::Tanh, OutputActivation::Identity).unwrap();
    let net = Mlp::new(spec, &mut ChaCha8Rng::seed_from_u64(11));
    let (loss, grads) = mean_loss_and_grad(&net, &refs).unwrap();
    let mean = |m: &Mlp| pairs.iter().map(|p| pair_loss(m, p).unwrap()).sum::<f64>() / pairs.len() as f64;
    assert!((loss - mean(&net)).abs() < 1e-12);
    let analytic = grads.flatten();
    for (i, g) in analytic.iter().enumerate() {
        let (mut plus, mut minus) = (net.clone(), net.clone());
        *plus.params_mut().flat_mut(i) += FD_STEP;
        *minus.params_mut().flat_mut(i) -= FD_STEP;
        let fd = (mean(&plus) - mean(&minus)) / (2.0 * FD_STEP);
        assert!(rel_err(*g, fd) < 1e-4, "param {i}: {g} vs {fd}");
    }
}
