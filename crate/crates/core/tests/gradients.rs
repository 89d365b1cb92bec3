mod common;

use common::{gradient_suite, reference_forward, Reference};
use mimo_unfold::system_model::{Constellation, Modulation, NoiseLevel};
use mimo_unfold::unfolded::{detect, forward_soft, param_gradients, NetworkParams};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn analytic_gradients_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let report = gradient_suite(&mut rng);
    assert!(report.checked > 0);
    assert!(report.failures.is_empty(), "{:#?}", report.failures);
}

#[test]
fn reference_forward_agrees_with_detect() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for m in [Modulation::Qpsk, Modulation::Qam16] {
        let c = Constellation::new(m);
        for _ in 0..10 {
            let (sys, _) = common::random_system(16, 4, m, NoiseLevel::snr_db(3.0), &mut rng);
            let params = common::random_params(m, 4, 5, &mut rng);
            let r = Reference::new(&sys.h, &sys.y);
            let (soft, _) = reference_forward(&r, &params, None);
            let levels = common::reference_levels(m);
            let hard: Vec<f64> = soft
                .iter()
                .map(|&v| common::reference_quantize(&levels, v))
                .collect();
            let out = detect(&sys, &c, &params).unwrap();
            assert_eq!(out.as_slice(), hard.as_slice());
        }
    }
}

#[test]
fn zero_residual_gives_zero_alpha1_gradient() {
    // the residual entering layer 1 is layer 0's v; for a noiseless orthonormal
    // channel it is exactly zero, so alpha1 of layer 1 cannot matter
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = Constellation::qpsk();
    let params = common::random_params(Modulation::Qpsk, 1, 3, &mut rng);
    let h = nalgebra::DMatrix::<f64>::identity(2, 2);
    let x = DVector::from_vec(vec![0.5f64.sqrt(), -(0.5f64).sqrt()]);
    let sys = mimo_unfold::system_model::RealSystem::new(h.clone(), &h * &x, 0.0).unwrap();
    let (_, tape) = forward_soft(&sys, &c, &params).unwrap();
    let g = param_gradients(&tape, &params, &DVector::from_element(2, 1.0)).unwrap();
    assert_eq!(g.layers[1].alpha1, 0.0);
    assert_eq!(g.layers[0].alpha1, 0.0);
    assert_eq!(g.layers[0].alpha2, 0.0);
}

#[test]
fn stale_tape_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let c = Constellation::qpsk();
    let (sys, _) =
        common::random_system(16, 4, Modulation::Qpsk, NoiseLevel::snr_db(5.0), &mut rng);
    let params = NetworkParams::init(Modulation::Qpsk, 4, 3).unwrap();
    let (_, tape) = forward_soft(&sys, &c, &params).unwrap();
    let mut moved = params.clone();
    moved.layers[2].alpha1 = 0.25;
    assert!(param_gradients(&tape, &moved, &DVector::zeros(8)).is_err());
    assert!(param_gradients(&tape, &params, &DVector::zeros(7)).is_err());
}
