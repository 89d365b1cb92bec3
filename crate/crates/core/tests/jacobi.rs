mod common;

use mimo_unfold::baseline::{iterative_estimate, jacobi_spectral_radius, DiagonalGram};
use mimo_unfold::system_model::{Modulation, NoiseLevel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn iterate_error_is_non_increasing_when_contractive() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut contractive = 0;
    for _ in 0..100 {
        let (sys, _) =
            common::random_system(128, 8, Modulation::Qpsk, NoiseLevel::Noiseless, &mut rng);
        let g = DiagonalGram::precompute(&sys).unwrap();
        if jacobi_spectral_radius(&g) >= 1.0 {
            continue;
        }
        contractive += 1;
        let zf = g.gram.clone().cholesky().unwrap().solve(&g.matched);
        let errors: Vec<f64> = (0..=12)
            .map(|t| (iterative_estimate(&g, t) - &zf).norm())
            .collect();
        for w in errors.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{errors:?}");
        }
    }
    assert!(contractive >= 95);
}

#[test]
fn one_step_is_the_jacobi_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (sys, _) =
        common::random_system(32, 4, Modulation::Qam16, NoiseLevel::snr_db(8.0), &mut rng);
    let g = DiagonalGram::precompute(&sys).unwrap();
    let r = common::Reference::new(&sys.h, &sys.y);
    let x0: Vec<f64> = r.matched.iter().zip(&r.d).map(|(m, d)| m / d).collect();
    let x1 = iterative_estimate(&g, 1);
    for i in 0..x0.len() {
        let gx: f64 = (0..x0.len()).map(|j| r.gram[i][j] * x0[j]).sum();
        let expected = x0[i] + (r.matched[i] - gx) / r.d[i];
        assert!((x1[i] - expected).abs() < 1e-12);
    }
}
