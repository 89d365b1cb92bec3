use mimo_unfold::baseline::{matched_filter_init, DiagonalGram};
use mimo_unfold::bench::{run_point, run_sweep, BerRecord, Detector, SweepConfig};
use mimo_unfold::system_model::{
    awgn_receive, ComplexChannel, Constellation, Modulation, NoiseLevel,
};
use mimo_unfold::training::{train, TrainConfig};
use mimo_unfold::unfolded::NetworkParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn qpsk_128x8() -> SweepConfig {
    SweepConfig::default()
}

fn ber(records: &[BerRecord], d: Detector) -> &BerRecord {
    records.iter().find(|r| r.detector == d).unwrap()
}

#[test]
fn zf_beats_matched_filter_at_11_db() {
    let r = run_point(
        &[Detector::Mf, Detector::Zf],
        &qpsk_128x8(),
        11.0,
        100_000,
        1,
        None,
        None,
    )
    .unwrap();
    assert!(
        ber(&r, Detector::Zf).ber < ber(&r, Detector::Mf).ber,
        "{r:?}"
    );
}

#[test]
fn iterative_within_factor_two_of_zf() {
    let r = run_point(
        &[Detector::Zf, Detector::Iterative],
        &qpsk_128x8(),
        11.0,
        62_500,
        2,
        None,
        None,
    )
    .unwrap();
    let (zf, it) = (ber(&r, Detector::Zf).ber, ber(&r, Detector::Iterative).ber);
    assert!(zf > 0.0 && it / zf < 2.0 && zf / it < 2.0, "{r:?}");
}

#[test]
fn lmmse_not_worse_than_zf_and_bers_fall_with_snr() {
    let snr: Vec<f64> = (0..=13).map(f64::from).collect();
    let records = run_sweep(
        &qpsk_128x8(),
        &[Detector::Zf, Detector::Lmmse],
        &snr,
        62_500,
        3,
        None,
    )
    .unwrap();
    for pair in records.chunks(2) {
        assert!(pair[1].ber <= pair[0].ber, "{pair:?}");
    }
    for d in [Detector::Zf, Detector::Lmmse] {
        let curve: Vec<&BerRecord> = records.iter().filter(|r| r.detector == d).collect();
        let mut inversions = 0;
        for w in curve.windows(2) {
            if w[1].ber > w[0].ber {
                inversions += 1;
                assert!(
                    w[1].ber - w[0].ber <= w[1].std_error().max(w[0].std_error()),
                    "{w:?}"
                );
            }
        }
        assert!(inversions <= 1);
    }
    let lmmse: Vec<&BerRecord> = records
        .iter()
        .filter(|r| r.detector == Detector::Lmmse)
        .collect();
    assert!(lmmse.last().unwrap().ber < lmmse[0].ber);
}

#[test]
fn matched_filter_symbol_errors_below_one_percent_noiseless() {
    let c = Constellation::qpsk();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut wrong, mut total) = (0usize, 0usize);
    for _ in 0..10_000 {
        let h = ComplexChannel::generate(128, 8, &mut rng)
            .unwrap()
            .to_real();
        let frame = c.modulate(&c.random_bits(8, &mut rng)).unwrap();
        let sys = awgn_receive(&h, &frame.x, NoiseLevel::Noiseless, &mut rng).unwrap();
        let q = c.quantize(&matched_filter_init(
            &DiagonalGram::precompute(&sys).unwrap(),
        ));
        for k in 0..8 {
            total += 1;
            if q[k] != frame.x[k] || q[k + 8] != frame.x[k + 8] {
                wrong += 1;
            }
        }
    }
    assert!((wrong as f64) / (total as f64) < 0.01, "{wrong}/{total}");
}

#[test]
fn one_epoch_reduces_training_loss_for_most_seeds() {
    let mut improved = 0;
    for seed in 0..20 {
        let cfg = TrainConfig {
            n_antennas: 16,
            n_users: 4,
            n_layers: 4,
            n_train: 400,
            batch_size: 20,
            n_epochs: 2,
            lr0: 1e-3,
            seed,
            ..TrainConfig::default()
        };
        let losses = train(&cfg).unwrap().losses();
        if losses[1] < losses[0] {
            improved += 1;
        }
    }
    assert!(improved >= 18, "{improved}/20");
}

#[test]
fn trained_network_is_exact_without_noise() {
    let cfg = TrainConfig {
        n_train: 2000,
        batch_size: 500,
        n_epochs: 3,
        seed: 6,
        ..TrainConfig::default()
    };
    let params = train(&cfg).unwrap().params;
    assert_ne!(params, NetworkParams::init(Modulation::Qpsk, 8, 8).unwrap());
    let sweep = SweepConfig {
        noiseless: true,
        ..qpsk_128x8()
    };
    let r = run_point(
        &[Detector::Proposed],
        &sweep,
        0.0,
        10_000,
        7,
        Some(&params),
        None,
    )
    .unwrap();
    assert_eq!(r[0].n_bit_errors, 0);
}
