//! Reference implementations written from the layer equations with plain
//! loops, sharing no arithmetic with the library.

#![allow(dead_code)]

use mimo_unfold::system_model::{
    awgn_receive, ComplexChannel, Constellation, Modulation, NoiseLevel, RealSystem,
};
use mimo_unfold::unfolded::{forward_soft, param_gradients, LinearTransform, NetworkParams};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

pub struct Reference {
    pub gram: Vec<Vec<f64>>,
    pub matched: Vec<f64>,
    pub d: Vec<f64>,
}

impl Reference {
    pub fn new(h: &DMatrix<f64>, y: &DVector<f64>) -> Self {
        let (rows, cols) = h.shape();
        let mut gram = vec![vec![0.0; cols]; cols];
        let mut matched = vec![0.0; cols];
        for i in 0..cols {
            for j in 0..cols {
                gram[i][j] = (0..rows).map(|r| h[(r, i)] * h[(r, j)]).sum();
            }
            matched[i] = (0..rows).map(|r| h[(r, i)] * y[r]).sum();
        }
        let d = (0..cols).map(|i| gram[i][i]).collect();
        Self { gram, matched, d }
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let gx: f64 = (0..x.len()).map(|j| self.gram[i][j] * x[j]).sum();
                (self.matched[i] - gx) / self.d[i]
            })
            .collect()
    }
}

pub fn reference_levels(m: Modulation) -> Vec<f64> {
    match m {
        Modulation::Qpsk => vec![-(0.5f64).sqrt(), (0.5f64).sqrt()],
        Modulation::Qam16 => [-3.0, -1.0, 1.0, 3.0]
            .iter()
            .map(|v| v / 10f64.sqrt())
            .collect(),
    }
}

/// Nearest level, ties to the smaller one.
pub fn reference_quantize(levels: &[f64], v: f64) -> f64 {
    let mut best = levels[0];
    for &l in &levels[1..] {
        if (v - l).abs() < (v - best).abs() {
            best = l;
        }
    }
    best
}

fn matvec(m: &DMatrix<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)] * v[j]).sum())
        .collect()
}

/// Forward pass in which every quantizer adds a fixed offset instead of
/// snapping. With `offsets = None` the offsets are computed from a real
/// quantization and returned, so the same call with those offsets reproduces
/// the hard forward pass exactly at the nominal point while staying smooth
/// around it.
pub fn reference_forward(
    r: &Reference,
    params: &NetworkParams,
    offsets: Option<&[Vec<f64>]>,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let levels = reference_levels(params.modulation);
    let mut x_q: Vec<f64> = r.matched.iter().zip(&r.d).map(|(m, d)| m / d).collect();
    let mut v = vec![0.0; x_q.len()];
    let mut combo = x_q.clone();
    let mut used = Vec::new();
    for (t, layer) in params.layers.iter().enumerate() {
        let v_tilde = match &layer.transform {
            Some(tr) => {
                let hidden: Vec<f64> = matvec(&tr.w1, &v)
                    .iter()
                    .zip(tr.b1.iter())
                    .map(|(a, b)| a + b)
                    .collect();
                matvec(&tr.w2, &hidden)
                    .iter()
                    .zip(tr.b2.iter())
                    .map(|(a, b)| a + b)
                    .collect()
            }
            None => v.clone(),
        };
        let v_next = r.residual(&x_q);
        combo = (0..x_q.len())
            .map(|i| {
                let x_next = x_q[i] + v_next[i] + layer.alpha1 * v_tilde[i];
                (1.0 - layer.alpha2) * x_next + layer.alpha2 * x_q[i]
            })
            .collect();
        let off: Vec<f64> = match offsets {
            Some(o) => o[t].clone(),
            None => combo
                .iter()
                .map(|&c| reference_quantize(&levels, c) - c)
                .collect(),
        };
        x_q = combo.iter().zip(&off).map(|(c, o)| c + o).collect();
        used.push(off);
        v = v_next;
    }
    (combo, used)
}

/// Adds `delta` to the `index`-th trainable scalar, walking layers `1..L` as
/// `alpha1, alpha2, w1 (row-major), b1, w2 (row-major), b2`.
pub fn perturb(params: &NetworkParams, index: usize, delta: f64) -> NetworkParams {
    let mut p = params.clone();
    let mut k = index;
    for layer in p.layers.iter_mut().skip(1) {
        if k == 0 {
            layer.alpha1 += delta;
            return p;
        }
        if k == 1 {
            layer.alpha2 += delta;
            return p;
        }
        k -= 2;
        if let Some(tr) = &mut layer.transform {
            let n = tr.b1.len();
            if k < n * n {
                tr.w1[(k / n, k % n)] += delta;
                return p;
            }
            k -= n * n;
            if k < n {
                tr.b1[k] += delta;
                return p;
            }
            k -= n;
            if k < n * n {
                tr.w2[(k / n, k % n)] += delta;
                return p;
            }
            k -= n * n;
            if k < n {
                tr.b2[k] += delta;
                return p;
            }
            k -= n;
        }
    }
    panic!("index {index} out of range");
}

pub fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

pub fn random_system<R: Rng>(
    n: usize,
    k: usize,
    m: Modulation,
    noise: NoiseLevel,
    rng: &mut R,
) -> (RealSystem, DVector<f64>) {
    let c = Constellation::new(m);
    let h = ComplexChannel::generate(n, k, rng).unwrap().to_real();
    let frame = c.modulate(&c.random_bits(k, rng)).unwrap();
    (awgn_receive(&h, &frame.x, noise, rng).unwrap(), frame.x)
}

/// Random parameters with the fixed first layer left in place.
pub fn random_params<R: Rng>(m: Modulation, k: usize, l: usize, rng: &mut R) -> NetworkParams {
    let mut p = NetworkParams::init(m, k, l).unwrap();
    let dim = 2 * k;
    for layer in p.layers.iter_mut().skip(1) {
        layer.alpha1 = rng.random_range(-0.5..0.5);
        layer.alpha2 = rng.random_range(-0.3..0.8);
        if layer.transform.is_some() {
            let mut tr = LinearTransform::identity(dim);
            tr.w1 += DMatrix::from_fn(dim, dim, |_, _| 0.1 * gaussian(rng));
            tr.w2 += DMatrix::from_fn(dim, dim, |_, _| 0.1 * gaussian(rng));
            tr.b1 = DVector::from_fn(dim, |_, _| 0.05 * gaussian(rng));
            tr.b2 = DVector::from_fn(dim, |_, _| 0.05 * gaussian(rng));
            layer.transform = Some(tr);
        }
    }
    p
}

pub struct GradientReport {
    pub checked: usize,
    pub worst_abs: f64,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-7;

/// Compares every analytic gradient of `w . x_soft_final` against central
/// differences of [`reference_forward`] for one instance.
pub fn check_instance<R: Rng>(
    m: Modulation,
    label: &str,
    rng: &mut R,
    report: &mut GradientReport,
) {
    let (n, k, l) = (16, 4, 4);
    let snr = rng.random_range(0.0..15.0);
    let (sys, _) = random_system(n, k, m, NoiseLevel::snr_db(snr), rng);
    let params = random_params(m, k, l, rng);
    let c = Constellation::new(m);
    let w = DVector::from_fn(2 * k, |_, _| gaussian(rng));

    let r = Reference::new(&sys.h, &sys.y);
    let (nominal, offsets) = reference_forward(&r, &params, None);
    let (out, tape) = forward_soft(&sys, &c, &params).unwrap();
    for (a, b) in nominal.iter().zip(out.iter()) {
        if (a - b).abs() > 1e-10 {
            report
                .failures
                .push(format!("{label}: forward mismatch {a} vs {b}"));
        }
    }

    let grads = param_gradients(&tape, &params, &w).unwrap();
    let first = &grads.layers[0];
    if first.alpha1 != 0.0 || first.alpha2 != 0.0 {
        report
            .failures
            .push(format!("{label}: first-layer gradient not zero"));
    }
    let analytic = grads.trainable_vector();
    if analytic.len() != params.trainable_len() {
        report
            .failures
            .push(format!("{label}: gradient length {}", analytic.len()));
        return;
    }
    let objective = |p: &NetworkParams| -> f64 {
        let (x, _) = reference_forward(&r, p, Some(&offsets));
        x.iter().zip(w.iter()).map(|(a, b)| a * b).sum()
    };
    for (i, &g) in analytic.iter().enumerate() {
        let fd = (objective(&perturb(&params, i, FD_STEP))
            - objective(&perturb(&params, i, -FD_STEP)))
            / (2.0 * FD_STEP);
        let abs = (g - fd).abs();
        let rel = abs / fd.abs().max(g.abs()).max(f64::MIN_POSITIVE);
        report.checked += 1;
        if abs > ABS_TOL {
            report.worst_rel = report.worst_rel.max(rel);
        }
        report.worst_abs = report.worst_abs.max(abs);
        if abs > ABS_TOL && rel > REL_TOL {
            report
                .failures
                .push(format!("{label}: param {i} analytic {g:e} fd {fd:e}"));
        }
    }
}

/// 20 instances, half QPSK and half 16QAM.
pub fn gradient_suite<R: Rng>(rng: &mut R) -> GradientReport {
    let mut report = GradientReport {
        checked: 0,
        worst_abs: 0.0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    for i in 0..10 {
        check_instance(Modulation::Qpsk, &format!("qpsk#{i}"), rng, &mut report);
        check_instance(Modulation::Qam16, &format!("qam16#{i}"), rng, &mut report);
    }
    report
}
