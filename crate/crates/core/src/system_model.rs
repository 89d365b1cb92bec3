//! Uplink system model: Rayleigh channels, Gray-mapped QPSK/16QAM, the
//! complex-to-real embedding, calibrated AWGN and the hard quantizer.
//!
//! Real-domain vectors stack real parts over imaginary parts, so for `K`
//! users entry `j < K` is `Re(x_j)` and entry `K + j` is `Im(x_j)`. Bits are
//! laid out per real dimension in that same order, most significant bit
//! first within each dimension.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modulation alphabet selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modulation {
    Qpsk,
    Qam16,
}

impl Modulation {
    pub fn as_str(self) -> &'static str {
        match self {
            Modulation::Qpsk => "qpsk",
            Modulation::Qam16 => "qam16",
        }
    }
}

impl std::fmt::Display for Modulation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "qpsk" => Ok(Modulation::Qpsk),
            "qam16" | "16qam" => Ok(Modulation::Qam16),
            other => Err(Error::Config(format!("unknown modulation `{other}`"))),
        }
    }
}

/// Per-real-dimension PAM alphabet with a Gray labelling.
///
/// `levels` is sorted ascending and `labels[i]` is the bit pattern carried by
/// `levels[i]`. Complex symbols are the product alphabet, normalized to unit
/// mean energy.
#[derive(Debug, Clone, PartialEq)]
pub struct Constellation {
    kind: Modulation,
    levels: Vec<f64>,
    labels: Vec<u8>,
    bits_per_real_dim: usize,
}

impl Constellation {
    pub fn new(kind: Modulation) -> Self {
        match kind {
            Modulation::Qpsk => Self::qpsk(),
            Modulation::Qam16 => Self::qam16(),
        }
    }

    /// bit 0 -> +1/sqrt(2), bit 1 -> -1/sqrt(2)
    pub fn qpsk() -> Self {
        let a = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            kind: Modulation::Qpsk,
            levels: vec![-a, a],
            labels: vec![0b1, 0b0],
            bits_per_real_dim: 1,
        }
    }

    /// 00 -> -3, 01 -> -1, 11 -> +1, 10 -> +3, all scaled by 1/sqrt(10)
    pub fn qam16() -> Self {
        let s = 1.0 / 10f64.sqrt();
        Self {
            kind: Modulation::Qam16,
            levels: vec![-3.0 * s, -s, s, 3.0 * s],
            labels: vec![0b00, 0b01, 0b11, 0b10],
            bits_per_real_dim: 2,
        }
    }

    pub fn kind(&self) -> Modulation {
        self.kind
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn bits_per_real_dim(&self) -> usize {
        self.bits_per_real_dim
    }

    /// Bits carried by one complex symbol.
    pub fn bits_per_symbol(&self) -> usize {
        2 * self.bits_per_real_dim
    }

    /// Mean energy of the complex alphabet (`2 * E[level^2]`).
    pub fn mean_symbol_energy(&self) -> f64 {
        2.0 * self.levels.iter().map(|l| l * l).sum::<f64>() / self.levels.len() as f64
    }

    /// Nearest level; exact midpoints go to the smaller level.
    pub fn quantize_scalar(&self, value: f64) -> f64 {
        let mut best = self.levels[0];
        let mut best_dist = (value - best).abs();
        for &level in &self.levels[1..] {
            let dist = (value - level).abs();
            if dist < best_dist {
                best = level;
                best_dist = dist;
            }
        }
        best
    }

    pub fn quantize(&self, x: &DVector<f64>) -> DVector<f64> {
        x.map(|v| self.quantize_scalar(v))
    }

    pub fn quantize_slice(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|&v| self.quantize_scalar(v)).collect()
    }

    /// Index of `value` in `levels`, allowing for float noise from I/O.
    pub fn level_index(&self, value: f64) -> Option<usize> {
        self.levels.iter().position(|&l| (l - value).abs() <= 1e-9)
    }

    /// Map bits to a transmit frame. The user count is inferred from the bit
    /// count, which must be a positive multiple of `2 * bits_per_real_dim`.
    pub fn modulate(&self, bits: &[u8]) -> Result<TransmitFrame> {
        let per_user = self.bits_per_symbol();
        if bits.is_empty() || !bits.len().is_multiple_of(per_user) {
            let expected = (bits.len() / per_user).max(1) * per_user;
            return Err(Error::Length {
                expected,
                got: bits.len(),
            });
        }
        if let Some(b) = bits.iter().find(|&&b| b > 1) {
            return Err(Error::Domain(format!("bit value {b}")));
        }
        let n_users = bits.len() / per_user;
        let x = DVector::from_iterator(
            2 * n_users,
            bits.chunks(self.bits_per_real_dim).map(|chunk| {
                let pattern = chunk.iter().fold(0u8, |acc, &b| (acc << 1) | b);
                let idx = self
                    .labels
                    .iter()
                    .position(|&l| l == pattern)
                    .expect("gray map covers every pattern");
                self.levels[idx]
            }),
        );
        let x_complex = DVector::from_fn(n_users, |j, _| Complex64::new(x[j], x[n_users + j]));
        Ok(TransmitFrame {
            bits: bits.to_vec(),
            x,
            x_complex,
        })
    }

    /// Inverse Gray map. Every entry must already be a constellation level.
    pub fn demodulate(&self, x: &[f64]) -> Result<Vec<u8>> {
        let mut bits = Vec::with_capacity(x.len() * self.bits_per_real_dim);
        for &value in x {
            let idx = self
                .level_index(value)
                .ok_or_else(|| Error::Domain(format!("{value} is not a {} level", self.kind)))?;
            let pattern = self.labels[idx];
            for shift in (0..self.bits_per_real_dim).rev() {
                bits.push((pattern >> shift) & 1);
            }
        }
        Ok(bits)
    }

    /// Uniform random bits for `n_users` complex symbols.
    pub fn random_bits<R: Rng + ?Sized>(&self, n_users: usize, rng: &mut R) -> Vec<u8> {
        (0..n_users * self.bits_per_symbol())
            .map(|_| rng.random::<bool>() as u8)
            .collect()
    }
}

/// Bits together with their real- and complex-domain symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct TransmitFrame {
    pub bits: Vec<u8>,
    pub x: DVector<f64>,
    pub x_complex: DVector<Complex64>,
}

/// `N x K` complex channel, BS antennas by users.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexChannel {
    entries: DMatrix<Complex64>,
}

impl ComplexChannel {
    pub fn new(entries: DMatrix<Complex64>) -> Result<Self> {
        if entries.nrows() == 0 || entries.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "channel must be at least 1x1, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries
            .iter()
            .any(|z| !z.re.is_finite() || !z.im.is_finite())
        {
            return Err(Error::Domain("non-finite channel entry".into()));
        }
        Ok(Self { entries })
    }

    /// I.i.d. CN(0, 1) entries.
    pub fn generate<R: Rng + ?Sized>(
        n_antennas: usize,
        n_users: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_users == 0 || n_antennas < n_users {
            return Err(Error::Dimension(format!(
                "need n_antennas >= n_users >= 1, got {n_antennas}x{n_users}"
            )));
        }
        let scale = std::f64::consts::FRAC_1_SQRT_2;
        let entries = DMatrix::from_fn(n_antennas, n_users, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex64::new(scale * re, scale * im)
        });
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &DMatrix<Complex64> {
        &self.entries
    }

    pub fn n_antennas(&self) -> usize {
        self.entries.nrows()
    }

    pub fn n_users(&self) -> usize {
        self.entries.ncols()
    }

    /// `[[Re, -Im], [Im, Re]]`, a `2N x 2K` real matrix.
    pub fn to_real(&self) -> DMatrix<f64> {
        let (n, k) = self.entries.shape();
        let mut h = DMatrix::zeros(2 * n, 2 * k);
        for c in 0..k {
            for r in 0..n {
                let z = self.entries[(r, c)];
                h[(r, c)] = z.re;
                h[(r, k + c)] = -z.im;
                h[(n + r, c)] = z.im;
                h[(n + r, k + c)] = z.re;
            }
        }
        h
    }
}

/// Stack real parts over imaginary parts.
pub fn embed_vector(v: &DVector<Complex64>) -> DVector<f64> {
    let n = v.len();
    DVector::from_fn(2 * n, |i, _| if i < n { v[i].re } else { v[i - n].im })
}

/// How an SNR in dB is turned into the complex noise variance sigma^2.
///
/// Channel entries have unit variance and symbols unit energy, so
/// `E||h_k||^2 = N` and `E||Hx||^2 = N K`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrConvention {
    /// Per-user SNR at the receiver after combining over all antennas:
    /// `SNR = E||h_k||^2 / sigma^2`, so `sigma^2 = N / 10^(snr_db / 10)`.
    #[default]
    Receive,
    /// Total received signal power over noise power per antenna:
    /// `SNR = E||Hx||^2 / E||n||^2`, so `sigma^2 = K / 10^(snr_db / 10)`.
    Transmit,
}

impl SnrConvention {
    pub fn noise_variance(self, snr_db: f64, n_antennas: usize, n_users: usize) -> f64 {
        let scale = match self {
            SnrConvention::Receive => n_antennas,
            SnrConvention::Transmit => n_users,
        };
        scale as f64 / 10f64.powf(snr_db / 10.0)
    }
}

impl std::str::FromStr for SnrConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "receive" => Ok(SnrConvention::Receive),
            "transmit" => Ok(SnrConvention::Transmit),
            other => Err(Error::Config(format!("unknown snr convention `{other}`"))),
        }
    }
}

/// `sigma^2 = K / 10^(snr_db / 10)` ([`SnrConvention::Transmit`]).
pub fn noise_variance(snr_db: f64, n_users: usize) -> f64 {
    SnrConvention::Transmit.noise_variance(snr_db, 0, n_users)
}

/// Noise setting for a received frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseLevel {
    /// `y = Hx` exactly.
    Noiseless,
    SnrDb {
        snr_db: f64,
        convention: SnrConvention,
    },
}

impl NoiseLevel {
    /// SNR under the default [`SnrConvention::Receive`].
    pub fn snr_db(snr_db: f64) -> Self {
        NoiseLevel::SnrDb {
            snr_db,
            convention: SnrConvention::default(),
        }
    }

    /// Total complex noise variance sigma^2.
    pub fn variance(self, n_antennas: usize, n_users: usize) -> f64 {
        match self {
            NoiseLevel::Noiseless => 0.0,
            NoiseLevel::SnrDb { snr_db, convention } => {
                convention.noise_variance(snr_db, n_antennas, n_users)
            }
        }
    }
}

/// Real-domain observation every detector consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSystem {
    pub h: DMatrix<f64>,
    pub y: DVector<f64>,
    /// sigma^2 / 2
    pub noise_var_per_real_dim: f64,
    pub n_antennas: usize,
    pub n_users: usize,
}

impl RealSystem {
    /// Checks shapes, finiteness and the embedded block structure of `h`.
    pub fn new(h: DMatrix<f64>, y: DVector<f64>, noise_var_per_real_dim: f64) -> Result<Self> {
        let (rows, cols) = h.shape();
        if rows == 0 || cols == 0 || rows % 2 != 0 || cols % 2 != 0 {
            return Err(Error::Dimension(format!(
                "real channel must be 2N x 2K, got {rows}x{cols}"
            )));
        }
        if y.len() != rows {
            return Err(Error::Length {
                expected: rows,
                got: y.len(),
            });
        }
        if !(noise_var_per_real_dim >= 0.0 && noise_var_per_real_dim.is_finite()) {
            return Err(Error::Domain(format!(
                "noise variance {noise_var_per_real_dim}"
            )));
        }
        if h.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite entry in H or y".into()));
        }
        let (n, k) = (rows / 2, cols / 2);
        for r in 0..n {
            for c in 0..k {
                if h[(r, c)] != h[(n + r, k + c)] || h[(r, k + c)] != -h[(n + r, c)] {
                    return Err(Error::Dimension(format!(
                        "H lacks the [[Re, -Im], [Im, Re]] block structure at ({r}, {c})"
                    )));
                }
            }
        }
        Ok(Self {
            h,
            y,
            noise_var_per_real_dim,
            n_antennas: n,
            n_users: k,
        })
    }

    /// Total complex-domain noise variance sigma^2.
    pub fn noise_var(&self) -> f64 {
        2.0 * self.noise_var_per_real_dim
    }
}

/// `y = Hx + n`, with `n` i.i.d. N(0, sigma^2 / 2) per real dimension.
pub fn awgn_receive<R: Rng + ?Sized>(
    h: &DMatrix<f64>,
    x: &DVector<f64>,
    noise: NoiseLevel,
    rng: &mut R,
) -> Result<RealSystem> {
    if h.ncols() != x.len() {
        return Err(Error::Length {
            expected: h.ncols(),
            got: x.len(),
        });
    }
    if let NoiseLevel::SnrDb { snr_db, .. } = noise {
        if !snr_db.is_finite() {
            return Err(Error::Domain(format!("snr_db {snr_db}")));
        }
    }
    let per_dim = noise.variance(h.nrows() / 2, h.ncols() / 2) / 2.0;
    let mut y = h * x;
    if per_dim > 0.0 {
        let std = per_dim.sqrt();
        for v in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    RealSystem::new(h.clone(), y, per_dim)
}
