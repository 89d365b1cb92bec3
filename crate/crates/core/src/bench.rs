//! Monte Carlo BER measurement, the closed-form multiplication-count model
//! and result emission.
//!
//! All detectors at one sweep point see the same `(H, x, n)` draws: frames
//! are generated once from the point seed and every detector runs on each.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baseline::{
    iterative_estimate, lmmse_estimate, matched_filter_init, zf_estimate, DiagonalGram,
};
use crate::error::{Error, Result};
use crate::system_model::{
    awgn_receive, ComplexChannel, Constellation, Modulation, NoiseLevel, RealSystem, SnrConvention,
};
use crate::unfolded::{detect_with_gram, NetworkParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Detector {
    Mf,
    Zf,
    Lmmse,
    Iterative,
    Proposed,
}

impl Detector {
    pub const ALL: [Detector; 5] = [
        Detector::Mf,
        Detector::Zf,
        Detector::Lmmse,
        Detector::Iterative,
        Detector::Proposed,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Detector::Mf => "MF",
            Detector::Zf => "ZF",
            Detector::Lmmse => "LMMSE",
            Detector::Iterative => "ITERATIVE",
            Detector::Proposed => "PROPOSED",
        }
    }
}

impl std::fmt::Display for Detector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Detector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Detector::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown detector `{s}`")))
    }
}

/// Detectors covered by the multiplication-count model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlopDetector {
    Lmmse,
    DetNet,
    Iterative,
    Proposed,
}

impl FlopDetector {
    pub const ALL: [FlopDetector; 4] = [
        FlopDetector::Lmmse,
        FlopDetector::DetNet,
        FlopDetector::Iterative,
        FlopDetector::Proposed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FlopDetector::Lmmse => "LMMSE",
            FlopDetector::DetNet => "DetNet",
            FlopDetector::Iterative => "Iterative IC",
            FlopDetector::Proposed => "Proposed",
        }
    }

    pub fn formula(self) -> &'static str {
        match self {
            FlopDetector::Lmmse => "K^3 + K^2",
            FlopDetector::DetNet => "K(128K - 2)L",
            FlopDetector::Iterative => "4LK^2 + 2(2L + 1)K",
            FlopDetector::Proposed => "4LK^2 + 2(2L + 1)K + 3KL",
        }
    }
}

/// Multiplication count for `K` users and `L` layers (ignored for LMMSE).
pub fn flops(detector: FlopDetector, k: u64, l: u64) -> u64 {
    let iterative = 4 * l * k * k + 2 * (2 * l + 1) * k;
    match detector {
        FlopDetector::Lmmse => k * k * k + k * k,
        FlopDetector::DetNet => k * (128 * k - 2) * l,
        FlopDetector::Iterative => iterative,
        FlopDetector::Proposed => iterative + 3 * k * l,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlopModel {
    pub detector: FlopDetector,
    pub k: u64,
    pub l: u64,
}

impl FlopModel {
    pub fn count(&self) -> u64 {
        flops(self.detector, self.k, self.l)
    }
}

/// Text table comparing all detectors at one `(K, L)`.
pub fn flop_table(k: u64, l: u64) -> String {
    let mut out = format!(
        "{:<14} {:<28} {:>12}\n",
        "detector",
        "multiplications",
        format!("K={k},L={l}")
    );
    for d in FlopDetector::ALL {
        out.push_str(&format!(
            "{:<14} {:<28} {:>12}\n",
            d.name(),
            d.formula(),
            flops(d, k, l)
        ));
    }
    out
}

/// Link configuration shared by every point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub n_antennas: usize,
    pub n_users: usize,
    pub modulation: Modulation,
    /// Iteration count of the ITERATIVE baseline.
    pub n_layers: usize,
    pub snr_convention: SnrConvention,
    /// Drop the noise term entirely.
    pub noiseless: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_antennas: 128,
            n_users: 8,
            modulation: Modulation::Qpsk,
            n_layers: 8,
            snr_convention: SnrConvention::Receive,
            noiseless: false,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_antennas < self.n_users {
            return Err(Error::Config(format!(
                "need n_antennas >= n_users >= 1, got {} and {}",
                self.n_antennas, self.n_users
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn bits_per_frame(&self) -> u64 {
        (self.n_users * Constellation::new(self.modulation).bits_per_symbol()) as u64
    }
}

/// One Monte Carlo measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BerRecord {
    pub detector: Detector,
    pub snr_db: f64,
    pub n_frames: u64,
    pub n_bits: u64,
    pub n_bit_errors: u64,
    pub ber: f64,
    pub seed: u64,
}

impl BerRecord {
    fn new(
        detector: Detector,
        snr_db: f64,
        n_frames: u64,
        n_bits: u64,
        n_bit_errors: u64,
        seed: u64,
    ) -> Self {
        Self {
            detector,
            snr_db,
            n_frames,
            n_bits,
            n_bit_errors,
            ber: n_bit_errors as f64 / n_bits as f64,
            seed,
        }
    }

    /// Binomial standard error `sqrt(p (1 - p) / n)` of the estimate.
    pub fn std_error(&self) -> f64 {
        (self.ber * (1.0 - self.ber) / self.n_bits as f64).sqrt()
    }
}

/// Seed of sweep point `index`.
pub fn point_seed(seed: u64, index: usize) -> u64 {
    seed ^ index as u64
}

fn estimate(
    detector: Detector,
    g: &DiagonalGram,
    sys: &RealSystem,
    c: &Constellation,
    cfg: &SweepConfig,
    params: Option<&NetworkParams>,
) -> Result<DVector<f64>> {
    Ok(match detector {
        Detector::Mf => c.quantize(&matched_filter_init(g)),
        Detector::Zf => c.quantize(&zf_estimate(g)?),
        Detector::Lmmse => c.quantize(&lmmse_estimate(g, sys.noise_var())?),
        Detector::Iterative => c.quantize(&iterative_estimate(g, cfg.n_layers)),
        Detector::Proposed => detect_with_gram(g, c, params.expect("checked by caller")),
    })
}

/// Observer invoked with every system a detector is about to process.
pub type FrameHook<'a> = &'a mut dyn FnMut(Detector, &RealSystem);

/// Run several detectors over the same `n_frames` draws.
///
/// Records come back in the order of `detectors`.
pub fn run_point(
    detectors: &[Detector],
    cfg: &SweepConfig,
    snr_db: f64,
    n_frames: u64,
    seed: u64,
    params: Option<&NetworkParams>,
    mut hook: Option<FrameHook<'_>>,
) -> Result<Vec<BerRecord>> {
    cfg.validate()?;
    if n_frames == 0 {
        return Err(Error::Config("n_frames must be >= 1".into()));
    }
    if detectors.contains(&Detector::Proposed) {
        let p = params.ok_or_else(|| Error::Config("PROPOSED needs a trained model".into()))?;
        p.check_compatible(cfg.modulation, cfg.n_users)?;
        p.validate_shapes()?;
    }
    let noise = if cfg.noiseless {
        NoiseLevel::Noiseless
    } else {
        NoiseLevel::SnrDb {
            snr_db,
            convention: cfg.snr_convention,
        }
    };
    let c = Constellation::new(cfg.modulation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = vec![0u64; detectors.len()];

    for _ in 0..n_frames {
        let h = ComplexChannel::generate(cfg.n_antennas, cfg.n_users, &mut rng)?.to_real();
        let frame = c.modulate(&c.random_bits(cfg.n_users, &mut rng))?;
        let sys = awgn_receive(&h, &frame.x, noise, &mut rng)?;
        let g = DiagonalGram::precompute(&sys)?;
        for (det, err) in detectors.iter().zip(errors.iter_mut()) {
            if let Some(hook) = hook.as_mut() {
                hook(*det, &sys);
            }
            let x_hat = estimate(*det, &g, &sys, &c, cfg, params)?;
            let bits = c.demodulate(x_hat.as_slice())?;
            *err += bits.iter().zip(&frame.bits).filter(|(a, b)| a != b).count() as u64;
        }
    }

    let n_bits = n_frames * cfg.bits_per_frame();
    Ok(detectors
        .iter()
        .zip(errors)
        .map(|(&d, e)| BerRecord::new(d, snr_db, n_frames, n_bits, e, seed))
        .collect())
}

pub fn run_ber_point(
    detector: Detector,
    cfg: &SweepConfig,
    snr_db: f64,
    n_frames: u64,
    seed: u64,
    params: Option<&NetworkParams>,
) -> Result<BerRecord> {
    let mut records = run_point(&[detector], cfg, snr_db, n_frames, seed, params, None)?;
    Ok(records.remove(0))
}

/// Every `(snr, detector)` pair, SNR-major. Point `i` uses
/// [`point_seed`]`(seed, i)` for all detectors.
pub fn run_sweep(
    cfg: &SweepConfig,
    detectors: &[Detector],
    snr_list: &[f64],
    n_frames: u64,
    seed: u64,
    params: Option<&NetworkParams>,
) -> Result<Vec<BerRecord>> {
    let mut out = Vec::with_capacity(detectors.len() * snr_list.len());
    for (i, &snr) in snr_list.iter().enumerate() {
        out.extend(run_point(
            detectors,
            cfg,
            snr,
            n_frames,
            point_seed(seed, i),
            params,
            None,
        )?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    JsonLines,
}

impl std::str::FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" | "json-lines" | "jsonlines" => Ok(OutputFormat::JsonLines),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

/// CSV header, in column order.
pub const CSV_COLUMNS: [&str; 7] = [
    "detector",
    "snr_db",
    "n_frames",
    "n_bits",
    "n_bit_errors",
    "ber",
    "seed",
];

pub fn write_results<W: Write>(
    records: &[BerRecord],
    format: OutputFormat,
    mut writer: W,
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("no records to emit".into()));
    }
    match format {
        OutputFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(CSV_COLUMNS).map_err(csv_err)?;
            for r in records {
                w.write_record([
                    r.detector.as_str().to_string(),
                    r.snr_db.to_string(),
                    r.n_frames.to_string(),
                    r.n_bits.to_string(),
                    r.n_bit_errors.to_string(),
                    r.ber.to_string(),
                    r.seed.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
        }
        OutputFormat::JsonLines => {
            for r in records {
                serde_json::to_writer(&mut writer, r).map_err(|e| Error::Io(e.into()))?;
                writer.write_all(b"\n")?;
            }
            writer.flush()?;
        }
    }
    Ok(())
}

pub fn emit_results(
    records: &[BerRecord],
    format: OutputFormat,
    path: impl AsRef<Path>,
) -> Result<()> {
    if records.is_empty() {
        return Err(Error::Usage("no records to emit".into()));
    }
    let file = std::fs::File::create(path)?;
    write_results(records, format, std::io::BufWriter::new(file))
}

/// Parse CSV written by [`write_results`].
pub fn read_csv<R: Read>(reader: R) -> Result<Vec<BerRecord>> {
    let mut r = csv::Reader::from_reader(reader);
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if header != CSV_COLUMNS {
        return Err(Error::Schema(format!("unexpected CSV header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Schema(format!("{other:?}")),
    }
}
