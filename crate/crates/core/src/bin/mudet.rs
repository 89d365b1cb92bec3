use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mimo_unfold::baseline::{
    iterative_estimate, lmmse_estimate, matched_filter_init, zf_estimate, DiagonalGram,
};
use mimo_unfold::bench::{
    flop_table, run_sweep, write_results, Detector, OutputFormat, SweepConfig,
};
use mimo_unfold::system_model::{
    awgn_receive, ComplexChannel, Constellation, Modulation, NoiseLevel, SnrConvention,
};
use mimo_unfold::training::{train_with_observer, TrainConfig};
use mimo_unfold::unfolded::{detect_with_gram, NetworkParams};
use mimo_unfold::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

/// Deep-unfolded massive-MIMO detection: training, BER sweeps and
/// complexity figures.
#[derive(Debug, Parser)]
#[command(name = "mudet", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the unfolded network and write a model file and a CSV log.
    Train(TrainArgs),
    /// Run every detector on one frame and print the estimates.
    Detect(DetectArgs),
    /// Monte Carlo BER sweep over detectors and SNR points.
    Sweep(SweepArgs),
    /// Print the multiplication-count comparison.
    Flops(FlopsArgs),
}

/// Every key a config file may contain. Command-line flags of the same name
/// take precedence.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    n_antennas: Option<usize>,
    n_users: Option<usize>,
    n_layers: Option<usize>,
    modulation: Option<Modulation>,
    snr_convention: Option<SnrConvention>,
    snr_range_db: Option<[f64; 2]>,
    lr0: Option<f64>,
    batch_size: Option<usize>,
    n_train: Option<usize>,
    n_epochs: Option<usize>,
    seed: Option<u64>,
    snr_db: Option<Vec<f64>>,
    n_frames: Option<u64>,
    detectors: Option<Vec<Detector>>,
    noiseless: Option<bool>,
    format: Option<String>,
    model: Option<PathBuf>,
    out: Option<PathBuf>,
    log: Option<PathBuf>,
}

impl FileConfig {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Args)]
struct LinkArgs {
    /// TOML key/value file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "n_antennas")]
    n_antennas: Option<usize>,
    #[arg(long = "n_users")]
    n_users: Option<usize>,
    #[arg(long = "n_layers")]
    n_layers: Option<usize>,
    /// qpsk or qam16
    #[arg(long)]
    modulation: Option<Modulation>,
    /// receive (sigma^2 = N / snr) or transmit (sigma^2 = K / snr)
    #[arg(long = "snr_convention")]
    snr_convention: Option<SnrConvention>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    link: LinkArgs,
    /// Training SNR interval in dB, as `lo,hi`.
    #[arg(long = "snr_range_db", value_delimiter = ',', num_args = 2)]
    snr_range_db: Option<Vec<f64>>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long = "batch_size")]
    batch_size: Option<usize>,
    #[arg(long = "n_train")]
    n_train: Option<usize>,
    #[arg(long = "n_epochs")]
    n_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output model file.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Training log (CSV); standard output when absent.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    link: LinkArgs,
    /// Base seed; sweep point `i` uses `seed ^ i`.
    #[arg(long, required = true)]
    seed: u64,
    /// SNR points in dB, comma separated.
    #[arg(long = "snr_db", value_delimiter = ',')]
    snr_db: Option<Vec<f64>>,
    #[arg(long = "n_frames")]
    n_frames: Option<u64>,
    /// Comma-separated subset of MF,ZF,LMMSE,ITERATIVE,PROPOSED.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<Detector>>,
    /// Trained model for PROPOSED.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    noiseless: bool,
    /// csv or jsonl
    #[arg(long)]
    format: Option<OutputFormat>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DetectArgs {
    #[command(flatten)]
    link: LinkArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "snr_db")]
    snr_db: Option<f64>,
    /// Comma-separated subset of MF,ZF,LMMSE,ITERATIVE,PROPOSED.
    #[arg(long, value_delimiter = ',')]
    detectors: Option<Vec<Detector>>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    noiseless: bool,
}

#[derive(Debug, Args)]
struct FlopsArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "n_users")]
    n_users: Option<u64>,
    #[arg(long = "n_layers")]
    n_layers: Option<u64>,
}

const DEFAULT_SNR_GRID: [f64; 14] = [
    0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0,
];
const DEFAULT_FRAMES: u64 = 125_000;

fn sweep_config(link: &LinkArgs, file: &FileConfig, noiseless: bool) -> SweepConfig {
    let d = SweepConfig::default();
    SweepConfig {
        n_antennas: link.n_antennas.or(file.n_antennas).unwrap_or(d.n_antennas),
        n_users: link.n_users.or(file.n_users).unwrap_or(d.n_users),
        modulation: link.modulation.or(file.modulation).unwrap_or(d.modulation),
        n_layers: link.n_layers.or(file.n_layers).unwrap_or(d.n_layers),
        snr_convention: link
            .snr_convention
            .or(file.snr_convention)
            .unwrap_or(d.snr_convention),
        noiseless: noiseless || file.noiseless.unwrap_or(d.noiseless),
    }
}

fn load_model(path: Option<&PathBuf>, cfg: &SweepConfig) -> Result<Option<NetworkParams>> {
    path.map(|p| {
        let params = NetworkParams::load(p)?;
        params.check_compatible(cfg.modulation, cfg.n_users)?;
        Ok(params)
    })
    .transpose()
}

fn pick_detectors(requested: Option<Vec<Detector>>, has_model: bool) -> Vec<Detector> {
    requested.unwrap_or_else(|| {
        Detector::ALL
            .into_iter()
            .filter(|d| has_model || *d != Detector::Proposed)
            .collect()
    })
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn train(args: TrainArgs) -> Result<()> {
    let file = FileConfig::load(args.link.config.as_deref())?;
    let d = TrainConfig::default();
    let snr_range_db = match args.snr_range_db {
        Some(v) => [v[0], v[1]],
        None => file.snr_range_db.unwrap_or(d.snr_range_db),
    };
    let cfg = TrainConfig {
        n_antennas: args
            .link
            .n_antennas
            .or(file.n_antennas)
            .unwrap_or(d.n_antennas),
        n_users: args.link.n_users.or(file.n_users).unwrap_or(d.n_users),
        n_layers: args.link.n_layers.or(file.n_layers).unwrap_or(d.n_layers),
        modulation: args
            .link
            .modulation
            .or(file.modulation)
            .unwrap_or(d.modulation),
        snr_range_db,
        snr_convention: args
            .link
            .snr_convention
            .or(file.snr_convention)
            .unwrap_or(d.snr_convention),
        lr0: args.lr0.or(file.lr0).unwrap_or(d.lr0),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        n_train: args.n_train.or(file.n_train).unwrap_or(d.n_train),
        n_epochs: args.n_epochs.or(file.n_epochs).unwrap_or(d.n_epochs),
        seed: args.seed.or(file.seed).unwrap_or(d.seed),
    };
    let model = args
        .model
        .or(file.model)
        .ok_or_else(|| Error::Config("train needs --model <path>".into()))?;
    cfg.validate()?;

    let mut log = output(args.log.or(file.log).as_ref())?;
    writeln!(log, "epoch,lr,mean_loss")?;
    let mut write_err = None;
    let outcome = train_with_observer(&cfg, |e| {
        if write_err.is_none() {
            if let Err(err) =
                writeln!(log, "{},{},{}", e.epoch, e.lr, e.mean_loss).and_then(|_| log.flush())
            {
                write_err = Some(err);
            }
        }
    });
    if let Some(err) = write_err {
        return Err(err.into());
    }
    let outcome = outcome?;
    log.flush()?;
    outcome.params.save(&model)
}

fn sweep(args: SweepArgs) -> Result<()> {
    let file = FileConfig::load(args.link.config.as_deref())?;
    let cfg = sweep_config(&args.link, &file, args.noiseless);
    cfg.validate()?;
    let params = load_model(args.model.as_ref().or(file.model.as_ref()), &cfg)?;
    let detectors = pick_detectors(args.detectors.or(file.detectors), params.is_some());
    if detectors.is_empty() {
        return Err(Error::Config("no detectors selected".into()));
    }
    let snr = args
        .snr_db
        .or(file.snr_db)
        .unwrap_or_else(|| DEFAULT_SNR_GRID.to_vec());
    if snr.is_empty() {
        return Err(Error::Config("empty SNR list".into()));
    }
    let n_frames = args.n_frames.or(file.n_frames).unwrap_or(DEFAULT_FRAMES);
    let format = match args.format {
        Some(f) => f,
        None => file.format.as_deref().unwrap_or("csv").parse()?,
    };
    let records = run_sweep(&cfg, &detectors, &snr, n_frames, args.seed, params.as_ref())?;
    write_results(
        &records,
        format,
        output(args.out.as_ref().or(file.out.as_ref()))?,
    )
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:+.4}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn detect(args: DetectArgs) -> Result<()> {
    let file = FileConfig::load(args.link.config.as_deref())?;
    let cfg = sweep_config(&args.link, &file, args.noiseless);
    cfg.validate()?;
    let params = load_model(args.model.as_ref().or(file.model.as_ref()), &cfg)?;
    let detectors = pick_detectors(args.detectors.or(file.detectors), params.is_some());
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let snr_db = match (args.snr_db, file.snr_db.as_deref()) {
        (Some(s), _) => s,
        (None, Some([s])) => *s,
        (None, Some(_)) => return Err(Error::Config("detect takes a single snr_db".into())),
        (None, None) => 11.0,
    };
    if detectors.contains(&Detector::Proposed) && params.is_none() {
        return Err(Error::Config("PROPOSED needs --model".into()));
    }

    let c = Constellation::new(cfg.modulation);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = ComplexChannel::generate(cfg.n_antennas, cfg.n_users, &mut rng)?.to_real();
    let frame = c.modulate(&c.random_bits(cfg.n_users, &mut rng))?;
    let noise = if cfg.noiseless {
        NoiseLevel::Noiseless
    } else {
        NoiseLevel::SnrDb {
            snr_db,
            convention: cfg.snr_convention,
        }
    };
    let sys = awgn_receive(&h, &frame.x, noise, &mut rng)?;
    let g = DiagonalGram::precompute(&sys)?;

    let mut out = io::stdout().lock();
    writeln!(
        out,
        "{}x{} {} seed {seed} {}",
        cfg.n_antennas,
        cfg.n_users,
        cfg.modulation,
        if cfg.noiseless {
            "noiseless".to_string()
        } else {
            format!("snr_db {snr_db}")
        }
    )?;
    writeln!(out, "{:<10} {}", "x", fmt_vec(frame.x.as_slice()))?;
    for det in detectors {
        let soft = match det {
            Detector::Mf => matched_filter_init(&g),
            Detector::Zf => zf_estimate(&g)?,
            Detector::Lmmse => lmmse_estimate(&g, sys.noise_var())?,
            Detector::Iterative => iterative_estimate(&g, cfg.n_layers),
            Detector::Proposed => detect_with_gram(&g, &c, params.as_ref().expect("checked above")),
        };
        let x_hat = c.quantize(&soft);
        let bits = c.demodulate(x_hat.as_slice())?;
        let errors = bits.iter().zip(&frame.bits).filter(|(a, b)| a != b).count();
        writeln!(
            out,
            "{:<10} {}  bit_errors {errors}",
            det.as_str(),
            fmt_vec(x_hat.as_slice())
        )?;
    }
    Ok(())
}

fn flops(args: FlopsArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let k = args.n_users.or(file.n_users.map(|v| v as u64)).unwrap_or(8);
    let l = args
        .n_layers
        .or(file.n_layers.map(|v| v as u64))
        .unwrap_or(8);
    if k == 0 || l == 0 {
        return Err(Error::Config("n_users and n_layers must be >= 1".into()));
    }
    print!("{}", flop_table(k, l));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => train(a),
        Command::Detect(a) => detect(a),
        Command::Sweep(a) => sweep(a),
        Command::Flops(a) => flops(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mudet: {e}");
            if let Error::Divergence { history, .. } = &e {
                eprintln!("loss history: {history:?}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
