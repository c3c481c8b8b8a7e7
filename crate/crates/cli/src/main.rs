use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aamulet::data_io::{generate_synthetic, load_samples, read_manifest, write_manifest, write_pgm, SynthSpec};
use aamulet::metrics::evaluate_dataset;
use aamulet::network::{Checkpoint, Variant};
use aamulet::run::{
    ablation_csv, ablation_medians, loss_grad_check, medians_csv, predict_samples, run_ablation, split, RunConfig,
};
use aamulet::tensor::{Dims, Tensor};
use aamulet::training::{train, CheckpointPolicy, LossRecord, Trainer};
use aamulet::Error;
use clap::{Parser, Subcommand};

const SEED_VAR: &str = "AAMULET_SEED";

#[derive(Parser)]
#[command(
    name = "aamulet",
    version,
    about = "Attention-pyramid salient object detection on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a manifest.
    Synth {
        /// SynthSpec JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Train a network on a manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write one PGM saliency map per manifest entry.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score saliency maps against the manifest's masks.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        pr: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Finite-difference check of the full loss gradient.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train and evaluate network variants over several seeds.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "a,b,c,d,e")]
        variants: String,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
}

/// Failure with the process exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Diverged { .. } | Error::NonFiniteGradient(_) => 3,
            Error::Checkpoint(_) => 4,
            Error::MissingData(_) => 5,
            _ => 2,
        };
        Failure::new(code, e.to_string())
    }
}

type CmdResult = Result<(), Failure>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::new(2, format!("{}: {e}", path.display()))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(io_err(path))
}

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Failure::new(2, format!("{SEED_VAR}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn load_config(path: &Path) -> Result<(String, RunConfig), Failure> {
    let text = read_text(path)?;
    let mut config = RunConfig::from_json(&text).map_err(|e| Failure::new(2, format!("{}: {e}", path.display())))?;
    if let Some(seed) = seed_override()? {
        config.seed = seed;
    }
    Ok((text, config))
}

fn create_dir(path: &Path) -> CmdResult {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_file(path: &Path, contents: &str) -> CmdResult {
    fs::write(path, contents).map_err(io_err(path))
}

fn cmd_synth(spec: Option<PathBuf>, out: &Path, count: usize) -> CmdResult {
    let mut spec = match spec {
        Some(p) => serde_json::from_str::<SynthSpec>(&read_text(&p)?)
            .map_err(|e| Failure::new(2, format!("{}: {e}", p.display())))?,
        None => SynthSpec::default(),
    };
    if let Some(seed) = seed_override()? {
        spec.seed = seed;
    }
    if count == 0 {
        return Err(Failure::new(2, "--count must be at least 1"));
    }
    let samples = generate_synthetic(&spec, count)?;
    let manifest = write_manifest(&samples, out)?;
    println!("wrote {count} samples; manifest {}", manifest.display());
    Ok(())
}

/// Keeps the rows of an earlier log up to iteration `upto`.
fn earlier_rows(path: &Path, upto: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|i| i.parse::<usize>().ok())
                .is_some_and(|i| i <= upto)
        })
        .map(String::from)
        .collect()
}

fn cmd_train(config: &Path, data: &Path, out: &Path, resume: Option<PathBuf>) -> CmdResult {
    let (text, config) = load_config(config)?;
    let samples = load_samples(&read_manifest(data)?)?;
    let mut trainer = match resume {
        Some(p) => Trainer::resume(config.setup(), Checkpoint::load(&p).map_err(checkpoint_failure)?)?,
        None => Trainer::new(config.setup())?,
    };
    create_dir(out)?;
    write_file(&out.join("config.json"), &text)?;
    write_file(&out.join("config.resolved.json"), &config.to_json())?;

    let log_path = out.join("loss.csv");
    let mut lines = vec![LossRecord::CSV_HEADER.to_string()];
    lines.extend(earlier_rows(&log_path, trainer.iter()));
    let mut log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    writeln!(log, "{}", lines.join("\n")).map_err(io_err(&log_path))?;

    let policy = CheckpointPolicy {
        dir: Some(out.join("checkpoints")),
        every: config.optim.checkpoint_every,
    };
    let result = train(&mut trainer, &samples, &policy, |r| {
        writeln!(log, "{}", r.csv_row()).map_err(|source| Error::Io {
            path: log_path.clone(),
            source,
        })?;
        if r.iter % 50 == 0 {
            eprintln!("iter {} loss/pixel {:.6} lr {:e}", r.iter, r.loss_per_pixel, r.lr);
        }
        Ok(())
    });
    match result {
        Ok(records) => {
            if let Some(last) = records.last() {
                println!(
                    "trained to iteration {}; final loss/pixel {:.6}",
                    last.iter, last.loss_per_pixel
                );
            }
            Ok(())
        }
        Err(e @ Error::Diverged { .. }) => Err(Failure::new(
            3,
            format!(
                "{e}; checkpoints up to the last periodic save are kept in {}",
                out.join("checkpoints").display()
            ),
        )),
        Err(e) => Err(e.into()),
    }
}

fn checkpoint_failure(e: Error) -> Failure {
    Failure::new(4, e.to_string())
}

fn cmd_predict(ckpt: &Path, data: &Path, out: &Path, jobs: usize) -> CmdResult {
    let ckpt = Checkpoint::load(ckpt).map_err(checkpoint_failure)?;
    ckpt.params.check_matches(&ckpt.config).map_err(checkpoint_failure)?;
    let samples = load_samples(&read_manifest(data)?)?;
    create_dir(out)?;
    let chunk = samples.len().div_ceil(jobs.max(1)).max(1);
    let maps = std::thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| s.spawn(|| predict_samples(&ckpt.params, &ckpt.config, part, 8)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("prediction worker panicked"))
            .collect::<Result<Vec<_>, Error>>()
    })?;
    let mut written = 0;
    for m in maps.iter().flatten() {
        let t = Tensor::new(
            Dims::new(1, 1, m.height(), m.width()),
            m.values().iter().map(|&v| v as f32).collect(),
        )?;
        write_pgm(out.join(format!("{}.pgm", m.id())), &t)?;
        written += 1;
    }
    println!("wrote {written} saliency maps to {}", out.display());
    Ok(())
}

fn cmd_eval(pred: &Path, data: &Path, out: &Path, pr: Option<PathBuf>, jobs: usize) -> CmdResult {
    let report = evaluate_dataset(pred, data, jobs)?;
    report.write_csv(out)?;
    if let Some(p) = pr {
        report.write_pr_csv(p)?;
        if report.pr.excluded > 0 {
            eprintln!(
                "{} images with empty ground truth left out of the PR averages",
                report.pr.excluded
            );
        }
    }
    let m = &report.mean;
    println!(
        "{} images: f_adaptive {:.6} f_max {:.6} mae {:.6} s_measure {:.6}",
        report.images.len(),
        m.f_adaptive,
        m.f_max,
        m.mae,
        m.s_measure
    );
    Ok(())
}

fn cmd_gradcheck(config: &Path, tolerance: f64) -> Result<ExitCode, Failure> {
    let (_, config) = load_config(config)?;
    let outcome = loss_grad_check(&config.network, &config.loss, config.seed, 2, 1e-4, tolerance)?;
    let report = &outcome.report;
    println!(
        "max relative error {:.3e} over {} entries (tolerance {tolerance:e})",
        report.max_rel_error, report.entries
    );
    if outcome.kinked_points > 0 {
        eprintln!(
            "{} sample points redrawn after straddling an activation kink",
            outcome.kinked_points
        );
    }
    Ok(if outcome.passed(tolerance) {
        ExitCode::SUCCESS
    } else {
        eprintln!("gradient check above tolerance");
        ExitCode::from(1)
    })
}

fn cmd_ablate(config: &Path, data: &Path, out: &Path, variants: &str, seeds: usize) -> CmdResult {
    let variants = variants
        .split(',')
        .filter(|v| !v.trim().is_empty())
        .map(Variant::parse)
        .collect::<Result<Vec<_>, Error>>()?;
    let (text, config) = load_config(config)?;
    let samples = load_samples(&read_manifest(data)?)?;
    let (train_set, test_set) = split(&samples, config.data.test_fraction)?;
    create_dir(out)?;
    write_file(&out.join("config.json"), &text)?;
    eprintln!("{} training and {} held-out samples", train_set.len(), test_set.len());
    let rows = run_ablation(&config, train_set, test_set, &variants, seeds, |r| {
        eprintln!(
            "variant {} seed {}: mae {:.6} f_max {:.6}",
            r.variant, r.seed, r.mae, r.f_max
        );
    })?;
    write_file(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    let medians = ablation_medians(&rows);
    write_file(&out.join("medians.csv"), &medians_csv(&medians))?;
    print!("{}", medians_csv(&medians));
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Failure> {
    match cli.command {
        Command::Synth { spec, out, count } => cmd_synth(spec, &out, count),
        Command::Train {
            config,
            data,
            out,
            resume,
        } => cmd_train(&config, &data, &out, resume),
        Command::Predict { ckpt, data, out, jobs } => cmd_predict(&ckpt, &data, &out, jobs),
        Command::Eval {
            pred,
            data,
            out,
            pr,
            jobs,
        } => cmd_eval(&pred, &data, &out, pr, jobs),
        Command::Gradcheck { config, tolerance } => return cmd_gradcheck(&config, tolerance),
        Command::Ablate {
            config,
            data,
            out,
            variants,
            seeds,
        } => cmd_ablate(&config, &data, &out, &variants, seeds),
    }
    .map(|()| ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
