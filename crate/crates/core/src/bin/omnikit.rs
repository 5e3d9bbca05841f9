use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;

use omnikit::autodiff::GradCheckConfig;
use omnikit::dataio::{validate_dataset, write_png, Eye, Split};
use omnikit::equirect::{AugmentationConfig, Augmenter};
use omnikit::model::{count_parameters, describe, ModelConfig, Variant};
use omnikit::panosim::{generate_dataset, DatasetVariant, GenConfig};
use omnikit::trainer::{
    ablation_run, encode_normals, evaluate_checkpoint, gradient_suite, normalize_depth, train_observed, AblationConfig,
    Control, EvalOptions, SampleSet, SuiteOptions, TrainConfig,
};

/// Synthetic panoramas and joint depth/normal networks.
#[derive(Parser, Debug)]
#[command(name = "omnikit", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON document for the subcommand's configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Serialize data loading and keep every run reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Scale {
    Desk,
    Full,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a dataset.
    Generate {
        #[arg(long)]
        variant: Option<DatasetVariant>,
        #[arg(long)]
        paths: Option<usize>,
        #[arg(long)]
        test_paths: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        d_max: Option<f64>,
        #[arg(long)]
        stereo: bool,
    },
    /// Check a dataset's structure and value ranges.
    Validate { dataset: PathBuf },
    /// Train a network.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
    },
    /// Score a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "top")]
        eye: Eye,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Train on the three dataset variants and compare them.
    Ablate,
    /// Finite-difference gradient suite.
    Gradcheck {
        /// Check at most this many coordinates per tensor.
        #[arg(long)]
        max_coords: Option<usize>,
        /// Skip the full tiny network.
        #[arg(long)]
        blocks_only: bool,
    },
    /// Parameter count and per-layer table.
    Params {
        #[arg(long, default_value = "ubotnet")]
        variant: Variant,
        #[arg(long, value_enum, default_value = "desk")]
        scale: Scale,
        #[arg(long)]
        json: bool,
    },
    /// Write augmented copies of one sample as images.
    Augpreview {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
}

enum Failure {
    /// Bad arguments or configuration.
    Usage(anyhow::Error),
    /// A check ran and did not pass, or the run itself failed.
    Rejected(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<omnikit::Error>() {
            Some(omnikit::Error::InvalidArgument(_)) => Failure::Usage(e),
            _ => Failure::Rejected(e),
        }
    }
}

impl From<omnikit::Error> for Failure {
    fn from(e: omnikit::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow::anyhow!(msg.into()))
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = fs::read_to_string(p)
        .with_context(|| format!("reading config {}", p.display()))
        .map_err(Failure::Usage)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", p.display()))
        .map_err(Failure::Usage)
}

fn require_out(g: &Global) -> Result<&Path, Failure> {
    g.out
        .as_deref()
        .ok_or_else(|| usage("--out <dir> is required for this subcommand"))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("OMNIKIT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| usage(format!("OMNIKIT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Rejected(e.into()))
}

#[allow(clippy::too_many_arguments)]
fn generate(
    g: &Global,
    variant: Option<DatasetVariant>,
    paths: Option<usize>,
    test_paths: Option<usize>,
    frames: Option<usize>,
    width: Option<usize>,
    height: Option<usize>,
    d_max: Option<f64>,
    stereo: bool,
) -> Outcome {
    let out = require_out(g)?;
    let mut cfg: GenConfig = load_config(g.config.as_deref())?;
    cfg.variant = variant.unwrap_or(cfg.variant);
    cfg.paths = paths.unwrap_or(cfg.paths);
    cfg.test_paths = test_paths.unwrap_or(cfg.test_paths);
    cfg.frames_per_path = frames.unwrap_or(cfg.frames_per_path);
    cfg.width = width.unwrap_or(cfg.width);
    cfg.height = height.unwrap_or(cfg.height);
    cfg.d_max = d_max.unwrap_or(cfg.d_max);
    cfg.stereo |= stereo;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    let m = generate_dataset(&cfg, out)?;
    let count = |s| m.split(s).len();
    println!(
        "wrote {} frames ({} train / {} val / {} test) of variant {} to {}",
        m.records.len(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test),
        cfg.variant.name(),
        out.display()
    );
    Ok(())
}

fn validate(g: &Global, dataset: &Path) -> Outcome {
    let report = validate_dataset(dataset)?;
    println!("{}", report.summary());
    if let Some(out) = &g.out {
        write_json(&out.join("validation.json"), &report)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Rejected(anyhow::anyhow!("dataset failed validation")))
    }
}

fn train_cmd(
    g: &Global,
    dataset: Option<PathBuf>,
    variant: Option<Variant>,
    epochs: Option<usize>,
    max_steps: Option<usize>,
    limit: Option<usize>,
    size: (Option<usize>, Option<usize>),
) -> Outcome {
    let out = require_out(g)?;
    let mut cfg: TrainConfig = load_config(g.config.as_deref())?;
    if let Some(d) = dataset {
        cfg.dataset = d;
    }
    if let Some(v) = variant {
        cfg.model.variant = v;
    }
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.max_steps = max_steps.or(cfg.max_steps);
    cfg.limit = limit.or(cfg.limit);
    cfg.width = size.0.unwrap_or(cfg.width);
    cfg.height = size.1.unwrap_or(cfg.height);
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    cfg.deterministic |= g.deterministic;
    let mut first = None;
    let outcome = train_observed(&cfg, Some(out), |s, _| {
        let initial = *first.get_or_insert(s.total);
        if s.step == 1 || s.step % 50 == 0 {
            eprintln!(
                "step {:>6} epoch {:>3}  total {:.5}  depth {:.5}  normal {:.5}  ({:.1}% of initial)",
                s.step,
                s.epoch,
                s.total,
                s.depth,
                s.normal,
                100.0 * s.total / initial
            );
        }
        Control::Continue
    })?;
    println!(
        "{} steps over {} epochs; final loss {}; checkpoints: {}",
        outcome.log.len(),
        outcome.epochs_completed,
        outcome
            .log
            .last()
            .map_or("n/a".to_string(), |s| format!("{:.5}", s.total)),
        outcome
            .checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn eval_cmd(g: &Global, checkpoint: &Path, dataset: &Path, split: Split, eye: Eye, limit: Option<usize>) -> Outcome {
    let report = evaluate_checkpoint(checkpoint, dataset, &EvalOptions { split, eye, limit })?;
    let table = report.table();
    print!("{table}");
    if let Some(note) = report.checkpoint_meta.get("decay_note").and_then(|v| v.as_str()) {
        println!("note: {note}");
    }
    if let Some(out) = &g.out {
        write_json(&out.join("eval.json"), &report)?;
        fs::write(out.join("eval.txt"), table).context("writing eval.txt")?;
    }
    Ok(())
}

fn ablate(g: &Global) -> Outcome {
    let out = require_out(g)?;
    let mut cfg: AblationConfig = load_config(g.config.as_deref())?;
    if let Some(s) = g.seed {
        cfg.generate.seed = s;
        cfg.train.seed = s;
    }
    cfg.train.deterministic |= g.deterministic;
    let report = ablation_run(&cfg, out)?;
    print!("{}", report.table());
    println!("evaluated on {} ({} frames)", report.evaluated_on, report.samples);
    Ok(())
}

fn gradcheck(g: &Global, max_coords: Option<usize>, blocks_only: bool) -> Outcome {
    let mut opts: SuiteOptions = SuiteOptions {
        check: GradCheckConfig {
            max_coords_per_input: max_coords,
            ..Default::default()
        },
        include_model: !blocks_only,
        ..Default::default()
    };
    if let Some(s) = g.seed {
        opts.seed = s;
        opts.check.seed = s;
    }
    let entries = gradient_suite(&opts)?;
    let mut text = String::new();
    let mut ok = true;
    for e in &entries {
        let r = &e.report;
        ok &= r.passed;
        let line = format!(
            "{:<24} {}  checked={} kinks={} max_rel={:.2e} max_abs={:.2e}",
            e.name,
            if r.passed { "pass" } else { "FAIL" },
            r.checked(),
            r.skipped(),
            r.max_rel_error(),
            r.max_abs_error()
        );
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
        if !r.passed {
            print!("{}", r.summary());
        }
    }
    if let Some(out) = &g.out {
        fs::create_dir_all(out).context("creating output directory")?;
        fs::write(out.join("gradcheck.txt"), text).context("writing gradcheck.txt")?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Rejected(anyhow::anyhow!("gradient check failed")))
    }
}

fn params(g: &Global, variant: Variant, scale: Scale, json: bool) -> Outcome {
    let cfg = match &g.config {
        Some(p) => load_config::<ModelConfig>(Some(p))?,
        None => match scale {
            Scale::Desk => ModelConfig::desk(variant),
            Scale::Full => ModelConfig::full(variant),
        },
    };
    cfg.validate()?;
    let total = count_parameters(&cfg);
    if json {
        println!(
            "{}",
            serde_json::to_string_pretty(&serde_json::json!({ "config": cfg, "parameters": total }))
                .context("serializing parameter report")?
        );
    } else {
        print!("{}", describe(&cfg)?);
    }
    Ok(())
}

fn augpreview(g: &Global, dataset: &Path, split: Split, index: usize, count: usize) -> Outcome {
    let out = require_out(g)?;
    let mut cfg: AugmentationConfig = load_config(g.config.as_deref())?;
    cfg.seed = g.seed.unwrap_or(cfg.seed);
    let header = omnikit::dataio::DatasetManifest::read(dataset)?.header;
    let set = SampleSet::open(dataset, split, Eye::Top, None, header.width, header.height)?;
    if index >= set.len() {
        return Err(usage(format!("index {index} outside split of {} frames", set.len())));
    }
    let augmenter = Augmenter::new(cfg)?;
    let base = set.load(index)?;
    fs::create_dir_all(out).context("creating output directory")?;
    let (w, h) = (base.width, base.height);
    let emit = |tag: &str, s: &omnikit::panosim::PanoSample| -> anyhow::Result<()> {
        write_png(&out.join(format!("{tag}_color.png")), &s.color, w, h)?;
        let normals = encode_normals(&s.normal, &s.normal_valid());
        write_png(&out.join(format!("{tag}_normal.png")), &normals, w, h)?;
        let d = normalize_depth(&s.depth, set.d_max());
        let grey: Vec<f64> = d.iter().chain(&d).chain(&d).copied().collect();
        write_png(&out.join(format!("{tag}_depth.png")), &grey, w, h)?;
        Ok(())
    };
    emit("original", &base)?;
    for k in 0..count {
        emit(&format!("aug{k:02}"), &augmenter.augment(&base, k as u64, index as u64))?;
    }
    println!("wrote {} previews of {} to {}", count + 1, base.meta.id, out.display());
    Ok(())
}

fn run(cli: Cli) -> Outcome {
    configure_threads()?;
    let g = &cli.global;
    match cli.command {
        Command::Generate {
            variant,
            paths,
            test_paths,
            frames,
            width,
            height,
            d_max,
            stereo,
        } => generate(g, variant, paths, test_paths, frames, width, height, d_max, stereo),
        Command::Validate { dataset } => validate(g, &dataset),
        Command::Train {
            dataset,
            variant,
            epochs,
            max_steps,
            limit,
            width,
            height,
        } => train_cmd(g, dataset, variant, epochs, max_steps, limit, (width, height)),
        Command::Eval {
            checkpoint,
            dataset,
            split,
            eye,
            limit,
        } => eval_cmd(g, &checkpoint, &dataset, split, eye, limit),
        Command::Ablate => ablate(g),
        Command::Gradcheck {
            max_coords,
            blocks_only,
        } => gradcheck(g, max_coords, blocks_only),
        Command::Params { variant, scale, json } => params(g, variant, scale, json),
        Command::Augpreview {
            dataset,
            split,
            index,
            count,
        } => augpreview(g, &dataset, split, index, count),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Rejected(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
