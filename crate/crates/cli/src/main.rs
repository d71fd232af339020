//! `siamtpn` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric error or
//! failed self-test.

mod source;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use siamtpn_core::backbone::synthetic_pyramid;
use siamtpn_core::bench::{benchmark, default_paired_configs, flops_report, paired_tpn, MIN_REPS};
use siamtpn_core::config::Settings;
use siamtpn_core::eval::{eval_parallel, one_pass_eval, EvalReport};
use siamtpn_core::image::{crop_and_resize, write_pgm, write_ppm};
use siamtpn_core::model::{Model, ModelConfig};
use siamtpn_core::optim::AdamWConfig;
use siamtpn_core::selftest::suite::{full_suite, quick_suite};
use siamtpn_core::serialize::{save_weights, WeightsFile};
use siamtpn_core::synth::{synth_sequence, SequenceSpec};
use siamtpn_core::tracker::{SiamTracker, Tracker};
use siamtpn_core::train::{make_pair, overfit_pair, sample_pairs, train_pairs, TOY_PEAK_LR};
use siamtpn_core::WeightsError;

use source::{parse_key_value, parse_suite, thread_cap, Source};

/// Bad invocation detected after argument parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser, Debug)]
#[command(
    name = "siamtpn",
    version,
    about = "Siamese pyramid-attention tracker: tracking, evaluation and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model settings. Flags override `--set`, which overrides the config file.
#[derive(Args, Debug, Default, Clone)]
struct ModelArgs {
    /// Flat `key = value` configuration file
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    set: Vec<(String, String)>,
    /// Backbone preset: alex, mobile, shuffle or toy
    #[arg(long)]
    backbone: Option<String>,
    /// Neck kind
    #[arg(long)]
    neck: Option<String>,
    /// Neck channel width C
    #[arg(long)]
    channels: Option<usize>,
    /// Attention heads N
    #[arg(long)]
    heads: Option<usize>,
    /// Fusion blocks B
    #[arg(long)]
    blocks: Option<usize>,
    /// Lateral pooling ratios for P3,P4,P5, e.g. 4,2,1
    #[arg(long, value_name = "R3,R4,R5")]
    r_cross: Option<String>,
    /// Key/value pooling ratio of the self-attention blocks
    #[arg(long)]
    r_self: Option<usize>,
    /// Key/value pooling operator (avg or max)
    #[arg(long)]
    pool: Option<String>,
    /// Parameter initialization seed
    #[arg(long = "model-seed", value_name = "SEED")]
    model_seed: Option<u64>,
}

impl ModelArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = self.set.clone();
        let flags = [
            ("backbone", self.backbone.clone()),
            ("neck", self.neck.clone()),
            ("channels", self.channels.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("blocks", self.blocks.map(|v| v.to_string())),
            ("r_cross", self.r_cross.clone()),
            ("r_self", self.r_self.map(|v| v.to_string())),
            ("pool", self.pool.clone()),
            ("seed", self.model_seed.map(|v| v.to_string())),
        ];
        out.extend(
            flags
                .into_iter()
                .filter_map(|(k, v)| v.map(|v| (k.to_string(), v))),
        );
        out
    }

    fn settings(&self) -> Result<Settings> {
        source::settings(self.config.as_deref(), &self.overrides())
    }

    fn model_config(&self, base: &ModelConfig) -> Result<ModelConfig> {
        Ok(self.settings()?.model_config(base)?)
    }

    /// A model from `weights` when given, else freshly initialized. Settings
    /// given on the command line are layered over the file's own; a change
    /// to the architecture makes loading fail.
    fn build(&self, weights: Option<&Path>) -> Result<Model> {
        let Some(path) = weights else {
            return Ok(Model::new(self.model_config(&ModelConfig::default())?)?);
        };
        let file =
            WeightsFile::read(path).with_context(|| format!("loading {}", path.display()))?;
        let mut settings = file.config.clone();
        settings.merge(&self.settings()?);
        let mut model = Model::new(settings.model_config(&ModelConfig::default())?)?;
        file.apply(&mut model)
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(model)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Track one sequence and write a JSON report
    Track {
        /// Sequence directory (PPM frames plus groundtruth.txt)
        #[arg(required_unless_present = "synthetic", conflicts_with = "synthetic")]
        sequence: Option<PathBuf>,
        /// Generated sequence: `easy:FRAMES:TEXTURE_SEED:SEED` or a JSON spec file
        #[arg(long, value_name = "SPEC")]
        synthetic: Option<String>,
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Also write the success curve as CSV
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// One-pass evaluation over a suite of sequences
    Eval {
        /// File with one sequence per line, or a comma-separated list
        #[arg(long, value_name = "SUITE")]
        suite: String,
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Write all reports as one JSON document
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
        /// Directory for per-sequence success curves (CSV)
        #[arg(long, value_name = "DIR")]
        csv: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Latency benchmark, or a paired neck comparison
    Bench {
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 3)]
        warmup: usize,
        /// Seeds the synthetic input
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Compare the necks of two config files on one shared input
        #[arg(long, num_args = 2, value_names = ["CFG_A", "CFG_B"], conflicts_with = "paired_default")]
        paired: Option<Vec<PathBuf>>,
        /// Compare R=(4,2,1) with R=(1,1,1) at the default width
        #[arg(long)]
        paired_default: bool,
        #[arg(long, value_name = "FILE")]
        json: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Train the toy model on synthetic pairs and save its weights
    TrainToy {
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Training pairs; 1 repeats a single unjittered pair
        #[arg(long, default_value_t = 1)]
        pairs: usize,
        /// Peak learning rate of the cosine schedule
        #[arg(long, default_value_t = TOY_PEAK_LR)]
        lr: f64,
        /// Write the per-step losses as JSON
        #[arg(long, value_name = "FILE")]
        log: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Analytic and counted multiply-adds per stage
    Flops {
        #[arg(long)]
        json: bool,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Write the lateral attention maps for one frame as PGM images
    AttnExport {
        #[arg(long, value_name = "FILE")]
        weights: Option<PathBuf>,
        /// Sequence directory, `easy:F:T:S`, or a JSON spec file
        #[arg(long, value_name = "SRC")]
        sequence: String,
        /// Frame to export; frames before it are tracked normally
        #[arg(long, value_name = "K")]
        frame: usize,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Run the property suite
    Selftest {
        /// Include training and benchmark checks (minutes)
        #[arg(long)]
        full: bool,
    },
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn partial_error(reports: &[EvalReport]) -> Result<()> {
    if let Some(r) = reports.iter().find(|r| r.is_partial()) {
        bail!(
            "tracking stopped early on `{}` ({}); partial report written",
            r.sequence,
            r.failure.as_deref().unwrap_or("")
        );
    }
    Ok(())
}

fn track(
    sequence: Option<PathBuf>,
    synthetic: Option<String>,
    weights: Option<PathBuf>,
    out: PathBuf,
    csv: Option<PathBuf>,
    model: ModelArgs,
) -> Result<()> {
    let src = match (sequence, synthetic) {
        (_, Some(spec)) => Source::parse(&spec)?,
        (Some(dir), None) => Source::Dir(dir),
        (None, None) => return Err(usage("give a sequence directory or --synthetic")),
    };
    let seq = src.load()?;
    let model = model.build(weights.as_deref())?;
    let mut tracker = SiamTracker::new(&model)?;
    let report = one_pass_eval(&mut tracker, &seq)?;
    write_json(&out, &report)?;
    if let Some(csv) = csv {
        fs::write(&csv, report.curve_csv())
            .with_context(|| format!("writing {}", csv.display()))?;
    }
    print!(
        "{}",
        EvalReport::summary_table(std::slice::from_ref(&report))
    );
    partial_error(std::slice::from_ref(&report))
}

fn eval(
    suite: String,
    weights: Option<PathBuf>,
    out: Option<PathBuf>,
    csv: Option<PathBuf>,
    model: ModelArgs,
) -> Result<()> {
    let sources = parse_suite(&suite)?;
    let threads = thread_cap()?;
    let model = model.build(weights.as_deref())?;
    let seqs = sources
        .iter()
        .map(Source::load)
        .collect::<Result<Vec<_>>>()?;
    let reports = eval_parallel(&seqs, threads, || SiamTracker::new(&model))
        .into_iter()
        .collect::<siamtpn_core::Result<Vec<_>>>()?;

    let n = reports.len() as f64;
    let mean_auc = reports.iter().map(|r| r.auc).sum::<f64>() / n;
    let mean_precision = reports.iter().map(|r| r.precision_20px).sum::<f64>() / n;
    print!("{}", EvalReport::summary_table(&reports));
    println!("mean AUC {mean_auc:.4}, mean precision@20 {mean_precision:.4} over {} sequences ({threads} workers)", reports.len());
    if let Some(out) = out {
        write_json(
            &out,
            &json!({
                "sequences": reports,
                "mean_auc": mean_auc,
                "mean_precision_20px": mean_precision,
            }),
        )?;
    }
    if let Some(dir) = csv {
        fs::create_dir_all(&dir)?;
        for (i, r) in reports.iter().enumerate() {
            let path = dir.join(format!("{i:03}-{}.csv", r.sequence));
            fs::write(&path, r.curve_csv())
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    partial_error(&reports)
}

fn bench(
    reps: usize,
    warmup: usize,
    seed: u64,
    paired: Option<Vec<PathBuf>>,
    paired_default: bool,
    json: Option<PathBuf>,
    model: ModelArgs,
) -> Result<()> {
    if reps < MIN_REPS {
        return Err(usage(format!("--reps must be at least {MIN_REPS}")));
    }
    if paired_default || paired.is_some() {
        let (a, b, pyramid) = match paired {
            Some(files) => {
                let load = |p: &Path| -> Result<ModelConfig> {
                    let args = ModelArgs {
                        config: Some(p.to_path_buf()),
                        ..model.clone()
                    };
                    args.model_config(&ModelConfig::default())
                };
                let (ca, cb) = (load(&files[0])?, load(&files[1])?);
                if ca.backbone.channels != cb.backbone.channels
                    || ca.search_shapes() != cb.search_shapes()
                {
                    bail!("paired configs must share backbone widths and search resolution to read the same input");
                }
                let pyramid = synthetic_pyramid(seed, ca.search_shapes(), ca.backbone.channels);
                (ca.neck, cb.neck, pyramid)
            }
            None => default_paired_configs(),
        };
        let report = paired_tpn(&a, &b, &pyramid, reps, seed)?;
        print!("{}", report.table());
        if let Some(path) = json {
            write_json(&path, &report)?;
        }
        return Ok(());
    }
    let model = model.build(None)?;
    let report = benchmark(&model, warmup, reps, seed)?;
    print!("{}", report.table());
    if let Some(path) = json {
        write_json(&path, &report)?;
    }
    Ok(())
}

fn train_toy(
    steps: usize,
    seed: u64,
    out: PathBuf,
    pairs: usize,
    lr: f64,
    log: Option<PathBuf>,
    model: ModelArgs,
) -> Result<()> {
    if pairs == 0 {
        return Err(usage("--pairs must be at least 1"));
    }
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(usage("--lr must be positive"));
    }
    let mut base = ModelConfig::toy(32, 2, 1);
    base.seed = seed;
    let cfg = model.model_config(&base)?;
    let mut net = Model::new(cfg.clone())?;
    let opt = AdamWConfig {
        lr,
        ..Default::default()
    };
    let report = if pairs == 1 {
        let seq = synth_sequence(&SequenceSpec::easy(2, 7, seed))?;
        let pair = make_pair(
            &cfg,
            &seq.frames[0],
            &seq.gt[0],
            &seq.frames[1],
            &seq.gt[1],
            None,
        )?;
        overfit_pair(&mut net, &pair, steps, opt)?
    } else {
        let seq = synth_sequence(&SequenceSpec::easy(60, 7, 100 + seed))?;
        let set = sample_pairs(&cfg, &seq, pairs, 10, seed)?;
        train_pairs(&mut net, &set, steps, opt, seed)?
    };
    let every = (report.losses.len() / 10).max(1);
    for (t, s) in report.losses.iter().enumerate() {
        if t % every == 0 || t + 1 == report.losses.len() {
            println!(
                "step {t:>5}  loss {:.4}  cls {:.4}  giou {:.4}  l1 {:.4}",
                s.total, s.cls, s.giou, s.l1
            );
        }
    }
    println!("final IoU {:.3}", report.final_iou);
    save_weights(&out, &net).with_context(|| format!("writing {}", out.display()))?;
    if let Some(path) = log {
        write_json(&path, &report)?;
    }
    Ok(())
}

fn flops(json: bool, model: ModelArgs) -> Result<()> {
    let cfg = model.model_config(&ModelConfig::default())?;
    let report = flops_report(&cfg)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    if !report.all_match() {
        return Err(siamtpn_core::Error::InvalidArgument(
            "counted multiply-adds differ from the analytic model".into(),
        ))
        .context("flops");
    }
    Ok(())
}

fn attn_export(
    weights: Option<PathBuf>,
    sequence: String,
    frame: usize,
    out: PathBuf,
    model: ModelArgs,
) -> Result<()> {
    let seq = Source::parse(&sequence)?.load()?;
    if frame == 0 || frame >= seq.len() {
        return Err(usage(format!(
            "--frame must be in 1..{} for this sequence",
            seq.len()
        )));
    }
    let model = model.build(weights.as_deref())?;
    let mut tracker = SiamTracker::new(&model)?;
    tracker.init(&seq.frames[0], seq.gt[0])?;
    for f in &seq.frames[1..frame] {
        tracker.update(f)?;
    }
    let target = &seq.frames[frame];
    let maps = tracker.export_attention(target)?;
    let crop = crop_and_resize(target, &tracker.search_geometry()?)?;
    fs::create_dir_all(&out)?;
    for (name, map) in ["p3", "p4", "p5"].iter().zip(&maps) {
        write_pgm(&out.join(format!("{name}.pgm")), map)?;
    }
    write_ppm(&out.join("crop.ppm"), &crop)?;
    println!(
        "wrote p3/p4/p5 attention maps ({}) and the search crop to {}",
        maps.iter()
            .map(|m| format!("{}x{}", m.shape()[0], m.shape()[1]))
            .collect::<Vec<_>>()
            .join(", "),
        out.display()
    );
    Ok(())
}

fn selftest(full: bool) -> Result<bool> {
    let checks = if full { full_suite() } else { quick_suite() };
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} of {} checks passed",
        checks.len() - failed,
        checks.len()
    );
    Ok(failed == 0)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Track {
            sequence,
            synthetic,
            weights,
            out,
            csv,
            model,
        } => track(sequence, synthetic, weights, out, csv, model)?,
        Command::Eval {
            suite,
            weights,
            out,
            csv,
            model,
        } => eval(suite, weights, out, csv, model)?,
        Command::Bench {
            reps,
            warmup,
            seed,
            paired,
            paired_default,
            json,
            model,
        } => bench(reps, warmup, seed, paired, paired_default, json, model)?,
        Command::TrainToy {
            steps,
            seed,
            out,
            pairs,
            lr,
            log,
            model,
        } => train_toy(steps, seed, out, pairs, lr, log, model)?,
        Command::Flops { json, model } => flops(json, model)?,
        Command::AttnExport {
            weights,
            sequence,
            frame,
            out,
            model,
        } => attn_export(weights, sequence, frame, out, model)?,
        Command::Selftest { full } => {
            if !selftest(full)? {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn weights_code(err: &anyhow::Error) -> Option<u32> {
    err.chain().find_map(|c| {
        c.downcast_ref::<WeightsError>()
            .map(WeightsError::code)
            .or_else(|| match c.downcast_ref() {
                Some(siamtpn_core::Error::Weights(w)) => Some(w.code()),
                _ => None,
            })
    })
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|c| c.is::<UsageError>()) {
        return 1;
    }
    let numeric = err
        .chain()
        .filter_map(|c| c.downcast_ref::<siamtpn_core::Error>())
        .any(siamtpn_core::Error::is_numeric);
    if numeric {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            match weights_code(&e) {
                Some(code) => eprintln!("error: {e:#} (weights error {code})"),
                None => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
