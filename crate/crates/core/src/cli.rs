//! Command-line entry points. Every command writes its outputs plus a
//! `manifest.json` into `--out-dir`.

use std::ffi::OsString;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::alignment::{align_dataset, AlignOptions, LinkSet, LinkSetRecord};
use crate::datasets::{load_dataset, make_easy_split, save_dataset, synth_generate, CountRange, SynthConfig, TrainPair};
use crate::error::{Error, Result};
use crate::eval::{evaluate, GtLinks};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::{Checkpoint, ModelDims, ProjectorStack};
use crate::training::{train_pipeline_heuristic, train_secla, train_secla_b, EpochLog, PrototypeKind, TrainConfig};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
const EXIT_CHECK_FAILED: i32 = 1;

#[derive(Parser, Debug)]
#[command(name = "facename", version, about = "Weakly supervised face-name alignment", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset with ground-truth links.
    Synth(SynthArgs),
    /// Train projectors on a dataset.
    Train(TrainArgs),
    /// Align faces to names with a trained checkpoint.
    Align(AlignArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Compare analytic loss gradients with finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub pairs: usize,
    #[arg(long, default_value_t = 20)]
    pub identities: usize,
    /// A count (`2`) or an inclusive range (`1-3`).
    #[arg(long, default_value = "1", value_parser = parse_count_range)]
    pub faces_per_pair: CountRange,
    /// Upper bound on caption names; faces beyond it lose their name.
    #[arg(long)]
    pub names_per_pair: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    pub sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noname_rate: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noface_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub d_f: usize,
    #[arg(long, default_value_t = 48)]
    pub d_n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    Secla,
    Pipeline,
    SeclaB,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum DirectionArg {
    Fn,
    Nf,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PrototypeArg {
    Random,
    Avg,
    Medoid,
    Matched,
}

impl From<PrototypeArg> for PrototypeKind {
    fn from(p: PrototypeArg) -> Self {
        match p {
            PrototypeArg::Random => PrototypeKind::RandomFace,
            PrototypeArg::Avg => PrototypeKind::AvgFace,
            PrototypeArg::Medoid => PrototypeKind::MedoidFace,
            PrototypeArg::Matched => PrototypeKind::MatchedFace,
        }
    }
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = TrainMode::Secla)]
    pub mode: TrainMode,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 15)]
    pub stage1_epochs: usize,
    #[arg(long, default_value_t = 20)]
    pub stage2_epochs: usize,
    #[arg(long, default_value_t = 0.15)]
    pub alpha: f64,
    /// Drop the agreement term (alpha = 0).
    #[arg(long)]
    pub no_agreement: bool,
    #[arg(long, value_enum, default_value_t = DirectionArg::Both)]
    pub direction: DirectionArg,
    #[arg(long, default_value_t = 3e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 20)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Width of the common space.
    #[arg(long, default_value_t = 128)]
    pub d_p: usize,
    /// Hidden widths of the common projector, e.g. `512,256`.
    #[arg(long, default_value = "512,256", value_parser = parse_widths)]
    pub hidden: [usize; 2],
    /// Give faces and names separate common projectors.
    #[arg(long)]
    pub separate_common: bool,
    #[arg(long, value_enum, default_value_t = PrototypeArg::Avg)]
    pub prototype: PrototypeArg,
    /// Do not append NONAME to captions during training.
    #[arg(long)]
    pub no_noname: bool,
    /// Add the frozen NOFACE vector to matched faces in stage 2.
    #[arg(long)]
    pub noface_matched: bool,
    /// Drop the names-to-prototypes terms from the stage-2 loss.
    #[arg(long)]
    pub no_fnp: bool,
    /// Drop the faces-to-prototypes terms from the stage-2 loss.
    #[arg(long)]
    pub no_fp: bool,
    /// Match known names with the stage-1 model throughout stage 2.
    #[arg(long)]
    pub frozen_matching: bool,
    /// Easy subset: pairs with at most this many faces ...
    #[arg(long, default_value_t = 1)]
    pub easy_faces: usize,
    /// ... and at most this many names.
    #[arg(long, default_value_t = 1)]
    pub easy_names: usize,
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Never emit NOFACE links.
    #[arg(long)]
    pub no_noface: bool,
    /// Do not offer NONAME as a candidate.
    #[arg(long)]
    pub no_noname: bool,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Score only face->name links, ignoring NONAME/NOFACE.
    #[arg(long)]
    pub real_links_only: bool,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 24)]
    pub instances: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn parse_count_range(s: &str) -> std::result::Result<CountRange, String> {
    let parse = |t: &str| t.trim().parse::<usize>().map_err(|e| format!("{t:?}: {e}"));
    match s.split_once('-') {
        Some((a, b)) => Ok(CountRange {
            min: parse(a)?,
            max: parse(b)?,
        }),
        None => Ok(CountRange::fixed(parse(s)?)),
    }
}

fn parse_widths(s: &str) -> std::result::Result<[usize; 2], String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b] = parts.as_slice() else {
        return Err(format!("expected two comma-separated widths, got {s:?}"));
    };
    let parse = |t: &str| match t.trim().parse::<usize>() {
        Ok(0) => Err("widths must be positive".to_string()),
        Ok(n) => Ok(n),
        Err(e) => Err(format!("{t:?}: {e}")),
    };
    Ok([parse(a)?, parse(b)?])
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    format_version: u32,
    seed: Option<u64>,
    config: Value,
    inputs: Vec<String>,
    outputs: Vec<String>,
    wall_clock_ms: u128,
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn prepare_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_manifest(
    dir: &Path,
    command: &str,
    seed: Option<u64>,
    config: Value,
    inputs: &[&Path],
    outputs: &[&str],
    started: Instant,
) -> Result<()> {
    let manifest = Manifest {
        command,
        format_version: MANIFEST_FORMAT_VERSION,
        seed,
        config,
        inputs: inputs.iter().map(|p| path_str(p)).collect(),
        outputs: outputs.iter().map(|o| path_str(&dir.join(o))).collect(),
        wall_clock_ms: started.elapsed().as_millis(),
    };
    write_json(&dir.join("manifest.json"), &manifest)
}

fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let started = Instant::now();
    let config = SynthConfig {
        num_identities: args.identities,
        num_pairs: args.pairs,
        faces_per_pair: args.faces_per_pair,
        max_names_per_pair: args.names_per_pair,
        sigma: args.sigma,
        noname_rate: args.noname_rate,
        noface_rate: args.noface_rate,
        d_f: args.d_f,
        d_n: args.d_n,
        seed: args.seed,
    };
    let dataset = synth_generate(&config)?;
    prepare_out_dir(&args.out_dir)?;
    save_dataset(&dataset, args.out_dir.join("dataset.jsonl"))?;
    write_manifest(
        &args.out_dir,
        "synth",
        Some(args.seed),
        serde_json::to_value(&config)?,
        &[],
        &["dataset.jsonl"],
        started,
    )?;
    println!("wrote {} pairs to {}", dataset.pairs.len(), path_str(&args.out_dir.join("dataset.jsonl")));
    Ok(())
}

/// Builds the training configuration for `args` given dataset dimensions.
pub fn train_config(args: &TrainArgs, d_f: usize, d_n: usize) -> TrainConfig {
    TrainConfig {
        dims: ModelDims {
            d_f,
            d_n,
            d_p: args.d_p,
            hidden: args.hidden,
            shared_common: !args.separate_common,
        },
        alpha: if args.no_agreement { 0.0 } else { args.alpha },
        lr: args.lr,
        batch_size: args.batch_size,
        epochs: args.epochs,
        stage1_epochs: args.stage1_epochs,
        stage2_epochs: args.stage2_epochs,
        seed: args.seed,
        prototype: args.prototype.into(),
        add_noname: !args.no_noname,
        add_noface_to_matched: args.noface_matched,
        use_fn: args.direction != DirectionArg::Nf,
        use_nf: args.direction != DirectionArg::Fn,
        stage2_use_fnp: !args.no_fnp,
        stage2_use_fp: !args.no_fp,
        frozen_matching: args.frozen_matching,
    }
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let dataset = load_dataset(&args.dataset)?;
    let cfg = train_config(args, dataset.header.d_f, dataset.header.d_n);
    let noname = &dataset.header.noname_embedding;
    let (stack, log): (ProjectorStack, Vec<EpochLog>) = match args.mode {
        TrainMode::Secla => {
            let out = train_secla(&dataset.train_pairs(), noname, &cfg)?;
            (out.stack, out.log)
        }
        TrainMode::Pipeline | TrainMode::SeclaB => {
            // the split looks at face/name counts only, never at ground truth
            let split = make_easy_split(&dataset.pairs, args.easy_faces, args.easy_names, false);
            let easy: Vec<TrainPair> = split.easy.iter().map(|p| p.to_train_pair()).collect();
            let out = if args.mode == TrainMode::Pipeline {
                let rest: Vec<TrainPair> = split.rest.iter().map(|p| p.to_train_pair()).collect();
                train_pipeline_heuristic(&easy, &rest, &split.n_unique, noname, &cfg)?
            } else {
                train_secla_b(&dataset.train_pairs(), &easy, noname, &cfg)?
            };
            (out.stack, out.log)
        }
    };
    let config = json!({ "mode": args.mode, "train": cfg });
    prepare_out_dir(&args.out_dir)?;
    write_json(&args.out_dir.join("checkpoint.json"), &stack.to_checkpoint(config.clone()))?;
    write_jsonl(&args.out_dir.join("train_log.jsonl"), &log)?;
    write_manifest(
        &args.out_dir,
        "train",
        Some(args.seed),
        config,
        &[&args.dataset],
        &["checkpoint.json", "train_log.jsonl"],
        started,
    )?;
    if let Some(last) = log.last() {
        println!(
            "trained {} epochs; final loss {:.6} (fn {:.6}, nf {:.6}, agree {:.6}, stage2 {:.6})",
            log.len(),
            last.total,
            last.l_fn,
            last.l_nf,
            last.l_agree,
            last.l_stage2
        );
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ProjectorStack> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(fs::File::open(path)?))?;
    ProjectorStack::from_checkpoint(&ckpt)
}

fn cmd_align(args: &AlignArgs) -> Result<()> {
    let started = Instant::now();
    let stack = load_checkpoint(&args.checkpoint)?;
    let dataset = load_dataset(&args.dataset)?;
    let options = AlignOptions {
        enable_noface: !args.no_noface,
        add_noname: !args.no_noname,
    };
    let predictions = align_dataset(&stack, &dataset, &options)?;
    prepare_out_dir(&args.out_dir)?;
    write_jsonl(
        &args.out_dir.join("predictions.jsonl"),
        predictions.iter().map(LinkSetRecord::from),
    )?;
    write_manifest(
        &args.out_dir,
        "align",
        None,
        json!({ "enable_noface": options.enable_noface, "add_noname": options.add_noname }),
        &[&args.checkpoint, &args.dataset],
        &["predictions.jsonl"],
        started,
    )?;
    println!("aligned {} pairs", predictions.len());
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<LinkSet>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: LinkSetRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(LinkSet::try_from(&record).map_err(|message| Error::Parse { line: i + 1, message })?);
    }
    Ok(out)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let predictions = read_predictions(&args.predictions)?;
    let dataset = load_dataset(&args.dataset)?;
    let mut gt = Vec::with_capacity(dataset.pairs.len());
    for p in &dataset.pairs {
        let links = p
            .gt_links
            .as_deref()
            .ok_or_else(|| Error::Validation(format!("pair {} has no ground-truth links", p.pair_id)))?;
        gt.push(GtLinks {
            pair_id: &p.pair_id,
            links,
        });
    }
    let include_null = !args.real_links_only;
    let echo = json!({ "include_null": include_null });
    let report = evaluate(&predictions, &gt, include_null, echo.clone())?;
    prepare_out_dir(&args.out_dir)?;
    write_json(&args.out_dir.join("metrics.json"), &report)?;
    write_manifest(
        &args.out_dir,
        "eval",
        None,
        echo,
        &[&args.predictions, &args.dataset],
        &["metrics.json"],
        started,
    )?;
    println!(
        "precision {:.4}  recall {:.4}  f1 {:.4}  accuracy {:.4}  (correct {}, found {}, gt {})",
        report.precision,
        report.recall,
        report.f1,
        report.accuracy,
        report.counts.correct,
        report.counts.found,
        report.counts.gt
    );
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<bool> {
    let started = Instant::now();
    let config = GradcheckConfig {
        instances: args.instances,
        tolerance: args.tolerance,
        step: args.step,
        seed: args.seed,
        inject_fault: args.inject_fault,
        ..Default::default()
    };
    let report = run_gradcheck(&config)?;
    for c in &report.checks {
        println!(
            "instance {:>3} {:<6} params {:>4}  max rel error {:.3e}",
            c.instance, c.objective, c.params, c.max_rel_error
        );
    }
    if !report.skipped.is_empty() {
        println!("skipped {} instances with a kink inside the step: {:?}", report.skipped.len(), report.skipped);
    }
    println!(
        "{}: max relative error {:.3e} (tolerance {:.1e})",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_rel_error,
        report.tolerance
    );
    if let Some(dir) = &args.out_dir {
        prepare_out_dir(dir)?;
        write_json(&dir.join("gradcheck.json"), &report)?;
        write_manifest(
            dir,
            "gradcheck",
            Some(args.seed),
            serde_json::to_value(&config)?,
            &[],
            &["gradcheck.json"],
            started,
        )?;
    }
    Ok(report.passed)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numeric(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Runs a parsed command and maps the outcome to an exit code.
pub fn execute(cli: &Cli) -> i32 {
    let outcome = match &cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Align(a) => cmd_align(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match outcome {
        Ok(true) => EXIT_OK,
        Ok(false) => EXIT_CHECK_FAILED,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli),
        Err(e) => {
            let _ = e.print();
            e.exit_code()
        }
    }
}
