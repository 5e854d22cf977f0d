//! `mvad`: dataset generation, training, evaluation, heatmaps and benchmarks.
//!
//! Exit codes: 0 success, 2 validation, 3 IO, 4 numerical failure,
//! 5 compatibility.

mod config;
mod image;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use mvad::bench::{self, SweepConfig, WindowPolicy};
use mvad::pipeline::{
    evaluate, load_checkpoint, reconstruct, sample_maps, save_checkpoint, train, FeatureBank, MvadModel, RunConfig,
    CHECKPOINT_MANIFEST,
};
use mvad::synthdata::{generate, load_sample_dir, AnomalyKind, Dataset, DatasetSpec, GenerateOutcome, Split};
use mvad::Error;
use serde_json::json;

use config::{apply, env_seed, parse_assignment, read_settings, split_settings, Paths};

#[derive(Parser)]
#[command(name = "mvad", version, about = "Multi-view anomaly detection with adaptive-selection attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-view dataset.
    Generate(GenerateArgs),
    /// Train a student on a dataset's training split.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset's test split.
    Eval(EvalArgs),
    /// Export anomaly-map triptychs of one sample.
    Heatmap(HeatmapArgs),
    /// FLOP sweeps, wall-time scaling and ablation grids.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset spec file (key=value or JSON).
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    p_train: Option<usize>,
    #[arg(long)]
    p_test_normal: Option<usize>,
    #[arg(long)]
    p_test_anom: Option<usize>,
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    resolution: Option<usize>,
    /// Comma-separated anomaly kinds (blob, scratch, hole).
    #[arg(long, value_delimiter = ',')]
    kinds: Option<Vec<String>>,
    #[arg(long)]
    views_affected: Option<usize>,
    /// Also write PNG previews under `<out>/png`.
    #[arg(long)]
    png: bool,
}

/// Run settings shared by commands that build a run config.
#[derive(Args)]
struct RunArgs {
    /// Config file (key=value or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk or paper-scale.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Extra dotted settings, e.g. `--set train.lr=0.001`.
    #[arg(long = "set", value_parser = parse_assignment)]
    sets: Vec<(String, String)>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for checkpoint, config and loss trace.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_samples: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory, or a training output directory containing one.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory for the report and score dump.
    #[arg(long)]
    out: PathBuf,
    /// Evaluation overrides, e.g. `--set eval.pro_fpr_limit=0.3`.
    #[arg(long = "set", value_parser = parse_assignment)]
    sets: Vec<(String, String)>,
}

#[derive(Args)]
struct HeatmapArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// One sample directory of a dataset (`<root>/<split>/<index>`).
    #[arg(long)]
    sample: PathBuf,
    /// Dataset root; defaults to the sample's grandparent directory.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// FLOP-model rows only, no timing.
    #[arg(long)]
    flops_only: bool,
    /// Token counts per view; each a perfect square.
    #[arg(long, num_args = 1.., default_values_t = [256usize, 1024, 4096, 16384])]
    hw: Vec<usize>,
    #[arg(long, default_value_t = 32)]
    c: usize,
    #[arg(long, default_value_t = 5)]
    v: usize,
    #[arg(long, default_value_t = 16)]
    k: usize,
    /// Window count per side, or `optimal` for the per-size optimum.
    #[arg(long, default_value = "optimal")]
    a: String,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    warmup: usize,
    /// CSV path; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Train and evaluate one model per (a, k) instead of sweeping.
    #[arg(long)]
    ablation: bool,
    /// Dataset for `--ablation`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, num_args = 1.., default_values_t = [2usize, 4])]
    a_values: Vec<usize>,
    #[arg(long, num_args = 1.., default_values_t = [4usize, 8, 16])]
    k_values: Vec<usize>,
    #[command(flatten)]
    run: RunArgs,
}

fn validation(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(path, contents).map_err(io_err(path))?;
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))?;
    Ok(())
}

fn cmd_generate(args: GenerateArgs) -> Result<()> {
    let mut settings = match &args.spec {
        Some(p) => read_settings(p)?,
        None => Vec::new(),
    };
    let (_, paths, rest) = split_settings(std::mem::take(&mut settings));
    let mut spec: DatasetSpec = apply(&DatasetSpec::default(), &rest)?;
    if let Some(s) = env_seed()? {
        spec.seed = s;
    }
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    macro_rules! flag {
        ($($f:ident),*) => { $(if let Some(v) = args.$f { spec.$f = v; })* };
    }
    flag!(p_train, p_test_normal, p_test_anom, views, resolution, views_affected);
    if let Some(kinds) = &args.kinds {
        spec.kinds = kinds.iter().map(|k| k.trim().parse::<AnomalyKind>()).collect::<Result<_, _>>()?;
    }
    let out = args.out.or(paths.out).ok_or_else(|| validation("generate needs --out"))?;
    let (manifest, outcome) = generate(&spec, &out)?;
    let anom = manifest.test.iter().filter(|r| r.label).count();
    println!(
        "dataset {}: {} train samples ({} images), {} test samples ({} normal, {} anomalous), {} views at {}x{}, seed {}{}",
        out.display(),
        manifest.train.len(),
        manifest.train.len() * spec.views,
        manifest.test.len(),
        manifest.test.len() - anom,
        anom,
        spec.views,
        spec.resolution,
        spec.resolution,
        spec.seed,
        if outcome == GenerateOutcome::Unchanged { " (unchanged)" } else { "" }
    );
    if args.png {
        export_pngs(&out)?;
    }
    Ok(())
}

fn export_pngs(root: &Path) -> Result<()> {
    let ds = Dataset::open(root)?;
    let spec_json = serde_json::to_string(ds.spec())?;
    let res = ds.spec().resolution;
    for split in [Split::Train, Split::Test] {
        for i in 0..ds.len(split) {
            let s = ds.load_sample(split, i)?;
            let dir = root.join("png").join(split.name()).join(format!("{i:05}"));
            create_dir(&dir)?;
            let text = [("mvad_dataset_spec", spec_json.clone()), ("seed", ds.spec().seed.to_string())];
            for j in 0..ds.spec().views {
                let planes = &s.images.data()[j * 3 * res * res..(j + 1) * 3 * res * res];
                let mask = &s.masks.data()[j * res * res..(j + 1) * res * res];
                image::write_png(&dir.join(format!("{j}.png")), &image::planar_to_rgb(planes, res, res), &text)?;
                image::write_png(&dir.join(format!("{j}.mask.png")), &image::mask_to_rgb(mask, res, res), &text)?;
            }
        }
    }
    Ok(())
}

/// Preset, then file, then `MVAS_SEED`, then `--seed`, then `--set`.
fn build_run(args: &RunArgs) -> Result<(RunConfig, Paths)> {
    let settings = match &args.config {
        Some(p) => read_settings(p)?,
        None => Vec::new(),
    };
    let (file_preset, paths, rest) = split_settings(settings);
    let preset = args.preset.clone().or(file_preset).unwrap_or_else(|| "desk".into());
    let mut run = apply(&RunConfig::preset(&preset)?, &rest)?;
    if let Some(s) = env_seed()? {
        run.seed = s;
    }
    if let Some(s) = args.seed {
        run.seed = s;
    }
    let run = apply(&run, &args.sets)?;
    Ok((run, paths))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (mut run, paths) = build_run(&args.run)?;
    if let Some(e) = args.epochs {
        run.train.epochs = e;
    }
    if let Some(lr) = args.lr {
        run.train.lr = lr;
    }
    if let Some(p) = args.batch_samples {
        run.train.batch_samples = p;
    }
    run.validate()?;
    let data = args.data.or(paths.dataset).ok_or_else(|| validation("train needs --data"))?;
    let out = args.out.or(paths.out).ok_or_else(|| validation("train needs --out"))?;
    let ds = Dataset::open(&data)?;
    let spec = ds.spec();
    if spec.views != run.model.views || spec.resolution != run.model.resolution {
        return Err(Error::Compatibility(format!(
            "config expects {} views at {}, dataset has {} views at {}",
            run.model.views, run.model.resolution, spec.views, spec.resolution
        ))
        .into());
    }
    create_dir(&out)?;
    let run_json = run.to_json();
    write_file(
        &out.join("run_config.json"),
        serde_json::to_string_pretty(&json!({
            "run": run,
            "config_hash": run.hash(),
            "seed": run.seed,
            "dataset": data,
            "dataset_spec": spec,
        }))? + "\n",
    )?;

    let start = Instant::now();
    let mut model = MvadModel::<f32>::new(run.model.clone(), run.seed)?;
    let bank = FeatureBank::build(&model.teacher, &ds.load_split(Split::Train)?, 8)?;
    let mut epoch_loss = (0usize, 0.0f64);
    let report = train(&mut model, &bank, &run.train, run.seed, |s| {
        if s.epoch != epoch_loss.0 {
            eprintln!("epoch {} mean loss {:.6}", epoch_loss.0 + 1, epoch_loss.1);
            epoch_loss = (s.epoch, 0.0);
        }
        let steps = bank.samples().div_ceil(run.train.batch_samples) as f64;
        epoch_loss.1 += s.loss / steps;
    });
    let report = report?;
    eprintln!("epoch {} mean loss {:.6}", epoch_loss.0 + 1, epoch_loss.1);

    let mut trace = format!("# run_config={run_json}\nepoch,step,loss\n");
    for s in &report.loss_trace {
        trace += &format!("{},{},{}\n", s.epoch, s.step, s.loss);
    }
    write_file(&out.join("loss_trace.csv"), trace)?;
    save_checkpoint(&out.join("checkpoint"), &model, &run)?;
    println!(
        "trained {} steps in {:.1}s; checkpoint {}",
        report.loss_trace.len(),
        start.elapsed().as_secs_f64(),
        out.join("checkpoint").display()
    );
    Ok(())
}

fn checkpoint_dir(p: &Path) -> PathBuf {
    if p.join(CHECKPOINT_MANIFEST).exists() {
        p.to_path_buf()
    } else {
        p.join("checkpoint")
    }
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    if let Some((k, _)) = args.sets.iter().find(|(k, _)| !k.starts_with("eval.")) {
        return Err(validation(format!("eval only accepts eval.* settings, got {k:?}")));
    }
    let (model, run) = load_checkpoint::<f32>(&checkpoint_dir(&args.checkpoint))?;
    let run = apply(&run, &args.sets)?;
    let ds = Dataset::open(&args.data)?;
    let result = evaluate(&model, &ds, &run)?;
    create_dir(&args.out)?;
    write_file(&args.out.join("report.json"), result.report.to_json())?;
    write_file(
        &args.out.join("scores.csv"),
        format!("# run_config={}\n{}", run.to_json(), result.score_csv()),
    )?;
    for level in ["sample", "image", "pixel"] {
        let names: &[&str] = if level == "pixel" { &["auroc", "ap", "f1max", "pro"] } else { &["auroc", "ap", "f1max"] };
        let cells: Vec<String> = names
            .iter()
            .map(|n| match result.report.get(&format!("{level}.{n}")) {
                Some(v) => format!("{n} {v:.4}"),
                None => format!("{n} null"),
            })
            .collect();
        println!("{level:<6} {}", cells.join("  "));
    }
    for (k, reason) in &result.report.undefined {
        eprintln!("{k} undefined: {reason}");
    }
    Ok(())
}

/// Split and index from a `<root>/<split>/<index>` sample directory.
fn locate_sample(dir: &Path) -> Result<(Split, usize)> {
    let index = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse::<usize>().ok())
        .ok_or_else(|| validation(format!("{} is not a sample directory", dir.display())))?;
    let split = match dir.parent().and_then(|p| p.file_name()).and_then(|n| n.to_str()) {
        Some("train") => Split::Train,
        Some("test") => Split::Test,
        _ => return Err(validation(format!("{} is not under a train/ or test/ directory", dir.display()))),
    };
    Ok((split, index))
}

fn cmd_heatmap(args: HeatmapArgs) -> Result<()> {
    let (model, run) = load_checkpoint::<f32>(&checkpoint_dir(&args.checkpoint))?;
    let (split, index) = locate_sample(&args.sample)?;
    let root = match args.data {
        Some(r) => r,
        None => args
            .sample
            .parent()
            .and_then(Path::parent)
            .map(Path::to_path_buf)
            .ok_or_else(|| validation("cannot infer the dataset root; pass --data"))?,
    };
    let ds = Dataset::open(&root)?;
    mvad::pipeline::check_compatible(&model, ds.spec())?;
    let rec = ds
        .manifest()
        .records(split)
        .iter()
        .find(|r| r.index == index)
        .ok_or_else(|| validation(format!("sample {index} is not in the {} split", split.name())))?;
    let sample = load_sample_dir(&args.sample, ds.spec(), rec)?;
    let maps = sample_maps(&model, std::slice::from_ref(&sample), run.eval.smoothing_sigma, &mut |f| {
        reconstruct(&model, f)
    })?;
    let res = ds.spec().resolution;
    create_dir(&args.out)?;
    let text = [
        ("mvad_run_config", run.to_json()),
        ("seed", run.seed.to_string()),
        ("sample", format!("{}/{index:05}", split.name())),
    ];
    let plane = res * res;
    for j in 0..ds.spec().views {
        let img = image::triptych(
            &sample.images.data()[j * 3 * plane..(j + 1) * 3 * plane],
            &maps.data()[j * plane..(j + 1) * plane],
            &sample.masks.data()[j * plane..(j + 1) * plane],
            res,
            res,
        );
        image::write_png(&args.out.join(format!("view{j}.png")), &img, &text)?;
    }
    println!("wrote {} heatmaps to {}", ds.spec().views, args.out.display());
    Ok(())
}

fn emit(out: &Option<PathBuf>, csv: &str) -> Result<()> {
    match out {
        Some(p) => write_file(p, csv),
        None => {
            std::io::stdout().write_all(csv.as_bytes()).context("writing to stdout")?;
            Ok(())
        }
    }
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let seed = match (args.run.seed, env_seed()?) {
        (Some(s), _) | (None, Some(s)) => s,
        (None, None) => 0,
    };
    if args.ablation {
        let (run, paths) = build_run(&args.run)?;
        let data = args.data.or(paths.dataset).ok_or_else(|| validation("--ablation needs --data"))?;
        let ds = Dataset::open(&data)?;
        let cells = bench::ablation_grid(&ds, &run, &args.a_values, &args.k_values, |c| match &c.skipped {
            Some(r) => eprintln!("a={} k={} skipped: {r}", c.a, c.k),
            None => eprintln!("a={} k={} done", c.a, c.k),
        })?;
        let header = json!({"run": run, "seed": run.seed, "dataset": data, "a_values": args.a_values, "k_values": args.k_values});
        return emit(&args.out, &bench::ablation_csv(&cells, &header.to_string()));
    }
    let a = match args.a.as_str() {
        "optimal" => WindowPolicy::Optimal,
        s => WindowPolicy::Fixed(s.parse().map_err(|_| validation(format!("--a must be a number or optimal, got {s:?}")))?),
    };
    let cfg = SweepConfig {
        hw: args.hw,
        c: args.c,
        v: args.v,
        k: args.k,
        a,
        repeats: args.repeats,
        warmup: args.warmup,
        seed,
    };
    let (table, mode) = if args.flops_only {
        (bench::dry_run(&cfg)?, "flops-only")
    } else {
        let t = bench::time_sweep(&cfg, |r| {
            eprintln!("{} hw={} a={} median {:.0} ns", r.series.name(), r.hw, r.a, r.median_ns.unwrap_or(f64::NAN))
        })?;
        (t, "timed")
    };
    let header = json!({
        "sweep": cfg,
        "seed": seed,
        "mode": mode,
        "threads": 1,
        "assumes": "quiescent machine",
    });
    emit(&args.out, &table.to_csv(&header.to_string()))
}

/// Stable exit code of an error chain.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::Geometry(_) => 2,
                Error::Io { .. } | Error::Format(_) => 3,
                Error::NonFinite(_) | Error::Timing(_) => 4,
                Error::Compatibility(_) => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Heatmap(a) => cmd_heatmap(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
