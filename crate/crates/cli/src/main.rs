//! `foilnet`: dataset generation, training, evaluation, inference and
//! benchmarking for the airfoil flow-field U-Net.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use foilnet_core::dataset::{self, GenConfig};
use foilnet_core::evaluation::{self, bench_inference, bench_table, export_field_images, TimingStats};
use foilnet_core::geom::{read_airfoil_dir, GridSpec};
use foilnet_core::oracle::DEFAULT_PANELS;
use foilnet_core::training::{self, RunOutput, TrainData};
use foilnet_core::unet::CheckpointMeta;
use foilnet_core::{DatasetManifest, FlowSample, Normalizer, ShearMode, Split, TrainConfig, UNet, UNetConfig, Variant};

use config::ConfigFile;

#[derive(Parser)]
#[command(name = "foilnet", version, about = "Airfoil flow-field surrogate pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset of potential-flow samples from airfoil files.
    GenData(GenArgs),
    /// Train a U-Net on a generated dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one dataset split.
    Eval(EvalArgs),
    /// Run a checkpoint on a single sample file.
    Infer(InferArgs),
    /// Time inference per batch size.
    Bench(BenchArgs),
    /// Print metadata of a checkpoint or dataset manifest.
    Inspect(InspectArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Directory of Selig-format airfoil files.
    #[arg(long)]
    airfoils: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Training plus validation samples.
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    shear: Option<ShearMode>,
    /// File listing held-out test shapes, one name per line.
    #[arg(long)]
    test_shapes: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    panels: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Channel exponent: the base width is 2^ci.
    #[arg(long)]
    ci: Option<u32>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<bool>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent runs with consecutive seeds; more than one reports mean ± SEM.
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    val_every: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: Split,
    /// Report path; the per-sample table goes next to it as `.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Directory for PGM images of the first `--max-images` samples.
    #[arg(long)]
    images: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    max_images: usize,
    #[arg(long, default_value_t = 10)]
    batch: usize,
    /// Add wall-clock timing to the report (makes it non-reproducible).
    #[arg(long)]
    time: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sample file to run.
    #[arg(long)]
    input: PathBuf,
    /// Output sample file: the input planes plus predicted targets.
    #[arg(long)]
    out: PathBuf,
    /// Image path prefix.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Manifest to take normalization constants from if the checkpoint has none.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    /// Benchmark this checkpoint instead of a freshly initialized model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    ci: u32,
    #[arg(long, default_value_t = 128)]
    resolution: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,8")]
    batch_sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    reps: usize,
}

#[derive(Args)]
struct InspectArgs {
    /// Checkpoint or dataset manifest.
    path: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            eprintln!("{}", text.lines().next().unwrap_or("invalid arguments"));
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Infer(a) => infer(a),
        Command::Bench(a) => bench(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the cause chain, skipping causes already quoted by their parent.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out.replace('\n', " ")
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg_file = ConfigFile::load(a.config.as_deref())?;
    let defaults = GenConfig::default();
    let airfoils: PathBuf = cfg_file.pick(a.airfoils, "airfoils", PathBuf::from("data/airfoils"))?;
    let out: PathBuf = cfg_file.pick(a.out, "out", PathBuf::from("dataset"))?;
    let test_shapes: Option<PathBuf> = cfg_file.pick_opt(a.test_shapes, "test-shapes")?;
    let resolution = cfg_file.pick(a.resolution, "resolution", defaults.grid.resolution)?;
    let jobs = cfg_file.pick(a.jobs, "jobs", std::thread::available_parallelism().map_or(1, |n| n.get()))?;
    let cfg = GenConfig {
        count: cfg_file.pick(a.count, "count", defaults.count)?,
        seed: cfg_file.pick(a.seed, "seed", defaults.seed)?,
        variant: cfg_file.pick(a.variant, "variant", defaults.variant)?,
        shear: cfg_file.pick(a.shear, "shear", defaults.shear)?,
        val_fraction: cfg_file.pick(a.val_fraction, "val-fraction", defaults.val_fraction)?,
        n_panels: cfg_file.pick(a.panels, "panels", DEFAULT_PANELS)?,
        grid: GridSpec::with_resolution(resolution),
        ..defaults
    };
    cfg_file.finish()?;

    let shapes = read_airfoil_dir(&airfoils)?;
    let test_names = match &test_shapes {
        Some(p) => dataset::read_shape_list(p)?,
        None => Vec::new(),
    };
    let pool = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build()?;
    let manifest = pool.install(|| dataset::generate(&cfg, &shapes, &test_names, &out))?;
    println!(
        "wrote {} train / {} val / {} test samples to {}",
        manifest.count(Split::Train),
        manifest.count(Split::Validation),
        manifest.count(Split::Test),
        out.display()
    );
    Ok(())
}

fn norm_meta(norm: &Normalizer) -> String {
    norm.constants.iter().map(|c| format!("{c:e}")).collect::<Vec<_>>().join(" ")
}

/// Normalization and variant recorded in a checkpoint at training time.
fn checkpoint_data_meta(meta: &CheckpointMeta) -> Result<Option<(Normalizer, Variant)>> {
    let (Some(norm), Some(variant)) = (meta.extra.get("norm"), meta.extra.get("variant")) else {
        return Ok(None);
    };
    let values: Vec<f32> = norm.split_whitespace().map(str::parse).collect::<Result<_, _>>().context("checkpoint norm constants")?;
    let constants: [f32; 6] = values.try_into().map_err(|_| anyhow::anyhow!("checkpoint norm needs 6 constants"))?;
    let variant = variant.parse::<Variant>().map_err(anyhow::Error::msg)?;
    Ok(Some((Normalizer::from_max_abs(constants)?, variant)))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg_file = ConfigFile::load(a.config.as_deref())?;
    let d = TrainConfig::default();
    let data_path: PathBuf = cfg_file.pick(a.data, "data", PathBuf::from("dataset/manifest.txt"))?;
    let out: PathBuf = cfg_file.pick(a.out, "out", PathBuf::from("run"))?;
    let runs = cfg_file.pick(a.runs, "runs", 1usize)?;
    let mut cfg = TrainConfig {
        iterations: cfg_file.pick(a.iters, "iters", d.iterations)?,
        batch_size: cfg_file.pick(a.batch, "batch", d.batch_size)?,
        lr: cfg_file.pick(a.lr, "lr", d.lr)?,
        lr_decay: cfg_file.pick(a.lr_decay, "lr-decay", d.lr_decay)?,
        seed: cfg_file.pick(a.seed, "seed", d.seed)?,
        val_every: cfg_file.pick(a.val_every, "val-every", d.val_every)?,
        model: UNetConfig {
            channel_exponent: cfg_file.pick(a.ci, "ci", d.model.channel_exponent)?,
            dropout: cfg_file.pick(a.dropout, "dropout", d.model.dropout)?,
            ..d.model
        },
        ..d
    };
    cfg_file.finish()?;

    let manifest = DatasetManifest::read(&data_path)?;
    cfg.model.resolution = manifest.resolution;
    let data = TrainData {
        train: dataset::load_split(&manifest, Split::Train)?,
        val: dataset::load_split(&manifest, Split::Validation)?,
    };
    log::info!("{} training / {} validation samples", data.train.len(), data.val.len());
    let mut meta = std::collections::BTreeMap::new();
    meta.insert("variant".to_string(), manifest.variant.to_string());
    meta.insert("norm".to_string(), norm_meta(&manifest.normalizer));
    let run_out = RunOutput { dir: Some(out.clone()), meta };

    if runs > 1 {
        let (_, summary) = training::multi_seed(&cfg, &data, &run_out, runs)?;
        training::write_summary(&out.join("summary.txt"), &summary)?;
        for r in &summary.records {
            println!("seed {}: final train L1 {:.6}, val L1 {:.6}", r.seed, r.final_train_loss, r.final_val_loss.unwrap_or(f64::NAN));
        }
        println!("val L1 {:.6} ± {:.6} (mean ± SEM over {runs} runs)", summary.mean_val_loss, summary.sem_val_loss);
    } else {
        let (_, record) = training::train(&cfg, &data, &run_out)?;
        println!(
            "final train L1 {:.6}, val L1 {:.6}; checkpoint {}",
            record.final_train_loss,
            record.final_val_loss.unwrap_or(f64::NAN),
            out.join("final.ckpt").display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, meta) = UNet::load(&a.checkpoint)?;
    let mut manifest = DatasetManifest::read(&a.data)?;
    if manifest.resolution != model.config.resolution {
        bail!("dataset resolution {} does not match model resolution {}", manifest.resolution, model.config.resolution);
    }
    // The model's outputs live in its training normalization.
    if let Some((norm, variant)) = checkpoint_data_meta(&meta)? {
        if variant != manifest.variant {
            bail!("checkpoint was trained on variant {variant}, dataset is variant {}", manifest.variant);
        }
        manifest.normalizer = norm;
    }
    let samples = dataset::load_split(&manifest, a.split)?;
    let names: Vec<String> = manifest
        .entries_in(a.split)
        .map(|e| format!("{}:{}", e.path.file_stem().unwrap_or_default().to_string_lossy(), e.shape))
        .collect();
    let started = std::time::Instant::now();
    let mut report = evaluation::evaluate(&model, &samples, &names, &manifest.normalizer, manifest.variant, a.batch)?;
    if a.time {
        let per = started.elapsed() / samples.len().max(1) as u32;
        report.timing = Some(TimingStats { median: per, mean: per });
    }
    if let Some(out) = &a.out {
        if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        report.write(out)?;
    }
    if let Some(dir) = &a.images {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let outputs = evaluation::predict(&model, &samples[..a.max_images.min(samples.len())], a.batch)?;
        for ((s, o), name) in samples.iter().zip(&outputs).zip(&names) {
            export_field_images(&s.target_field(), o, &dir.join(name.replace(':', "_")))?;
        }
    }
    print!("{}", report.to_text());
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let (model, meta) = UNet::load(&a.checkpoint)?;
    let norm = match checkpoint_data_meta(&meta)? {
        Some((norm, _)) => norm,
        None => match &a.data {
            Some(p) => DatasetManifest::read(p)?.normalizer,
            None => bail!("checkpoint has no normalization constants; pass --data"),
        },
    };
    let raw = FlowSample::read(&a.input)?;
    if raw.resolution != model.config.resolution {
        bail!("sample resolution {} does not match model resolution {}", raw.resolution, model.config.resolution);
    }
    let mut normalized = raw.clone();
    norm.normalize(&mut normalized);
    let predicted = evaluation::predict(&model, std::slice::from_ref(&normalized), 1)?.remove(0);
    let predicted = norm.denormalize_target(&predicted);

    let mut out = raw.clone();
    let cells = out.cells();
    for (c, ch) in predicted.channels().into_iter().enumerate() {
        out.planes[(3 + c) * cells..(4 + c) * cells].copy_from_slice(ch);
    }
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    out.write(&a.out)?;
    if let Some(prefix) = &a.images {
        if let Some(parent) = prefix.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        export_field_images(&raw.target_field(), &predicted, prefix)?;
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn bench(a: BenchArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => UNet::load(p)?.0,
        None => UNet::build(UNetConfig { channel_exponent: a.ci, resolution: a.resolution, ..Default::default() }, 0)?,
    };
    println!(
        "ci {} resolution {} parameters {}",
        model.config.channel_exponent,
        model.config.resolution,
        model.count_parameters()
    );
    let rows = bench_inference(&model, &a.batch_sizes, a.reps)?;
    print!("{}", bench_table(&rows));
    Ok(())
}

fn first_setting(path: &Path) -> Result<String> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().next().unwrap_or_default().to_string())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let head = first_setting(&a.path)?;
    if head.contains("checkpoint") {
        let (model, meta) = UNet::load(&a.path)?;
        let c = &model.config;
        println!("checkpoint {}", a.path.display());
        println!("parameters {}", model.count_parameters());
        println!("channel_exponent {}", c.channel_exponent);
        println!("resolution {}", c.resolution);
        println!("dropout {}", c.dropout);
        println!("upsample {:?}", c.upsample);
        println!("iteration {}", meta.iteration);
        for (k, v) in &meta.extra {
            println!("{k} {v}");
        }
        for (i, b) in model.block_shapes().iter().enumerate() {
            println!("l{} {} -> {} @ {}x{}", i + 1, b.in_channels, b.out_channels, b.out_size, b.out_size);
        }
    } else {
        let m = DatasetManifest::read(&a.path)?;
        println!("manifest {}", a.path.display());
        println!("variant {}", m.variant);
        println!("shear {}", m.shear);
        println!("seed {}", m.seed);
        println!("resolution {}", m.resolution);
        for split in [Split::Train, Split::Validation, Split::Test] {
            println!("{split} {}", m.count(split));
        }
        println!("normalization {}", norm_meta(&m.normalizer));
    }
    Ok(())
}
