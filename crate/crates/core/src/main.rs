use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use pathvid::config::{consumer, RunConfig};
use pathvid::data::{build_dataset, export_png, save_clip, Dataset};
use pathvid::generator::VideoClip;
use pathvid::metrics::{generate_clips, mean_abs_diff, smooth_transition, Evaluator};
use pathvid::pathvid_nn::NormMode;
use pathvid::training::run_training;
use pathvid::{Error, Result, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn key_table() -> String {
    let mut s = String::from("Configuration keys (override with --set key=value):\n");
    for (key, default) in RunConfig::documented_keys() {
        s.push_str(&format!("  {key:<44} default {default:<14} [{}]\n", consumer(&key)));
    }
    s
}

#[derive(Parser, Debug)]
#[command(name = "pathvid", version, about = "Text-conditioned toy video GAN", after_help = key_table())]
struct Cli {
    /// JSON config file; may name a "preset" to start from.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dotted-key override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize the captioned toy dataset.
    MakeData {
        /// Use only the first N classes.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate clips from a checkpoint.
    Generate(GenerateArgs),
    /// Evaluate a checkpoint against a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sentence to render, repeatable.
    #[arg(long = "sentence")]
    sentences: Vec<String>,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    /// Interpolate between two sentences.
    #[arg(long, num_args = 2, value_names = ["S1", "S2"])]
    transition: Option<Vec<String>>,
    #[arg(long, default_value_t = 5)]
    steps: usize,
    /// Normalization statistics used while generating.
    #[arg(long, value_enum, default_value_t = Mode::Running)]
    mode: Mode,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Running,
    Batch,
}

impl From<Mode> for NormMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Running => NormMode::Running,
            Mode::Batch => NormMode::Batch,
        }
    }
}

fn resolve_config(cli: &Cli, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    for s in &cli.set {
        cfg.set(s)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    let non_empty = dir.read_dir().map(|mut d| d.next().is_some()).unwrap_or(false);
    if non_empty && !force {
        return Err(Error::Config(format!(
            "output directory {} is not empty; pass --force to write into it",
            dir.display()
        )));
    }
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        context: format!("creating {}", dir.display()),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        context: format!("writing {}", path.display()),
        source: e,
    })
}

fn make_data(cli: &Cli, classes: Option<usize>) -> Result<()> {
    let mut cfg = resolve_config(cli, None)?;
    if let Some(k) = classes {
        cfg.set(&format!("data.num_classes={k}"))?;
        cfg.validate()?;
    }
    prepare_out(&cli.out, cli.force)?;
    let manifest = build_dataset(&cfg.data, cfg.seed, &cli.out)?;
    write_text(&cli.out.join("config.json"), &cfg.to_json())?;
    print!("{manifest}");
    Ok(())
}

fn train(cli: &Cli, data: &Path, resume: Option<&Path>) -> Result<()> {
    let ds = Dataset::load(data)?;
    let mut trainer = match resume {
        Some(ckpt) => {
            let t = Trainer::load(ckpt)?;
            let cfg = resolve_config(cli, Some(t.config.clone()))?;
            if cfg.model != t.config.model {
                return Err(Error::Config("model settings differ from the checkpoint".into()));
            }
            let mut t = t;
            t.config.train.total_steps = cfg.train.total_steps;
            t.config.train.checkpoint_interval = cfg.train.checkpoint_interval;
            t
        }
        None => {
            let cfg = resolve_config(cli, None)?;
            prepare_out(&cli.out, cli.force)?;
            Trainer::new(&cfg)?
        }
    };
    if ds.manifest.resolution != trainer.config.model.discriminator.resolution {
        return Err(Error::Data(format!(
            "dataset resolution {} differs from the model's {}",
            ds.manifest.resolution, trainer.config.model.discriminator.resolution
        )));
    }
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        context: format!("creating {}", cli.out.display()),
        source: e,
    })?;
    write_text(&cli.out.join("config.json"), &trainer.config.to_json())?;
    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = Arc::clone(&stop);
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            warn!("interrupt handler not installed: {e}");
        }
    }
    let total = trainer.config.train.total_steps;
    let last = run_training(&mut trainer, &ds, &cli.out, Some(&stop), |r| {
        if r.step % 10 == 0 || r.step == total {
            info!("step {} T={} L_D {:.4} L_G {:.4} ({} ms)", r.step, r.frames, r.loss_d, r.loss_g, r.wall_ms);
        }
    })?;
    println!("step {} checkpoint written to {}", trainer.step, last.display());
    Ok(())
}

fn write_clips(dir: &Path, clips: &[VideoClip], prefix: &str) -> Result<()> {
    let mut index = Vec::new();
    for (i, clip) in clips.iter().enumerate() {
        let id = format!("{prefix}_{i:03}");
        let d = dir.join(&id);
        save_clip(clip, &d.join("tensor"))?;
        export_png(&clip.frames, &d)?;
        index.push(serde_json::json!({ "id": id, "caption": clip.caption, "frames": clip.frame_count() }));
    }
    write_text(&dir.join(format!("{prefix}.json")), &(serde_json::to_string_pretty(&index)? + "\n"))
}

fn generate(cli: &Cli, a: &GenerateArgs) -> Result<()> {
    let trainer = Trainer::load(&a.checkpoint)?;
    let cfg = resolve_config(cli, Some(trainer.config.clone()))?;
    let model = &trainer.model;
    prepare_out(&cli.out, cli.force)?;
    let mode = NormMode::from(a.mode);
    if let Some(pair) = &a.transition {
        let clips = smooth_transition(model, &pair[0], &pair[1], a.steps, a.frames, cfg.seed, mode)?;
        for w in clips.windows(2) {
            info!("adjacent mean |Δ| {:.5}", mean_abs_diff(&w[0].frames, &w[1].frames));
        }
        let ends = mean_abs_diff(&clips[0].frames, &clips[clips.len() - 1].frames);
        info!("endpoint mean |Δ| {ends:.5}");
        write_clips(&cli.out, &clips, "transition")?;
        println!("{} transition clips written to {}", clips.len(), cli.out.display());
    }
    if !a.sentences.is_empty() {
        let clips = generate_clips(model, &a.sentences, a.frames, cfg.seed, mode)?;
        write_clips(&cli.out, &clips, "clip")?;
        println!("{} clips written to {}", clips.len(), cli.out.display());
    }
    if a.transition.is_none() && a.sentences.is_empty() {
        return Err(Error::Config("give --sentence or --transition".into()));
    }
    Ok(())
}

fn eval(cli: &Cli, checkpoint: &Path, data: &Path) -> Result<()> {
    let trainer = Trainer::load(checkpoint)?;
    let cfg = resolve_config(cli, Some(trainer.config.clone()))?;
    if cfg.model != trainer.config.model {
        return Err(Error::Config("model settings differ from the checkpoint".into()));
    }
    let ds = Dataset::load(data)?;
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io {
        context: format!("creating {}", cli.out.display()),
        source: e,
    })?;
    let evaluator = Evaluator::load_or_train(&cli.out.join("evaluator"), &ds, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(10);
    let real = evaluator.real_set(&ds, cfg.eval.num_real, &mut rng)?;
    let split = evaluator.real_split_fid(&ds, &mut rng)?;
    let outcome = evaluator.evaluate(&trainer.model, &real, &cfg, cfg.seed)?;
    let path = cli.out.join("eval_report.json");
    write_text(&path, &(serde_json::to_string_pretty(&outcome.report)? + "\n"))?;
    let r = &outcome.report;
    println!("IS            {:.3} ± {:.3}", r.is_mean, r.is_std);
    println!("FID (all)     {:.4}   real-vs-real halves {split:.4}", r.fid_all);
    for (class, v) in &r.fid_intra {
        println!("  intra-FID   {v:.4}  {class}");
    }
    println!("accuracy      {:.3}", r.accuracy);
    println!(
        "R-precision   {:.3}   random baseline {:.3} ± {:.3}",
        r.r_precision, outcome.baseline_mean, outcome.baseline_std
    );
    println!("report written to {}", path.display());
    evaluator.reliable()
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeData { classes } => make_data(cli, *classes),
        Command::Train { data, resume } => train(cli, data, resume.as_deref()),
        Command::Generate(a) => generate(cli, a),
        Command::Eval { checkpoint, data } => eval(cli, checkpoint, data),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
