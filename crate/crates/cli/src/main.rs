use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use pmvit::bench::{micro_benchmark, MergeVariant, BENCH_CSV_HEADER};
use pmvit::checkpoint::{get_model, get_plan, get_state, put_model, put_plan, put_state, Array, Container};
use pmvit::compress::{compress_model, global_plan, CompressedVit, CompressionPlan};
use pmvit::config::{parse_list, DataSource, RunConfig};
use pmvit::data::{synthetic, Dataset};
use pmvit::finetune::{evaluate, metrics_csv, train, train_baseline, TrainState};
use pmvit::flops::model_flops;
use pmvit::scoring::{collect_scores, ImportanceScores, ScorerVariant};
use pmvit::visualize::visualize_merge_map;
use pmvit::vit::{ModelConfig, Vit};
use pmvit::{Error, Result};

#[derive(Parser)]
#[command(name = "pmvit", version, about = "Prune-and-merge token compression for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key = value run configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set tau=0.2
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the uncompressed model
    TrainBaseline {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Write per-epoch metrics CSV here
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accumulate importance scores over training batches
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        scorer: Option<ScorerVariant>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a global compression plan from scores
    Compress {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        rate: f64,
        #[arg(long = "pm-threshold", default_value_t = 0.1)]
        pm_threshold: f64,
        /// Comma-separated layers left uncompressed
        #[arg(long, default_value = "")]
        exempt: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a compressed model with self-distillation
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Teacher checkpoint; defaults to --ckpt
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long = "freeze-at")]
        freeze_at: Option<usize>,
        /// Resume from the train state stored in this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Top-1 accuracy on the validation split
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Multiply-add report
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Model preset used when no config is given: tiny | deit-tiny
        #[arg(long, default_value = "deit-tiny")]
        preset: String,
        #[arg(long)]
        plan: Option<PathBuf>,
        #[arg(long)]
        json: bool,
        #[arg(long)]
        csv: bool,
    },
    /// Time merge implementations
    Bench {
        /// Variant to time, or `all`
        #[arg(long, default_value = "all")]
        op: String,
        /// Comma-separated NxD sizes
        #[arg(long, default_value = "64x64,197x192")]
        sizes: String,
        #[arg(long, default_value_t = 30)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: bool,
    },
    /// Render merge maps as PPM images
    Visualize {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        plan: PathBuf,
        /// Validation-set image index
        #[arg(long, default_value_t = 0)]
        image: usize,
        /// Comma-separated layers; default all
        #[arg(long)]
        layers: Option<String>,
        #[arg(long, default_value_t = 8)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    if cfg.model.channels != 1 {
        return Err(Error::Config("datasets are single-channel; set channels = 1".into()));
    }
    let (train, val) = match cfg.data {
        DataSource::Synthetic => (
            synthetic(cfg.train_size, cfg.model.num_classes, cfg.model.image_size, cfg.seed)?,
            synthetic(cfg.val_size, cfg.model.num_classes, cfg.model.image_size, cfg.seed + 1)?,
        ),
        DataSource::Idx => {
            let need = |p: &Option<PathBuf>, k: &str| p.clone().ok_or_else(|| Error::Config(format!("data = idx needs `{k}`")));
            let train = Dataset::load_idx(&need(&cfg.train_images, "train_images")?, &need(&cfg.train_labels, "train_labels")?)?;
            let val = match (&cfg.val_images, &cfg.val_labels) {
                (Some(i), Some(l)) => Dataset::load_idx(i, l)?,
                _ => train.clone(),
            };
            (train, val)
        }
    };
    for d in [&train, &val] {
        if d.image_size() != cfg.model.image_size {
            return Err(Error::Config(format!("dataset images are {}px, model expects {}px", d.image_size(), cfg.model.image_size)));
        }
        if d.num_classes() > cfg.model.num_classes {
            return Err(Error::Config(format!("dataset has {} classes, model has {}", d.num_classes(), cfg.model.num_classes)));
        }
    }
    Ok((train, val))
}

fn load_model(path: &Path) -> Result<Vit> {
    get_model(&Container::load(path)?, "model.")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    Ok(std::fs::write(path, text)?)
}

fn save_model(path: &Path, model: &Vit, plan: Option<&CompressionPlan>, state: Option<&TrainState>, cfg: Option<&RunConfig>) -> Result<()> {
    let mut c = Container::new();
    put_model(&mut c, "model.", model)?;
    if let Some(p) = plan {
        put_plan(&mut c, p)?;
    }
    if let Some(s) = state {
        put_state(&mut c, s)?;
    }
    if let Some(cfg) = cfg {
        let text = cfg.to_text().into_bytes();
        c.insert("run_config", &[text.len()], Array::U8(text))?;
    }
    c.save(path)
}

/// Plan from a dedicated plan file or one stored alongside a model.
fn load_plan(path: &Path) -> Result<CompressionPlan> {
    get_plan(&Container::load(path)?)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainBaseline { cfg, out, metrics } => {
            let cfg = load_config(&cfg)?;
            let (train_set, val) = load_data(&cfg)?;
            let mut model = Vit::new(cfg.model, cfg.seed)?;
            let start = Instant::now();
            let rows = train_baseline(&mut model, &train_set, Some(&val), &cfg.baseline_config())?;
            for r in &rows {
                println!("epoch {} loss {:.4} val_acc {:.4}", r.epoch, r.loss, r.val_acc.unwrap_or(f64::NAN));
            }
            println!("trained in {:.1}s", start.elapsed().as_secs_f64());
            if let Some(m) = metrics {
                write_text(&m, &metrics_csv(&rows))?;
            }
            save_model(&out, &model, None, None, Some(&cfg))
        }
        Command::Score { cfg, ckpt, iters, scorer, out } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(i) = iters {
                cfg.score_iters = i;
            }
            if let Some(s) = scorer {
                cfg.scorer = s;
            }
            let model = load_model(&ckpt)?;
            cfg.model = model.config;
            let (train_set, _) = load_data(&cfg)?;
            let scores = collect_scores(&model, &train_set, &cfg.score_config())?;
            write_text(&out, &scores.to_csv())?;
            println!("scored {} layers over {} iterations with {}", scores.layers.len(), scores.iterations, cfg.scorer);
            Ok(())
        }
        Command::Compress { ckpt, scores, rate, pm_threshold, exempt, out } => {
            let model = load_model(&ckpt)?;
            let scores = ImportanceScores::from_csv(&std::fs::read_to_string(&scores)?)?;
            let plan = global_plan(&scores, rate, pm_threshold, &parse_list(&exempt)?, true)?;
            let compressed = compress_model(model, plan)?;
            let report = model_flops(&compressed.model.config, Some(&compressed.plan))?;
            print!("{}", compressed.plan.summary());
            println!("encoder FLOPs reduction {:.2}%", report.reduction_pct);
            let mut c = Container::new();
            put_plan(&mut c, &compressed.plan)?;
            c.save(&out)
        }
        Command::Finetune { cfg, ckpt, plan, teacher, alpha, epochs, freeze_at, resume, out, metrics } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(a) = alpha {
                cfg.alpha = a;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
                cfg.freeze_epoch = cfg.freeze_epoch.min(e);
            }
            if let Some(f) = freeze_at {
                cfg.freeze_epoch = f;
            }
            let dcfg = cfg.distill_config();
            dcfg.validate()?;
            let model = load_model(&ckpt)?;
            let teacher = match &teacher {
                Some(t) => load_model(t)?,
                None => model.clone(),
            };
            cfg.model = model.config;
            let (train_set, val) = load_data(&cfg)?;
            let (mut student, mut state) = match &resume {
                Some(r) => {
                    let c = Container::load(r)?;
                    (CompressedVit { model: get_model(&c, "model.")?, plan: get_plan(&c)? }, get_state(&c)?)
                }
                None => (compress_model(model, load_plan(&plan)?)?, TrainState::new(cfg.seed)),
            };
            let result = train(&mut student, Some(&teacher), &train_set, Some(&val), &dcfg, &mut state, None);
            let rows = match result {
                Ok(rows) => rows,
                Err(Error::NonFiniteLoss { epoch, step, state }) => {
                    save_model(&out, &student.model, Some(&student.plan), Some(&state), Some(&cfg))?;
                    return Err(Error::NonFiniteLoss { epoch, step, state });
                }
                Err(e) => return Err(e),
            };
            for r in &rows {
                println!("epoch {} loss {:.4} ce {:.4} kl {:.4} val_acc {:.4}", r.epoch, r.loss, r.ce, r.kl, r.val_acc.unwrap_or(f64::NAN));
            }
            if let Some(m) = metrics {
                write_text(&m, &metrics_csv(&rows))?;
            }
            save_model(&out, &student.model, Some(&student.plan), Some(&state), Some(&cfg))
        }
        Command::Eval { cfg, ckpt, plan } => {
            let mut cfg = load_config(&cfg)?;
            let c = Container::load(&ckpt)?;
            let model = get_model(&c, "model.")?;
            cfg.model = model.config;
            let plan = match &plan {
                Some(p) => load_plan(p)?,
                None if c.get("plan.layers").is_some() => get_plan(&c)?,
                None => CompressionPlan::exempt(model.config.depth),
            };
            let compressed = compress_model(model, plan)?;
            let (_, val) = load_data(&cfg)?;
            let acc = evaluate(&compressed, &val, 256)?;
            println!("accuracy {acc:.6} ({} images)", val.len());
            Ok(())
        }
        Command::Flops { cfg, preset, plan, json, csv } => {
            let model = if cfg.config.is_some() || !cfg.overrides.is_empty() {
                load_config(&cfg)?.model
            } else {
                match preset.as_str() {
                    "tiny" => ModelConfig::tiny(),
                    "deit-tiny" => ModelConfig::deit_tiny(),
                    other => return Err(Error::Config(format!("unknown preset `{other}` (tiny | deit-tiny)"))),
                }
            };
            let plan = plan.as_deref().map(load_plan).transpose()?;
            let report = model_flops(&model, plan.as_ref())?;
            if json {
                println!("{}", report.to_json());
            } else if csv {
                print!("{}", report.to_csv());
            } else {
                print!("{}", report.to_table());
            }
            Ok(())
        }
        Command::Bench { op, sizes, reps, seed, json } => {
            let variants: Vec<MergeVariant> = if op == "all" { MergeVariant::ALL.to_vec() } else { vec![op.parse()?] };
            let mut all = Vec::new();
            for size in sizes.split(',').filter(|s| !s.is_empty()) {
                let (n, d) = size
                    .split_once('x')
                    .and_then(|(n, d)| Some((n.trim().parse().ok()?, d.trim().parse().ok()?)))
                    .ok_or_else(|| Error::Config(format!("size `{size}` is not NxD")))?;
                all.extend(micro_benchmark(&variants, n, d, reps, seed)?);
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&all).expect("stats serialize"));
            } else {
                println!("{BENCH_CSV_HEADER}");
                for s in &all {
                    println!("{}", s.csv_row());
                }
            }
            Ok(())
        }
        Command::Visualize { cfg, ckpt, plan, image, layers, scale, out } => {
            let mut cfg = load_config(&cfg)?;
            let model = load_model(&ckpt)?;
            cfg.model = model.config;
            let plan = load_plan(&plan)?;
            let (_, val) = load_data(&cfg)?;
            if image >= val.len() {
                return Err(Error::Contract(format!("image {image} out of range for {} images", val.len())));
            }
            let img = val.image(image);
            let layers = match layers {
                Some(l) => parse_list(&l)?,
                None => (0..plan.layers.len()).collect(),
            };
            std::fs::create_dir_all(&out)?;
            pmvit::visualize::Ppm::from_image(&img, scale).and_then(|p| write_bytes(&out.join("input.ppm"), &p.to_bytes()))?;
            for l in layers {
                let (map, recon) = visualize_merge_map(&img, &model.config, &plan, l, scale)?;
                write_bytes(&out.join(format!("layer{l}_merge.ppm")), &map.to_bytes())?;
                write_bytes(&out.join(format!("layer{l}_recon.ppm")), &recon.to_bytes())?;
                println!("layer {l}: merge crc32 {:08x}, recon crc32 {:08x}", map.checksum(), recon.checksum());
            }
            Ok(())
        }
    }
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    Ok(std::fs::write(path, bytes)?)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '"'], " ");
            eprintln!("error kind={} msg=\"{msg}\"", e.kind());
            ExitCode::FAILURE
        }
    }
}
