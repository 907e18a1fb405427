//! `raap`: generate synthetic benchmarks, train the alignment model,
//! evaluate it, and run single predictions.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raap_core::correspondence::{contact_pixel, transfer_contact};
use raap_core::evaluation::{
    config_hash, evaluate, k_sweep, k_sweep_to_string, retrieve_references, save_report, EvalOptions, EvalReport,
};
use raap_core::lifting::{lift_affordance, DEFAULT_CONTACT_RADIUS, DEFAULT_DIRECTION_STEP};
use raap_core::memory::{load_memory, save_memory};
use raap_core::model::{checkpoint_to_string, load_checkpoint, save_checkpoint, AlignmentModel, WeightingRule};
use raap_core::retrieval::{cosine_topk, filter_by_task};
use raap_core::synthgen::{generate_split, load_scenes, manifest_to_string, save_scenes, Scene};
use raap_core::training::{build_episodes, save_loss_history, train};

use config::{expand, RunConfig, CONFIG_KEYS};

const MEMORY_FILE: &str = "memory.raap";
const TRAIN_FILE: &str = "train.scenes";
const TEST_FILE: &str = "test.scenes";
const MANIFEST_FILE: &str = "manifest.tsv";

#[derive(Parser)]
#[command(name = "raap", version, about = "Retrieval-augmented affordance prediction", after_help = CONFIG_KEYS)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train/test scenes, the memory, and a manifest.
    Gen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        /// Comma-separated task list.
        #[arg(long, value_delimiter = ',')]
        tasks: Option<Vec<String>>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        /// Output directory (overrides `paths.data`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model on the generated train split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_checkpoint: Option<String>,
        #[arg(long)]
        loss_history: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Evaluate checkpoints on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint path; `{k}` and `{seed}` are substituted.
        #[arg(long)]
        checkpoint: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "full")]
        variant_rule: String,
        /// Comma-separated seeds; one report per seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// K values to sweep, e.g. `0..4` or `0,2,4`.
        #[arg(long)]
        k_sweep: Option<String>,
        /// Report directory (overrides `paths.reports`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the affordance of one scene.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene file written by `gen`.
        #[arg(long)]
        scene: PathBuf,
        /// Scene id within the file; defaults to the first scene.
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        memory: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value = "full")]
        variant_rule: String,
        /// Also lift the prediction to 3D.
        #[arg(long)]
        lift: bool,
        /// Synonym config (only `synonyms` is used).
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use raap_core::Error as E;
    match err.downcast_ref::<E>() {
        Some(E::Numeric(_) | E::NonFiniteLoss { .. }) => 3,
        Some(E::Leakage(_)) => 4,
        Some(E::NoSurface { .. } | E::Geometry(_) | E::NoCorrespondence(_)) => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Gen {
            common,
            variant,
            tasks,
            n_train,
            n_test,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = variant {
                cfg.variant = v;
            }
            if let Some(t) = tasks {
                cfg.tasks = t;
            }
            cfg.n_train = n_train.unwrap_or(cfg.n_train);
            cfg.n_test = n_test.unwrap_or(cfg.n_test);
            if let Some(o) = out {
                cfg.paths.data = o;
            }
            cfg.validate()?;
            cmd_gen(&cfg)
        }
        Command::Train {
            common,
            data,
            out_checkpoint,
            loss_history,
            k,
            max_epochs,
            lr,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            if let Some(c) = out_checkpoint {
                cfg.paths.checkpoint = c;
            }
            if let Some(l) = loss_history {
                cfg.paths.loss_history = l;
            }
            cfg.train.k = k.unwrap_or(cfg.train.k);
            cfg.train.max_epochs = max_epochs.unwrap_or(cfg.train.max_epochs);
            cfg.train.lr = lr.unwrap_or(cfg.train.lr);
            cfg.validate()?;
            cmd_train(&cfg)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            k,
            variant_rule,
            seeds,
            k_sweep,
            out,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(d) = data {
                cfg.paths.data = d;
            }
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = c;
            }
            if let Some(o) = out {
                cfg.paths.reports = o;
            }
            cfg.train.k = k.unwrap_or(cfg.train.k);
            cfg.validate()?;
            let rule: WeightingRule = variant_rule.parse()?;
            let seeds = seeds.unwrap_or_else(|| vec![cfg.seed]);
            let ks = match k_sweep {
                Some(list) => parse_k_list(&list)?,
                None => vec![cfg.train.k],
            };
            cmd_eval(&cfg, rule, &seeds, &ks)
        }
        Command::Predict {
            checkpoint,
            scene,
            id,
            memory,
            k,
            variant_rule,
            lift,
            config,
        } => {
            let cfg = RunConfig::load(config.as_deref())?;
            let rule: WeightingRule = variant_rule.parse()?;
            cmd_predict(&cfg, &checkpoint, &scene, id.as_deref(), &memory, k, rule, lift)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `a..b` (inclusive) or a comma list.
fn parse_k_list(list: &str) -> Result<Vec<usize>> {
    let bad = || raap_core::Error::Config(format!("bad K list {list:?}"));
    if let Some((a, b)) = list.split_once("..") {
        let a: usize = a.trim().parse().map_err(|_| bad())?;
        let b: usize = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if a > b {
            return Err(bad().into());
        }
        return Ok((a..=b).collect());
    }
    Ok(list
        .split(',')
        .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>, _>>()?)
}

fn cmd_gen(cfg: &RunConfig) -> Result<()> {
    let variant = cfg.benchmark()?;
    let split = generate_split(cfg.n_train, cfg.n_test, &cfg.task_list()?, cfg.seed, &variant)?;
    let dir = &cfg.paths.data;
    std::fs::create_dir_all(dir).map_err(|e| raap_core::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    save_memory(&split.memory, dir.join(MEMORY_FILE))?;
    save_scenes(&split.train, dir.join(TRAIN_FILE))?;
    save_scenes(&split.test, dir.join(TEST_FILE))?;
    let manifest = dir.join(MANIFEST_FILE);
    std::fs::write(&manifest, manifest_to_string(&split, cfg.seed)).map_err(|e| raap_core::Error::Io {
        path: manifest.clone(),
        source: e,
    })?;
    println!(
        "wrote {} train / {} test scenes ({}) to {}",
        split.train.len(),
        split.test.len(),
        variant.name(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.paths.data;
    let memory = load_memory(dir.join(MEMORY_FILE))?;
    let train_scenes = load_scenes(dir.join(TRAIN_FILE))?;
    let mut tcfg = cfg.train.clone();
    tcfg.seed = cfg.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let episodes = build_episodes(&train_scenes, &memory, &cfg.synonyms, &tcfg, &mut rng)?;
    info!("{} episodes from {} queries", episodes.len(), train_scenes.len());
    let mut model = AlignmentModel::new(cfg.model.clone(), cfg.seed)?;
    let started = std::time::Instant::now();
    let report = train(&mut model, &train_scenes, &memory, &episodes, &tcfg)?;
    let ckpt = expand(&cfg.paths.checkpoint, tcfg.k, cfg.seed);
    save_checkpoint(&model, &ckpt)?;
    save_loss_history(&report.history, &cfg.paths.loss_history)?;
    println!(
        "trained {} epochs in {:.1}s (final loss {:.6}{}); checkpoint {}",
        report.history.len(),
        started.elapsed().as_secs_f64(),
        report.history.last().copied().unwrap_or(f64::NAN),
        if report.stopped_early { ", early stop" } else { "" },
        ckpt.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, rule: WeightingRule, seeds: &[u64], ks: &[usize]) -> Result<()> {
    let dir = &cfg.paths.data;
    let memory = load_memory(dir.join(MEMORY_FILE))?;
    let test = load_scenes(dir.join(TEST_FILE))?;
    let reports_dir = &cfg.paths.reports;
    std::fs::create_dir_all(reports_dir).map_err(|e| raap_core::Error::Io {
        path: reports_dir.clone(),
        source: e,
    })?;
    let mut reports: Vec<EvalReport> = Vec::new();
    for &k in ks {
        let mut maes = Vec::new();
        for &seed in seeds {
            let path = expand(&cfg.paths.checkpoint, k, seed);
            let model = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
            let opts = EvalOptions {
                k,
                rule,
                synonyms: cfg.synonyms.clone(),
                seed,
                variant: cfg.variant.clone(),
                config_hash: config_hash(&checkpoint_to_string(&model)),
            };
            let r = evaluate(&model, &test, &memory, &opts)?;
            save_report(&r, reports_dir.join(format!("report-k{k}-seed{seed}-{rule}.txt")))?;
            println!("k={k} seed={seed} rule={rule} mae={:.4}", r.overall);
            maes.push(r.overall);
            reports.push(r);
        }
        let mean = maes.iter().sum::<f64>() / maes.len() as f64;
        println!("k={k} rule={rule} aggregate_mae={mean:.4} seeds={}", maes.len());
    }
    if ks.len() > 1 {
        let rows = k_sweep(&reports, ks);
        let path = reports_dir.join(format!("k_mae-{rule}.csv"));
        std::fs::write(&path, k_sweep_to_string(&rows)).map_err(|e| raap_core::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        print!("{}", k_sweep_to_string(&rows));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_predict(
    cfg: &RunConfig,
    checkpoint: &Path,
    scene_path: &Path,
    id: Option<&str>,
    memory_path: &Path,
    k: usize,
    rule: WeightingRule,
    lift: bool,
) -> Result<()> {
    let model = load_checkpoint(checkpoint)?;
    let memory = load_memory(memory_path)?;
    let scenes = load_scenes(scene_path)?;
    let scene: &Scene = match id {
        Some(id) => scenes
            .iter()
            .find(|s| s.id == id)
            .ok_or_else(|| raap_core::Error::Config(format!("no scene {id:?} in {}", scene_path.display())))?,
        None => scenes
            .first()
            .ok_or_else(|| raap_core::Error::Config(format!("{} holds no scenes", scene_path.display())))?,
    };
    let query = scene.query_image();

    // The contact always comes from the best match, whatever K is.
    let subset = filter_by_task(&memory, scene.task.as_str(), &cfg.synonyms);
    let top = cosine_topk(&memory, &scene.embedding, &subset, 1, Some(&scene.id))?;
    let best = top
        .entries
        .first()
        .ok_or_else(|| raap_core::Error::EmptyMemory(format!("no {} entries to match", scene.task)))?;
    let reference = memory.entry(best.index);
    let c_r = contact_pixel(reference.affordance.contact, reference.image.width(), reference.image.height())?;
    let contact = transfer_contact(&reference.image, c_r, &query)?;

    let refs = retrieve_references(scene, &memory, k, &cfg.synonyms)?;
    let pred = model.predict(&query, &refs, rule)?;
    let dir = pred.direction.ok_or_else(|| {
        raap_core::Error::Numeric(format!(
            "degenerate prediction ({}, {}) for {}",
            pred.raw.x, pred.raw.y, scene.id
        ))
    })?;
    let mut line = format!(
        "scene={} contact={},{} direction={:.9},{:.9}",
        scene.id, contact.x, contact.y, dir.x, dir.y
    );
    let lifted = if lift {
        let a = lift_affordance(
            contact,
            dir,
            &scene.depth,
            &scene.intrinsics,
            DEFAULT_CONTACT_RADIUS,
            DEFAULT_DIRECTION_STEP,
        )?;
        line += &format!(
            " contact3d={:.9},{:.9},{:.9} direction3d={:.9},{:.9},{:.9}",
            a.contact[0], a.contact[1], a.contact[2], a.direction[0], a.direction[1], a.direction[2]
        );
        Some(a)
    } else {
        None
    };
    println!("{line}");
    println!(
        "{} ({}): contact pixel ({}, {}), direction ({:.3}, {:.3}) from {} reference(s), best match {}",
        scene.id,
        scene.task,
        contact.x,
        contact.y,
        dir.x,
        dir.y,
        refs.len(),
        reference.id
    );
    if let Some(a) = lifted {
        println!(
            "3D: contact ({:.3}, {:.3}, {:.3}) m, direction ({:.3}, {:.3}, {:.3})",
            a.contact[0], a.contact[1], a.contact[2], a.direction[0], a.direction[1], a.direction[2]
        );
    }
    Ok(())
}
