use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use semfuse::geometry::{
    paint_points_2d, project_points, write_semantic_map, OutOfViewPolicy, SemanticMap2D,
};
use semfuse::gradsuite::{gradient_suite, SuiteTarget, GRAD_TOLERANCE};
use semfuse::pipeline::{
    build_samples, delta_chart, evaluate, generate_bundle, load_bundles, ordering_flags,
    run_ablation, scene_seed, to_csv, train_on, AblationConfig, ExperimentConfig, FusionModel,
    Report, Strategy,
};
use semfuse::semantics::{labels_from_boxes, Representation};
use semfuse::synth::{
    false_positive_points, Confusion, CorruptionConfig, SceneBundle, SceneParams, CAR, TRUCK,
};

#[derive(Parser)]
#[command(
    name = "semfuse",
    version,
    about = "Adaptive 2D/3D semantic fusion on synthetic LiDAR scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scene bundles with simulated segmentor outputs.
    Gen {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Inclusive box-count range, e.g. `5..9`.
        #[arg(long, default_value = "7..11")]
        boxes: String,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 3)]
        dilate: usize,
        /// Row-stochastic confusion matrix, one whitespace-separated row per line.
        #[arg(long)]
        confusion: Option<PathBuf>,
        #[arg(long, default_value_t = 0.3)]
        ambiguity: f64,
    },
    /// Paint a scene's points with its 2-D semantic map.
    Paint {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value = "background")]
        policy: OutOfViewPolicy,
    },
    /// Train a voxel classifier on scene bundles and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Base experiment config (TOML); flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long = "repr")]
        representation: Option<Representation>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        max_lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on scene bundles.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run a strategy × representation × seed grid on synthesized data.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: SuiteTarget,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_range(text: &str) -> Result<(usize, usize)> {
    let (a, b) = text
        .split_once("..")
        .with_context(|| format!("expected A..B, got {text:?}"))?;
    let (a, b) = (a.trim().parse()?, b.trim().parse()?);
    if a > b {
        bail!("empty range {text}");
    }
    Ok((a, b))
}

fn default_confusion(m: usize) -> Confusion {
    if m > TRUCK {
        Confusion::pair(m, CAR, TRUCK, 0.3)
    } else {
        Confusion::identity(m)
    }
}

fn scene_params(classes: usize) -> SceneParams {
    let mut params = SceneParams {
        classes,
        ..SceneParams::default()
    };
    params.shapes.retain(|s| s.class_id < classes);
    params
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn gen(
    out: &Path,
    scenes: usize,
    seed: u64,
    boxes: &str,
    classes: usize,
    dilate: usize,
    confusion: Option<&Path>,
    ambiguity: f64,
) -> Result<()> {
    let (lo, hi) = parse_range(boxes)?;
    let mut params = scene_params(classes);
    params.min_boxes = lo;
    params.max_boxes = hi;
    let confusion = match confusion {
        Some(p) => Confusion::parse(
            &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        )?,
        None => default_confusion(classes),
    };
    let corruption = CorruptionConfig {
        dilate_px: dilate,
        confusion,
        ambiguity,
        seed,
    };
    corruption.validate()?;
    for i in 0..scenes {
        let bundle = generate_bundle(&params, &corruption, scene_seed(seed, 0, i))?;
        let dir = out.join(format!("scene_{i:04}"));
        bundle.write(&dir)?;
        println!(
            "{}: {} points, {} boxes",
            dir.display(),
            bundle.cloud.len(),
            bundle.boxes.len()
        );
    }
    Ok(())
}

fn paint(scene: &Path, policy: OutOfViewPolicy) -> Result<()> {
    let bundle = SceneBundle::read(scene)?;
    let m = bundle.sem2d.classes();
    let size = bundle.sem2d.size();
    let painted = paint_points_2d(&bundle.cloud, &bundle.calib, &bundle.sem2d, policy)?;
    let in_view = project_points(&bundle.cloud, &bundle.calib, size)
        .in_view
        .iter()
        .filter(|&&v| v)
        .count();
    let truth = labels_from_boxes(&bundle.cloud, &bundle.boxes, m)?;
    let fp = false_positive_points(&painted, &truth);
    let name = match policy {
        OutOfViewPolicy::Background => "painted_background.sem",
        OutOfViewPolicy::Zero => "painted_zero.sem",
    };
    let path = scene.join(name);
    let rows = SemanticMap2D::new(1, painted.len(), m, painted.data().to_vec())?;
    write_semantic_map(&path, &rows)?;
    println!(
        "{} points, {in_view} in view, {fp} background points painted foreground -> {}",
        bundle.cloud.len(),
        path.display()
    );
    Ok(())
}

/// Matches the class count of `cfg` to data loaded from disk.
fn fit_classes(cfg: &mut ExperimentConfig, classes: usize) {
    if cfg.classes() != classes {
        cfg.data.scene = scene_params(classes);
        cfg.corruption.confusion = default_confusion(classes);
    }
}

fn load_samples(data: &Path, cfg: &mut ExperimentConfig) -> Result<Vec<semfuse::pipeline::Sample>> {
    let bundles = load_bundles(data)?;
    fit_classes(cfg, bundles[0].sem2d.classes());
    cfg.validate()?;
    Ok(build_samples(&bundles, cfg)?)
}

fn print_report(r: &Report) {
    println!(
        "{} / {} seed {}: acc {:.4}  fg_acc {:.4}  fp_rate {:.4}  vehicle swaps {:.4}",
        r.strategy,
        r.representation,
        r.seed,
        r.accuracy,
        r.fg_accuracy,
        r.fp_rate,
        r.metrics.vehicle_confusion()
    );
}

fn run() -> Result<ExitCode> {
    match Cli::parse().command {
        Command::Gen {
            out,
            scenes,
            seed,
            boxes,
            classes,
            dilate,
            confusion,
            ambiguity,
        } => gen(
            &out,
            scenes,
            seed,
            &boxes,
            classes,
            dilate,
            confusion.as_deref(),
            ambiguity,
        )?,
        Command::Paint { scene, policy } => paint(&scene, policy)?,
        Command::Train {
            data,
            config,
            strategy,
            representation,
            steps,
            max_lr,
            seed,
            out,
        } => {
            let mut cfg = match config {
                Some(p) => ExperimentConfig::from_toml(
                    &std::fs::read_to_string(&p)
                        .with_context(|| format!("reading {}", p.display()))?,
                )?,
                None => ExperimentConfig::default(),
            };
            cfg.strategy = strategy.unwrap_or(cfg.strategy);
            cfg.representation = representation.unwrap_or(cfg.representation);
            cfg.training.steps = steps.unwrap_or(cfg.training.steps);
            cfg.training.max_lr = max_lr.unwrap_or(cfg.training.max_lr);
            cfg.training.seed = seed.unwrap_or(cfg.training.seed);
            let samples = load_samples(&data, &mut cfg)?;
            let start = Instant::now();
            let outcome = train_on(&cfg, &samples)?;
            outcome.model.save(&out)?;
            let tail = &outcome.losses[outcome.losses.len().saturating_sub(10)..];
            println!(
                "trained {} / {} for {} steps on {} scenes in {} ms, final loss {:.4} -> {}",
                cfg.strategy,
                cfg.representation,
                cfg.training.steps,
                samples.len(),
                start.elapsed().as_millis(),
                tail.iter().sum::<f64>() / tail.len() as f64,
                out.display()
            );
        }
        Command::Eval { ckpt, data, report } => {
            let model = FusionModel::load(&ckpt)?;
            let mut cfg = model.config.clone();
            let samples = load_samples(&data, &mut cfg)?;
            if cfg.classes() != model.config.classes() {
                bail!(
                    "checkpoint has {} classes, data has {}",
                    model.config.classes(),
                    cfg.classes()
                );
            }
            let start = Instant::now();
            let metrics = evaluate(&model, &samples)?;
            let r = Report::new(
                &model.config,
                metrics,
                model.config.training.steps,
                start.elapsed().as_millis(),
            );
            print_report(&r);
            if let Some(path) = report {
                write_text(&path, &to_csv(std::slice::from_ref(&r)))?;
            }
        }
        Command::Ablate { config, out } => {
            let text = std::fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            let cfg = AblationConfig::from_toml(&text)?;
            let reports = run_ablation(&cfg, print_report)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_text(&out.join("ablation.csv"), &to_csv(&reports))?;
            write_text(&out.join("ablation.svg"), &delta_chart(&reports))?;
            for f in ordering_flags(&reports) {
                println!(
                    "seed {}: score>=onehot>=id {}  aaf-dff>=aaf>=max(2d,3d) {}",
                    f.seed,
                    f.representation_order
                        .map_or("n/a".into(), |b| b.to_string()),
                    f.strategy_order.map_or("n/a".into(), |b| b.to_string())
                );
            }
        }
        Command::Gradcheck { module, seed } => {
            let cases = gradient_suite(module, seed)?;
            let mut ok = true;
            for c in &cases {
                println!(
                    "{:<10} max relative error {:.3e}  ({} of {} coordinates refined)  {}",
                    c.name,
                    c.max_rel_error,
                    c.refined,
                    c.coordinates,
                    if c.passed() { "ok" } else { "FAIL" }
                );
                ok &= c.passed();
            }
            if !ok {
                eprintln!("gradient check exceeded tolerance {GRAD_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
