use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hdyolo_core::data::{
    load_image, load_yolo_dataset, seed_from_env, synth_generate, Dataset, Regime, Sample, SynthSpec, SEED_ENV,
};
use hdyolo_core::hypergraph::{construct_hypergraph_scaled, VertexScaling, VertexSet};
use hdyolo_core::metrics::{evaluate_with_curves, pr_curves_csv, EvalOptions};
use hdyolo_core::model::{load_checkpoint, DetectionBox, Model};
use hdyolo_core::selftest;
use hdyolo_core::train::{predict_dataset, train, OptimizerKind, RunConfig};

#[derive(Parser)]
#[command(name = "hdyolo", version, about = "Hypergraph-enhanced defect detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a YOLO-txt directory.
    Train(TrainArgs),
    /// Score predictions (a JSON file or a checkpoint) against labels.
    Eval(EvalArgs),
    /// Run a checkpoint on images and write detections as JSON.
    Infer(InferArgs),
    /// Write a synthetic defect dataset.
    Synth(SynthArgs),
    /// Build an epsilon-ball hypergraph and print its statistics.
    InspectHypergraph(InspectArgs),
    /// Run the oracle suites; exit 1 if any fails.
    Selftest,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Held-out set for evaluation; the training set when absent.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// YAML run file with `preset` or `model`, and `train` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// micro, desk or full; overrides the run file's model.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, value_enum)]
    optimizer: Option<Opt>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Three odd kernel sizes, e.g. 1,3,5.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    sam_kernels: Option<Vec<usize>>,
    #[arg(long)]
    num_classes: Option<usize>,
    /// Beats HDYOLO_SEED, which beats the run file.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    #[arg(long)]
    stop_at_map50: Option<f64>,
    #[arg(long, default_value = "runs/train")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Opt {
    Sgd,
    Adam,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    preds: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score floor when predicting from a checkpoint.
    #[arg(long, default_value_t = 0.001)]
    conf: f64,
    #[arg(long, default_value_t = 0.6)]
    iou: f64,
    /// Operating point for precision and recall.
    #[arg(long, default_value_t = 0.25)]
    report_conf: f64,
    /// Also write the report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Per-class precision/recall curves as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of them.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0.25)]
    conf: f64,
    #[arg(long, default_value_t = 0.6)]
    iou: f64,
    /// Output JSON; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    regime: RegimeArg,
    #[arg(long)]
    n: usize,
    /// Falls back to HDYOLO_SEED, then 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 320)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Tiny,
    Large,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct VertexSource {
    /// JSON array of feature rows.
    #[arg(long)]
    features: Option<PathBuf>,
    /// PNG whose RGB pixels (0..1) become vertices.
    #[arg(long)]
    image: Option<PathBuf>,
    /// N random vertices of dimension C from the seed.
    #[arg(long, num_args = 2, value_names = ["N", "C"])]
    random: Option<Vec<usize>>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    source: VertexSource,
    #[arg(long, default_value_t = 3.0)]
    epsilon: f64,
    #[arg(long, value_enum, default_value = "raw")]
    scaling: ScalingArg,
    /// Image vertices come from a grid of at most this side.
    #[arg(long, default_value_t = 32)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScalingArg {
    Raw,
    PerDim,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Synth(a) => cmd_synth(a),
        Command::InspectHypergraph(a) => cmd_inspect(a),
        Command::Selftest => cmd_selftest(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, v)?;
    writeln!(out)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn cmd_train(a: TrainArgs) -> Result<ExitCode> {
    let mut rc = match &a.config {
        Some(p) => RunConfig::from_yaml_file(p)?,
        None => RunConfig::from_yaml_str("{}")?,
    };
    let mut model_cfg = match &a.preset {
        Some(p) => hdyolo_core::model::ModelConfig::preset(p)?,
        None => rc.model_config()?,
    };
    if let Some(e) = a.epsilon {
        model_cfg.epsilon = e;
    }
    if let Some(k) = &a.sam_kernels {
        model_cfg.sam_kernels = [k[0], k[1], k[2]];
    }
    if let Some(n) = a.num_classes {
        model_cfg.num_classes = n;
    }
    model_cfg.validate()?;

    let t = &mut rc.train;
    t.seed = a.seed.unwrap_or_else(|| seed_from_env(t.seed));
    if let Some(v) = a.epochs {
        t.epochs = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(o) = a.optimizer {
        t.optimizer = match o {
            Opt::Sgd => OptimizerKind::Sgd,
            Opt::Adam => OptimizerKind::Adam,
        };
    }
    if a.lr.is_some() {
        t.lr = a.lr;
    }
    if let Some(v) = a.eval_every {
        t.eval_every = v;
    }
    if a.stop_at_map50.is_some() {
        t.stop_at_map50 = a.stop_at_map50;
    }
    t.out_dir = Some(a.out.clone());

    let train_set = load_yolo_dataset(&a.data)?;
    let eval_set = match &a.eval_data {
        Some(d) => load_yolo_dataset(d)?,
        None => train_set.clone(),
    };
    let model = Model::new(model_cfg.clone(), rc.train.seed)?;
    log::info!(
        "training {} parameters on {} images for {} epochs",
        model.num_parameters(),
        train_set.len(),
        rc.train.epochs
    );
    let outcome = train(model, &train_set, &eval_set, &rc.train)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        best_map50: f64,
        best_epoch: usize,
        epochs_run: usize,
        final_eval: &'a hdyolo_core::metrics::EvalResult,
        model: &'a hdyolo_core::model::ModelConfig,
        train: &'a hdyolo_core::train::TrainConfig,
    }
    let summary = Summary {
        best_map50: outcome.best_map50,
        best_epoch: outcome.best_epoch,
        epochs_run: outcome.history.len(),
        final_eval: &outcome.final_eval,
        model: &model_cfg,
        train: &rc.train,
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    print_json(&summary)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(a: EvalArgs) -> Result<ExitCode> {
    let data = load_yolo_dataset(&a.data)?;
    let preds: BTreeMap<String, Vec<DetectionBox>> = match (&a.preds, &a.checkpoint) {
        (Some(p), _) => {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, Some(c)) => {
            let model = load_checkpoint(c)?.to_model()?;
            predict_dataset(&model, &data, a.conf, a.iou, 8)?
        }
        (None, None) => bail!("one of --preds or --checkpoint is required"),
    };
    let opts = EvalOptions {
        conf_thresh: a.report_conf,
        ..EvalOptions::default()
    };
    let (result, curves) = evaluate_with_curves(&preds, &data.ground_truth(), opts)?;
    if let Some(p) = &a.report {
        write_json(p, &result)?;
    }
    if let Some(p) = &a.curves {
        std::fs::write(p, pr_curves_csv(&curves)).with_context(|| format!("writing {}", p.display()))?;
    }
    print_json(&result)?;
    Ok(ExitCode::SUCCESS)
}

fn image_dataset(input: &Path) -> Result<Dataset> {
    let files: Vec<PathBuf> = if input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(input)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        v.sort();
        v
    } else {
        vec![input.to_path_buf()]
    };
    if files.is_empty() {
        bail!("no .png images in {}", input.display());
    }
    let samples = files
        .into_iter()
        .map(|p| {
            let (image, width, height) = load_image(&p)?;
            Ok(Sample {
                id: p.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                path: p,
                image,
                width,
                height,
                records: Vec::new(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Dataset { samples })
}

fn cmd_infer(a: InferArgs) -> Result<ExitCode> {
    let model = load_checkpoint(&a.checkpoint)?.to_model()?;
    let data = image_dataset(&a.input)?;
    let preds = predict_dataset(&model, &data, a.conf, a.iou, 8)?;
    match &a.out {
        Some(p) => write_json(p, &preds)?,
        None => print_json(&preds)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_synth(a: SynthArgs) -> Result<ExitCode> {
    let regime = match a.regime {
        RegimeArg::Tiny => Regime::Tiny,
        RegimeArg::Large => Regime::Large,
    };
    let seed = a.seed.unwrap_or_else(|| seed_from_env(0));
    let manifest = synth_generate(&SynthSpec::new(regime, a.n, a.size, seed), &a.out)?;
    log::info!(
        "wrote {} images to {} (seed {seed}, {SEED_ENV} respected when --seed is absent)",
        manifest.images.len(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct HypergraphReport {
    n_vertices: usize,
    n_hyperedges: usize,
    degree_histogram: BTreeMap<usize, usize>,
    epsilon: f64,
}

fn image_vertices(path: &Path, grid: usize) -> Result<VertexSet> {
    let (t, w, h) = load_image(path)?;
    let step = w.max(h).div_ceil(grid.max(1)).max(1);
    let (gw, gh) = (w.div_ceil(step), h.div_ceil(step));
    let mut rows = Vec::with_capacity(gw * gh);
    for gy in 0..gh {
        for gx in 0..gw {
            let mut acc = [0.0; 3];
            let mut n = 0.0;
            for y in gy * step..((gy + 1) * step).min(h) {
                for x in gx * step..((gx + 1) * step).min(w) {
                    for (c, a) in acc.iter_mut().enumerate() {
                        *a += t.data()[(c * h + y) * w + x];
                    }
                    n += 1.0;
                }
            }
            rows.push(acc.iter().map(|a| a / n).collect::<Vec<f64>>());
        }
    }
    Ok(VertexSet::from_rows(&rows)?)
}

fn cmd_inspect(a: InspectArgs) -> Result<ExitCode> {
    let vs = if let Some(p) = &a.source.features {
        let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        let rows: Vec<Vec<f64>> = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", p.display()))?;
        VertexSet::from_rows(&rows)?
    } else if let Some(p) = &a.source.image {
        image_vertices(p, a.grid)?
    } else if let Some(nc) = &a.source.random {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
        let (n, c) = (nc[0], nc[1]);
        VertexSet::new(n, c, (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect())?
    } else {
        bail!("one of --features, --image or --random is required");
    };
    let scaling = match a.scaling {
        ScalingArg::Raw => VertexScaling::Raw,
        ScalingArg::PerDim => VertexScaling::PerDim,
    };
    let hg = construct_hypergraph_scaled(&vs, a.epsilon, scaling)?;
    print_json(&HypergraphReport {
        n_vertices: hg.n_vertices(),
        n_hyperedges: hg.n_edges(),
        degree_histogram: hg.degree_histogram(),
        epsilon: a.epsilon,
    })?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest() -> Result<ExitCode> {
    let mut ok = true;
    for outcome in selftest::run_all() {
        println!("{}", outcome.line());
        ok &= outcome.passed;
    }
    println!("selftest {}", if ok { "passed" } else { "FAILED" });
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
