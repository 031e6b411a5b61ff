use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use ugcp::experiment::{run_experiment, ExperimentConfig};
use ugcp::field::GridField;
use ugcp::heads::init_params;
use ugcp::io::array::{array_to_field, array_to_mask, read_array, write_field, write_mask, DType};
use ugcp::io::run::{heatmap_rgb, overlay_rgb, read_json, threads_from_env, write_json, RunManifest};
use ugcp::io::{bench, load_params, save_params, sliding_refine, BenchConfig};
use ugcp::metrics::{evaluate, reports_csv, summarize, threshold_probs, BinaryMask, MetricReport};
use ugcp::phantom::{make_dataset, PhantomConfig};
use ugcp::propagation::{refine_state, Refined, StepState, TraceOptions};
use ugcp::training::{curve_csv, gradcheck, train_pairs, GradcheckConfig, LabelField, TrainConfig};
use ugcp::{UgcpConfig, UgcpParams};

mod overlay;

#[derive(Parser)]
#[command(name = "ugcp", version, about = "Uncertainty-guided propagation of segmentation logits")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate seeded vascular phantoms.
    Phantom(PhantomArgs),
    /// Train the heads on a phantom dataset.
    Train(TrainArgs),
    /// Refine a feature field or every sample of a dataset.
    Refine(RefineArgs),
    /// Score predicted masks against ground truth.
    Eval(EvalArgs),
    /// Compare reverse-mode gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Time the refinement across shapes and thread counts.
    Bench(BenchArgs),
    /// Train T = 0 and T = steps models on phantoms and compare on held-out cases.
    Experiment(ExperimentArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory, created if missing.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PhantomArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1)]
    n: usize,
    /// Default config for this dimension when no config file is given.
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    extents: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gap_count: Option<usize>,
    #[arg(long)]
    gap_length: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    feature_channels: Option<usize>,
    /// Write observation/ground-truth PNGs per sample.
    #[arg(long)]
    overlays: bool,
}

/// Operator and training settings read by `train`.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    ugcp: UgcpConfig,
    train: TrainConfig,
}

#[derive(Args)]
struct UgcpOverrides {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    u0: Option<f64>,
    #[arg(long)]
    lambda_uq: Option<f64>,
    #[arg(long)]
    no_gamma: bool,
    #[arg(long)]
    no_phi: bool,
    #[arg(long)]
    no_source: bool,
}

impl UgcpOverrides {
    fn apply(&self, cfg: &mut UgcpConfig) {
        set(&mut cfg.steps, self.steps);
        set(&mut cfg.theta, self.theta);
        set(&mut cfg.tau, self.tau);
        set(&mut cfg.u0, self.u0);
        set(&mut cfg.lambda_uq, self.lambda_uq);
        cfg.enable_gamma &= !self.no_gamma;
        cfg.enable_phi &= !self.no_phi;
        cfg.enable_source &= !self.no_source;
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset directory written by `phantom`.
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    ugcp: UgcpOverrides,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F64,
    F32,
}

#[derive(Args)]
struct RefineArgs {
    #[command(flatten)]
    common: Common,
    /// Feature array `[extents…, C_h]`.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    features: Option<PathBuf>,
    /// Dataset directory; every sample's `h.arr` is refined.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Parameter directory written by `train`; seeded initialisation otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    #[command(flatten)]
    ugcp: UgcpOverrides,
    /// Window extents for sliding-window refinement.
    #[arg(long, value_delimiter = ',')]
    patch: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0.5)]
    overlap: f64,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
    /// Observation used as the overlay background.
    #[arg(long)]
    observation: Option<PathBuf>,
    #[arg(long)]
    overlays: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Mask or probability array, or a dataset directory of `pred.arr` files.
    #[arg(long)]
    pred: PathBuf,
    /// Mask array, or a dataset directory of `gt.arr` files.
    #[arg(long)]
    gt: PathBuf,
    /// Physical spacing per axis for HD95.
    #[arg(long, value_delimiter = ',')]
    spacing: Option<Vec<f64>>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BenchFile {
    bench: BenchConfig,
    ugcp: UgcpConfig,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    /// Shapes as `128x128,256x256`.
    #[arg(long, value_delimiter = ',')]
    shapes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    threads: Option<Vec<usize>>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    no_ablation: bool,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(T::default()),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn sample_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let samples = root.join("samples");
    let mut dirs: Vec<PathBuf> = fs::read_dir(&samples)
        .with_context(|| format!("listing {}", samples.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    dirs.retain(|d| d.is_dir());
    dirs.sort();
    if dirs.is_empty() {
        bail!("no samples under {}", samples.display());
    }
    Ok(dirs)
}

fn sample_name(dir: &Path) -> String {
    dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn finish(out: &Path, mut manifest: RunManifest, inputs: Vec<String>, outputs: Vec<String>) -> Result<()> {
    manifest.inputs = inputs;
    manifest.outputs = outputs;
    manifest.write(out)?;
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> Result<()> {
    let mut cfg: PhantomConfig = match (&a.common.config, a.dim) {
        (Some(p), _) => read_json(p)?,
        (None, Some(3)) => PhantomConfig::defaults_3d(),
        (None, Some(2) | None) => PhantomConfig::defaults_2d(),
        (None, Some(d)) => bail!(ugcp::Error::Config(format!("dim must be 2 or 3, got {d}"))),
    };
    set(&mut cfg.extents, a.extents);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.gap_count, a.gap_count);
    set(&mut cfg.gap_length, a.gap_length);
    set(&mut cfg.noise_sigma, a.noise_sigma);
    set(&mut cfg.feature_channels, a.feature_channels);
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out)?;
    let samples = make_dataset(a.n, &cfg)?;
    let mut outputs = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let dir = out.join("samples").join(format!("{i:04}"));
        fs::create_dir_all(&dir)?;
        write_mask(dir.join("gt.arr"), &s.gt)?;
        write_mask(dir.join("centerline.arr"), &s.centerline)?;
        write_field(dir.join("observation.arr"), &s.observation)?;
        write_field(dir.join("h.arr"), &s.h)?;
        if a.overlays {
            let (h, w, rgb) = overlay_rgb(&s.observation, &s.gt);
            overlay::save_png(dir.join("overlay.png"), h, w, &rgb)?;
        }
        outputs.push(format!("samples/{i:04}"));
    }
    write_json(out.join("config.json"), &cfg)?;
    finish(out, RunManifest::new("phantom", &cfg, cfg.seed)?, vec![], outputs)
}

fn load_pairs(data: &Path) -> Result<Vec<(GridField<f64>, LabelField)>> {
    sample_dirs(data)?
        .iter()
        .map(|d| -> Result<_> {
            Ok((
                array_to_field(read_array(d.join("h.arr"))?)?,
                array_to_mask(read_array(d.join("gt.arr"))?)?,
            ))
        })
        .collect()
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainFile = load_config(a.common.config.as_deref())?;
    a.ugcp.apply(&mut cfg.ugcp);
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.train.lr, a.lr);
    set(&mut cfg.train.batch_size, a.batch_size);
    set(&mut cfg.train.seed, a.seed);
    let pairs = load_pairs(&a.data)?;
    if let Some((h, _)) = pairs.first() {
        cfg.ugcp.feature_channels = h.channels();
    }
    cfg.ugcp.validate()?;
    let out = &a.common.out;
    prepare_out(out)?;
    let refs: Vec<(&GridField<f64>, &LabelField)> = pairs.iter().map(|(h, y)| (h, y)).collect();
    let init = init_params(
        cfg.train.seed,
        cfg.ugcp.feature_channels,
        cfg.ugcp.edge_channels,
        cfg.ugcp.classes,
    )?;
    let outcome = train_pairs(init, &refs, &cfg.ugcp, &cfg.train)?;
    save_params(out.join("params"), &outcome.params)?;
    fs::write(out.join("curve.csv"), curve_csv(&outcome.curve))?;
    write_json(out.join("config.json"), &cfg)?;
    finish(
        out,
        RunManifest::new("train", &cfg, cfg.train.seed)?,
        vec![a.data.display().to_string()],
        vec!["params".into(), "curve.csv".into()],
    )
}

/// Everything that determines a `refine` run besides its inputs.
#[derive(Serialize)]
struct RefineRecord {
    ugcp: UgcpConfig,
    patch: Option<Vec<usize>>,
    overlap: f64,
    precision: String,
}

fn refine_any<T: ugcp::io::array::ArrayElement>(
    h: &GridField<f64>,
    params: &UgcpParams,
    cfg: &UgcpConfig,
    patch: Option<&[usize]>,
    overlap: f64,
) -> Result<(GridField<f64>, GridField<f64>, GridField<f64>, Option<serde_json::Value>)> {
    let h: GridField<T> = h.cast();
    let (logits, probs, u, trace) = match patch {
        Some(p) => {
            let o = sliding_refine(&h, params, cfg, p, overlap)?;
            let cov = serde_json::json!({ "coverage_min": o.coverage.iter().min(), "coverage_max": o.coverage.iter().max() });
            (o.logits, o.probs, o.uncertainty.field().clone(), Some(cov))
        }
        None => {
            let r: Refined<T> = refine_state(StepState::from_features(&h, params, cfg)?, cfg, TraceOptions::default())?;
            let trace = serde_json::to_value(&r.trace.records)?;
            (r.logits, r.probs, r.uncertainty.field().clone(), Some(trace))
        }
    };
    Ok((logits.cast(), probs.cast(), u.cast(), trace))
}

fn refine_one(
    h_path: &Path,
    out: &Path,
    params: &UgcpParams,
    cfg: &UgcpConfig,
    a: &RefineArgs,
    observation: Option<&Path>,
) -> Result<()> {
    let arr = read_array(h_path).with_context(|| format!("reading {}", h_path.display()))?;
    if arr.dtype() == DType::U8 {
        bail!(ugcp::Error::Format { offset: 10, reason: "features must be f32 or f64".into() });
    }
    let h: GridField<f64> = match arr.dtype() {
        DType::F32 => array_to_field::<f32>(arr)?.cast(),
        _ => array_to_field::<f64>(arr)?,
    };
    let patch = a.patch.as_deref();
    let (logits, probs, u, trace) = match a.precision {
        Precision::F64 => refine_any::<f64>(&h, params, cfg, patch, a.overlap)?,
        Precision::F32 => refine_any::<f32>(&h, params, cfg, patch, a.overlap)?,
    };
    fs::create_dir_all(out)?;
    let fg = probs.channel(1)?;
    let pred = threshold_probs(&fg)?;
    match a.precision {
        Precision::F64 => {
            write_field(out.join("logits.arr"), &logits)?;
            write_field(out.join("probs.arr"), &fg)?;
            write_field(out.join("uncertainty.arr"), &u)?;
        }
        Precision::F32 => {
            write_field::<f32>(out.join("logits.arr"), &logits.cast())?;
            write_field::<f32>(out.join("probs.arr"), &fg.cast())?;
            write_field::<f32>(out.join("uncertainty.arr"), &u.cast())?;
        }
    }
    write_mask(out.join("pred.arr"), &pred)?;
    if let Some(t) = trace {
        write_json(out.join("trace.json"), &t)?;
    }
    if a.overlays {
        let background = match observation {
            Some(p) if p.exists() => array_to_field::<f64>(read_array(p)?)?,
            _ => fg.clone(),
        };
        let (hh, w, rgb) = overlay_rgb(&background, &pred);
        overlay::save_png(out.join("overlay.png"), hh, w, &rgb)?;
        let (hh, w, rgb) = heatmap_rgb(&u);
        overlay::save_png(out.join("uncertainty.png"), hh, w, &rgb)?;
    }
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> Result<()> {
    let mut cfg: UgcpConfig = load_config(a.common.config.as_deref())?;
    a.ugcp.apply(&mut cfg);
    let params = match &a.params {
        Some(dir) => load_params(dir)?,
        None => {
            let ch = match (&a.features, &a.data) {
                (Some(f), _) => {
                    *read_array(f).with_context(|| format!("reading {}", f.display()))?.shape.last().unwrap_or(&0)
                }
                (None, Some(d)) => {
                    let h = sample_dirs(d)?[0].join("h.arr");
                    *read_array(&h).with_context(|| format!("reading {}", h.display()))?.shape.last().unwrap_or(&0)
                }
                (None, None) => unreachable!("clap requires one input"),
            };
            init_params(cfg.seed, ch, cfg.edge_channels, cfg.classes)?
        }
    };
    cfg.feature_channels = params.feature_channels;
    cfg.edge_channels = params.edge_channels;
    cfg.classes = params.classes;
    cfg.validate()?;
    let out = &a.common.out;
    prepare_out(out)?;
    let mut inputs = Vec::new();
    let mut outputs = Vec::new();
    match (&a.features, &a.data) {
        (Some(f), _) => {
            refine_one(f, out, &params, &cfg, &a, a.observation.as_deref())?;
            inputs.push(f.display().to_string());
            outputs.push(".".into());
        }
        (None, Some(d)) => {
            for dir in sample_dirs(d)? {
                let name = sample_name(&dir);
                let dest = out.join("samples").join(&name);
                refine_one(&dir.join("h.arr"), &dest, &params, &cfg, &a, Some(&dir.join("observation.arr")))?;
                outputs.push(format!("samples/{name}"));
            }
            inputs.push(d.display().to_string());
        }
        (None, None) => unreachable!("clap requires one input"),
    }
    if let Some(p) = &a.params {
        inputs.push(p.display().to_string());
    }
    let record = RefineRecord {
        ugcp: cfg.clone(),
        patch: a.patch.clone(),
        overlap: a.overlap,
        precision: format!("{:?}", a.precision).to_lowercase(),
    };
    write_json(out.join("config.json"), &record)?;
    finish(out, RunManifest::new("refine", &record, cfg.seed)?, inputs, outputs)
}

/// Masks stay masks; probability arrays are thresholded at 0.5, using the
/// foreground channel when a class axis is present.
fn load_prediction(path: &Path, gt: &BinaryMask) -> Result<BinaryMask> {
    let arr = read_array(path).with_context(|| format!("reading {}", path.display()))?;
    if arr.dtype() == DType::U8 {
        return Ok(array_to_mask(arr)?);
    }
    let field: GridField<f64> = match arr.dtype() {
        DType::F32 => array_to_field::<f32>(arr)?.cast(),
        _ => array_to_field::<f64>(arr)?,
    };
    let fg = match field.channels() {
        1 => field,
        _ => field.channel(1)?,
    };
    if fg.shape().extents() != gt.shape().extents() {
        bail!(ugcp::Error::Domain(format!(
            "prediction extents {:?} differ from ground truth {:?}",
            fg.shape().extents(),
            gt.shape().extents()
        )));
    }
    Ok(threshold_probs(&fg)?)
}

fn eval_pair(id: &str, pred: &Path, gt: &Path, spacing: Option<&[f64]>) -> Result<MetricReport> {
    let mut g = array_to_mask(read_array(gt).with_context(|| format!("reading {}", gt.display()))?)?;
    if let Some(s) = spacing {
        g = g.with_spacing(s)?;
    }
    let p = load_prediction(pred, &g)?;
    Ok(evaluate(id, &p, &g)?)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let out = &a.common.out;
    prepare_out(out)?;
    let spacing = a.spacing.as_deref();
    let reports: Vec<MetricReport> = if a.pred.is_dir() {
        let gts = sample_dirs(&a.gt)?;
        gts.iter()
            .map(|g| {
                let name = sample_name(g);
                let p = a.pred.join("samples").join(&name).join("pred.arr");
                eval_pair(&name, &p, &g.join("gt.arr"), spacing)
            })
            .collect::<Result<_>>()?
    } else {
        let id = sample_name(&a.pred);
        vec![eval_pair(&id, &a.pred, &a.gt, spacing)?]
    };
    fs::write(out.join("metrics.csv"), reports_csv(&reports))?;
    write_json(out.join("summary.json"), &summarize(&reports))?;
    let cfg = serde_json::json!({ "spacing": a.spacing });
    finish(
        out,
        RunManifest::new("eval", &cfg, 0)?,
        vec![a.pred.display().to_string(), a.gt.display().to_string()],
        vec!["metrics.csv".into(), "summary.json".into()],
    )
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg: GradcheckConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.dims, a.dims);
    set(&mut cfg.steps, a.steps);
    set(&mut cfg.seed, a.seed);
    let out = &a.common.out;
    prepare_out(out)?;
    let report = gradcheck(&cfg)?;
    write_json(out.join("gradcheck.json"), &report)?;
    finish(out, RunManifest::new("gradcheck", &cfg, cfg.seed)?, vec![], vec!["gradcheck.json".into()])?;
    println!("worst relative error {:.3e} over {} configurations", report.worst_rel_error, report.entries.len());
    if !report.passed {
        bail!(ugcp::Error::Numeric(format!(
            "gradient check failed: worst relative error {:.3e} > {:.1e}",
            report.worst_rel_error, cfg.tolerance
        )));
    }
    Ok(())
}

fn parse_shape(s: &str) -> Result<Vec<usize>> {
    s.split('x')
        .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad shape {s:?}")))
        .collect()
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let mut cfg: BenchFile = load_config(a.common.config.as_deref())?;
    if let Some(shapes) = &a.shapes {
        cfg.bench.shapes = shapes.iter().map(|s| parse_shape(s)).collect::<Result<_>>()?;
    }
    set(&mut cfg.bench.steps, a.steps);
    set(&mut cfg.bench.repetitions, a.repetitions);
    set(&mut cfg.bench.threads, a.threads);
    cfg.ugcp.validate()?;
    let out = &a.common.out;
    prepare_out(out)?;
    let report = bench(&cfg.bench, &cfg.ugcp)?;
    write_json(out.join("bench.json"), &report)?;
    for l in &report.linearity {
        println!(
            "T={} threads={} {} -> {} locations: time ratio {:.3}",
            l.steps, l.threads, l.from_locations, l.to_locations, l.time_ratio
        );
    }
    finish(out, RunManifest::new("bench", &cfg, cfg.bench.seed)?, vec![], vec!["bench.json".into()])
}

fn cmd_experiment(a: ExperimentArgs) -> Result<()> {
    let mut cfg: ExperimentConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.train.epochs, a.epochs);
    set(&mut cfg.n_train, a.n_train);
    set(&mut cfg.n_test, a.n_test);
    cfg.ablation &= !a.no_ablation;
    let out = &a.common.out;
    prepare_out(out)?;
    let report = run_experiment(&cfg)?;
    write_json(out.join("experiment.json"), &report)?;
    fs::write(out.join("baseline_metrics.csv"), reports_csv(&report.baseline.reports))?;
    fs::write(out.join("refined_metrics.csv"), reports_csv(&report.refined.reports))?;
    let d = &report.deltas;
    println!(
        "median deltas (T{} - T0): cldice {:+.4}, hd95 {:+.4}, component error {:+.1}",
        cfg.ugcp.steps, d.median_cldice, d.median_hd95, d.median_component_error
    );
    if !report.ablation.is_empty() {
        print!("{}", report.ablation_table());
    }
    finish(
        out,
        RunManifest::new("experiment", &cfg, cfg.phantom.seed)?,
        vec![],
        vec!["experiment.json".into()],
    )
}

#[derive(Serialize)]
struct ErrorRecord {
    error: String,
    kind: &'static str,
    chain: Vec<String>,
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<ugcp::Error>())
        .map(|e| e.kind())
        .unwrap_or("usage")
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Train(a) => cmd_train(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Experiment(a) => cmd_experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let record = ErrorRecord {
                error: e.to_string(),
                kind: error_kind(&e),
                chain: e.chain().skip(1).map(|c| c.to_string()).collect(),
            };
            eprintln!("{}", serde_json::to_string(&record).unwrap_or_else(|_| e.to_string()));
            ExitCode::from(1)
        }
    }
}
