//! `tinydet`: sensitivity sweeps, NMS tuning, evaluation and the toy
//! trainer, over synthetic scenes or record files.
//!
//! Every run is deterministic under --seed; reports go to stdout and,
//! with --out-dir, to files. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 invariant violation.

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use std::path::PathBuf;
use std::process::ExitCode;
use tinydet_cli::report::{ReportFormat, SweepReport, emit_to_dir};
use tinydet_cli::scene::{
    JitterSpec, SceneSpec, crowded_tiny_scene, gen_synthetic_scene, jittered_detections,
};
use tinydet_cli::sweeps::{lambda_sweep, lazy_sweep, theta_sweep, theta_sweep_stats};
use tinydet_cli::train::{InitOffset, LossKind, TrainSpec, toy_train};
use tinydet_cli::visdrone;
use tinydet_core::eval::{
    Detection, EvalOptions, GroundTruth, f1_confidence_sweep, grid_search_nms, map_eval_with,
};
use tinydet_core::prune::DriftSpec;
use tinydet_core::records;
use tinydet_core::tensor::{FilterBank, load_tensor4};

#[derive(Parser)]
#[command(
    name = "tinydet",
    version,
    about = "Tiny-object detection numerics harness"
)]
struct Cli {
    /// Seed for everything random in the run.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output format for reports.
    #[arg(long, global = true, value_enum, default_value_t = FormatArg::Table)]
    format: FormatArg,
    /// Directory to write report files into (stdout is always printed).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Table,
    Csv,
    Json,
}

impl From<FormatArg> for ReportFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Table => ReportFormat::Table,
            FormatArg::Csv => ReportFormat::Csv,
            FormatArg::Json => ReportFormat::Json,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the hybrid-loss blend over the nearby/distant scenario.
    LossAblate(LossAblateArgs),
    /// Pruning studies: threshold sensitivity and lazy-update cadence.
    PruneSim(PruneSimArgs),
    /// Grid-search NMS thresholds against ground truth.
    NmsTune(NmsTuneArgs),
    /// Evaluate detections: mAP, recall, PR curves, confusion matrix.
    Eval(EvalArgs),
    /// Gradient-descent a few boxes onto tiny targets with a chosen loss.
    TrainToy(TrainToyArgs),
    /// Exact parameter count of the detection branch and the separable
    /// convolution MAC ratios.
    KernelInfo(KernelInfoArgs),
}

#[derive(Args)]
struct LossAblateArgs {
    /// Blend values to evaluate.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.3, 0.5, 0.7, 1.0])]
    lambdas: Vec<f64>,
}

#[derive(Args)]
struct PruneSimArgs {
    #[command(subcommand)]
    mode: PruneMode,
}

#[derive(Subcommand)]
enum PruneMode {
    /// Sparsity per threshold on one bank or across random banks.
    Theta(ThetaArgs),
    /// Sparsity traces per lazy interval on the drift simulation.
    Lazy(LazyArgs),
}

#[derive(Args)]
struct ThetaArgs {
    /// Thresholds to scan.
    #[arg(long, value_delimiter = ',', default_values_t = [0.10, 0.20, 0.30, 0.85])]
    thetas: Vec<f64>,
    /// Bank shape c_out,c_in,k for random banks.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 64, 3])]
    shape: Vec<usize>,
    /// Evaluate this many random banks (seeds seed..seed+n) instead of one.
    #[arg(long)]
    seeds: Option<u64>,
    /// Load the bank from `<stem>.json` + `<stem>.bin` instead of drawing one.
    #[arg(long)]
    bank_file: Option<PathBuf>,
}

#[derive(Args)]
struct LazyArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [1, 3, 5, 10],
          value_parser = clap::value_parser!(u32).range(1..))]
    intervals: Vec<u32>,
    #[arg(long, value_delimiter = ',', default_values_t = [15, 25, 50],
          value_parser = clap::value_parser!(u32).range(1..))]
    checkpoints: Vec<u32>,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u32).range(1..))]
    epochs: u32,
    #[arg(long, default_value_t = 10)]
    warmup: u32,
    #[arg(long, default_value_t = 0.85)]
    theta: f64,
    /// Number of prototype clusters the filters drift onto.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    prototypes: u64,
    /// Drift progress per epoch (0 disables convergence).
    #[arg(long, default_value_t = 1.0 / 15.0)]
    rate: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args)]
struct NmsTuneArgs {
    /// Detection records (JSONL). Omit to use the built-in crowded scene.
    #[arg(long, requires = "ground_truth")]
    detections: Option<PathBuf>,
    /// Ground-truth records (JSONL).
    #[arg(long)]
    ground_truth: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.001, 0.005, 0.010, 0.050])]
    conf_grid: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.4, 0.5, 0.6, 0.7])]
    iou_grid: Vec<f64>,
    /// Pair count of the built-in crowded scene (the 640px canvas grid
    /// holds up to 196).
    #[arg(long, default_value_t = 24, value_parser = clap::value_parser!(u64).range(1..=196))]
    demo_pairs: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Detection records (JSONL). Omit to run a jittered pseudo-detector
    /// over the ground truth (or over a synthetic scene).
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Ground-truth records (JSONL).
    #[arg(long, conflicts_with = "visdrone")]
    ground_truth: Option<PathBuf>,
    /// Ground truth as a VisDrone annotation file; needs the image size.
    #[arg(long, requires = "image_width", requires = "image_height")]
    visdrone: Option<PathBuf>,
    /// Pixel width of the annotated image.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    image_width: Option<u32>,
    /// Pixel height of the annotated image.
    #[arg(long, value_parser = clap::value_parser!(u32).range(1..))]
    image_height: Option<u32>,
    /// Confidence cut for recall and the confusion matrix.
    #[arg(long, default_value_t = 0.0)]
    conf_threshold: f64,
    /// IoU required for a match at the operating point.
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    /// Image side in pixels; enables the size breakdown.
    #[arg(long)]
    image_size: Option<f64>,
    /// Objects in the synthetic scene.
    #[arg(long, default_value_t = 200)]
    n_objects: usize,
}

#[derive(Args)]
struct TrainToyArgs {
    #[arg(long, value_enum, default_value_t = LossArg::SalNwd)]
    loss: LossArg,
    #[arg(long, value_enum, default_value_t = OffsetArg::Distant)]
    offset: OffsetArg,
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    steps: u64,
    /// Step size; defaults to a per-loss value.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long, default_value_t = 12.8)]
    c: f64,
    #[arg(long, default_value_t = 1e-4)]
    epsilon: f64,
}

#[derive(Args)]
struct KernelInfoArgs {
    /// Channels of the fine-resolution input features.
    #[arg(long, default_value_t = 64)]
    p2_channels: usize,
    /// Channels of the coarse features fused in by upsampling.
    #[arg(long, default_value_t = 128)]
    p3_channels: usize,
    /// Width of the two depthwise-separable blocks.
    #[arg(long, default_value_t = 64)]
    mid_channels: usize,
    /// Channels of the fused output.
    #[arg(long, default_value_t = 64)]
    out_channels: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Iou,
    Ciou,
    Nwd,
    SalNwd,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Iou => LossKind::Iou,
            LossArg::Ciou => LossKind::CIou,
            LossArg::Nwd => LossKind::Nwd,
            LossArg::SalNwd => LossKind::SalNwd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum OffsetArg {
    Nearby,
    Distant,
}

#[derive(Debug)]
enum CliError {
    /// Unreadable or malformed inputs.
    Data(String),
    /// A numeric contract broke (divergence, empty ground truth).
    Invariant(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Data(msg) | CliError::Invariant(msg) => f.write_str(msg),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let usage_ok = matches!(
                err.kind(),
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion
            );
            let _ = err.print();
            return if usage_ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let reports = match &cli.command {
        Command::LossAblate(args) => vec![("lambda_sweep", lambda_sweep(&args.lambdas, cli.seed))],
        Command::PruneSim(args) => match &args.mode {
            PruneMode::Theta(theta) => vec![("theta_sweep", run_theta(theta, cli.seed)?)],
            PruneMode::Lazy(lazy) => {
                if !(lazy.theta > 0.0 && lazy.theta < 1.0) {
                    return Err(CliError::Data(format!(
                        "--theta must lie strictly inside (0, 1), got {}",
                        lazy.theta
                    )));
                }
                if let Some(&last) = lazy.checkpoints.iter().max()
                    && last > lazy.epochs
                {
                    return Err(CliError::Data(format!(
                        "checkpoint {last} lies beyond the simulated {} epochs",
                        lazy.epochs
                    )));
                }
                let drift = DriftSpec {
                    n_prototypes: lazy.prototypes as usize,
                    rate: lazy.rate,
                    noise: lazy.noise,
                    epochs: lazy.epochs,
                    ..Default::default()
                };
                vec![(
                    "lazy_sweep",
                    lazy_sweep(
                        &drift,
                        lazy.theta,
                        lazy.warmup,
                        &lazy.intervals,
                        &lazy.checkpoints,
                        cli.seed,
                    ),
                )]
            }
        },
        Command::NmsTune(args) => vec![("nms_grid", run_nms_tune(args, cli.seed)?)],
        Command::Eval(args) => run_eval(args, cli.seed)?,
        Command::TrainToy(args) => vec![("train_trace", run_train(args, cli.seed)?)],
        Command::KernelInfo(args) => vec![("kernel_info", run_kernel_info(args))],
    };

    let format: ReportFormat = cli.format.into();
    for (name, report) in &reports {
        print!("{}", report.render(format));
        if let Some(dir) = &cli.out_dir {
            emit_to_dir(report, name, format, dir).map_err(|e| CliError::Data(e.to_string()))?;
        }
    }
    Ok(())
}

fn run_theta(args: &ThetaArgs, seed: u64) -> Result<SweepReport, CliError> {
    if args.shape.len() != 3 || args.shape.contains(&0) {
        return Err(CliError::Data(format!(
            "--shape wants positive c_out,c_in,k, got {:?}",
            args.shape
        )));
    }
    if let Some(stem) = &args.bank_file {
        let arr = load_tensor4(stem).map_err(|e| CliError::Data(e.to_string()))?;
        let bank = FilterBank::new(arr).map_err(|e| CliError::Data(e.to_string()))?;
        return Ok(theta_sweep(&bank, &args.thetas));
    }
    let (c_out, c_in, k) = (args.shape[0], args.shape[1], args.shape[2]);
    match args.seeds {
        Some(n) => Ok(theta_sweep_stats((c_out, c_in, k), n, seed, &args.thetas)),
        None => {
            let bank = tinydet_core::prune::random_bank(c_out, c_in, k, seed);
            Ok(theta_sweep(&bank, &args.thetas))
        }
    }
}

fn load_boxes(
    dets_path: &PathBuf,
    gts_path: &PathBuf,
) -> Result<(Vec<Detection>, Vec<GroundTruth>), CliError> {
    let open = |path: &PathBuf| {
        std::fs::File::open(path)
            .map(std::io::BufReader::new)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
    };
    let dets = records::read_detections(open(dets_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", dets_path.display())))?;
    let gts = records::read_ground_truths(open(gts_path)?)
        .map_err(|e| CliError::Data(format!("{}: {e}", gts_path.display())))?;
    Ok((dets, gts))
}

fn run_nms_tune(args: &NmsTuneArgs, seed: u64) -> Result<SweepReport, CliError> {
    let (dets, gts) = match (&args.detections, &args.ground_truth) {
        (Some(d), Some(g)) => load_boxes(d, g)?,
        _ => {
            let (gts, dets) = crowded_tiny_scene(args.demo_pairs as usize, 640, seed);
            (dets, gts)
        }
    };
    let rows = grid_search_nms(&dets, &gts, &args.conf_grid, &args.iou_grid)
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let mut report = SweepReport::new(
        "nms grid search",
        &["rank", "conf_threshold", "iou_threshold", "map50"],
    );
    for (rank, row) in rows.iter().enumerate() {
        report.push_row(vec![
            (rank + 1).into(),
            row.conf_threshold.into(),
            row.iou_threshold.into(),
            row.map50.into(),
        ]);
    }
    Ok(report)
}

fn run_eval(args: &EvalArgs, seed: u64) -> Result<Vec<(&'static str, SweepReport)>, CliError> {
    let gts: Vec<GroundTruth> = if let Some(path) = &args.visdrone {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let image_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let (w, h) = (args.image_width.unwrap(), args.image_height.unwrap());
        visdrone::parse_visdrone_annotations(&text, image_id, w, h)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    } else if let Some(path) = &args.ground_truth {
        let reader = std::fs::File::open(path)
            .map(std::io::BufReader::new)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        records::read_ground_truths(reader)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    } else {
        let spec = SceneSpec {
            n_objects: args.n_objects,
            seed,
            ..Default::default()
        };
        gen_synthetic_scene(&spec)
    };

    let dets: Vec<Detection> = if let Some(path) = &args.detections {
        let reader = std::fs::File::open(path)
            .map(std::io::BufReader::new)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        records::read_detections(reader)
            .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
    } else {
        let side = args.image_size.unwrap_or(640.0) as u32;
        jittered_detections(&gts, &JitterSpec::default(), side, seed ^ 1)
    };
    let opts = EvalOptions {
        conf_threshold: args.conf_threshold,
        iou_threshold: args.iou_threshold,
        image_size: args.image_size,
    };
    let result =
        map_eval_with(&dets, &gts, &opts).map_err(|e| CliError::Invariant(e.to_string()))?;

    let mut summary = SweepReport::new("evaluation summary", &["metric", "value"]);
    summary.push_row(vec!["map50".into(), result.map50.into()]);
    summary.push_row(vec!["map50_95".into(), result.map5095.into()]);
    summary.push_row(vec!["recall".into(), result.recall.into()]);
    for (class, ap) in &result.per_class_ap50 {
        summary.push_row(vec![format!("ap50_class_{class}").into(), (*ap).into()]);
    }
    if let Some(sb) = &result.size_breakdown {
        for (name, value) in [
            ("ap50_small", sb.ap50_small),
            ("ap50_medium", sb.ap50_medium),
            ("ap50_large", sb.ap50_large),
        ] {
            if let Some(v) = value {
                summary.push_row(vec![name.into(), v.into()]);
            }
        }
    }

    let mut curves = SweepReport::new(
        "precision-recall points",
        &["class", "score", "recall", "precision"],
    );
    for (class, points) in &result.pr_curves {
        for p in points {
            curves.push_row(vec![
                (*class).into(),
                p.score.into(),
                p.recall.into(),
                p.precision.into(),
            ]);
        }
    }

    let k = result.confusion.len().saturating_sub(1);
    let mut columns: Vec<String> = vec!["true_class".to_string()];
    columns.extend((0..k).map(|c| format!("pred_{c}")));
    columns.push("background".to_string());
    let column_refs: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut confusion = SweepReport::new("row-normalized confusion", &column_refs);
    for (row_idx, row) in result.confusion.iter().enumerate() {
        let label = if row_idx == k {
            "background".to_string()
        } else {
            format!("class_{row_idx}")
        };
        let mut cells = vec![label.into()];
        cells.extend(row.iter().map(|v| (*v).into()));
        confusion.push_row(cells);
    }

    // Macro F1 against confidence, on the standard 0.05-spaced grid.
    let grid: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    let f1 = f1_confidence_sweep(&dets, &gts, args.iou_threshold, &grid)
        .map_err(|e| CliError::Invariant(e.to_string()))?;
    let mut f1_report = SweepReport::new(
        "f1 against confidence threshold",
        &["threshold", "macro_f1"],
    );
    for (thr, value) in f1.thresholds.iter().zip(&f1.macro_f1) {
        f1_report.push_row(vec![(*thr).into(), (*value).into()]);
    }
    summary.push_row(vec!["best_f1_threshold".into(), f1.best_threshold.into()]);
    summary.push_row(vec!["best_macro_f1".into(), f1.best_f1.into()]);

    Ok(vec![
        ("eval_summary", summary),
        ("pr_curves", curves),
        ("confusion", confusion),
        ("f1_curve", f1_report),
    ])
}

fn run_kernel_info(args: &KernelInfoArgs) -> SweepReport {
    use tinydet_core::msfd::{MsfdConfig, count_params, flop_ratio};
    let cfg = MsfdConfig {
        p2_channels: args.p2_channels,
        p3_channels: args.p3_channels,
        mid_channels: args.mid_channels,
        out_channels: args.out_channels,
        ..Default::default()
    };
    let params = cfg.build(0);
    let mut report = SweepReport::new("detection branch accounting", &["quantity", "value"]);
    report.push_row(vec![
        "ds_block_1_params".into(),
        params.ds1.param_count().into(),
    ]);
    report.push_row(vec![
        "ds_block_2_params".into(),
        params.ds2.param_count().into(),
    ]);
    report.push_row(vec!["se_params".into(), params.se.param_count().into()]);
    report.push_row(vec![
        "fuse_params".into(),
        (params.fuse_weights.param_count() + params.fuse_bias.len()).into(),
    ]);
    report.push_row(vec!["total_params".into(), count_params(&params).into()]);
    report.push_row(vec![
        "mac_ratio_c64_k3".into(),
        flop_ratio(64, 64, 3, 320, 320).into(),
    ]);
    report.push_row(vec![
        "mac_ratio_c128_k3".into(),
        flop_ratio(128, 128, 3, 160, 160).into(),
    ]);
    report
}

fn run_train(args: &TrainToyArgs, seed: u64) -> Result<SweepReport, CliError> {
    let loss: LossKind = args.loss.into();
    let spec = TrainSpec {
        loss,
        lambda: args.lambda,
        c: args.c,
        epsilon: args.epsilon,
        steps: args.steps as usize,
        learning_rate: args.lr.unwrap_or_else(|| loss.default_learning_rate()),
        init_offset: match args.offset {
            OffsetArg::Nearby => InitOffset::Nearby,
            OffsetArg::Distant => InitOffset::Distant,
        },
        seed,
    };
    let trace = toy_train(&spec).map_err(|e| CliError::Invariant(e.to_string()))?;
    let mut report = SweepReport::new("toy training trace", &["step", "loss", "center_error_px"]);
    for (step, (loss, err)) in trace.losses.iter().zip(&trace.center_errors_px).enumerate() {
        report.push_row(vec![(step + 1).into(), (*loss).into(), (*err).into()]);
    }
    Ok(report)
}
