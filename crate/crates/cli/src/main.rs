//! Command-line front end for the one-step-diffusion video codec: encoding,
//! decoding, staged training, curve comparison, the method ablation, parameter
//! sweeps, and the decode-time benchmark.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dvco::config::{ModelConfig, ScheduleConfig};
use dvco::dataset::ClipSpec;
use dvco::error::{CodecError, Result};
use dvco::eval::{self, Curve, Method, SweepParam};
use dvco::model::CodecModel;
use dvco::motion::MotionMode;
use dvco::pipeline::{self, PipelineOptions, RefineMode};
use dvco::plot::{self, Series, PALETTE};
use dvco::train::{self, StageId, TrainConfig};
use dvco::video::{self, Layout, VideoSequence};

#[derive(Parser)]
#[command(
    name = "dvco",
    version,
    about = "One-step-diffusion perceptual video codec",
    long_about = "Encode and decode video with a conditional neural codec whose latent \
reconstruction is refined by a single denoising step. All computation is seeded and \
single-threaded; given an explicit --seed (or --deterministic), every run is bit-reproducible."
)]
struct Cli {
    /// RNG seed. Omitted: drawn from OS entropy, unless --deterministic.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pin all seeded choices: an omitted --seed becomes 0 instead of entropy.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a video into a bitstream file.
    Encode(EncodeArgs),
    /// Reconstruct video frames from a bitstream file.
    Decode(DecodeArgs),
    /// Run one training stage and write a checkpoint.
    Train(TrainArgs),
    /// Compare two rate-quality curve CSVs with BD statistics.
    Eval(EvalArgs),
    /// Run ablation arms over trained checkpoints and report BD tables.
    Ablate(AblateArgs),
    /// Retrain or re-evaluate across one finetuning parameter axis.
    Sweep(SweepArgs),
    /// Measure the median wall time of decoding one predicted frame.
    BenchDecode(BenchArgs),
}

/// Refinement settings shared by encoder and decoder. They are run options,
/// not bitstream fields: decoding must use the same settings as encoding.
#[derive(Args)]
struct RefineArgs {
    /// Latent refinement: none, one-step, or multi-step.
    #[arg(long, default_value = "one-step")]
    refine: String,

    /// Denoising timestep for one-step refinement.
    #[arg(long, default_value_t = 0)]
    timestep: usize,

    /// Sampling steps for multi-step refinement.
    #[arg(long, default_value_t = 50)]
    steps: usize,

    /// Noising start timestep for multi-step refinement.
    #[arg(long, default_value_t = 250)]
    n_start: usize,

    /// Disable the temporal-context conditioning adapter.
    #[arg(long)]
    no_tca: bool,

    /// Motion estimator: learned or block.
    #[arg(long, default_value = "learned")]
    motion: String,
}

impl RefineArgs {
    fn options(&self, seed: u64) -> Result<PipelineOptions> {
        let refine = match self.refine.as_str() {
            "none" => RefineMode::None,
            "one-step" => RefineMode::OneStep { n: self.timestep },
            "multi-step" => RefineMode::MultiStep {
                steps: self.steps,
                n_start: self.n_start,
                seed,
            },
            other => {
                return Err(CodecError::config(format!(
                    "unknown refine mode '{other}' (expected none, one-step, or multi-step)"
                )))
            }
        };
        let motion_mode = match self.motion.as_str() {
            "learned" => MotionMode::Learned,
            "block" => MotionMode::BlockMatching,
            other => {
                return Err(CodecError::config(format!(
                    "unknown motion mode '{other}' (expected learned or block)"
                )))
            }
        };
        Ok(PipelineOptions { refine, tca_enabled: !self.no_tca, motion_mode })
    }
}

fn parse_layout(s: &str) -> Result<Layout> {
    match s {
        "png-dir" | "png_dir" => Ok(Layout::PngDir),
        "yuv420" => Ok(Layout::Yuv420),
        other => Err(CodecError::config(format!(
            "unknown layout '{other}' (expected png-dir or yuv420)"
        ))),
    }
}

#[derive(Args)]
struct EncodeArgs {
    /// Source video: a directory of PNGs or a raw .yuv file with a TOML sidecar.
    #[arg(long)]
    input: PathBuf,

    /// Input layout: png-dir or yuv420.
    #[arg(long, default_value = "png-dir")]
    layout: String,

    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,

    /// Output bitstream file.
    #[arg(long)]
    output: PathBuf,

    /// Spacing between independently decodable frames.
    #[arg(long, default_value_t = 32)]
    intra_period: usize,

    #[command(flatten)]
    refine: RefineArgs,
}

#[derive(Args)]
struct DecodeArgs {
    /// Bitstream file produced by `encode`.
    #[arg(long)]
    input: PathBuf,

    /// The checkpoint the stream was encoded with.
    #[arg(long)]
    model: PathBuf,

    /// Directory for the reconstructed PNG frames.
    #[arg(long)]
    output: PathBuf,

    #[command(flatten)]
    refine: RefineArgs,
}

#[derive(Args)]
struct TrainArgs {
    /// Training stage: base, 8, or 9. Falls back to the config file's
    /// `stage` key.
    #[arg(long)]
    stage: Option<String>,

    /// Rate point index into the lambda ladder (0..=3). Falls back to the
    /// config file's `lambda_idx` key, then 0.
    #[arg(long)]
    lambda_idx: Option<usize>,

    /// Checkpoint to continue from (required for stages 8 and 9).
    #[arg(long)]
    init: Option<PathBuf>,

    /// Output checkpoint path.
    #[arg(long)]
    output: PathBuf,

    /// TOML file overriding the built-in training configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the iteration count of the selected stage.
    #[arg(long)]
    iters: Option<usize>,

    /// Model size for a fresh base-stage model: tiny or default.
    #[arg(long, default_value = "tiny")]
    model_size: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Anchor curve CSV (header: bpp,metric1,...).
    #[arg(long)]
    anchor: PathBuf,

    /// Test curve CSV to compare against the anchor.
    #[arg(long)]
    test: PathBuf,

    /// Optional report CSV path; stdout otherwise.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ClipArgs {
    /// Number of held-out synthetic clips to evaluate on.
    #[arg(long, default_value_t = 2)]
    clips: usize,

    /// Frames per clip.
    #[arg(long, default_value_t = 4)]
    frames: usize,

    /// Square clip size in pixels (multiple of 64).
    #[arg(long, default_value_t = 64)]
    size: usize,

    /// Spacing between independently decodable frames.
    #[arg(long, default_value_t = 32)]
    intra_period: usize,
}

impl ClipArgs {
    fn spec(&self) -> ClipSpec {
        ClipSpec {
            frames: self.frames,
            height: self.size,
            width: self.size,
            intra_period: self.intra_period,
        }
    }
}

#[derive(Args)]
struct AblateArgs {
    /// Ablation arms to run (A, B, C, D, full); repeatable.
    #[arg(long = "method", required = true)]
    methods: Vec<String>,

    /// Stage-eight checkpoints, one per rate point.
    #[arg(long = "stage8")]
    stage8: Vec<PathBuf>,

    /// Stage-nine checkpoints, one per rate point (the `full` anchor).
    #[arg(long = "stage9", required = true)]
    stage9: Vec<PathBuf>,

    /// Warm decode-timing runs per method.
    #[arg(long, default_value_t = 20)]
    bench_runs: usize,

    #[command(flatten)]
    clip: ClipArgs,

    /// Directory for the report CSV, per-method curves, and plots.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Swept axis: lora_rank, timestep, or lora_placement.
    #[arg(long)]
    param: String,

    /// Comma-separated values; defaults to the axis' standard ladder.
    #[arg(long)]
    values: Option<String>,

    /// Base-stage checkpoint to retrain from (lora_rank / lora_placement).
    #[arg(long)]
    base: Option<PathBuf>,

    /// Stage-eight checkpoint to re-evaluate (timestep).
    #[arg(long)]
    stage8: Option<PathBuf>,

    /// TOML file overriding the built-in training configuration.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the stage-8 retraining iteration count.
    #[arg(long)]
    iters: Option<usize>,

    #[command(flatten)]
    clip: ClipArgs,

    /// Directory for the report CSV and plots.
    #[arg(long)]
    output: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    model: PathBuf,

    /// Timing runs (at least 20).
    #[arg(long, default_value_t = 20)]
    runs: usize,

    #[command(flatten)]
    clip: ClipArgs,

    #[command(flatten)]
    refine: RefineArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let seed = match (cli.seed, cli.deterministic) {
        (Some(s), _) => s,
        (None, true) => 0,
        (None, false) => rand::random(),
    };
    let run = match cli.cmd {
        Cmd::Encode(a) => cmd_encode(a, seed),
        Cmd::Decode(a) => cmd_decode(a, seed),
        Cmd::Train(a) => cmd_train(a, seed),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a, seed),
        Cmd::Sweep(a) => cmd_sweep(a, seed),
        Cmd::BenchDecode(a) => cmd_bench(a, seed),
    };
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_encode(a: EncodeArgs, seed: u64) -> Result<()> {
    let layout = parse_layout(&a.layout)?;
    let opts = a.refine.options(seed)?;
    let model = CodecModel::load(&a.model)?;
    let seq = video::load_sequence(&a.input, layout, a.intra_period)?;
    let enc = pipeline::encode_sequence(&model, &seq, &opts)?;
    std::fs::write(&a.output, &enc.bytes)?;
    println!(
        "encoded {} frames, {} bytes, {:.4} bpp -> {}",
        seq.len(),
        enc.bytes.len(),
        enc.bpp,
        a.output.display()
    );
    for s in &enc.stats {
        println!(
            "  frame {:>3} {:<9} motion {:>8} bits, latent {:>8} bits",
            s.index,
            format!("{:?}", s.kind).to_lowercase(),
            s.motion_bits,
            s.latent_bits
        );
    }
    Ok(())
}

fn cmd_decode(a: DecodeArgs, seed: u64) -> Result<()> {
    let opts = a.refine.options(seed)?;
    let model = CodecModel::load(&a.model)?;
    let bytes = std::fs::read(&a.input)?;
    let out = pipeline::decode_sequence(&model, &bytes, &opts)?;
    let seq = VideoSequence {
        frames: out.frames,
        intra_period: out.header.intra_period as usize,
        source_id: a.input.display().to_string(),
    };
    video::write_frames(&seq, &a.output)?;
    println!(
        "decoded {} frames ({}x{}) -> {}",
        seq.len(),
        out.header.width,
        out.header.height,
        a.output.display()
    );
    Ok(())
}

fn load_train_config(path: Option<&Path>, seed: u64) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?)
            .map_err(|e| CodecError::config(format!("training config {}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    cfg.seed = seed;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs, seed: u64) -> Result<()> {
    let mut cfg = load_train_config(a.config.as_deref(), seed)?;
    let stage_name = a.stage.clone().or_else(|| cfg.stage.clone()).ok_or_else(|| {
        CodecError::config("no training stage selected; pass --stage or set `stage` in the config file")
    })?;
    let stage = StageId::parse(&stage_name)?;
    let lambda_idx = a.lambda_idx.or(cfg.lambda_idx).unwrap_or(0);
    if let Some(n) = a.iters {
        match stage {
            StageId::Base => cfg.base_iters = n,
            StageId::Eight => cfg.stage8_iters = n,
            StageId::Nine => cfg.stage9_iters = n,
        }
    }
    let mut model = match (&a.init, stage) {
        (Some(p), _) => CodecModel::load(p)?,
        (None, StageId::Base) => {
            let mc = match a.model_size.as_str() {
                "tiny" => ModelConfig::tiny(),
                "default" => ModelConfig::default(),
                other => {
                    return Err(CodecError::config(format!(
                        "unknown model size '{other}' (expected tiny or default)"
                    )))
                }
            };
            CodecModel::new(mc, ScheduleConfig::default(), lambda_idx, seed)?
        }
        (None, _) => {
            return Err(CodecError::config(
                "stages 8 and 9 continue from a checkpoint; pass --init",
            ))
        }
    };
    let report = train::run_stage(&mut model, stage, &cfg)?;
    model.save(&a.output)?;
    println!(
        "stage {} done: {} iters, first loss {:.6}, final loss {:.6}, smoothed drop {:.1}%",
        stage_name,
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.final_loss(),
        100.0 * report.smoothed_drop(report.losses.len() / 10 + 1)
    );
    println!("checkpoint -> {}", a.output.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let anchor = Curve::read_csv(&a.anchor)?;
    let test = Curve::read_csv(&a.test)?;
    let rows = eval::compare_curves(&anchor, &test)?;
    let mut csv = String::from("metric,bd_rate_percent,bd_metric\n");
    for r in &rows {
        let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
        csv.push_str(&format!(
            "{},{},{}\n",
            r.metric,
            fmt(r.bd_rate_percent),
            fmt(r.bd_metric)
        ));
    }
    match &a.output {
        Some(p) => {
            std::fs::write(p, &csv)?;
            println!("report -> {}", p.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn load_models(paths: &[PathBuf]) -> Result<Vec<CodecModel>> {
    paths.iter().map(|p| CodecModel::load(p)).collect()
}

fn cmd_ablate(a: AblateArgs, seed: u64) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| Method::parse(m))
        .collect::<Result<Vec<_>>>()?;
    let stage8 = load_models(&a.stage8)?;
    let stage9 = load_models(&a.stage9)?;
    let s8: Vec<&CodecModel> = stage8.iter().collect();
    let s9: Vec<&CodecModel> = stage9.iter().collect();
    let clips = eval::heldout_eval_clips(seed, a.clip.clips, &a.clip.spec())?;
    let report = eval::run_ablation(&methods, &s8, &s9, &clips, seed, a.bench_runs)?;

    std::fs::create_dir_all(&a.output)?;
    let table = report.to_csv();
    std::fs::write(a.output.join("ablation.csv"), &table)?;
    for m in &report.methods {
        m.curve
            .write_csv(&a.output.join(format!("curve_{}.csv", m.method.name())))?;
    }
    for metric in eval::CURVE_METRICS {
        let mut series = Vec::new();
        for (i, m) in report.methods.iter().enumerate() {
            series.push(plot::series_from_curve(
                &m.curve,
                metric,
                PALETTE[i % PALETTE.len()],
            )?);
        }
        plot::save_chart(
            &a.output.join(format!("ablation_{metric}.png")),
            &series,
            640,
            480,
        )?;
    }
    print!("{table}");
    println!("report -> {}", a.output.display());
    Ok(())
}

fn cmd_sweep(a: SweepArgs, seed: u64) -> Result<()> {
    let param = SweepParam::parse(&a.param)?;
    let values: Vec<String> = match &a.values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).collect(),
        None => param.default_values(),
    };
    let mut cfg = load_train_config(a.config.as_deref(), seed)?;
    if let Some(n) = a.iters {
        cfg.stage8_iters = n;
    }
    let base = a.base.as_deref().map(CodecModel::load).transpose()?;
    let stage8 = a.stage8.as_deref().map(CodecModel::load).transpose()?;
    let clips = eval::heldout_eval_clips(seed, a.clip.clips, &a.clip.spec())?;
    let report = eval::sweep(param, &values, base.as_ref(), stage8.as_ref(), &cfg, &clips)?;

    std::fs::create_dir_all(&a.output)?;
    let table = report.to_csv();
    std::fs::write(a.output.join(format!("sweep_{}.csv", param.name())), &table)?;
    for metric in eval::CURVE_METRICS {
        // Placement values have no numeric axis; plot against the row index.
        let points: Vec<(f64, f64)> = report
            .rows
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let x = r.value.parse::<f64>().unwrap_or(i as f64);
                (x, r.point.metrics.get(metric).copied().unwrap_or(f64::NAN))
            })
            .collect();
        plot::save_chart(
            &a.output.join(format!("sweep_{}_{metric}.png", param.name())),
            &[Series { points, color: PALETTE[0] }],
            640,
            480,
        )?;
    }
    print!("{table}");
    println!("report -> {}", a.output.display());
    Ok(())
}

fn cmd_bench(a: BenchArgs, seed: u64) -> Result<()> {
    let opts = a.refine.options(seed)?;
    let model = CodecModel::load(&a.model)?;
    let seq = dvco::dataset::heldout_clip(seed, 0, &a.clip.spec())?;
    let res = eval::bench_p_frame_decode(&model, &seq, &opts, a.runs)?;
    println!(
        "p-frame decode: median {:.6} s over {} warm runs, {} denoiser calls",
        res.median_s, res.runs, res.unet_calls_per_p
    );
    Ok(())
}
