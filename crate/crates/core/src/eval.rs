//! Rate–quality curves, curve CSV I/O, Bjøntegaard comparison of curves,
//! the method ablation runner, parameter sweeps, and the per-P-frame decode
//! benchmark.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use crate::bd;
use crate::container;
use crate::dataset::{self, ClipSpec};
use crate::error::{CodecError, Result};
use crate::metrics;
use crate::model::{CodecModel, LoraPlacement, TrainStage};
use crate::pipeline::{
    decode_record, encode_sequence, DecoderState, PipelineOptions, RefineMode,
};
use crate::train::{self, TrainConfig};
use crate::video::VideoSequence;

/// Metric names evaluated for every rate point, in report column order.
pub const CURVE_METRICS: [&str; 6] =
    ["psnr", "ms_ssim", "lpips_proxy", "dists_proxy", "kid_proxy", "fid_proxy"];

/// Metrics where a smaller value means better quality.
pub fn lower_is_better(metric: &str) -> bool {
    matches!(
        metric,
        "lpips_proxy" | "dists_proxy" | "kid_proxy" | "fid_proxy" | "lpips" | "dists" | "kid"
            | "fid"
    )
}

/// One operating point of a codec: its rate and every measured metric.
#[derive(Debug, Clone)]
pub struct RatePoint {
    pub bpp: f64,
    pub metrics: BTreeMap<String, f64>,
}

/// A rate–quality curve with a stable metric column order.
#[derive(Debug, Clone)]
pub struct Curve {
    pub metric_names: Vec<String>,
    pub points: Vec<RatePoint>,
}

impl Curve {
    pub fn new(metric_names: Vec<String>) -> Curve {
        Curve { metric_names, points: Vec::new() }
    }

    /// Points sorted by ascending bpp.
    pub fn sorted(&self) -> Curve {
        let mut c = self.clone();
        c.points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).unwrap());
        c
    }

    pub fn rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.bpp).collect()
    }

    pub fn series(&self, metric: &str) -> Option<Vec<f64>> {
        let mut out = Vec::with_capacity(self.points.len());
        for p in &self.points {
            out.push(*p.metrics.get(metric)?);
        }
        Some(out)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("bpp");
        for m in &self.metric_names {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for p in &self.points {
            s.push_str(&format!("{}", p.bpp));
            for m in &self.metric_names {
                s.push(',');
                s.push_str(&format!("{}", p.metrics.get(m).copied().unwrap_or(f64::NAN)));
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Curve> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| CodecError::format("curve file is empty"))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.first() != Some(&"bpp") || cols.len() < 2 {
            return Err(CodecError::format(format!(
                "curve header must start with 'bpp' and name at least one metric, got '{header}'"
            )));
        }
        let metric_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let mut curve = Curve::new(metric_names.clone());
        for (ln, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').map(str::trim).collect();
            if vals.len() != cols.len() {
                return Err(CodecError::format(format!(
                    "curve row {} has {} fields, expected {}",
                    ln + 2,
                    vals.len(),
                    cols.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| {
                    CodecError::format(format!("invalid number '{s}' in curve row {}", ln + 2))
                })
            };
            let bpp = parse(vals[0])?;
            let mut map = BTreeMap::new();
            for (name, v) in metric_names.iter().zip(&vals[1..]) {
                map.insert(name.clone(), parse(v)?);
            }
            curve.points.push(RatePoint { bpp, metrics: map });
        }
        Ok(curve)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Curve> {
        Curve::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Bjøntegaard comparison of two curves for one metric.
#[derive(Debug, Clone)]
pub struct BdRow {
    pub metric: String,
    pub bd_rate_percent: Option<f64>,
    pub bd_metric: Option<f64>,
}

/// Compare `test` against `anchor` on every metric both curves carry.
/// Curves that violate the Bjøntegaard preconditions surface as errors.
pub fn compare_curves(anchor: &Curve, test: &Curve) -> Result<Vec<BdRow>> {
    let a = anchor.sorted();
    let t = test.sorted();
    let mut rows = Vec::new();
    for m in &a.metric_names {
        let (Some(qa), Some(qt)) = (a.series(m), t.series(m)) else { continue };
        let lb = lower_is_better(m);
        rows.push(BdRow {
            metric: m.clone(),
            bd_rate_percent: bd::bd_rate(&a.rates(), &qa, &t.rates(), &qt, lb)?,
            bd_metric: bd::bd_metric(&a.rates(), &qa, &t.rates(), &qt, lb)?,
        });
    }
    if rows.is_empty() {
        return Err(CodecError::config("curves share no metric columns"));
    }
    Ok(rows)
}

// ----- rate-point evaluation ------------------------------------------------

/// Encode `clips` with one model and measure the mean rate and frame metrics
/// of the local reconstructions (bit-exact with a decoder's output).
pub fn evaluate_model(
    model: &CodecModel,
    clips: &[VideoSequence],
    opts: &PipelineOptions,
) -> Result<RatePoint> {
    if clips.is_empty() {
        return Err(CodecError::config("evaluation needs at least one clip"));
    }
    let mut total_bits = 0.0;
    let mut total_pixels = 0.0;
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut frames = 0usize;
    for seq in clips {
        let enc = encode_sequence(model, seq, opts)?;
        let (h, w) = seq.orig_size();
        total_bits += enc.bytes.len() as f64 * 8.0;
        total_pixels += (h * w * seq.len()) as f64;
        for (src, rec) in seq.frames.iter().zip(&enc.frames) {
            let x = src.cropped();
            let y = rec.cropped();
            *sums.entry("psnr".into()).or_default() += metrics::psnr(&x, &y);
            *sums.entry("ms_ssim".into()).or_default() += metrics::ms_ssim(&x, &y);
            *sums.entry("lpips_proxy".into()).or_default() += metrics::lpips_proxy(&x, &y);
            *sums.entry("dists_proxy".into()).or_default() += metrics::dists_proxy(&x, &y);
            *sums.entry("kid_proxy".into()).or_default() += metrics::kid_proxy(&x, &y);
            *sums.entry("fid_proxy".into()).or_default() += metrics::fid_proxy(&x, &y);
            frames += 1;
        }
    }
    let metrics = sums.into_iter().map(|(k, v)| (k, v / frames as f64)).collect();
    Ok(RatePoint { bpp: total_bits / total_pixels, metrics })
}

/// Build a curve from one model per rate point.
pub fn curve_for_models(
    models: &[&CodecModel],
    clips: &[VideoSequence],
    opts: &PipelineOptions,
) -> Result<Curve> {
    let mut curve = Curve::new(CURVE_METRICS.iter().map(|s| s.to_string()).collect());
    for m in models {
        curve.points.push(evaluate_model(m, clips, opts)?);
    }
    Ok(curve.sorted())
}

// ----- ablation -------------------------------------------------------------

/// Ablation arms: no refinement, one-step without the adapter, one-step with
/// the adapter, the 50-step baseline, and the fully finetuned codec.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    A,
    B,
    C,
    D,
    Full,
}

/// Steps and noising start of the multi-step baseline arm.
pub const MSD_STEPS: usize = 50;
pub const MSD_START: usize = 250;

impl Method {
    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "A" | "a" => Ok(Method::A),
            "B" | "b" => Ok(Method::B),
            "C" | "c" => Ok(Method::C),
            "D" | "d" => Ok(Method::D),
            "full" => Ok(Method::Full),
            other => Err(CodecError::config(format!(
                "unknown ablation method '{other}' (expected A, B, C, D, or full)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::A => "A",
            Method::B => "B",
            Method::C => "C",
            Method::D => "D",
            Method::Full => "full",
        }
    }

    /// Run options for this arm. `seed` drives the multi-step noise.
    pub fn options(&self, seed: u64) -> PipelineOptions {
        let refine = match self {
            Method::A => RefineMode::None,
            Method::B | Method::C | Method::Full => RefineMode::OneStep { n: 0 },
            Method::D => RefineMode::MultiStep { steps: MSD_STEPS, n_start: MSD_START, seed },
        };
        PipelineOptions { refine, tca_enabled: !matches!(self, Method::B), ..Default::default() }
    }

    /// Denoiser invocations one decoded P-frame must cost.
    pub fn expected_unet_calls(&self) -> u64 {
        match self {
            Method::A => 0,
            Method::B | Method::C | Method::Full => 1,
            Method::D => MSD_STEPS as u64,
        }
    }

    /// Whether this arm runs on the stage-eight or the stage-nine models.
    pub fn wants_stage(&self) -> TrainStage {
        match self {
            Method::Full => TrainStage::Nine,
            _ => TrainStage::Eight,
        }
    }
}

/// Per-method ablation outcome.
#[derive(Debug)]
pub struct MethodReport {
    pub method: Method,
    pub curve: Curve,
    /// BD-rate (percent) against the `full` anchor per metric; `None` is NA.
    pub bd_rates: BTreeMap<String, Option<f64>>,
    pub bd_avg: Option<f64>,
    pub p_frame_decode_s: f64,
    pub unet_calls_per_p: u64,
}

#[derive(Debug)]
pub struct AblationReport {
    pub methods: Vec<MethodReport>,
}

/// Metrics whose BD-rates make up the ablation table and its Avg column.
pub const ABLATION_BD_METRICS: [&str; 4] =
    ["dists_proxy", "lpips_proxy", "kid_proxy", "fid_proxy"];

fn bd_against_anchor(anchor: &Curve, test: &Curve) -> (BTreeMap<String, Option<f64>>, Option<f64>) {
    let mut rates = BTreeMap::new();
    let mut avail = Vec::new();
    for m in ABLATION_BD_METRICS {
        let v = match (anchor.series(m), test.series(m)) {
            (Some(qa), Some(qt)) => bd::bd_rate(
                &anchor.sorted().rates(),
                &qa,
                &test.sorted().rates(),
                &qt,
                lower_is_better(m),
            )
            .ok()
            .flatten(),
            _ => None,
        };
        if let Some(x) = v {
            avail.push(x);
        }
        rates.insert(m.to_string(), v);
    }
    let avg = if avail.is_empty() {
        None
    } else {
        Some(avail.iter().sum::<f64>() / avail.len() as f64)
    };
    (rates, avg)
}

fn check_models(models: &[&CodecModel], stage: TrainStage, what: &str) -> Result<()> {
    if models.is_empty() {
        return Err(CodecError::config(format!("missing {what} checkpoints")));
    }
    for m in models {
        if m.stage() != stage {
            return Err(CodecError::config(format!(
                "{what} checkpoint is at stage {:?}, expected {stage:?}",
                m.stage()
            )));
        }
    }
    Ok(())
}

/// Run the requested ablation arms. `stage8`/`stage9` hold one model per
/// rate point (λ); the anchor is always the `full` arm on the stage-nine
/// models. Decode timing is the median over `bench_runs` warm runs of one
/// P-frame. BD entries degrade to NA when a toy curve violates the
/// Bjøntegaard preconditions.
pub fn run_ablation(
    methods: &[Method],
    stage8: &[&CodecModel],
    stage9: &[&CodecModel],
    clips: &[VideoSequence],
    seed: u64,
    bench_runs: usize,
) -> Result<AblationReport> {
    check_models(stage9, TrainStage::Nine, "stage-nine")?;
    if methods.iter().any(|m| *m != Method::Full) {
        check_models(stage8, TrainStage::Eight, "stage-eight")?;
    }
    let anchor = curve_for_models(stage9, clips, &Method::Full.options(seed))?;
    let mut out = Vec::new();
    for &method in methods {
        let models = match method.wants_stage() {
            TrainStage::Nine => stage9,
            _ => stage8,
        };
        let opts = method.options(seed);
        let curve = curve_for_models(models, clips, &opts)?;
        let (bd_rates, bd_avg) = bd_against_anchor(&anchor, &curve);
        let (p_frame_decode_s, unet_calls_per_p) =
            time_p_frame(models[0], &clips[0], &opts, bench_runs)?;
        out.push(MethodReport {
            method,
            curve,
            bd_rates,
            bd_avg,
            p_frame_decode_s,
            unet_calls_per_p,
        });
    }
    Ok(AblationReport { methods: out })
}

impl AblationReport {
    /// Table-style CSV: one row per method, BD-rate columns plus Avg,
    /// decode time, and the measured denoiser call count.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for m in ABLATION_BD_METRICS {
            s.push_str(&format!(",bd_rate_{m}"));
        }
        s.push_str(",bd_rate_avg,p_frame_decode_s,unet_calls_per_p\n");
        for r in &self.methods {
            s.push_str(r.method.name());
            for m in ABLATION_BD_METRICS {
                match r.bd_rates.get(m).copied().flatten() {
                    Some(v) => s.push_str(&format!(",{v:.4}")),
                    None => s.push_str(",NA"),
                }
            }
            match r.bd_avg {
                Some(v) => s.push_str(&format!(",{v:.4}")),
                None => s.push_str(",NA"),
            }
            s.push_str(&format!(",{:.6},{}\n", r.p_frame_decode_s, r.unet_calls_per_p));
        }
        s
    }
}

// ----- decode benchmark -----------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchResult {
    pub median_s: f64,
    pub runs: usize,
    pub unet_calls_per_p: u64,
}

/// Median wall time of decoding one P-frame (entropy decode through pixel
/// decode), after warmup, plus the denoiser call count of a single decode.
pub fn bench_p_frame_decode(
    model: &CodecModel,
    seq: &VideoSequence,
    opts: &PipelineOptions,
    runs: usize,
) -> Result<BenchResult> {
    let (median_s, calls) = time_p_frame(model, seq, opts, runs.max(20))?;
    Ok(BenchResult { median_s, runs: runs.max(20), unet_calls_per_p: calls })
}

fn time_p_frame(
    model: &CodecModel,
    seq: &VideoSequence,
    opts: &PipelineOptions,
    runs: usize,
) -> Result<(f64, u64)> {
    let enc = encode_sequence(model, seq, opts)?;
    let (header, records) = container::read_bitstream(&enc.bytes)?;
    let p_index = records
        .iter()
        .position(|r| r.kind == container::FrameKind::Predicted)
        .ok_or_else(|| CodecError::config("benchmark clip has no predicted frame"))?;
    // Decode up to the P-frame once to obtain its reference state.
    let (oh, ow) = (header.height as usize, header.width as usize);
    let mut state: Option<DecoderState> = None;
    for (i, rec) in records[..p_index].iter().enumerate() {
        let (_, next) = decode_record(model, rec, state.as_ref(), i, oh, ow, opts)?;
        state = Some(next);
    }
    let st = state.expect("P-frame implies a preceding reference");
    let rec = &records[p_index];

    model.unet.reset_calls();
    decode_record(model, rec, Some(&st), p_index, oh, ow, opts)?;
    let calls = model.unet.call_count();

    for _ in 0..3 {
        decode_record(model, rec, Some(&st), p_index, oh, ow, opts)?;
    }
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        decode_record(model, rec, Some(&st), p_index, oh, ow, opts)?;
        times.push(t0.elapsed().as_secs_f64());
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    Ok((median, calls))
}

// ----- sweeps ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    LoraRank,
    Timestep,
    LoraPlacement,
}

impl SweepParam {
    pub fn parse(s: &str) -> Result<SweepParam> {
        match s {
            "lora_rank" => Ok(SweepParam::LoraRank),
            "timestep" => Ok(SweepParam::Timestep),
            "lora_placement" => Ok(SweepParam::LoraPlacement),
            other => Err(CodecError::config(format!(
                "unknown sweep parameter '{other}' (expected lora_rank, timestep, or lora_placement)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParam::LoraRank => "lora_rank",
            SweepParam::Timestep => "timestep",
            SweepParam::LoraPlacement => "lora_placement",
        }
    }

    /// Default value list when the caller supplies none explicitly.
    pub fn default_values(&self) -> Vec<String> {
        match self {
            SweepParam::LoraRank => vec!["4".into(), "8".into(), "16".into()],
            SweepParam::Timestep => vec!["0".into(), "250".into(), "500".into()],
            SweepParam::LoraPlacement => {
                vec!["unet_only".into(), "encoder_too".into(), "decoder_too".into()]
            }
        }
    }
}

#[derive(Debug)]
pub struct SweepRow {
    pub value: String,
    /// Total LoRA parameter count of the evaluated model (0 when LoRA is
    /// not part of the swept configuration axis).
    pub lora_params: usize,
    pub point: RatePoint,
    pub is_default: bool,
}

#[derive(Debug)]
pub struct SweepReport {
    pub param: SweepParam,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},default,lora_params,bpp", self.param.name());
        for m in CURVE_METRICS {
            s.push(',');
            s.push_str(m);
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{}",
                r.value,
                if r.is_default { 1 } else { 0 },
                r.lora_params,
                r.point.bpp
            ));
            for m in CURVE_METRICS {
                s.push(',');
                s.push_str(&format!("{}", r.point.metrics.get(m).copied().unwrap_or(f64::NAN)));
            }
            s.push('\n');
        }
        s
    }
}

fn lora_param_total(model: &CodecModel) -> usize {
    model
        .store
        .params()
        .iter()
        .filter(|p| p.name().contains(".lora_"))
        .map(|p| p.len())
        .sum()
}

/// Clone a model through its serialized checkpoint form.
fn replicate(model: &CodecModel) -> Result<CodecModel> {
    CodecModel::from_bytes(&model.to_bytes()?)
}

/// Sweep one finetuning axis. Rank and placement values retrain stage eight
/// from `base_model` (a base-stage checkpoint) with `train_cfg`; timestep
/// values re-evaluate `stage8_model` at different refinement timesteps. An
/// empty `values` list is an input error.
pub fn sweep(
    param: SweepParam,
    values: &[String],
    base_model: Option<&CodecModel>,
    stage8_model: Option<&CodecModel>,
    train_cfg: &TrainConfig,
    clips: &[VideoSequence],
) -> Result<SweepReport> {
    if values.is_empty() {
        return Err(CodecError::config("sweep needs at least one value"));
    }
    let mut rows = Vec::new();
    match param {
        SweepParam::Timestep => {
            let model = stage8_model
                .ok_or_else(|| CodecError::config("timestep sweep needs a stage-eight model"))?;
            check_models(&[model], TrainStage::Eight, "stage-eight")?;
            for v in values {
                let n: usize = v.parse().map_err(|_| {
                    CodecError::config(format!("invalid timestep '{v}'"))
                })?;
                let opts = PipelineOptions {
                    refine: RefineMode::OneStep { n },
                    ..Default::default()
                };
                let point = evaluate_model(model, clips, &opts)?;
                rows.push(SweepRow {
                    value: v.clone(),
                    lora_params: lora_param_total(model),
                    point,
                    is_default: n == 0,
                });
            }
        }
        SweepParam::LoraRank | SweepParam::LoraPlacement => {
            let base = base_model
                .ok_or_else(|| CodecError::config(format!(
                    "{} sweep needs a base-stage model to retrain from",
                    param.name()
                )))?;
            check_models(&[base], TrainStage::Base, "base-stage")?;
            for v in values {
                let mut cfg = train_cfg.clone();
                let is_default = match param {
                    SweepParam::LoraRank => {
                        let r: usize = v.parse().map_err(|_| {
                            CodecError::config(format!("invalid LoRA rank '{v}'"))
                        })?;
                        cfg.lora_rank = r;
                        r == base.cfg.lora_rank
                    }
                    SweepParam::LoraPlacement => {
                        cfg.lora_placement = LoraPlacement::parse(v)?;
                        cfg.lora_placement == LoraPlacement::UnetOnly
                    }
                    SweepParam::Timestep => unreachable!(),
                };
                let mut model = replicate(base)?;
                train::run_stage8(&mut model, &cfg)?;
                let point =
                    evaluate_model(&model, clips, &PipelineOptions::default())?;
                rows.push(SweepRow {
                    value: v.clone(),
                    lora_params: lora_param_total(&model),
                    point,
                    is_default,
                });
            }
        }
    }
    Ok(SweepReport { param, rows })
}

/// Held-out clips shared by the ablation and sweep drivers.
pub fn heldout_eval_clips(seed: u64, count: usize, spec: &ClipSpec) -> Result<Vec<VideoSequence>> {
    (0..count).map(|i| dataset::heldout_clip(seed, i, spec)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, ScheduleConfig};

    fn curve(points: &[(f64, f64, f64)]) -> Curve {
        let mut c = Curve::new(vec!["psnr".into(), "lpips_proxy".into()]);
        for &(bpp, q, l) in points {
            let mut m = BTreeMap::new();
            m.insert("psnr".to_string(), q);
            m.insert("lpips_proxy".to_string(), l);
            c.points.push(RatePoint { bpp, metrics: m });
        }
        c
    }

    #[test]
    fn curve_csv_roundtrips() {
        let c = curve(&[(0.1, 30.0, 0.4), (0.2, 33.0, 0.3), (0.5, 36.0, 0.2)]);
        let parsed = Curve::from_csv(&c.to_csv()).unwrap();
        assert_eq!(parsed.metric_names, c.metric_names);
        assert_eq!(parsed.points.len(), 3);
        assert_eq!(parsed.points[1].bpp, 0.2);
        assert_eq!(parsed.points[1].metrics["psnr"], 33.0);
    }

    #[test]
    fn malformed_curve_csv_is_rejected() {
        assert!(Curve::from_csv("").is_err());
        assert!(Curve::from_csv("rate,psnr\n0.1,30\n").is_err());
        assert!(Curve::from_csv("bpp,psnr\n0.1\n").is_err());
        assert!(Curve::from_csv("bpp,psnr\n0.1,abc\n").is_err());
    }

    #[test]
    fn compare_curves_handles_both_orientations() {
        let a = curve(&[(0.1, 30.0, 0.40), (0.2, 33.0, 0.30), (0.5, 36.0, 0.20)]);
        let better = curve(&[(0.1, 31.0, 0.35), (0.2, 34.0, 0.25), (0.5, 37.0, 0.15)]);
        let rows = compare_curves(&a, &better).unwrap();
        for row in rows {
            let r = row.bd_rate_percent.unwrap();
            assert!(r < 0.0, "{}: better curve should save bits, got {r}", row.metric);
            assert!(row.bd_metric.unwrap() > 0.0);
        }
    }

    #[test]
    fn method_wiring_matches_the_table() {
        assert_eq!(Method::A.expected_unet_calls(), 0);
        assert_eq!(Method::B.expected_unet_calls(), 1);
        assert_eq!(Method::C.expected_unet_calls(), 1);
        assert_eq!(Method::D.expected_unet_calls(), 50);
        assert_eq!(Method::Full.expected_unet_calls(), 1);
        assert!(!Method::B.options(0).tca_enabled);
        assert!(Method::C.options(0).tca_enabled);
        assert!(matches!(Method::A.options(0).refine, RefineMode::None));
        assert_eq!(Method::Full.wants_stage(), TrainStage::Nine);
    }

    #[test]
    fn empty_sweep_values_are_an_input_error() {
        let cfg = TrainConfig::default();
        let err = sweep(SweepParam::Timestep, &[], None, None, &cfg, &[]).unwrap_err();
        assert!(matches!(err, CodecError::Config(_)));
    }

    #[test]
    fn timestep_sweep_runs_on_a_stage8_model() {
        let mut model =
            CodecModel::new(ModelConfig::tiny(), ScheduleConfig::default(), 0, 31).unwrap();
        model.set_stage(TrainStage::Eight);
        let clips =
            heldout_eval_clips(3, 1, &ClipSpec { frames: 2, ..ClipSpec::default() }).unwrap();
        let cfg = TrainConfig::default();
        let report = sweep(
            SweepParam::Timestep,
            &["0".into(), "250".into()],
            None,
            Some(&model),
            &cfg,
            &clips,
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows[0].is_default);
        assert!(!report.rows[1].is_default);
        assert!(report.rows.iter().all(|r| r.point.bpp > 0.0));
        let csv = report.to_csv();
        assert!(csv.starts_with("timestep,default,lora_params,bpp"));
    }

    #[test]
    fn bench_reports_median_and_calls() {
        let mut model =
            CodecModel::new(ModelConfig::tiny(), ScheduleConfig::default(), 0, 32).unwrap();
        model.set_stage(TrainStage::Eight);
        let seq = dataset::heldout_clip(9, 0, &ClipSpec { frames: 2, ..ClipSpec::default() })
            .unwrap();
        let res =
            bench_p_frame_decode(&model, &seq, &PipelineOptions::default(), 20).unwrap();
        assert!(res.median_s > 0.0);
        assert_eq!(res.unet_calls_per_p, 1);
    }

    #[test]
    fn evaluate_model_produces_all_metric_columns() {
        let mut model =
            CodecModel::new(ModelConfig::tiny(), ScheduleConfig::default(), 0, 33).unwrap();
        model.set_stage(TrainStage::Base);
        let clips =
            heldout_eval_clips(4, 1, &ClipSpec { frames: 3, ..ClipSpec::default() }).unwrap();
        let point = evaluate_model(&model, &clips, &PipelineOptions::default()).unwrap();
        assert!(point.bpp > 0.0);
        for m in CURVE_METRICS {
            assert!(point.metrics[m].is_finite(), "metric {m} missing or non-finite");
        }
    }
}
