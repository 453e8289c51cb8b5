//! Error metrics, field images and inference timing.
//!
//! The relative error is a pooled ratio per channel, `Σ|out − target| /
//! Σ|target|`, summed over every cell of every sample. A per-cell mean of
//! ratios would blow up wherever the target crosses zero.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::dataset::{denormalize_with, field_from_planes, DatasetManifest, FlowSample, Normalizer, Variant};
use crate::oracle::{FieldTriple, Freestream};
use crate::tensor::{Tensor, TensorError};
use crate::training::make_batch;
use crate::unet::UNet;

pub const TARGET_CHANNELS: [&str; 3] = ["pressure", "vel_x", "vel_y"];

#[derive(Debug, Clone, thiserror::Error)]
pub enum EvalError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("target channel {0} is zero everywhere; relative error undefined")]
    ZeroTargetNorm(&'static str),
    #[error("no samples to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: Arc<io::Error> },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> EvalError + '_ {
    move |e| EvalError::Io { path: path.to_path_buf(), source: Arc::new(e) }
}

fn check_pairs(outputs: &[FieldTriple], targets: &[FieldTriple]) -> Result<(), EvalError> {
    if outputs.len() != targets.len() {
        return Err(EvalError::ShapeMismatch(format!("{} outputs vs {} targets", outputs.len(), targets.len())));
    }
    for (i, (o, t)) in outputs.iter().zip(targets).enumerate() {
        if o.resolution != t.resolution {
            return Err(EvalError::ShapeMismatch(format!(
                "sample {i}: resolution {} vs {}",
                o.resolution, t.resolution
            )));
        }
    }
    Ok(())
}

/// `(Σ|out − target|, Σ|target|)` for one channel of one sample.
fn abs_sums(out: &[f32], target: &[f32]) -> (f64, f64) {
    out.iter().zip(target).fold((0.0, 0.0), |(d, t), (&o, &y)| {
        (d + (o as f64 - y as f64).abs(), t + (y as f64).abs())
    })
}

/// Pooled relative error of `channel` (0 = pressure, 1 = vel_x, 2 = vel_y).
pub fn relative_error(outputs: &[FieldTriple], targets: &[FieldTriple], channel: usize) -> Result<f64, EvalError> {
    check_pairs(outputs, targets)?;
    if channel >= 3 {
        return Err(EvalError::ShapeMismatch(format!("channel {channel} out of range")));
    }
    let (num, den) = outputs.iter().zip(targets).fold((0.0, 0.0), |(n, d), (o, t)| {
        let (a, b) = abs_sums(o.channels()[channel], t.channels()[channel]);
        (n + a, d + b)
    });
    if den == 0.0 {
        return Err(EvalError::ZeroTargetNorm(TARGET_CHANNELS[channel]));
    }
    Ok(num / den)
}

/// Mean absolute error after undoing normalization and the variant's
/// dimensionless scaling, over all cells, channels and samples.
pub fn absolute_error_denorm_with(
    outputs: &[FieldTriple],
    targets: &[FieldTriple],
    freestreams: &[Freestream],
    norm: &Normalizer,
    variant: Variant,
) -> Result<f64, EvalError> {
    check_pairs(outputs, targets)?;
    if freestreams.len() != outputs.len() {
        return Err(EvalError::ShapeMismatch(format!("{} freestreams for {} samples", freestreams.len(), outputs.len())));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ((o, t), &fs) in outputs.iter().zip(targets).zip(freestreams) {
        let (o, t) = (denormalize_with(o, norm, variant, fs), denormalize_with(t, norm, variant, fs));
        for (oc, tc) in o.channels().into_iter().zip(t.channels()) {
            total += abs_sums(oc, tc).0;
            count += oc.len();
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

pub fn absolute_error_denorm(
    outputs: &[FieldTriple],
    targets: &[FieldTriple],
    freestreams: &[Freestream],
    manifest: &DatasetManifest,
) -> Result<f64, EvalError> {
    absolute_error_denorm_with(outputs, targets, freestreams, &manifest.normalizer, manifest.variant)
}

/// Eval-mode predictions for normalized samples, in input order.
pub fn predict(model: &UNet<f32>, samples: &[FlowSample], batch: usize) -> Result<Vec<FieldTriple>, EvalError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&FlowSample> = chunk.iter().collect();
        let (x, _) = make_batch(&refs);
        let y = model.infer(&x)?;
        let data = y.data();
        let per = data.len() / chunk.len();
        for (s, planes) in chunk.iter().zip(data.chunks(per)) {
            out.push(field_from_planes(s.resolution, planes));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleError {
    pub name: String,
    /// Per-channel relative error of this sample alone; NaN where the
    /// target channel is identically zero.
    pub relative: [f64; 3],
    pub abs_denorm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    pub median: Duration,
    pub mean: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub relative: [f64; 3],
    pub average: f64,
    pub abs_denorm: f64,
    pub samples: Vec<SampleError>,
    /// Wall-clock per sample; left out of the text form unless present so
    /// reports stay byte-reproducible.
    pub timing: Option<TimingStats>,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (name, v) in TARGET_CHANNELS.iter().zip(self.relative) {
            writeln!(s, "{name} {v:.8}").unwrap();
        }
        writeln!(s, "average {:.8}", self.average).unwrap();
        writeln!(s, "abs_denorm {:.8e}", self.abs_denorm).unwrap();
        writeln!(s, "samples {}", self.samples.len()).unwrap();
        if let Some(t) = self.timing {
            writeln!(s, "median_ms {:.4}", t.median.as_secs_f64() * 1e3).unwrap();
            writeln!(s, "mean_ms {:.4}", t.mean.as_secs_f64() * 1e3).unwrap();
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,pressure,vel_x,vel_y,abs_denorm\n");
        for e in &self.samples {
            let [p, x, y] = e.relative;
            writeln!(s, "{},{p:.8},{x:.8},{y:.8},{:.8e}", e.name, e.abs_denorm).unwrap();
        }
        s
    }

    /// Writes `path` (text) and `path` with a `.csv` extension.
    pub fn write(&self, path: &Path) -> Result<(), EvalError> {
        fs::write(path, self.to_text()).map_err(io_err(path))?;
        let csv = path.with_extension("csv");
        fs::write(&csv, self.to_csv()).map_err(io_err(&csv))
    }
}

/// Evaluates `model` on normalized samples. `names` label the per-sample rows.
pub fn evaluate(
    model: &UNet<f32>,
    samples: &[FlowSample],
    names: &[String],
    norm: &Normalizer,
    variant: Variant,
    batch: usize,
) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    if names.len() != samples.len() {
        return Err(EvalError::ShapeMismatch(format!("{} names for {} samples", names.len(), samples.len())));
    }
    let outputs = predict(model, samples, batch)?;
    let targets: Vec<FieldTriple> = samples.iter().map(FlowSample::target_field).collect();
    let freestreams: Vec<Freestream> = samples.iter().map(FlowSample::freestream).collect();

    let mut relative = [0.0; 3];
    for (c, r) in relative.iter_mut().enumerate() {
        *r = relative_error(&outputs, &targets, c)?;
    }
    let mut rows = Vec::with_capacity(samples.len());
    for i in 0..samples.len() {
        let (o, t) = (&outputs[i..=i], &targets[i..=i]);
        let rel = std::array::from_fn(|c| relative_error(o, t, c).unwrap_or(f64::NAN));
        let abs = absolute_error_denorm_with(o, t, &freestreams[i..=i], norm, variant)?;
        rows.push(SampleError { name: names[i].clone(), relative: rel, abs_denorm: abs });
    }
    Ok(EvalReport {
        relative,
        average: relative.iter().sum::<f64>() / 3.0,
        abs_denorm: absolute_error_denorm_with(&outputs, &targets, &freestreams, norm, variant)?,
        samples: rows,
        timing: None,
    })
}

/// Min-max scaling to 8 bits; a constant field maps to mid-gray.
pub fn to_gray(values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    scale_gray(values, lo, hi)
}

/// Scaling over `[0, max]`, so an all-zero error field is black.
pub fn error_to_gray(values: &[f32]) -> Vec<u8> {
    let hi = values.iter().fold(0.0f32, |m, &v| m.max(v));
    if hi == 0.0 {
        return vec![0; values.len()];
    }
    scale_gray(values, 0.0, hi)
}

fn scale_gray(values: &[f32], lo: f32, hi: f32) -> Vec<u8> {
    if !(hi > lo) {
        return vec![128; values.len()];
    }
    let span = (hi - lo) as f64;
    values.iter().map(|&v| ((v - lo) as f64 / span * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

/// Binary PGM (P5), 8-bit.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<(), EvalError> {
    if pixels.len() != width * height {
        return Err(EvalError::ShapeMismatch(format!("{} pixels for {width}x{height}", pixels.len())));
    }
    let mut buf = format!("P5\n{width} {height}\n255\n").into_bytes();
    buf.extend_from_slice(pixels);
    fs::write(path, buf).map_err(io_err(path))
}

/// Writes `<prefix>_<channel>_{target,output,error}.pgm` for the three
/// channels, each image scaled independently. Returns the written paths.
pub fn export_field_images(target: &FieldTriple, output: &FieldTriple, prefix: &Path) -> Result<Vec<PathBuf>, EvalError> {
    if target.resolution != output.resolution {
        return Err(EvalError::ShapeMismatch(format!("resolution {} vs {}", target.resolution, output.resolution)));
    }
    let r = target.resolution;
    let stem = prefix.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut written = Vec::new();
    for ((name, t), o) in TARGET_CHANNELS.iter().zip(target.channels()).zip(output.channels()) {
        let err: Vec<f32> = t.iter().zip(o).map(|(a, b)| (a - b).abs()).collect();
        for (kind, pixels) in [("target", to_gray(t)), ("output", to_gray(o)), ("error", error_to_gray(&err))] {
            let path = prefix.with_file_name(format!("{stem}_{name}_{kind}.pgm"));
            write_pgm(&path, r, r, &pixels)?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub batch: usize,
    pub reps: usize,
    /// Per-sample wall-clock time.
    pub per_sample: TimingStats,
}

pub fn median(durations: &mut [Duration]) -> Duration {
    durations.sort_unstable();
    let n = durations.len();
    if n == 0 {
        Duration::ZERO
    } else if n % 2 == 1 {
        durations[n / 2]
    } else {
        (durations[n / 2 - 1] + durations[n / 2]) / 2
    }
}

/// Times eval-mode inference on a synthetic input for each batch size after
/// two warm-up passes. `reps` is raised to at least 20.
pub fn bench_inference(model: &UNet<f32>, batch_sizes: &[usize], reps: usize) -> Result<Vec<BenchRow>, EvalError> {
    let r = model.config.resolution;
    let reps = reps.max(20);
    let mut rows = Vec::new();
    for &b in batch_sizes {
        let b = b.max(1);
        let data = (0..b * 3 * r * r).map(|i| ((i % 89) as f32 / 89.0) - 0.5).collect();
        let x = Tensor::from_vec(&[b, 3, r, r], data)?;
        for _ in 0..2 {
            model.infer(&x)?;
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t = Instant::now();
            model.infer(&x)?;
            times.push(t.elapsed() / b as u32);
        }
        let mean = times.iter().sum::<Duration>() / reps as u32;
        rows.push(BenchRow { batch: b, reps, per_sample: TimingStats { median: median(&mut times), mean } });
    }
    Ok(rows)
}

pub fn bench_table(rows: &[BenchRow]) -> String {
    let mut s = String::from("batch  reps  median_ms/sample  mean_ms/sample\n");
    for row in rows {
        writeln!(
            s,
            "{:>5}  {:>4}  {:>16.3}  {:>14.3}",
            row.batch,
            row.reps,
            row.per_sample.median.as_secs_f64() * 1e3,
            row.per_sample.mean.as_secs_f64() * 1e3
        )
        .unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(r: usize, f: impl Fn(usize) -> f32) -> FieldTriple {
        let mut t = FieldTriple::zeros(r);
        for ch in t.channels_mut() {
            for (i, v) in ch.iter_mut().enumerate() {
                *v = f(i);
            }
        }
        t
    }

    #[test]
    fn relative_error_identity_and_scaling() {
        let t = field(4, |i| i as f32 - 7.5);
        assert_eq!(relative_error(&[t.clone()], &[t.clone()], 0).unwrap(), 0.0);
        let scaled = field(4, |i| (i as f32 - 7.5) * 1.02);
        for c in 0..3 {
            let e = relative_error(&[scaled.clone()], &[t.clone()], c).unwrap();
            assert!((e - 0.02).abs() < 1e-6, "{e}");
        }
    }

    #[test]
    fn zero_target_rejected() {
        let z = FieldTriple::zeros(2);
        assert!(matches!(relative_error(&[z.clone()], &[z], 1), Err(EvalError::ZeroTargetNorm("vel_x"))));
    }

    #[test]
    fn denorm_single_cell() {
        let norm = Normalizer::from_max_abs([1.0, 1.0, 1.0, 4.0, 4.0, 4.0]).unwrap();
        let o = field(1, |_| 0.1);
        let t = FieldTriple::zeros(1);
        let fs = Freestream::from_components(1.0, 0.0);
        let e = absolute_error_denorm_with(&[o], &[t], &[fs], &norm, Variant::B).unwrap();
        assert!((e - 0.4).abs() < 1e-6, "{e}");
    }

    #[test]
    fn gray_scaling() {
        assert_eq!(to_gray(&[3.0; 5]), vec![128; 5]);
        assert_eq!(to_gray(&[-1.0, 0.0, 1.0]), vec![0, 128, 255]);
        assert_eq!(error_to_gray(&[0.0; 4]), vec![0; 4]);
        assert_eq!(error_to_gray(&[0.0, 2.0]), vec![0, 255]);
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        write_pgm(&p, 2, 1, &[0, 255]).unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn median_even_and_odd() {
        let ms = Duration::from_millis;
        assert_eq!(median(&mut [ms(3), ms(1), ms(2)]), ms(2));
        assert_eq!(median(&mut [ms(4), ms(1), ms(2), ms(3)]), Duration::from_micros(2500));
    }
}
