//! Sample assembly, target preprocessing, max-abs normalization, the binary
//! sample format and the text manifest tying a dataset together.
//!
//! Sample files hold preprocessed but *unnormalized* planes; the manifest
//! carries the per-channel constants fitted on the training split, and
//! [`load_split`] applies them on the way in.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::geom::{rasterize, shear, AirfoilShape, GeomError, GridSpec, Mask};
use crate::oracle::{evaluate_field, sample_freestream_with, solve_panels, FieldTriple, Freestream, OracleError};

pub const CHANNELS: [&str; 6] = ["mask", "in_vx", "in_vy", "pressure", "vel_x", "vel_y"];
pub const MAGIC: &[u8; 4] = b"DFP1";
const MANIFEST_FORMAT: &str = "foilnet-dataset-1";

#[derive(Debug, Clone, thiserror::Error)]
pub enum DatasetError {
    #[error("freestream magnitude must be positive")]
    ZeroMagnitude,
    #[error("channel {0} is zero in every training sample")]
    DegenerateChannel(&'static str),
    #[error("shapes listed for both training and test: {}", .0.join(", "))]
    OverlappingShapes(Vec<String>),
    #[error("shape {0} is in neither the training nor the test list")]
    UnknownShape(String),
    #[error("no airfoil shapes available")]
    NoAirfoils,
    #[error("dataset manifest {0} not found")]
    DatasetMissing(PathBuf),
    #[error("{path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: Arc<io::Error> },
    #[error(transparent)]
    Geom(#[from] GeomError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DatasetError + '_ {
    move |e| DatasetError::Io { path: path.to_path_buf(), source: Arc::new(e) }
}

fn format_err(path: &Path, reason: impl Into<String>) -> DatasetError {
    DatasetError::Format { path: path.to_path_buf(), reason: reason.into() }
}

/// Target preprocessing level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Raw oracle output.
    A,
    /// Velocities divided by `|v_∞|`, pressure by `|v_∞|²`.
    B,
    /// As B, with the pressure mean removed.
    C,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
        })
    }
}

impl FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "A" | "a" => Ok(Variant::A),
            "B" | "b" => Ok(Variant::B),
            "C" | "c" => Ok(Variant::C),
            _ => Err(format!("unknown variant {s:?} (expected A, B or C)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Validation => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split {s:?}")),
        }
    }
}

/// Which shapes are sheared during generation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShearMode {
    #[default]
    None,
    /// Even sample indices regular, odd ones sheared.
    Mixed,
    Only,
}

impl fmt::Display for ShearMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShearMode::None => "none",
            ShearMode::Mixed => "mixed",
            ShearMode::Only => "only",
        })
    }
}

impl FromStr for ShearMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ShearMode::None),
            "mixed" => Ok(ShearMode::Mixed),
            "only" => Ok(ShearMode::Only),
            _ => Err(format!("unknown shear mode {s:?} (expected none, mixed or only)")),
        }
    }
}

/// One input/target pair: six `resolution²` planes in [`CHANNELS`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowSample {
    pub resolution: usize,
    pub fs_vx: f32,
    pub fs_vy: f32,
    pub planes: Vec<f32>,
}

impl FlowSample {
    pub fn new(mask: &Mask, fs: Freestream, target: &FieldTriple) -> Self {
        let mut planes = encode_input(mask, fs);
        for ch in target.channels() {
            planes.extend_from_slice(ch);
        }
        FlowSample { resolution: mask.resolution, fs_vx: fs.vx() as f32, fs_vy: fs.vy() as f32, planes }
    }

    pub fn cells(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn plane(&self, channel: usize) -> &[f32] {
        let n = self.cells();
        &self.planes[channel * n..(channel + 1) * n]
    }

    pub fn input(&self) -> &[f32] {
        &self.planes[..3 * self.cells()]
    }

    pub fn target(&self) -> &[f32] {
        &self.planes[3 * self.cells()..]
    }

    pub fn freestream(&self) -> Freestream {
        Freestream::from_components(self.fs_vx as f64, self.fs_vy as f64)
    }

    pub fn target_field(&self) -> FieldTriple {
        field_from_planes(self.resolution, self.target())
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let mut buf = Vec::with_capacity(20 + 4 * self.planes.len());
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&(self.resolution as u32).to_le_bytes());
        buf.extend_from_slice(&(CHANNELS.len() as u32).to_le_bytes());
        buf.extend_from_slice(&self.fs_vx.to_le_bytes());
        buf.extend_from_slice(&self.fs_vy.to_le_bytes());
        for v in &self.planes {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        fs::write(path, buf).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        if bytes.len() < 20 || &bytes[..4] != MAGIC {
            return Err(format_err(path, "not a DFP1 sample file"));
        }
        let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
        let resolution = u32::from_le_bytes(word(4)) as usize;
        let channels = u32::from_le_bytes(word(8)) as usize;
        if channels != CHANNELS.len() {
            return Err(format_err(path, format!("expected 6 channels, found {channels}")));
        }
        let count = channels * resolution * resolution;
        if bytes.len() != 20 + 4 * count {
            return Err(format_err(path, format!("truncated: {} bytes for resolution {resolution}", bytes.len())));
        }
        let planes = bytes[20..].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        Ok(FlowSample {
            resolution,
            fs_vx: f32::from_le_bytes(word(12)),
            fs_vy: f32::from_le_bytes(word(16)),
            planes,
        })
    }
}

pub fn field_from_planes(resolution: usize, planes: &[f32]) -> FieldTriple {
    let n = resolution * resolution;
    assert_eq!(planes.len(), 3 * n, "three planes expected");
    FieldTriple {
        resolution,
        pressure: planes[..n].to_vec(),
        vel_x: planes[n..2 * n].to_vec(),
        vel_y: planes[2 * n..].to_vec(),
    }
}

/// Mask plus freestream velocity channels, zeroed inside the shape.
pub fn encode_input(mask: &Mask, fs: Freestream) -> Vec<f32> {
    let n = mask.values.len();
    let (vx, vy) = (fs.vx() as f32, fs.vy() as f32);
    let mut out = vec![0.0f32; 3 * n];
    for (i, &m) in mask.values.iter().enumerate() {
        out[i] = m as f32;
        if m == 0 {
            out[n + i] = vx;
            out[2 * n + i] = vy;
        }
    }
    out
}

/// Makes a raw field dimensionless (B) and optionally removes the pressure
/// mean (C).
///
/// The mean is over all cells, interior included. Interior cells must stay
/// exactly zero, so the exterior is shifted by `Σp / n_exterior`, which
/// brings the all-cell mean to zero.
pub fn preprocess_target(
    raw: &FieldTriple,
    fs: Freestream,
    variant: Variant,
    mask: &Mask,
) -> Result<FieldTriple, DatasetError> {
    if variant == Variant::A {
        return Ok(raw.clone());
    }
    let m = fs.magnitude;
    if !(m > 0.0) {
        return Err(DatasetError::ZeroMagnitude);
    }
    let scaled = |v: &[f32], s: f64| -> Vec<f64> { v.iter().map(|&x| x as f64 / s).collect() };
    let mut p = scaled(&raw.pressure, m * m);
    if variant == Variant::C {
        let exterior = mask.values.iter().filter(|&&v| v == 0).count();
        if exterior > 0 {
            let shift = p.iter().sum::<f64>() / exterior as f64;
            for (v, &inside) in p.iter_mut().zip(&mask.values) {
                if inside == 0 {
                    *v -= shift;
                }
            }
        }
    }
    let to32 = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect();
    Ok(FieldTriple {
        resolution: raw.resolution,
        pressure: to32(p),
        vel_x: to32(scaled(&raw.vel_x, m)),
        vel_y: to32(scaled(&raw.vel_y, m)),
    })
}

/// Per-channel max-abs constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalizer {
    pub constants: [f32; 6],
}

impl Normalizer {
    pub fn from_max_abs(max_abs: [f32; 6]) -> Result<Self, DatasetError> {
        for (c, &v) in max_abs.iter().enumerate() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(DatasetError::DegenerateChannel(CHANNELS[c]));
            }
        }
        Ok(Normalizer { constants: max_abs })
    }

    pub fn normalize(&self, sample: &mut FlowSample) {
        let n = sample.cells();
        for (c, plane) in sample.planes.chunks_mut(n).enumerate() {
            let k = self.constants[c];
            plane.iter_mut().for_each(|v| *v /= k);
        }
    }

    /// Undoes [`normalize`](Self::normalize) on the three target planes.
    pub fn denormalize_target(&self, field: &FieldTriple) -> FieldTriple {
        let mut out = field.clone();
        for (i, ch) in out.channels_mut().into_iter().enumerate() {
            let k = self.constants[3 + i];
            ch.iter_mut().for_each(|v| *v *= k);
        }
        out
    }
}

pub fn max_abs(sample: &FlowSample) -> [f32; 6] {
    let mut out = [0.0f32; 6];
    for (c, plane) in sample.planes.chunks(sample.cells()).enumerate() {
        out[c] = plane.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    }
    out
}

fn merge_max(a: [f32; 6], b: [f32; 6]) -> [f32; 6] {
    std::array::from_fn(|i| a[i].max(b[i]))
}

pub fn fit_normalizer(train: &[FlowSample]) -> Result<Normalizer, DatasetError> {
    if train.is_empty() {
        return Err(DatasetError::DegenerateChannel(CHANNELS[0]));
    }
    Normalizer::from_max_abs(train.iter().map(max_abs).fold([0.0; 6], merge_max))
}

/// Inverse of normalization followed by the inverse of the target
/// preprocessing. For variant C the removed pressure mean is not restored.
pub fn denormalize(normalized: &FieldTriple, manifest: &DatasetManifest, fs: Freestream) -> FieldTriple {
    denormalize_with(normalized, &manifest.normalizer, manifest.variant, fs)
}

pub fn denormalize_with(normalized: &FieldTriple, norm: &Normalizer, variant: Variant, fs: Freestream) -> FieldTriple {
    let mut out = norm.denormalize_target(normalized);
    if variant != Variant::A {
        let m = fs.magnitude;
        let [p, vx, vy] = out.channels_mut();
        p.iter_mut().for_each(|v| *v = (*v as f64 * m * m) as f32);
        vx.iter_mut().for_each(|v| *v = (*v as f64 * m) as f32);
        vy.iter_mut().for_each(|v| *v = (*v as f64 * m) as f32);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleEntry {
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub split: Split,
    pub shape: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub variant: Variant,
    pub seed: u64,
    pub resolution: usize,
    pub shear: ShearMode,
    pub normalizer: Normalizer,
    pub entries: Vec<SampleEntry>,
    /// Directory that entry paths are relative to; not serialized.
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries_in(split).count()
    }

    pub fn sample_path(&self, entry: &SampleEntry) -> PathBuf {
        self.base_dir.join(&entry.path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: &dyn fmt::Display| s.push_str(&format!("{k} = {v}\n"));
        kv("format", &MANIFEST_FORMAT);
        kv("variant", &self.variant);
        kv("seed", &self.seed);
        kv("resolution", &self.resolution);
        kv("shear", &self.shear);
        for (name, c) in CHANNELS.iter().zip(self.normalizer.constants) {
            kv(&format!("norm_{name}"), &format!("{c:e}"));
        }
        for e in &self.entries {
            s.push_str(&format!("sample {} {} {}\n", e.path.display(), e.split, e.shape));
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        fs::write(path, self.to_text()).map_err(io_err(path))
    }

    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        if !path.is_file() {
            return Err(DatasetError::DatasetMissing(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut keys = HashMap::new();
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |why: &str| format_err(path, format!("line {}: {why}", no + 1));
            if let Some(rest) = line.strip_prefix("sample ") {
                let cols: Vec<&str> = rest.split_whitespace().collect();
                let [p, split, shape] = cols[..] else {
                    return Err(bad("expected `sample <path> <split> <shape>`"));
                };
                let split = split.parse().map_err(|e: String| bad(&e))?;
                entries.push(SampleEntry { path: PathBuf::from(p), split, shape: shape.to_string() });
            } else if let Some((k, v)) = line.split_once('=') {
                keys.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                return Err(bad("expected `key = value` or a sample line"));
            }
        }
        let get = |k: &str| keys.get(k).ok_or_else(|| format_err(path, format!("missing key {k}")));
        if get("format")? != MANIFEST_FORMAT {
            return Err(format_err(path, "unsupported manifest format"));
        }
        let parse_num = |k: &str| -> Result<f64, DatasetError> {
            get(k)?.parse::<f64>().map_err(|_| format_err(path, format!("{k} is not a number")))
        };
        let mut constants = [0.0f32; 6];
        for (c, name) in CHANNELS.iter().enumerate() {
            constants[c] = parse_num(&format!("norm_{name}"))? as f32;
        }
        Ok(DatasetManifest {
            variant: get("variant")?.parse().map_err(|e: String| format_err(path, e))?,
            seed: get("seed")?.parse().map_err(|_| format_err(path, "seed is not an integer"))?,
            resolution: get("resolution")?.parse().map_err(|_| format_err(path, "bad resolution"))?,
            shear: keys.get("shear").map_or(Ok(ShearMode::None), |s| s.parse()).map_err(|e| format_err(path, e))?,
            normalizer: Normalizer::from_max_abs(constants)?,
            entries,
            base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }
}

/// Reads one split and normalizes it with the manifest's constants.
pub fn load_split(manifest: &DatasetManifest, split: Split) -> Result<Vec<FlowSample>, DatasetError> {
    manifest
        .entries_in(split)
        .map(|e| {
            let path = manifest.sample_path(e);
            let mut s = FlowSample::read(&path)?;
            if s.resolution != manifest.resolution {
                return Err(format_err(&path, format!("resolution {} ≠ manifest {}", s.resolution, manifest.resolution)));
            }
            manifest.normalizer.normalize(&mut s);
            Ok(s)
        })
        .collect()
}

/// Assigns splits: entries of test shapes go to test; a seeded
/// `val_fraction` of the remaining entries goes to validation.
pub fn split(
    mut entries: Vec<SampleEntry>,
    train_shapes: &[String],
    test_shapes: &[String],
    val_fraction: f64,
    seed: u64,
) -> Result<Vec<SampleEntry>, DatasetError> {
    let train: HashSet<&str> = train_shapes.iter().map(String::as_str).collect();
    let test: HashSet<&str> = test_shapes.iter().map(String::as_str).collect();
    let mut overlap: Vec<String> = train.intersection(&test).map(|s| s.to_string()).collect();
    if !overlap.is_empty() {
        overlap.sort();
        return Err(DatasetError::OverlappingShapes(overlap));
    }
    let mut train_idx = Vec::new();
    for (i, e) in entries.iter_mut().enumerate() {
        if test.contains(e.shape.as_str()) {
            e.split = Split::Test;
        } else if train.contains(e.shape.as_str()) {
            e.split = Split::Train;
            train_idx.push(i);
        } else {
            return Err(DatasetError::UnknownShape(e.shape.clone()));
        }
    }
    let n_val = (val_fraction.clamp(0.0, 1.0) * train_idx.len() as f64).round() as usize;
    train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for &i in &train_idx[..n_val] {
        entries[i].split = Split::Validation;
    }
    Ok(entries)
}

/// Reads a test-shape list: one name per line, `#` comments allowed.
pub fn read_shape_list(path: &Path) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.split('#').next().unwrap_or("").trim())
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    /// Training plus validation samples.
    pub count: usize,
    pub test_per_shape: usize,
    pub seed: u64,
    pub variant: Variant,
    pub shear: ShearMode,
    pub max_shear_deg: f64,
    pub val_fraction: f64,
    pub grid: GridSpec,
    pub n_panels: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            count: 800,
            test_per_shape: 3,
            seed: 0,
            variant: Variant::C,
            shear: ShearMode::None,
            max_shear_deg: 15.0,
            val_fraction: 0.1,
            grid: GridSpec::default(),
            n_panels: crate::oracle::DEFAULT_PANELS,
        }
    }
}

/// Runs the whole pipeline for one (shape, freestream) pair.
pub fn make_sample(
    shape: &AirfoilShape,
    fs: Freestream,
    grid: &GridSpec,
    variant: Variant,
    n_panels: usize,
) -> Result<FlowSample, SampleFailure> {
    let mask = rasterize(shape, grid)?;
    let sys = solve_panels(shape, fs, n_panels)?;
    let raw = evaluate_field(&sys, fs, grid, &mask)?;
    let target = preprocess_target(&raw, fs, variant, &mask)?;
    Ok(FlowSample::new(&mask, fs, &target))
}

/// Reasons a single sample is skipped during generation.
#[derive(Debug, thiserror::Error)]
pub enum SampleFailure {
    #[error(transparent)]
    Geom(#[from] GeomError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

const MAX_ATTEMPTS: usize = 32;

struct Job {
    index: usize,
    split: Split,
    /// Fixed shape for test jobs; training jobs draw one.
    shape: Option<usize>,
    file: String,
}

/// Generates a dataset into `out_dir` (sample files under `samples/` plus
/// `manifest.txt`) and returns the manifest.
///
/// Every sample draws from its own ChaCha stream, so output is identical
/// regardless of the rayon pool size. Failed samples are logged and redrawn.
pub fn generate(
    cfg: &GenConfig,
    shapes: &[(String, AirfoilShape)],
    test_names: &[String],
    out_dir: &Path,
) -> Result<DatasetManifest, DatasetError> {
    if shapes.is_empty() {
        return Err(DatasetError::NoAirfoils);
    }
    let known: HashSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(missing) = test_names.iter().find(|t| !known.contains(t.as_str())) {
        return Err(DatasetError::UnknownShape(missing.clone()));
    }
    let test_set: HashSet<&str> = test_names.iter().map(String::as_str).collect();
    let train_idx: Vec<usize> = (0..shapes.len()).filter(|&i| !test_set.contains(shapes[i].0.as_str())).collect();
    let test_idx: Vec<usize> = (0..shapes.len()).filter(|&i| test_set.contains(shapes[i].0.as_str())).collect();
    if train_idx.is_empty() && cfg.count > 0 {
        return Err(DatasetError::NoAirfoils);
    }

    let samples_dir = out_dir.join("samples");
    fs::create_dir_all(&samples_dir).map_err(io_err(&samples_dir))?;

    let mut jobs: Vec<Job> = (0..cfg.count)
        .map(|i| Job { index: i, split: Split::Train, shape: None, file: format!("samples/{i:06}.dfp") })
        .collect();
    for (k, &s) in test_idx.iter().enumerate() {
        for r in 0..cfg.test_per_shape {
            let t = k * cfg.test_per_shape + r;
            jobs.push(Job {
                index: cfg.count + t,
                split: Split::Test,
                shape: Some(s),
                file: format!("samples/test_{t:06}.dfp"),
            });
        }
    }

    let results: Vec<Result<(SampleEntry, [f32; 6]), DatasetError>> = jobs
        .par_iter()
        .map(|job| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(job.index as u64);
            let sheared = match cfg.shear {
                ShearMode::None => false,
                ShearMode::Only => true,
                ShearMode::Mixed => job.index % 2 == 1,
            };
            let mut last = String::new();
            for attempt in 0..MAX_ATTEMPTS {
                let s = job.shape.unwrap_or_else(|| train_idx[rng.gen_range(0..train_idx.len())]);
                let fs = sample_freestream_with(&mut rng);
                let (name, base) = &shapes[s];
                let shape = if sheared {
                    let angle = rng.gen_range(-cfg.max_shear_deg..=cfg.max_shear_deg);
                    match shear(base, angle) {
                        Ok(sh) => sh,
                        Err(e) => {
                            last = format!("shear of {name} failed: {e}");
                            log::debug!("sample {} attempt {attempt}: {last}", job.index);
                            continue;
                        }
                    }
                } else {
                    base.clone()
                };
                match make_sample(&shape, fs, &cfg.grid, cfg.variant, cfg.n_panels) {
                    Ok(sample) => {
                        let path = out_dir.join(&job.file);
                        sample.write(&path)?;
                        let entry = SampleEntry { path: PathBuf::from(&job.file), split: job.split, shape: name.clone() };
                        let m = if job.split == Split::Train { max_abs(&sample) } else { [0.0; 6] };
                        return Ok((entry, m));
                    }
                    Err(e) => {
                        last = format!("{name}: {e}");
                        log::debug!("sample {} attempt {attempt}: {last}", job.index);
                    }
                }
            }
            Err(format_err(&out_dir.join(&job.file), format!("no valid sample after {MAX_ATTEMPTS} attempts (last: {last})")))
        })
        .collect();

    let mut entries = Vec::with_capacity(results.len());
    let mut maxima = Vec::with_capacity(results.len());
    for r in results {
        let (e, m) = r?;
        entries.push(e);
        maxima.push(m);
    }
    let train_names: Vec<String> = train_idx.iter().map(|&i| shapes[i].0.clone()).collect();
    let test_names: Vec<String> = test_idx.iter().map(|&i| shapes[i].0.clone()).collect();
    let entries = split(entries, &train_names, &test_names, cfg.val_fraction, cfg.seed)?;
    // Constants come from the training split only.
    let fitted = entries
        .iter()
        .zip(&maxima)
        .filter(|(e, _)| e.split == Split::Train)
        .fold([0.0f32; 6], |acc, (_, m)| merge_max(acc, *m));
    let manifest = DatasetManifest {
        variant: cfg.variant,
        seed: cfg.seed,
        resolution: cfg.grid.resolution,
        shear: cfg.shear,
        normalizer: Normalizer::from_max_abs(fitted)?,
        entries,
        base_dir: out_dir.to_path_buf(),
    };
    let manifest_path = out_dir.join("manifest.txt");
    manifest.write(&manifest_path)?;
    log::info!(
        "wrote {} train / {} val / {} test samples to {}",
        manifest.count(Split::Train),
        manifest.count(Split::Validation),
        manifest.count(Split::Test),
        out_dir.display()
    );
    Ok(manifest)
}
