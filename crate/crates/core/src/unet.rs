//! The 14-block encoder/decoder U-Net with skip concatenations.
//!
//! Encoder blocks halve the resolution with stride-2 convolutions (four 4×4
//! blocks followed by 2×2 blocks down to a 1×1 bottleneck). Each decoder
//! block upsamples ×2 and applies a size-preserving convolution, consuming
//! the concatenation of the previous decoder output and the mirrored encoder
//! output. Blocks are pre-activation: activation → conv → batch norm →
//! dropout.
//!
//! A decoder kernel is one smaller than that of the encoder block whose
//! resolution it restores (3×3 for the 4×4 levels, 1×1 for the 2×2
//! levels), except for the final 4×4 output convolution with asymmetric
//! padding. Together with batch norm on encoder blocks 2–6 and decoder
//! blocks 8–13 this yields exactly 122,979 / 487,107 / 1,938,819 /
//! 7,736,067 / 30,905,859 weights for channel exponents 3–7.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{
    batch_norm, concat_channels, conv2d, dropout, leaky_relu, relu, upsample2x, BatchNormStats, Mode, Padding, Scalar,
    Tensor, TensorError, UpsampleMode,
};

pub const IN_CHANNELS: usize = 3;
pub const OUT_CHANNELS: usize = 3;
const ENCODER_FACTORS: [usize; 7] = [1, 2, 2, 4, 8, 8, 8];
const LEAKY_SLOPE: f64 = 0.2;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;
const CHECKPOINT_FORMAT: &str = "foilnet-checkpoint-1";

#[derive(Debug, Clone, thiserror::Error)]
pub enum UNetError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: Arc<io::Error> },
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> UNetError {
    UNetError::Checkpoint { path: path.to_path_buf(), reason: reason.into() }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> UNetError + '_ {
    move |e| UNetError::Io { path: path.to_path_buf(), source: Arc::new(e) }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UNetConfig {
    /// Channel base multiplier is `2^channel_exponent`.
    pub channel_exponent: u32,
    pub dropout: f64,
    /// Input/output side length: 128 for the full network; 32 or 64 build a
    /// reduced-depth variant with fewer 2×2 blocks and the same structure.
    pub resolution: usize,
    pub upsample: UpsampleMode,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { channel_exponent: 5, dropout: 0.01, resolution: 128, upsample: UpsampleMode::Bilinear }
    }
}

impl UNetConfig {
    pub fn new(channel_exponent: u32) -> Self {
        UNetConfig { channel_exponent, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), UNetError> {
        if !(1..=8).contains(&self.channel_exponent) {
            return Err(UNetError::ConfigInvalid(format!("channel exponent {} not in 1..=8", self.channel_exponent)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(UNetError::ConfigInvalid(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !matches!(self.resolution, 32 | 64 | 128) {
            return Err(UNetError::ConfigInvalid(format!("resolution {} not one of 32, 64, 128", self.resolution)));
        }
        Ok(())
    }

    /// Number of encoder blocks: one per halving down to 1×1.
    pub fn encoder_blocks(&self) -> usize {
        self.resolution.trailing_zeros() as usize
    }

    fn encoder_factors(&self) -> Vec<usize> {
        let levels = self.encoder_blocks();
        let mut f = ENCODER_FACTORS[..4].to_vec();
        f.extend_from_slice(&ENCODER_FACTORS[7 - (levels - 4)..]);
        f
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Activation {
    None,
    Leaky,
    Relu,
}

#[derive(Debug)]
struct BatchNormLayer<T: Scalar> {
    gamma: Tensor<T>,
    beta: Tensor<T>,
    stats: BatchNormStats<T>,
}

#[derive(Debug)]
struct Block<T: Scalar> {
    name: String,
    activation: Activation,
    upsample: bool,
    weight: Tensor<T>,
    bias: Tensor<T>,
    stride: usize,
    pad: Padding,
    bn: Option<BatchNormLayer<T>>,
    dropout: bool,
}

/// Per-block spatial size and channel count, recorded during construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockShape {
    pub in_channels: usize,
    pub out_channels: usize,
    pub out_size: usize,
}

#[derive(Debug)]
pub struct UNet<T: Scalar = f32> {
    pub config: UNetConfig,
    pub seed: u64,
    encoder: Vec<Block<T>>,
    /// Ordered bottleneck-first: l8 … l14.
    decoder: Vec<Block<T>>,
    shapes: Vec<BlockShape>,
}

fn init_conv<T: Scalar, R: Rng>(rng: &mut R, cout: usize, cin: usize, k: usize) -> (Tensor<T>, Tensor<T>) {
    let bound = 1.0 / ((cin * k * k) as f64).sqrt();
    let mut draw = |n: usize| (0..n).map(|_| T::of(rng.gen_range(-bound..bound))).collect::<Vec<T>>();
    let w = draw(cout * cin * k * k);
    let b = draw(cout);
    (
        Tensor::parameter(&[cout, cin, k, k], w).expect("kernel shape matches data"),
        Tensor::parameter(&[cout], b).expect("bias shape matches data"),
    )
}

fn bn_layer<T: Scalar>(c: usize) -> BatchNormLayer<T> {
    BatchNormLayer {
        gamma: Tensor::parameter(&[c], vec![T::one(); c]).expect("gamma"),
        beta: Tensor::parameter(&[c], vec![T::zero(); c]).expect("beta"),
        stats: BatchNormStats::new(c),
    }
}

impl<T: Scalar> UNet<T> {
    pub fn build(config: UNetConfig, seed: u64) -> Result<Self, UNetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = 1usize << config.channel_exponent;
        let factors = config.encoder_factors();
        let levels = factors.len();
        let enc_out: Vec<usize> = factors.iter().map(|f| f * base).collect();
        let enc_k = |i: usize| if i < 4 { 4 } else { 2 };

        let mut shapes = Vec::new();
        let mut encoder = Vec::with_capacity(levels);
        let mut size = config.resolution;
        let mut cin = IN_CHANNELS;
        for i in 0..levels {
            let k = enc_k(i);
            let (weight, bias) = init_conv(&mut rng, enc_out[i], cin, k);
            let first = i == 0;
            let bottleneck = i == levels - 1;
            encoder.push(Block {
                name: format!("l{}", i + 1),
                activation: if first { Activation::None } else { Activation::Leaky },
                upsample: false,
                weight,
                bias,
                stride: 2,
                pad: if k == 4 { Padding::uniform(1) } else { Padding::NONE },
                bn: (!first && !bottleneck).then(|| bn_layer(enc_out[i])),
                dropout: !first,
            });
            size /= 2;
            shapes.push(BlockShape { in_channels: cin, out_channels: enc_out[i], out_size: size });
            cin = enc_out[i];
        }
        debug_assert_eq!(size, 1);

        let mut decoder = Vec::with_capacity(levels);
        for j in (0..levels).rev() {
            // Input: bottleneck alone, else previous decoder output ++ mirrored encoder output.
            let cin = if j == levels - 1 { enc_out[j] } else { 2 * enc_out[j] };
            let last = j == 0;
            let cout = if last { OUT_CHANNELS } else { enc_out[j - 1] };
            let (k, pad) = if last {
                (4, Padding::new(2, 1, 2, 1))
            } else if enc_k(j - 1) == 4 {
                (3, Padding::uniform(1))
            } else {
                (1, Padding::NONE)
            };
            let (weight, bias) = init_conv(&mut rng, cout, cin, k);
            decoder.push(Block {
                name: format!("l{}", 2 * levels - j),
                activation: Activation::Relu,
                upsample: true,
                weight,
                bias,
                stride: 1,
                pad,
                bn: (!last).then(|| bn_layer(cout)),
                dropout: !last,
            });
            size *= 2;
            shapes.push(BlockShape { in_channels: cin, out_channels: cout, out_size: size });
        }
        debug_assert_eq!(size, config.resolution);
        Ok(UNet { config, seed, encoder, decoder, shapes })
    }

    /// Encoder then decoder block shapes, l1 … l14.
    pub fn block_shapes(&self) -> &[BlockShape] {
        &self.shapes
    }

    fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.encoder.iter().chain(&self.decoder)
    }

    fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    /// Trainable tensors with stable names, in construction order.
    pub fn named_parameters(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.push((format!("{}.conv.weight", b.name), b.weight.clone()));
            out.push((format!("{}.conv.bias", b.name), b.bias.clone()));
            if let Some(bn) = &b.bn {
                out.push((format!("{}.bn.gamma", b.name), bn.gamma.clone()));
                out.push((format!("{}.bn.beta", b.name), bn.beta.clone()));
            }
        }
        out
    }

    pub fn parameters(&self) -> Vec<Tensor<T>> {
        self.named_parameters().into_iter().map(|(_, t)| t).collect()
    }

    pub fn count_parameters(&self) -> usize {
        count_parameters(&self.parameters())
    }

    fn apply_block<R: Rng + ?Sized>(
        &self,
        block: &Block<T>,
        stats: &mut Option<BatchNormStats<T>>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Tensor<T>, TensorError> {
        let mut h = match block.activation {
            Activation::None => x.clone(),
            Activation::Leaky => leaky_relu(x, LEAKY_SLOPE),
            Activation::Relu => relu(x),
        };
        if block.upsample {
            h = upsample2x(&h, self.config.upsample)?;
        }
        h = conv2d(&h, &block.weight, Some(&block.bias), block.stride, block.pad)?;
        if let (Some(bn), Some(stats)) = (&block.bn, stats.as_mut()) {
            h = batch_norm(&h, &bn.gamma, &bn.beta, stats, mode, BN_MOMENTUM, BN_EPS)?;
        }
        if block.dropout && self.config.dropout > 0.0 {
            h = dropout(&h, self.config.dropout, mode, rng);
        }
        Ok(h)
    }

    fn run<R: Rng + ?Sized>(
        &self,
        input: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
        stats: &mut [Option<BatchNormStats<T>>],
    ) -> Result<Tensor<T>, TensorError> {
        let r = self.config.resolution;
        match *input.shape() {
            [_, c, h, w] if c == IN_CHANNELS && h == r && w == r => {}
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "unet",
                    detail: format!("expected N×{IN_CHANNELS}×{r}×{r}, got {:?}", input.shape()),
                })
            }
        }
        let levels = self.encoder.len();
        let (enc_stats, dec_stats) = stats.split_at_mut(levels);
        let mut skips = Vec::with_capacity(levels);
        let mut h = input.clone();
        for (block, st) in self.encoder.iter().zip(enc_stats.iter_mut()) {
            h = self.apply_block(block, st, &h, mode, rng)?;
            skips.push(h.clone());
        }
        for (d, (block, st)) in self.decoder.iter().zip(dec_stats.iter_mut()).enumerate() {
            let j = levels - 1 - d;
            let x = if d == 0 { h.clone() } else { concat_channels(&h, &skips[j])? };
            h = self.apply_block(block, st, &x, mode, rng)?;
        }
        Ok(h)
    }

    /// Forward pass; `Train` mode uses batch statistics, updates the running
    /// statistics and applies dropout.
    pub fn forward<R: Rng + ?Sized>(&mut self, input: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>, TensorError> {
        let mut stats: Vec<_> = self.blocks_mut().map(|b| b.bn.as_mut().map(|bn| std::mem::replace(&mut bn.stats, BatchNormStats::new(0)))).collect();
        let out = self.run(input, mode, rng, &mut stats);
        for (b, s) in self.blocks_mut().zip(stats) {
            if let (Some(bn), Some(s)) = (b.bn.as_mut(), s) {
                bn.stats = s;
            }
        }
        out
    }

    /// Eval-mode forward on a shared model; never records a graph.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let mut stats: Vec<_> = self.blocks().map(|b| b.bn.as_ref().map(|bn| bn.stats.clone())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        crate::tensor::no_grad(|| self.run(input, Mode::Eval, &mut rng, &mut stats))
    }

    /// All persistent tensors (parameters plus running statistics) as plain
    /// vectors, in a fixed order.
    pub fn state(&self) -> Vec<(String, Vec<usize>, Vec<T>)> {
        let mut out = Vec::new();
        for b in self.blocks() {
            out.push((format!("{}.conv.weight", b.name), b.weight.shape().to_vec(), b.weight.to_vec()));
            out.push((format!("{}.conv.bias", b.name), b.bias.shape().to_vec(), b.bias.to_vec()));
            if let Some(bn) = &b.bn {
                let c = bn.gamma.numel();
                out.push((format!("{}.bn.gamma", b.name), vec![c], bn.gamma.to_vec()));
                out.push((format!("{}.bn.beta", b.name), vec![c], bn.beta.to_vec()));
                out.push((format!("{}.bn.running_mean", b.name), vec![c], bn.stats.mean.clone()));
                out.push((format!("{}.bn.running_var", b.name), vec![c], bn.stats.var.clone()));
            }
        }
        out
    }

    fn load_state(&mut self, mut tensors: BTreeMap<String, (Vec<usize>, Vec<T>)>) -> Result<(), String> {
        let mut take = |name: String, shape: &[usize]| -> Result<Vec<T>, String> {
            let (s, v) = tensors.remove(&name).ok_or_else(|| format!("missing tensor {name}"))?;
            if s != shape {
                return Err(format!("tensor {name} has shape {s:?}, expected {shape:?}"));
            }
            Ok(v)
        };
        for b in self.blocks_mut() {
            *b.weight.data_mut() = take(format!("{}.conv.weight", b.name), b.weight.shape())?;
            *b.bias.data_mut() = take(format!("{}.conv.bias", b.name), b.bias.shape())?;
            if let Some(bn) = b.bn.as_mut() {
                let c = [bn.gamma.numel()];
                *bn.gamma.data_mut() = take(format!("{}.bn.gamma", b.name), &c)?;
                *bn.beta.data_mut() = take(format!("{}.bn.beta", b.name), &c)?;
                bn.stats.mean = take(format!("{}.bn.running_mean", b.name), &c)?;
                bn.stats.var = take(format!("{}.bn.running_var", b.name), &c)?;
            }
        }
        match tensors.keys().next() {
            Some(extra) => Err(format!("unexpected tensor {extra}")),
            None => Ok(()),
        }
    }
}

/// Total element count of trainable tensors.
pub fn count_parameters<T: Scalar>(params: &[Tensor<T>]) -> usize {
    params.iter().filter(|t| t.requires_grad()).map(Tensor::numel).sum()
}

/// Metadata stored alongside the weights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub iteration: usize,
    /// Free-form `key = value` pairs (dataset constants, variant, …).
    pub extra: BTreeMap<String, String>,
}

fn blob_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".bin");
    PathBuf::from(p)
}

impl UNet<f32> {
    /// Writes the text manifest at `path` and the raw little-endian f32
    /// tensor data at `path` + `.bin`.
    pub fn save(&self, path: &Path, meta: &CheckpointMeta) -> Result<(), UNetError> {
        let mut text = String::new();
        let c = &self.config;
        let upsample = match c.upsample {
            UpsampleMode::Bilinear => "bilinear",
            UpsampleMode::Nearest => "nearest",
        };
        let _ = writeln!(text, "format = {CHECKPOINT_FORMAT}");
        let _ = writeln!(text, "channel_exponent = {}", c.channel_exponent);
        let _ = writeln!(text, "dropout = {}", c.dropout);
        let _ = writeln!(text, "resolution = {}", c.resolution);
        let _ = writeln!(text, "upsample = {upsample}");
        let _ = writeln!(text, "seed = {}", self.seed);
        let _ = writeln!(text, "iteration = {}", meta.iteration);
        let _ = writeln!(text, "parameters = {}", self.count_parameters());
        for (k, v) in &meta.extra {
            let _ = writeln!(text, "meta.{k} = {v}");
        }
        let mut blob = Vec::new();
        for (name, shape, values) in self.state() {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let _ = writeln!(text, "tensor {name} {} {} {}", dims.join("x"), blob.len(), values.len() * 4);
            for v in values {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let bin = blob_path(path);
        fs::write(&bin, blob).map_err(io_err(&bin))?;
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<(Self, CheckpointMeta), UNetError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let bin = blob_path(path);
        let blob = fs::read(&bin).map_err(io_err(&bin))?;
        let mut keys = BTreeMap::new();
        let mut meta = CheckpointMeta::default();
        let mut tensors = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let bad = |why: String| ckpt_err(path, format!("line {}: {why}", no + 1));
            if let Some(rest) = line.strip_prefix("tensor ") {
                let cols: Vec<&str> = rest.split_whitespace().collect();
                let [name, dims, offset, len] = cols[..] else {
                    return Err(bad("expected `tensor <name> <dims> <offset> <bytes>`".into()));
                };
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| bad(format!("bad dims {dims}")))?;
                let (offset, len): (usize, usize) = match (offset.parse(), len.parse()) {
                    (Ok(o), Ok(l)) => (o, l),
                    _ => return Err(bad("bad offset/length".into())),
                };
                if len != 4 * shape.iter().product::<usize>() || offset + len > blob.len() {
                    return Err(bad(format!("tensor {name} does not fit the blob")));
                }
                let values = blob[offset..offset + len]
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                tensors.insert(name.to_string(), (shape, values));
            } else if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                if let Some(m) = k.strip_prefix("meta.") {
                    meta.extra.insert(m.to_string(), v.to_string());
                } else {
                    keys.insert(k.to_string(), v.to_string());
                }
            } else if !line.trim().is_empty() {
                return Err(bad("unrecognized line".into()));
            }
        }
        let get = |k: &str| keys.get(k).ok_or_else(|| ckpt_err(path, format!("missing key {k}")));
        if get("format")? != CHECKPOINT_FORMAT {
            return Err(ckpt_err(path, "unsupported checkpoint format"));
        }
        let num = |k: &str| -> Result<f64, UNetError> {
            get(k)?.parse::<f64>().map_err(|_| ckpt_err(path, format!("{k} is not a number")))
        };
        let upsample = match get("upsample")?.as_str() {
            "bilinear" => UpsampleMode::Bilinear,
            "nearest" => UpsampleMode::Nearest,
            other => return Err(ckpt_err(path, format!("unknown upsample mode {other}"))),
        };
        let config = UNetConfig {
            channel_exponent: num("channel_exponent")? as u32,
            dropout: num("dropout")?,
            resolution: num("resolution")? as usize,
            upsample,
        };
        let seed = get("seed")?.parse().map_err(|_| ckpt_err(path, "bad seed"))?;
        meta.iteration = num("iteration")? as usize;
        let mut net = UNet::build(config, seed)?;
        net.load_state(tensors).map_err(|e| ckpt_err(path, e))?;
        Ok((net, meta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_counts_match_reference_sizes() {
        let expected = [(3, 122_979), (4, 487_107), (5, 1_938_819), (6, 7_736_067), (7, 30_905_859)];
        for (ci, count) in expected {
            assert_eq!(UNet::<f32>::build(UNetConfig::new(ci), 0).unwrap().count_parameters(), count, "ci={ci}");
        }
    }

    #[test]
    fn spatial_and_channel_ledger() {
        let net = UNet::<f32>::build(UNetConfig::new(6), 0).unwrap();
        let sizes: Vec<usize> = net.block_shapes().iter().map(|s| s.out_size).collect();
        assert_eq!(sizes, [64, 32, 16, 8, 4, 2, 1, 2, 4, 8, 16, 32, 64, 128]);
        let shapes = net.block_shapes();
        assert_eq!(shapes[6].out_channels, 512);
        for d in 8..14 {
            // Each skip concatenation doubles the incoming decoder channels.
            assert_eq!(shapes[d].in_channels, 2 * shapes[d - 1].out_channels);
        }
        assert_eq!(shapes[13].out_channels, 3);
    }

    #[test]
    fn reduced_depth_variants() {
        let n32 = UNet::<f32>::build(UNetConfig { resolution: 32, ..UNetConfig::new(3) }, 0).unwrap();
        let sizes: Vec<usize> = n32.block_shapes().iter().map(|s| s.out_size).collect();
        assert_eq!(sizes, [16, 8, 4, 2, 1, 2, 4, 8, 16, 32]);
        let n64 = UNet::<f32>::build(UNetConfig { resolution: 64, ..UNetConfig::new(3) }, 0).unwrap();
        assert_eq!(n64.block_shapes().len(), 12);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [UNetConfig::new(0), UNetConfig::new(9), UNetConfig { resolution: 100, ..UNetConfig::new(3) }] {
            assert!(matches!(UNet::<f32>::build(cfg, 0), Err(UNetError::ConfigInvalid(_))));
        }
        assert_eq!(count_parameters::<f32>(&[]), 0);
    }
}
