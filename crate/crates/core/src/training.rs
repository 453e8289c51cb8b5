//! Supervised training: Adam on an L1 loss with a linear learning-rate decay
//! over the second half of the run, epoch-shuffled mini-batches, periodic
//! validation and multi-seed statistics.

use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::FlowSample;
use crate::tensor::{backward, l1_loss, no_grad, Mode, Tensor, TensorError};
use crate::unet::{CheckpointMeta, UNet, UNetConfig, UNetError};

#[derive(Debug, Clone, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("iteration {iteration} outside 0..{iterations}")]
    OutOfRange { iteration: usize, iterations: usize },
    #[error("dataset has no training samples")]
    DatasetMissing,
    #[error("loss became non-finite at iteration {iteration}")]
    Diverged { iteration: usize, record: Box<RunRecord> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] UNetError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: Arc<io::Error> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decay to 10% of `lr` over the second half of the run.
    pub lr_decay: bool,
    pub seed: u64,
    /// Validation (and curve recording) interval in iterations.
    pub val_every: usize,
    pub model: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 4000,
            batch_size: 10,
            lr: 4e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            lr_decay: true,
            seed: 0,
            val_every: 200,
            model: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.iterations == 0 {
            return Err(TrainError::Config("iterations must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(TrainError::Config("validation interval must be positive".into()));
        }
        self.model.validate()?;
        Ok(())
    }
}

/// Constant for the first half, then linear down to `lr/10` at the final
/// iteration.
pub fn lr_at(cfg: &TrainConfig, iteration: usize) -> Result<f64, TrainError> {
    let n = cfg.iterations;
    if iteration >= n {
        return Err(TrainError::OutOfRange { iteration, iterations: n });
    }
    let half = n / 2;
    if !cfg.lr_decay || iteration <= half {
        return Ok(cfg.lr);
    }
    let end = cfg.lr / 10.0;
    let frac = (iteration - half) as f64 / (n - 1 - half) as f64;
    Ok(end + (cfg.lr - end) * (1.0 - frac))
}

/// Bias-corrected Adam update of one parameter slice. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    m: &mut [f32],
    v: &mut [f32],
    step: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    let (b1f, b2f) = (b1 as f32, b2 as f32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1f * m[i] + (1.0 - b1f) * g;
        v[i] = b2f * v[i] + (1.0 - b2f) * g * g;
        let m_hat = m[i] as f64 / c1;
        let v_hat = v[i] as f64 / c2;
        param[i] -= (lr * m_hat / (v_hat.sqrt() + eps)) as f32;
    }
}

/// First and second moments for a fixed list of parameters.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor<f32>]) -> Self {
        AdamState {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// Applies one Adam step using each parameter's accumulated gradient
/// (missing gradients count as zero) and clears the gradients.
pub fn adam_step(
    params: &[Tensor<f32>],
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) -> Result<(), TensorError> {
    if state.m.len() != params.len() || params.iter().zip(&state.m).any(|(p, m)| p.numel() != m.len()) {
        return Err(TensorError::ShapeMismatch { op: "adam_step", detail: "state does not match parameters".into() });
    }
    state.step += 1;
    for (i, p) in params.iter().enumerate() {
        let Some(g) = p.grad() else { continue };
        let mut data = p.data_mut();
        adam_update(&mut data, &g, &mut state.m[i], &mut state.v[i], state.step, lr, betas, eps);
        drop(data);
        p.zero_grad();
    }
    Ok(())
}

/// Stacks sample inputs and targets into `N×3×R×R` tensors.
pub fn make_batch(samples: &[&FlowSample]) -> (Tensor<f32>, Tensor<f32>) {
    let r = samples[0].resolution;
    let mut x = Vec::with_capacity(samples.len() * 3 * r * r);
    let mut y = Vec::with_capacity(samples.len() * 3 * r * r);
    for s in samples {
        x.extend_from_slice(s.input());
        y.extend_from_slice(s.target());
    }
    let shape = [samples.len(), 3, r, r];
    (
        Tensor::from_vec(&shape, x).expect("batch shape"),
        Tensor::from_vec(&shape, y).expect("batch shape"),
    )
}

/// Eval-mode mean L1 over a sample set, batched to bound memory.
pub fn mean_l1(model: &UNet<f32>, samples: &[FlowSample], batch: usize) -> Result<f64, TensorError> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&FlowSample> = chunk.iter().collect();
        let (x, y) = make_batch(&refs);
        let out = model.infer(&x)?;
        let l = no_grad(|| l1_loss(&out, &y))?.item() as f64;
        total += l * y.numel() as f64;
        count += y.numel();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecordPoint {
    pub iteration: usize,
    /// Mini-batch L1 at this iteration, before its update.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub points: Vec<RecordPoint>,
    /// Eval-mode L1 over the full training set after the last update.
    pub final_train_loss: f64,
    /// Eval-mode L1 over the validation set after the last update.
    pub final_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
}

impl RunRecord {
    /// One `iteration train_loss val_loss lr` line per recorded point.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# iteration train_loss val_loss lr\n");
        for p in &self.points {
            let val = p.val_loss.map_or("nan".to_string(), |v| format!("{v:.8e}"));
            let _ = writeln!(s, "{} {:.8e} {} {:.8e}", p.iteration, p.train_loss, val, p.lr);
        }
        let _ = writeln!(s, "# seed {}", self.seed);
        let _ = writeln!(s, "# final_train_loss {:.8e}", self.final_train_loss);
        if let Some(v) = self.final_val_loss {
            let _ = writeln!(s, "# final_val_loss {v:.8e}");
        }
        s
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub train: Vec<FlowSample>,
    pub val: Vec<FlowSample>,
}

/// Where and how to persist a run.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Extra key/value metadata written into checkpoints.
    pub meta: std::collections::BTreeMap<String, String>,
}

fn save(model: &UNet<f32>, out: &RunOutput, name: &str, iteration: usize) -> Result<Option<PathBuf>, TrainError> {
    let Some(dir) = &out.dir else { return Ok(None) };
    let path = dir.join(name);
    model.save(&path, &CheckpointMeta { iteration, extra: out.meta.clone() })?;
    Ok(Some(path))
}

/// Trains one model from scratch and returns it with its run record.
pub fn train(cfg: &TrainConfig, data: &TrainData, out: &RunOutput) -> Result<(UNet<f32>, RunRecord), TrainError> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::DatasetMissing);
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| TrainError::Io { path: dir.clone(), source: Arc::new(e) })?;
    }
    let mut model = UNet::<f32>::build(cfg.model, cfg.seed)?;
    let params = model.parameters();
    let mut adam = AdamState::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    dropout_rng.set_stream(2);

    let batch = cfg.batch_size.min(data.train.len());
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut cursor = order.len();
    let mut record = RunRecord { seed: cfg.seed, ..Default::default() };
    let last = cfg.iterations - 1;

    for it in 0..cfg.iterations {
        if cursor + batch > order.len() {
            order.shuffle(&mut shuffle_rng);
            cursor = 0;
        }
        let refs: Vec<&FlowSample> = order[cursor..cursor + batch].iter().map(|&i| &data.train[i]).collect();
        cursor += batch;
        let (x, y) = make_batch(&refs);
        let lr = lr_at(cfg, it)?;

        let recording = it % cfg.val_every == 0 || it == last;
        let val_loss = if recording && !data.val.is_empty() { Some(mean_l1(&model, &data.val, cfg.batch_size)?) } else { None };

        let pred = model.forward(&x, Mode::Train, &mut dropout_rng)?;
        let loss = l1_loss(&pred, &y)?;
        let loss_value = loss.item() as f64;
        if recording {
            record.points.push(RecordPoint { iteration: it, train_loss: loss_value, val_loss, lr });
            log::info!(
                "iter {it:>6}  train {loss_value:.5}  val {}  lr {lr:.2e}",
                val_loss.map_or("-".into(), |v| format!("{v:.5}"))
            );
            if let Some(v) = val_loss {
                if record.best_val_loss.is_none_or(|b| v < b) {
                    record.best_val_loss = Some(v);
                    if let Some(p) = save(&model, out, "best.ckpt", it)? {
                        record.best_checkpoint = Some(p);
                    }
                }
            }
        }
        if !loss_value.is_finite() {
            return Err(TrainError::Diverged { iteration: it, record: Box::new(record) });
        }
        backward(&loss)?;
        adam_step(&params, &mut adam, lr, (cfg.beta1, cfg.beta2), cfg.eps)?;
    }

    record.final_train_loss = mean_l1(&model, &data.train, cfg.batch_size)?;
    if !record.final_train_loss.is_finite() {
        return Err(TrainError::Diverged { iteration: cfg.iterations, record: Box::new(record) });
    }
    record.final_val_loss = if data.val.is_empty() { None } else { Some(mean_l1(&model, &data.val, cfg.batch_size)?) };
    record.final_checkpoint = save(&model, out, "final.ckpt", cfg.iterations)?;
    if let Some(dir) = &out.dir {
        let path = dir.join("record.txt");
        fs::write(&path, record.to_text()).map_err(|e| TrainError::Io { path, source: Arc::new(e) })?;
    }
    Ok((model, record))
}

/// Mean and standard error of the mean (sample standard deviation / √n).
pub fn mean_sem(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone)]
pub struct MultiSeedSummary {
    pub records: Vec<RunRecord>,
    pub mean_val_loss: f64,
    pub sem_val_loss: f64,
}

/// Runs `n_runs` trainings with seeds `cfg.seed, cfg.seed + 1, …`; each run
/// writes into `run_<seed>` under the output directory.
pub fn multi_seed(
    cfg: &TrainConfig,
    data: &TrainData,
    out: &RunOutput,
    n_runs: usize,
) -> Result<(Vec<UNet<f32>>, MultiSeedSummary), TrainError> {
    if n_runs < 2 {
        return Err(TrainError::Config("multi-seed statistics need at least two runs".into()));
    }
    let mut models = Vec::with_capacity(n_runs);
    let mut records = Vec::with_capacity(n_runs);
    for k in 0..n_runs {
        let run_cfg = TrainConfig { seed: cfg.seed + k as u64, ..cfg.clone() };
        let run_out = RunOutput { dir: out.dir.as_ref().map(|d| d.join(format!("run_{}", run_cfg.seed))), meta: out.meta.clone() };
        let (m, r) = train(&run_cfg, data, &run_out)?;
        models.push(m);
        records.push(r);
    }
    let finals: Vec<f64> = records.iter().map(|r| r.final_val_loss.unwrap_or(r.final_train_loss)).collect();
    let (mean_val_loss, sem_val_loss) = mean_sem(&finals);
    Ok((models, MultiSeedSummary { records, mean_val_loss, sem_val_loss }))
}

pub fn write_summary(path: &Path, summary: &MultiSeedSummary) -> Result<(), TrainError> {
    let mut s = String::from("# seed final_train_loss final_val_loss\n");
    for r in &summary.records {
        let _ = writeln!(s, "{} {:.8e} {:.8e}", r.seed, r.final_train_loss, r.final_val_loss.unwrap_or(f64::NAN));
    }
    let _ = writeln!(s, "mean_val_loss = {:.8e}", summary.mean_val_loss);
    let _ = writeln!(s, "sem_val_loss = {:.8e}", summary.sem_val_loss);
    fs::write(path, s).map_err(|e| TrainError::Io { path: path.to_path_buf(), source: Arc::new(e) })
}
