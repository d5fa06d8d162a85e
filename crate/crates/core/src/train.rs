//! Adam training loop with deterministic batching, checkpointing, and
//! bit-exact resume.
//!
//! One iteration is a pure function of the trainer state: the batch comes
//! from [`crate::data::batch_at`], the optimizer math is elementwise, and the
//! checkpoint captures every tensor that influences the next step. Restarting
//! from a checkpoint therefore reproduces an uninterrupted run byte for byte.

use std::error::Error;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::data::{batch_at, stack, DataError, DatasetConfig};
use crate::loss::{loss_total, psnr, ssim, LossValues, LossWeights};
use crate::network::{Ablations, ModelConfig, ThunderModel};
use crate::tensor::{Parameter, Scalar, Shape, Tensor, TensorError};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Global-norm ceiling applied to the gradient before each step.
pub const CLIP_NORM: f64 = 5.0;

/// Optimization hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch: usize,
    pub iters: usize,
    /// The learning rate halves every this many iterations.
    pub decay_every: usize,
    pub patch: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Validation cadence in iterations; 0 disables periodic validation.
    pub val_every: usize,
    /// Checkpoint cadence in iterations; 0 writes only the final checkpoint.
    pub ckpt_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            batch: 8,
            iters: 5000,
            decay_every: 50_000,
            patch: 64,
            weights: LossWeights::default(),
            seed: 0,
            val_every: 0,
            ckpt_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, k: usize) -> crate::tensor::Result<()> {
        let bad = |msg: String| TensorError::BadArgument {
            op: "train_config",
            msg,
        };
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(bad(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.batch == 0 {
            return Err(bad("batch must be at least 1".to_string()));
        }
        if self.decay_every == 0 {
            return Err(bad("decay_every must be at least 1".to_string()));
        }
        if self.patch == 0 || !self.patch.is_multiple_of(1 << k) {
            return Err(bad(format!(
                "patch {} must be divisible by 2^k = {}",
                self.patch,
                1usize << k
            )));
        }
        self.weights.validate()
    }
}

/// Step-decay schedule: the rate halves every `decay_every` iterations.
pub fn lr_at(cfg: &TrainConfig, iter: usize) -> f64 {
    cfg.lr0 * 0.5f64.powi((iter / cfg.decay_every) as i32)
}

/// Scale gradients so their global L2 norm is at most `max_norm`; returns the
/// unclipped norm.
pub fn clip_gradients<S: Scalar>(grads: &mut [Vec<S>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.iter_mut().for_each(|v| *v *= scale);
        }
    }
    norm
}

/// Adam moment buffers, aligned with a parameter list.
pub struct AdamState<S: Scalar> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &[Parameter<S>]) -> Self {
        let zeros: Vec<Vec<S>> = params
            .iter()
            .map(|p| vec![S::zero(); p.tensor.numel()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update over all parameters.
    pub fn step(
        &mut self,
        params: &[Parameter<S>],
        grads: &[Vec<S>],
        lr: f64,
    ) -> crate::tensor::Result<()> {
        if grads.len() != params.len() {
            return Err(TensorError::BadArgument {
                op: "adam_step",
                msg: format!("{} grads for {} params", grads.len(), params.len()),
            });
        }
        self.step += 1;
        let (b1, b2) = (S::from_f64(ADAM_BETA1), S::from_f64(ADAM_BETA2));
        let eps = S::from_f64(ADAM_EPS);
        let c1 = S::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
        let c2 = S::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
        let lr = S::from_f64(lr);
        let one = S::one();
        for ((param, grad), (m, v)) in params
            .iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            param.tensor.update_data(|data| {
                for i in 0..data.len() {
                    let g = grad[i];
                    m[i] = b1 * m[i] + (one - b1) * g;
                    v[i] = b2 * v[i] + (one - b2) * g * g;
                    let m_hat = m[i] / c1;
                    let v_hat = v[i] / c2;
                    data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            });
        }
        Ok(())
    }
}

/// Failures raised by training: graph/numerical errors or checkpoint I/O.
#[derive(Debug)]
pub enum TrainError {
    Tensor(TensorError),
    Data(DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Tensor(e) => e.fmt(f),
            TrainError::Data(e) => e.fmt(f),
        }
    }
}

impl Error for TrainError {}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

impl From<DataError> for TrainError {
    fn from(e: DataError) -> Self {
        TrainError::Data(e)
    }
}

pub type TrainResult<T> = std::result::Result<T, TrainError>;

/// Mean image quality over the held-out validation split.
#[derive(Clone, Copy, Debug)]
pub struct ValSummary {
    pub psnr: f64,
    pub ssim: f64,
    /// PSNR of the noisy inputs themselves, the gain baseline.
    pub psnr_noisy: f64,
}

pub struct Trainer<S: Scalar> {
    pub model: ThunderModel<S>,
    pub opt: AdamState<S>,
    pub train_cfg: TrainConfig,
    pub data_cfg: DatasetConfig,
    pub iter: usize,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        mut data_cfg: DatasetConfig,
    ) -> TrainResult<Self> {
        train_cfg.validate(model_cfg.k)?;
        data_cfg.patch = train_cfg.patch;
        data_cfg.batch = train_cfg.batch;
        let model = ThunderModel::new(model_cfg)?;
        let opt = AdamState::new(model.params());
        Ok(Trainer {
            model,
            opt,
            train_cfg,
            data_cfg,
            iter: 0,
        })
    }

    /// One optimization step; returns the loss values that were logged.
    pub fn step(&mut self) -> TrainResult<LossValues> {
        let pairs = batch_at::<S>(&self.data_cfg, self.iter);
        let (noisy, clean) = stack(&pairs);
        let outputs = self.model.forward(&noisy)?;
        let report = loss_total(
            &outputs,
            &clean,
            self.train_cfg.weights,
            self.model.config().ablations,
        )?;
        let values = report.values()?;
        if !values.total.is_finite() {
            return Err(TrainError::Tensor(TensorError::NonFinite { op: "loss" }));
        }
        for p in self.model.params() {
            p.tensor.zero_grad();
        }
        crate::tensor::backward(&report.total)?;
        let mut grads: Vec<Vec<S>> = self
            .model
            .params()
            .iter()
            .map(|p| {
                p.tensor
                    .grad()
                    .unwrap_or_else(|| vec![S::zero(); p.tensor.numel()])
            })
            .collect();
        clip_gradients(&mut grads, CLIP_NORM);
        let lr = lr_at(&self.train_cfg, self.iter);
        self.opt.step(self.model.params(), &grads, lr)?;
        self.iter += 1;
        Ok(values)
    }

    /// Run until `train_cfg.iters`, appending one tab-separated line per
    /// iteration (`iter lr total l_t l1_c l1_t l_g l_s`) to `log`.
    ///
    /// A non-finite loss aborts without touching the checkpoint file, so the
    /// last good checkpoint survives the failure.
    pub fn run<W: Write>(
        &mut self,
        log: &mut W,
        ckpt: Option<&Path>,
        mut on_val: impl FnMut(usize, ValSummary),
    ) -> TrainResult<()> {
        while self.iter < self.train_cfg.iters {
            let lr = lr_at(&self.train_cfg, self.iter);
            let v = self.step()?;
            writeln!(
                log,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                self.iter - 1,
                lr,
                v.total,
                v.l_t,
                v.l1_c,
                v.l1_t,
                v.l_g,
                v.l_s
            )
            .map_err(DataError::from)?;
            let cadence = |every: usize| every > 0 && self.iter.is_multiple_of(every);
            if cadence(self.train_cfg.val_every) && self.iter < self.train_cfg.iters {
                on_val(self.iter, self.validate()?);
            }
            if cadence(self.train_cfg.ckpt_every) {
                if let Some(path) = ckpt {
                    self.save(path)?;
                }
            }
        }
        if let Some(path) = ckpt {
            self.save(path)?;
        }
        Ok(())
    }

    /// Mean PSNR/SSIM over the validation split, plus the noisy baseline.
    pub fn validate(&self) -> TrainResult<ValSummary> {
        let n = self.data_cfg.val_images.max(1);
        let (mut p_sum, mut s_sum, mut pn_sum) = (0.0, 0.0, 0.0);
        for i in 0..self.data_cfg.val_images {
            let (clean, noisy) = self.data_cfg.val_pair::<S>(i);
            let out = self.model.forward(&noisy)?;
            p_sum += psnr(&out.i_c, &clean, 1.0)?;
            s_sum += ssim(&out.i_c, &clean)?.value()?.as_f64();
            pn_sum += psnr(&noisy, &clean, 1.0)?;
        }
        Ok(ValSummary {
            psnr: p_sum / n as f64,
            ssim: s_sum / n as f64,
            psnr_noisy: pn_sum / n as f64,
        })
    }

    /// Write model, optimizer, and progress to a checkpoint file.
    pub fn save(&self, path: &Path) -> TrainResult<()> {
        let mut tensors = Vec::new();
        for (i, p) in self.model.params().iter().enumerate() {
            tensors.push(CkptTensor::of_shape(
                &p.name,
                p.tensor.shape(),
                &p.tensor.data(),
            ));
            tensors.push(CkptTensor::of_shape(
                &format!("adam.m.{}", p.name),
                p.tensor.shape(),
                &self.opt.m[i],
            ));
            tensors.push(CkptTensor::of_shape(
                &format!("adam.v.{}", p.name),
                p.tensor.shape(),
                &self.opt.v[i],
            ));
        }
        let cfg = self.model.config();
        tensors.push(CkptTensor::meta(
            "meta.model",
            &[
                cfg.k as f64,
                cfg.m as f64,
                cfg.q as f64,
                cfg.nhl_per_spb as f64,
                ablation_bits(cfg.ablations) as f64,
                (cfg.seed >> 32) as f64,
                (cfg.seed & 0xffff_ffff) as f64,
            ],
        ));
        tensors.push(CkptTensor::meta(
            "meta.train",
            &[self.iter as f64, self.opt.step as f64],
        ));
        write_checkpoint(path, &tensors)?;
        Ok(())
    }

    /// Rebuild a trainer from a checkpoint; the model configuration comes
    /// from the checkpoint itself.
    pub fn load(path: &Path, train_cfg: TrainConfig, data_cfg: DatasetConfig) -> TrainResult<Self> {
        let tensors = read_checkpoint(path)?;
        let model_cfg = model_config_of(path, &tensors)?;
        let mut trainer = Trainer::new(model_cfg, train_cfg, data_cfg)?;
        let missing = |name: &str| DataError::Format {
            path: path.to_path_buf(),
            msg: format!("checkpoint is missing tensor {name}"),
        };
        let lookup = |name: &str| tensors.iter().find(|t| t.name == name);
        for (i, p) in trainer.model.params().iter().enumerate() {
            let entry = lookup(&p.name).ok_or_else(|| missing(&p.name))?;
            entry.copy_into(path, &p.tensor)?;
            trainer.opt.m[i] = lookup(&format!("adam.m.{}", p.name))
                .ok_or_else(|| missing(&p.name))?
                .scalars();
            trainer.opt.v[i] = lookup(&format!("adam.v.{}", p.name))
                .ok_or_else(|| missing(&p.name))?
                .scalars();
        }
        let meta = lookup("meta.train").ok_or_else(|| missing("meta.train"))?;
        let meta: Vec<f64> = meta.f64s();
        if meta.len() != 2 {
            return Err(missing("meta.train").into());
        }
        trainer.iter = meta[0] as usize;
        trainer.opt.step = meta[1] as u64;
        Ok(trainer)
    }
}

/// Load just the model from a checkpoint (for inference commands).
pub fn load_model<S: Scalar>(path: &Path) -> TrainResult<ThunderModel<S>> {
    let tensors = read_checkpoint(path)?;
    let model = ThunderModel::new(model_config_of(path, &tensors)?)?;
    for p in model.params() {
        let entry = tensors
            .iter()
            .find(|t| t.name == p.name)
            .ok_or_else(|| DataError::Format {
                path: path.to_path_buf(),
                msg: format!("checkpoint is missing tensor {}", p.name),
            })?;
        entry.copy_into(path, &p.tensor)?;
    }
    Ok(model)
}

fn ablation_bits(a: Ablations) -> u64 {
    [
        a.no_projection,
        a.no_spr,
        a.no_csp,
        a.no_global,
        a.no_thumbnail_loss,
        a.end_to_end_residual,
    ]
    .iter()
    .enumerate()
    .map(|(i, &b)| (b as u64) << i)
    .sum()
}

fn ablations_from_bits(bits: u64) -> Ablations {
    Ablations {
        no_projection: bits & 1 != 0,
        no_spr: bits & 2 != 0,
        no_csp: bits & 4 != 0,
        no_global: bits & 8 != 0,
        no_thumbnail_loss: bits & 16 != 0,
        end_to_end_residual: bits & 32 != 0,
    }
}

fn model_config_of(path: &Path, tensors: &[CkptTensor]) -> TrainResult<ModelConfig> {
    let meta = tensors
        .iter()
        .find(|t| t.name == "meta.model")
        .ok_or_else(|| DataError::Format {
            path: path.to_path_buf(),
            msg: "checkpoint is missing tensor meta.model".to_string(),
        })?
        .f64s();
    if meta.len() != 7 {
        return Err(DataError::Format {
            path: path.to_path_buf(),
            msg: format!("meta.model has {} entries, expected 7", meta.len()),
        }
        .into());
    }
    Ok(ModelConfig {
        k: meta[0] as usize,
        m: meta[1] as usize,
        q: meta[2] as usize,
        nhl_per_spb: meta[3] as usize,
        ablations: ablations_from_bits(meta[4] as u64),
        seed: ((meta[5] as u64) << 32) | (meta[6] as u64),
    })
}

pub const CKPT_MAGIC: &[u8; 4] = b"THDR";
pub const CKPT_VERSION: u32 = 1;

/// One named tensor in a checkpoint file.
pub struct CkptTensor {
    pub name: String,
    pub extents: Vec<u32>,
    pub payload: CkptPayload,
}

/// Raw payload; dtype code 0 is f32, code 1 is f64.
pub enum CkptPayload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl CkptTensor {
    fn of_shape<S: Scalar>(name: &str, shape: Shape, data: &[S]) -> Self {
        let extents = vec![
            shape.n() as u32,
            shape.c() as u32,
            shape.h() as u32,
            shape.w() as u32,
        ];
        let payload = if std::mem::size_of::<S>() == 4 {
            CkptPayload::F32(data.iter().map(|v| v.as_f64() as f32).collect())
        } else {
            CkptPayload::F64(data.iter().map(|v| v.as_f64()).collect())
        };
        CkptTensor {
            name: name.to_string(),
            extents,
            payload,
        }
    }

    fn meta(name: &str, values: &[f64]) -> Self {
        CkptTensor {
            name: name.to_string(),
            extents: vec![values.len() as u32],
            payload: CkptPayload::F64(values.to_vec()),
        }
    }

    fn f64s(&self) -> Vec<f64> {
        match &self.payload {
            CkptPayload::F32(v) => v.iter().map(|x| *x as f64).collect(),
            CkptPayload::F64(v) => v.clone(),
        }
    }

    fn scalars<S: Scalar>(&self) -> Vec<S> {
        self.f64s().into_iter().map(S::from_f64).collect()
    }

    fn numel(&self) -> usize {
        self.extents.iter().map(|e| *e as usize).product()
    }

    fn copy_into<S: Scalar>(&self, path: &Path, t: &Tensor<S>) -> Result<(), DataError> {
        if self.numel() != t.numel() {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                msg: format!(
                    "tensor {} has {} values, model expects {}",
                    self.name,
                    self.numel(),
                    t.numel()
                ),
            });
        }
        let values = self.scalars::<S>();
        t.update_data(|data| data.copy_from_slice(&values));
        Ok(())
    }
}

/// Serialize tensors to the checkpoint container format.
pub fn write_checkpoint(path: &Path, tensors: &[CkptTensor]) -> Result<(), DataError> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        match &t.payload {
            CkptPayload::F32(v) => {
                out.push(0u8);
                out.push(t.extents.len() as u8);
                t.extents
                    .iter()
                    .for_each(|e| out.extend_from_slice(&e.to_le_bytes()));
                v.iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
            CkptPayload::F64(v) => {
                out.push(1u8);
                out.push(t.extents.len() as u8);
                t.extents
                    .iter()
                    .for_each(|e| out.extend_from_slice(&e.to_le_bytes()));
                v.iter()
                    .for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
            }
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a checkpoint container.
pub fn read_checkpoint(path: &Path) -> Result<Vec<CkptTensor>, DataError> {
    let bytes = fs::read(path)?;
    let bad = |msg: String| DataError::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8], DataError> {
        if pos + n > bytes.len() {
            return Err(DataError::Format {
                path: path.to_path_buf(),
                msg: "truncated checkpoint".to_string(),
            });
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    if take(4)? != CKPT_MAGIC {
        return Err(bad("bad magic (not a checkpoint)".to_string()));
    }
    let version = u32::from_le_bytes(take(4)?.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap());
    let mut tensors = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| bad("tensor name is not utf-8".to_string()))?;
        let dtype = take(1)?[0];
        let ndim = take(1)?[0] as usize;
        let mut extents = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            extents.push(u32::from_le_bytes(take(4)?.try_into().unwrap()));
        }
        let numel: usize = extents.iter().map(|e| *e as usize).product();
        let payload = match dtype {
            0 => CkptPayload::F32(
                take(4 * numel)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => CkptPayload::F64(
                take(8 * numel)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            other => return Err(bad(format!("unknown dtype code {other}"))),
        };
        tensors.push(CkptTensor {
            name,
            extents,
            payload,
        });
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes after last tensor".to_string()));
    }
    Ok(tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn tiny_model_cfg() -> ModelConfig {
        ModelConfig {
            k: 1,
            m: 1,
            q: 2,
            nhl_per_spb: 1,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    fn tiny_cfgs() -> (ModelConfig, TrainConfig, DatasetConfig) {
        let train = TrainConfig {
            iters: 4,
            batch: 2,
            patch: 16,
            lr0: 1e-3,
            ..TrainConfig::default()
        };
        let data = DatasetConfig {
            train_images: 4,
            val_images: 2,
            image_size: 32,
            ..DatasetConfig::default()
        };
        (tiny_model_cfg(), train, data)
    }

    fn scalar_param(value: f64) -> Parameter<f64> {
        Parameter::new("p", Tensor::variable(Shape::scalar(), vec![value]).unwrap())
    }

    #[test]
    fn adam_ignores_zero_gradients() {
        let p = scalar_param(0.7);
        let mut opt = AdamState::new(std::slice::from_ref(&p));
        opt.step(std::slice::from_ref(&p), &[vec![0.0]], 1e-3)
            .unwrap();
        assert_eq!(p.tensor.to_vec(), vec![0.7]);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        for g in [0.3, -2.0, 11.0] {
            let p = scalar_param(1.0);
            let mut opt = AdamState::new(std::slice::from_ref(&p));
            opt.step(std::slice::from_ref(&p), &[vec![g]], 1e-3)
                .unwrap();
            let expected = 1.0 - 1e-3 * g.signum();
            assert!((p.tensor.to_vec()[0] - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn adam_matches_hand_recurrence() {
        let grads = [0.4, -1.3];
        let p = scalar_param(0.25);
        let mut opt = AdamState::new(std::slice::from_ref(&p));
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.25f64);
        for (t, g) in grads.iter().enumerate() {
            opt.step(std::slice::from_ref(&p), &[vec![*g]], 1e-3)
                .unwrap();
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t as i32 + 1));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t as i32 + 1));
            x -= 1e-3 * m_hat / (v_hat.sqrt() + ADAM_EPS);
            assert!((p.tensor.to_vec()[0] - x).abs() < 1e-10, "step {t}");
        }
    }

    #[test]
    fn adam_hundred_steps_track_scalar_reference() {
        let p = scalar_param(1.5);
        let mut opt = AdamState::new(std::slice::from_ref(&p));
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 1.5f64);
        for t in 1..=100 {
            // Deterministic pseudo-gradient with sign changes.
            let g = (t as f64 * 0.37).sin() * 2.0;
            opt.step(std::slice::from_ref(&p), &[vec![g]], 5e-3)
                .unwrap();
            m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * g;
            v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = m / (1.0 - ADAM_BETA1.powi(t));
            let v_hat = v / (1.0 - ADAM_BETA2.powi(t));
            x -= 5e-3 * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        assert!((p.tensor.to_vec()[0] - x).abs() < 1e-10);
    }

    #[test]
    fn learning_rate_halves_on_schedule() {
        let cfg = TrainConfig {
            lr0: 2e-4,
            decay_every: 100,
            ..TrainConfig::default()
        };
        assert_eq!(lr_at(&cfg, 0), 2e-4);
        assert_eq!(lr_at(&cfg, 99), 2e-4);
        assert_eq!(lr_at(&cfg, 100), 1e-4);
        assert_eq!(lr_at(&cfg, 300), 2.5e-5);
    }

    #[test]
    fn clipping_rescales_only_above_the_ceiling() {
        let mut small = vec![vec![0.3f64, -0.4]];
        let norm = clip_gradients(&mut small, 5.0);
        assert!((norm - 0.5).abs() < 1e-12);
        assert_eq!(small[0], vec![0.3, -0.4]);

        let mut large = vec![vec![6.0f64], vec![8.0f64]];
        let norm = clip_gradients(&mut large, 5.0);
        assert!((norm - 10.0).abs() < 1e-12);
        assert!((large[0][0] - 3.0).abs() < 1e-12);
        assert!((large[1][0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn training_config_rejects_bad_values() {
        let cfg = TrainConfig {
            lr0: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let cfg = TrainConfig {
            patch: 66,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        let cfg = TrainConfig {
            decay_every: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate(2).is_err());
        assert!(TrainConfig::default().validate(2).is_ok());
    }

    #[test]
    fn checkpoint_save_load_save_is_byte_identical() {
        let dir = std::env::temp_dir().join("thunder-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let (mc, tc, dc) = tiny_cfgs();
        let trainer = Trainer::<f32>::new(mc, tc, dc).unwrap();
        trainer.save(&path).unwrap();
        let first = fs::read(&path).unwrap();
        let loaded = Trainer::<f32>::load(&path, tc, dc).unwrap();
        loaded.save(&path).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
    }

    #[test]
    fn zero_iteration_training_preserves_initialization() {
        let dir = std::env::temp_dir().join("thunder-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("zero-iters.ckpt");
        let (mc, mut tc, dc) = tiny_cfgs();
        tc.iters = 0;
        let mut trainer = Trainer::<f32>::new(mc, tc, dc).unwrap();
        let init: Vec<Vec<f32>> = trainer
            .model
            .params()
            .iter()
            .map(|p| p.tensor.to_vec())
            .collect();
        trainer
            .run(&mut Vec::new(), Some(&path), |_, _| {})
            .unwrap();
        let loaded = Trainer::<f32>::load(&path, tc, dc).unwrap();
        for (p, want) in loaded.model.params().iter().zip(&init) {
            assert_eq!(&p.tensor.to_vec(), want);
        }
        assert_eq!(loaded.iter, 0);
    }

    #[test]
    fn resume_matches_uninterrupted_run_bitwise() {
        let dir = std::env::temp_dir().join("thunder-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("resume.ckpt");
        let (mc, tc, dc) = tiny_cfgs();

        let mut straight = Trainer::<f32>::new(mc, tc, dc).unwrap();
        let mut log_a = Vec::new();
        straight.run(&mut log_a, None, |_, _| {}).unwrap();

        let mut first = Trainer::<f32>::new(mc, TrainConfig { iters: 2, ..tc }, dc).unwrap();
        let mut log_b = Vec::new();
        first.run(&mut log_b, Some(&path), |_, _| {}).unwrap();
        let mut second = Trainer::<f32>::load(&path, tc, dc).unwrap();
        assert_eq!(second.iter, 2);
        second.run(&mut log_b, None, |_, _| {}).unwrap();

        assert_eq!(log_a, log_b, "log streams diverged");
        for (p, q) in straight.model.params().iter().zip(second.model.params()) {
            assert_eq!(p.tensor.to_vec(), q.tensor.to_vec(), "param {}", p.name);
        }
        for (a, b) in straight.opt.m.iter().zip(&second.opt.m) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
        let dir = std::env::temp_dir().join("thunder-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("abort.ckpt");
        let (mc, mut tc, dc) = tiny_cfgs();
        tc.ckpt_every = 1;
        let mut trainer = Trainer::<f32>::new(mc, tc, dc).unwrap();
        let mut log = Vec::new();
        // Two good steps establish a checkpoint on disk.
        trainer.train_cfg.iters = 2;
        trainer.run(&mut log, Some(&path), |_, _| {}).unwrap();
        let good = fs::read(&path).unwrap();
        // Poison one weight and continue; the run must fail without
        // overwriting the good checkpoint.
        trainer.train_cfg.iters = 8;
        trainer.model.params()[0]
            .tensor
            .update_data(|d| d[0] = f32::NAN);
        let err = trainer.run(&mut log, Some(&path), |_, _| {});
        assert!(err.is_err());
        assert_eq!(fs::read(&path).unwrap(), good);
    }

    #[test]
    fn short_training_run_reduces_the_loss() {
        let (mc, mut tc, mut dc) = tiny_cfgs();
        tc.iters = 30;
        tc.lr0 = 2e-3;
        tc.batch = 2;
        dc.train_images = 2;
        let mut trainer = Trainer::<f32>::new(mc, tc, dc).unwrap();
        let mut totals = Vec::new();
        for _ in 0..tc.iters {
            totals.push(trainer.step().unwrap().total);
        }
        let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = totals[totals.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(
            tail < head,
            "loss did not decrease: head {head} tail {tail}"
        );
    }

    #[test]
    fn checkpoint_parser_rejects_corruption() {
        let dir = std::env::temp_dir().join("thunder-ckpt-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("corrupt.ckpt");
        fs::write(&path, b"NOPE").unwrap();
        assert!(read_checkpoint(&path).is_err());
        fs::write(
            &path,
            [b"THDR".as_slice(), &[9, 0, 0, 0], &[1, 0, 0, 0]].concat(),
        )
        .unwrap();
        assert!(read_checkpoint(&path).is_err());
    }
}
