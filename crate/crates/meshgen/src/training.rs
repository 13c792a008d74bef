//! Boundary-equilibrium adversarial training and the plain autoencoder
//! baseline.
//!
//! Both trainers consume normalized displacement signals built by
//! [`TrainSet`], optimize with classical momentum under an exponentially
//! decaying learning rate, log one metrics row per optimizer step, and
//! write a self-contained checkpoint after every epoch. The adversarial
//! loop updates the discriminator and generator sequentially on the same
//! batch (discriminator first) and balances them through the scalar `k`
//! of the boundary-equilibrium objective.

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Gradients, Tape, Var};
use crate::hierarchy::{bytes_checksum, ByteReader, ByteWriter, Hierarchy};
use crate::mesh::Mesh;
use crate::models::{
    decoder_forward, discriminator_forward, init_autoencoder, init_generator, load_autoencoder,
    load_generator, AutoencoderParams, ChebLayer, DecoderParams, EncoderParams, Fc, HierarchyOps,
    LoadMode, ModelConfig, ModelError,
};

/// Magic bytes of the checkpoint container.
const CHECKPOINT_MAGIC: &[u8; 4] = b"MGCK";
/// Checkpoint format version.
const CHECKPOINT_VERSION: u32 = 1;
/// Scale floor when a training set has no displacement at all.
const MIN_SIGMA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid training config: {reason}")]
    BadConfig { reason: String },
    #[error("training sample {index}: {reason}")]
    BadSample { index: usize, reason: String },
    #[error(
        "non-finite loss at step {step} (epoch {epoch}); aborted, last good checkpoint: {last_good}"
    )]
    NumericalAbort {
        step: u64,
        epoch: usize,
        last_good: String,
    },
    #[error("{path}: not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: corrupt checkpoint: {reason}")]
    Corrupt { path: String, reason: String },
    #[error(
        "checkpoint was trained against hierarchy {expected}, refusing to run against {actual}"
    )]
    HierarchyMismatch { expected: String, actual: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Training samples as normalized displacement signals: vertex positions
/// minus the template, divided by the global displacement scale `sigma`
/// (root mean square over every coordinate of every sample).
pub struct TrainSet {
    signals: Vec<Array2<f64>>,
    sigma: f64,
}

impl TrainSet {
    /// Builds the signal set from registered meshes. Every mesh must share
    /// the template's topology.
    pub fn from_meshes(template: &Mesh, meshes: &[Mesh]) -> Result<TrainSet, TrainError> {
        if meshes.is_empty() {
            return Err(TrainError::BadConfig {
                reason: "training set is empty".into(),
            });
        }
        let mut displacements = Vec::with_capacity(meshes.len());
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for (index, mesh) in meshes.iter().enumerate() {
            if !mesh.shares_topology(template) && mesh.faces() != template.faces() {
                return Err(TrainError::BadSample {
                    index,
                    reason: "mesh topology differs from the template".into(),
                });
            }
            let d = mesh.vertices() - template.vertices();
            for v in d.iter() {
                if !v.is_finite() {
                    return Err(TrainError::BadSample {
                        index,
                        reason: "non-finite vertex coordinate".into(),
                    });
                }
                sum_sq += v * v;
            }
            count += d.len();
            displacements.push(d);
        }
        let sigma = (sum_sq / count as f64).sqrt().max(MIN_SIGMA);
        let signals = displacements.into_iter().map(|d| &d / sigma).collect();
        Ok(TrainSet { signals, sigma })
    }

    /// Wraps pre-normalized signals with a known scale.
    pub fn from_signals(signals: Vec<Array2<f64>>, sigma: f64) -> TrainSet {
        TrainSet { signals, sigma }
    }

    pub fn len(&self) -> usize {
        self.signals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.signals.is_empty()
    }

    pub fn signal(&self, i: usize) -> &Array2<f64> {
        &self.signals[i]
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// World-space vertices to a normalized displacement signal.
pub fn to_signal(template: &Mesh, vertices: &Array2<f64>, sigma: f64) -> Array2<f64> {
    (vertices - template.vertices()) / sigma
}

/// Normalized displacement signal back to world-space vertices.
pub fn to_vertices(template: &Mesh, signal: &Array2<f64>, sigma: f64) -> Array2<f64> {
    template.vertices() + &(signal * sigma)
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Diversity ratio of the equilibrium objective.
    pub gamma: f64,
    /// Proportional gain of the `k` control loop.
    pub lambda_k: f64,
    /// Initial learning rate.
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay.
    pub lr_decay: f64,
    /// Classical momentum coefficient.
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Master seed; parameter init, batch shuffling, and latent draws all
    /// derive from this one stream.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            gamma: 0.7,
            lambda_k: 0.001,
            lr: 0.008,
            lr_decay: 0.99,
            momentum: 0.9,
            epochs: 300,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let mut reasons = Vec::new();
        if !(0.0..=1.0).contains(&self.gamma) {
            reasons.push(format!("gamma must be in [0, 1], got {}", self.gamma));
        }
        if !self.lambda_k.is_finite() || self.lambda_k < 0.0 {
            reasons.push(format!("lambda_k must be non-negative, got {}", self.lambda_k));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            reasons.push(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..=1.0).contains(&self.lr_decay) || self.lr_decay == 0.0 {
            reasons.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            reasons.push(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.epochs == 0 {
            reasons.push("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            reasons.push("batch_size must be at least 1".into());
        }
        if reasons.is_empty() {
            Ok(())
        } else {
            Err(TrainError::BadConfig {
                reason: reasons.join("; "),
            })
        }
    }

    /// Learning rate in effect during `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// `k_{t+1} = clamp(k_t + lambda_k (gamma L(x) - L(G(z_G))), 0, 1)`.
pub fn update_k(k: f64, gamma: f64, lambda_k: f64, loss_real: f64, loss_gen: f64) -> f64 {
    (k + lambda_k * (gamma * loss_real - loss_gen)).clamp(0.0, 1.0)
}

/// `M = L(x) + |gamma L(x) - L(G(z_G))|`, the equilibrium convergence
/// measure logged alongside the raw losses.
pub fn convergence_measure(gamma: f64, loss_real: f64, loss_gen: f64) -> f64 {
    loss_real + (gamma * loss_real - loss_gen).abs()
}

/// Uniform access to a model's tensors in canonical order, so the
/// optimizer, checksums, and checkpoints treat generator and
/// discriminator parameters identically.
pub trait ParamSet {
    fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>));
}

impl ParamSet for AutoencoderParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.for_each_tensor(&mut |name, t| f(name, t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.for_each_tensor_mut(f);
    }
}

impl ParamSet for DecoderParams {
    fn visit(&self, f: &mut dyn FnMut(String, &Array2<f64>)) {
        self.for_each_tensor(&mut |name, t| f(name, t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.for_each_tensor_mut(f);
    }
}

/// Hex SHA-256 over tensor names, shapes, and raw values in canonical
/// order. Bit-identical parameters give identical digests.
pub fn param_checksum(p: &dyn ParamSet) -> String {
    let mut w = ByteWriter::new();
    p.visit(&mut |name, t| {
        w.string(&name);
        w.u64(t.nrows() as u64);
        w.u64(t.ncols() as u64);
        for v in t.iter() {
            w.f64(*v);
        }
    });
    bytes_checksum(&w.buf)
}

/// Classical momentum: `v <- m v + g`, `p <- p - lr v`, one velocity slot
/// per tensor in canonical order.
pub struct Momentum {
    velocity: Vec<Array2<f64>>,
    momentum: f64,
}

impl Momentum {
    pub fn new(params: &dyn ParamSet, momentum: f64) -> Momentum {
        let mut velocity = Vec::new();
        params.visit(&mut |_, t| velocity.push(Array2::zeros(t.dim())));
        Momentum { velocity, momentum }
    }

    /// One update over every tensor. `grads` must follow the canonical
    /// tensor order of `params`.
    pub fn step(&mut self, params: &mut dyn ParamSet, grads: &[Array2<f64>], lr: f64) {
        assert_eq!(grads.len(), self.velocity.len(), "one gradient per tensor");
        let momentum = self.momentum;
        let velocity = &mut self.velocity;
        let mut idx = 0;
        params.visit_mut(&mut |_, t| {
            let v = &mut velocity[idx];
            v.mapv_inplace(|x| x * momentum);
            *v += &grads[idx];
            t.scaled_add(-lr, v);
            idx += 1;
        });
        assert_eq!(idx, velocity.len(), "parameter walk covered every slot");
    }
}

/// One metrics row per optimizer step; the autoencoder trainer zero-fills
/// the adversarial columns.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub epoch: usize,
    pub loss_real: f64,
    pub loss_fake_d: f64,
    pub loss_g: f64,
    pub k: f64,
    pub lr: f64,
    pub m: f64,
}

impl MetricsRow {
    pub const CSV_HEADER: &'static str = "step,epoch,loss_real,loss_fake_D,loss_G,k,lr,M";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.step,
            self.epoch,
            self.loss_real,
            self.loss_fake_d,
            self.loss_g,
            self.k,
            self.lr,
            self.m
        )
    }
}

/// The trained parameters held by a checkpoint.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Began {
        generator: DecoderParams,
        discriminator: AutoencoderParams,
    },
    Autoencoder { model: AutoencoderParams },
}

/// Self-contained training snapshot: the config echo, the master seed, the
/// displacement scale, every parameter tensor by name, and the checksum of
/// the hierarchy the model was trained against.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub seed: u64,
    pub sigma: f64,
    /// Completed epochs at the time of the snapshot.
    pub epoch: usize,
    /// Final equilibrium gain (zero for the autoencoder).
    pub k: f64,
    pub hierarchy_checksum: String,
    pub model: TrainedModel,
}

fn write_params(w: &mut ByteWriter, p: &dyn ParamSet) {
    let mut count: u32 = 0;
    p.visit(&mut |_, _| count += 1);
    w.u32(count);
    p.visit(&mut |name, t| {
        w.string(&name);
        w.u64(t.nrows() as u64);
        w.u64(t.ncols() as u64);
        for v in t.iter() {
            w.f64(*v);
        }
    });
}

fn read_named_tensors(r: &mut ByteReader) -> Option<Vec<(String, Array2<f64>)>> {
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name = r.string()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let len = rows.checked_mul(cols)?;
        if len > r.remaining() / 8 {
            return None;
        }
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f64()?);
        }
        out.push((name, Array2::from_shape_vec((rows, cols), data).ok()?));
    }
    Some(out)
}

/// Consumes a flat named-tensor list in canonical order, validating every
/// name against the structure implied by the model config.
struct TensorStream {
    tensors: std::vec::IntoIter<(String, Array2<f64>)>,
}

impl TensorStream {
    fn take(&mut self, expected: &str) -> Result<Array2<f64>, String> {
        match self.tensors.next() {
            Some((name, t)) if name == expected => Ok(t),
            Some((name, _)) => Err(format!("expected tensor {expected}, found {name}")),
            None => Err(format!("missing tensor {expected}")),
        }
    }

    fn finish(mut self) -> Result<(), String> {
        match self.tensors.next() {
            Some((name, _)) => Err(format!("unexpected extra tensor {name}")),
            None => Ok(()),
        }
    }
}

fn cheb_from_stream(s: &mut TensorStream, prefix: &str, k: usize) -> Result<ChebLayer, String> {
    let mut theta = Vec::with_capacity(k);
    for j in 0..k {
        theta.push(s.take(&format!("{prefix}.theta{j}"))?);
    }
    let bias = s.take(&format!("{prefix}.bias"))?;
    Ok(ChebLayer { theta, bias })
}

fn fc_from_stream(s: &mut TensorStream, prefix: &str) -> Result<Fc, String> {
    Ok(Fc {
        weight: s.take(&format!("{prefix}.weight"))?,
        bias: s.take(&format!("{prefix}.bias"))?,
    })
}

fn decoder_from_stream(s: &mut TensorStream, config: &ModelConfig) -> Result<DecoderParams, String> {
    let levels = config.channels.len();
    let fc = fc_from_stream(s, "decoder.fc")?;
    let mut convs = Vec::with_capacity(levels);
    for i in 0..levels {
        convs.push(cheb_from_stream(s, &format!("decoder.conv{i}"), config.k)?);
    }
    let out = cheb_from_stream(s, "decoder.out", config.k)?;
    let skips = if config.skip_connections {
        let mut v = Vec::with_capacity(levels);
        for i in 0..levels {
            v.push(fc_from_stream(s, &format!("decoder.skip{i}"))?);
        }
        Some(v)
    } else {
        None
    };
    Ok(DecoderParams { fc, convs, out, skips })
}

fn encoder_from_stream(s: &mut TensorStream, config: &ModelConfig) -> Result<EncoderParams, String> {
    let levels = config.channels.len();
    let mut convs = Vec::with_capacity(levels);
    for i in 0..levels {
        convs.push(cheb_from_stream(s, &format!("encoder.conv{i}"), config.k)?);
    }
    let fc = fc_from_stream(s, "encoder.fc")?;
    Ok(EncoderParams { convs, fc })
}

fn autoencoder_from_tensors(
    tensors: Vec<(String, Array2<f64>)>,
    config: &ModelConfig,
) -> Result<AutoencoderParams, String> {
    let mut s = TensorStream { tensors: tensors.into_iter() };
    let encoder = encoder_from_stream(&mut s, config)?;
    let decoder = decoder_from_stream(&mut s, config)?;
    s.finish()?;
    Ok(AutoencoderParams { encoder, decoder })
}

fn decoder_from_tensors(
    tensors: Vec<(String, Array2<f64>)>,
    config: &ModelConfig,
) -> Result<DecoderParams, String> {
    let mut s = TensorStream { tensors: tensors.into_iter() };
    let decoder = decoder_from_stream(&mut s, config)?;
    s.finish()?;
    Ok(decoder)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.buf.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let mode: u8 = match &self.model {
            TrainedModel::Began { .. } => 0,
            TrainedModel::Autoencoder { .. } => 1,
        };
        w.buf.push(mode);
        w.u64(self.seed);
        w.f64(self.sigma);
        w.u64(self.epoch as u64);
        w.f64(self.k);
        w.string(&self.hierarchy_checksum);
        let config_json =
            serde_json::to_string(&self.config).expect("training config serializes to JSON");
        w.string(&config_json);
        match &self.model {
            TrainedModel::Began { generator, discriminator } => {
                write_params(&mut w, generator);
                write_params(&mut w, discriminator);
            }
            TrainedModel::Autoencoder { model } => write_params(&mut w, model),
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Checkpoint, TrainError> {
        let corrupt = |reason: &str| TrainError::Corrupt {
            path: origin.to_string(),
            reason: reason.to_string(),
        };
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4).ok_or_else(|| corrupt("truncated header"))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(TrainError::BadMagic { path: origin.to_string() });
        }
        let version = r.u32().ok_or_else(|| corrupt("truncated header"))?;
        if version != CHECKPOINT_VERSION {
            return Err(TrainError::BadVersion {
                path: origin.to_string(),
                version,
            });
        }
        let mode = *r
            .take(1)
            .and_then(|b| b.first())
            .ok_or_else(|| corrupt("truncated header"))?;
        let seed = r.u64().ok_or_else(|| corrupt("truncated header"))?;
        let sigma = r.f64().ok_or_else(|| corrupt("truncated header"))?;
        let epoch = r.u64().ok_or_else(|| corrupt("truncated header"))? as usize;
        let k = r.f64().ok_or_else(|| corrupt("truncated header"))?;
        let hierarchy_checksum = r
            .string()
            .ok_or_else(|| corrupt("truncated hierarchy checksum"))?;
        let config_json = r.string().ok_or_else(|| corrupt("truncated config echo"))?;
        let config: TrainConfig = serde_json::from_str(&config_json)
            .map_err(|e| corrupt(&format!("bad config echo: {e}")))?;
        let model = match mode {
            0 => {
                let gen = read_named_tensors(&mut r)
                    .ok_or_else(|| corrupt("truncated generator tensors"))?;
                let disc = read_named_tensors(&mut r)
                    .ok_or_else(|| corrupt("truncated discriminator tensors"))?;
                let generator = decoder_from_tensors(gen, &config.model)
                    .map_err(|e| corrupt(&format!("generator: {e}")))?;
                let discriminator = autoencoder_from_tensors(disc, &config.model)
                    .map_err(|e| corrupt(&format!("discriminator: {e}")))?;
                TrainedModel::Began { generator, discriminator }
            }
            1 => {
                let tensors =
                    read_named_tensors(&mut r).ok_or_else(|| corrupt("truncated tensors"))?;
                let model = autoencoder_from_tensors(tensors, &config.model)
                    .map_err(|e| corrupt(&format!("model: {e}")))?;
                TrainedModel::Autoencoder { model }
            }
            other => return Err(corrupt(&format!("unknown model kind {other}"))),
        };
        if r.remaining() != 0 {
            return Err(corrupt("trailing bytes after tensors"));
        }
        Ok(Checkpoint {
            config,
            seed,
            sigma,
            epoch,
            k,
            hierarchy_checksum,
            model,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint, TrainError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Checkpoint::from_bytes(&bytes, &path.display().to_string())
    }

    /// Refuses a checkpoint whose training hierarchy differs from the one
    /// about to be used.
    pub fn verify_hierarchy(&self, checksum: &str) -> Result<(), TrainError> {
        if self.hierarchy_checksum == checksum {
            Ok(())
        } else {
            Err(TrainError::HierarchyMismatch {
                expected: self.hierarchy_checksum.clone(),
                actual: checksum.to_string(),
            })
        }
    }
}

/// Everything a finished (or aborted-after-N-epochs) run hands back to the
/// caller: the per-step metrics log, the final snapshot, and where the
/// snapshots were written.
pub struct TrainReport {
    pub rows: Vec<MetricsRow>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: PathBuf,
    pub metrics_path: PathBuf,
}

fn zero_grads(p: &dyn ParamSet) -> Vec<Array2<f64>> {
    let mut v = Vec::new();
    p.visit(&mut |_, t| v.push(Array2::zeros(t.dim())));
    v
}

fn accumulate(acc: &mut [Array2<f64>], grads: &mut Gradients, vars: &[Var]) {
    for (slot, var) in acc.iter_mut().zip(vars) {
        if let Some(g) = grads.take(*var) {
            *slot += &g;
        }
    }
}

fn scale_grads(acc: &mut [Array2<f64>], factor: f64) {
    for slot in acc.iter_mut() {
        slot.mapv_inplace(|x| x * factor);
    }
}

/// One latent row drawn uniformly from `[-1, 1]^h`.
fn draw_latent(rng: &mut ChaCha8Rng, h: usize) -> Array2<f64> {
    Array2::from_shape_fn((1, h), |_| rng.random::<f64>() * 2.0 - 1.0)
}

/// Discriminator step over one batch: descend
/// `L_D = L(x) - k L(G(z_D))` with the generator frozen. Returns
/// batch-mean gradients in canonical discriminator order and the mean
/// real and fake reconstruction losses.
fn d_step(
    ops: &HierarchyOps,
    d_params: &AutoencoderParams,
    g_params: &DecoderParams,
    train: &TrainSet,
    batch: &[usize],
    z_d: &[Array2<f64>],
    k: f64,
) -> Result<(Vec<Array2<f64>>, f64, f64), TrainError> {
    let mut acc = zero_grads(d_params);
    let mut loss_real_sum = 0.0;
    let mut loss_fake_sum = 0.0;
    for (&i, z) in batch.iter().zip(z_d) {
        let mut tape = Tape::new();
        let (d_vars, d_list) = load_autoencoder(&mut tape, d_params, LoadMode::Trainable);
        let (g_vars, _) = load_generator(&mut tape, g_params, LoadMode::Constant);
        let x = tape.constant(train.signal(i).clone());
        let dx = discriminator_forward(&mut tape, ops, &d_vars, x);
        let loss_real = tape.l1_loss(x, dx);
        let z = tape.constant(z.clone());
        let gz = decoder_forward(&mut tape, ops, &g_vars, z);
        let dgz = discriminator_forward(&mut tape, ops, &d_vars, gz);
        let loss_fake = tape.l1_loss(gz, dgz);
        let scaled_fake = tape.scale(loss_fake, k);
        let loss = tape.sub(loss_real, scaled_fake);
        let mut grads = tape.backward(loss)?;
        accumulate(&mut acc, &mut grads, &d_list);
        loss_real_sum += tape.scalar(loss_real);
        loss_fake_sum += tape.scalar(loss_fake);
    }
    let inv = 1.0 / batch.len() as f64;
    scale_grads(&mut acc, inv);
    Ok((acc, loss_real_sum * inv, loss_fake_sum * inv))
}

/// Generator step over one batch: descend `L_G = L(G(z_G))` with the
/// discriminator frozen (gradients still flow through it into the
/// generator). Returns batch-mean gradients in canonical generator order
/// and the mean generated-sample loss.
fn g_step(
    ops: &HierarchyOps,
    d_params: &AutoencoderParams,
    g_params: &DecoderParams,
    z_g: &[Array2<f64>],
) -> Result<(Vec<Array2<f64>>, f64), TrainError> {
    let mut acc = zero_grads(g_params);
    let mut loss_sum = 0.0;
    for z in z_g {
        let mut tape = Tape::new();
        let (d_vars, _) = load_autoencoder(&mut tape, d_params, LoadMode::Constant);
        let (g_vars, g_list) = load_generator(&mut tape, g_params, LoadMode::Trainable);
        let z = tape.constant(z.clone());
        let gz = decoder_forward(&mut tape, ops, &g_vars, z);
        let dgz = discriminator_forward(&mut tape, ops, &d_vars, gz);
        let loss = tape.l1_loss(gz, dgz);
        let mut grads = tape.backward(loss)?;
        accumulate(&mut acc, &mut grads, &g_list);
        loss_sum += tape.scalar(loss);
    }
    let inv = 1.0 / z_g.len() as f64;
    scale_grads(&mut acc, inv);
    Ok((acc, loss_sum * inv))
}

/// Autoencoder step over one batch: descend the plain reconstruction loss
/// `L1(x, AE(x))`.
fn ae_step(
    ops: &HierarchyOps,
    params: &AutoencoderParams,
    train: &TrainSet,
    batch: &[usize],
) -> Result<(Vec<Array2<f64>>, f64), TrainError> {
    let mut acc = zero_grads(params);
    let mut loss_sum = 0.0;
    for &i in batch {
        let mut tape = Tape::new();
        let (vars, list) = load_autoencoder(&mut tape, params, LoadMode::Trainable);
        let x = tape.constant(train.signal(i).clone());
        let recon = discriminator_forward(&mut tape, ops, &vars, x);
        let loss = tape.l1_loss(x, recon);
        let mut grads = tape.backward(loss)?;
        accumulate(&mut acc, &mut grads, &list);
        loss_sum += tape.scalar(loss);
    }
    let inv = 1.0 / batch.len() as f64;
    scale_grads(&mut acc, inv);
    Ok((acc, loss_sum * inv))
}

struct MetricsLog {
    writer: std::io::BufWriter<std::fs::File>,
    path: PathBuf,
    rows: Vec<MetricsRow>,
}

impl MetricsLog {
    fn create(dir: &Path) -> Result<MetricsLog, TrainError> {
        let path = dir.join("metrics.csv");
        let file = std::fs::File::create(&path).map_err(io_err(&path))?;
        let mut writer = std::io::BufWriter::new(file);
        writeln!(writer, "{}", MetricsRow::CSV_HEADER).map_err(io_err(&path))?;
        Ok(MetricsLog { writer, path, rows: Vec::new() })
    }

    fn push(&mut self, row: MetricsRow) -> Result<(), TrainError> {
        writeln!(self.writer, "{}", row.csv_line()).map_err(io_err(&self.path))?;
        self.rows.push(row);
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TrainError> {
        self.writer.flush().map_err(io_err(&self.path))
    }
}

fn epoch_checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint_epoch_{epoch:04}.bin"))
}

fn check_finite(
    losses: &[f64],
    step: u64,
    epoch: usize,
    last_good: &Option<PathBuf>,
) -> Result<(), TrainError> {
    if losses.iter().all(|l| l.is_finite()) {
        Ok(())
    } else {
        Err(TrainError::NumericalAbort {
            step,
            epoch,
            last_good: last_good
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "none".into()),
        })
    }
}

/// Trains the adversarial pair on `train`, writing `metrics.csv` and
/// per-epoch checkpoints into `out_dir`. Batches are shuffled per epoch;
/// for each batch the latents `z_D` are drawn first, then `z_G`, the
/// discriminator updates first on the same batch, and `k` moves once per
/// step from the batch-mean losses. A non-finite loss aborts the run and
/// leaves the last per-epoch checkpoint in place.
pub fn train_began(
    hierarchy: &Hierarchy,
    train: &TrainSet,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig { reason: "training set is empty".into() });
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let sizes = hierarchy.sizes();
    let hierarchy_checksum = bytes_checksum(&hierarchy.to_bytes());
    let ops = HierarchyOps::new(hierarchy);
    let h = config.model.bottleneck;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d_seed = rng.random::<u64>();
    let g_seed = rng.random::<u64>();
    let mut d_params = init_autoencoder(&config.model, &sizes, d_seed)?;
    let mut g_params = init_generator(&config.model, &sizes, g_seed)?;
    let mut d_momentum = Momentum::new(&d_params, config.momentum);
    let mut g_momentum = Momentum::new(&g_params, config.momentum);

    let mut log = MetricsLog::create(out_dir)?;
    let mut k = 0.0;
    let mut step: u64 = 0;
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut rng);
        for batch in indices.chunks(config.batch_size) {
            let z_d: Vec<Array2<f64>> =
                (0..batch.len()).map(|_| draw_latent(&mut rng, h)).collect();
            let z_g: Vec<Array2<f64>> =
                (0..batch.len()).map(|_| draw_latent(&mut rng, h)).collect();

            let (d_grads, loss_real, loss_fake_d) =
                d_step(&ops, &d_params, &g_params, train, batch, &z_d, k)?;
            check_finite(&[loss_real, loss_fake_d], step, epoch, &last_good)?;
            d_momentum.step(&mut d_params, &d_grads, lr);

            let (g_grads, loss_g) = g_step(&ops, &d_params, &g_params, &z_g)?;
            check_finite(&[loss_g], step, epoch, &last_good)?;
            g_momentum.step(&mut g_params, &g_grads, lr);

            k = update_k(k, config.gamma, config.lambda_k, loss_real, loss_g);
            let m = convergence_measure(config.gamma, loss_real, loss_g);
            log.push(MetricsRow {
                step,
                epoch,
                loss_real,
                loss_fake_d,
                loss_g,
                k,
                lr,
                m,
            })?;
            step += 1;
        }
        log.flush()?;
        let checkpoint = Checkpoint {
            config: config.clone(),
            seed: config.seed,
            sigma: train.sigma(),
            epoch: epoch + 1,
            k,
            hierarchy_checksum: hierarchy_checksum.clone(),
            model: TrainedModel::Began {
                generator: g_params.clone(),
                discriminator: d_params.clone(),
            },
        };
        let path = epoch_checkpoint_path(out_dir, epoch + 1);
        checkpoint.save(&path)?;
        last_good = Some(path);
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        seed: config.seed,
        sigma: train.sigma(),
        epoch: config.epochs,
        k,
        hierarchy_checksum,
        model: TrainedModel::Began {
            generator: g_params,
            discriminator: d_params,
        },
    };
    let checkpoint_path = out_dir.join("checkpoint_final.bin");
    checkpoint.save(&checkpoint_path)?;
    let metrics_path = log.path.clone();
    Ok(TrainReport {
        rows: log.rows,
        checkpoint,
        checkpoint_path,
        metrics_path,
    })
}

/// Trains the plain autoencoder baseline with the same optimizer, logging
/// schema (adversarial columns zero-filled), and checkpoint cadence as
/// the adversarial trainer.
pub fn train_autoencoder(
    hierarchy: &Hierarchy,
    train: &TrainSet,
    config: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainReport, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::BadConfig { reason: "training set is empty".into() });
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let sizes = hierarchy.sizes();
    let hierarchy_checksum = bytes_checksum(&hierarchy.to_bytes());
    let ops = HierarchyOps::new(hierarchy);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init_seed = rng.random::<u64>();
    let mut params = init_autoencoder(&config.model, &sizes, init_seed)?;
    let mut momentum = Momentum::new(&params, config.momentum);

    let mut log = MetricsLog::create(out_dir)?;
    let mut step: u64 = 0;
    let mut last_good: Option<PathBuf> = None;

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        let mut indices: Vec<usize> = (0..train.len()).collect();
        indices.shuffle(&mut rng);
        for batch in indices.chunks(config.batch_size) {
            let (grads, loss) = ae_step(&ops, &params, train, batch)?;
            check_finite(&[loss], step, epoch, &last_good)?;
            momentum.step(&mut params, &grads, lr);
            log.push(MetricsRow {
                step,
                epoch,
                loss_real: loss,
                loss_fake_d: 0.0,
                loss_g: 0.0,
                k: 0.0,
                lr,
                m: 0.0,
            })?;
            step += 1;
        }
        log.flush()?;
        let checkpoint = Checkpoint {
            config: config.clone(),
            seed: config.seed,
            sigma: train.sigma(),
            epoch: epoch + 1,
            k: 0.0,
            hierarchy_checksum: hierarchy_checksum.clone(),
            model: TrainedModel::Autoencoder { model: params.clone() },
        };
        let path = epoch_checkpoint_path(out_dir, epoch + 1);
        checkpoint.save(&path)?;
        last_good = Some(path);
    }

    let checkpoint = Checkpoint {
        config: config.clone(),
        seed: config.seed,
        sigma: train.sigma(),
        epoch: config.epochs,
        k: 0.0,
        hierarchy_checksum,
        model: TrainedModel::Autoencoder { model: params },
    };
    let checkpoint_path = out_dir.join("checkpoint_final.bin");
    checkpoint.save(&checkpoint_path)?;
    let metrics_path = log.path.clone();
    Ok(TrainReport {
        rows: log.rows,
        checkpoint,
        checkpoint_path,
        metrics_path,
    })
}
