//! Chebyshev spectral convolution and the mesh autoencoder assemblies.
//!
//! A convolution layer evaluates `Y = sum_j T_j(Delta~) X Theta_j + bias`
//! with the Chebyshev recurrence `T_j = 2 Delta~ T_{j-1} - T_{j-2}`,
//! `T_0 = X`, `T_1 = Delta~ X`, so only sparse products are needed and the
//! operator is never eigendecomposed. The encoder alternates convolution,
//! ELU, and hierarchy down-sampling, then flattens into a fully connected
//! bottleneck; the decoder mirrors it with up-sampling, closing with an
//! unactivated convolution to 3 coordinate channels. The discriminator is
//! an independent encoder-decoder pair; the generator reuses the decoder
//! architecture alone.
//!
//! Networks operate on normalized vertex displacements from the template,
//! so a zero signal means "the template exactly" and a zero latent with
//! zero biases decodes to it.

use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{SparseOp, Tape, Var};
use crate::hierarchy::Hierarchy;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model config inconsistent with hierarchy: {reason}")]
    ConfigMismatch { reason: String },
}

/// Architecture hyperparameters shared by generator and discriminator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of Chebyshev coefficients per layer (polynomial order + 1).
    pub k: usize,
    /// Encoder output widths per level transition, finest first.
    pub channels: Vec<usize>,
    /// Latent (bottleneck) dimension h.
    pub bottleneck: usize,
    /// Adds per-level `FC(z)` terms after each decoder up-sampling.
    pub skip_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { k: 6, channels: vec![16, 16, 16, 32], bottleneck: 64, skip_connections: false }
    }
}

impl ModelConfig {
    pub fn validate(&self, sizes: &[usize]) -> Result<(), ModelError> {
        let err = |reason: String| Err(ModelError::ConfigMismatch { reason });
        if self.k == 0 {
            return err("chebyshev order k must be at least 1".into());
        }
        if self.bottleneck == 0 {
            return err("bottleneck must be at least 1".into());
        }
        if sizes.len() < 2 {
            return err("hierarchy needs at least one down-sampling level".into());
        }
        if self.channels.len() != sizes.len() - 1 {
            return err(format!(
                "{} channel widths for {} hierarchy transitions",
                self.channels.len(),
                sizes.len() - 1
            ));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return err("channel widths must be positive".into());
        }
        Ok(())
    }

    /// (input, output) widths of the decoder's hidden convolutions.
    fn decoder_widths(&self) -> Vec<(usize, usize)> {
        let l = self.channels.len();
        let mut widths = Vec::with_capacity(l);
        let mut input = self.channels[l - 1];
        for i in 0..l {
            let out = if i + 1 < l { self.channels[l - 2 - i] } else { self.channels[0] };
            widths.push((input, out));
            input = out;
        }
        widths
    }
}

/// One spectral convolution layer: K coefficient matrices and a bias row.
#[derive(Debug, Clone)]
pub struct ChebLayer {
    /// One F_in x F_out matrix per Chebyshev term.
    pub theta: Vec<Array2<f64>>,
    /// 1 x F_out.
    pub bias: Array2<f64>,
}

/// A fully connected layer.
#[derive(Debug, Clone)]
pub struct Fc {
    /// in x out.
    pub weight: Array2<f64>,
    /// 1 x out.
    pub bias: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub convs: Vec<ChebLayer>,
    pub fc: Fc,
}

#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub fc: Fc,
    pub convs: Vec<ChebLayer>,
    pub out: ChebLayer,
    pub skips: Option<Vec<Fc>>,
}

/// Discriminator (or plain autoencoder): independent encoder and decoder.
#[derive(Debug, Clone)]
pub struct AutoencoderParams {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

impl ChebLayer {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        for (j, t) in self.theta.iter().enumerate() {
            f(format!("{prefix}.theta{j}"), t);
        }
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (j, t) in self.theta.iter_mut().enumerate() {
            f(format!("{prefix}.theta{j}"), t);
        }
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl Fc {
    fn for_each<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        f(format!("{prefix}.weight"), &self.weight);
        f(format!("{prefix}.bias"), &self.bias);
    }

    fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        f(format!("{prefix}.weight"), &mut self.weight);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl EncoderParams {
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.for_each(&format!("encoder.conv{i}"), f);
        }
        self.fc.for_each("encoder.fc", f);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.for_each_mut(&format!("encoder.conv{i}"), f);
        }
        self.fc.for_each_mut("encoder.fc", f);
    }
}

impl DecoderParams {
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.fc.for_each("decoder.fc", f);
        for (i, c) in self.convs.iter().enumerate() {
            c.for_each(&format!("decoder.conv{i}"), f);
        }
        self.out.for_each("decoder.out", f);
        if let Some(skips) = &self.skips {
            for (i, s) in skips.iter().enumerate() {
                s.for_each(&format!("decoder.skip{i}"), f);
            }
        }
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.fc.for_each_mut("decoder.fc", f);
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.for_each_mut(&format!("decoder.conv{i}"), f);
        }
        self.out.for_each_mut("decoder.out", f);
        if let Some(skips) = &mut self.skips {
            for (i, s) in skips.iter_mut().enumerate() {
                s.for_each_mut(&format!("decoder.skip{i}"), f);
            }
        }
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _| n += 1);
        n
    }
}

impl AutoencoderParams {
    pub fn for_each_tensor<'a>(&'a self, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        self.encoder.for_each_tensor(f);
        self.decoder.for_each_tensor(f);
    }

    pub fn for_each_tensor_mut(&mut self, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        self.encoder.for_each_tensor_mut(f);
        self.decoder.for_each_tensor_mut(f);
    }

    pub fn num_tensors(&self) -> usize {
        let mut n = 0;
        self.for_each_tensor(&mut |_, _| n += 1);
        n
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
}

fn init_cheb(rng: &mut ChaCha8Rng, k: usize, f_in: usize, f_out: usize) -> ChebLayer {
    // the K coefficient matrices act on the same input and their outputs
    // sum, so the effective fan-in of the layer is K * F_in
    let theta = (0..k).map(|_| glorot(rng, f_in, f_out, k * f_in, f_out)).collect();
    ChebLayer { theta, bias: Array2::zeros((1, f_out)) }
}

fn init_fc(rng: &mut ChaCha8Rng, dim_in: usize, dim_out: usize) -> Fc {
    Fc {
        weight: glorot(rng, dim_in, dim_out, dim_in, dim_out),
        bias: Array2::zeros((1, dim_out)),
    }
}

fn init_encoder(rng: &mut ChaCha8Rng, config: &ModelConfig, sizes: &[usize]) -> EncoderParams {
    let l = config.channels.len();
    let mut convs = Vec::with_capacity(l);
    let mut f_in = 3;
    for &f_out in &config.channels {
        convs.push(init_cheb(rng, config.k, f_in, f_out));
        f_in = f_out;
    }
    let n_last = sizes[l];
    let fc = init_fc(rng, n_last * config.channels[l - 1], config.bottleneck);
    EncoderParams { convs, fc }
}

fn init_decoder(rng: &mut ChaCha8Rng, config: &ModelConfig, sizes: &[usize]) -> DecoderParams {
    let l = config.channels.len();
    let n_last = sizes[l];
    let fc = init_fc(rng, config.bottleneck, n_last * config.channels[l - 1]);
    let widths = config.decoder_widths();
    let convs = widths
        .iter()
        .map(|&(f_in, f_out)| init_cheb(rng, config.k, f_in, f_out))
        .collect();
    let out = init_cheb(rng, config.k, widths[l - 1].1, 3);
    let skips = config.skip_connections.then(|| {
        widths
            .iter()
            .enumerate()
            .map(|(i, &(f_in, _))| {
                let level = l - 1 - i;
                init_fc(rng, config.bottleneck, sizes[level] * f_in)
            })
            .collect()
    });
    DecoderParams { fc, convs, out, skips }
}

/// Glorot-uniform weights, zero biases, drawn in the canonical tensor
/// order from a ChaCha stream, so a seed pins every parameter bit.
pub fn init_autoencoder(
    config: &ModelConfig,
    sizes: &[usize],
    seed: u64,
) -> Result<AutoencoderParams, ModelError> {
    config.validate(sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = init_encoder(&mut rng, config, sizes);
    let decoder = init_decoder(&mut rng, config, sizes);
    Ok(AutoencoderParams { encoder, decoder })
}

/// Standalone decoder (the generator) with its own parameter stream.
pub fn init_generator(
    config: &ModelConfig,
    sizes: &[usize],
    seed: u64,
) -> Result<DecoderParams, ModelError> {
    config.validate(sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_decoder(&mut rng, config, sizes))
}

/// Per-level sparse operators packaged for tape use.
pub struct HierarchyOps {
    laps: Vec<SparseOp>,
    downs: Vec<SparseOp>,
    ups: Vec<SparseOp>,
    sizes: Vec<usize>,
}

impl HierarchyOps {
    pub fn new(h: &Hierarchy) -> Self {
        let laps = (0..h.num_levels())
            .map(|l| SparseOp::new(h.operator(l).rescaled_csr()))
            .collect();
        let downs = (0..h.num_levels() - 1).map(|l| SparseOp::new(h.down(l).clone())).collect();
        let ups = (0..h.num_levels() - 1).map(|l| SparseOp::new(h.up(l).clone())).collect();
        HierarchyOps { laps, downs, ups, sizes: h.sizes() }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn lap(&self, level: usize) -> &SparseOp {
        &self.laps[level]
    }
}

/// How parameter tensors enter a tape.
#[derive(Clone, Copy)]
pub enum LoadMode {
    /// Constants: no gradients flow into parameters.
    Constant,
    /// Every tensor is a differentiable input (training).
    Trainable,
    /// All constant except the tensor at `index` (canonical order), which
    /// is replaced by an existing tape variable (gradient checking).
    Override { index: usize, var: Var },
}

struct Loader<'t> {
    tape: &'t mut Tape,
    mode: LoadMode,
    counter: usize,
    loaded: Vec<Var>,
}

impl Loader<'_> {
    fn load(&mut self, a: &Array2<f64>) -> Var {
        let v = match self.mode {
            LoadMode::Constant => self.tape.constant(a.clone()),
            LoadMode::Trainable => self.tape.input(a.clone(), true),
            LoadMode::Override { index, var } => {
                if index == self.counter {
                    assert_eq!(
                        self.tape.value(var).dim(),
                        a.dim(),
                        "override tensor shape mismatch"
                    );
                    var
                } else {
                    self.tape.constant(a.clone())
                }
            }
        };
        self.counter += 1;
        self.loaded.push(v);
        v
    }
}

pub struct ChebLayerVars {
    theta: Vec<Var>,
    bias: Var,
}

impl ChebLayerVars {
    /// Loads one layer's tensors onto the tape as constants, for driving
    /// [`chebconv`] directly against spectral oracles.
    pub fn constant(tape: &mut Tape, layer: &ChebLayer) -> ChebLayerVars {
        ChebLayerVars {
            theta: layer.theta.iter().map(|t| tape.constant(t.clone())).collect(),
            bias: tape.constant(layer.bias.clone()),
        }
    }
}

pub struct FcVars {
    weight: Var,
    bias: Var,
}

pub struct EncoderVars {
    convs: Vec<ChebLayerVars>,
    fc: FcVars,
}

pub struct DecoderVars {
    fc: FcVars,
    convs: Vec<ChebLayerVars>,
    out: ChebLayerVars,
    skips: Option<Vec<FcVars>>,
}

pub struct AutoencoderVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
}

fn load_cheb(loader: &mut Loader, layer: &ChebLayer) -> ChebLayerVars {
    ChebLayerVars {
        theta: layer.theta.iter().map(|t| loader.load(t)).collect(),
        bias: loader.load(&layer.bias),
    }
}

fn load_fc(loader: &mut Loader, fc: &Fc) -> FcVars {
    FcVars { weight: loader.load(&fc.weight), bias: loader.load(&fc.bias) }
}

fn load_encoder(loader: &mut Loader, p: &EncoderParams) -> EncoderVars {
    EncoderVars {
        convs: p.convs.iter().map(|c| load_cheb(loader, c)).collect(),
        fc: load_fc(loader, &p.fc),
    }
}

fn load_decoder(loader: &mut Loader, p: &DecoderParams) -> DecoderVars {
    DecoderVars {
        fc: load_fc(loader, &p.fc),
        convs: p.convs.iter().map(|c| load_cheb(loader, c)).collect(),
        out: load_cheb(loader, &p.out),
        skips: p.skips.as_ref().map(|s| s.iter().map(|f| load_fc(loader, f)).collect()),
    }
}

/// Places autoencoder parameters on a tape. The returned flat list follows
/// the canonical tensor order, aligned with `for_each_tensor`.
pub fn load_autoencoder(
    tape: &mut Tape,
    p: &AutoencoderParams,
    mode: LoadMode,
) -> (AutoencoderVars, Vec<Var>) {
    let mut loader = Loader { tape, mode, counter: 0, loaded: Vec::new() };
    let encoder = load_encoder(&mut loader, &p.encoder);
    let decoder = load_decoder(&mut loader, &p.decoder);
    (AutoencoderVars { encoder, decoder }, loader.loaded)
}

/// Places generator (decoder-only) parameters on a tape.
pub fn load_generator(
    tape: &mut Tape,
    p: &DecoderParams,
    mode: LoadMode,
) -> (DecoderVars, Vec<Var>) {
    let mut loader = Loader { tape, mode, counter: 0, loaded: Vec::new() };
    let decoder = load_decoder(&mut loader, p);
    (decoder, loader.loaded)
}

/// `Y = sum_j T_j(Delta~) X Theta_j + bias` by the three-term recurrence;
/// cost O(K (nnz F_in + n F_in F_out)).
pub fn chebconv(tape: &mut Tape, lap: &SparseOp, x: Var, layer: &ChebLayerVars) -> Var {
    let mut acc = tape.matmul(x, layer.theta[0]);
    if layer.theta.len() > 1 {
        let mut t_prev = x;
        let mut t_cur = tape.spmm(lap, x);
        let term = tape.matmul(t_cur, layer.theta[1]);
        acc = tape.add(acc, term);
        for theta in &layer.theta[2..] {
            let lt = tape.spmm(lap, t_cur);
            let two_lt = tape.scale(lt, 2.0);
            let t_next = tape.sub(two_lt, t_prev);
            let term = tape.matmul(t_next, *theta);
            acc = tape.add(acc, term);
            t_prev = t_cur;
            t_cur = t_next;
        }
    }
    tape.add_row(acc, layer.bias)
}

/// Convolve, activate, pool down the hierarchy, then project to the
/// latent row vector (1 x bottleneck).
pub fn encoder_forward(
    tape: &mut Tape,
    ops: &HierarchyOps,
    enc: &EncoderVars,
    x: Var,
) -> Var {
    let levels = enc.convs.len();
    assert_eq!(
        tape.value(x).nrows(),
        ops.sizes[0],
        "encoder input is a level-0 signal"
    );
    let mut h = x;
    for (l, conv) in enc.convs.iter().enumerate() {
        h = chebconv(tape, &ops.laps[l], h, conv);
        h = tape.elu(h);
        h = tape.spmm(&ops.downs[l], h);
    }
    let n_last = ops.sizes[levels];
    let width = tape.value(h).ncols();
    let flat = tape.reshape(h, 1, n_last * width);
    let z = tape.matmul(flat, enc.fc.weight);
    tape.add_row(z, enc.fc.bias)
}

/// Expand the latent row through the mirrored decoder to a level-0
/// n x 3 signal.
pub fn decoder_forward(
    tape: &mut Tape,
    ops: &HierarchyOps,
    dec: &DecoderVars,
    z: Var,
) -> Var {
    let levels = dec.convs.len();
    let n_last = ops.sizes[levels];
    let h0 = tape.matmul(z, dec.fc.weight);
    let h0 = tape.add_row(h0, dec.fc.bias);
    let width = tape.value(h0).ncols() / n_last;
    let mut h = tape.reshape(h0, n_last, width);
    for (i, conv) in dec.convs.iter().enumerate() {
        let level = levels - 1 - i;
        h = tape.spmm(&ops.ups[level], h);
        if let Some(skips) = &dec.skips {
            let s = tape.matmul(z, skips[i].weight);
            let s = tape.add_row(s, skips[i].bias);
            let width = tape.value(h).ncols();
            let s = tape.reshape(s, ops.sizes[level], width);
            h = tape.add(h, s);
        }
        h = chebconv(tape, &ops.laps[level], h, conv);
        h = tape.elu(h);
    }
    chebconv(tape, &ops.laps[0], h, &dec.out)
}

/// The BEGAN discriminator: an autoencoder reconstructing its input.
pub fn discriminator_forward(
    tape: &mut Tape,
    ops: &HierarchyOps,
    ae: &AutoencoderVars,
    x: Var,
) -> Var {
    let z = encoder_forward(tape, ops, &ae.encoder, x);
    decoder_forward(tape, ops, &ae.decoder, z)
}
