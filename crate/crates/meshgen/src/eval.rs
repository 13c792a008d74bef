//! Intrinsic evaluation of trained mesh models and latent-space tools.
//!
//! Generalisation (how well unseen shapes are reconstructed), specificity
//! (how close generated shapes stay to the data), and a Frechet distance
//! over deterministic spectral shape descriptors stand in for perceptual
//! scores. Latent utilities cover inversion of the generator, convex and
//! extrapolated latent mixing, identity / expression composition, and
//! Taubin smoothing.
//!
//! All metric values are millimetres. Reports store their per-sample
//! values sorted ascending, which makes every report field independent of
//! the order the input meshes were supplied in.

use ndarray::{Array1, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffcore::{DiffError, Tape};
use crate::laplacian::EigenBasis;
use crate::mesh::Mesh;
use crate::models::{
    decoder_forward, discriminator_forward, encoder_forward, load_autoencoder, load_generator,
    AutoencoderParams, DecoderParams, HierarchyOps, LoadMode,
};
use crate::training::{to_signal, to_vertices, TrainedModel};

/// Ridge added to a covariance estimated from fewer than `d + 1` samples.
const DIAGONAL_LOAD: f64 = 1e-6;
/// Negative eigenvalues of nominally PSD matrices are clamped here.
const PSD_CLAMP: f64 = 0.0;
/// Default spectral coefficients per coordinate channel.
pub const DEFAULT_FEATURE_COUNT: usize = 16;
/// Taubin smoothing defaults: shrink step, inflate step, passes.
pub const TAUBIN_LAMBDA: f64 = 0.5;
pub const TAUBIN_MU: f64 = -0.53;
pub const TAUBIN_ITERATIONS: usize = 10;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("dimension mismatch: {reason}")]
    DimensionMismatch { reason: String },
    #[error("empty sample set: {what}")]
    EmptySet { what: String },
    #[error("requested {requested} spectral coefficients, basis holds {available}")]
    FeatureCount { requested: usize, available: usize },
}

/// One evaluation metric over a set of samples. `per_sample` is sorted
/// ascending; mean and the population standard deviation are computed
/// from the sorted values, so two reports over the same multiset of
/// samples are bit-identical regardless of input order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub model_id: String,
    pub sample_count: usize,
    pub seed: u64,
    /// Millimetres.
    pub mean: f64,
    /// Millimetres, population standard deviation.
    pub std: f64,
    /// Millimetres, sorted ascending.
    pub per_sample: Vec<f64>,
}

impl MetricReport {
    pub fn from_samples(
        metric: impl Into<String>,
        model_id: impl Into<String>,
        seed: u64,
        mut per_sample: Vec<f64>,
    ) -> MetricReport {
        per_sample.sort_by(f64::total_cmp);
        let n = per_sample.len();
        let mean = per_sample.iter().sum::<f64>() / n.max(1) as f64;
        let var = per_sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n.max(1) as f64;
        MetricReport {
            metric: metric.into(),
            model_id: model_id.into(),
            sample_count: n,
            seed,
            mean,
            std: var.sqrt(),
            per_sample,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes to JSON")
    }
}

/// A multivariate Gaussian fitted to feature vectors.
#[derive(Debug, Clone)]
pub struct GaussianFit {
    pub mean: Array1<f64>,
    pub cov: Array2<f64>,
}

impl GaussianFit {
    /// Fits mean and unbiased covariance to `rows` (one sample per row).
    /// Sets with fewer than `d + 1` samples get a `1e-6` diagonal ridge so
    /// downstream square roots stay well defined.
    pub fn from_rows(rows: &Array2<f64>) -> Result<GaussianFit, EvalError> {
        let n = rows.nrows();
        let d = rows.ncols();
        if n == 0 {
            return Err(EvalError::EmptySet { what: "gaussian fit".into() });
        }
        let mean = rows.sum_axis(ndarray::Axis(0)) / n as f64;
        let mut cov = Array2::<f64>::zeros((d, d));
        if n >= 2 {
            let centered = rows - &mean.clone().insert_axis(ndarray::Axis(0));
            cov = centered.t().dot(&centered) / (n - 1) as f64;
            cov = (&cov + &cov.t()) / 2.0;
        }
        if n < d + 1 {
            for i in 0..d {
                cov[[i, i]] += DIAGONAL_LOAD;
            }
        }
        Ok(GaussianFit { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

fn sym_eigen(a: &Array2<f64>) -> (Vec<f64>, Array2<f64>) {
    let d = a.nrows();
    let m = nalgebra::DMatrix::from_fn(d, d, |i, j| a[[i, j]]);
    let eig = nalgebra::SymmetricEigen::new(m);
    let values = eig.eigenvalues.iter().copied().collect();
    let vectors = Array2::from_shape_fn((d, d), |(i, j)| eig.eigenvectors[(i, j)]);
    (values, vectors)
}

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
fn sqrt_psd(a: &Array2<f64>) -> Array2<f64> {
    let (values, vectors) = sym_eigen(a);
    let mut scaled = vectors.clone();
    for (j, &lam) in values.iter().enumerate() {
        let s = lam.max(PSD_CLAMP).sqrt();
        scaled.column_mut(j).mapv_inplace(|x| x * s);
    }
    let root = scaled.dot(&vectors.t());
    (&root + &root.t()) / 2.0
}

/// Frechet distance between two Gaussians:
/// `|mu_R - mu_G|^2 + Tr(Sigma_R + Sigma_G - 2 sqrt(Sigma_R Sigma_G))`.
/// The cross term is evaluated through the symmetrized product
/// `sqrt(Sigma_R) Sigma_G sqrt(Sigma_R)` with eigenvalues clamped at
/// zero, and the result is floored at zero.
pub fn frechet_distance(a: &GaussianFit, b: &GaussianFit) -> Result<f64, EvalError> {
    if a.dim() != b.dim() {
        return Err(EvalError::DimensionMismatch {
            reason: format!("gaussian fits of dimension {} and {}", a.dim(), b.dim()),
        });
    }
    let diff = &a.mean - &b.mean;
    let dist2 = diff.iter().map(|v| v * v).sum::<f64>();
    let sa = sqrt_psd(&a.cov);
    let inner = sa.dot(&b.cov).dot(&sa);
    let inner = (&inner + &inner.t()) / 2.0;
    let (values, _) = sym_eigen(&inner);
    let trace_sqrt: f64 = values.iter().map(|&l| l.max(PSD_CLAMP).sqrt()).sum();
    let trace_a: f64 = (0..a.dim()).map(|i| a.cov[[i, i]]).sum();
    let trace_b: f64 = (0..b.dim()).map(|i| b.cov[[i, i]]).sum();
    Ok((dist2 + trace_a + trace_b - 2.0 * trace_sqrt).max(0.0))
}

/// Spectral shape descriptor of a displacement field: the first `m`
/// A-weighted Fourier coefficients of each coordinate channel,
/// concatenated channel by channel into a `3m` vector. Linear in the
/// displacements; the zero field maps to the zero vector.
pub fn mesh_features(
    displacement: &Array2<f64>,
    basis: &EigenBasis,
    m: usize,
) -> Result<Vec<f64>, EvalError> {
    if m > basis.k() {
        return Err(EvalError::FeatureCount { requested: m, available: basis.k() });
    }
    let coeffs = basis
        .fourier(displacement)
        .map_err(|_| EvalError::DimensionMismatch {
            reason: format!(
                "displacement has {} rows, basis expects {}",
                displacement.nrows(),
                basis.n()
            ),
        })?;
    let mut out = Vec::with_capacity(3 * m);
    for c in 0..coeffs.ncols() {
        for i in 0..m {
            out.push(coeffs[[i, c]]);
        }
    }
    Ok(out)
}

/// Stacks per-mesh feature vectors into a samples-by-features matrix.
fn feature_matrix(
    displacements: &[Array2<f64>],
    basis: &EigenBasis,
    m: usize,
) -> Result<Array2<f64>, EvalError> {
    if displacements.is_empty() {
        return Err(EvalError::EmptySet { what: "feature matrix".into() });
    }
    let mut rows = Array2::zeros((displacements.len(), 3 * m));
    for (i, d) in displacements.iter().enumerate() {
        let f = mesh_features(d, basis, m)?;
        for (j, v) in f.iter().enumerate() {
            rows[[i, j]] = *v;
        }
    }
    Ok(rows)
}

/// Frechet distance between Gaussians fitted to the spectral features of
/// two mesh sets (displacement fields against the same template).
pub fn fid_score(
    real: &[Array2<f64>],
    generated: &[Array2<f64>],
    basis: &EigenBasis,
    m: usize,
) -> Result<f64, EvalError> {
    let fit_r = GaussianFit::from_rows(&feature_matrix(real, basis, m)?)?;
    let fit_g = GaussianFit::from_rows(&feature_matrix(generated, basis, m)?)?;
    frechet_distance(&fit_r, &fit_g)
}

/// Mean per-vertex Euclidean distance between two vertex arrays (mm).
pub fn mean_vertex_distance(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "vertex arrays share a shape");
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        let dx = a[[i, 0]] - b[[i, 0]];
        let dy = a[[i, 1]] - b[[i, 1]];
        let dz = a[[i, 2]] - b[[i, 2]];
        sum += (dx * dx + dy * dy + dz * dz).sqrt();
    }
    sum / n as f64
}

/// Runs the generator once, without gradients.
pub fn decode_latent(
    ops: &HierarchyOps,
    decoder: &DecoderParams,
    z: &Array2<f64>,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let (vars, _) = load_generator(&mut tape, decoder, LoadMode::Constant);
    let zv = tape.constant(z.clone());
    let out = decoder_forward(&mut tape, ops, &vars, zv);
    tape.value(out).clone()
}

/// Encodes a signal to its latent embedding, without gradients.
pub fn encode_signal(
    ops: &HierarchyOps,
    model: &AutoencoderParams,
    signal: &Array2<f64>,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let (vars, _) = load_autoencoder(&mut tape, model, LoadMode::Constant);
    let x = tape.constant(signal.clone());
    let z = encoder_forward(&mut tape, ops, &vars.encoder, x);
    tape.value(z).clone()
}

/// Runs the full autoencoder once, without gradients.
pub fn reconstruct_signal(
    ops: &HierarchyOps,
    model: &AutoencoderParams,
    signal: &Array2<f64>,
) -> Array2<f64> {
    let mut tape = Tape::new();
    let (vars, _) = load_autoencoder(&mut tape, model, LoadMode::Constant);
    let x = tape.constant(signal.clone());
    let out = discriminator_forward(&mut tape, ops, &vars, x);
    tape.value(out).clone()
}

/// Latent inversion settings. The restart pool is seeded from `seed`
/// alone, so every target inverted under the same options starts from the
/// same initial latents.
#[derive(Debug, Clone)]
pub struct InvertOptions {
    pub restarts: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Project the latent onto `[-1, 1]^h` after every step (the
    /// generator's training-time latent box); disabled when inverting an
    /// autoencoder's unconstrained latent space.
    pub box_project: bool,
    pub seed: u64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions {
            restarts: 5,
            iterations: 500,
            lr: 0.05,
            box_project: true,
            seed: 0,
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn invert_once(
    ops: &HierarchyOps,
    decoder: &DecoderParams,
    target: &Array2<f64>,
    z0: Array2<f64>,
    opts: &InvertOptions,
) -> Result<(Array2<f64>, f64), EvalError> {
    let h = z0.ncols();
    let mut z = z0;
    let mut m = Array2::<f64>::zeros((1, h));
    let mut v = Array2::<f64>::zeros((1, h));
    for t in 1..=opts.iterations {
        let mut tape = Tape::new();
        let (vars, _) = load_generator(&mut tape, decoder, LoadMode::Constant);
        let zv = tape.input(z.clone(), true);
        let gz = decoder_forward(&mut tape, ops, &vars, zv);
        let xv = tape.constant(target.clone());
        let loss = tape.l1_loss(xv, gz);
        let mut grads = tape.backward(loss)?;
        let g = grads.take(zv).unwrap_or_else(|| Array2::zeros((1, h)));
        let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
        for j in 0..h {
            let gj = g[[0, j]];
            m[[0, j]] = ADAM_BETA1 * m[[0, j]] + (1.0 - ADAM_BETA1) * gj;
            v[[0, j]] = ADAM_BETA2 * v[[0, j]] + (1.0 - ADAM_BETA2) * gj * gj;
            let m_hat = m[[0, j]] / bc1;
            let v_hat = v[[0, j]] / bc2;
            z[[0, j]] -= opts.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            if opts.box_project {
                z[[0, j]] = z[[0, j]].clamp(-1.0, 1.0);
            }
        }
    }
    let decoded = decode_latent(ops, decoder, &z);
    let residual = mean_vertex_distance(&decoded, target);
    Ok((z, residual))
}

/// Finds `argmin_z L1(target, G(z))` by Adam descent on the latent, best
/// of `opts.restarts` uniform initializations. Returns the best latent
/// and the mean per-vertex Euclidean residual in the units of `target`
/// (multiply by the model's displacement scale for millimetres). The
/// optimum is local; the metric is defined by this procedure.
pub fn invert_latent(
    ops: &HierarchyOps,
    decoder: &DecoderParams,
    target: &Array2<f64>,
    opts: &InvertOptions,
) -> Result<(Array2<f64>, f64), EvalError> {
    assert!(opts.restarts >= 1, "at least one restart");
    let h = decoder.fc.weight.nrows();
    let mut pool = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut best: Option<(Array2<f64>, f64)> = None;
    for _ in 0..opts.restarts {
        let z0 = Array2::from_shape_fn((1, h), |_| pool.random::<f64>() * 2.0 - 1.0);
        let (z, residual) = invert_once(ops, decoder, target, z0, opts)?;
        if best.as_ref().is_none_or(|(_, r)| residual < *r) {
            best = Some((z, residual));
        }
    }
    Ok(best.expect("at least one restart ran"))
}

/// How well a model reconstructs unseen meshes: per test mesh, the mean
/// per-vertex Euclidean distance (mm) between the mesh and its
/// reconstruction. The generator is inverted per mesh (every mesh uses
/// the same restart pool, keeping the report order-invariant); the
/// autoencoder reconstructs by encode-decode.
pub fn generalisation(
    ops: &HierarchyOps,
    model: &TrainedModel,
    template: &Mesh,
    sigma: f64,
    test: &[Mesh],
    opts: &InvertOptions,
    model_id: &str,
) -> Result<MetricReport, EvalError> {
    if test.is_empty() {
        return Err(EvalError::EmptySet { what: "generalisation test set".into() });
    }
    let mut per_sample = Vec::with_capacity(test.len());
    for mesh in test {
        let signal = to_signal(template, mesh.vertices(), sigma);
        let recon_signal = match model {
            TrainedModel::Began { generator, .. } => {
                let (z, _) = invert_latent(ops, generator, &signal, opts)?;
                decode_latent(ops, generator, &z)
            }
            TrainedModel::Autoencoder { model } => reconstruct_signal(ops, model, &signal),
        };
        let recon = to_vertices(template, &recon_signal, sigma);
        per_sample.push(mean_vertex_distance(&recon, mesh.vertices()));
    }
    Ok(MetricReport::from_samples(
        "generalisation",
        model_id,
        opts.seed,
        per_sample,
    ))
}

/// Draws `n` latents uniformly from `[-1, 1]^h`.
pub fn sample_uniform_latents(n: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    (0..n)
        .map(|_| Array2::from_shape_fn((1, h), |_| rng.random::<f64>() * 2.0 - 1.0))
        .collect()
}

/// Draws `n` latents from the standard normal.
pub fn sample_normal_latents(n: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<Array2<f64>> {
    (0..n)
        .map(|_| Array2::from_shape_fn((1, h), |_| rng.sample(StandardNormal)))
        .collect()
}

/// Draws `n` latents from `N(mu, sigma)` through the PSD square root of
/// the covariance.
fn sample_gaussian_latents(
    n: usize,
    fit: &GaussianFit,
    rng: &mut ChaCha8Rng,
) -> Vec<Array2<f64>> {
    let d = fit.dim();
    let root = sqrt_psd(&fit.cov);
    (0..n)
        .map(|_| {
            let u = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let x = &fit.mean + &root.dot(&u);
            Array2::from_shape_fn((1, d), |(_, j)| x[j])
        })
        .collect()
}

/// Latent draws for sample-based scores: the generator's training box for
/// the adversarial model, the standard normal for the autoencoder.
pub fn sample_model_latents(
    model: &TrainedModel,
    n: usize,
    h: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Array2<f64>> {
    match model {
        TrainedModel::Began { .. } => sample_uniform_latents(n, h, rng),
        TrainedModel::Autoencoder { .. } => sample_normal_latents(n, h, rng),
    }
}

/// The decoder used for generation.
pub fn generator_of(model: &TrainedModel) -> &DecoderParams {
    match model {
        TrainedModel::Began { generator, .. } => generator,
        TrainedModel::Autoencoder { model } => &model.decoder,
    }
}

/// How far generated shapes stray from the data: for each of `n_samples`
/// draws, the minimum over the reference meshes of the mean per-vertex
/// distance (mm). Latents come from the generator's training box for the
/// adversarial model; for the autoencoder they come from a Gaussian
/// fitted to the embeddings of `embedding_set` (the training meshes).
pub fn specificity(
    ops: &HierarchyOps,
    model: &TrainedModel,
    template: &Mesh,
    sigma: f64,
    reference: &[Mesh],
    embedding_set: &[Mesh],
    n_samples: usize,
    seed: u64,
    model_id: &str,
) -> Result<MetricReport, EvalError> {
    if reference.is_empty() {
        return Err(EvalError::EmptySet { what: "specificity reference set".into() });
    }
    let h = generator_of(model).fc.weight.nrows();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let latents = match model {
        TrainedModel::Began { .. } => sample_uniform_latents(n_samples, h, &mut rng),
        TrainedModel::Autoencoder { model: ae } => {
            if embedding_set.is_empty() {
                return Err(EvalError::EmptySet { what: "specificity embedding set".into() });
            }
            let mut embeddings = Array2::zeros((embedding_set.len(), h));
            for (i, mesh) in embedding_set.iter().enumerate() {
                let signal = to_signal(template, mesh.vertices(), sigma);
                let z = encode_signal(ops, ae, &signal);
                for j in 0..h {
                    embeddings[[i, j]] = z[[0, j]];
                }
            }
            let fit = GaussianFit::from_rows(&embeddings)?;
            sample_gaussian_latents(n_samples, &fit, &mut rng)
        }
    };
    let decoder = generator_of(model);
    let reference_vertices: Vec<&Array2<f64>> = reference.iter().map(|m| m.vertices()).collect();
    let mut per_sample = Vec::with_capacity(n_samples);
    for z in &latents {
        let generated = to_vertices(template, &decode_latent(ops, decoder, z), sigma);
        let nearest = reference_vertices
            .iter()
            .map(|r| mean_vertex_distance(&generated, r))
            .fold(f64::INFINITY, f64::min);
        per_sample.push(nearest);
    }
    Ok(MetricReport::from_samples(
        "specificity",
        model_id,
        seed,
        per_sample,
    ))
}

/// `z~ = (1 - f) z1 + f z2`. `f` in `[0, 1]` interpolates; values outside
/// extrapolate (exaggeration). Endpoints are returned exactly.
pub fn mix_latent(z1: &Array2<f64>, z2: &Array2<f64>, f: f64) -> Result<Array2<f64>, EvalError> {
    if z1.dim() != z2.dim() {
        return Err(EvalError::DimensionMismatch {
            reason: format!("latents of shape {:?} and {:?}", z1.dim(), z2.dim()),
        });
    }
    if f == 0.0 {
        return Ok(z1.clone());
    }
    if f == 1.0 {
        return Ok(z2.clone());
    }
    Ok(z1 * (1.0 - f) + z2 * f)
}

/// Transfers the expression deformation of `expression` (an expression
/// exerted on the template) onto `identity`:
/// `identity + (expression - template)`, all world-space vertex arrays on
/// the template topology.
pub fn compose_identity_expression(
    identity: &Array2<f64>,
    expression: &Array2<f64>,
    template: &Mesh,
) -> Result<Array2<f64>, EvalError> {
    let want = (template.n(), 3);
    for (name, arr) in [("identity", identity), ("expression", expression)] {
        if arr.dim() != want {
            return Err(EvalError::DimensionMismatch {
                reason: format!("{name} vertices have shape {:?}, template wants {want:?}", arr.dim()),
            });
        }
    }
    Ok(identity + &(expression - template.vertices()))
}

/// Taubin smoothing: alternating under- and over-relaxed steps of the
/// uniform umbrella Laplacian, `x += lambda L x` then `x += mu L x` with
/// `L x_i = mean of neighbors - x_i`. The negative `mu` pass compensates
/// the shrinkage of the positive pass.
pub fn taubin_smooth(mesh: &Mesh, iterations: usize, lambda: f64, mu: f64) -> Mesh {
    let neighbors = mesh.topology().vertex_neighbors();
    let mut x = mesh.vertices().clone();
    let umbrella = |x: &Array2<f64>| {
        let mut delta = Array2::<f64>::zeros(x.dim());
        for (i, nbrs) in neighbors.iter().enumerate() {
            if nbrs.is_empty() {
                continue;
            }
            let inv = 1.0 / nbrs.len() as f64;
            for c in 0..3 {
                let avg = nbrs.iter().map(|&j| x[[j, c]]).sum::<f64>() * inv;
                delta[[i, c]] = avg - x[[i, c]];
            }
        }
        delta
    };
    for _ in 0..iterations {
        let d = umbrella(&x);
        x = x + &(&d * lambda);
        let d = umbrella(&x);
        x = x + &(&d * mu);
    }
    mesh.with_vertices(x)
        .expect("smoothing preserves the vertex array shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::build_hierarchy;
    use crate::laplacian::SpectralOperator;
    use crate::models::{init_autoencoder, init_generator, ModelConfig};
    use crate::synthdata::make_template;
    use crate::training::param_checksum;
    use approx::assert_abs_diff_eq;

    fn tiny_model_config() -> ModelConfig {
        ModelConfig {
            k: 2,
            channels: vec![6],
            bottleneck: 4,
            skip_connections: false,
        }
    }

    fn tiny_gan() -> (crate::hierarchy::Hierarchy, DecoderParams) {
        let template = make_template(1);
        let hierarchy = build_hierarchy(&template, 1, 2.0).unwrap();
        let generator = init_generator(&tiny_model_config(), &hierarchy.sizes(), 5).unwrap();
        (hierarchy, generator)
    }

    #[test]
    fn metric_report_is_order_invariant_and_consistent() {
        let a = MetricReport::from_samples("m", "id", 1, vec![3.0, 1.0, 2.0]);
        let b = MetricReport::from_samples("m", "id", 1, vec![2.0, 3.0, 1.0]);
        assert_eq!(a, b);
        assert_eq!(a.per_sample, vec![1.0, 2.0, 3.0]);
        assert_abs_diff_eq!(a.mean, 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(a.std, (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        let check = a.per_sample.iter().sum::<f64>() / 3.0;
        assert!((check - a.mean).abs() < 1e-9);

        let single = MetricReport::from_samples("m", "id", 0, vec![4.2]);
        assert_eq!(single.std, 0.0);
        assert_eq!(single.sample_count, 1);
    }

    #[test]
    fn metric_report_round_trips_through_json() {
        let a = MetricReport::from_samples("specificity", "gan", 9, vec![1.5, 0.5]);
        let json = a.to_json();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }

    #[test]
    fn gaussian_fit_matches_hand_covariance() {
        let rows = ndarray::array![[1.0, 0.0], [3.0, 0.0], [2.0, 3.0]];
        let fit = GaussianFit::from_rows(&rows).unwrap();
        assert_abs_diff_eq!(fit.mean[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.mean[1], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.cov[[0, 0]], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.cov[[1, 1]], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.cov[[0, 1]], fit.cov[[1, 0]], epsilon = 1e-15);
    }

    #[test]
    fn gaussian_fit_loads_diagonal_for_small_sets() {
        let rows = Array2::<f64>::zeros((2, 5));
        let fit = GaussianFit::from_rows(&rows).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(fit.cov[[i, i]], DIAGONAL_LOAD, epsilon = 1e-15);
        }
    }

    #[test]
    fn frechet_closed_forms() {
        let d = 3;
        let eye = Array2::eye(d);
        let a = GaussianFit { mean: Array1::zeros(d), cov: eye.clone() };
        assert_abs_diff_eq!(frechet_distance(&a, &a).unwrap(), 0.0, epsilon = 1e-8);

        let shift = Array1::from_vec(vec![1.0, -2.0, 2.0]);
        let b = GaussianFit { mean: shift.clone(), cov: eye.clone() };
        let norm2 = shift.iter().map(|v| v * v).sum::<f64>();
        assert_abs_diff_eq!(frechet_distance(&a, &b).unwrap(), norm2, epsilon = 1e-8);

        let c = GaussianFit { mean: Array1::zeros(2), cov: Array2::eye(2) * 4.0 };
        let e = GaussianFit { mean: Array1::zeros(2), cov: Array2::eye(2) };
        assert_abs_diff_eq!(frechet_distance(&c, &e).unwrap(), 2.0, epsilon = 1e-8);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let x = Array2::from_shape_fn((12, 4), |_| rng.random::<f64>());
        let y = Array2::from_shape_fn((15, 4), |_| rng.random::<f64>() + 0.3);
        let fx = GaussianFit::from_rows(&x).unwrap();
        let fy = GaussianFit::from_rows(&y).unwrap();
        let ab = frechet_distance(&fx, &fy).unwrap();
        let ba = frechet_distance(&fy, &fx).unwrap();
        assert!(ab >= 0.0);
        assert!((ab - ba).abs() < 1e-8, "ab {ab} vs ba {ba}");
        let mismatched = GaussianFit { mean: Array1::zeros(3), cov: Array2::eye(3) };
        assert!(frechet_distance(&fx, &mismatched).is_err());
    }

    #[test]
    fn features_are_zero_linear_and_bump_sensitive() {
        let template = make_template(2);
        let op = SpectralOperator::from_mesh(&template).unwrap();
        let basis = op.eigendecomposition(20).unwrap();

        let zero = Array2::zeros((template.n(), 3));
        let f0 = mesh_features(&zero, &basis, 16).unwrap();
        assert_eq!(f0.len(), 48);
        assert!(f0.iter().all(|v| v.abs() < 1e-12));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>());
        let fa = mesh_features(&a, &basis, 16).unwrap();
        let fb = mesh_features(&b, &basis, 16).unwrap();
        let fsum = mesh_features(&(&a + &b), &basis, 16).unwrap();
        for i in 0..fsum.len() {
            assert_abs_diff_eq!(fsum[i], fa[i] + fb[i], epsilon = 1e-9);
        }

        let mut bump = Array2::zeros((template.n(), 3));
        bump[[7, 2]] = 3.0;
        let fbump = mesh_features(&bump, &basis, 16).unwrap();
        let dist: f64 = fbump.iter().zip(&f0).map(|(x, y)| (x - y) * (x - y)).sum();
        assert!(dist > 1e-6, "bump must move the descriptor, got {dist}");

        assert!(mesh_features(&zero, &basis, 21).is_err());
    }

    #[test]
    fn fid_of_a_set_against_itself_is_zero() {
        let template = make_template(1);
        let op = SpectralOperator::from_mesh(&template).unwrap();
        let basis = op.eigendecomposition(8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let set: Vec<Array2<f64>> = (0..30)
            .map(|_| Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>()))
            .collect();
        let fid = fid_score(&set, &set, &basis, 4).unwrap();
        assert!(fid <= 1e-8, "self FID {fid}");
        assert!(fid_score(&[], &set, &basis, 4).is_err());
    }

    #[test]
    fn latent_mixing_has_exact_endpoints_and_swap_symmetry() {
        let z1 = ndarray::array![[0.3, -0.7, 0.1]];
        let z2 = ndarray::array![[-0.2, 0.5, 0.9]];
        assert_eq!(mix_latent(&z1, &z2, 0.0).unwrap(), z1);
        assert_eq!(mix_latent(&z1, &z2, 1.0).unwrap(), z2);
        let mid = mix_latent(&z1, &z2, 0.5).unwrap();
        assert_abs_diff_eq!(mid[[0, 0]], 0.05, epsilon = 1e-12);
        let doubled = mix_latent(&Array2::zeros((1, 3)), &z2, 2.0).unwrap();
        assert_abs_diff_eq!(doubled[[0, 2]], 1.8, epsilon = 1e-12);
        for f in [0.25, 0.6, 1.7] {
            let a = mix_latent(&z1, &z2, f).unwrap();
            let b = mix_latent(&z2, &z1, 1.0 - f).unwrap();
            for j in 0..3 {
                assert_abs_diff_eq!(a[[0, j]], b[[0, j]], epsilon = 1e-12);
            }
        }
        let bad = ndarray::array![[1.0, 2.0]];
        assert!(mix_latent(&z1, &bad, 0.5).is_err());
    }

    #[test]
    fn composition_identities() {
        let template = make_template(1);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let id = template.vertices()
            + &Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>());
        let expr = template.vertices()
            + &Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>() * 0.5);

        let neutral = compose_identity_expression(&id, template.vertices(), &template).unwrap();
        assert_eq!(neutral, id);

        let transferred =
            compose_identity_expression(template.vertices(), &expr, &template).unwrap();
        let err = (&transferred - &expr).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-12);

        let deformation = &expr - template.vertices();
        let double_expr = template.vertices() + &(&deformation * 2.0);
        let single = compose_identity_expression(&id, &expr, &template).unwrap();
        let double = compose_identity_expression(&id, &double_expr, &template).unwrap();
        let lhs = &double - &id;
        let rhs = (&single - &id) * 2.0;
        let err = (&lhs - &rhs).iter().fold(0.0f64, |m, x| m.max(x.abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn smoothing_reduces_noise_and_zero_iterations_is_identity() {
        let template = make_template(2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let noisy_vertices = template.vertices()
            + &Array2::from_shape_fn((template.n(), 3), |_| (rng.random::<f64>() - 0.5) * 2.0);
        let noisy = template.with_vertices(noisy_vertices).unwrap();

        let same = taubin_smooth(&noisy, 0, TAUBIN_LAMBDA, TAUBIN_MU);
        assert_eq!(same.vertices(), noisy.vertices());

        let neighbors = noisy.topology().vertex_neighbors();
        let roughness = |x: &Array2<f64>| {
            let mut total = 0.0;
            for (i, nbrs) in neighbors.iter().enumerate() {
                let inv = 1.0 / nbrs.len() as f64;
                for c in 0..3 {
                    let avg = nbrs.iter().map(|&j| x[[j, c]]).sum::<f64>() * inv;
                    let d = avg - x[[i, c]];
                    total += d * d;
                }
            }
            total
        };
        let noise_before = noisy.vertices() - template.vertices();
        let smoothed = taubin_smooth(&noisy, TAUBIN_ITERATIONS, TAUBIN_LAMBDA, TAUBIN_MU);
        let smoothed_template = taubin_smooth(&template, TAUBIN_ITERATIONS, TAUBIN_LAMBDA, TAUBIN_MU);
        let noise_after = smoothed.vertices() - smoothed_template.vertices();
        let before = roughness(&noise_before);
        let after = roughness(&noise_after);
        assert!(
            after < 0.5 * before,
            "noise roughness should drop: before {before}, after {after}"
        );
    }

    #[test]
    fn self_inversion_recovers_generated_mesh() {
        let (hierarchy, generator) = tiny_gan();
        let ops = HierarchyOps::new(&hierarchy);
        let z0 = ndarray::array![[0.4, -0.3, 0.8, -0.6]];
        let target = decode_latent(&ops, &generator, &z0);
        let opts = InvertOptions::default();
        let (z, residual) = invert_latent(&ops, &generator, &target, &opts).unwrap();
        assert!(residual <= 0.05, "self-inversion residual {residual}");
        assert!(z.iter().all(|v| (-1.0..=1.0).contains(v)), "latent stays in the box");

        let one = InvertOptions { restarts: 1, ..InvertOptions::default() };
        let (_, r1) = invert_latent(&ops, &generator, &target, &one).unwrap();
        assert!(
            residual <= r1 + 1e-12,
            "five restarts can only improve on one: {residual} vs {r1}"
        );
    }

    #[test]
    fn constant_generator_has_zero_specificity_against_its_output() {
        let (hierarchy, mut generator) = tiny_gan();
        generator.for_each_tensor_mut(&mut |_, t| t.fill(0.0));
        let ops = HierarchyOps::new(&hierarchy);
        let template = make_template(1);
        let model = TrainedModel::Began {
            generator,
            discriminator: init_autoencoder(&tiny_model_config(), &hierarchy.sizes(), 1).unwrap(),
        };
        let refs = [template.clone()];
        let report = specificity(&ops, &model, &template, 1.0, &refs, &refs, 20, 3, "const").unwrap();
        assert!(report.mean.abs() < 1e-12, "constant generator sits on the reference");
        assert_eq!(report.sample_count, 20);
    }

    #[test]
    fn specificity_is_invariant_to_reference_order() {
        let (hierarchy, generator) = tiny_gan();
        let ops = HierarchyOps::new(&hierarchy);
        let template = make_template(1);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let refs: Vec<Mesh> = (0..4)
            .map(|_| {
                let v = template.vertices()
                    + &Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>() * 3.0);
                template.with_vertices(v).unwrap()
            })
            .collect();
        let d_params = init_autoencoder(&tiny_model_config(), &hierarchy.sizes(), 1).unwrap();
        let model = TrainedModel::Began { generator, discriminator: d_params };
        let a = specificity(&ops, &model, &template, 1.0, &refs, &refs, 10, 3, "gan").unwrap();
        let reversed: Vec<Mesh> = refs.iter().rev().cloned().collect();
        let b =
            specificity(&ops, &model, &template, 1.0, &reversed, &reversed, 10, 3, "gan").unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn autoencoder_specificity_samples_the_embedding_gaussian() {
        let (hierarchy, _) = tiny_gan();
        let ops = HierarchyOps::new(&hierarchy);
        let template = make_template(1);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let refs: Vec<Mesh> = (0..5)
            .map(|_| {
                let v = template.vertices()
                    + &Array2::from_shape_fn((template.n(), 3), |_| rng.random::<f64>() * 2.0);
                template.with_vertices(v).unwrap()
            })
            .collect();
        let ae = init_autoencoder(&tiny_model_config(), &hierarchy.sizes(), 6).unwrap();
        let model = TrainedModel::Autoencoder { model: ae };
        let report =
            specificity(&ops, &model, &template, 1.0, &refs[..2], &refs[2..], 15, 9, "ae").unwrap();
        assert_eq!(report.sample_count, 15);
        assert!(report.per_sample.iter().all(|v| v.is_finite() && *v >= 0.0));
        assert!(
            specificity(&ops, &model, &template, 1.0, &refs[..2], &[], 5, 9, "ae").is_err(),
            "autoencoder mode needs an embedding set"
        );
    }

    #[test]
    fn generalisation_runs_for_both_model_kinds() {
        let (hierarchy, generator) = tiny_gan();
        let ops = HierarchyOps::new(&hierarchy);
        let template = make_template(1);
        let ae = init_autoencoder(&tiny_model_config(), &hierarchy.sizes(), 9).unwrap();
        let test = vec![template.clone()];
        let opts = InvertOptions { iterations: 50, restarts: 2, ..InvertOptions::default() };

        let d_params = init_autoencoder(&tiny_model_config(), &hierarchy.sizes(), 1).unwrap();
        let before = param_checksum(&generator);
        let gan_model = TrainedModel::Began { generator, discriminator: d_params };
        let r1 = generalisation(&ops, &gan_model, &template, 1.0, &test, &opts, "gan").unwrap();
        assert_eq!(r1.sample_count, 1);
        assert_eq!(r1.std, 0.0);
        assert!(r1.mean.is_finite());
        if let TrainedModel::Began { generator, .. } = &gan_model {
            assert_eq!(param_checksum(generator), before, "evaluation never mutates the model");
        }

        let ae_model = TrainedModel::Autoencoder { model: ae };
        let r2 = generalisation(&ops, &ae_model, &template, 1.0, &test, &opts, "ae").unwrap();
        assert!(r2.mean.is_finite());
        assert!(generalisation(&ops, &ae_model, &template, 1.0, &[], &opts, "ae").is_err());
    }

    #[test]
    fn interpolation_path_is_continuous() {
        let (hierarchy, generator) = tiny_gan();
        let ops = HierarchyOps::new(&hierarchy);
        let z1 = ndarray::array![[0.9, -0.9, 0.2, 0.0]];
        let z2 = ndarray::array![[-0.5, 0.4, -0.8, 0.7]];
        let mut max_step = 0.0f64;
        let mut prev = decode_latent(&ops, &generator, &z1);
        let steps = 100;
        for i in 1..=steps {
            let f = i as f64 / steps as f64;
            let z = mix_latent(&z1, &z2, f).unwrap();
            let cur = decode_latent(&ops, &generator, &z);
            let step = (&cur - &prev).iter().fold(0.0f64, |m, x| m.max(x.abs()));
            max_step = max_step.max(step);
            prev = cur;
        }
        let endpoints = {
            let a = decode_latent(&ops, &generator, &z1);
            let b = decode_latent(&ops, &generator, &z2);
            (&a - &b).iter().fold(0.0f64, |m, x| m.max(x.abs()))
        };
        let c = max_step / 0.01;
        assert!(max_step.is_finite() && max_step > 0.0);
        assert!(
            c <= 100.0 * (endpoints + 1.0),
            "per-step displacement stays proportional to the step size, C = {c}"
        );
        println!("interpolation continuity constant C = {c:.3}");
    }
}
