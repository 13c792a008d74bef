//! Deterministic synthetic face-like mesh distribution.
//!
//! Real facial scan databases are not available here, so the pipeline trains
//! on an invented but fully controlled population: an ellipsoidal head
//! template deformed by a known, low-dimensional set of identity and
//! expression factors. Because the generative dimensionality is known
//! exactly, generalisation and specificity numbers have a ground truth to
//! be compared against.

use std::collections::HashMap;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::laplacian::{LaplacianError, SpectralOperator};
use crate::mesh::{
    compute_geometry, load_mesh, save_mesh, vertex_normals, Mesh, MeshError,
};

/// Head-like ellipsoid half-axes in millimetres (x, y, z).
pub const TEMPLATE_HALF_AXES: [f64; 3] = [80.0, 110.0, 95.0];

/// Icosphere subdivided `level` times, scaled to rough head proportions.
/// Vertex count is 10 * 4^level + 2. Deterministic: no randomness anywhere.
pub fn make_template(level: u32) -> Mesh {
    assert!((1..=5).contains(&level), "subdivision level must be in [1, 5]");
    let (mut verts, mut faces) = icosahedron();
    for _ in 0..level {
        subdivide(&mut verts, &mut faces);
    }
    let n = verts.len();
    let mut vertices = Array2::zeros((n, 3));
    for (i, v) in verts.iter().enumerate() {
        let inv = 1.0 / (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        for c in 0..3 {
            vertices[[i, c]] = v[c] * inv * TEMPLATE_HALF_AXES[c];
        }
    }
    Mesh::new(vertices, faces).expect("icosphere construction is manifold by construction")
}

fn icosahedron() -> (Vec<[f64; 3]>, Vec<[usize; 3]>) {
    let t = (1.0 + 5.0f64.sqrt()) / 2.0;
    let verts = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (verts, faces)
}

fn subdivide(verts: &mut Vec<[f64; 3]>, faces: &mut Vec<[usize; 3]>) {
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let (p, q) = (verts[a], verts[b]);
            verts.push([(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0]);
            verts.len() - 1
        })
    };
    let mut next = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces.iter() {
        let ab = mid(a, b, verts);
        let bc = mid(b, c, verts);
        let ca = mid(c, a, verts);
        next.push([a, ab, ca]);
        next.push([b, bc, ab]);
        next.push([c, ca, bc]);
        next.push([ab, bc, ca]);
    }
    *faces = next;
}

/// A degenerate draw is rejected and redrawn at most this many times.
const MAX_SAMPLE_ATTEMPTS: usize = 10;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{kind} sample still degenerate after {attempts} attempts")]
    DegenerateSample { kind: &'static str, attempts: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {reason}")]
    BadManifest { path: String, reason: String },
    #[error("invalid synthesis config: {reason}")]
    BadConfig { reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Parameters of the synthetic population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Template subdivision level (1 to 5).
    pub level: u32,
    pub n_identities: usize,
    pub n_expressions: usize,
    /// Number of identity factors; the ground-truth dimensionality of the
    /// identity distribution.
    pub identity_factors: usize,
    /// Standard deviation of each identity coefficient (mm).
    pub identity_sigma: f64,
    /// Gaussian bumps per expression.
    pub bump_count: usize,
    /// Bump radius (mm).
    pub bump_width: f64,
    /// Peak bump displacement (mm, sign randomized).
    pub bump_amplitude: f64,
    pub seed: u64,
    /// Fraction of samples assigned to the training split.
    pub train_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            level: 3,
            n_identities: 300,
            n_expressions: 100,
            identity_factors: 8,
            identity_sigma: 3.0,
            bump_count: 3,
            bump_width: 25.0,
            bump_amplitude: 6.0,
            seed: 0,
            train_fraction: 0.9,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let mut reasons = Vec::new();
        if !(1..=5).contains(&self.level) {
            reasons.push(format!("level must be in [1, 5], got {}", self.level));
        }
        if self.n_identities == 0 {
            reasons.push("n_identities must be at least 1".into());
        }
        if self.identity_factors == 0 {
            reasons.push("identity_factors must be at least 1".into());
        }
        if !(self.identity_sigma > 0.0) || !self.identity_sigma.is_finite() {
            reasons.push(format!(
                "identity_sigma must be positive, got {}",
                self.identity_sigma
            ));
        }
        if !(self.bump_width > 0.0) || !self.bump_width.is_finite() {
            reasons.push(format!("bump_width must be positive, got {}", self.bump_width));
        }
        if !self.bump_amplitude.is_finite() || self.bump_amplitude < 0.0 {
            reasons.push(format!(
                "bump_amplitude must be non-negative, got {}",
                self.bump_amplitude
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            reasons.push(format!(
                "train_fraction must be in (0, 1), got {}",
                self.train_fraction
            ));
        }
        if reasons.is_empty() {
            Ok(())
        } else {
            Err(SynthError::BadConfig {
                reason: reasons.join("; "),
            })
        }
    }
}

/// One identity: a deformed template plus the coefficients that produced
/// it.
#[derive(Debug, Clone)]
pub struct IdentitySample {
    pub mesh: Mesh,
    /// Millimetres, one per identity factor.
    pub coefficients: Vec<f64>,
}

/// One Gaussian bump of an expression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BumpFactor {
    /// Seed vertex on the template.
    pub center: usize,
    /// Radius (mm).
    pub width: f64,
    /// Signed peak displacement along the normal (mm).
    pub amplitude: f64,
}

/// One expression: a pure deformation field on the template plus its
/// generating bumps.
#[derive(Debug, Clone)]
pub struct ExpressionSample {
    /// n x 3 displacement added to the template to exert the expression.
    pub deformation: Array2<f64>,
    pub bumps: Vec<BumpFactor>,
}

/// Low-frequency displacement fields spanning the identity space: the
/// first `d_id` non-constant Laplacian eigenvectors, rescaled to unit
/// root mean square so identity coefficients read directly in
/// millimetres, each directed along the vertex normals.
pub struct IdentityBasis {
    /// Per factor, a scalar field over the vertices (unit RMS).
    fields: Vec<Vec<f64>>,
    /// n x 3 unit vertex normals of the template.
    normals: Array2<f64>,
}

impl IdentityBasis {
    pub fn new(template: &Mesh, d_id: usize) -> Result<IdentityBasis, SynthError> {
        let op = SpectralOperator::from_mesh(template)?;
        let basis = op.eigendecomposition(d_id + 1)?;
        let n = template.n();
        let mut fields = Vec::with_capacity(d_id);
        for i in 1..=d_id {
            let mut field: Vec<f64> = (0..n).map(|v| basis.phi()[[v, i]]).collect();
            let rms = (field.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
            for x in &mut field {
                *x /= rms;
            }
            fields.push(field);
        }
        Ok(IdentityBasis {
            fields,
            normals: vertex_normals(template),
        })
    }

    pub fn factor_count(&self) -> usize {
        self.fields.len()
    }

    /// `template + sum_i c_i field_i (x) normal`.
    pub fn displacement(&self, coefficients: &[f64]) -> Array2<f64> {
        assert_eq!(coefficients.len(), self.fields.len(), "one coefficient per factor");
        let n = self.normals.nrows();
        let mut d = Array2::zeros((n, 3));
        for (c, field) in coefficients.iter().zip(&self.fields) {
            for v in 0..n {
                let s = c * field[v];
                for axis in 0..3 {
                    d[[v, axis]] += s * self.normals[[v, axis]];
                }
            }
        }
        d
    }
}

fn valid_deformation(template: &Mesh, deformation: &Array2<f64>) -> Result<Mesh, MeshError> {
    let mesh = template.with_vertices(template.vertices() + deformation)?;
    compute_geometry(&mesh)?;
    Ok(mesh)
}

/// Draws one identity: normal-directed eigenvector displacements with
/// coefficients from `N(0, sigma^2)`. Draws that degenerate the surface
/// are rejected and resampled.
pub fn sample_identity(
    template: &Mesh,
    basis: &IdentityBasis,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> Result<IdentitySample, SynthError> {
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let coefficients: Vec<f64> = (0..basis.factor_count())
            .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let deformation = basis.displacement(&coefficients);
        if let Ok(mesh) = valid_deformation(template, &deformation) {
            return Ok(IdentitySample { mesh, coefficients });
        }
    }
    Err(SynthError::DegenerateSample {
        kind: "identity",
        attempts: MAX_SAMPLE_ATTEMPTS,
    })
}

/// Draws one expression: `bump_count` Gaussian radial bumps at random
/// seed vertices, displacing along the vertex normals with a random sign.
/// Distance is Euclidean from the seed vertex, an adequate stand-in for
/// geodesic distance at widths well below the template radius.
pub fn sample_expression(
    template: &Mesh,
    normals: &Array2<f64>,
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ExpressionSample, SynthError> {
    let n = template.n();
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let bumps: Vec<BumpFactor> = (0..config.bump_count)
            .map(|_| BumpFactor {
                center: rng.random_range(0..n),
                width: config.bump_width,
                amplitude: if rng.random::<bool>() {
                    config.bump_amplitude
                } else {
                    -config.bump_amplitude
                },
            })
            .collect();
        let mut deformation = Array2::zeros((n, 3));
        for bump in &bumps {
            let center = template.vertex(bump.center);
            for v in 0..n {
                let p = template.vertex(v);
                let d2 = (0..3).map(|c| (p[c] - center[c]) * (p[c] - center[c])).sum::<f64>();
                let fall = bump.amplitude * (-d2 / (2.0 * bump.width * bump.width)).exp();
                for c in 0..3 {
                    deformation[[v, c]] += fall * normals[[v, c]];
                }
            }
        }
        if valid_deformation(template, &deformation).is_ok() {
            return Ok(ExpressionSample { deformation, bumps });
        }
    }
    Err(SynthError::DegenerateSample {
        kind: "expression",
        attempts: MAX_SAMPLE_ATTEMPTS,
    })
}

/// The generated population with its ground truth and split assignment.
pub struct Dataset {
    pub config: SynthConfig,
    pub template: Mesh,
    pub identities: Vec<IdentitySample>,
    pub expressions: Vec<ExpressionSample>,
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
    pub train_expressions: Vec<usize>,
    pub test_expressions: Vec<usize>,
}

fn split_indices(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(rng);
    let cut = ((fraction * n as f64).round() as usize).min(n);
    let mut train: Vec<usize> = indices[..cut].to_vec();
    let mut test: Vec<usize> = indices[cut..].to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

impl Dataset {
    pub fn meshes(&self, indices: &[usize]) -> Vec<Mesh> {
        indices.iter().map(|&i| self.identities[i].mesh.clone()).collect()
    }
}

/// Generates the full population from one seed: identities, expressions,
/// then the split shuffles, all from a single ChaCha stream in that
/// order. Identical configs produce bit-identical datasets.
pub fn generate_dataset(config: &SynthConfig) -> Result<Dataset, SynthError> {
    config.validate()?;
    let template = make_template(config.level);
    let basis = IdentityBasis::new(&template, config.identity_factors)?;
    let normals = vertex_normals(&template);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut identities = Vec::with_capacity(config.n_identities);
    for _ in 0..config.n_identities {
        identities.push(sample_identity(&template, &basis, config.identity_sigma, &mut rng)?);
    }
    let mut expressions = Vec::with_capacity(config.n_expressions);
    for _ in 0..config.n_expressions {
        expressions.push(sample_expression(&template, &normals, config, &mut rng)?);
    }
    let (train_identities, test_identities) =
        split_indices(config.n_identities, config.train_fraction, &mut rng);
    let (train_expressions, test_expressions) =
        split_indices(config.n_expressions, config.train_fraction, &mut rng);

    Ok(Dataset {
        config: config.clone(),
        template,
        identities,
        expressions,
        train_identities,
        test_identities,
        train_expressions,
        test_expressions,
    })
}

/// Everything needed to reproduce and interpret a dataset directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config: SynthConfig,
    /// Per identity, the factor coefficients (mm).
    pub identity_factors: Vec<Vec<f64>>,
    /// Per expression, the generating bumps.
    pub expression_factors: Vec<Vec<BumpFactor>>,
    pub train_identities: Vec<usize>,
    pub test_identities: Vec<usize>,
    pub train_expressions: Vec<usize>,
    pub test_expressions: Vec<usize>,
}

fn identity_file(i: usize) -> String {
    format!("identity_{i:04}.obj")
}

fn expression_file(i: usize) -> String {
    format!("expression_{i:04}.obj")
}

/// Writes `template.obj`, numbered identity and expression OBJs
/// (expressions exerted on the template), and `manifest.json`.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<(), SynthError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    save_mesh(&dataset.template, dir.join("template.obj"))?;
    for (i, id) in dataset.identities.iter().enumerate() {
        save_mesh(&id.mesh, dir.join(identity_file(i)))?;
    }
    for (i, expr) in dataset.expressions.iter().enumerate() {
        let mesh = dataset
            .template
            .with_vertices(dataset.template.vertices() + &expr.deformation)?;
        save_mesh(&mesh, dir.join(expression_file(i)))?;
    }
    let manifest = DatasetManifest {
        config: dataset.config.clone(),
        identity_factors: dataset.identities.iter().map(|s| s.coefficients.clone()).collect(),
        expression_factors: dataset.expressions.iter().map(|s| s.bumps.clone()).collect(),
        train_identities: dataset.train_identities.clone(),
        test_identities: dataset.test_identities.clone(),
        train_expressions: dataset.train_expressions.clone(),
        test_expressions: dataset.test_expressions.clone(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes to JSON");
    std::fs::write(&path, json + "\n").map_err(io_err(&path))
}

/// Reads a directory written by [`write_dataset`]. Vertex coordinates
/// round-trip through the OBJ's six decimals; factors and splits are
/// exact.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset, SynthError> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let json = std::fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&json).map_err(|e| SynthError::BadManifest {
            path: manifest_path.display().to_string(),
            reason: e.to_string(),
        })?;
    let bad = |reason: String| SynthError::BadManifest {
        path: manifest_path.display().to_string(),
        reason,
    };
    let template = load_mesh(dir.join("template.obj"))?;
    let mut identities = Vec::with_capacity(manifest.identity_factors.len());
    for (i, coefficients) in manifest.identity_factors.iter().enumerate() {
        let mesh = load_mesh(dir.join(identity_file(i)))?;
        if !mesh.shares_topology(&template) && mesh.faces() != template.faces() {
            return Err(bad(format!("identity {i} is not on the template topology")));
        }
        identities.push(IdentitySample {
            mesh,
            coefficients: coefficients.clone(),
        });
    }
    let mut expressions = Vec::with_capacity(manifest.expression_factors.len());
    for (i, bumps) in manifest.expression_factors.iter().enumerate() {
        let mesh = load_mesh(dir.join(expression_file(i)))?;
        if mesh.faces() != template.faces() {
            return Err(bad(format!("expression {i} is not on the template topology")));
        }
        expressions.push(ExpressionSample {
            deformation: mesh.vertices() - template.vertices(),
            bumps: bumps.clone(),
        });
    }
    for (name, split, n) in [
        ("train_identities", &manifest.train_identities, identities.len()),
        ("test_identities", &manifest.test_identities, identities.len()),
        ("train_expressions", &manifest.train_expressions, expressions.len()),
        ("test_expressions", &manifest.test_expressions, expressions.len()),
    ] {
        if split.iter().any(|&i| i >= n) {
            return Err(bad(format!("{name} references a sample beyond the {n} on disk")));
        }
    }
    Ok(Dataset {
        config: manifest.config,
        template,
        identities,
        expressions,
        train_identities: manifest.train_identities,
        test_identities: manifest.test_identities,
        train_expressions: manifest.train_expressions,
        test_expressions: manifest.test_expressions,
    })
}
