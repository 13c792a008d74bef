//! Discrete Laplace operator on triangle meshes and its spectral machinery.
//!
//! The weight matrix W uses the distance-based form of the cotangent
//! weights: for an edge (i, j) and an adjacent triangle (i, j, k) with edge
//! lengths l and area A, the per-face contribution is
//! (-l_ij^2 + l_jk^2 + l_ki^2) / (8 A), which equals cot(angle at k) / 2.
//! Interior edges sum two such terms, boundary edges keep one. The diagonal
//! makes every row sum to zero. With the positive diagonal mass matrix A of
//! barycentric vertex areas, the operator used everywhere is
//!
//!   Delta = A^-1 (-W)
//!
//! whose generalized spectrum is real and non-negative. The sign flip is
//! deliberate: with positive off-diagonal weights, A^-1 W itself is negative
//! semidefinite, so -W is the positive form matching a non-negative
//! spectrum with a constant 0-eigenvector. All downstream formulas
//! (rescaling, Chebyshev filters, Fourier transforms) use this Delta.
//!
//! The rescaled operator `Delta~ = (2 / lambda_n) Delta - I` maps the
//! spectrum into [-1, 1], the natural domain of Chebyshev polynomials.
//! Fourier analysis uses the A-weighted transform `fhat = Phi^T A f`,
//! consistent with the A-orthonormality Phi^T A Phi = I.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mesh::{compute_geometry, Mesh, MeshError, MeshGeometry};
use crate::sparse::CsrMatrix;

/// Largest vertex count for the dense eigendecomposition reference path.
pub const DENSE_EIGEN_LIMIT: usize = 3000;

/// Relative tolerance on successive Rayleigh quotients in power iteration.
pub const POWER_ITERATION_TOL: f64 = 1e-6;

/// Iteration cap for power iteration.
pub const POWER_ITERATION_MAX: usize = 10_000;

/// Multiplier applied to the power-iteration estimate of lambda_n.
/// Overestimating the top eigenvalue keeps the rescaled spectrum inside
/// [-1, 1]; underestimating would push it outside.
pub const LAMBDA_MAX_SAFETY: f64 = 1.01;

#[derive(Debug, Error)]
pub enum LaplacianError {
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("mesh has {n} vertices, above the dense eigendecomposition limit {limit}; use the iterative operator path")]
    DenseLimitExceeded { n: usize, limit: usize },
    #[error("power iteration did not converge in {max_iters} iterations (last estimate {last:.6e})")]
    PowerIterationNoConvergence { max_iters: usize, last: f64 },
    #[error("spectral reference filter needs a full basis (k = n); got k = {k} for n = {n}")]
    PartialBasis { k: usize, n: usize },
    #[error("operator is {n} x {n} but input has {rows} rows")]
    ShapeMismatch { n: usize, rows: usize },
}

/// The fixed per-mesh operator bundle: weights, mass, and top eigenvalue.
#[derive(Debug, Clone)]
pub struct SpectralOperator {
    w: CsrMatrix,
    mass: Vec<f64>,
    lambda_max: f64,
}

impl SpectralOperator {
    pub fn from_mesh(mesh: &Mesh) -> Result<Self, LaplacianError> {
        let geom = compute_geometry(mesh)?;
        let w = cotangent_weights(mesh, &geom);
        let mass = mass_matrix(&geom);
        let lambda_max = max_eigenvalue(&w, &mass)?;
        Ok(SpectralOperator { w, mass, lambda_max })
    }

    /// Reassembles an operator from already-validated parts, e.g. when
    /// loading a hierarchy sidecar that stored lambda_n.
    pub(crate) fn from_parts(w: CsrMatrix, mass: Vec<f64>, lambda_max: f64) -> Self {
        SpectralOperator { w, mass, lambda_max }
    }

    pub fn n(&self) -> usize {
        self.mass.len()
    }

    pub fn weights(&self) -> &CsrMatrix {
        &self.w
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn lambda_max(&self) -> f64 {
        self.lambda_max
    }

    pub fn apply_rescaled(&self, x: &Array2<f64>) -> Result<Array2<f64>, LaplacianError> {
        apply_rescaled_laplacian(&self.w, &self.mass, self.lambda_max, x)
    }

    /// Materializes `Delta~ = (2 / lambda_n) A^-1 (-W) - I` as a sparse
    /// matrix. Same operator as [`Self::apply_rescaled`]; the explicit form
    /// is what the convolution layers multiply by.
    pub fn rescaled_csr(&self) -> CsrMatrix {
        let n = self.n();
        let mut triplets = Vec::with_capacity(self.w.nnz() + n);
        for (r, c, v) in self.w.triplets() {
            triplets.push((r, c, -2.0 * v / (self.lambda_max * self.mass[r])));
        }
        for i in 0..n {
            triplets.push((i, i, -1.0));
        }
        CsrMatrix::from_triplets(n, n, &triplets)
    }

    pub fn eigendecomposition(&self, k: usize) -> Result<EigenBasis, LaplacianError> {
        eigendecomposition(&self.w, &self.mass, k)
    }

    /// Writes `W.coo` and `A.coo` (row col value, one entry per line) into
    /// `dir` for offline inspection.
    pub fn write_debug_dump(&self, dir: impl AsRef<Path>) -> std::io::Result<()> {
        let dir = dir.as_ref();
        let mut wf = std::io::BufWriter::new(std::fs::File::create(dir.join("W.coo"))?);
        self.w.write_coo(&mut wf)?;
        wf.flush()?;
        let mut af = std::io::BufWriter::new(std::fs::File::create(dir.join("A.coo"))?);
        for (i, &a) in self.mass.iter().enumerate() {
            writeln!(af, "{} {} {:.17e}", i, i, a)?;
        }
        af.flush()
    }
}

/// Symmetric edge-weight matrix with zero row sums.
pub fn cotangent_weights(mesh: &Mesh, geom: &MeshGeometry) -> CsrMatrix {
    let topo = mesh.topology();
    let n = mesh.n();
    let sq = |x: f64| x * x;
    let mut triplets = Vec::with_capacity(topo.edges().len() * 2 + n);
    let mut diag = vec![0.0; n];
    for (e, &(i, j)) in topo.edges().iter().enumerate() {
        let lij2 = sq(geom.edge_lengths[e]);
        let mut w = 0.0;
        for fi in topo.edge_faces(e).into_iter().flatten() {
            let f = topo.faces()[fi];
            let k = f.into_iter().find(|&v| v != i && v != j).unwrap();
            let ljk2 = sq(geom.edge_lengths[topo.edge_id(j, k).unwrap()]);
            let lki2 = sq(geom.edge_lengths[topo.edge_id(k, i).unwrap()]);
            w += (-lij2 + ljk2 + lki2) / (8.0 * geom.face_areas[fi]);
        }
        triplets.push((i, j, w));
        triplets.push((j, i, w));
        diag[i] -= w;
        diag[j] -= w;
    }
    for (i, &d) in diag.iter().enumerate() {
        triplets.push((i, i, d));
    }
    CsrMatrix::from_triplets(n, n, &triplets)
}

/// Diagonal of the mass matrix: barycentric vertex areas.
pub fn mass_matrix(geom: &MeshGeometry) -> Vec<f64> {
    geom.vertex_areas.clone()
}

/// Largest generalized eigenvalue of (-W, A) by power iteration on
/// A^-1 (-W), reported with the [`LAMBDA_MAX_SAFETY`] margin. The returned
/// value dominates every Rayleigh quotient observed along the way.
pub fn max_eigenvalue(w: &CsrMatrix, mass: &[f64]) -> Result<f64, LaplacianError> {
    let n = mass.len();
    let mut rng = ChaCha8Rng::seed_from_u64(0x0131);
    // A random start vector has a component along the top eigenvector;
    // the all-ones vector would sit exactly in the operator's nullspace.
    let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() - 0.5).collect();
    let a_norm = |x: &[f64]| {
        x.iter()
            .zip(mass)
            .map(|(xi, ai)| ai * xi * xi)
            .sum::<f64>()
            .sqrt()
    };
    let nv = a_norm(&v);
    v.iter_mut().for_each(|x| *x /= nv);

    let mut best = 0.0f64;
    let mut prev = f64::NAN;
    for _ in 0..POWER_ITERATION_MAX {
        // u = (-W) v, Rayleigh quotient rho = v^T u / v^T A v with v A-normalized
        let mut u = vec![0.0; n];
        for i in 0..n {
            let (cols, vals) = w.row(i);
            let mut s = 0.0;
            for (c, wv) in cols.iter().zip(vals) {
                s -= wv * v[*c];
            }
            u[i] = s;
        }
        let rho: f64 = v.iter().zip(&u).map(|(vi, ui)| vi * ui).sum();
        best = best.max(rho);
        if !prev.is_nan() && (rho - prev).abs() <= POWER_ITERATION_TOL * rho.abs().max(1e-300) {
            return Ok(best * LAMBDA_MAX_SAFETY);
        }
        prev = rho;
        for i in 0..n {
            v[i] = u[i] / mass[i];
        }
        let nv = a_norm(&v);
        v.iter_mut().for_each(|x| *x /= nv);
    }
    Err(LaplacianError::PowerIterationNoConvergence {
        max_iters: POWER_ITERATION_MAX,
        last: best * LAMBDA_MAX_SAFETY,
    })
}

/// `(2 / lambda_n) A^-1 (-W) X - X` using sparse products only.
pub fn apply_rescaled_laplacian(
    w: &CsrMatrix,
    mass: &[f64],
    lambda_n: f64,
    x: &Array2<f64>,
) -> Result<Array2<f64>, LaplacianError> {
    let n = mass.len();
    if x.nrows() != n {
        return Err(LaplacianError::ShapeMismatch { n, rows: x.nrows() });
    }
    let wx = w.matmul_dense(x);
    let mut out = x.clone();
    for i in 0..n {
        let s = -2.0 / (lambda_n * mass[i]);
        for f in 0..x.ncols() {
            out[[i, f]] = s * wx[[i, f]] - x[[i, f]];
        }
    }
    Ok(out)
}

/// Generalized eigenvectors Phi (columns) with Phi^T A Phi = I and the
/// matching non-negative eigenvalues, ascending.
#[derive(Debug, Clone)]
pub struct EigenBasis {
    phi: Array2<f64>,
    lambda: Vec<f64>,
    mass: Vec<f64>,
}

impl EigenBasis {
    pub fn phi(&self) -> &Array2<f64> {
        &self.phi
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn k(&self) -> usize {
        self.lambda.len()
    }

    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    /// A-weighted analysis transform `fhat = Phi^T A f`.
    pub fn fourier(&self, f: &Array2<f64>) -> Result<Array2<f64>, LaplacianError> {
        if f.nrows() != self.n() {
            return Err(LaplacianError::ShapeMismatch { n: self.n(), rows: f.nrows() });
        }
        let mut af = f.clone();
        for (i, &a) in self.mass.iter().enumerate() {
            af.row_mut(i).mapv_inplace(|x| x * a);
        }
        Ok(self.phi.t().dot(&af))
    }

    /// Synthesis transform `f = Phi fhat`.
    pub fn inverse_fourier(&self, fhat: &Array2<f64>) -> Result<Array2<f64>, LaplacianError> {
        if fhat.nrows() != self.k() {
            return Err(LaplacianError::ShapeMismatch { n: self.k(), rows: fhat.nrows() });
        }
        Ok(self.phi.dot(fhat))
    }
}

/// Dense reference: k smallest generalized eigenpairs of (-W, A).
///
/// Solves the symmetric similarity form `B = A^-1/2 (-W) A^-1/2`, maps
/// eigenvectors back through `Phi = A^-1/2 U`, sorts ascending, and fixes
/// each eigenvector's sign so its largest-magnitude entry is positive.
pub fn eigendecomposition(
    w: &CsrMatrix,
    mass: &[f64],
    k: usize,
) -> Result<EigenBasis, LaplacianError> {
    let n = mass.len();
    if n > DENSE_EIGEN_LIMIT {
        return Err(LaplacianError::DenseLimitExceeded { n, limit: DENSE_EIGEN_LIMIT });
    }
    assert!(k <= n, "requested {k} eigenpairs from an {n}-vertex operator");
    let inv_sqrt: Vec<f64> = mass.iter().map(|a| 1.0 / a.sqrt()).collect();
    let mut b = DMatrix::<f64>::zeros(n, n);
    for (r, c, v) in w.triplets() {
        b[(r, c)] = -v * inv_sqrt[r] * inv_sqrt[c];
    }
    // exact symmetry guards the eigensolver against roundoff asymmetry
    for r in 0..n {
        for c in (r + 1)..n {
            let s = 0.5 * (b[(r, c)] + b[(c, r)]);
            b[(r, c)] = s;
            b[(c, r)] = s;
        }
    }
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));

    let mut phi = Array2::zeros((n, k));
    let mut lambda = Vec::with_capacity(k);
    for (col, &src) in order.iter().take(k).enumerate() {
        lambda.push(eig.eigenvalues[src]);
        let u = eig.eigenvectors.column(src);
        let mut dominant = 0;
        for i in 0..n {
            if u[i].abs() > u[dominant].abs() {
                dominant = i;
            }
        }
        let sign = if u[dominant] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            phi[[i, col]] = sign * u[i] * inv_sqrt[i];
        }
    }
    Ok(EigenBasis { phi, lambda, mass: mass.to_vec() })
}

/// Dense spectral filter `f' = Phi diag(ghat) Phi^T A f`; the oracle the
/// Chebyshev layers are tested against. Needs the complete basis.
pub fn spectral_filter_reference(
    f: &Array2<f64>,
    multipliers: &[f64],
    basis: &EigenBasis,
) -> Result<Array2<f64>, LaplacianError> {
    if basis.k() != basis.n() {
        return Err(LaplacianError::PartialBasis { k: basis.k(), n: basis.n() });
    }
    assert_eq!(multipliers.len(), basis.k(), "one multiplier per eigenvalue");
    let mut fhat = basis.fourier(f)?;
    for (i, &g) in multipliers.iter().enumerate() {
        fhat.row_mut(i).mapv_inplace(|x| x * g);
    }
    basis.inverse_fourier(&fhat)
}
