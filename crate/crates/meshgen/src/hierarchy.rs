//! Multi-level mesh decimation and the pooling maps between levels.
//!
//! Coarsening uses quadric-error edge collapses restricted to endpoint
//! placement: the collapsed edge keeps whichever endpoint has the lower
//! quadric cost, so every coarse vertex is one of the fine vertices and the
//! down-sampling map D is a pure row-selection matrix. Up-sampling U lifts
//! a coarse signal back to the fine level: kept vertices copy themselves,
//! discarded vertices interpolate the barycentric coordinates of their
//! closest point on the coarse surface. Ties in collapse cost are broken
//! by lowest vertex index so construction is deterministic.

use std::cmp::Ordering;
use std::collections::{BTreeSet, BinaryHeap};
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::laplacian::{LaplacianError, SpectralOperator};
use crate::mesh::{Mesh, MeshError, DEGENERATE_AREA};
use crate::sparse::CsrMatrix;

/// Weight multiplier for boundary-preservation quadrics relative to the
/// face-plane quadrics of the adjacent face.
pub const BOUNDARY_QUADRIC_WEIGHT: f64 = 1000.0;

/// Coarsest level is never decimated below this many vertices.
pub const MIN_LEVEL_VERTICES: usize = 4;

const MAGIC: &[u8; 4] = b"MGHY";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HierarchyError {
    #[error(transparent)]
    Laplacian(#[from] LaplacianError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a hierarchy file (bad magic)")]
    BadMagic { path: String },
    #[error("{path}: unsupported hierarchy format version {version}")]
    BadVersion { path: String, version: u32 },
    #[error("{path}: truncated or corrupt hierarchy file")]
    Corrupt { path: String },
}

/// The multiresolution structure shared by generator, discriminator, and
/// training: meshes from finest (level 0, the template) to coarsest, the
/// selection / barycentric maps between consecutive levels, and the
/// spectral operator of every level.
#[derive(Debug)]
pub struct Hierarchy {
    meshes: Vec<Mesh>,
    down: Vec<CsrMatrix>,
    up: Vec<CsrMatrix>,
    ops: Vec<SpectralOperator>,
}

impl Hierarchy {
    /// Number of meshes (levels of down-sampling plus one).
    pub fn num_levels(&self) -> usize {
        self.meshes.len()
    }

    pub fn mesh(&self, level: usize) -> &Mesh {
        &self.meshes[level]
    }

    pub fn template(&self) -> &Mesh {
        &self.meshes[0]
    }

    /// Selection matrix from level `l` to level `l + 1` (n_{l+1} x n_l).
    pub fn down(&self, l: usize) -> &CsrMatrix {
        &self.down[l]
    }

    /// Barycentric map from level `l + 1` to level `l` (n_l x n_{l+1}).
    pub fn up(&self, l: usize) -> &CsrMatrix {
        &self.up[l]
    }

    pub fn operator(&self, level: usize) -> &SpectralOperator {
        &self.ops[level]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.meshes.iter().map(|m| m.n()).collect()
    }
}

#[derive(Clone, Copy, Default)]
struct Quadric {
    /// Upper triangle of the symmetric 3x3 part: xx, xy, xz, yy, yz, zz.
    a: [f64; 6],
    b: [f64; 3],
    c: f64,
}

impl Quadric {
    fn from_plane(n: [f64; 3], d: f64, weight: f64) -> Self {
        Quadric {
            a: [
                weight * n[0] * n[0],
                weight * n[0] * n[1],
                weight * n[0] * n[2],
                weight * n[1] * n[1],
                weight * n[1] * n[2],
                weight * n[2] * n[2],
            ],
            b: [weight * d * n[0], weight * d * n[1], weight * d * n[2]],
            c: weight * d * d,
        }
    }

    fn add(&mut self, o: &Quadric) {
        for (x, y) in self.a.iter_mut().zip(&o.a) {
            *x += y;
        }
        for (x, y) in self.b.iter_mut().zip(&o.b) {
            *x += y;
        }
        self.c += o.c;
    }

    fn eval(&self, v: [f64; 3]) -> f64 {
        let av = [
            self.a[0] * v[0] + self.a[1] * v[1] + self.a[2] * v[2],
            self.a[1] * v[0] + self.a[3] * v[1] + self.a[4] * v[2],
            self.a[2] * v[0] + self.a[4] * v[1] + self.a[5] * v[2],
        ];
        v[0] * av[0] + v[1] * av[1] + v[2] * av[2]
            + 2.0 * (self.b[0] * v[0] + self.b[1] * v[1] + self.b[2] * v[2])
            + self.c
    }
}

struct Candidate {
    cost: f64,
    keep: usize,
    drop: usize,
    keep_version: u64,
    drop_version: u64,
}

impl Candidate {
    fn key(&self) -> (usize, usize) {
        (self.keep.min(self.drop), self.keep.max(self.drop))
    }
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    /// Reversed so the max-heap pops the cheapest candidate; cost ties fall
    /// back to the lowest vertex pair.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.key().cmp(&self.key()))
    }
}

fn vsub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn vdot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn vcross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn vnorm(a: [f64; 3]) -> f64 {
    vdot(a, a).sqrt()
}

struct Decimator {
    positions: Vec<[f64; 3]>,
    faces: Vec<[usize; 3]>,
    face_alive: Vec<bool>,
    vertex_alive: Vec<bool>,
    incident: Vec<BTreeSet<usize>>,
    quadrics: Vec<Quadric>,
    versions: Vec<u64>,
    heap: BinaryHeap<Candidate>,
    alive_vertices: usize,
}

impl Decimator {
    fn new(mesh: &Mesh) -> Self {
        let n = mesh.n();
        let positions: Vec<[f64; 3]> = (0..n).map(|i| mesh.vertex(i)).collect();
        let faces: Vec<[usize; 3]> = mesh.faces().to_vec();
        let mut incident = vec![BTreeSet::new(); n];
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                incident[v].insert(fi);
            }
        }
        let mut quadrics = vec![Quadric::default(); n];
        for f in &faces {
            let (p0, p1, p2) = (positions[f[0]], positions[f[1]], positions[f[2]]);
            let cr = vcross(vsub(p1, p0), vsub(p2, p0));
            let len = vnorm(cr);
            let area = 0.5 * len;
            let normal = [cr[0] / len, cr[1] / len, cr[2] / len];
            let q = Quadric::from_plane(normal, -vdot(normal, p0), area);
            for &v in f {
                quadrics[v].add(&q);
            }
        }
        let topo = mesh.topology();
        for (e, &(i, j)) in topo.edges().iter().enumerate() {
            if !topo.is_boundary_edge(e) {
                continue;
            }
            let fi = topo.edge_faces(e)[0].unwrap();
            let f = topo.faces()[fi];
            let (p0, p1, p2) = (positions[f[0]], positions[f[1]], positions[f[2]]);
            let fc = vcross(vsub(p1, p0), vsub(p2, p0));
            let area = 0.5 * vnorm(fc);
            let edge = vsub(positions[j], positions[i]);
            let bn = vcross(edge, fc);
            let len = vnorm(bn);
            if len < 1e-300 {
                continue;
            }
            let normal = [bn[0] / len, bn[1] / len, bn[2] / len];
            let q = Quadric::from_plane(
                normal,
                -vdot(normal, positions[i]),
                BOUNDARY_QUADRIC_WEIGHT * area,
            );
            quadrics[i].add(&q);
            quadrics[j].add(&q);
        }
        let mut d = Decimator {
            positions,
            faces,
            face_alive: vec![true; mesh.m()],
            vertex_alive: vec![true; n],
            incident,
            quadrics,
            versions: vec![0; n],
            heap: BinaryHeap::new(),
            alive_vertices: n,
        };
        for &(i, j) in topo.edges() {
            d.push_candidate(i, j);
        }
        d
    }

    fn neighbors(&self, v: usize) -> BTreeSet<usize> {
        let mut out = BTreeSet::new();
        for &fi in &self.incident[v] {
            for &u in &self.faces[fi] {
                if u != v {
                    out.insert(u);
                }
            }
        }
        out
    }

    fn push_candidate(&mut self, i: usize, j: usize) {
        let mut q = self.quadrics[i];
        q.add(&self.quadrics[j]);
        let cost_i = q.eval(self.positions[i]);
        let cost_j = q.eval(self.positions[j]);
        let (keep, drop, cost) = match cost_i.total_cmp(&cost_j) {
            Ordering::Less => (i, j, cost_i),
            Ordering::Greater => (j, i, cost_j),
            Ordering::Equal => (i.min(j), i.max(j), cost_i),
        };
        self.heap.push(Candidate {
            cost,
            keep,
            drop,
            keep_version: self.versions[keep],
            drop_version: self.versions[drop],
        });
    }

    /// Topological link condition: the common one-ring of the endpoints
    /// must be exactly the opposite vertices of the faces along the edge.
    /// Anything extra would be pinched into a non-manifold configuration.
    fn collapse_is_valid(&self, keep: usize, drop: usize) -> bool {
        let shared: Vec<usize> = self.incident[keep]
            .intersection(&self.incident[drop])
            .copied()
            .collect();
        if shared.is_empty() || shared.len() > 2 {
            return false;
        }
        let mut opposite = BTreeSet::new();
        for &fi in &shared {
            for &v in &self.faces[fi] {
                if v != keep && v != drop {
                    opposite.insert(v);
                }
            }
        }
        let common: BTreeSet<usize> = self
            .neighbors(keep)
            .intersection(&self.neighbors(drop))
            .copied()
            .collect();
        if common != opposite {
            return false;
        }
        // reject collapses that flatten a surviving face
        for &fi in &self.incident[drop] {
            if shared.contains(&fi) {
                continue;
            }
            let f = self.faces[fi].map(|v| if v == drop { keep } else { v });
            let (p0, p1, p2) = (self.positions[f[0]], self.positions[f[1]], self.positions[f[2]]);
            let area = 0.5 * vnorm(vcross(vsub(p1, p0), vsub(p2, p0)));
            if area < DEGENERATE_AREA {
                return false;
            }
        }
        true
    }

    fn run(&mut self, target: usize) {
        while self.alive_vertices > target {
            let Some(c) = self.heap.pop() else { break };
            if !self.vertex_alive[c.keep]
                || !self.vertex_alive[c.drop]
                || self.versions[c.keep] != c.keep_version
                || self.versions[c.drop] != c.drop_version
            {
                continue;
            }
            if !self.collapse_is_valid(c.keep, c.drop) {
                continue;
            }
            self.do_collapse(c.keep, c.drop);
        }
    }

    fn do_collapse(&mut self, keep: usize, drop: usize) {
        let shared: Vec<usize> = self.incident[keep]
            .intersection(&self.incident[drop])
            .copied()
            .collect();
        for fi in shared {
            self.face_alive[fi] = false;
            for v in self.faces[fi] {
                self.incident[v].remove(&fi);
            }
        }
        let moved: Vec<usize> = self.incident[drop].iter().copied().collect();
        for fi in moved {
            for v in self.faces[fi].iter_mut() {
                if *v == drop {
                    *v = keep;
                }
            }
            self.incident[keep].insert(fi);
        }
        self.incident[drop].clear();
        self.vertex_alive[drop] = false;
        self.alive_vertices -= 1;
        let q = self.quadrics[drop];
        self.quadrics[keep].add(&q);
        self.versions[keep] += 1;
        self.versions[drop] += 1;
        for u in self.neighbors(keep) {
            self.versions[u] += 1;
        }
        let nbrs = self.neighbors(keep);
        for u in nbrs.iter().copied() {
            self.push_candidate(keep, u);
            for w in self.neighbors(u) {
                if w != keep {
                    self.push_candidate(u, w);
                }
            }
        }
    }
}

/// Decimates `mesh` to approximately `target` vertices. Returns the coarse
/// mesh and the one-hot selection matrix D with `D x_fine = x_coarse`.
/// Stops early (above target) if no manifold-preserving collapse remains.
pub fn decimate(mesh: &Mesh, target: usize) -> Result<(Mesh, CsrMatrix), MeshError> {
    assert!(target >= MIN_LEVEL_VERTICES, "decimation target below {MIN_LEVEL_VERTICES}");
    let n = mesh.n();
    if target >= n {
        return Ok((mesh.clone(), CsrMatrix::identity(n)));
    }
    let mut dec = Decimator::new(mesh);
    dec.run(target);

    let kept: Vec<usize> = (0..n).filter(|&v| dec.vertex_alive[v]).collect();
    let mut remap = vec![usize::MAX; n];
    for (new, &old) in kept.iter().enumerate() {
        remap[old] = new;
    }
    let mut vertices = Array2::zeros((kept.len(), 3));
    for (new, &old) in kept.iter().enumerate() {
        for c in 0..3 {
            vertices[[new, c]] = dec.positions[old][c];
        }
    }
    let faces: Vec<[usize; 3]> = dec
        .faces
        .iter()
        .zip(&dec.face_alive)
        .filter(|(_, alive)| **alive)
        .map(|(f, _)| f.map(|v| remap[v]))
        .collect();
    let coarse = Mesh::new(vertices, faces)?;
    let triplets: Vec<(usize, usize, f64)> =
        kept.iter().enumerate().map(|(new, &old)| (new, old, 1.0)).collect();
    let d = CsrMatrix::from_triplets(kept.len(), n, &triplets);
    Ok((coarse, d))
}

/// Closest point of `p` on triangle `(a, b, c)`, as barycentric weights of
/// the three corners. Always inside the simplex.
fn closest_point_barycentric(p: [f64; 3], a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f64; 3] {
    let ab = vsub(b, a);
    let ac = vsub(c, a);
    let ap = vsub(p, a);
    let d1 = vdot(ab, ap);
    let d2 = vdot(ac, ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = vsub(p, b);
    let d3 = vdot(ab, bp);
    let d4 = vdot(ac, bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = vsub(p, c);
    let d5 = vdot(ab, cp);
    let d6 = vdot(ac, cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

/// Barycentric up-sampling map U (n_fine x n_coarse): kept vertices copy
/// themselves, discarded vertices take the barycentric weights of their
/// closest point on the coarse surface.
pub fn barycentric_upsample_map(fine: &Mesh, coarse: &Mesh, d: &CsrMatrix) -> CsrMatrix {
    assert_eq!(d.nrows(), coarse.n());
    assert_eq!(d.ncols(), fine.n());
    let mut kept_of_fine = vec![None; fine.n()];
    for (row, col, _) in d.triplets() {
        kept_of_fine[col] = Some(row);
    }
    let mut triplets = Vec::new();
    for vf in 0..fine.n() {
        if let Some(vc) = kept_of_fine[vf] {
            triplets.push((vf, vc, 1.0));
            continue;
        }
        let p = fine.vertex(vf);
        let mut best = (f64::INFINITY, 0usize, [0.0f64; 3]);
        for (fi, f) in coarse.faces().iter().enumerate() {
            let (a, b, c) = (coarse.vertex(f[0]), coarse.vertex(f[1]), coarse.vertex(f[2]));
            let bary = closest_point_barycentric(p, a, b, c);
            let q = [
                bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
                bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
                bary[0] * a[2] + bary[1] * b[2] + bary[2] * c[2],
            ];
            let dist = vnorm(vsub(p, q));
            if dist < best.0 {
                best = (dist, fi, bary);
            }
        }
        let f = coarse.faces()[best.1];
        let total: f64 = best.2.iter().sum();
        for (corner, &w) in f.iter().zip(&best.2) {
            if w > 0.0 {
                triplets.push((vf, *corner, w / total));
            }
        }
    }
    CsrMatrix::from_triplets(fine.n(), coarse.n(), &triplets)
}

/// Chains `levels` rounds of decimation from the template, keeping the
/// in-between meshes, selection and up-sampling maps, and per-level
/// spectral operators. Per-level targets are n / factor rounded, floored
/// at [`MIN_LEVEL_VERTICES`].
pub fn build_hierarchy(
    template: &Mesh,
    levels: usize,
    factor: f64,
) -> Result<Hierarchy, HierarchyError> {
    assert!(factor > 1.0, "decimation factor must exceed 1");
    let mut meshes = vec![template.clone()];
    let mut down = Vec::with_capacity(levels);
    let mut up = Vec::with_capacity(levels);
    for l in 0..levels {
        let fine = &meshes[l];
        let target = ((fine.n() as f64 / factor).round() as usize).max(MIN_LEVEL_VERTICES);
        let (coarse, d) = decimate(fine, target.min(fine.n()))?;
        let u = barycentric_upsample_map(fine, &coarse, &d);
        down.push(d);
        up.push(u);
        meshes.push(coarse);
    }
    let mut ops = Vec::with_capacity(meshes.len());
    for m in &meshes {
        ops.push(SpectralOperator::from_mesh(m)?);
    }
    Ok(Hierarchy { meshes, down, up, ops })
}

pub(crate) struct ByteWriter {
    pub(crate) buf: Vec<u8>,
}

impl ByteWriter {
    pub(crate) fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }
    pub(crate) fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn string(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn sparse(&mut self, m: &CsrMatrix) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        self.u64(m.nnz() as u64);
        for (r, c, v) in m.triplets() {
            self.u64(r as u64);
            self.u64(c as u64);
            self.f64(v);
        }
    }
}

pub(crate) struct ByteReader<'a> {
    pub(crate) buf: &'a [u8],
    pub(crate) pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }
    pub(crate) fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
    pub(crate) fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    pub(crate) fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn string(&mut self) -> Option<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).ok()
    }
    fn sparse(&mut self) -> Option<CsrMatrix> {
        let nrows = self.u64()? as usize;
        let ncols = self.u64()? as usize;
        let nnz = self.u64()? as usize;
        let mut triplets = Vec::with_capacity(nnz);
        for _ in 0..nnz {
            let r = self.u64()? as usize;
            let c = self.u64()? as usize;
            let v = self.f64()?;
            if r >= nrows || c >= ncols {
                return None;
            }
            triplets.push((r, c, v));
        }
        Some(CsrMatrix::from_triplets(nrows, ncols, &triplets))
    }
}

impl Hierarchy {
    /// Serializes levels, maps, and per-level lambda_n to a binary sidecar.
    /// Layout: magic "MGHY", format version, level count; per level the
    /// vertex coordinates and face list; per transition the D and U
    /// triplets; per level lambda_n. All integers are little-endian u64
    /// (u32 for the version and level count).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HierarchyError> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        std::fs::write(path, &bytes).map_err(|source| HierarchyError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter { buf: Vec::new() };
        w.buf.extend_from_slice(MAGIC);
        w.u32(FORMAT_VERSION);
        w.u32(self.meshes.len() as u32);
        for m in &self.meshes {
            w.u64(m.n() as u64);
            w.u64(m.m() as u64);
            for i in 0..m.n() {
                let v = m.vertex(i);
                w.f64(v[0]);
                w.f64(v[1]);
                w.f64(v[2]);
            }
            for f in m.faces() {
                w.u64(f[0] as u64);
                w.u64(f[1] as u64);
                w.u64(f[2] as u64);
            }
        }
        for l in 0..self.down.len() {
            w.sparse(&self.down[l]);
            w.sparse(&self.up[l]);
        }
        for op in &self.ops {
            w.f64(op.lambda_max());
        }
        w.buf
    }

    /// Reads a sidecar written by [`Hierarchy::save`]. Meshes are
    /// re-validated; weight and mass matrices are recomputed from the
    /// stored geometry (cheap), only lambda_n is reused as stored.
    pub fn load(path: impl AsRef<Path>) -> Result<Hierarchy, HierarchyError> {
        let path = path.as_ref();
        let pstr = path.display().to_string();
        let mut file = std::fs::File::open(path).map_err(|source| HierarchyError::Io {
            path: pstr.clone(),
            source,
        })?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|source| HierarchyError::Io {
            path: pstr.clone(),
            source,
        })?;
        Self::from_bytes(&bytes, &pstr)
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Hierarchy, HierarchyError> {
        let corrupt = || HierarchyError::Corrupt { path: origin.to_string() };
        let mut r = ByteReader { buf: bytes, pos: 0 };
        if r.take(4) != Some(MAGIC) {
            return Err(HierarchyError::BadMagic { path: origin.to_string() });
        }
        let version = r.u32().ok_or_else(corrupt)?;
        if version != FORMAT_VERSION {
            return Err(HierarchyError::BadVersion { path: origin.to_string(), version });
        }
        let num_levels = r.u32().ok_or_else(corrupt)? as usize;
        if num_levels == 0 {
            return Err(corrupt());
        }
        let mut meshes = Vec::with_capacity(num_levels);
        for _ in 0..num_levels {
            let n = r.u64().ok_or_else(corrupt)? as usize;
            let m = r.u64().ok_or_else(corrupt)? as usize;
            let mut vertices = Array2::zeros((n, 3));
            for i in 0..n {
                for c in 0..3 {
                    vertices[[i, c]] = r.f64().ok_or_else(corrupt)?;
                }
            }
            let mut faces = Vec::with_capacity(m);
            for _ in 0..m {
                let f = [
                    r.u64().ok_or_else(corrupt)? as usize,
                    r.u64().ok_or_else(corrupt)? as usize,
                    r.u64().ok_or_else(corrupt)? as usize,
                ];
                faces.push(f);
            }
            meshes.push(Mesh::new(vertices, faces)?);
        }
        let mut down = Vec::with_capacity(num_levels - 1);
        let mut up = Vec::with_capacity(num_levels - 1);
        for l in 0..num_levels - 1 {
            let d = r.sparse().ok_or_else(corrupt)?;
            let u = r.sparse().ok_or_else(corrupt)?;
            if d.nrows() != meshes[l + 1].n()
                || d.ncols() != meshes[l].n()
                || u.nrows() != meshes[l].n()
                || u.ncols() != meshes[l + 1].n()
            {
                return Err(corrupt());
            }
            down.push(d);
            up.push(u);
        }
        let mut ops = Vec::with_capacity(num_levels);
        for m in &meshes {
            let geom = crate::mesh::compute_geometry(m)?;
            let w = crate::laplacian::cotangent_weights(m, &geom);
            let mass = crate::laplacian::mass_matrix(&geom);
            let lambda_max = r.f64().ok_or_else(corrupt)?;
            ops.push(SpectralOperator::from_parts(w, mass, lambda_max));
        }
        if r.pos != bytes.len() {
            return Err(corrupt());
        }
        Ok(Hierarchy { meshes, down, up, ops })
    }
}

/// Hex SHA-256 of a file's bytes. Checkpoints store this for the hierarchy
/// they were trained with, so mismatched sidecars are rejected at load.
pub fn file_checksum(path: impl AsRef<Path>) -> std::io::Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(bytes_checksum(&bytes))
}

pub fn bytes_checksum(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes each level as `level_0.obj`, `level_1.obj`, ... for inspection.
pub fn export_level_objs(h: &Hierarchy, dir: impl AsRef<Path>) -> Result<(), MeshError> {
    let dir = dir.as_ref();
    for (l, m) in h.meshes.iter().enumerate() {
        crate::mesh::save_mesh(m, dir.join(format!("level_{l}.obj")))?;
    }
    Ok(())
}
