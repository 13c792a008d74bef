//! Triangle mesh representation, geometry quantities, and OBJ I/O.
//!
//! Topology (faces, edges, adjacency) is fixed after construction and shared
//! across dataset samples via [`std::sync::Arc`]; only vertex coordinates
//! vary. Coordinates are in millimetres.

use std::collections::HashMap;
use std::fmt;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use thiserror::Error;

/// Face areas below this (mm^2) make the cotangent weights unreliable.
pub const DEGENERATE_AREA: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("face {face} has vertex index {index} out of range (n = {n})")]
    IndexOutOfRange { face: usize, index: usize, n: usize },
    #[error("face {face} is degenerate: repeated vertex index")]
    RepeatedIndex { face: usize },
    #[error("edge ({a}, {b}) belongs to more than two faces")]
    NonManifoldEdge { a: usize, b: usize },
    #[error("face {face} is degenerate: area {area:.3e} mm^2 below {DEGENERATE_AREA:.0e}")]
    DegenerateFace { face: usize, area: f64 },
    #[error("vertex matrix must be n x 3, got {rows} x {cols}")]
    BadVertexShape { rows: usize, cols: usize },
}

/// Fixed connectivity: faces, canonical undirected edges, edge-face adjacency.
#[derive(Debug)]
pub struct Topology {
    faces: Vec<[usize; 3]>,
    /// Canonical (lo, hi) vertex pairs, sorted lexicographically.
    edges: Vec<(usize, usize)>,
    /// Per edge: one or two adjacent face ids.
    edge_faces: Vec<[Option<usize>; 2]>,
    edge_index: HashMap<(usize, usize), usize>,
    n: usize,
}

impl Topology {
    fn build(n: usize, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v >= n {
                    return Err(MeshError::IndexOutOfRange { face: fi, index: v, n });
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(MeshError::RepeatedIndex { face: fi });
            }
        }
        let mut pairs: Vec<((usize, usize), usize)> = Vec::with_capacity(faces.len() * 3);
        for (fi, f) in faces.iter().enumerate() {
            for k in 0..3 {
                let (a, b) = (f[k], f[(k + 1) % 3]);
                pairs.push(((a.min(b), a.max(b)), fi));
            }
        }
        pairs.sort_unstable();
        let mut edges = Vec::new();
        let mut edge_faces: Vec<[Option<usize>; 2]> = Vec::new();
        let mut edge_index = HashMap::new();
        for (key, fi) in pairs {
            if edges.last() == Some(&key) {
                let ef = edge_faces.last_mut().unwrap();
                if ef[1].is_some() {
                    return Err(MeshError::NonManifoldEdge { a: key.0, b: key.1 });
                }
                ef[1] = Some(fi);
            } else {
                edge_index.insert(key, edges.len());
                edges.push(key);
                edge_faces.push([Some(fi), None]);
            }
        }
        Ok(Topology { faces, edges, edge_faces, edge_index, n })
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn edge_id(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_index.get(&(a.min(b), a.max(b))).copied()
    }

    /// Adjacent faces of edge `e`: `[Some(f0), Some(f1)]` interior, one `None` boundary.
    pub fn edge_faces(&self, e: usize) -> [Option<usize>; 2] {
        self.edge_faces[e]
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.edge_faces[e][1].is_none()
    }

    /// One-ring vertex neighborhoods, sorted ascending.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.n];
        for &(a, b) in &self.edges {
            nbrs[a].push(b);
            nbrs[b].push(a);
        }
        for v in &mut nbrs {
            v.sort_unstable();
        }
        nbrs
    }
}

/// A fixed-topology triangle mesh embedded in 3D.
#[derive(Debug, Clone)]
pub struct Mesh {
    vertices: Array2<f64>,
    topo: Arc<Topology>,
}

impl Mesh {
    pub fn new(vertices: Array2<f64>, faces: Vec<[usize; 3]>) -> Result<Self, MeshError> {
        if vertices.ncols() != 3 {
            return Err(MeshError::BadVertexShape {
                rows: vertices.nrows(),
                cols: vertices.ncols(),
            });
        }
        let topo = Topology::build(vertices.nrows(), faces)?;
        Ok(Mesh { vertices, topo: Arc::new(topo) })
    }

    /// Same topology, new embedding. This is how dataset samples are made.
    pub fn with_vertices(&self, vertices: Array2<f64>) -> Result<Self, MeshError> {
        if vertices.nrows() != self.n() || vertices.ncols() != 3 {
            return Err(MeshError::BadVertexShape {
                rows: vertices.nrows(),
                cols: vertices.ncols(),
            });
        }
        Ok(Mesh { vertices, topo: Arc::clone(&self.topo) })
    }

    pub fn n(&self) -> usize {
        self.vertices.nrows()
    }

    pub fn m(&self) -> usize {
        self.topo.faces.len()
    }

    pub fn vertices(&self) -> &Array2<f64> {
        &self.vertices
    }

    pub fn vertex(&self, i: usize) -> [f64; 3] {
        [self.vertices[[i, 0]], self.vertices[[i, 1]], self.vertices[[i, 2]]]
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        self.topo.faces()
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topo
    }

    pub fn shares_topology(&self, other: &Mesh) -> bool {
        Arc::ptr_eq(&self.topo, &other.topo)
    }
}

/// Per-edge lengths, per-face areas, per-vertex barycentric area elements.
#[derive(Debug, Clone)]
pub struct MeshGeometry {
    pub edge_lengths: Vec<f64>,
    pub face_areas: Vec<f64>,
    pub vertex_areas: Vec<f64>,
}

impl MeshGeometry {
    pub fn total_area(&self) -> f64 {
        self.face_areas.iter().sum()
    }
}

fn sub(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: [f64; 3]) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Edge lengths, face areas (cross product), vertex areas a_i = (1/3) of the
/// incident face areas. Rejects degenerate faces.
pub fn compute_geometry(mesh: &Mesh) -> Result<MeshGeometry, MeshError> {
    let topo = mesh.topology();
    let mut edge_lengths = Vec::with_capacity(topo.edges().len());
    for &(a, b) in topo.edges() {
        edge_lengths.push(norm(sub(mesh.vertex(a), mesh.vertex(b))));
    }
    let mut face_areas = Vec::with_capacity(mesh.m());
    let mut vertex_areas = vec![0.0; mesh.n()];
    for (fi, f) in mesh.faces().iter().enumerate() {
        let (p0, p1, p2) = (mesh.vertex(f[0]), mesh.vertex(f[1]), mesh.vertex(f[2]));
        let area = 0.5 * norm(cross(sub(p1, p0), sub(p2, p0)));
        if area < DEGENERATE_AREA {
            return Err(MeshError::DegenerateFace { face: fi, area });
        }
        face_areas.push(area);
        for &v in f {
            vertex_areas[v] += area / 3.0;
        }
    }
    Ok(MeshGeometry { edge_lengths, face_areas, vertex_areas })
}

struct ObjLine<'a> {
    path: &'a str,
    line: usize,
}

impl ObjLine<'_> {
    fn err(&self, msg: impl fmt::Display) -> MeshError {
        MeshError::Parse {
            path: self.path.to_string(),
            line: self.line,
            msg: msg.to_string(),
        }
    }
}

/// Reads an ASCII OBJ. Only `v` and triangular `f` records are used;
/// normals, texcoords, and grouping records are ignored.
pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|source| MeshError::Io {
        path: path_str.clone(),
        source,
    })?;
    let reader = BufReader::new(file);

    let mut verts: Vec<[f64; 3]> = Vec::new();
    let mut faces: Vec<[usize; 3]> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let ctx = ObjLine { path: &path_str, line: lineno + 1 };
        let line = line.map_err(|source| MeshError::Io { path: path_str.clone(), source })?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut tok = line.split_whitespace();
        match tok.next() {
            Some("v") => {
                let mut coord = [0.0f64; 3];
                for c in &mut coord {
                    let t = tok.next().ok_or_else(|| ctx.err("vertex with fewer than 3 coordinates"))?;
                    *c = t
                        .parse()
                        .map_err(|_| ctx.err(format_args!("bad coordinate '{t}'")))?;
                }
                verts.push(coord);
            }
            Some("f") => {
                let refs: Vec<&str> = tok.collect();
                if refs.len() != 3 {
                    return Err(ctx.err(format_args!("non-triangle face ({} vertices)", refs.len())));
                }
                let mut idx = [0usize; 3];
                for (k, r) in refs.iter().enumerate() {
                    // `f v`, `f v/t`, `f v//n`, `f v/t/n` all start with the vertex index
                    let first = r.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|_| ctx.err(format_args!("bad face index '{r}'")))?;
                    if i < 1 || i as usize > verts.len() {
                        return Err(ctx.err(format_args!(
                            "face index {i} out of range (have {} vertices)",
                            verts.len()
                        )));
                    }
                    idx[k] = (i - 1) as usize;
                }
                faces.push(idx);
            }
            _ => {} // vn, vt, o, g, s, mtllib, usemtl, ...
        }
    }
    let n = verts.len();
    let mut vertices = Array2::zeros((n, 3));
    for (i, v) in verts.iter().enumerate() {
        vertices[[i, 0]] = v[0];
        vertices[[i, 1]] = v[1];
        vertices[[i, 2]] = v[2];
    }
    Mesh::new(vertices, faces)
}

/// Area-weighted unit vertex normals, oriented by the face winding. A
/// vertex whose incident faces cancel out keeps a zero normal.
pub fn vertex_normals(mesh: &Mesh) -> Array2<f64> {
    let mut normals = Array2::<f64>::zeros((mesh.n(), 3));
    for f in mesh.faces() {
        let a = mesh.vertex(f[0]);
        let b = mesh.vertex(f[1]);
        let c = mesh.vertex(f[2]);
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        // cross product length is twice the face area, so summing the raw
        // crosses is already the area weighting
        let cross = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        for &i in f {
            for c in 0..3 {
                normals[[i, c]] += cross[c];
            }
        }
    }
    for mut row in normals.rows_mut() {
        let norm = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if norm > 1e-30 {
            row.mapv_inplace(|x| x / norm);
        }
    }
    normals
}

/// Writes an ASCII OBJ. Coordinates use shortest round-trip formatting,
/// so a save/load cycle reproduces every vertex bit for bit and training
/// on reloaded data matches training on in-memory data.
pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let wrap = |source| MeshError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::create(path).map_err(wrap)?;
    let mut w = BufWriter::new(file);
    let mut write = || -> std::io::Result<()> {
        for i in 0..mesh.n() {
            let v = mesh.vertex(i);
            writeln!(w, "v {} {} {}", v[0], v[1], v[2])?;
        }
        for f in mesh.faces() {
            writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1)?;
        }
        w.flush()
    };
    write().map_err(wrap)
}
