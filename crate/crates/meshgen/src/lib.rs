//! Generative modelling of fixed-topology triangle meshes.
//!
//! The pipeline: meshes carry per-vertex 3D coordinates on a shared graph
//! ([`mesh`]), a discrete Laplace operator turns that graph into a spectral
//! domain ([`laplacian`]), polynomial spectral filters become learnable
//! convolution layers ([`models`]) differentiated by a small reverse-mode
//! tape ([`diffcore`]), meshes are coarsened into a multiresolution
//! hierarchy ([`hierarchy`]), an adversarial autoencoder pair is trained
//! with a boundary-equilibrium objective ([`training`]), and generated
//! shapes are scored against held-out data ([`eval`]). A synthetic face
//! distribution ([`synthdata`]) makes the whole loop runnable without any
//! external dataset.

pub mod sparse;
pub mod mesh;
pub mod laplacian;
pub mod hierarchy;
pub mod diffcore;
pub mod models;
pub mod synthdata;
pub mod training;
pub mod eval;
pub mod cli;
