//! Acceptance gate: nine numbered criteria covering operator correctness,
//! gradients, hierarchy contracts, training dynamics, metric formulas,
//! relative model quality, latent tooling, and end-to-end determinism.
//! Each test prints one `acceptance N ...: PASS/FAIL` line (visible with
//! `cargo test --test acceptance -- --nocapture`) and then asserts.
//!
//! Criteria 5, 7, and 8 share one trained fixture: the default synthetic
//! dataset (300 identities, 642 vertices), 60-epoch adversarial runs at
//! latent widths 8 and 64, and a matched autoencoder baseline. It is
//! built once on first use (roughly forty-five minutes of CPU) and cached
//! in the target tmp directory for the life of the test process.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use cpu_time::ProcessTime;
use ndarray::{array, Array2};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshgen::eval::{
    self, decode_latent, fid_score, frechet_distance, generator_of, mean_vertex_distance,
    sample_uniform_latents, GaussianFit, InvertOptions,
};
use meshgen::hierarchy::{build_hierarchy, decimate, Hierarchy};
use meshgen::laplacian::{spectral_filter_reference, SpectralOperator};
use meshgen::mesh::Mesh;
use meshgen::models::{
    chebconv, decoder_forward, discriminator_forward, encoder_forward, init_autoencoder,
    init_generator, load_autoencoder, load_generator, ChebLayer, ChebLayerVars, HierarchyOps,
    LoadMode, ModelConfig,
};
use meshgen::synthdata::{generate_dataset, make_template, Dataset, SynthConfig};
use meshgen::training::{
    to_vertices, train_autoencoder, train_began, update_k, Checkpoint, TrainConfig, TrainReport,
    TrainSet, TrainedModel,
};

fn report(criterion: usize, name: &str, pass: bool, detail: String) {
    println!(
        "acceptance {criterion} ({name}): {} [{detail}]",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "criterion {criterion} ({name}) failed: {detail}");
}

fn randn(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random::<f64>() * 2.0 - 1.0)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

// ---------------------------------------------------------------------
// Shared trained fixture (criteria 5, 7, 8)
// ---------------------------------------------------------------------

struct Fixture {
    dataset: Dataset,
    hierarchy: Hierarchy,
    train_meshes: Vec<Mesh>,
    test_meshes: Vec<Mesh>,
    /// Narrow-bottleneck run (h = 8) exercised by the training-dynamics
    /// checks and latent tooling.
    config: TrainConfig,
    began: TrainReport,
    /// Full-capacity run (h = 64, the published architecture width) and
    /// its matched autoencoder baseline, exercised by the relative
    /// model-quality checks.
    config_h64: TrainConfig,
    began_h64: TrainReport,
    began_h64_epoch1: Checkpoint,
    ae_h64: TrainReport,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let started = Instant::now();
        let synth = SynthConfig { n_expressions: 2, ..SynthConfig::default() };
        let dataset = generate_dataset(&synth).expect("synthetic dataset");
        let hierarchy = build_hierarchy(&dataset.template, 4, 4.0).expect("hierarchy");
        let train_meshes = dataset.meshes(&dataset.train_identities);
        let test_meshes = dataset.meshes(&dataset.test_identities);
        let train = TrainSet::from_meshes(&dataset.template, &train_meshes).expect("train set");

        // Batch 2 keeps per-epoch compute identical while granting the
        // bounded L1 gradients eight times more optimizer steps than
        // batch 16 would, which this small run count needs to approach
        // the equilibrium ratio.
        let mut config = TrainConfig::default();
        config.model.bottleneck = 8;
        config.epochs = 60;
        config.batch_size = 2;
        let mut config_h64 = config.clone();
        config_h64.model.bottleneck = 64;

        let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_fixture");
        let began_dir = root.join("began_h8");
        let began64_dir = root.join("began_h64");
        let ae64_dir = root.join("ae_h64");
        std::fs::create_dir_all(&began_dir).expect("fixture dir");
        std::fs::create_dir_all(&began64_dir).expect("fixture dir");
        std::fs::create_dir_all(&ae64_dir).expect("fixture dir");

        let began = train_began(&hierarchy, &train, &config, &began_dir).expect("adversarial run");
        eprintln!("fixture: h=8 adversarial run done at {:.1} s", started.elapsed().as_secs_f64());
        let began_h64 =
            train_began(&hierarchy, &train, &config_h64, &began64_dir).expect("wide run");
        let began_h64_epoch1 =
            Checkpoint::load(began64_dir.join("checkpoint_epoch_0001.bin")).expect("epoch 1");
        eprintln!("fixture: h=64 adversarial run done at {:.1} s", started.elapsed().as_secs_f64());
        let ae_h64 =
            train_autoencoder(&hierarchy, &train, &config_h64, &ae64_dir).expect("baseline run");
        eprintln!(
            "acceptance fixture built in {:.1} s ({} identities, sizes {:?})",
            started.elapsed().as_secs_f64(),
            dataset.identities.len(),
            hierarchy.sizes()
        );
        Fixture {
            dataset,
            hierarchy,
            train_meshes,
            test_meshes,
            config,
            began,
            config_h64,
            began_h64,
            began_h64_epoch1,
            ae_h64,
        }
    })
}

// ---------------------------------------------------------------------
// 1. Laplacian correctness
// ---------------------------------------------------------------------

#[test]
fn acceptance_1_laplacian_correctness() {
    // Runtime budgets here and in criteria 2 through 4 are single-threaded
    // compute budgets, so they are measured as process CPU time; wall time
    // would also charge scheduler stalls caused by other load on the host.
    let started = ProcessTime::now();
    let mut failures = Vec::new();

    // One equilateral triangle with unit edges: every cotangent weight is
    // cot(60 deg) / 2 = 1 / (2 sqrt 3).
    let tri = Mesh::new(
        array![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 3f64.sqrt() / 2.0, 0.0]],
        vec![[0, 1, 2]],
    )
    .unwrap();
    let op = SpectralOperator::from_mesh(&tri).unwrap();
    let expected = 1.0 / (2.0 * 3f64.sqrt());
    for (i, j) in [(0, 1), (1, 2), (0, 2)] {
        let w = op.weights().get(i, j);
        if (w - expected).abs() > 1e-9 {
            failures.push(format!("weight ({i},{j}) = {w}, want {expected}"));
        }
    }

    // Closed mesh at the 642-vertex scale: zero row sums and a
    // non-negative sign-corrected spectrum with a vanishing first mode.
    let mesh = make_template(3);
    let op = SpectralOperator::from_mesh(&mesh).unwrap();
    let n = mesh.n();
    let mut row_sums = vec![0.0; n];
    for (i, _, v) in op.weights().triplets() {
        row_sums[i] += v;
    }
    let max_row = row_sums.iter().fold(0.0f64, |m, &s| m.max(s.abs()));
    if max_row > 1e-12 {
        failures.push(format!("max |row sum| = {max_row:.3e}"));
    }
    let basis = op.eigendecomposition(n).unwrap();
    let min_lambda = basis.lambda().iter().cloned().fold(f64::INFINITY, f64::min);
    if min_lambda < -1e-8 {
        failures.push(format!("min eigenvalue = {min_lambda:.3e}"));
    }
    if basis.lambda()[0].abs() > 1e-8 {
        failures.push(format!("lambda_1 = {:.3e}", basis.lambda()[0]));
    }

    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 1.0 {
        failures.push(format!("cpu time {elapsed:.2} s, budget 1 s"));
    }
    report(
        1,
        "laplacian correctness",
        failures.is_empty(),
        if failures.is_empty() {
            format!("n = {n}, max |row sum| = {max_row:.1e}, cpu time {elapsed:.2} s")
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 2. Spectral equivalence oracle
// ---------------------------------------------------------------------

#[test]
fn acceptance_2_spectral_equivalence() {
    let started = ProcessTime::now();
    let mesh = make_template(2);
    let op = SpectralOperator::from_mesh(&mesh).unwrap();
    let basis = op.eigendecomposition(mesh.n()).unwrap();
    let lap = meshgen::diffcore::SparseOp::new(op.rescaled_csr());
    let k = 6;
    let channels = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let mut worst = 0.0f64;

    for _ in 0..20 {
        let coeffs: Vec<f64> = (0..k).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let x0 = Array2::from_shape_fn((mesh.n(), channels), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        let layer = ChebLayer {
            theta: coeffs.iter().map(|&c| Array2::from_diag_elem(channels, c)).collect(),
            bias: Array2::zeros((1, channels)),
        };
        let mut tape = meshgen::diffcore::Tape::new();
        let x = tape.constant(x0.clone());
        let vars = ChebLayerVars::constant(&mut tape, &layer);
        let y = chebconv(&mut tape, &lap, x, &vars);

        // The same polynomial evaluated in the eigenbasis.
        let multipliers: Vec<f64> = basis
            .lambda()
            .iter()
            .map(|&l| {
                let lt = 2.0 * l / op.lambda_max() - 1.0;
                let (mut t_prev, mut t_cur) = (1.0, lt);
                let mut sum = coeffs[0];
                for c in &coeffs[1..] {
                    sum += c * t_cur;
                    (t_prev, t_cur) = (t_cur, 2.0 * lt * t_cur - t_prev);
                }
                sum
            })
            .collect();
        let reference = spectral_filter_reference(&x0, &multipliers, &basis).unwrap();

        let num = (tape.value(y) - &reference).mapv(|v| v * v).sum().sqrt();
        let den = reference.mapv(|v| v * v).sum().sqrt();
        worst = worst.max(num / den);
    }

    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst <= 1e-5 && elapsed < 10.0;
    report(
        2,
        "spectral equivalence",
        pass,
        format!("worst relative error {worst:.2e} over 20 draws, cpu time {elapsed:.1} s"),
    );
}

// ---------------------------------------------------------------------
// 3. Gradient suite
// ---------------------------------------------------------------------

#[test]
fn acceptance_3_gradient_suite() {
    use meshgen::diffcore::{check_gradients, SparseOp, Tape, Var};
    let started = ProcessTime::now();
    let mut worst: Vec<(String, f64)> = Vec::new();
    let mut record = |name: &str, err: f64| worst.push((name.to_string(), err));

    // Every tape primitive, each reduced to a scalar through sum.
    let a34 = randn(3, 4, 1);
    let b43 = randn(4, 3, 2);
    let b34 = randn(3, 4, 3);
    let row = randn(1, 4, 4);
    let spmat = {
        let m = meshgen::sparse::CsrMatrix::from_triplets(
            3,
            3,
            &[(0, 0, 0.7), (0, 2, -0.3), (1, 1, 1.2), (2, 0, 0.4), (2, 2, -0.9)],
        );
        SparseOp::new(m)
    };
    let cases: Vec<(&str, Box<dyn Fn(&mut Tape, Var) -> Var>, Array2<f64>)> = vec![
        (
            "matmul",
            Box::new({
                let b = b43.clone();
                move |t: &mut Tape, x: Var| {
                    let bv = t.constant(b.clone());
                    let y = t.matmul(x, bv);
                    t.sum(y)
                }
            }),
            a34.clone(),
        ),
        (
            "spmm",
            Box::new(move |t: &mut Tape, x: Var| {
                let y = t.spmm(&spmat, x);
                t.sum(y)
            }),
            randn(3, 2, 5),
        ),
        (
            "add",
            Box::new({
                let b = b34.clone();
                move |t: &mut Tape, x: Var| {
                    let bv = t.constant(b.clone());
                    let y = t.add(x, bv);
                    t.sum(y)
                }
            }),
            a34.clone(),
        ),
        (
            "add_row",
            Box::new({
                let r = row.clone();
                move |t: &mut Tape, x: Var| {
                    let rv = t.constant(r.clone());
                    let y = t.add_row(x, rv);
                    t.sum(y)
                }
            }),
            a34.clone(),
        ),
        (
            "sub",
            Box::new({
                let b = b34.clone();
                move |t: &mut Tape, x: Var| {
                    let bv = t.constant(b.clone());
                    let y = t.sub(x, bv);
                    t.sum(y)
                }
            }),
            a34.clone(),
        ),
        (
            "scale",
            Box::new(|t: &mut Tape, x: Var| {
                let y = t.scale(x, -1.7);
                t.sum(y)
            }),
            a34.clone(),
        ),
        (
            "transpose",
            Box::new({
                let b = b43.clone();
                move |t: &mut Tape, x: Var| {
                    let xt = t.transpose(x);
                    let bv = t.constant(b.t().to_owned());
                    let y = t.matmul(xt, bv);
                    t.sum(y)
                }
            }),
            a34.clone(),
        ),
        (
            "reshape",
            Box::new(|t: &mut Tape, x: Var| {
                let y = t.reshape(x, 4, 3);
                let s = t.elu(y);
                t.sum(s)
            }),
            a34.clone(),
        ),
        (
            "concat_cols",
            Box::new({
                let b = b34.clone();
                move |t: &mut Tape, x: Var| {
                    let bv = t.constant(b.clone());
                    let y = t.concat_cols(x, bv);
                    let s = t.elu(y);
                    t.sum(s)
                }
            }),
            a34.clone(),
        ),
        (
            "slice_cols",
            Box::new(|t: &mut Tape, x: Var| {
                let y = t.slice_cols(x, 1, 3);
                let s = t.elu(y);
                t.sum(s)
            }),
            a34.clone(),
        ),
        (
            "elu",
            Box::new(|t: &mut Tape, x: Var| {
                let y = t.elu(x);
                t.sum(y)
            }),
            a34.clone(),
        ),
        (
            "l1_loss",
            Box::new({
                let b = b34.clone();
                move |t: &mut Tape, x: Var| {
                    let bv = t.constant(b.clone());
                    t.l1_loss(x, bv)
                }
            }),
            a34.clone(),
        ),
        (
            "sum",
            Box::new(|t: &mut Tape, x: Var| t.sum(x)),
            a34.clone(),
        ),
    ];
    for (name, f, x0) in &cases {
        let rep = check_gradients(f, x0, 1e-6);
        record(name, rep.max_rel_error);
    }

    // Full networks on a mesh in the 50-162 vertex range, against both
    // the input signal and every parameter tensor.
    let (coarse, _) = decimate(&make_template(2), 50).unwrap();
    let hierarchy = build_hierarchy(&coarse, 2, 3.0).unwrap();
    let ops = HierarchyOps::new(&hierarchy);
    let cfg = ModelConfig { k: 3, channels: vec![4, 4], bottleneck: 4, skip_connections: true };
    let ae_params = init_autoencoder(&cfg, &hierarchy.sizes(), 31).unwrap();
    let gen_params = init_generator(&cfg, &hierarchy.sizes(), 32).unwrap();
    let n = hierarchy.sizes()[0];
    let x0 = randn(n, 3, 33);
    let z0 = randn(1, cfg.bottleneck, 34);
    let target = randn(n, 3, 35);

    let rep = check_gradients(
        |t, x| {
            let (vars, _) = load_autoencoder(t, &ae_params, LoadMode::Constant);
            let z = encoder_forward(t, &ops, &vars.encoder, x);
            t.sum(z)
        },
        &x0,
        1e-5,
    );
    record("encoder input", rep.max_rel_error);

    let rep = check_gradients(
        |t, z| {
            let (vars, _) = load_generator(t, &gen_params, LoadMode::Constant);
            let y = decoder_forward(t, &ops, &vars, z);
            t.sum(y)
        },
        &z0,
        1e-5,
    );
    record("decoder input", rep.max_rel_error);

    let rep = check_gradients(
        |t, x| {
            let (vars, _) = load_autoencoder(t, &ae_params, LoadMode::Constant);
            let y = discriminator_forward(t, &ops, &vars, x);
            let tv = t.constant(target.clone());
            t.l1_loss(y, tv)
        },
        &x0,
        1e-5,
    );
    record("discriminator input", rep.max_rel_error);

    let mut tensors = Vec::new();
    ae_params.for_each_tensor(&mut |name, t| tensors.push((name, t.clone())));
    for (idx, (name, value)) in tensors.iter().enumerate() {
        let rep = check_gradients(
            |t, var| {
                let (vars, _) =
                    load_autoencoder(t, &ae_params, LoadMode::Override { index: idx, var });
                let x = t.constant(x0.clone());
                let y = discriminator_forward(t, &ops, &vars, x);
                let tv = t.constant(target.clone());
                t.l1_loss(y, tv)
            },
            value,
            1e-5,
        );
        record(&format!("param {name}"), rep.max_rel_error);
    }

    let (worst_name, worst_err) = worst
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap();
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst_err <= 1e-4 && elapsed < 120.0;
    report(
        3,
        "gradient suite",
        pass,
        format!(
            "{} checks, worst {worst_err:.2e} ({worst_name}), cpu time {elapsed:.1} s",
            worst.len()
        ),
    );
}

// ---------------------------------------------------------------------
// 4. Hierarchy contracts
// ---------------------------------------------------------------------

#[test]
fn acceptance_4_hierarchy_contracts() {
    let started = ProcessTime::now();
    let mut failures = Vec::new();
    let template = make_template(3);
    let hierarchy = build_hierarchy(&template, 3, 4.0).unwrap();
    let sizes = hierarchy.sizes();
    if sizes.len() != 4 {
        failures.push(format!("expected 4 levels, got {:?}", sizes));
    }
    for l in 0..sizes.len() - 1 {
        let target = sizes[l] as f64 / 4.0;
        let actual = sizes[l + 1] as f64;
        if (actual - target).abs() > 0.1 * target {
            failures.push(format!(
                "level {} size {actual} outside 10% of {target:.1}",
                l + 1
            ));
        }
    }

    for l in 0..sizes.len() - 1 {
        let d = hierarchy.down(l);
        let u = hierarchy.up(l);
        // D rows one-hot.
        for i in 0..d.nrows() {
            let (cols, vals) = d.row(i);
            if cols.len() != 1 || vals[0] != 1.0 {
                failures.push(format!("D level {l} row {i} not one-hot"));
                break;
            }
        }
        // U rows inside the simplex.
        for i in 0..u.nrows() {
            let (_, vals) = u.row(i);
            let sum: f64 = vals.iter().sum();
            if vals.iter().any(|&v| v < -1e-15) || (sum - 1.0).abs() > 1e-12 {
                failures.push(format!("U level {l} row {i} not simplex (sum {sum})"));
                break;
            }
        }
        // Kept vertices survive a down-up round trip bit for bit.
        let x = randn(d.ncols(), 3, 100 + l as u64);
        let down = d.matmul_dense(&x);
        let back = u.matmul_dense(&down);
        for j in 0..d.nrows() {
            let (cols, _) = d.row(j);
            let fine = cols[0];
            for c in 0..3 {
                if back[[fine, c]] != x[[fine, c]] {
                    failures.push(format!("level {l} kept vertex {fine} not exact"));
                    break;
                }
            }
        }
    }

    let elapsed = started.elapsed().as_secs_f64();
    if elapsed >= 30.0 {
        failures.push(format!("runtime {elapsed:.1} s, budget 30 s"));
    }
    report(
        4,
        "hierarchy contracts",
        failures.is_empty(),
        if failures.is_empty() {
            format!("sizes {sizes:?}, runtime {elapsed:.1} s")
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 5. Adversarial training dynamics
// ---------------------------------------------------------------------

#[test]
fn acceptance_5_began_dynamics() {
    let mut failures = Vec::new();

    // Hand case: k starts at zero, gamma 0.7, lambda_k 0.001, real loss
    // 1.0, generated loss 0.5 -> k_1 = 0.001 * (0.7 - 0.5) = 0.0002.
    let k1 = update_k(0.0, 0.7, 0.001, 1.0, 0.5);
    if (k1 - 0.0002).abs() > 1e-12 {
        failures.push(format!("k hand case gave {k1}"));
    }

    let fx = fixture();
    let rows = &fx.began.rows;
    if rows.iter().any(|r| !(0.0..=1.0).contains(&r.k)) {
        failures.push("k left [0, 1]".into());
    }

    let epochs: Vec<usize> = {
        let mut e: Vec<usize> = rows.iter().map(|r| r.epoch).collect();
        e.dedup();
        e
    };
    let first10: Vec<usize> = epochs.iter().take(10).cloned().collect();
    let last10: Vec<usize> = epochs.iter().rev().take(10).cloned().collect();
    let mut m_first: Vec<f64> = rows
        .iter()
        .filter(|r| first10.contains(&r.epoch))
        .map(|r| r.m)
        .collect();
    let mut m_last: Vec<f64> = rows
        .iter()
        .filter(|r| last10.contains(&r.epoch))
        .map(|r| r.m)
        .collect();
    let m_first_med = median(&mut m_first);
    let m_last_med = median(&mut m_last);
    if m_last_med >= m_first_med {
        failures.push(format!(
            "convergence measure median did not fall: first {m_first_med:.4}, last {m_last_med:.4}"
        ));
    }

    let quarter = rows.len() - rows.len() / 4;
    let mut ratios: Vec<f64> = rows[quarter..]
        .iter()
        .map(|r| r.loss_g / r.loss_real)
        .collect();
    let ratio_med = median(&mut ratios);
    if !(0.45..=0.95).contains(&ratio_med) {
        failures.push(format!("loss ratio median {ratio_med:.3} outside [0.45, 0.95]"));
    }

    report(
        5,
        "adversarial dynamics",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "M median {m_first_med:.4} -> {m_last_med:.4}, loss ratio median {ratio_med:.3}"
            )
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 6. Metric formulas
// ---------------------------------------------------------------------

#[test]
fn acceptance_6_metric_formulas() {
    let mut failures = Vec::new();

    // Identical fits.
    let rows = randn(40, 3, 60);
    let fit = GaussianFit::from_rows(&rows).unwrap();
    let self_d = frechet_distance(&fit, &fit).unwrap();
    if self_d > 1e-8 {
        failures.push(format!("self distance {self_d:.3e}"));
    }

    // Pure mean shift: distance is the squared shift norm.
    let shift = array![0.3, -1.2, 0.5];
    let mut shifted = fit.clone();
    shifted.mean = &fit.mean + &shift;
    let d = frechet_distance(&fit, &shifted).unwrap();
    let want = shift.mapv(|v| v * v).sum();
    if (d - want).abs() > 1e-8 {
        failures.push(format!("mean shift case {d} vs {want}"));
    }

    // Commuting covariances: diag(1, 4) vs diag(4, 1) with equal means
    // gives trace(5 + 5 - 2 * (2 + 2)) = 2.
    let a = GaussianFit {
        mean: ndarray::Array1::zeros(2),
        cov: Array2::from_diag(&array![1.0, 4.0]),
    };
    let b = GaussianFit {
        mean: ndarray::Array1::zeros(2),
        cov: Array2::from_diag(&array![4.0, 1.0]),
    };
    let d = frechet_distance(&a, &b).unwrap();
    if (d - 2.0).abs() > 1e-8 {
        failures.push(format!("commuting case {d} vs 2"));
    }

    // Self-FID of an arbitrary displacement set.
    let mesh = make_template(1);
    let op = SpectralOperator::from_mesh(&mesh).unwrap();
    let basis = op.eigendecomposition(16).unwrap();
    let set: Vec<Array2<f64>> = (0..20).map(|i| randn(mesh.n(), 3, 200 + i)).collect();
    let self_fid = fid_score(&set, &set, &basis, 16).unwrap();
    if self_fid > 1e-8 {
        failures.push(format!("self FID {self_fid:.3e}"));
    }

    // Report order invariance on an untrained model: shuffling the mesh
    // sets must not change any field of the reports.
    let hierarchy = build_hierarchy(&make_template(2), 2, 4.0).unwrap();
    let ops = HierarchyOps::new(&hierarchy);
    let cfg = ModelConfig { k: 3, channels: vec![4, 4], bottleneck: 4, skip_connections: false };
    let model = TrainedModel::Began {
        generator: init_generator(&cfg, &hierarchy.sizes(), 1).unwrap(),
        discriminator: init_autoencoder(&cfg, &hierarchy.sizes(), 2).unwrap(),
    };
    let template = hierarchy.template().clone();
    let meshes: Vec<Mesh> = (0..6)
        .map(|i| {
            let noise = randn(template.n(), 3, 300 + i) * 0.5;
            template.with_vertices(template.vertices() + &noise).unwrap()
        })
        .collect();
    let mut shuffled = meshes.clone();
    shuffled.reverse();
    shuffled.swap(0, 2);

    let opts = InvertOptions { restarts: 2, iterations: 60, seed: 9, ..InvertOptions::default() };
    let g1 = eval::generalisation(&ops, &model, &template, 1.0, &meshes[..3], &opts, "m").unwrap();
    let g2 = eval::generalisation(
        &ops,
        &model,
        &template,
        1.0,
        &[meshes[2].clone(), meshes[0].clone(), meshes[1].clone()],
        &opts,
        "m",
    )
    .unwrap();
    if g1.to_json() != g2.to_json() {
        failures.push("generalisation report depends on test-set order".into());
    }

    let s1 =
        eval::specificity(&ops, &model, &template, 1.0, &meshes, &meshes, 40, 9, "m").unwrap();
    let s2 =
        eval::specificity(&ops, &model, &template, 1.0, &shuffled, &shuffled, 40, 9, "m").unwrap();
    if s1.to_json() != s2.to_json() {
        failures.push("specificity report depends on reference order".into());
    }
    let sorted = {
        let mut v = s1.per_sample.clone();
        v.sort_by(f64::total_cmp);
        v == s1.per_sample
    };
    if !sorted {
        failures.push("per-sample values not sorted".into());
    }

    report(
        6,
        "metric formulas",
        failures.is_empty(),
        if failures.is_empty() {
            format!("self FID {self_fid:.1e}, order-invariant reports over {} meshes", meshes.len())
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 7. Relative model quality
// ---------------------------------------------------------------------

#[test]
fn acceptance_7_relative_model_quality() {
    let fx = fixture();
    let mut failures = Vec::new();
    let ops = HierarchyOps::new(&fx.hierarchy);
    let template = &fx.dataset.template;
    let sigma = fx.began_h64.checkpoint.sigma;
    let n_spec = 200;

    let spec_trained = eval::specificity(
        &ops,
        &fx.began_h64.checkpoint.model,
        template,
        sigma,
        &fx.test_meshes,
        &fx.train_meshes,
        n_spec,
        7,
        "began-final",
    )
    .unwrap();

    let untrained = TrainedModel::Began {
        generator: init_generator(&fx.config_h64.model, &fx.hierarchy.sizes(), 999).unwrap(),
        discriminator: init_autoencoder(&fx.config_h64.model, &fx.hierarchy.sizes(), 998).unwrap(),
    };
    let spec_untrained = eval::specificity(
        &ops,
        &untrained,
        template,
        sigma,
        &fx.test_meshes,
        &fx.train_meshes,
        n_spec,
        7,
        "began-untrained",
    )
    .unwrap();
    if spec_trained.mean >= spec_untrained.mean {
        failures.push(format!(
            "trained specificity {:.3} not below untrained {:.3}",
            spec_trained.mean, spec_untrained.mean
        ));
    }

    // FID against the training set, final checkpoint vs epoch 1, with the
    // same latent draws.
    let m = 16;
    let basis = fx.hierarchy.operator(0).eigendecomposition(m).unwrap();
    let real: Vec<Array2<f64>> = fx
        .train_meshes
        .iter()
        .map(|mesh| mesh.vertices() - template.vertices())
        .collect();
    let decode_set = |ckpt: &Checkpoint| -> Vec<Array2<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        sample_uniform_latents(200, ckpt.config.model.bottleneck, &mut rng)
            .iter()
            .map(|z| &decode_latent(&ops, generator_of(&ckpt.model), z) * ckpt.sigma)
            .collect()
    };
    let fid_final = fid_score(&decode_set(&fx.began_h64.checkpoint), &real, &basis, m).unwrap();
    let fid_epoch1 = fid_score(&decode_set(&fx.began_h64_epoch1), &real, &basis, m).unwrap();
    if fid_final >= fid_epoch1 {
        failures.push(format!(
            "FID did not improve: final {fid_final:.2} vs epoch 1 {fid_epoch1:.2}"
        ));
    }

    // Soft directional check against the matched autoencoder baseline;
    // reported but not build-blocking at toy scale.
    let spec_ae = eval::specificity(
        &ops,
        &fx.ae_h64.checkpoint.model,
        template,
        sigma,
        &fx.test_meshes,
        &fx.train_meshes,
        n_spec,
        7,
        "ae-final",
    )
    .unwrap();
    let soft_pass = spec_trained.mean <= 1.25 * spec_ae.mean;
    println!(
        "acceptance 7 soft check (adversarial vs baseline specificity): {} [{:.3} vs 1.25 * {:.3}] (non-blocking)",
        if soft_pass { "PASS" } else { "FAIL" },
        spec_trained.mean,
        spec_ae.mean
    );

    report(
        7,
        "relative model quality",
        failures.is_empty(),
        if failures.is_empty() {
            format!(
                "specificity {:.3} < untrained {:.3}; FID {fid_final:.2} < epoch-1 {fid_epoch1:.2}",
                spec_trained.mean, spec_untrained.mean
            )
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 8. Latent tools
// ---------------------------------------------------------------------

#[test]
fn acceptance_8_latent_tools() {
    let mut failures = Vec::new();

    // Interpolation endpoints are bitwise exact.
    let z1 = randn(1, 8, 80);
    let z2 = randn(1, 8, 81);
    if eval::mix_latent(&z1, &z2, 0.0).unwrap() != z1 {
        failures.push("f = 0 endpoint not exact".into());
    }
    if eval::mix_latent(&z1, &z2, 1.0).unwrap() != z2 {
        failures.push("f = 1 endpoint not exact".into());
    }

    // Composition neutral cases.
    let template = make_template(1);
    let identity = template.vertices() + &(randn(template.n(), 3, 82) * 2.0);
    let expression = template.vertices() + &(randn(template.n(), 3, 83) * 0.5);
    let composed =
        eval::compose_identity_expression(&identity, template.vertices(), &template).unwrap();
    let max_dev = (&composed - &identity).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_dev > 1e-12 {
        failures.push(format!("neutral expression deviates by {max_dev:.2e}"));
    }
    let composed =
        eval::compose_identity_expression(template.vertices(), &expression, &template).unwrap();
    let max_dev = (&composed - &expression).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max_dev > 1e-12 {
        failures.push(format!("neutral identity deviates by {max_dev:.2e}"));
    }

    // Self-inversion of a generated mesh on the trained fixture.
    let fx = fixture();
    let ops = HierarchyOps::new(&fx.hierarchy);
    let generator = generator_of(&fx.began.checkpoint.model);
    let mut rng = ChaCha8Rng::seed_from_u64(84);
    let z0 = sample_uniform_latents(1, fx.config.model.bottleneck, &mut rng)
        .pop()
        .unwrap();
    let target = decode_latent(&ops, generator, &z0);
    let opts = InvertOptions { seed: 85, ..InvertOptions::default() };
    let (z_inv, _) = eval::invert_latent(&ops, generator, &target, &opts).unwrap();
    let recon = decode_latent(&ops, generator, &z_inv);
    let sigma = fx.began.checkpoint.sigma;
    let residual_mm = mean_vertex_distance(
        &to_vertices(&fx.dataset.template, &recon, sigma),
        &to_vertices(&fx.dataset.template, &target, sigma),
    );
    if residual_mm > 0.05 {
        failures.push(format!("self-inversion residual {residual_mm:.4} mm"));
    }

    report(
        8,
        "latent tools",
        failures.is_empty(),
        if failures.is_empty() {
            format!("endpoints exact, self-inversion residual {residual_mm:.2e} mm")
        } else {
            failures.join("; ")
        },
    );
}

// ---------------------------------------------------------------------
// 9. End-to-end determinism
// ---------------------------------------------------------------------

fn run_pipeline(root: &Path) -> Result<(), String> {
    let bin = env!("CARGO_BIN_EXE_meshgen");
    let run = |args: &[&str]| -> Result<(), String> {
        let out = Command::new(bin)
            .args(args)
            .env("MESHGEN_LOG", "quiet")
            .output()
            .map_err(|e| format!("spawn: {e}"))?;
        if out.status.success() {
            Ok(())
        } else {
            Err(format!(
                "{args:?} exited {:?}: {}",
                out.status.code(),
                String::from_utf8_lossy(&out.stderr)
            ))
        }
    };
    let p = |name: &str| root.join(name).display().to_string();
    run(&[
        "--run-dir", &p("data"),
        "--set", "synth.level=2",
        "--set", "synth.n_identities=40",
        "--set", "synth.n_expressions=4",
        "synth",
    ])?;
    run(&[
        "--run-dir", &p("hier"),
        "hierarchy",
        "--template", &p("data/template.obj"),
        "--levels", "2",
        "--factor", "4",
    ])?;
    run(&[
        "--run-dir", &p("train"),
        "--set", "model.k=3",
        "--set", "model.channels=6,6",
        "--set", "model.bottleneck=4",
        "--set", "train.batch_size=8",
        "train",
        "--dataset", &p("data"),
        "--hierarchy", &p("hier/hierarchy.bin"),
        "--mode", "began",
        "--epochs", "10",
    ])?;
    run(&[
        "--run-dir", &p("gen"),
        "generate",
        "--checkpoint", &p("train/checkpoint_final.bin"),
        "--hierarchy", &p("hier/hierarchy.bin"),
        "--count", "2",
        "--seed", "7",
    ])?;
    run(&[
        "--run-dir", &p("eval"),
        "--set", "eval.specificity_samples=20",
        "--set", "eval.fid_samples=20",
        "--set", "eval.invert_restarts=2",
        "--set", "eval.invert_iterations=40",
        "--set", "eval.feature_count=8",
        "evaluate",
        "--checkpoint", &p("train/checkpoint_final.bin"),
        "--hierarchy", &p("hier/hierarchy.bin"),
        "--dataset", &p("data"),
        "--metrics", "gen,spec,fid",
        "--seed", "5",
    ])?;
    Ok(())
}

fn collect_comparable(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().unwrap().to_string_lossy().to_string();
            let comparable = name.ends_with(".obj")
                || name.ends_with(".jsonl")
                || name == "manifest.json"
                || name == "metrics.csv"
                || name == "checkpoint_final.bin";
            if comparable {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                files.push((rel, std::fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn cli_autoencoder_train_then_evaluate_emits_mean_and_std() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("cli_ae_smoke");
    let _ = std::fs::remove_dir_all(&root);
    let bin = env!("CARGO_BIN_EXE_meshgen");
    let p = |name: &str| root.join(name).display().to_string();
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .args(args)
            .env("MESHGEN_LOG", "quiet")
            .output()
            .expect("spawn");
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    };
    run(&[
        "--run-dir", &p("data"),
        "--set", "synth.level=1",
        "--set", "synth.n_identities=16",
        "--set", "synth.n_expressions=2",
        "synth",
    ]);
    run(&[
        "--run-dir", &p("hier"),
        "hierarchy",
        "--template", &p("data/template.obj"),
        "--levels", "2",
        "--factor", "4",
    ]);
    run(&[
        "--run-dir", &p("train"),
        "--set", "model.k=3",
        "--set", "model.channels=4,4",
        "--set", "model.bottleneck=4",
        "--set", "train.batch_size=4",
        "train",
        "--dataset", &p("data"),
        "--hierarchy", &p("hier/hierarchy.bin"),
        "--mode", "ae",
        "--epochs", "3",
    ]);
    run(&[
        "--run-dir", &p("eval"),
        "--set", "eval.invert_restarts=1",
        "--set", "eval.invert_iterations=10",
        "evaluate",
        "--checkpoint", &p("train/checkpoint_final.bin"),
        "--hierarchy", &p("hier/hierarchy.bin"),
        "--dataset", &p("data"),
        "--metrics", "gen",
    ]);
    let text = std::fs::read_to_string(root.join("eval/metrics.jsonl")).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    assert!(parsed.get("mean").is_some_and(|v| v.is_number()));
    assert!(parsed.get("std").is_some_and(|v| v.is_number()));
    assert_eq!(parsed["metric"], "generalisation");
}

#[test]
fn acceptance_9_end_to_end_determinism() {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance_determinism");
    let _ = std::fs::remove_dir_all(&root);
    let run_a = root.join("a");
    let run_b = root.join("b");
    run_pipeline(&run_a).expect("first pipeline run");
    run_pipeline(&run_b).expect("second pipeline run");

    let a = collect_comparable(&run_a);
    let b = collect_comparable(&run_b);
    let names: Vec<&String> = a.iter().map(|(n, _)| n).collect();
    let mut failures = Vec::new();
    if a.len() != b.len() {
        failures.push(format!("file counts differ: {} vs {}", a.len(), b.len()));
    }
    for ((name_a, bytes_a), (name_b, bytes_b)) in a.iter().zip(b.iter()) {
        if name_a != name_b {
            failures.push(format!("file sets diverge at {name_a} vs {name_b}"));
            break;
        }
        if bytes_a != bytes_b {
            failures.push(format!("{name_a} differs between runs"));
        }
    }
    if !names.iter().any(|n| n.ends_with("metrics.jsonl")) {
        failures.push("no metric JSON produced".into());
    }
    if names.iter().filter(|n| n.contains("generated_")).count() != 2 {
        failures.push("expected 2 generated meshes".into());
    }

    report(
        9,
        "end-to-end determinism",
        failures.is_empty(),
        if failures.is_empty() {
            format!("{} artifacts byte-identical across two runs", a.len())
        } else {
            failures.join("; ")
        },
    );
}
