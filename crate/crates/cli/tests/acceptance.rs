//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! Dataset-backed criteria read signal files from the environment:
//! `PGCN_METR_LA` / `PGCN_METR_LA_GRAPH` and `PGCN_PEMS_BAY` (CSV in the
//! `timestamp,<sensor>,...` layout). They are skipped when unset.
//!
//! A failing criterion prints a FAIL line; the process exits non-zero only
//! when `PGCN_ACCEPTANCE_STRICT=1`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use pgcn_core::autodiff::Tape;
use pgcn_core::data::{
    generate_synthetic, make_windows, SignalTable, Split, SplitSpec, SyntheticData, SyntheticSpec,
    WindowedDataset,
};
use pgcn_core::gradcheck::grad_check;
use pgcn_core::graph::{
    progressive_adjacency, progressive_adjacency_values, self_adaptive_adjacency, RoadGraph,
    SelfAdaptiveEmbeddings,
};
use pgcn_core::model::{
    gated_temporal_unit, progressive_graph_convolution, AdjacencyCombo, DiffusionInput, PgcnConfig,
    PgcnModel,
};
use pgcn_core::training::{
    evaluate, masked_mae, masked_mape, masked_rmse, train, HistoricalAverage, MetricsReport,
    TrainOptions, REPORT_HORIZONS,
};
use pgcn_core::{ParamStore, Result, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;

enum Outcome {
    Pass(String),
    Fail(String),
    Skip(String),
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn run(&mut self, id: u32, title: &str, f: impl FnOnce() -> Outcome) {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        let (tag, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                self.failures += 1;
                ("FAIL", d)
            }
            Outcome::Skip(d) => ("SKIP", d),
        };
        println!("[{tag}] {id:>2}. {title}: {detail} ({secs:.1}s)");
    }
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

fn ring(n: usize) -> RoadGraph {
    let names = (0..n).map(|i| format!("s{i}")).collect();
    let edges = (0..n)
        .flat_map(|i| [(i, (i + 1) % n, 1.0), ((i + 1) % n, i, 1.0)])
        .collect();
    RoadGraph::from_edges(names, edges).unwrap()
}

/// Directed chain, so both transition directions are exercised.
fn chain(n: usize) -> RoadGraph {
    let names = (0..n).map(|i| format!("s{i}")).collect();
    let edges = (0..n - 1).map(|i| (i, i + 1, 1.0 + i as f64)).collect();
    RoadGraph::from_edges(names, edges).unwrap()
}

type Forward = Box<dyn Fn(&mut Tape, &ParamStore) -> Result<Var>>;

/// Weighted sum with a fixed random tensor, so every output entry gets a distinct gradient.
fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = tape.constant(random(&mut rng, &shape, -1.0, 1.0));
    let h = tape.hadamard(v, c)?;
    Ok(tape.sum(h))
}

fn op_cases() -> Vec<(&'static str, ParamStore, Forward)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut cases: Vec<(&'static str, ParamStore, Forward)> = Vec::new();
    let mut add = |name: &'static str, shapes: &[&[usize]], f: Forward, rng: &mut ChaCha8Rng| {
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            store.add(format!("p{i}"), random(rng, s, -1.0, 1.0));
        }
        cases.push((name, store, f));
    };
    fn ids(s: &ParamStore) -> Vec<pgcn_core::ParamId> {
        s.ids().collect()
    }
    add(
        "matmul",
        &[&[3, 4], &[4, 2]],
        Box::new(|t, s| {
            let p = ids(s);
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.matmul(a, b)?;
            project(t, y, 1)
        }),
        &mut rng,
    );
    add(
        "linear",
        &[&[2, 3, 4], &[4, 5]],
        Box::new(|t, s| {
            let p = ids(s);
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.linear(a, b)?;
            project(t, y, 2)
        }),
        &mut rng,
    );
    add(
        "batch_matmul",
        &[&[2, 3, 3], &[2, 3, 4]],
        Box::new(|t, s| {
            let p = ids(s);
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.batch_matmul(a, b)?;
            project(t, y, 3)
        }),
        &mut rng,
    );
    add(
        "batch_matmul (broadcast)",
        &[&[1, 3, 3], &[2, 3, 4]],
        Box::new(|t, s| {
            let p = ids(s);
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.batch_matmul(a, b)?;
            project(t, y, 4)
        }),
        &mut rng,
    );
    add(
        "add/sub/hadamard",
        &[&[3, 4], &[3, 4]],
        Box::new(|t, s| {
            let p = ids(s);
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let x = t.add(a, b)?;
            let y = t.sub(x, b)?;
            let z = t.hadamard(y, b)?;
            project(t, z, 5)
        }),
        &mut rng,
    );
    add(
        "add_bias/scale/add_scalar",
        &[&[2, 3, 4], &[4]],
        Box::new(|t, s| {
            let p = ids(s);
            let (a, b) = (t.param(s, p[0]), t.param(s, p[1]));
            let x = t.add_bias(a, b)?;
            let y = t.scale(x, -1.7);
            let z = t.add_scalar(y, 0.3);
            project(t, z, 6)
        }),
        &mut rng,
    );
    add(
        "relu/tanh/sigmoid/abs",
        &[&[4, 5]],
        Box::new(|t, s| {
            let p = ids(s);
            let a = t.param(s, p[0]);
            let r = t.relu(a);
            let h = t.tanh(a);
            let g = t.sigmoid(a);
            let b = t.abs(a);
            let x = t.add(r, h)?;
            let y = t.hadamard(g, b)?;
            let z = t.add(x, y)?;
            project(t, z, 7)
        }),
        &mut rng,
    );
    add(
        "row_softmax",
        &[&[2, 3, 5]],
        Box::new(|t, s| {
            let a = t.param(s, ids(s)[0]);
            let y = t.row_softmax(a)?;
            project(t, y, 8)
        }),
        &mut rng,
    );
    add(
        "sum/mean",
        &[&[3, 3]],
        Box::new(|t, s| {
            let a = t.param(s, ids(s)[0]);
            let sq = t.hadamard(a, a)?;
            let m = t.mean(sq);
            let x = t.sum(a);
            let y = t.hadamard(x, m)?;
            Ok(t.sum(y))
        }),
        &mut rng,
    );
    add(
        "reshape/permute/slice",
        &[&[2, 3, 4]],
        Box::new(|t, s| {
            let a = t.param(s, ids(s)[0]);
            let r = t.reshape(a, [6, 4])?;
            let r = t.reshape(r, [2, 3, 4])?;
            let p = t.permute(r, &[2, 0, 1])?;
            let y = t.slice(p, 2, 1, 2)?;
            project(t, y, 9)
        }),
        &mut rng,
    );
    add(
        "dilated_causal_conv1d",
        &[&[2, 3, 9, 2], &[2, 2, 3]],
        Box::new(|t, s| {
            let p = ids(s);
            let (x, k) = (t.param(s, p[0]), t.param(s, p[1]));
            let y = t.dilated_causal_conv1d(x, k, 3)?;
            project(t, y, 10)
        }),
        &mut rng,
    );
    add(
        "gated_temporal_unit",
        &[&[1, 3, 6, 2], &[2, 2, 2], &[2], &[2, 2, 2], &[2]],
        Box::new(|t, s| {
            let p: Vec<Var> = ids(s).into_iter().map(|id| t.param(s, id)).collect();
            let y = gated_temporal_unit(t, p[0], (p[1], Some(p[2])), (p[3], Some(p[4])), 2)?;
            project(t, y, 11)
        }),
        &mut rng,
    );
    add(
        "progressive_adjacency (W_adj)",
        &[&[5, 5]],
        Box::new(|t, s| {
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let x = random(&mut rng, &[2, 4, 5], 0.0, 10.0);
            let w = t.param(s, ids(s)[0]);
            let pa = progressive_adjacency(t, &x, w)?;
            project(t, pa.weights, 13)
        }),
        &mut rng,
    );
    add(
        "graph convolution (K=2, two terms)",
        &[
            &[1, 3, 4, 2],
            &[1, 3, 3],
            &[2, 2],
            &[2, 2],
            &[2, 2],
            &[2, 2],
        ],
        Box::new(|t, s| {
            let p: Vec<Var> = ids(s).into_iter().map(|id| t.param(s, id)).collect();
            let adj = t.row_softmax(p[1])?;
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let fixed = t.constant(random(&mut rng, &[1, 3, 3], 0.0, 1.0));
            let terms = [
                DiffusionInput {
                    adjacency: fixed,
                    powered: true,
                    weights: vec![p[2], p[3]],
                },
                DiffusionInput {
                    adjacency: adj,
                    powered: true,
                    weights: vec![p[4], p[5]],
                },
            ];
            let y = progressive_graph_convolution(t, p[0], &terms)?;
            project(t, y, 16)
        }),
        &mut rng,
    );
    {
        let mut store = ParamStore::new();
        let emb = SelfAdaptiveEmbeddings::init(&mut store, 4, 3, &mut rng).unwrap();
        cases.push((
            "self_adaptive_adjacency",
            store,
            Box::new(move |t, s| {
                let a = self_adaptive_adjacency(t, s, &emb)?;
                project(t, a, 14)
            }),
        ));
    }
    cases
}

fn criterion_gradients() -> Outcome {
    let started = Instant::now();
    let mut worst = (0.0f64, "");
    for (name, mut store, f) in op_cases() {
        match grad_check(&mut store, f, GRAD_EPS) {
            Ok(e) if e < GRAD_TOL => {
                if e > worst.0 {
                    worst = (e, name);
                }
            }
            Ok(e) => return Outcome::Fail(format!("{name}: relative error {e:.3e}")),
            Err(e) => return Outcome::Fail(format!("{name}: {e}")),
        }
    }
    let config = PgcnConfig {
        num_layers: 2,
        hidden_dim: 4,
        dilations: vec![1, 2],
        diffusion_steps: 2,
        input_window: 5,
        output_window: 3,
        skip_dim: 4,
        end_dim: 6,
        adjacency: AdjacencyCombo::PGCN,
        ..PgcnConfig::default()
    };
    let mut model = PgcnModel::new(config, &chain(3), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = random(&mut rng, &[2, 5, 3, 1], -2.0, 2.0);
    let mut store = std::mem::take(model.params_mut());
    let model_err = grad_check(
        &mut store,
        |t, s| {
            let out = model.forward_with(t, s, &x)?;
            project(t, out.prediction, 17)
        },
        GRAD_EPS,
    );
    let elapsed = started.elapsed();
    match model_err {
        Ok(e) => verdict(
            e < GRAD_TOL && worst.0 < GRAD_TOL && elapsed < Duration::from_secs(60),
            format!(
                "ops worst {:.2e} ({}), tiny PGCN {e:.2e}, tol {GRAD_TOL:e}, {:.1}s of 60s",
                worst.0,
                worst.1,
                elapsed.as_secs_f64()
            ),
        ),
        Err(e) => Outcome::Fail(format!("tiny PGCN: {e}")),
    }
}

fn criterion_adjacency_invariants() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut max_row_err, mut min_entry, mut max_perm, mut max_purity) =
        (0.0f64, f64::MAX, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let b = rng.random_range(1..4);
        let n = rng.random_range(2..9);
        let t = rng.random_range(2..13);
        let x = random(&mut rng, &[b, n, t], -5.0, 60.0);
        let w = random(&mut rng, &[t, t], -1.0, 1.0);
        let (_, a) = progressive_adjacency_values(&x, &w).unwrap();
        for r in a.data().chunks(n) {
            max_row_err = max_row_err.max((r.iter().sum::<f64>() - 1.0).abs());
            min_entry = min_entry.min(r.iter().cloned().fold(f64::MAX, f64::min));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let mut xp = Vec::with_capacity(x.numel());
        for bi in 0..b {
            for &p in &perm {
                xp.extend_from_slice(&x.data()[(bi * n + p) * t..(bi * n + p + 1) * t]);
            }
        }
        let (_, ap) =
            progressive_adjacency_values(&Tensor::new([b, n, t], xp).unwrap(), &w).unwrap();
        for bi in 0..b {
            for i in 0..n {
                for j in 0..n {
                    let d = (ap.get(&[bi, i, j]) - a.get(&[bi, perm[i], perm[j]])).abs();
                    max_perm = max_perm.max(d);
                }
            }
            let single = x.slice_axis(0, bi, 1).unwrap();
            let (_, a1) = progressive_adjacency_values(&single, &w).unwrap();
            max_purity = max_purity.max(a1.max_abs_diff(&a.slice_axis(0, bi, 1).unwrap()));
        }
    }
    let elapsed = started.elapsed();
    verdict(
        max_row_err < 1e-9 && min_entry > 0.0 && max_perm == 0.0 && max_purity == 0.0 && elapsed < Duration::from_secs(30),
        format!(
            "1000 instances: max |rowsum-1| {max_row_err:.1e}, min entry {min_entry:.2e}, permutation diff {max_perm:e}, purity diff {max_purity:e}"
        ),
    )
}

fn criterion_hand_oracle() -> Outcome {
    let x = Tensor::new([1, 2, 3], vec![0.0, 1.0, 2.0, 2.0, 1.0, 0.0]).unwrap();
    let (_, a) = progressive_adjacency_values(&x, &Tensor::eye(3).unwrap()).unwrap();
    let row = [a.get(&[0, 0, 0]), a.get(&[0, 0, 1])];
    verdict(
        (row[0] - 0.6900).abs() <= 1e-4 && (row[1] - 0.3100).abs() <= 1e-4,
        format!(
            "row 1 = [{:.6}, {:.6}], expected [0.6900, 0.3100] +/- 1e-4",
            row[0], row[1]
        ),
    )
}

/// Layer outputs `[1, N, T_l, D]` of the default stack on padded input `x[1, N, L, 1]`,
/// with adjacency inputs built from `graph_window`.
fn stack_layers(model: &PgcnModel, x: &Tensor, graph_window: &Tensor) -> (Vec<Tensor>, Tensor) {
    let mut tape = Tape::new();
    let graphs = model
        .prepare_graphs(&mut tape, model.params(), graph_window)
        .unwrap();
    let out = model
        .stack_forward(&mut tape, model.params(), x, &graphs)
        .unwrap();
    let layers = out
        .layer_outputs
        .iter()
        .map(|&v| tape.value(v).clone())
        .collect();
    (layers, tape.value(out.skip_sum).clone())
}

fn criterion_causality() -> Outcome {
    let n = 4;
    let model = PgcnModel::new(PgcnConfig::default(), &ring(n), 5).unwrap();
    let len = model.config().padded_length();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut violations = 0;
    let mut checked = 0usize;
    for _ in 0..100 {
        let x = random(&mut rng, &[1, n, len, 1], -2.0, 2.0);
        let window = random(&mut rng, &[1, n, 12], 0.0, 5.0);
        let tau = rng.random_range(0..len);
        let mut xp = x.clone();
        for node in 0..n {
            let v = xp.get(&[0, node, tau, 0]);
            xp.set(&[0, node, tau, 0], v + rng.random_range(0.5..2.0));
        }
        let (base, _) = stack_layers(&model, &x, &window);
        let (pert, _) = stack_layers(&model, &xp, &window);
        for (a, b) in base.iter().zip(&pert) {
            let tl = a.shape()[2];
            let offset = len - tl;
            for t in 0..tl {
                if t + offset >= tau {
                    continue;
                }
                let sa = a.slice_axis(2, t, 1).unwrap();
                let sb = b.slice_axis(2, t, 1).unwrap();
                checked += 1;
                if sa.data() != sb.data() {
                    violations += 1;
                }
            }
        }
    }
    verdict(
        violations == 0,
        format!("100 trials, {checked} pre-perturbation feature slices compared bitwise, {violations} changed"),
    )
}

fn criterion_receptive_field() -> Outcome {
    let n = 3;
    let model = PgcnModel::new(PgcnConfig::default(), &ring(n), 8).unwrap();
    let analytic = model.config().receptive_field();
    let len = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&mut rng, &[1, n, len, 1], -1.0, 1.0);
    let window = random(&mut rng, &[1, n, 12], 0.0, 5.0);
    let last = |layers: &[Tensor]| {
        let top = layers.last().unwrap();
        top.slice_axis(2, top.shape()[2] - 1, 1).unwrap()
    };
    let (base, _) = stack_layers(&model, &x, &window);
    let reference = last(&base);
    let mut influencing = Vec::new();
    for tau in 0..len {
        let mut xp = x.clone();
        for node in 0..n {
            let v = xp.get(&[0, node, tau, 0]);
            xp.set(&[0, node, tau, 0], v + 1.0);
        }
        let (pert, _) = stack_layers(&model, &xp, &window);
        if last(&pert).data() != reference.data() {
            influencing.push(tau);
        }
    }
    let contiguous =
        influencing.windows(2).all(|w| w[1] == w[0] + 1) && influencing.last() == Some(&(len - 1));
    let empirical = influencing.len();
    verdict(
        analytic == 13 && empirical == analytic && contiguous,
        format!("analytic {analytic}, empirical {empirical} (the most recent {empirical} of {len} steps)"),
    )
}

struct Trained {
    model: PgcnModel,
    data: SyntheticData,
    dataset: WindowedDataset,
    reports: Vec<MetricsReport>,
    untrained_drift: (usize, usize),
}

fn criterion_overfit(slot: &mut Option<Trained>) -> Outcome {
    let started = Instant::now();
    let spec = SyntheticSpec::new(8, 2, 2000, 0.05, 7);
    let data = generate_synthetic(&spec).unwrap();
    let mut ds = make_windows(data.table.clone(), 12, 12, false)
        .unwrap()
        .chronological_split(SplitSpec::default())
        .unwrap();
    let scaler = ds.fit_scaler(true).unwrap();
    ds.set_scaler(scaler);
    let config = PgcnConfig {
        num_layers: 2,
        hidden_dim: 16,
        dilations: vec![1, 2],
        skip_dim: 32,
        end_dim: 64,
        ..PgcnConfig::default()
    };
    let mut model = PgcnModel::new(config, &data.graph, 1).unwrap();
    let untrained_drift = drift_wins(&model, &ds, &data);
    let opts = TrainOptions {
        epochs: 200,
        batch_size: 64,
        seed: 1,
        ..TrainOptions::default()
    };
    let report = match train(&mut model, &ds, &opts) {
        Ok(r) => r,
        Err(e) => return Outcome::Fail(format!("training failed: {e}")),
    };
    let first = report.epochs[0].train_mae;
    let last = report.epochs.last().unwrap().train_mae;
    let pgcn = evaluate(&model, &ds, Split::Test, true, 64, &REPORT_HORIZONS).unwrap();
    let ha = evaluate(
        &HistoricalAverage { output_window: 12 },
        &ds,
        Split::Test,
        true,
        64,
        &REPORT_HORIZONS,
    )
    .unwrap();
    let (p60, h60) = (pgcn.at(12).unwrap().mae, ha.at(12).unwrap().mae);
    let elapsed = started.elapsed();
    let ok = last < 0.1 * first && p60 < h60 && elapsed < Duration::from_secs(600);
    *slot = Some(Trained {
        model,
        data,
        dataset: ds,
        reports: vec![pgcn, ha],
        untrained_drift,
    });
    verdict(
        ok,
        format!(
            "train MAE {first:.4} -> {last:.4} (ratio {:.3} < 0.100); 60-min test MAE PGCN {p60:.4} vs HA {h60:.4}",
            last / first
        ),
    )
}

/// Test windows whose same-group mean A_p weight exceeds the cross-group mean.
fn drift_wins(model: &PgcnModel, ds: &WindowedDataset, data: &SyntheticData) -> (usize, usize) {
    let n = ds.num_nodes();
    let samples: Vec<usize> = ds.split_range(Split::Test).unwrap().collect();
    let mut wins = 0;
    for chunk in samples.chunks(64) {
        let w = model
            .progressive_weights(&ds.batch(chunk).unwrap().inputs)
            .unwrap();
        for (b, &s) in chunk.iter().enumerate() {
            let groups = data.groups_at(ds.last_input_row(s));
            let (mut same, mut ns, mut diff, mut nd) = (0.0, 0, 0.0, 0);
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let v = w.get(&[b, i, j]);
                    if groups[i] == groups[j] {
                        same += v;
                        ns += 1;
                    } else {
                        diff += v;
                        nd += 1;
                    }
                }
            }
            if same / ns as f64 > diff / nd as f64 {
                wins += 1;
            }
        }
    }
    (wins, samples.len())
}

fn criterion_drift(trained: Option<&Trained>) -> Outcome {
    let Some(t) = trained else {
        return Outcome::Fail("no trained model (criterion 6 did not run)".into());
    };
    let (wins, total) = drift_wins(&t.model, &t.dataset, &t.data);
    let frac = wins as f64 / total as f64;
    let (w0, t0) = t.untrained_drift;
    verdict(
        frac >= 0.9,
        format!(
            "same-group mean weight exceeds cross-group mean in {wins}/{total} test windows ({:.1}%, need >= 90%; {:.1}% before training)",
            100.0 * frac,
            100.0 * w0 as f64 / t0 as f64
        ),
    )
}

fn criterion_metrics(extra: &[MetricsReport]) -> Outcome {
    let t = |v: &[f64]| Tensor::new([v.len()], v.to_vec()).unwrap();
    let mae = masked_mae(&t(&[1.0, 3.0]), &t(&[2.0, 5.0]), false).unwrap();
    let rmse = masked_rmse(&t(&[1.0, 3.0]), &t(&[2.0, 5.0]), false).unwrap();
    let mape = masked_mape(&t(&[110.0]), &t(&[100.0])).unwrap();
    let mape_masked = masked_mape(&t(&[5.0, 90.0]), &t(&[0.0, 100.0])).unwrap();
    let hand_ok = (mae - 1.5).abs() < 1e-9
        && (rmse - 2.5f64.sqrt()).abs() < 1e-9
        && (mape - 10.0).abs() < 1e-9
        && (mape_masked - 10.0).abs() < 1e-9;
    let rows: Vec<_> = extra.iter().flat_map(|r| r.rows()).collect();
    let jensen = rows
        .iter()
        .all(|h| h.rmse >= h.mae && h.mae >= 0.0 && h.mape_percent >= 0.0);
    verdict(
        hand_ok && jensen && !rows.is_empty(),
        format!(
            "MAE {mae}, RMSE {rmse:.6}, MAPE {mape:.6}% / {mape_masked:.6}% (masked); RMSE >= MAE on {} evaluated rows",
            rows.len()
        ),
    )
}

fn env_path(key: &str) -> Option<PathBuf> {
    std::env::var_os(key)
        .map(PathBuf::from)
        .filter(|p| p.exists())
}

fn ha_check(path: &Path, expected: f64) -> std::result::Result<(f64, bool), String> {
    let table = SignalTable::load_csv(path).map_err(|e| e.to_string())?;
    let mut ds = make_windows(table, 12, 12, false)
        .and_then(|d| d.chronological_split(SplitSpec::default()))
        .map_err(|e| e.to_string())?;
    ds.set_scaler(ds.fit_scaler(true).map_err(|e| e.to_string())?);
    let r = evaluate(
        &HistoricalAverage { output_window: 12 },
        &ds,
        Split::Test,
        true,
        256,
        &[3],
    )
    .map_err(|e| e.to_string())?;
    let mae = r.at(3).unwrap().mae;
    Ok((mae, (mae - expected).abs() <= 0.05 * expected))
}

fn criterion_ha_datasets() -> Outcome {
    let mut parts = Vec::new();
    let mut all_ok = true;
    let mut any = false;
    for (key, name, expected) in [
        ("PGCN_METR_LA", "METR-LA", 4.02),
        ("PGCN_PEMS_BAY", "PeMS-Bay", 1.60),
    ] {
        match env_path(key) {
            None => parts.push(format!("{name}: not available (set {key})")),
            Some(p) => {
                any = true;
                match ha_check(&p, expected) {
                    Ok((mae, ok)) => {
                        all_ok &= ok;
                        parts.push(format!("{name} 15-min MAE {mae:.3} vs {expected} +/- 5%"));
                    }
                    Err(e) => {
                        all_ok = false;
                        parts.push(format!("{name}: {e}"));
                    }
                }
            }
        }
    }
    if !any {
        Outcome::Skip(parts.join("; "))
    } else {
        verdict(all_ok, parts.join("; "))
    }
}

fn criterion_scaled_learning() -> Outcome {
    let Some(path) = env_path("PGCN_METR_LA") else {
        return Outcome::Skip(
            "METR-LA not available (set PGCN_METR_LA and PGCN_METR_LA_GRAPH)".into(),
        );
    };
    let run = || -> std::result::Result<(f64, f64), String> {
        let full = SignalTable::load_csv(&path).map_err(|e| e.to_string())?;
        let rows = full.num_steps() / 10;
        let n = full.num_nodes();
        let table = SignalTable::new(
            full.timestamps()[..rows].to_vec(),
            full.names().to_vec(),
            full.values()[..rows * n].to_vec(),
            full.frequency_minutes(),
        )
        .map_err(|e| e.to_string())?;
        let graph = match env_path("PGCN_METR_LA_GRAPH") {
            Some(g) => RoadGraph::load_edge_csv(&g).and_then(|g| g.aligned_to(table.names())),
            None => RoadGraph::empty(table.names().to_vec()),
        }
        .map_err(|e| e.to_string())?;
        let mut ds = make_windows(table, 12, 12, false)
            .and_then(|d| d.chronological_split(SplitSpec::default()))
            .map_err(|e| e.to_string())?;
        ds.set_scaler(ds.fit_scaler(true).map_err(|e| e.to_string())?);
        let mut model =
            PgcnModel::new(PgcnConfig::default(), &graph, 0).map_err(|e| e.to_string())?;
        let opts = TrainOptions {
            epochs: 20,
            ..TrainOptions::default()
        };
        train(&mut model, &ds, &opts).map_err(|e| e.to_string())?;
        let p = evaluate(&model, &ds, Split::Test, true, 64, &[3]).map_err(|e| e.to_string())?;
        let h = evaluate(
            &HistoricalAverage { output_window: 12 },
            &ds,
            Split::Test,
            true,
            64,
            &[3],
        )
        .map_err(|e| e.to_string())?;
        Ok((p.at(3).unwrap().mae, h.at(3).unwrap().mae))
    };
    match run() {
        Ok((p, h)) => verdict(p < h, format!("15-min test MAE PGCN {p:.3} vs HA {h:.3}")),
        Err(e) => Outcome::Fail(e),
    }
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["pgcn"];
    full.extend_from_slice(args);
    pgcn_cli::main_with_args(full)
}

fn synthetic_run_dir(root: &Path) -> PathBuf {
    let data = root.join("data");
    let code = cli(&[
        "synth",
        "--set",
        "nodes=8",
        "--set",
        "length=1000",
        "--set",
        "noise=0.05",
        "--set",
        "seed=5",
        "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "synth failed");
    let cfg = root.join("config.txt");
    fs::write(
        &cfg,
        "signals=data/signals.csv\ngraph=data/graph.csv\nnum_layers=2\ndilations=1,2\nhidden_dim=8\nskip_dim=16\nend_dim=32\nepochs=2\nbatch_size=64\nseed=3\n",
    )
    .unwrap();
    cfg
}

fn criterion_ablation(root: &Path) -> Outcome {
    let cfg = synthetic_run_dir(root);
    let out = root.join("ablate");
    let code = cli(&[
        "ablate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    if code != 0 {
        return Outcome::Fail(format!("ablate exited {code}"));
    }
    let text = fs::read_to_string(out.join("ablation.csv")).unwrap();
    let mut lines = text.lines();
    let header_ok = lines.next() == Some("combo,horizon_minutes,mae,rmse,mape_percent");
    let rows: Vec<&str> = lines.collect();
    let labels: Vec<String> = AdjacencyCombo::ABLATIONS
        .iter()
        .map(|c| c.label())
        .collect();
    let expected = ["P", "P + SA", "T + SA", "T + P (PGCN)", "T + P + SA"];
    let mut seen: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    seen.dedup();
    let status = fs::read_to_string(out.join("ablation_status.csv")).unwrap();
    let hashes: Vec<&str> = status
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap())
        .collect();
    let shared = hashes.len() == 5 && hashes.iter().all(|h| !h.is_empty() && *h == hashes[0]);
    verdict(
        header_ok && rows.len() == 15 && seen == expected && labels == expected && shared,
        format!(
            "{} rows, combos [{}], split hash {}",
            rows.len(),
            seen.join(" | "),
            if shared {
                &hashes[0][..16]
            } else {
                "NOT SHARED"
            }
        ),
    )
}

fn criterion_determinism(root: &Path) -> Outcome {
    // single-threaded contract
    std::env::set_var("PGCN_THREADS", "1");
    let cfg = synthetic_run_dir(root);
    let run = |name: &str| {
        let out = root.join(name);
        let code = cli(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        (
            code,
            fs::read(out.join("train_log.csv")).ok(),
            fs::read(out.join("metrics.csv")).ok(),
        )
    };
    let a = run("det_a");
    let b = run("det_b");
    let ok = a.0 == 0 && b.0 == 0 && a.1.is_some() && a.1 == b.1 && a.2.is_some() && a.2 == b.2;
    verdict(
        ok,
        format!(
            "two runs with PGCN_THREADS=1: train_log.csv identical={}, metrics.csv identical={}",
            a.1 == b.1,
            a.2 == b.2
        ),
    )
}

fn main() {
    // `cargo test -- --list` and filters only need to see the target exists
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let root = tempfile::tempdir().expect("temp dir");
    let mut suite = Suite { failures: 0 };
    suite.run(1, "gradient suite", criterion_gradients);
    suite.run(
        2,
        "progressive adjacency invariants",
        criterion_adjacency_invariants,
    );
    suite.run(3, "two-node hand oracle", criterion_hand_oracle);
    suite.run(4, "temporal causality", criterion_causality);
    suite.run(5, "receptive field", criterion_receptive_field);
    let mut trained = None;
    suite.run(6, "overfit oracle", || criterion_overfit(&mut trained));
    suite.run(7, "drift detection", || criterion_drift(trained.as_ref()));
    let reports = trained
        .as_ref()
        .map(|t| t.reports.clone())
        .unwrap_or_default();
    suite.run(8, "metric oracles", || criterion_metrics(&reports));
    suite.run(9, "HA baseline on full datasets", criterion_ha_datasets);
    suite.run(10, "scaled-down learning check", criterion_scaled_learning);
    suite.run(11, "ablation harness", || {
        criterion_ablation(&root.path().join("c11"))
    });
    suite.run(12, "determinism", || {
        criterion_determinism(&root.path().join("c12"))
    });
    if suite.failures == 0 {
        println!("acceptance: all evaluated criteria passed");
        return;
    }
    println!("acceptance: {} criterion(s) failed", suite.failures);
    // failures are reported, not fatal, unless strict mode is requested
    if std::env::var("PGCN_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
