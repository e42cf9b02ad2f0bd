//! Shared finite-difference fixtures.

#![allow(dead_code)]

use toll_core::autodiff::{Graph, Var};
use toll_core::config::RunConfig;
use toll_core::gradcheck::{finite_diff_check, GradCheckReport};
use toll_core::model::TollModel;
use toll_core::nn::{GruCell, Mlp};
use toll_core::params::ParamStore;
use toll_core::rng::SeededRng;
use toll_core::scene::build_dataset;
use toll_core::sma::{swav_cross_entropy, BankConfig, DistillBank, Level};
use toll_core::tensor::Tensor;
use toll_core::Result;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub type Op = fn(&mut Graph, &ParamStore) -> Result<Var>;

pub fn random(rows: usize, cols: usize, lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = SeededRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.uniform_range(lo, hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn store() -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a", random(3, 4, -1.0, 1.0, 1)).unwrap();
    s.insert("b", random(3, 4, -1.0, 1.0, 2)).unwrap();
    s.insert("c", random(4, 2, -1.0, 1.0, 3)).unwrap();
    s.insert("row", random(1, 4, -1.0, 1.0, 4)).unwrap();
    s.insert("col", random(3, 1, -1.0, 1.0, 5)).unwrap();
    s.insert("pos", random(3, 4, 0.5, 2.0, 6)).unwrap();
    s
}

/// `Σ out ⊙ W` for a fixed pseudo-random `W` of the output's shape, so every
/// output coordinate reaches the loss with a distinct weight.
pub fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let (r, c) = match shape.as_slice() {
        [r, c] => (*r, *c),
        [n] => (1, *n),
        _ => (1, 1),
    };
    if r * c == 1 {
        return Ok(out);
    }
    let w = random(r, c, -1.0, 1.0, 1000 + (r * 31 + c) as u64);
    let w = g.constant(Tensor::new(shape, w.into_data())?)?;
    let m = g.mul(out, w)?;
    g.sum_all(m)
}

/// Checks `op` on the shared store through a random projection.
pub fn check_op(op: Op) -> GradCheckReport {
    finite_diff_check(
        |g, s| {
            let out = op(g, s)?;
            project(g, out)
        },
        &store(),
        H,
    )
    .unwrap()
}

/// Every primitive of the tape, each exercised on its own.
pub fn primitives() -> Vec<(&'static str, Op)> {
    vec![
        ("matmul", |g, s| {
        let (a, c) = (g.param(s, "a")?, g.param(s, "c")?);
        g.matmul(a, c)
        }),
        ("matmul_t", |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.matmul_t(a, b)
        }),
        ("add", |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.add(a, b)
        }),
        ("sub", |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.sub(a, b)
        }),
        ("mul", |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        g.mul(a, b)
        }),
        ("add_row", |g, s| {
        let (a, r) = (g.param(s, "a")?, g.param(s, "row")?);
        g.add_row(a, r)
        }),
        ("mul_col", |g, s| {
        let (a, c) = (g.param(s, "a")?, g.param(s, "col")?);
        g.mul_col(a, c)
        }),
        ("scale", |g, s| {
        let a = g.param(s, "a")?;
        g.scale(a, -2.5)
        }),
        ("add_scalar", |g, s| {
        let a = g.param(s, "a")?;
        let y = g.add_scalar(a, 0.7)?;
        g.square(y)
        }),
        ("one_minus", |g, s| {
        let a = g.param(s, "a")?;
        let y = g.one_minus(a)?;
        g.square(y)
        }),
        ("relu", |g, s| {
        let a = g.param(s, "a")?;
        g.relu(a)
        }),
        ("sigmoid", |g, s| {
        let a = g.param(s, "a")?;
        g.sigmoid(a)
        }),
        ("tanh", |g, s| {
        let a = g.param(s, "a")?;
        g.tanh(a)
        }),
        ("exp", |g, s| {
        let a = g.param(s, "a")?;
        g.exp(a)
        }),
        ("ln", |g, s| {
        let p = g.param(s, "pos")?;
        g.ln(p)
        }),
        ("square", |g, s| {
        let a = g.param(s, "a")?;
        g.square(a)
        }),
        ("concat_cols", |g, s| {
        let (a, c) = (g.param(s, "a")?, g.param(s, "col")?);
        g.concat_cols(&[a, c, a])
        }),
        ("concat_rows", |g, s| {
        let (a, r) = (g.param(s, "a")?, g.param(s, "row")?);
        g.concat_rows(&[a, r])
        }),
        ("slice_cols", |g, s| {
        let a = g.param(s, "a")?;
        g.slice_cols(a, 1, 2)
        }),
        ("slice_rows", |g, s| {
        let a = g.param(s, "a")?;
        g.slice_rows(a, 1, 2)
        }),
        ("gather_rows", |g, s| {
        let a = g.param(s, "a")?;
        g.gather_rows(a, &[2, 0, 2, 1])
        }),
        ("scatter_add_rows", |g, s| {
        let a = g.param(s, "a")?;
        g.scatter_add_rows(a, &[1, 0, 1], 3)
        }),
        ("replace_rows", |g, s| {
        let (a, b) = (g.param(s, "a")?, g.param(s, "b")?);
        let rows = g.slice_rows(b, 0, 2)?;
        g.replace_rows(a, rows, &[2, 0])
        }),
        ("segment_max", |g, s| {
        let a = g.param(s, "a")?;
        g.segment_max(a, &[0, 1, 0], 2)
        }),
        ("sum_all", |g, s| {
        let a = g.param(s, "a")?;
        let y = g.sum_all(a)?;
        g.square(y)
        }),
        ("mean_all", |g, s| {
        let a = g.param(s, "a")?;
        let y = g.mean_all(a)?;
        g.square(y)
        }),
        ("sum_cols", |g, s| {
        let a = g.param(s, "a")?;
        g.sum_cols(a)
        }),
        ("softmax_rows", |g, s| {
        let a = g.param(s, "a")?;
        g.softmax_rows(a)
        }),
        ("log_softmax_rows", |g, s| {
        let a = g.param(s, "a")?;
        g.log_softmax_rows(a)
        }),
        ("normalize_rows", |g, s| {
        let a = g.param(s, "a")?;
        g.normalize_rows(a)
        }),
    ]
}

pub fn mlp_forward_blocks() -> GradCheckReport {
    let mlp = Mlp::new("m", &[4 + 4 + 1, 5, 3], false);
    let mut s = store();
    mlp.init(&mut s, &mut SeededRng::new(9)).unwrap();
    finite_diff_check(
        |g, s| {
            let (a, b, c) = (g.param(s, "a")?, g.param(s, "b")?, g.param(s, "col")?);
            let out = mlp.forward_blocks(g, s, &[(a, Some(&[0, 2, 2, 1])), (b, Some(&[1, 1, 0, 2])), (c, Some(&[2, 0, 1, 0]))])?;
            project(g, out)
        },
        &s,
        H,
    )
    .unwrap()
}

pub fn gru_cell() -> GradCheckReport {
    let gru = GruCell::new("gru", 4, 4);
    let mut s = store();
    gru.init(&mut s, &mut SeededRng::new(10)).unwrap();
    finite_diff_check(
        |g, s| {
            let (h, x) = (g.param(s, "a")?, g.param(s, "b")?);
            let out = gru.forward(g, s, h, x)?;
            project(g, out)
        },
        &s,
        H,
    )
    .unwrap()
}

pub fn swav_objective() -> GradCheckReport {
    let cfg = BankConfig {
        dim: 4,
        prototypes: [5, 3, 4],
        queue_len: 8,
        tau: 0.1,
        sinkhorn_eps: 0.05,
        sinkhorn_iters: 10,
    };
    let bank = DistillBank::new(cfg, &mut SeededRng::new(11)).unwrap();
    let mut s = store();
    for (name, p) in bank.protos.iter() {
        s.insert(name, p.value.clone()).unwrap();
    }
    let q = {
        let mut q = random(3, 5, 0.0, 1.0, 12);
        for r in 0..3 {
            let sum: f64 = q.row(r).iter().sum();
            q.row_mut(r).iter_mut().for_each(|v| *v /= sum);
        }
        q
    };
    finite_diff_check(
        |g, s| {
            let mut b = bank.clone();
            b.protos = s.snapshot_where(|n| n.starts_with("proto."));
            let z = g.param(s, "a")?;
            swav_cross_entropy(g, &b, Level::Object, z, &q)
        },
        &s,
        H,
    )
    .unwrap()
}

/// Small-width desk configuration so every coordinate can be probed.
pub fn tiny_cfg() -> RunConfig {
    let mut cfg = RunConfig::desk();
    for (k, v) in [
        ("actgr.d", "4"),
        ("actgr.T", "2"),
        ("actgr.l_base", "1"),
        ("diff.hidden", "6"),
        ("diff.points", "6"),
        ("diff.steps", "10"),
        ("nafl.k", "4"),
        ("sma.queue_len", "12"),
        ("sma.protos.obj", "5"),
        ("sma.protos.edge", "4"),
        ("sma.protos.trip", "3"),
        ("data.samples", "30"),
        ("data.points_per_object", "96"),
        ("data.points_per_node", "24"),
        ("data.tau_pts", "16"),
    ] {
        cfg.set(k, v).unwrap();
    }
    cfg
}

/// The full generative plus distillation objective of a 3-node sample,
/// probed over every student parameter.
pub fn full_objective() -> (GradCheckReport, usize) {
    let cfg = tiny_cfg();
    let data = build_dataset(&cfg.data, 4).unwrap();
    let sample = data.iter().find(|s| s.nodes.len() == 3).expect("a 3-node sample").clone();
    let model = TollModel::new(&cfg).unwrap();
    let mut state = model.init_state(5).unwrap();
    model.warmup_queues(&mut state, &data, 6).unwrap();
    let student = state.student.clone();
    let report = finite_diff_check(
        |g, s| {
            let mut st = state.clone();
            st.student = s.clone();
            let ([_, _, total], _) = model.sample_objective(g, &st, &sample, 7)?;
            Ok(total)
        },
        &student,
        H,
    )
    .unwrap();
    (report, student.num_scalars())
}

