//! Finite-difference checks for every differentiable primitive, shared by
//! the kernel tests and the workspace acceptance run.

use nrt_kernel::{grad_check, GradCheckOptions, GradReport, Graph, ParamStore, Result, Tensor, Var};
use rand::Rng;

pub fn random(shape: &[usize], rng: &mut nrt_kernel::Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn random_shape(rng: &mut nrt_kernel::Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=4);
    (0..rank).map(|_| rng.gen_range(1..=3)).collect()
}

/// Σ coeff ⊙ y with fixed random coefficients, so every output entry matters.
pub fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Result<Var> {
    let mut rng = nrt_kernel::rng(seed);
    let c = g.constant(random(g.shape(y), &mut rng));
    let p = g.mul(y, c)?;
    g.sum_all(p)
}

fn check(store: &mut ParamStore, f: impl FnMut(&mut Graph, &ParamStore) -> Result<Var>) -> GradReport {
    grad_check(store, f, &GradCheckOptions::default()).unwrap()
}

pub fn elementwise_primitives_on_random_shapes() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(100);
    for trial in 0..6 {
        let shape = random_shape(&mut rng);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&shape, &mut rng));
        let b = store.add("b", random(&shape, &mut rng));
        out.push(check(&mut store, |g, s| {
            let (x, y) = (g.param(s, a), g.param(s, b));
            let t1 = g.add(x, y)?;
            let t2 = g.mul(t1, y)?;
            let t3 = g.sub(t2, x)?;
            let t4 = g.gelu(t3)?;
            let t5 = g.sigmoid(t4)?;
            let t6 = g.scale(t5, 1.7)?;
            weighted_sum(g, t6, trial)
        }));
    }
    out
}

pub fn relu_away_from_kink() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(101);
    let mut store = ParamStore::new();
    let data = random(&[4, 3], &mut rng).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    let a = store.add("a", data);
    out.push(check(&mut store, |g, s| {
        let x = g.param(s, a);
        let y = g.relu(x)?;
        weighted_sum(g, y, 1)
    }));
    out
}

pub fn shape_primitives_on_random_shapes() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(102);
    for trial in 0..6 {
        let mut shape = random_shape(&mut rng);
        shape.push(rng.gen_range(2..=4));
        let rank = shape.len();
        let mut store = ParamStore::new();
        let a = store.add("a", random(&shape, &mut rng));
        let b = store.add("b", random(&shape, &mut rng));
        let bias = store.add("bias", random(&shape[rank - 1..], &mut rng));
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.reverse();
        out.push(check(&mut store, |g, s| {
            let (x, y, bb) = (g.param(s, a), g.param(s, b), g.param(s, bias));
            let cat = g.concat_last(&[x, y])?;
            let c = *g.shape(x).last().unwrap();
            let sl = g.slice_last(cat, 1, c)?;
            let ab = g.add_broadcast(sl, bb)?;
            let p = g.permute(ab, &axes)?;
            let n = g.value(p).len();
            let r = g.reshape(p, &[n])?;
            let rep = g.repeat_axis(r, 0, 2)?;
            let sm = g.softmax(rep)?;
            weighted_sum(g, sm, trial)
        }));
    }
    out
}

pub fn gathers_and_row_scaling() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(103);
    let mut store = ParamStore::new();
    let a = store.add("a", random(&[5, 3], &mut rng));
    out.push(check(&mut store, |g, s| {
        let x = g.param(s, a);
        let rows = g.gather_rows(x, &[4, nrt_kernel::ZERO_ROW, 0, 4, 2])?;
        let comb = g.gather_combine(x, 2, &[0, 1, 3, 3, 2, 4], &[0.25, 0.75, 0.5, 0.5, 1.5, -0.5])?;
        let sr = g.scale_rows(comb, &[2.0, 0.0, -1.0])?;
        let stacked = g.concat_rows(&[sr, x, comb])?;
        let l3 = weighted_sum(g, stacked, 3)?;
        let l1 = weighted_sum(g, rows, 1)?;
        let l2 = weighted_sum(g, sr, 2)?;
        let l12 = g.add(l1, l2)?;
        g.add(l12, l3)
    }));
    out
}

pub fn matmul_layernorm_softmax_chain() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(104);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[2, 3, 4], &mut rng));
    let w = store.add("w", random(&[4, 5], &mut rng));
    let gamma = store.add("gamma", random(&[5], &mut rng));
    let beta = store.add("beta", random(&[5], &mut rng));
    out.push(check(&mut store, |g, s| {
        let (xv, wv, gv, bv) = (g.param(s, x), g.param(s, w), g.param(s, gamma), g.param(s, beta));
        let h = g.matmul(xv, wv)?;
        let n = g.layernorm(h, gv, bv)?;
        let p = g.softmax(n)?;
        weighted_sum(g, p, 3)
    }));
    out
}

pub fn attention_core_with_mask() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(105);
    let mut store = ParamStore::new();
    let q = store.add("q", random(&[2, 3, 4], &mut rng));
    let k = store.add("k", random(&[2, 4, 4], &mut rng));
    let v = store.add("v", random(&[2, 4, 4], &mut rng));
    let mask = [true, true, false, true, false, true, true, true];
    out.push(check(&mut store, |g, s| {
        let (qv, kv, vv) = (g.param(s, q), g.param(s, k), g.param(s, v));
        let (o, _) = g.attention_core(qv, kv, vv, 2, Some(&mask))?;
        weighted_sum(g, o, 4)
    }));
    out
}

pub fn conv_upsample_and_mse() -> Vec<GradReport> {
    let mut out = Vec::new();
    let mut rng = nrt_kernel::rng(106);
    let mut store = ParamStore::new();
    let x = store.add("x", random(&[2, 5, 4, 2], &mut rng));
    let w = store.add("w", random(&[18, 3], &mut rng));
    let b = store.add("b", random(&[3], &mut rng));
    let w1 = store.add("w1", random(&[3, 3], &mut rng));
    let b1 = store.add("b1", random(&[3], &mut rng));
    let target = random(&[2, 6, 4, 3], &mut rng);
    out.push(check(&mut store, |g, s| {
        let (xv, wv, bv, w1v, b1v) = (g.param(s, x), g.param(s, w), g.param(s, b), g.param(s, w1), g.param(s, b1));
        let c = g.conv2d(xv, wv, bv, 3, 2)?;
        assert_eq!(g.shape(c), &[2, 3, 2, 3]);
        let c1 = g.conv2d(c, w1v, b1v, 1, 1)?;
        let u = g.upsample2x(c1)?;
        g.mse(u, &target, None)
    }));
    out
}

/// Every primitive group with its reports.
pub fn all() -> Vec<(&'static str, Vec<GradReport>)> {
    vec![
        ("elementwise_primitives_on_random_shapes", elementwise_primitives_on_random_shapes()),
        ("relu_away_from_kink", relu_away_from_kink()),
        ("shape_primitives_on_random_shapes", shape_primitives_on_random_shapes()),
        ("gathers_and_row_scaling", gathers_and_row_scaling()),
        ("matmul_layernorm_softmax_chain", matmul_layernorm_softmax_chain()),
        ("attention_core_with_mask", attention_core_with_mask()),
        ("conv_upsample_and_mse", conv_upsample_and_mse()),
    ]
}
