//! Brute-force masked attention and partition checks for the sparse
//! encoder.

use nrt_core::sparse_attention::{
    block_attention, block_partition, grid_attention, grid_partition, interview_attention, view_partition, Partition,
    ViewFeatureGrid,
};
use nrt_kernel::{Graph, Linear, MultiHeadAttention, ParamStore, Tensor};
use rand::Rng;

pub fn linear(store: &ParamStore, lin: &Linear, x: &[f64], rows: usize) -> Vec<f64> {
    let w = store.value(lin.weight).data();
    let (fi, fo) = (lin.fan_in, lin.fan_out);
    let mut out = vec![0.0; rows * fo];
    for r in 0..rows {
        for o in 0..fo {
            let mut s = lin.bias.map_or(0.0, |b| store.value(b).data()[o]);
            for k in 0..fi {
                s += x[r * fi + k] * w[k * fo + o];
            }
            out[r * fo + o] = s;
        }
    }
    out
}

/// Every query attends to the keys `mask(i, j)` allows, one softmax per head.
pub fn brute_force(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &[f64],
    t: usize,
    c: usize,
    mask: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let q = linear(store, &mha.query, x, t);
    let k = linear(store, &mha.key, x, t);
    let v = linear(store, &mha.value, x, t);
    let d = c / mha.heads;
    let mut mixed = vec![0.0; t * c];
    for i in 0..t {
        for h in 0..mha.heads {
            let mut logits = vec![f64::NEG_INFINITY; t];
            for j in 0..t {
                if mask(i, j) {
                    let dot: f64 = (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum();
                    logits[j] = dot / (d as f64).sqrt();
                }
            }
            let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if top == f64::NEG_INFINITY {
                continue;
            }
            let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..t {
                for f in 0..d {
                    mixed[i * c + h * d + f] += e[j] / z * v[j * c + h * d + f];
                }
            }
        }
    }
    linear(store, &mha.output, &mixed, t)
}

pub fn random_mha(rng: &mut nrt_kernel::Rng, c: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "attn", c, heads, rng).unwrap();
    for id in store.ids().collect::<Vec<_>>() {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::from_fn(&shape, |_| rng.gen_range(-0.7..0.7));
    }
    (store, mha)
}

#[derive(Debug, Clone, Copy)]
pub enum Pattern {
    Block(usize),
    Grid(usize),
    Views,
}

pub fn run_pattern(store: &ParamStore, mha: &MultiHeadAttention, x: &Tensor, valid: Option<Vec<bool>>, p: Pattern) -> Vec<f64> {
    let mut g = Graph::inference();
    let var = g.constant(x.clone());
    let mut grid = ViewFeatureGrid::new(&g, var).unwrap();
    grid.valid = valid;
    let out = match p {
        Pattern::Block(s) => block_attention(&mut g, store, mha, &grid, s),
        Pattern::Grid(s) => grid_attention(&mut g, store, mha, &grid, s),
        Pattern::Views => interview_attention(&mut g, store, mha, &grid),
    }
    .unwrap();
    g.value(out.var).data().to_vec()
}

pub fn allowed(p: Pattern, h: usize, w: usize) -> impl Fn(usize, usize) -> bool {
    move |i, j| {
        let (vi, ri, ci) = (i / (h * w), (i / w) % h, i % w);
        let (vj, rj, cj) = (j / (h * w), (j / w) % h, j % w);
        match p {
            Pattern::Block(s) => vi == vj && ri / s == rj / s && ci / s == cj / s,
            Pattern::Grid(s) => vi == vj && ri % (h / s) == rj % (h / s) && ci % (w / s) == cj % (w / s),
            Pattern::Views => ri == rj && ci == cj,
        }
    }
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Largest deviation from the brute-force oracle over `configs` random
/// shapes, each run through all three patterns; one in three configurations
/// masks a quarter of the tokens.
pub fn oracle_sweep(seed: u64, configs: usize) -> f64 {
    let mut rng = nrt_kernel::rng(seed);
    let mut worst: f64 = 0.0;
    for k in 0..configs {
        let p = rng.gen_range(1..=3);
        let gs = rng.gen_range(1..=3);
        let h = p * gs * rng.gen_range(1..=2);
        let w = p * gs * rng.gen_range(1..=2);
        let n = rng.gen_range(1..=3);
        let heads = rng.gen_range(1..=3);
        let c = heads * rng.gen_range(1..=3);
        let (store, mha) = random_mha(&mut rng, c, heads);
        let t = n * h * w;
        let x = Tensor::from_fn(&[n, h, w, c], |_| rng.gen_range(-1.5..1.5));
        let valid: Option<Vec<bool>> = (k % 3 == 2).then(|| (0..t).map(|_| rng.gen_bool(0.75)).collect());
        for pattern in [Pattern::Block(p), Pattern::Grid(gs), Pattern::Views] {
            let got = run_pattern(&store, &mha, &x, valid.clone(), pattern);
            let rule = allowed(pattern, h, w);
            let want = brute_force(&store, &mha, x.data(), t, c, |i, j| {
                rule(i, j) && valid.as_ref().is_none_or(|m| m[j])
            });
            worst = worst.max(max_diff(&got, &want));
        }
    }
    worst
}

fn covers_once(part: &Partition, t: usize) -> bool {
    let mut seen = vec![0u8; t];
    part.groups.iter().for_each(|&i| seen[i] += 1);
    part.groups.len() == t && seen.iter().all(|&k| k == 1) && part.groups.len() % part.group_len == 0
}

/// Exhaustive coverage sweep over views 1..=3, sides 1..=12 and window
/// sizes 1..=6. Returns the number of partitions checked or the first
/// failure.
pub fn partition_sweep() -> Result<usize, String> {
    let mut checked = 0;
    for n in 1..=3 {
        for h in 1..=12 {
            for w in 1..=12 {
                let t = n * h * w;
                if !covers_once(&view_partition(n, h, w), t) {
                    return Err(format!("views n={n} h={h} w={w}"));
                }
                checked += 1;
                for s in 1..=6 {
                    let divides = h % s == 0 && w % s == 0;
                    match block_partition(n, h, w, s) {
                        Ok(p) => {
                            let same_window = (0..p.group_count()).all(|grp| {
                                let members = p.group(grp);
                                let key = |i: usize| ((i / w) % h / s, i % w / s);
                                members.iter().all(|&i| key(i) == key(members[0]))
                            });
                            if !(divides && covers_once(&p, t) && same_window) {
                                return Err(format!("block n={n} h={h} w={w} p={s}"));
                            }
                            checked += 1;
                        }
                        Err(_) if divides => return Err(format!("block n={n} h={h} w={w} p={s} rejected")),
                        Err(_) => {}
                    }
                    match grid_partition(n, h, w, s) {
                        Ok(p) => {
                            let same_offset = (0..p.group_count()).all(|grp| {
                                let members = p.group(grp);
                                let key = |i: usize| (i / (h * w), (i / w) % h % (h / s), i % w % (w / s));
                                members.iter().all(|&i| key(i) == key(members[0]))
                            });
                            if !(divides && covers_once(&p, t) && same_offset) {
                                return Err(format!("grid n={n} h={h} w={w} g={s}"));
                            }
                            checked += 1;
                        }
                        Err(_) if divides => return Err(format!("grid n={n} h={h} w={w} g={s} rejected")),
                        Err(_) => {}
                    }
                }
            }
        }
    }
    Ok(checked)
}
