//! Structural invariant and oracle checks run by `nrt verify`.

use nalgebra::Vector3;
use nrt_kernel::{Graph, MultiHeadAttention, ParamStore, Tensor};
use rand::Rng as _;

use crate::adaptive_sampling::kernel_regress;
use crate::error::{invalid, Result};
use crate::geometry::{generate_rays, pixel_centers, Ray, RaySamples, SamplePoints};
use crate::harness::scene::SyntheticScene;
use crate::harness::train::{train, TrainConfig};
use crate::local_geometry::{gather_epipolar, SourceViews};
use crate::pipeline::{Model, SourceSet};
use crate::sparse_attention::{
    block_attention, count_macs, cost_model, grid_attention, interview_attention, CostConfig, EncoderBlock,
    ViewFeatureGrid,
};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl std::fmt::Display for Check {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> Check {
    match f() {
        Ok((passed, detail)) => Check { name, passed, detail },
        Err(e) => Check {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every check against `model` on `scene`.
pub fn run_all(model: &Model, scene: &SyntheticScene) -> Vec<Check> {
    vec![
        check("sparse attention oracle", || sparse_attention_oracle(20, 1e-10)),
        check("cost model vs counter", cost_model_counter),
        check("pdf normalisation", pdf_normalisation),
        check("view permutation invariance", || view_permutation(model, scene, 1e-8)),
        check("attention weight normalisation", || weight_normalisation(model, scene, 1e-6)),
        check("occlusion masking", || occlusion_masking(model, scene)),
        check("chunk size independence", || chunk_independence(model, scene)),
        check("checkpoint round trip", || checkpoint_round_trip(model, scene)),
        check("seeded determinism", || seeded_determinism(model, scene)),
    ]
}

/// Plain-loop multi-head attention of `x: [T, C]` where query `i` may see key
/// `j` iff `allowed(i, j)` and `valid[j]`.
pub fn dense_attention_oracle(
    store: &ParamStore,
    mha: &MultiHeadAttention,
    x: &Tensor,
    valid: Option<&[bool]>,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let (t, c) = (x.shape()[0], x.shape()[1]);
    let project = |lin: &nrt_kernel::Linear, rows: &[f64], n: usize| -> Vec<f64> {
        let w = store.value(lin.weight).data();
        let b = lin.bias.map(|id| store.value(id).data().to_vec());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for o in 0..c {
                let mut s = b.as_ref().map_or(0.0, |b| b[o]);
                for k in 0..c {
                    s += rows[i * c + k] * w[k * c + o];
                }
                out[i * c + o] = s;
            }
        }
        out
    };
    let xd = x.data();
    let (q, k, v) = (project(&mha.query, xd, t), project(&mha.key, xd, t), project(&mha.value, xd, t));
    let heads = mha.heads;
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut att = vec![0.0; t * c];
    for i in 0..t {
        let keys: Vec<usize> = (0..t)
            .filter(|&j| allowed(i, j) && valid.is_none_or(|m| m[j]))
            .collect();
        if keys.is_empty() {
            continue;
        }
        for h in 0..heads {
            let s: Vec<f64> = keys
                .iter()
                .map(|&j| (0..d).map(|e| q[i * c + h * d + e] * k[j * c + h * d + e]).sum::<f64>() * scale)
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (&j, ej) in keys.iter().zip(&e) {
                for f in 0..d {
                    att[i * c + h * d + f] += ej / z * v[j * c + h * d + f];
                }
            }
        }
    }
    project(&mha.output, &att, t)
}

/// Block, grid and inter-view attention against [`dense_attention_oracle`]
/// on `configs` random grids.
pub fn sparse_attention_oracle(configs: usize, tol: f64) -> Result<(bool, String)> {
    let mut rng = nrt_kernel::rng(11);
    let mut worst: f64 = 0.0;
    for case in 0..configs {
        let p = [1, 2, 3][case % 3];
        let gsz = [2, 1, 3, 2][case % 4];
        let l = p * gsz;
        let h = l * rng.gen_range(1..=2);
        let w = l * rng.gen_range(1..=2);
        let n = rng.gen_range(1..=3);
        let heads = [1, 2][case % 2];
        let c = 2 * heads * rng.gen_range(1..=2);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "a", c, heads, &mut rng)?;
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.get_mut(id).value = Tensor::from_fn(&shape, |_| rng.gen_range(-0.8..0.8));
        }
        let t = n * h * w;
        let x = Tensor::from_fn(&[n, h, w, c], |_| rng.gen_range(-1.0..1.0));
        let valid: Option<Vec<bool>> = (case % 5 == 4).then(|| (0..t).map(|_| rng.gen_bool(0.8)).collect());
        let coord = |i: usize| (i / (h * w), (i / w) % h, i % w);
        let flat = x.clone().reshape(&[t, c])?;
        for kind in 0..3 {
            let mut g = Graph::inference();
            let var = g.constant(x.clone());
            let mut grid = ViewFeatureGrid::new(&g, var)?;
            grid.valid = valid.clone();
            let out = match kind {
                0 => block_attention(&mut g, &store, &mha, &grid, p)?,
                1 => grid_attention(&mut g, &store, &mha, &grid, gsz)?,
                _ => interview_attention(&mut g, &store, &mha, &grid)?,
            };
            let got = g.value(out.var).data().to_vec();
            let (sy, sx) = (h / gsz, w / gsz);
            let expect = dense_attention_oracle(&store, &mha, &flat, valid.as_deref(), |i, j| {
                let ((vi, ri, ci), (vj, rj, cj)) = (coord(i), coord(j));
                match kind {
                    0 => vi == vj && ri / p == rj / p && ci / p == cj / p,
                    1 => vi == vj && ri % sy == rj % sy && ci % sx == cj % sx,
                    _ => ri == rj && ci == cj,
                }
            });
            let err = got.iter().zip(&expect).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(err);
        }
    }
    Ok((worst <= tol, format!("{configs} configs x 3 patterns, max |err| {worst:.2e} (tol {tol:.0e})")))
}

/// Instrumented MAC count of one encoder forward pass against the analytic
/// cost model.
pub fn cost_model_counter() -> Result<(bool, String)> {
    let cfg = CostConfig {
        height: 8,
        width: 8,
        channels: 16,
        views: 2,
        block: 2,
        grid: 2,
        heads: 2,
        blocks: 1,
        ff_mult: 2,
    };
    let mut rng = nrt_kernel::rng(5);
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "e", cfg.channels, cfg.heads, cfg.ff_mult, cfg.block, cfg.grid, &mut rng)?;
    let x = Tensor::from_fn(&[cfg.views, cfg.height, cfg.width, cfg.channels], |_| rng.gen_range(-1.0..1.0));
    let (_, macs) = count_macs(|| -> Result<()> {
        let mut g = Graph::inference();
        let var = g.constant(x.clone());
        let grid = ViewFeatureGrid::new(&g, var)?;
        block.forward(&mut g, &store, &grid)?;
        Ok(())
    });
    let model = cost_model(&cfg)?;
    let counted = 2 * macs;
    let rel = (counted as f64 - model.flops as f64).abs() / model.flops as f64;
    Ok((rel <= 0.01, format!("counted {counted} FLOPs, model {} (rel {rel:.2e})", model.flops)))
}

/// Kernel-regressed densities integrate to one.
pub fn pdf_normalisation() -> Result<(bool, String)> {
    let mut rng = nrt_kernel::rng(3);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(4..40);
        let mut depths: Vec<f64> = (0..n).map(|_| rng.gen_range(2.0..6.0)).collect();
        depths.sort_by(f64::total_cmp);
        let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pdf = kernel_regress(&depths, &weights, 0.2, 4 * n, 2.0, 6.0)?;
        worst = worst.max((pdf.integral() - 1.0).abs());
    }
    Ok((worst <= 1e-9, format!("max |integral - 1| {worst:.2e}")))
}

fn test_rays(scene: &SyntheticScene, count: usize) -> Result<(usize, Vec<Ray>)> {
    let index = scene.split.test.first().copied().unwrap_or(0);
    let cam = &scene.cameras()[index];
    let px = pixel_centers(cam.height(), cam.width());
    let step = (px.len() / count).max(1);
    let picked: Vec<(f64, f64)> = px.into_iter().step_by(step).take(count).collect();
    Ok((index, generate_rays(cam, &picked)?.rays))
}

fn render_colors(model: &Model, sources: &SourceSet, rays: &[Ray], chunk: usize) -> Result<Vec<[f64; 3]>> {
    let state = model.scene_state(sources)?;
    let out = model.net.render_ray_list(&model.store, &state, rays, chunk)?;
    Ok(out.into_iter().map(|r| r.color).collect())
}

/// Reordering the source views leaves rendered colours unchanged.
pub fn view_permutation(model: &Model, scene: &SyntheticScene, tol: f64) -> Result<(bool, String)> {
    let sources = scene.source_set()?;
    if sources.len() < 2 {
        return Err(invalid("need at least two source views"));
    }
    let (_, rays) = test_rays(scene, 24)?;
    let base = render_colors(model, &sources, &rays, rays.len())?;
    let reversed: Vec<usize> = (0..sources.len()).rev().collect();
    let rotated: Vec<usize> = (1..sources.len()).chain([0]).collect();
    let mut worst: f64 = 0.0;
    for perm in [reversed, rotated] {
        let other = render_colors(model, &sources.select(&perm)?, &rays, rays.len())?;
        for (a, b) in base.iter().zip(&other) {
            for k in 0..3 {
                worst = worst.max((a[k] - b[k]).abs());
            }
        }
    }
    Ok((worst <= tol, format!("max colour change {worst:.2e} (tol {tol:.0e})")))
}

/// Ray-transformer aggregation weights and decoder attention rows sum to one.
pub fn weight_normalisation(model: &Model, scene: &SyntheticScene, tol: f64) -> Result<(bool, String)> {
    let sources = scene.source_set()?;
    let (_, rays) = test_rays(scene, 16)?;
    let state = model.scene_state(&sources)?;
    let mut worst: f64 = 0.0;
    for r in model.net.render_ray_list(&model.store, &state, &rays, rays.len())? {
        worst = worst.max((r.weights.iter().sum::<f64>() - 1.0).abs());
    }
    let mut g = Graph::inference();
    let vars = state.vars(&mut g);
    let emb = model.net.global.embed_rays(&mut g, &model.store, &rays)?;
    let (_, layers) = model.net.global.decode_global(&mut g, &model.store, emb, &vars.scene)?;
    for w in &layers {
        let lk = *w.shape().last().expect("4-d weights");
        for row in w.data().chunks(lk) {
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    Ok((worst <= tol, format!("max |sum - 1| {worst:.2e} (tol {tol:.0e})")))
}

/// Invalid view projections get exactly zero attention weight, fully occluded
/// samples produce exactly zero local features, and garbage in the masked
/// entries cannot change the output.
pub fn occlusion_masking(model: &Model, scene: &SyntheticScene) -> Result<(bool, String)> {
    let sources = scene.source_set()?;
    let state = model.scene_state(&sources)?;
    let origin = Vector3::new(0.0, 0.0, 1.5);
    let ray = Ray {
        origin,
        direction: Vector3::new(1.0, 0.0, 0.0),
        near: 0.0,
        far: 12.0,
    };
    let depths: Vec<f64> = (0..16).map(|i| 0.75 * i as f64).collect();
    let samples = SamplePoints {
        rays: vec![RaySamples::from_depths(&ray, depths)],
    };
    let local = &model.net.local;
    let width = model.config().embed_width;
    let run = |garbage: bool| -> Result<(Vec<f64>, Tensor, Vec<bool>, Vec<bool>)> {
        let mut g = Graph::inference();
        let vars = state.vars(&mut g);
        let views = SourceViews {
            cameras: &vars.cameras,
            features: vars.quarter,
            images: vars.images,
        };
        let epi = gather_epipolar(&mut g, &samples, &views)?;
        let mut tokens = local.view_tokens(&mut g, &model.store, &epi)?;
        if garbage {
            let mut t = g.value(tokens).clone();
            for (i, row) in t.data_mut().chunks_mut(width).enumerate() {
                if !epi.valid[i] {
                    row.iter_mut().enumerate().for_each(|(k, x)| *x = 1e3 + k as f64);
                }
            }
            tokens = g.constant(t);
        }
        let query = g.constant(Tensor::from_fn(&[epi.samples, width], |i| ((i % 7) as f64 - 3.0) * 0.1));
        let lf = local.view_transformer(&mut g, &model.store, 0, query, tokens, &epi)?;
        Ok((g.value(lf.values).data().to_vec(), lf.weights, epi.valid.clone(), epi.occluded.clone()))
    };
    let (clean, weights, valid, occluded) = run(false)?;
    let (dirty, _, _, _) = run(true)?;
    let n = valid.len() / occluded.len();
    let heads = weights.shape()[1];
    let w = weights.data();
    let mut leaked = 0;
    for (s, _) in occluded.iter().enumerate() {
        for h in 0..heads {
            for v in 0..n {
                if !valid[s * n + v] && w[(s * heads + h) * n + v] != 0.0 {
                    leaked += 1;
                }
            }
        }
    }
    let nonzero_occluded = occluded
        .iter()
        .enumerate()
        .filter(|(s, &o)| o && clean[s * width..(s + 1) * width].iter().any(|&x| x != 0.0))
        .count();
    let identical = clean == dirty;
    let partial = (0..occluded.len()).any(|s| !occluded[s] && valid[s * n..(s + 1) * n].iter().any(|&v| !v));
    let any_occluded = occluded.iter().any(|&o| o);
    let passed = leaked == 0 && nonzero_occluded == 0 && identical && partial && any_occluded;
    Ok((
        passed,
        format!(
            "{} occluded and {} partially visible samples; {leaked} masked weights non-zero, {nonzero_occluded} occluded rows non-zero, garbage-invariant {identical}",
            occluded.iter().filter(|&&o| o).count(),
            (0..occluded.len())
                .filter(|&s| !occluded[s] && valid[s * n..(s + 1) * n].iter().any(|&v| !v))
                .count(),
        ),
    ))
}

/// Rendering in chunks of 1, 7 and all rays gives bit-identical colours.
pub fn chunk_independence(model: &Model, scene: &SyntheticScene) -> Result<(bool, String)> {
    let sources = scene.source_set()?;
    let (_, rays) = test_rays(scene, 21)?;
    let whole = render_colors(model, &sources, &rays, rays.len())?;
    let ones = render_colors(model, &sources, &rays, 1)?;
    let sevens = render_colors(model, &sources, &rays, 7)?;
    let passed = whole == ones && whole == sevens;
    Ok((passed, format!("{} rays at chunk sizes 1, 7, {}", rays.len(), rays.len())))
}

/// Serialising and reloading reproduces every parameter and every rendered
/// colour bit for bit.
pub fn checkpoint_round_trip(model: &Model, scene: &SyntheticScene) -> Result<(bool, String)> {
    let mut buf = Vec::new();
    model.write(&mut buf)?;
    let back = Model::read(buf.as_slice())?;
    let same_params = back.store == model.store && back.config() == model.config();
    let sources = scene.source_set()?;
    let (_, rays) = test_rays(scene, 8)?;
    let same_render = render_colors(model, &sources, &rays, 8)? == render_colors(&back, &sources, &rays, 8)?;
    Ok((
        same_params && same_render,
        format!("{} bytes, parameters equal {same_params}, renders equal {same_render}", buf.len()),
    ))
}

/// Two seeded training runs from the same start give identical loss curves
/// and parameters.
pub fn seeded_determinism(model: &Model, scene: &SyntheticScene) -> Result<(bool, String)> {
    let cfg = TrainConfig {
        steps: 3,
        rays_per_step: 4,
        seed: 19,
        log_every: 0,
        ..TrainConfig::default()
    };
    let (mut a, mut b) = (model.clone(), model.clone());
    let ha = train(&mut a, scene, &cfg)?.history;
    let hb = train(&mut b, scene, &cfg)?.history;
    let fresh = Model::new(model.config())?.store == Model::new(model.config())?.store;
    let passed = ha == hb && a.store == b.store && fresh;
    Ok((passed, format!("{} steps, losses {:?}", ha.len(), ha.iter().map(|r| r.mse).collect::<Vec<_>>())))
}
