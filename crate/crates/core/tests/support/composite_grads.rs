//! Finite-difference checks through every composite module, shared by the
//! gradient tests and the acceptance run.

use nalgebra::Vector3;
use nrt_core::features::FeatureExtractor;
use nrt_core::geometry::{generate_rays, Camera, Ray, RaySamples, SamplePoints};
use nrt_core::global_context::{GlobalContext, GlobalContextConfig};
use nrt_core::local_geometry::{depth_encoding, gather_epipolar, LocalGeometry, LocalGeometryConfig, SourceViews};
use nrt_core::pipeline::{Model, ModelConfig, SourceSet};
use nrt_core::sparse_attention::{EncoderBlock, ViewFeatureGrid};
use nrt_kernel::{grad_check, GradCheckOptions, GradReport, Graph, ParamStore, Tensor, Var};
use rand::Rng;

fn random(shape: &[usize], rng: &mut nrt_kernel::Rng, lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Pushes every parameter (zero-initialised ones included) off its init.
fn jitter(store: &mut ParamStore, rng: &mut nrt_kernel::Rng, amount: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).value.data_mut() {
            *x += rng.gen_range(-amount..amount);
        }
    }
}

fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> nrt_kernel::Result<Var> {
    let mut rng = nrt_kernel::rng(seed);
    let c = g.constant(random(g.shape(y), &mut rng, -1.0, 1.0));
    let p = g.mul(y, c)?;
    g.sum_all(p)
}

/// Key biases shift every score of a query equally, so their true gradient
/// is zero and only rounding noise (about 1e-9) survives differencing.
fn options() -> GradCheckOptions {
    GradCheckOptions {
        floor: 1e-4,
        ..GradCheckOptions::default()
    }
}

fn kernel(e: nrt_core::Error) -> nrt_kernel::KernelError {
    match e {
        nrt_core::Error::Kernel(k) => k,
        other => panic!("{other}"),
    }
}

fn cameras(n: usize, size: usize) -> Vec<Camera> {
    (0..n)
        .map(|i| {
            let x = 0.6 * i as f64 - 0.3;
            Camera::look_at(
                Vector3::new(x, 0.2, 4.0),
                Vector3::zeros(),
                Vector3::new(0.0, 1.0, 0.0),
                50.0,
                size,
                size,
                2.0,
                6.0,
            )
            .unwrap()
        })
        .collect()
}

pub fn encoder_block() -> GradReport {
    let mut rng = nrt_kernel::rng(1);
    let mut store = ParamStore::new();
    let block = EncoderBlock::new(&mut store, "enc", 8, 2, 2, 2, 2, &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    let x = random(&[2, 4, 4, 8], &mut rng, -1.0, 1.0);
    let report = grad_check(
        &mut store,
        |g, s| {
            let v = g.constant(x.clone());
            let grid = ViewFeatureGrid::new(g, v).map_err(kernel)?;
            let out = block.forward(g, s, &grid).map_err(kernel)?;
            weighted_sum(g, out.var, 2)
        },
        &options(),
    )
    .unwrap();
    report
}

fn small_global(store: &mut ParamStore, rng: &mut nrt_kernel::Rng) -> GlobalContext {
    let cfg = GlobalContextConfig {
        width: 8,
        heads: 2,
        encoder_blocks: 1,
        decoder_layers: 2,
        block: 2,
        grid: 2,
        octaves: 2,
        ff_mult: 2,
    };
    GlobalContext::new(store, "global", cfg, rng).unwrap()
}

fn some_rays(cams: &[Camera], count: usize) -> Vec<Ray> {
    let px: Vec<(f64, f64)> = (0..count).map(|i| (1.5 + 2.0 * i as f64, 2.5 + i as f64)).collect();
    generate_rays(&cams[0], &px).unwrap().rays
}

pub fn scene_encoder_and_decoder_stack() -> GradReport {
    let mut rng = nrt_kernel::rng(3);
    let mut store = ParamStore::new();
    let global = small_global(&mut store, &mut rng);
    jitter(&mut store, &mut rng, 0.1);
    let cams = cameras(2, 16);
    let feats = random(&[2, 2, 2, 8], &mut rng, -1.0, 1.0);
    let rays = some_rays(&cams, 3);
    let report = grad_check(
        &mut store,
        |g, s| {
            let f = g.constant(feats.clone());
            let scene = global.encode_scene(g, s, f, &cams).map_err(kernel)?;
            let q = global.embed_rays(g, s, &rays).map_err(kernel)?;
            let (out, _) = global.decode_global(g, s, q, &scene).map_err(kernel)?;
            weighted_sum(g, out, 4)
        },
        &options(),
    )
    .unwrap();
    report
}

pub fn view_and_ray_transformer_stack() -> GradReport {
    let mut rng = nrt_kernel::rng(5);
    let mut store = ParamStore::new();
    let cfg = LocalGeometryConfig {
        width: 8,
        heads: 2,
        blocks: 2,
        octaves: 2,
        ff_mult: 2,
        reuse_view_features: false,
    };
    let local = LocalGeometry::new(&mut store, "local", cfg, &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.1);
    let cams = cameras(2, 16);
    let rays = some_rays(&cams, 2);
    let samples = SamplePoints {
        rays: rays
            .iter()
            .map(|r| RaySamples::from_depths(r, (0..5).map(|i| 2.3 + 0.7 * i as f64).collect()))
            .collect(),
    };
    let quarter = random(&[2, 4, 4, 8], &mut rng, -1.0, 1.0);
    let images = random(&[2, 16, 16, 3], &mut rng, 0.0, 1.0);
    let global = random(&[2, 8], &mut rng, -1.0, 1.0);
    let enc = depth_encoding(&rays, &samples, 2).unwrap();
    // the gathered features are part of the checked graph
    let qid = store.add("quarter", quarter);
    let report = grad_check(
        &mut store,
        |g, s| {
            let views = SourceViews {
                cameras: &cams,
                features: g.param(s, qid),
                images: g.constant(images.clone()),
            };
            let epi = gather_epipolar(g, &samples, &views).map_err(kernel)?;
            assert!(epi.valid.iter().any(|&v| v));
            let fg = g.constant(global.clone());
            let rf = local.run_blocks(g, s, fg, &epi, &enc).map_err(kernel)?;
            let a = weighted_sum(g, rf.feature, 6)?;
            let b = weighted_sum(g, rf.tokens, 7)?;
            g.add(a, b)
        },
        &options(),
    )
    .unwrap();
    report
}

pub fn feature_pyramid_at_16x16() -> GradReport {
    let mut rng = nrt_kernel::rng(7);
    let mut store = ParamStore::new();
    let fpn = FeatureExtractor::new(&mut store, "features", 8, &mut rng).unwrap();
    jitter(&mut store, &mut rng, 0.05);
    let images = random(&[1, 16, 16, 3], &mut rng, 0.0, 1.0);
    let report = grad_check(
        &mut store,
        |g, s| {
            let p = fpn.extract(g, s, &images).map_err(kernel)?;
            let a = weighted_sum(g, p.quarter, 8)?;
            let b = weighted_sum(g, p.eighth, 9)?;
            let c = weighted_sum(g, p.sixteenth, 10)?;
            let ab = g.add(a, b)?;
            g.add(ab, c)
        },
        &options(),
    )
    .unwrap();
    report
}

pub fn full_micro_pipeline_subsample() -> GradReport {
    let config = ModelConfig {
        embed_width: 16,
        heads: 2,
        encoder_blocks: 1,
        decoder_layers: 1,
        vl_blocks: 2,
        n_coarse: 8,
        n_fine: 4,
        fourier_octaves: 2,
        block_size: 2,
        grid_size: 2,
        ..ModelConfig::micro()
    };
    let mut model = Model::new(&config).unwrap();
    let mut rng = nrt_kernel::rng(11);
    jitter(&mut model.store, &mut rng, 0.05);
    let cams = cameras(3, 16);
    let images: Vec<nrt_core::harness::io::Image> = (0..2)
        .map(|_| {
            let mut img = nrt_core::harness::io::Image::filled(16, 16, 3, 0.0);
            img.data.iter_mut().for_each(|x| *x = rng.gen_range(0.0..1.0));
            img
        })
        .collect();
    let sources = SourceSet::new(cams[1..].to_vec(), &images).unwrap();
    let target = &cams[0];
    let rays = generate_rays(target, &[(5.5, 6.5), (8.5, 8.5), (10.5, 7.5)]).unwrap().rays;
    let truth = random(&[3, 3], &mut rng, 0.0, 1.0);

    // Depths are chosen once, from the unperturbed model: refined samples are
    // constants of the loss, as during training.
    let samples = {
        let mut g = Graph::inference();
        let vars = model.net.encode_sources(&mut g, &model.store, &sources).unwrap();
        let batch = model
            .net
            .render_rays(&mut g, &model.store, &vars, &rays, &config.sampling(false, 0, 0))
            .unwrap();
        let merged: Vec<RaySamples> = rays
            .iter()
            .zip(&batch.depths)
            .map(|(r, d)| RaySamples::from_depths(r, d[..12.min(d.len())].to_vec()))
            .collect();
        assert!(merged.iter().all(|r| r.len() == 12), "expected 8 + 4 distinct depths");
        SamplePoints { rays: merged }
    };
    let net = model.net.clone();
    let report = grad_check(
        &mut model.store,
        |g, s| {
            let vars = net.encode_sources(g, s, &sources).map_err(kernel)?;
            let colors = net.render_samples(g, s, &vars, &rays, &samples).map_err(kernel)?;
            g.mse(colors, &truth, None)
        },
        &options().tolerance(1e-3).max_entries(50),
    )
    .unwrap();
    report
}
