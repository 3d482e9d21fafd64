use nalgebra::Vector3;
use nrt_core::geometry::{generate_rays, Camera, RaySamples, SamplePoints};
use nrt_core::local_geometry::{
    depth_encoding, gather_epipolar, LocalGeometry, LocalGeometryConfig, RayFeature, SourceViews,
};
use nrt_kernel::{Graph, ParamStore, Tensor};
use rand::Rng;

const C: usize = 16;

fn model(seed: u64) -> (ParamStore, LocalGeometry) {
    let mut store = ParamStore::new();
    let mut rng = nrt_kernel::rng(seed);
    let cfg = LocalGeometryConfig {
        width: C,
        heads: 4,
        blocks: 2,
        octaves: 4,
        ff_mult: 2,
        reuse_view_features: false,
    };
    let lg = LocalGeometry::new(&mut store, "local", cfg, &mut rng).unwrap();
    // the aggregation token starts at zero; move it so readout weights are generic
    for id in store.ids().collect::<Vec<_>>() {
        for x in store.get_mut(id).value.data_mut() {
            *x += rng.gen_range(-0.05..0.05);
        }
    }
    (store, lg)
}

fn cameras() -> Vec<Camera> {
    [[-1.0, 0.3, 4.0], [0.2, -0.4, 4.2], [1.1, 0.5, 3.8]]
        .iter()
        .map(|&e| {
            Camera::look_at(Vector3::from(e), Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 50.0, 16, 16, 2.0, 6.0)
                .unwrap()
        })
        .collect()
}

struct Inputs {
    cams: Vec<Camera>,
    quarter: Tensor,
    images: Tensor,
    global: Tensor,
}

fn inputs(seed: u64) -> Inputs {
    let mut rng = nrt_kernel::rng(seed);
    Inputs {
        cams: cameras(),
        quarter: Tensor::from_fn(&[3, 4, 4, C], |_| rng.gen_range(-1.0..1.0)),
        images: Tensor::from_fn(&[3, 16, 16, 3], |_| rng.gen_range(0.0..1.0)),
        global: Tensor::from_fn(&[2, C], |_| rng.gen_range(-1.0..1.0)),
    }
}

fn samples(depths: &[f64]) -> (Vec<nrt_core::geometry::Ray>, SamplePoints) {
    let target = Camera::look_at(
        Vector3::new(0.0, 0.0, 4.5),
        Vector3::zeros(),
        Vector3::new(0.0, 1.0, 0.0),
        40.0,
        16,
        16,
        2.0,
        6.0,
    )
    .unwrap();
    let rays = generate_rays(&target, &[(7.5, 8.5), (3.5, 10.5)]).unwrap().rays;
    let pts = SamplePoints {
        rays: rays.iter().map(|r| RaySamples::from_depths(r, depths.to_vec())).collect(),
    };
    (rays, pts)
}

fn run(lg: &LocalGeometry, store: &ParamStore, x: &Inputs, depths: &[f64]) -> (Tensor, RayFeature, Vec<bool>, Tensor) {
    let (rays, pts) = samples(depths);
    let mut g = Graph::inference();
    let views = SourceViews {
        cameras: &x.cams,
        features: g.constant(x.quarter.clone()),
        images: g.constant(x.images.clone()),
    };
    let epi = gather_epipolar(&mut g, &pts, &views).unwrap();
    let enc = depth_encoding(&rays, &pts, 4).unwrap();
    let global = g.constant(x.global.clone());
    let vt = lg.view_tokens(&mut g, store, &epi).unwrap();
    let seed = g.constant(Tensor::from_fn(&[epi.rays * epi.samples, C], |i| x.global.data()[(i / C / epi.samples) * C + i % C]));
    let lf = lg.view_transformer(&mut g, store, 0, seed, vt, &epi).unwrap();
    let rf = lg.run_blocks(&mut g, store, global, &epi, &enc).unwrap();
    let feature = g.value(rf.feature).clone();
    (feature, rf, epi.valid.clone(), lf.weights)
}

const DEPTHS: [f64; 6] = [2.2, 2.9, 3.4, 4.1, 4.8, 5.6];

#[test]
fn view_attention_is_a_distribution_over_valid_views() {
    let (store, lg) = model(1);
    let x = inputs(2);
    let (_, rf, valid, w) = run(&lg, &store, &x, &DEPTHS);
    let heads = 4;
    let rows = valid.len() / 3;
    assert_eq!(w.len(), rows * heads * 3);
    for r in 0..rows {
        for h in 0..heads {
            let row = &w.data()[(r * heads + h) * 3..(r * heads + h + 1) * 3];
            if !valid[r * 3..r * 3 + 3].iter().any(|&v| v) {
                assert!(row.iter().all(|&v| v == 0.0));
                continue;
            }
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            for (k, &v) in row.iter().enumerate() {
                assert!(v >= 0.0);
                if !valid[r * 3 + k] {
                    assert_eq!(v, 0.0);
                }
            }
        }
    }
    for ray in rf.weights.chunks(DEPTHS.len()) {
        assert!((ray.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(ray.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn permuting_source_views_leaves_the_ray_feature_unchanged() {
    let (store, lg) = model(3);
    let x = inputs(4);
    let (base, ..) = run(&lg, &store, &x, &DEPTHS);
    let perm = [2, 0, 1];
    let per_view = |t: &Tensor| {
        let n = t.len() / 3;
        Tensor::new(t.shape(), perm.iter().flat_map(|&v| t.data()[v * n..(v + 1) * n].to_vec()).collect()).unwrap()
    };
    let y = Inputs {
        cams: perm.iter().map(|&v| x.cams[v].clone()).collect(),
        quarter: per_view(&x.quarter),
        images: per_view(&x.images),
        global: x.global.clone(),
    };
    let (other, ..) = run(&lg, &store, &y, &DEPTHS);
    for (a, b) in base.data().iter().zip(other.data()) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

#[test]
fn permuting_samples_permutes_the_weights() {
    let (store, lg) = model(5);
    let x = inputs(6);
    let (f0, rf0, ..) = run(&lg, &store, &x, &DEPTHS);
    let perm = [3, 0, 5, 1, 4, 2];
    let shuffled: Vec<f64> = perm.iter().map(|&i| DEPTHS[i]).collect();
    let (f1, rf1, ..) = run(&lg, &store, &x, &shuffled);
    let s = DEPTHS.len();
    for r in 0..2 {
        for (j, &i) in perm.iter().enumerate() {
            assert!((rf1.weights[r * s + j] - rf0.weights[r * s + i]).abs() < 1e-12);
        }
    }
    for (a, b) in f0.data().iter().zip(f1.data()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn fused_rows_start_with_the_global_feature() {
    let (store, lg) = model(7);
    let mut rng = nrt_kernel::rng(8);
    let global = Tensor::from_fn(&[3, C], |_| rng.gen_range(-1.0..1.0));
    let local = Tensor::from_fn(&[3 * 5, C], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::inference();
    let gv = g.constant(global.clone());
    let lv = g.constant(local.clone());
    let (cat, out) = lg.fuse_global_local(&mut g, &store, 1, gv, lv, 5).unwrap();
    assert_eq!(g.shape(out), [15, C]);
    let cat = g.value(cat);
    for row in 0..15 {
        let r = &cat.data()[row * 2 * C..(row + 1) * 2 * C];
        assert_eq!(&r[..C], &global.data()[(row / 5) * C..(row / 5 + 1) * C]);
        assert_eq!(&r[C..], &local.data()[row * C..(row + 1) * C]);
    }
}

#[test]
fn samples_seen_by_no_view_contribute_nothing() {
    let (store, lg) = model(9);
    let x = inputs(10);
    // depths beyond every source frustum
    let far = [40.0, 41.0, 42.0];
    let (rays, mut pts) = samples(&far);
    for (r, s) in rays.iter().zip(pts.rays.iter_mut()) {
        *s = RaySamples::from_depths(r, far.to_vec());
    }
    let mut g = Graph::inference();
    let views = SourceViews {
        cameras: &x.cams,
        features: g.constant(x.quarter.clone()),
        images: g.constant(x.images.clone()),
    };
    let epi = gather_epipolar(&mut g, &pts, &views).unwrap();
    assert!(epi.occluded.iter().all(|&o| o));
    assert!(epi.valid.iter().all(|&v| !v));
    let vt = lg.view_tokens(&mut g, &store, &epi).unwrap();
    let tokens = g.constant(Tensor::from_fn(&[6, C], |i| i as f64 * 0.01));
    let lf = lg.view_transformer(&mut g, &store, 0, tokens, vt, &epi).unwrap();
    assert!(g.value(lf.values).data().iter().all(|&v| v == 0.0));
    assert!(lf.weights.data().iter().all(|&v| v == 0.0));
}
