use nrt_core::features::FeatureExtractor;
use nrt_kernel::{Graph, ParamStore, Tensor};
use rand::Rng;

fn extractor(channels: usize) -> (ParamStore, FeatureExtractor) {
    let mut store = ParamStore::new();
    let fx = FeatureExtractor::new(&mut store, "features", channels, &mut nrt_kernel::rng(1)).unwrap();
    (store, fx)
}

fn image(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = nrt_kernel::rng(seed);
    (0..h * w * 3).map(|_| rng.gen_range(0.0..1.0)).collect()
}

/// Columns `c0..c0 + w` of an `h x full x 3` image.
fn crop_cols(img: &[f64], h: usize, full: usize, c0: usize, w: usize) -> Vec<f64> {
    (0..h)
        .flat_map(|r| img[(r * full + c0) * 3..(r * full + c0 + w) * 3].to_vec())
        .collect()
}

#[test]
fn views_share_weights_and_permute_with_their_pyramids() {
    let (store, fx) = extractor(8);
    let (a, b) = (image(32, 32, 2), image(32, 32, 3));
    let run = |data: Vec<f64>| {
        let mut g = Graph::inference();
        let t = Tensor::new(&[2, 32, 32, 3], data).unwrap();
        let p = fx.extract(&mut g, &store, &t).unwrap();
        (g.value(p.quarter).clone(), g.value(p.eighth).clone(), g.value(p.sixteenth).clone())
    };
    let ab = run([a.clone(), b.clone()].concat());
    let ba = run([b, a].concat());
    for (x, y) in [(&ab.0, &ba.0), (&ab.1, &ba.1), (&ab.2, &ba.2)] {
        let half = x.len() / 2;
        assert_eq!(&x.data()[..half], &y.data()[half..]);
        assert_eq!(&x.data()[half..], &y.data()[..half]);
    }
    assert_eq!(ab.0.shape(), [2, 8, 8, 8]);
    assert_eq!(ab.1.shape(), [2, 4, 4, 8]);
    assert_eq!(ab.2.shape(), [2, 2, 2, 8]);
}

#[test]
fn four_pixel_shift_moves_quarter_features_by_one_cell() {
    let (store, fx) = extractor(8);
    let (h, full, w) = (16, 52, 48);
    let img = image(h, full, 4);
    let bottom_up = |c0: usize| {
        let mut g = Graph::inference();
        let x = Tensor::new(&[1, h, w, 3], crop_cols(&img, h, full, c0, w)).unwrap().map(|v| 2.0 * v - 1.0);
        let x = g.constant(x);
        let bu = fx.bottom_up(&mut g, &store, x).unwrap();
        g.value(bu.quarter).clone()
    };
    let (a, b) = (bottom_up(0), bottom_up(4));
    let (qh, qw, c) = (4, 12, 8);
    assert_eq!(a.shape(), [1, qh, qw, c]);
    // cells whose receptive field avoids the padded border in both crops
    for r in 0..qh {
        for i in 1..=10 {
            let x = &a.data()[((r * qw) + i + 1) * c..((r * qw) + i + 2) * c];
            let y = &b.data()[((r * qw) + i) * c..((r * qw) + i + 1) * c];
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn sixteen_pixel_shift_moves_the_whole_pyramid_by_one_coarse_cell() {
    let (store, fx) = extractor(8);
    let (h, full, w) = (16, 272, 256);
    let img = image(h, full, 5);
    let quarter = |c0: usize| {
        let mut g = Graph::inference();
        let t = Tensor::new(&[1, h, w, 3], crop_cols(&img, h, full, c0, w)).unwrap();
        let p = fx.extract(&mut g, &store, &t).unwrap();
        g.value(p.quarter).clone()
    };
    let (a, b) = (quarter(0), quarter(16));
    let (qh, qw, c) = (4, 64, 8);
    for r in 0..qh {
        for i in 20..=39 {
            let x = &a.data()[((r * qw) + i + 4) * c..((r * qw) + i + 5) * c];
            let y = &b.data()[((r * qw) + i) * c..((r * qw) + i + 1) * c];
            for (p, q) in x.iter().zip(y) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn odd_sizes_are_padded_then_cropped() {
    let (store, fx) = extractor(8);
    let mut g = Graph::inference();
    let t = Tensor::new(&[1, 20, 36, 3], image(20, 36, 6)).unwrap();
    let p = fx.extract(&mut g, &store, &t).unwrap();
    assert_eq!(g.shape(p.quarter), [1, 5, 9, 8]);
    assert_eq!(g.shape(p.eighth), [1, 3, 5, 8]);
    assert_eq!(g.shape(p.sixteenth), [1, 2, 3, 8]);
    assert!(g.value(p.quarter).is_finite());
}
