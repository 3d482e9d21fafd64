mod support;

use nrt_core::sparse_attention::{
    block_attention, cost_model, cost_model_full, count_macs, crop_grid, pad_grid, CostConfig, EncoderBlock, FullAttentionBlock,
    ViewFeatureGrid,
};
use nrt_kernel::{Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::Rng;
use support::attention_oracle::{allowed, brute_force, max_diff, oracle_sweep, partition_sweep, random_mha, Pattern};

#[test]
fn sparse_patterns_match_brute_force_masked_attention() {
    let err = oracle_sweep(2024, 24);
    assert!(err < 1e-10, "{err:e}");
}

#[test]
fn full_attention_block_attends_everywhere() {
    let mut rng = nrt_kernel::rng(8);
    let mut store = ParamStore::new();
    let block = FullAttentionBlock::new(&mut store, "full", 4, 2, 2, &mut rng).unwrap();
    let x = Tensor::from_fn(&[2, 2, 3, 4], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::inference();
    let var = g.constant(x.clone());
    let grid = ViewFeatureGrid::new(&g, var).unwrap();
    let out = block.forward(&mut g, &store, &grid).unwrap();
    let got = g.value(out.var).data().to_vec();
    // Moving any single token changes every output: nothing is masked.
    let mut y = x.clone();
    y.data_mut()[0] += 0.5;
    let mut g2 = Graph::inference();
    let var = g2.constant(y);
    let grid = ViewFeatureGrid::new(&g2, var).unwrap();
    let out2 = block.forward(&mut g2, &store, &grid).unwrap();
    let moved = g2.value(out2.var).data();
    for tok in 0..12 {
        let a = &got[tok * 4..tok * 4 + 4];
        let b = &moved[tok * 4..tok * 4 + 4];
        assert!(max_diff(a, b) > 0.0, "token {tok} unaffected");
    }
}

#[test]
fn partitions_cover_each_token_once_over_a_sweep() {
    let checked = partition_sweep().unwrap();
    assert!(checked > 1000);
}

#[test]
fn padding_masks_pad_tokens_and_crop_restores_the_grid() {
    let mut rng = nrt_kernel::rng(77);
    let (n, h, w, c, p) = (2, 5, 3, 4, 2);
    let (store, mha) = random_mha(&mut rng, c, 2);
    let x = Tensor::from_fn(&[n, h, w, c], |_| rng.gen_range(-1.0..1.0));
    let mut g = Graph::inference();
    let var = g.constant(x.clone());
    let grid = ViewFeatureGrid::new(&g, var).unwrap();
    let padded = pad_grid(&mut g, &grid, p).unwrap();
    assert_eq!((padded.height, padded.width), (6, 4));
    let mask = padded.valid.clone().expect("padding sets a mask");
    assert_eq!(mask.iter().filter(|&&v| v).count(), n * h * w);
    let attended = block_attention(&mut g, &store, &mha, &padded, p).unwrap();
    let back = crop_grid(&mut g, &attended, h, w).unwrap();
    let got = g.value(back.var).data().to_vec();

    // Oracle: windows are cut on the padded lattice, pad keys never count.
    let (hp, wp) = (6, 4);
    let t = n * hp * wp;
    let mut xp = vec![0.0; t * c];
    for v in 0..n {
        for r in 0..h {
            for col in 0..w {
                let src = ((v * h + r) * w + col) * c;
                let dst = ((v * hp + r) * wp + col) * c;
                xp[dst..dst + c].copy_from_slice(&x.data()[src..src + c]);
            }
        }
    }
    let rule = allowed(Pattern::Block(p), hp, wp);
    let full = brute_force(&store, &mha, &xp, t, c, |i, j| rule(i, j) && mask[j]);
    let mut want = Vec::new();
    for v in 0..n {
        for r in 0..h {
            for col in 0..w {
                let at = ((v * hp + r) * wp + col) * c;
                want.extend_from_slice(&full[at..at + c]);
            }
        }
    }
    assert!(max_diff(&got, &want) < 1e-12);
}

fn desk() -> CostConfig {
    CostConfig {
        height: 8,
        width: 8,
        channels: 8,
        views: 2,
        block: 2,
        grid: 4,
        heads: 2,
        blocks: 2,
        ff_mult: 2,
    }
}

#[test]
fn counter_matches_both_cost_models_exactly() {
    let cfg = desk();
    let mut rng = nrt_kernel::rng(3);
    let mut store = ParamStore::new();
    let blocks: Vec<EncoderBlock> = (0..cfg.blocks)
        .map(|b| {
            EncoderBlock::new(&mut store, &format!("b{b}"), cfg.channels, cfg.heads, cfg.ff_mult, cfg.block, cfg.grid, &mut rng)
                .unwrap()
        })
        .collect();
    let full: Vec<FullAttentionBlock> = (0..cfg.blocks)
        .map(|b| FullAttentionBlock::new(&mut store, &format!("f{b}"), cfg.channels, cfg.heads, cfg.ff_mult, &mut rng).unwrap())
        .collect();
    let x = Tensor::from_fn(&[cfg.views, cfg.height, cfg.width, cfg.channels], |_| rng.gen_range(-1.0..1.0));
    let (_, sparse) = count_macs(|| {
        let mut g = Graph::inference();
        let var = g.constant(x.clone());
        let mut grid = ViewFeatureGrid::new(&g, var).unwrap();
        for b in &blocks {
            grid = b.forward(&mut g, &store, &grid).unwrap();
        }
    });
    let (_, dense) = count_macs(|| {
        let mut g = Graph::inference();
        let var = g.constant(x.clone());
        let mut grid = ViewFeatureGrid::new(&g, var).unwrap();
        for b in &full {
            grid = b.forward(&mut g, &store, &grid).unwrap();
        }
    });
    assert_eq!(2 * sparse, cost_model(&cfg).unwrap().flops);
    assert_eq!(2 * dense, cost_model_full(&cfg).unwrap().flops);
    let params: usize = blocks.iter().map(EncoderBlock::parameter_count).sum();
    assert_eq!(params as u64, cost_model(&cfg).unwrap().parameters);
}

#[test]
fn score_flops_scale_linearly_for_sparse_and_quadratically_for_full() {
    let small = desk();
    let big = CostConfig {
        height: 16,
        width: 16,
        ..small.clone()
    };
    let ratio = |a: u64, b: u64| b as f64 / a as f64;
    let sparse = ratio(cost_model(&small).unwrap().flops_of(".scores"), cost_model(&big).unwrap().flops_of(".scores"));
    let dense = ratio(
        cost_model_full(&small).unwrap().flops_of(".scores"),
        cost_model_full(&big).unwrap().flops_of(".scores"),
    );
    assert!((sparse - 4.0).abs() < 1e-12, "{sparse}");
    assert!((dense - 16.0).abs() < 1e-12, "{dense}");
}

#[test]
fn cost_model_rejects_indivisible_windows() {
    let cfg = CostConfig { block: 3, ..desk() };
    assert!(cost_model(&cfg).is_err());
    assert!(cost_model_full(&cfg).is_ok());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sparse_costs_never_exceed_full_attention_for_large_grids(
        k in 2usize..5, p in 1usize..4, views in 1usize..4, c in 1usize..5,
    ) {
        let side = p * k * 2;
        let cfg = CostConfig {
            height: side,
            width: side,
            channels: 4 * c,
            views,
            block: p,
            grid: p,
            heads: 2,
            blocks: 1,
            ff_mult: 2,
        };
        let sparse = cost_model(&cfg).unwrap().flops_of(".scores");
        let full = cost_model_full(&cfg).unwrap().flops_of(".scores");
        let t = (views * side * side) as u64;
        let l = (2 * p * p + views) as u64;
        prop_assert_eq!(sparse, 2 * 2 * t * l * cfg.channels as u64);
        prop_assert_eq!(full, 2 * 2 * t * t * cfg.channels as u64);
    }
}
