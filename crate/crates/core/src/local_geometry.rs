//! Per-sample aggregation along the target ray.
//!
//! Every sample is projected into each source view, where the 1/4-scale
//! feature map and the full-resolution image are bilinearly sampled. A view
//! transformer cross-attends each sample's token to its valid views, the result
//! is fused with the ray's global feature, and a ray transformer mixes the
//! samples of one ray through self-attention with a learned aggregation token.
//! The aggregation token's attention distribution over samples is the weight
//! vector used for adaptive sampling.

use nrt_kernel::{Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::{invalid, Result};
use crate::geometry::{project_point, Camera, Ray, SamplePoints};
use crate::global_context::fourier;

/// Feature-map stride of the level used for epipolar gathering.
pub const FEATURE_STRIDE: f64 = 4.0;

/// Source-view data shared by all rays of a scene.
#[derive(Debug, Clone, Copy)]
pub struct SourceViews<'a> {
    pub cameras: &'a [Camera],
    /// `N x h x w x C` features at 1/4 scale.
    pub features: Var,
    /// `N x H x W x 3` images, recorded as a constant.
    pub images: Var,
}

/// Values gathered for `R` rays of `S` samples each from `N` views; rows are
/// ordered `(ray, sample, view)`.
#[derive(Debug, Clone)]
pub struct EpipolarFeatures {
    pub rays: usize,
    pub samples: usize,
    pub views: usize,
    /// `R·S·N x C`; invalid rows are zero.
    pub features: Var,
    /// `R·S·N x 3` source colours; invalid rows are zero.
    pub colors: Var,
    /// `R·S·N` in-frustum flags.
    pub valid: Vec<bool>,
    /// `R·S` flags for samples that no view sees.
    pub occluded: Vec<bool>,
}

/// Four bilinear taps on an `h x w` lattice at continuous lattice coordinate
/// `(y, x)`, clamped to the lattice. Returns `(flat index, weight)` pairs.
pub fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ay, ax) = (y - y0 as f64, x - x0 as f64);
    [
        (y0 * w + x0, (1.0 - ay) * (1.0 - ax)),
        (y0 * w + x1, (1.0 - ay) * ax),
        (y1 * w + x0, ay * (1.0 - ax)),
        (y1 * w + x1, ay * ax),
    ]
}

/// Projects every sample into every view and bilinearly samples the 1/4
/// features (lattice node `i` sits at pixel `4i + 2`) and the image.
pub fn gather_epipolar(g: &mut Graph, samples: &SamplePoints, views: &SourceViews) -> Result<EpipolarFeatures> {
    let r = samples.rays.len();
    let s = samples.rays.first().map_or(0, |x| x.len());
    if r == 0 || s == 0 || samples.rays.iter().any(|x| x.len() != s) {
        return Err(invalid("epipolar gathering needs a non-empty, equal sample count per ray"));
    }
    let fs = g.shape(views.features).to_vec();
    let is = g.shape(views.images).to_vec();
    let n = views.cameras.len();
    if fs.len() != 4 || is.len() != 4 || fs[0] != n || is[0] != n || is[3] != 3 {
        return Err(invalid(format!("{n} cameras vs features {fs:?} and images {is:?}")));
    }
    let (fh, fw, c) = (fs[1], fs[2], fs[3]);
    let (ih, iw) = (is[1], is[2]);
    let rows = r * s * n;
    let mut f_idx = Vec::with_capacity(rows * 4);
    let mut f_w = Vec::with_capacity(rows * 4);
    let mut c_idx = Vec::with_capacity(rows * 4);
    let mut c_w = Vec::with_capacity(rows * 4);
    let mut valid = Vec::with_capacity(rows);
    let mut occluded = Vec::with_capacity(r * s);
    for ray in &samples.rays {
        for p in &ray.positions {
            let mut seen = false;
            for (v, cam) in views.cameras.iter().enumerate() {
                let ((row, col), _, ok) = project_point(cam, p);
                valid.push(ok);
                seen |= ok;
                if ok {
                    let ft = bilinear_taps(row / FEATURE_STRIDE - 0.5, col / FEATURE_STRIDE - 0.5, fh, fw);
                    let ct = bilinear_taps(row - 0.5, col - 0.5, ih, iw);
                    for ((fi, fwt), (ci, cwt)) in ft.into_iter().zip(ct) {
                        f_idx.push(v * fh * fw + fi);
                        f_w.push(fwt);
                        c_idx.push(v * ih * iw + ci);
                        c_w.push(cwt);
                    }
                } else {
                    f_idx.extend([0; 4]);
                    f_w.extend([0.0; 4]);
                    c_idx.extend([0; 4]);
                    c_w.extend([0.0; 4]);
                }
            }
            occluded.push(!seen);
        }
    }
    let flat_f = g.reshape(views.features, &[n * fh * fw, c])?;
    let features = g.gather_combine(flat_f, 4, &f_idx, &f_w)?;
    let flat_i = g.reshape(views.images, &[n * ih * iw, 3])?;
    let colors = g.gather_combine(flat_i, 4, &c_idx, &c_w)?;
    Ok(EpipolarFeatures {
        rays: r,
        samples: s,
        views: n,
        features,
        colors,
        valid,
        occluded,
    })
}

/// `R·S x 2·octaves` Fourier features of `(d - near) / (far - near)`.
pub fn depth_encoding(rays: &[Ray], samples: &SamplePoints, octaves: usize) -> Result<Tensor> {
    if rays.len() != samples.rays.len() {
        return Err(invalid(format!("{} rays but {} sample sets", rays.len(), samples.rays.len())));
    }
    let mut data = Vec::new();
    let mut count = 0;
    for (ray, rs) in rays.iter().zip(&samples.rays) {
        for &d in &rs.depths {
            data.extend(fourier(&[(d - ray.near) / (ray.far - ray.near)], octaves));
            count += 1;
        }
    }
    Ok(Tensor::new(&[count, 2 * octaves], data)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalGeometryConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub octaves: usize,
    pub ff_mult: usize,
    /// Run the view transformer in the first block only and reuse its output.
    pub reuse_view_features: bool,
}

#[derive(Debug, Clone)]
pub struct ViewTransformer {
    pub norm_query: LayerNorm,
    pub norm_views: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct RayTransformer {
    pub aggregate: ParamId,
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

/// Output of one view transformer pass.
#[derive(Debug, Clone)]
pub struct LocalFeatures {
    /// `R·S x C`; rows of occluded samples are zero.
    pub values: Var,
    /// `[R·S, heads, 1, N]` cross-attention weights.
    pub weights: Tensor,
}

/// Output of one ray transformer pass.
#[derive(Debug, Clone)]
pub struct RayFeature {
    /// `R x C` aggregation-token outputs.
    pub feature: Var,
    /// `R·S x C` updated sample tokens.
    pub tokens: Var,
    /// `R·S` head-averaged weights of the aggregation token over the samples
    /// of each ray; each ray's slice sums to one.
    pub weights: Vec<f64>,
    /// Raw `[R, heads, S+1, S+1]` self-attention weights; token 0 is the
    /// aggregation token.
    pub raw_weights: Tensor,
}

#[derive(Debug, Clone)]
pub struct LocalGeometry {
    pub config: LocalGeometryConfig,
    pub input: Linear,
    pub depth: Linear,
    pub view: Vec<ViewTransformer>,
    pub fuse: Vec<Linear>,
    pub ray: Vec<RayTransformer>,
}

impl LocalGeometry {
    pub fn new(store: &mut ParamStore, name: &str, config: LocalGeometryConfig, rng: &mut Rng) -> Result<Self> {
        let LocalGeometryConfig {
            width: c,
            heads,
            blocks,
            octaves,
            ff_mult,
            ..
        } = config;
        if c == 0 || heads == 0 || c % heads != 0 || blocks == 0 || octaves == 0 {
            return Err(invalid(format!("bad local geometry config {config:?}")));
        }
        let mut view = Vec::new();
        let mut fuse = Vec::new();
        let mut ray = Vec::new();
        for b in 0..blocks {
            let n = format!("{name}.view.{b}");
            view.push(ViewTransformer {
                norm_query: LayerNorm::new(store, &format!("{n}.norm_query"), c),
                norm_views: LayerNorm::new(store, &format!("{n}.norm_views"), c),
                attn: MultiHeadAttention::new(store, &format!("{n}.attn"), c, heads, rng)?,
                norm_ffn: LayerNorm::new(store, &format!("{n}.norm_ffn"), c),
                ffn: Mlp::new(store, &format!("{n}.ffn"), &[c, ff_mult * c, c], rng),
            });
            fuse.push(Linear::new(store, &format!("{name}.fuse.{b}"), 2 * c, c, rng));
            let n = format!("{name}.ray.{b}");
            ray.push(RayTransformer {
                aggregate: store.add(&format!("{n}.aggregate"), Tensor::zeros(&[c])),
                norm_attn: LayerNorm::new(store, &format!("{n}.norm_attn"), c),
                attn: MultiHeadAttention::new(store, &format!("{n}.attn"), c, heads, rng)?,
                norm_ffn: LayerNorm::new(store, &format!("{n}.norm_ffn"), c),
                ffn: Mlp::new(store, &format!("{n}.ffn"), &[c, ff_mult * c, c], rng),
            });
        }
        Ok(Self {
            config,
            input: Linear::new(store, &format!("{name}.input"), c + 3, c, rng),
            depth: Linear::without_bias(store, &format!("{name}.depth"), 2 * octaves, c, rng),
            view,
            fuse,
            ray,
        })
    }

    /// Projects gathered features and colours to `R·S x N x C` view tokens,
    /// zeroing invalid entries.
    pub fn view_tokens(&self, g: &mut Graph, store: &ParamStore, epi: &EpipolarFeatures) -> Result<Var> {
        let x = g.concat_last(&[epi.features, epi.colors])?;
        let x = self.input.forward(g, store, x)?;
        let keep: Vec<f64> = epi.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
        let x = g.scale_rows(x, &keep)?;
        Ok(g.reshape(x, &[epi.rays * epi.samples, epi.views, self.config.width])?)
    }

    /// Cross-attention of each sample token (`R·S x C`) to its valid view
    /// tokens, followed by a feed-forward sub-layer.
    pub fn view_transformer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        tokens: Var,
        view_tokens: Var,
        epi: &EpipolarFeatures,
    ) -> Result<LocalFeatures> {
        let layer = &self.view[block];
        let c = self.config.width;
        let rs = epi.rays * epi.samples;
        if g.shape(tokens) != [rs, c] {
            return Err(invalid(format!("sample tokens {:?}, expected [{rs}, {c}]", g.shape(tokens))));
        }
        let q = layer.norm_query.forward(g, store, tokens)?;
        let q = g.reshape(q, &[rs, 1, c])?;
        let kv = layer.norm_views.forward(g, store, view_tokens)?;
        let (a, weights) = layer.attn.forward(g, store, q, kv, Some(&epi.valid))?;
        let a = g.reshape(a, &[rs, c])?;
        let y = g.add(tokens, a)?;
        let n = layer.norm_ffn.forward(g, store, y)?;
        let f = layer.ffn.forward(g, store, n)?;
        let y = g.add(y, f)?;
        let keep: Vec<f64> = epi.occluded.iter().map(|&o| if o { 0.0 } else { 1.0 }).collect();
        let values = g.scale_rows(y, &keep)?;
        Ok(LocalFeatures { values, weights })
    }

    /// Concatenates the broadcast `R x C` global feature with the `R·S x C`
    /// local features; returns the `R·S x 2C` concatenation and its projection.
    pub fn fuse_global_local(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        global: Var,
        local: Var,
        samples: usize,
    ) -> Result<(Var, Var)> {
        let c = self.config.width;
        let r = g.shape(global)[0];
        let gl = g.repeat_axis(global, 1, samples)?;
        let gl = g.reshape(gl, &[r * samples, c])?;
        let cat = g.concat_last(&[gl, local])?;
        let out = self.fuse[block].forward(g, store, cat)?;
        Ok((cat, out))
    }

    /// Self-attention along each ray over `[aggregate, s_1 .. s_S]`.
    pub fn ray_transformer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        block: usize,
        tokens: Var,
        rays: usize,
        samples: usize,
    ) -> Result<RayFeature> {
        let layer = &self.ray[block];
        let c = self.config.width;
        let (r, s) = (rays, samples);
        if g.shape(tokens) != [r * s, c] {
            return Err(invalid(format!("ray tokens {:?}, expected [{}, {c}]", g.shape(tokens), r * s)));
        }
        let agg = g.param(store, layer.aggregate);
        let agg = g.reshape(agg, &[1, c])?;
        let all = g.concat_rows(&[tokens, agg])?;
        let order: Vec<usize> = (0..r)
            .flat_map(|i| std::iter::once(r * s).chain(i * s..(i + 1) * s))
            .collect();
        let seq = g.gather_rows(all, &order)?;
        let seq = g.reshape(seq, &[r, s + 1, c])?;
        let n = layer.norm_attn.forward(g, store, seq)?;
        let (a, raw_weights) = layer.attn.forward(g, store, n, n, None)?;
        let y = g.add(seq, a)?;
        let n = layer.norm_ffn.forward(g, store, y)?;
        let f = layer.ffn.forward(g, store, n)?;
        let y = g.add(y, f)?;
        let y = g.reshape(y, &[r * (s + 1), c])?;
        let heads = layer.attn.heads;
        let feature = g.gather_rows(y, &(0..r).map(|i| i * (s + 1)).collect::<Vec<_>>())?;
        let rest: Vec<usize> = (0..r).flat_map(|i| i * (s + 1) + 1..(i + 1) * (s + 1)).collect();
        let tokens = g.gather_rows(y, &rest)?;
        let weights = aggregate_weights(&raw_weights, r, heads, s);
        Ok(RayFeature {
            feature,
            tokens,
            weights,
            raw_weights,
        })
    }

    /// Alternates view and ray transformers. Block 1 is seeded with the
    /// global feature plus the depth encoding (`R·S x 2·octaves`).
    pub fn run_blocks(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        global: Var,
        epi: &EpipolarFeatures,
        depth_encoding: &Tensor,
    ) -> Result<RayFeature> {
        let (r, s, c) = (epi.rays, epi.samples, self.config.width);
        if g.shape(global) != [r, c] {
            return Err(invalid(format!("global feature {:?}, expected [{r}, {c}]", g.shape(global))));
        }
        let view_tokens = self.view_tokens(g, store, epi)?;
        let enc = g.constant(depth_encoding.clone());
        let enc = self.depth.forward(g, store, enc)?;
        let seed = g.repeat_axis(global, 1, s)?;
        let seed = g.reshape(seed, &[r * s, c])?;
        let mut tokens = g.add(seed, enc)?;
        let mut first_local: Option<Var> = None;
        let mut out = None;
        for b in 0..self.config.blocks {
            let local = match first_local {
                Some(l) if self.config.reuse_view_features => l,
                _ => {
                    let l = self.view_transformer(g, store, b, tokens, view_tokens, epi)?.values;
                    first_local.get_or_insert(l);
                    l
                }
            };
            let (_, fused) = self.fuse_global_local(g, store, b, global, local, s)?;
            let rf = self.ray_transformer(g, store, b, fused, r, s)?;
            tokens = rf.tokens;
            out = Some(rf);
        }
        Ok(out.expect("at least one block"))
    }
}

/// Head-averaged attention of the aggregation token (query 0) over keys
/// `1..=S`, renormalised per ray.
pub fn aggregate_weights(raw: &Tensor, rays: usize, heads: usize, samples: usize) -> Vec<f64> {
    let l = samples + 1;
    let d = raw.data();
    let mut out = Vec::with_capacity(rays * samples);
    for r in 0..rays {
        let mut w = vec![0.0; samples];
        for h in 0..heads {
            let row = &d[((r * heads + h) * l) * l..((r * heads + h) * l + 1) * l];
            for (j, wj) in w.iter_mut().enumerate() {
                *wj += row[j + 1] / heads as f64;
            }
        }
        let z: f64 = w.iter().sum();
        if z > 0.0 {
            w.iter_mut().for_each(|x| *x /= z);
        } else {
            w.iter_mut().for_each(|x| *x = 1.0 / samples as f64);
        }
        out.extend(w);
    }
    out
}
