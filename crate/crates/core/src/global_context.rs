//! Scene-level context: encode the coarse features of all source views into
//! a token set, then decode one feature per target ray by cross-attention.

use std::f64::consts::PI;

use nrt_kernel::{Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore, Rng, Tensor, Var};

use crate::error::{invalid, Result};
use crate::geometry::{Camera, Ray};
use crate::sparse_attention::{encode_grid, EncoderBlock, ViewFeatureGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GlobalContextConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_layers: usize,
    pub block: usize,
    pub grid: usize,
    pub octaves: usize,
    pub ff_mult: usize,
}

/// Encoded scene tokens, `T x C` with `T = N·h·w`.
#[derive(Debug, Clone)]
pub struct SceneRepresentation {
    pub tokens: Var,
    pub views: usize,
    pub token_count: usize,
}

/// `[sin(a_0..), cos(a_0..)]` with `a = 2^k·π·x_j`, octave-major.
pub fn fourier(x: &[f64], octaves: usize) -> Vec<f64> {
    let args: Vec<f64> = (0..octaves)
        .flat_map(|k| x.iter().map(move |&v| (1u64 << k) as f64 * PI * v))
        .collect();
    args.iter().map(|a| a.sin()).chain(args.iter().map(|a| a.cos())).collect()
}

/// Pre-projection ray feature: Fourier features of the origin followed by
/// those of the direction. Near/far are not read.
pub fn ray_fourier(ray: &Ray, octaves: usize) -> Vec<f64> {
    let mut f = fourier(ray.origin.as_slice(), octaves);
    f.extend(fourier(ray.direction.as_slice(), octaves));
    f
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub norm_query: LayerNorm,
    pub norm_tokens: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: Mlp,
}

#[derive(Debug, Clone)]
pub struct GlobalContext {
    pub config: GlobalContextConfig,
    pub pose: Linear,
    pub position: Linear,
    pub encoder: Vec<EncoderBlock>,
    pub ray: Linear,
    pub decoder: Vec<DecoderLayer>,
}

impl GlobalContext {
    pub fn new(store: &mut ParamStore, name: &str, config: GlobalContextConfig, rng: &mut Rng) -> Result<Self> {
        let GlobalContextConfig {
            width: c,
            heads,
            encoder_blocks,
            decoder_layers,
            block,
            grid,
            octaves,
            ff_mult,
        } = config;
        if c == 0 || heads == 0 || c % heads != 0 || octaves == 0 {
            return Err(invalid(format!("bad global context config {config:?}")));
        }
        let encoder = (0..encoder_blocks)
            .map(|i| EncoderBlock::new(store, &format!("{name}.encoder.{i}"), c, heads, ff_mult, block, grid, rng))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..decoder_layers)
            .map(|i| -> Result<DecoderLayer> {
                let n = format!("{name}.decoder.{i}");
                Ok(DecoderLayer {
                    norm_query: LayerNorm::new(store, &format!("{n}.norm_query"), c),
                    norm_tokens: LayerNorm::new(store, &format!("{n}.norm_tokens"), c),
                    attn: MultiHeadAttention::new(store, &format!("{n}.attn"), c, heads, rng)?,
                    norm_ffn: LayerNorm::new(store, &format!("{n}.norm_ffn"), c),
                    ffn: Mlp::new(store, &format!("{n}.ffn"), &[c, ff_mult * c, c], rng),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            pose: Linear::new(store, &format!("{name}.pose"), 16, c, rng),
            position: Linear::without_bias(store, &format!("{name}.position"), 4 * octaves, c, rng),
            encoder,
            ray: Linear::new(store, &format!("{name}.ray"), 12 * octaves, c, rng),
            decoder,
        })
    }

    /// Zeroes every residual branch of the encoder so it passes its input
    /// through unchanged.
    pub fn zero_encoder_outputs(&self, store: &mut ParamStore) {
        for b in &self.encoder {
            b.zero_output_projections(store);
        }
    }

    /// `features`: `N x h x w x C` coarse features, one camera per view.
    pub fn encode_scene(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        features: Var,
        cameras: &[Camera],
    ) -> Result<SceneRepresentation> {
        let s = g.shape(features).to_vec();
        let c = self.config.width;
        if s.len() != 4 || s[3] != c {
            return Err(invalid(format!("expected N x h x w x {c} features, got {s:?}")));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        if cameras.len() != n {
            return Err(invalid(format!("{n} feature maps but {} cameras", cameras.len())));
        }
        let oct = self.config.octaves;
        let mut coords = Vec::with_capacity(h * w * 4 * oct);
        for r in 0..h {
            for col in 0..w {
                coords.extend(fourier(&[(r as f64 + 0.5) / h as f64, (col as f64 + 0.5) / w as f64], oct));
            }
        }
        let coords = g.constant(Tensor::new(&[h * w, 4 * oct], coords)?);
        let pos = self.position.forward(g, store, coords)?;
        let pose_in: Vec<f64> = cameras.iter().flat_map(|cam| cam.pose_features()).collect();
        let pose_in = g.constant(Tensor::new(&[n, 16], pose_in)?);
        let pose = self.pose.forward(g, store, pose_in)?;
        let pose = g.repeat_axis(pose, 1, h * w)?;
        let x = g.reshape(features, &[n, h * w, c])?;
        let x = g.add_broadcast(x, pos)?;
        let x = g.add(x, pose)?;
        let x = g.reshape(x, &[n, h, w, c])?;
        let grid = ViewFeatureGrid::new(g, x)?;
        let out = encode_grid(g, store, &self.encoder, &grid)?;
        let tokens = g.reshape(out.var, &[n * h * w, c])?;
        Ok(SceneRepresentation {
            tokens,
            views: n,
            token_count: n * h * w,
        })
    }

    /// `R x C` embeddings of `rays`.
    pub fn embed_rays(&self, g: &mut Graph, store: &ParamStore, rays: &[Ray]) -> Result<Var> {
        let oct = self.config.octaves;
        let data: Vec<f64> = rays.iter().flat_map(|r| ray_fourier(r, oct)).collect();
        let x = g.constant(Tensor::new(&[rays.len(), 12 * oct], data)?);
        Ok(self.ray.forward(g, store, x)?)
    }

    /// Cross-attends `R x C` ray embeddings to the scene tokens; returns the
    /// `R x C` global features and each layer's `[1, heads, R, T]` weights.
    pub fn decode_global(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        rays: Var,
        scene: &SceneRepresentation,
    ) -> Result<(Var, Vec<Tensor>)> {
        let c = self.config.width;
        let rs = g.shape(rays).to_vec();
        if rs.len() != 2 || rs[1] != c || g.shape(scene.tokens)[1] != c {
            return Err(invalid(format!(
                "decoder width {c} vs rays {rs:?} and tokens {:?}",
                g.shape(scene.tokens)
            )));
        }
        let r = rs[0];
        let t = scene.token_count;
        let mut x = g.reshape(rays, &[1, r, c])?;
        let tokens = g.reshape(scene.tokens, &[1, t, c])?;
        let mut weights = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let q = layer.norm_query.forward(g, store, x)?;
            let kv = layer.norm_tokens.forward(g, store, tokens)?;
            let (a, w) = layer.attn.forward(g, store, q, kv, None)?;
            weights.push(w);
            x = g.add(x, a)?;
            let n = layer.norm_ffn.forward(g, store, x)?;
            let f = layer.ffn.forward(g, store, n)?;
            x = g.add(x, f)?;
        }
        Ok((g.reshape(x, &[r, c])?, weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;

    #[test]
    fn direction_fourier_features_in_closed_form() {
        let ray = Ray {
            origin: Vector3::zeros(),
            direction: Vector3::new(0.0, 0.0, 1.0),
            near: 1.0,
            far: 2.0,
        };
        let f = ray_fourier(&ray, 2);
        assert_eq!(f.len(), 24);
        let dir = &f[12..];
        let args = [0.0, 0.0, PI, 0.0, 0.0, 2.0 * PI];
        for (i, a) in args.iter().enumerate() {
            assert_eq!(dir[i], a.sin());
            assert_eq!(dir[6 + i], a.cos());
        }
    }

    #[test]
    fn ray_features_ignore_depth_bounds() {
        let a = Ray {
            origin: Vector3::new(0.1, -0.2, 0.3),
            direction: Vector3::new(0.6, 0.0, 0.8),
            near: 1.0,
            far: 2.0,
        };
        let b = Ray { near: 0.5, far: 9.0, ..a };
        assert_eq!(ray_fourier(&a, 6), ray_fourier(&b, 6));
    }
}
