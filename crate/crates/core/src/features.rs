//! Shared-weight convolutional feature pyramid at 1/4, 1/8 and 1/16 scale.
//!
//! Bottom-up: a stride-2 stem to 1/2 followed by three stride-2 stages. Top-down:
//! 1×1 laterals merged with nearest-neighbour upsampling, then a 3×3 output
//! head per level. All convolutions use reflection padding. Inputs whose sides
//! are not multiples of 16 are reflection-padded at the bottom/right and the
//! outputs cropped back to `ceil(side / scale)`.

use nrt_kernel::param::glorot;
use nrt_kernel::{Graph, ParamId, ParamStore, Rng, Tensor, Var};

use crate::error::{invalid, Result};

/// Square-kernel convolution layer.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let fan_in = kernel * kernel * cin;
        let weight = store.add(&format!("{name}.weight"), glorot(&[fan_in, cout], fan_in, cout, rng));
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            kernel,
            stride,
            cin,
            cout,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        Ok(g.conv2d(x, w, b, self.kernel, self.stride)?)
    }

    pub fn parameter_count(&self) -> usize {
        self.kernel * self.kernel * self.cin * self.cout + self.cout
    }
}

/// Per-view feature maps, each `N x h x w x C`.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub quarter: Var,
    pub eighth: Var,
    /// Produced for completeness; nothing downstream reads it.
    pub sixteenth: Var,
}

/// Bottom-up activations at 1/2, 1/4, 1/8, 1/16 before the top-down merge.
#[derive(Debug, Clone)]
pub struct BottomUp {
    pub half: Var,
    pub quarter: Var,
    pub eighth: Var,
    pub sixteenth: Var,
}

#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    pub stem: Conv,
    pub down: [Conv; 3],
    pub lateral: [Conv; 3],
    pub head: [Conv; 3],
    pub channels: usize,
}

pub const MIN_SIDE: usize = 16;

impl FeatureExtractor {
    /// Parameter names are prefixed with `name`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Result<Self> {
        if channels < 2 {
            return Err(invalid("feature width must be at least 2"));
        }
        let half = channels / 2;
        let stem = Conv::new(store, &format!("{name}.stem"), 3, half, 3, 2, rng);
        let down = [
            Conv::new(store, &format!("{name}.down4"), half, channels, 3, 2, rng),
            Conv::new(store, &format!("{name}.down8"), channels, channels, 3, 2, rng),
            Conv::new(store, &format!("{name}.down16"), channels, channels, 3, 2, rng),
        ];
        let lateral = [
            Conv::new(store, &format!("{name}.lateral4"), channels, channels, 1, 1, rng),
            Conv::new(store, &format!("{name}.lateral8"), channels, channels, 1, 1, rng),
            Conv::new(store, &format!("{name}.lateral16"), channels, channels, 1, 1, rng),
        ];
        let head = [
            Conv::new(store, &format!("{name}.head4"), channels, channels, 3, 1, rng),
            Conv::new(store, &format!("{name}.head8"), channels, channels, 3, 1, rng),
            Conv::new(store, &format!("{name}.head16"), channels, channels, 3, 1, rng),
        ];
        Ok(Self {
            stem,
            down,
            lateral,
            head,
            channels,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.stem.parameter_count()
            + [&self.down, &self.lateral, &self.head]
                .iter()
                .flat_map(|a| a.iter())
                .map(Conv::parameter_count)
                .sum::<usize>()
    }

    /// Bottom-up path only, on an input in `[-1, 1]` whose sides are
    /// multiples of 16.
    pub fn bottom_up(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<BottomUp> {
        let h = self.stem.forward(g, store, x)?;
        let half = g.gelu(h)?;
        let mut levels = [half; 3];
        let mut cur = half;
        for (i, conv) in self.down.iter().enumerate() {
            let y = conv.forward(g, store, cur)?;
            cur = g.gelu(y)?;
            levels[i] = cur;
        }
        Ok(BottomUp {
            half,
            quarter: levels[0],
            eighth: levels[1],
            sixteenth: levels[2],
        })
    }

    /// `images`: `N x H x W x 3` with values in `[0, 1]` and `H, W >= 16`.
    pub fn extract(&self, g: &mut Graph, store: &ParamStore, images: &Tensor) -> Result<FeaturePyramid> {
        let s = images.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(invalid(format!("expected N x H x W x 3 images, got {s:?}")));
        }
        let (n, h, w) = (s[0], s[1], s[2]);
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(invalid(format!("image {h}x{w} is smaller than {MIN_SIDE}x{MIN_SIDE}")));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("pixel values must lie in [0, 1]"));
        }
        let (hp, wp) = (h.div_ceil(16) * 16, w.div_ceil(16) * 16);
        let x = g.constant(images.map(|v| 2.0 * v - 1.0));
        let x = if (hp, wp) == (h, w) {
            x
        } else {
            let idx = pad_indices(n, h, w, hp, wp);
            let flat = g.reshape(x, &[n * h * w, 3])?;
            let padded = g.gather_rows(flat, &idx)?;
            g.reshape(padded, &[n, hp, wp, 3])?
        };
        let bu = self.bottom_up(g, store, x)?;
        let l16 = self.lateral[2].forward(g, store, bu.sixteenth)?;
        let l8 = self.lateral[1].forward(g, store, bu.eighth)?;
        let up = g.upsample2x(l16)?;
        let p8 = g.add(l8, up)?;
        let l4 = self.lateral[0].forward(g, store, bu.quarter)?;
        let up = g.upsample2x(p8)?;
        let p4 = g.add(l4, up)?;
        let quarter = self.head[0].forward(g, store, p4)?;
        let eighth = self.head[1].forward(g, store, p8)?;
        let sixteenth = self.head[2].forward(g, store, l16)?;
        Ok(FeaturePyramid {
            quarter: crop(g, quarter, h.div_ceil(4), w.div_ceil(4))?,
            eighth: crop(g, eighth, h.div_ceil(8), w.div_ceil(8))?,
            sixteenth: crop(g, sixteenth, h.div_ceil(16), w.div_ceil(16))?,
        })
    }
}

fn pad_indices(n: usize, h: usize, w: usize, hp: usize, wp: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(n * hp * wp);
    for v in 0..n {
        for r in 0..hp {
            let rr = nrt_kernel::reflect_index(r as isize, h);
            for c in 0..wp {
                let cc = nrt_kernel::reflect_index(c as isize, w);
                idx.push((v * h + rr) * w + cc);
            }
        }
    }
    idx
}

fn crop(g: &mut Graph, x: Var, h: usize, w: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s[1] == h && s[2] == w {
        return Ok(x);
    }
    let mut idx = Vec::with_capacity(s[0] * h * w);
    for v in 0..s[0] {
        for r in 0..h {
            for c in 0..w {
                idx.push((v * s[1] + r) * s[2] + c);
            }
        }
    }
    let flat = g.reshape(x, &[s[0] * s[1] * s[2], s[3]])?;
    let out = g.gather_rows(flat, &idx)?;
    Ok(g.reshape(out, &[s[0], h, w, s[3]])?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pyramid_shapes_for_64_and_padded_40() {
        let mut rng = nrt_kernel::rng(0);
        let mut store = ParamStore::new();
        let fe = FeatureExtractor::new(&mut store, "features", 8, &mut rng).unwrap();
        let mut g = Graph::inference();
        let p = fe.extract(&mut g, &store, &Tensor::full(&[2, 64, 64, 3], 0.5)).unwrap();
        assert_eq!(g.shape(p.quarter), &[2, 16, 16, 8]);
        assert_eq!(g.shape(p.eighth), &[2, 8, 8, 8]);
        assert_eq!(g.shape(p.sixteenth), &[2, 4, 4, 8]);
        let p = fe.extract(&mut g, &store, &Tensor::full(&[1, 40, 20, 3], 0.5)).unwrap();
        assert_eq!(g.shape(p.quarter), &[1, 10, 5, 8]);
        assert_eq!(g.shape(p.eighth), &[1, 5, 3, 8]);
        assert_eq!(g.shape(p.sixteenth), &[1, 3, 2, 8]);
    }

    #[test]
    fn rejects_small_or_out_of_range_images() {
        let mut rng = nrt_kernel::rng(0);
        let mut store = ParamStore::new();
        let fe = FeatureExtractor::new(&mut store, "features", 4, &mut rng).unwrap();
        let mut g = Graph::inference();
        assert!(fe.extract(&mut g, &store, &Tensor::zeros(&[1, 8, 32, 3])).is_err());
        assert!(fe.extract(&mut g, &store, &Tensor::full(&[1, 16, 16, 3], 1.5)).is_err());
        assert!(fe.extract(&mut g, &store, &Tensor::zeros(&[1, 16, 16, 4])).is_err());
    }
}
