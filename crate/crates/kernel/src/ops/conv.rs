//! NHWC 2-D convolution (im2col + gemm) and nearest-neighbour upsampling.

use crate::counter;
use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, Mat};
use crate::tensor::Tensor;

/// Reflects an index into `0..n` without repeating the edge sample.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Output spatial extent for a square kernel with `kernel/2` padding.
pub fn conv_out_size(n: usize, kernel: usize, stride: usize) -> usize {
    let pad = kernel / 2;
    (n + 2 * pad - kernel) / stride + 1
}

impl Graph {
    /// `x: [N, H, W, Cin]`, `w: [k·k·Cin, Cout]` (rows ordered ky, kx, cin),
    /// `b: [Cout]`. Reflection padding of `k/2` on every side.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, kernel: usize, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("conv2d", format!("input {xs:?} is not NHWC")));
        }
        if kernel % 2 == 0 || stride == 0 {
            return Err(invalid("conv2d", format!("kernel {kernel}, stride {stride}")));
        }
        let (n, h, wd, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let pad = kernel / 2;
        let kk = kernel * kernel * cin;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[0] != kk {
            return Err(shape_err("conv2d", format!("weight {ws:?}, expected [{kk}, Cout]")));
        }
        let cout = ws[1];
        if self.shape(b) != [cout] {
            return Err(shape_err("conv2d", format!("bias {:?}, expected [{cout}]", self.shape(b))));
        }
        let ho = conv_out_size(h, kernel, stride);
        let wo = conv_out_size(wd, kernel, stride);
        let rows = n * ho * wo;

        // source offset (into x, in units of pixels) for every im2col tap
        let mut taps = Vec::with_capacity(rows * kernel * kernel);
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for ky in 0..kernel {
                        let sy = reflect_index((oy * stride + ky) as isize - pad as isize, h);
                        for kx in 0..kernel {
                            let sx = reflect_index((ox * stride + kx) as isize - pad as isize, wd);
                            taps.push((ni * h + sy) * wd + sx);
                        }
                    }
                }
            }
        }
        let xd = self.value(x).data();
        let mut cols = vec![0.0; rows * kk];
        for (t, &src) in taps.iter().enumerate() {
            cols[t * cin..(t + 1) * cin].copy_from_slice(&xd[src * cin..(src + 1) * cin]);
        }
        let mut out = vec![0.0; rows * cout];
        let bd = self.value(b).data();
        for r in 0..rows {
            out[r * cout..(r + 1) * cout].copy_from_slice(bd);
        }
        gemm(Mat::new(&cols, rows, kk), Mat::new(self.value(w).data(), kk, cout), &mut out, 1.0);
        counter::add((rows * kk * cout) as u64);
        let out = Tensor::new(&[n, ho, wo, cout], out)?;
        self.push("conv2d", out, &[x, w, b], move |inp, _, g| {
            let gd = g.data();
            let mut gcols = vec![0.0; rows * kk];
            gemm(Mat::new(gd, rows, cout), Mat::new(inp[1].data(), kk, cout).t(), &mut gcols, 0.0);
            let mut gx = Tensor::zeros(inp[0].shape());
            let gxd = gx.data_mut();
            for (t, &src) in taps.iter().enumerate() {
                for c in 0..cin {
                    gxd[src * cin + c] += gcols[t * cin + c];
                }
            }
            let mut gw = Tensor::zeros(inp[1].shape());
            gemm(Mat::new(&cols, rows, kk).t(), Mat::new(gd, rows, cout), gw.data_mut(), 0.0);
            let mut gb = Tensor::zeros(&[cout]);
            for row in gd.chunks(cout) {
                for (o, v) in gb.data_mut().iter_mut().zip(row) {
                    *o += v;
                }
            }
            vec![Some(gx), Some(gw), Some(gb)]
        })
    }

    /// Nearest-neighbour ×2 upsampling of `[N, H, W, C]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("upsample2x", format!("input {xs:?} is not NHWC")));
        }
        let (n, h, w, c) = (xs[0], xs[1], xs[2], xs[3]);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * 4 * h * w * c];
        for ni in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let s = ((ni * h + y / 2) * w + xx / 2) * c;
                    let d = ((ni * 2 * h + y) * 2 * w + xx) * c;
                    out[d..d + c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let out = Tensor::new(&[n, 2 * h, 2 * w, c], out)?;
        self.push("upsample2x", out, &[x], move |_, _, g| {
            let mut gi = Tensor::zeros(&[n, h, w, c]);
            let gd = g.data();
            let dst = gi.data_mut();
            for ni in 0..n {
                for y in 0..2 * h {
                    for xx in 0..2 * w {
                        let s = ((ni * h + y / 2) * w + xx / 2) * c;
                        let d = ((ni * 2 * h + y) * 2 * w + xx) * c;
                        for k in 0..c {
                            dst[s + k] += gd[d + k];
                        }
                    }
                }
            }
            vec![Some(gi)]
        })
    }
}
