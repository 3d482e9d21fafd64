use crate::counter;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::linalg::{gemm, Mat};
use crate::tensor::Tensor;

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    /// `x[.., K] · w[K, N] -> [.., N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x), self.shape(w));
        if ws.len() != 2 || xs.is_empty() || *xs.last().unwrap() != ws[0] {
            return Err(shape_err("matmul", format!("{xs:?} · {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.value(x).rows();
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut data = vec![0.0; rows * n];
        gemm(
            Mat::new(self.value(x).data(), rows, k),
            Mat::new(self.value(w).data(), k, n),
            &mut data,
            0.0,
        );
        counter::add((rows * k * n) as u64);
        let out = Tensor::new(&out_shape, data)?;
        self.push("matmul", out, &[x, w], move |inp, _, g| {
            let (xv, wv) = (inp[0], inp[1]);
            let mut gx = Tensor::zeros(xv.shape());
            gemm(Mat::new(g.data(), rows, n), Mat::new(wv.data(), k, n).t(), gx.data_mut(), 0.0);
            let mut gw = Tensor::zeros(wv.shape());
            gemm(Mat::new(xv.data(), rows, k).t(), Mat::new(g.data(), rows, n), gw.data_mut(), 0.0);
            vec![Some(gx), Some(gw)]
        })
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gamma`/`beta` (both `[C]`).
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "layernorm",
                format!("x {:?}, gamma {:?}, beta {:?}", self.shape(x), self.shape(gamma), self.shape(beta)),
            ));
        }
        let rows = self.value(x).rows();
        let xv = self.value(x);
        let (gm, bt) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * c];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * c];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYERNORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * gm[j] + bt[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        self.push("layernorm", out, &[x, gamma, beta], move |inp, _, g| {
            let gm = inp[1].data();
            let gd = g.data();
            let mut gx = Tensor::zeros(inp[0].shape());
            let mut gg = Tensor::zeros(&[c]);
            let mut gb = Tensor::zeros(&[c]);
            let mut dxhat = vec![0.0; c];
            for r in 0..rows {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..c {
                    let gv = gd[r * c + j];
                    let h = xhat[r * c + j];
                    gg.data_mut()[j] += gv * h;
                    gb.data_mut()[j] += gv;
                    dxhat[j] = gv * gm[j];
                    m1 += dxhat[j];
                    m2 += dxhat[j] * h;
                }
                m1 /= c as f64;
                m2 /= c as f64;
                let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                for j in 0..c {
                    dst[j] = inv_std[r] * (dxhat[j] - m1 - xhat[r * c + j] * m2);
                }
            }
            vec![Some(gx), Some(gg), Some(gb)]
        })
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, &[x], |inp, _, g| {
            let data = inp[0].data().iter().zip(g.data()).map(|(&x, &g)| g * gelu_grad(x)).collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, &[x], |inp, _, g| {
            let data = inp[0]
                .data()
                .iter()
                .zip(g.data())
                .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                .collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, &[x], |_, out, g| {
            let data = out.data().iter().zip(g.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
            vec![Some(Tensor::new(g.shape(), data).unwrap())]
        })
    }

    /// Softmax over the last axis (row max subtracted first).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push("softmax", out, &[x], move |_, out, g| {
            let mut gi = Tensor::zeros(out.shape());
            for ((p, gr), dst) in out
                .data()
                .chunks(c)
                .zip(g.data().chunks(c))
                .zip(gi.data_mut().chunks_mut(c))
            {
                let dot: f64 = p.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    dst[j] = p[j] * (gr[j] - dot);
                }
            }
            vec![Some(gi)]
        })
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}
