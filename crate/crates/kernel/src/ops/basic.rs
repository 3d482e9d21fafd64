//! Element-wise arithmetic, shape manipulation and reductions.

use crate::error::{invalid, shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::{inverse_permutation, Tensor};

/// Sentinel row index meaning "produce a zero row".
pub const ZERO_ROW: usize = usize::MAX;

fn same_shape(g: &Graph, op: &'static str, a: Var, b: Var) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(shape_err(op, format!("{:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}

impl Graph {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push("add", out, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.clone())])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push("sub", out, &[a, b], |_, _, g| vec![Some(g.clone()), Some(g.map(|v| -v))])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push("mul", out, &[a, b], |inp, _, g| {
            vec![
                Some(zip_map(g, inp[1], |g, y| g * y)),
                Some(zip_map(g, inp[0], |g, x| g * x)),
            ]
        })
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * s);
        self.push("scale", out, &[a], move |_, _, g| vec![Some(g.map(|v| v * s))])
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (e.g. a bias).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", format!("{sa:?} + {sb:?}")));
        }
        let inner = self.value(b).len().max(1);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, x) in chunk.iter_mut().zip(&bv) {
                *o += x;
            }
        }
        let b_shape = self.shape(b).to_vec();
        self.push("add_broadcast", out, &[a, b], move |_, _, g| {
            let mut gb = Tensor::zeros(&b_shape);
            for chunk in g.data().chunks(inner) {
                for (o, x) in gb.data_mut().iter_mut().zip(chunk) {
                    *o += x;
                }
            }
            vec![Some(g.clone()), Some(gb)]
        })
    }

    /// Multiplies row `r` (last-axis view) by the constant `factors[r]`.
    pub fn scale_rows(&mut self, a: Var, factors: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if t.rows() != factors.len() {
            return Err(shape_err("scale_rows", format!("{} rows, {} factors", t.rows(), factors.len())));
        }
        let c = t.last_dim();
        let mut out = t.clone();
        for (row, &f) in out.data_mut().chunks_mut(c).zip(factors) {
            for v in row {
                *v *= f;
            }
        }
        let factors = factors.to_vec();
        self.push("scale_rows", out, &[a], move |_, _, g| {
            let mut gi = g.clone();
            for (row, &f) in gi.data_mut().chunks_mut(c).zip(&factors) {
                for v in row {
                    *v *= f;
                }
            }
            vec![Some(gi)]
        })
    }

    /// Inserts a new axis of size `n` at `axis`, repeating the data.
    pub fn repeat_axis(&mut self, a: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis > shape.len() {
            return Err(invalid("repeat_axis", format!("axis {axis} for rank {}", shape.len())));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out_shape = shape.clone();
        out_shape.insert(axis, n);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let block = &src[o * inner..(o + 1) * inner];
            for _ in 0..n {
                data.extend_from_slice(block);
            }
        }
        let out = Tensor::new(&out_shape, data)?;
        self.push("repeat_axis", out, &[a], move |_, _, g| {
            let mut gi = Tensor::zeros(&shape);
            let gd = g.data();
            let dst = gi.data_mut();
            for o in 0..outer {
                for r in 0..n {
                    let base = (o * n + r) * inner;
                    for i in 0..inner {
                        dst[o * inner + i] += gd[base + i];
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let in_shape = self.shape(a).to_vec();
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, &[a], move |_, _, g| {
            vec![Some(g.clone().reshape(&in_shape).expect("reshape grad"))]
        })
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(axes)?;
        let inv = inverse_permutation(axes);
        self.push("permute", out, &[a], move |_, _, g| {
            vec![Some(g.permute(&inv).expect("permute grad"))]
        })
    }

    /// Concatenates along the last axis. Leading shapes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat_last", "no inputs"));
        };
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat_last", format!("{:?} vs {:?}", self.shape(first), s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut out_shape = lead.clone();
        out_shape.push(total);
        let out = Tensor::new(&out_shape, data)?;
        self.push("concat_last", out, parts, move |inp, _, g| {
            let mut grads: Vec<Tensor> = inp.iter().map(|t| Tensor::zeros(t.shape())).collect();
            let gd = g.data();
            for r in 0..rows {
                let mut off = r * total;
                for (gi, &w) in grads.iter_mut().zip(&widths) {
                    gi.data_mut()[r * w..(r + 1) * w].copy_from_slice(&gd[off..off + w]);
                    off += w;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Stacks the `[rows, C]` views of `parts` into one `[Σ rows, C]` matrix.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(invalid("concat_rows", "no inputs"));
        };
        let c = self.value(first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() == 0 || t.last_dim() != c {
                return Err(shape_err("concat_rows", format!("{:?} vs {:?}", self.shape(first), t.shape())));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::new(&[data.len() / c, c], data)?;
        self.push("concat_rows", out, parts, move |inp, _, g| {
            let mut off = 0;
            inp.iter()
                .map(|t| {
                    let n = t.len();
                    let gi = Tensor::new(t.shape(), g.data()[off..off + n].to_vec()).expect("row block");
                    off += n;
                    Some(gi)
                })
                .collect()
        })
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| invalid("slice_last", "scalar input"))?;
        if start + len > c {
            return Err(shape_err("slice_last", format!("{start}+{len} > {c}")));
        }
        let rows = self.value(a).rows();
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * c + start..r * c + start + len]);
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = len;
        let out = Tensor::new(&out_shape, data)?;
        self.push("slice_last", out, &[a], move |_, _, g| {
            let mut gi = Tensor::zeros(&shape);
            let gd = g.data();
            for r in 0..rows {
                gi.data_mut()[r * c + start..r * c + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
            }
            vec![Some(gi)]
        })
    }

    /// Selects rows of the `[rows, C]` view of `a`; `ZERO_ROW` yields zeros.
    /// Output shape is `[indices.len(), C]`.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = (t.rows(), t.last_dim());
        if let Some(&bad) = indices.iter().find(|&&i| i != ZERO_ROW && i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} of {rows}")));
        }
        let mut data = vec![0.0; indices.len() * c];
        for (o, &i) in indices.iter().enumerate() {
            if i != ZERO_ROW {
                data[o * c..(o + 1) * c].copy_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(&[indices.len(), c], data)?;
        let in_shape = t.shape().to_vec();
        let indices = indices.to_vec();
        self.push("gather_rows", out, &[a], move |_, _, g| {
            let mut gi = Tensor::zeros(&in_shape);
            let gd = g.data();
            let dst = gi.data_mut();
            for (o, &i) in indices.iter().enumerate() {
                if i != ZERO_ROW {
                    for k in 0..c {
                        dst[i * c + k] += gd[o * c + k];
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    /// Each output row is `Σ_t weights[o·taps+t] · a[indices[o·taps+t]]`
    /// over the `[rows, C]` view of `a`. Indices and weights are constants.
    pub fn gather_combine(&mut self, a: Var, taps: usize, indices: &[usize], weights: &[f64]) -> Result<Var> {
        let t = self.value(a);
        let (rows, c) = (t.rows(), t.last_dim());
        if taps == 0 || indices.len() != weights.len() || indices.len() % taps != 0 {
            return Err(shape_err(
                "gather_combine",
                format!("{} indices, {} weights, {taps} taps", indices.len(), weights.len()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_combine", format!("row {bad} of {rows}")));
        }
        let n_out = indices.len() / taps;
        let mut data = vec![0.0; n_out * c];
        let src = t.data();
        for o in 0..n_out {
            let dst = &mut data[o * c..(o + 1) * c];
            for k in o * taps..(o + 1) * taps {
                let w = weights[k];
                if w == 0.0 {
                    continue;
                }
                let row = &src[indices[k] * c..(indices[k] + 1) * c];
                for (d, &s) in dst.iter_mut().zip(row) {
                    *d += w * s;
                }
            }
        }
        let out = Tensor::new(&[n_out, c], data)?;
        let in_shape = t.shape().to_vec();
        let (indices, weights) = (indices.to_vec(), weights.to_vec());
        self.push("gather_combine", out, &[a], move |_, _, g| {
            let mut gi = Tensor::zeros(&in_shape);
            let gd = g.data();
            let dst = gi.data_mut();
            for o in 0..n_out {
                for k in o * taps..(o + 1) * taps {
                    let w = weights[k];
                    if w == 0.0 {
                        continue;
                    }
                    let base = indices[k] * c;
                    for j in 0..c {
                        dst[base + j] += w * gd[o * c + j];
                    }
                }
            }
            vec![Some(gi)]
        })
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let shape = self.shape(a).to_vec();
        self.push("sum_all", out, &[a], move |_, _, g| vec![Some(Tensor::full(&shape, g.data()[0]))])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(invalid("mean_all", "empty tensor"));
        }
        let out = Tensor::scalar(self.value(a).sum() / n as f64);
        let shape = self.shape(a).to_vec();
        self.push("mean_all", out, &[a], move |_, _, g| {
            vec![Some(Tensor::full(&shape, g.data()[0] / n as f64))]
        })
    }

    /// Mean squared error against a constant target, optionally restricted
    /// to rows with a nonzero mask entry.
    pub fn mse(&mut self, pred: Var, target: &Tensor, row_mask: Option<&[bool]>) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() {
            return Err(shape_err("mse", format!("{:?} vs {:?}", p.shape(), target.shape())));
        }
        let c = p.last_dim();
        let rows = p.rows();
        let mask: Vec<bool> = match row_mask {
            Some(m) if m.len() != rows => {
                return Err(shape_err("mse", format!("mask {} for {rows} rows", m.len())));
            }
            Some(m) => m.to_vec(),
            None => vec![true; rows],
        };
        let count = mask.iter().filter(|&&m| m).count() * c;
        if count == 0 {
            return Err(invalid("mse", "no unmasked entries"));
        }
        let mut acc = 0.0;
        for r in (0..rows).filter(|&r| mask[r]) {
            for k in r * c..(r + 1) * c {
                let d = p.data()[k] - target.data()[k];
                acc += d * d;
            }
        }
        let out = Tensor::scalar(acc / count as f64);
        let target = target.clone();
        self.push("mse", out, &[pred], move |inp, _, g| {
            let s = 2.0 * g.data()[0] / count as f64;
            let mut gi = Tensor::zeros(target.shape());
            for r in (0..rows).filter(|&r| mask[r]) {
                for k in r * c..(r + 1) * c {
                    gi.data_mut()[k] = s * (inp[0].data()[k] - target.data()[k]);
                }
            }
            vec![Some(gi)]
        })
    }
}
