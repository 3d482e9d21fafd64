//! Fused scaled dot-product attention with an optional key mask.

use crate::counter;
use crate::error::{shape_err, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

impl Graph {
    /// Multi-head scaled dot-product attention over pre-projected inputs.
    ///
    /// `q: [B, Lq, C]`, `k`/`v: [B, Lk, C]`, heads split the channel axis.
    /// `key_mask[b·Lk + j] == false` removes key `j` of batch `b`; masked keys
    /// get exactly zero weight and are skipped in every sum. A query whose keys
    /// are all masked yields a zero output row.
    ///
    /// Returns the `[B, Lq, C]` output and the `[B, heads, Lq, Lk]` weights.
    pub fn attention_core(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_mask: Option<&[bool]>,
    ) -> Result<(Var, Tensor)> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(shape_err("attention", format!("q {qs:?}, k {ks:?}, v {vs:?}")));
        }
        let (b, lq, c) = (qs[0], qs[1], qs[2]);
        let lk = ks[1];
        if heads == 0 || c % heads != 0 {
            return Err(shape_err("attention", format!("{c} channels not divisible by {heads} heads")));
        }
        if let Some(m) = key_mask {
            if m.len() != b * lk {
                return Err(shape_err("attention", format!("mask len {} for {b}x{lk} keys", m.len())));
            }
        }
        let mask: Option<Vec<bool>> = key_mask.map(|m| m.to_vec());
        let d = c / heads;
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());

        let mut weights = vec![0.0; b * heads * lq * lk];
        let mut out = vec![0.0; b * lq * c];
        let mut valid_pairs = 0u64;
        let mut scores = vec![0.0; lk];
        for bi in 0..b {
            let valid = |j: usize| mask.as_ref().is_none_or(|m| m[bi * lk + j]);
            let n_valid = (0..lk).filter(|&j| valid(j)).count();
            valid_pairs += (lq * n_valid) as u64;
            if n_valid == 0 {
                continue;
            }
            for h in 0..heads {
                let off = h * d;
                for i in 0..lq {
                    let qrow = &qd[(bi * lq + i) * c + off..(bi * lq + i) * c + off + d];
                    let mut m = f64::NEG_INFINITY;
                    for j in 0..lk {
                        if !valid(j) {
                            continue;
                        }
                        let krow = &kd[(bi * lk + j) * c + off..(bi * lk + j) * c + off + d];
                        let s = qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() * scale;
                        scores[j] = s;
                        m = m.max(s);
                    }
                    let mut z = 0.0;
                    for j in 0..lk {
                        if valid(j) {
                            scores[j] = (scores[j] - m).exp();
                            z += scores[j];
                        }
                    }
                    let wrow = &mut weights[((bi * heads + h) * lq + i) * lk..((bi * heads + h) * lq + i + 1) * lk];
                    let orow = &mut out[(bi * lq + i) * c + off..(bi * lq + i) * c + off + d];
                    for j in 0..lk {
                        if !valid(j) {
                            continue;
                        }
                        let p = scores[j] / z;
                        wrow[j] = p;
                        let vrow = &vd[(bi * lk + j) * c + off..(bi * lk + j) * c + off + d];
                        for (o, &vv) in orow.iter_mut().zip(vrow) {
                            *o += p * vv;
                        }
                    }
                }
            }
        }
        counter::add(2 * valid_pairs * c as u64);

        let out = Tensor::new(&[b, lq, c], out)?;
        let weights = Tensor::new(&[b, heads, lq, lk], weights)?;
        let saved = weights.clone();
        let var = self.push("attention", out, &[q, k, v], move |inp, _, g| {
            let (qd, kd, vd) = (inp[0].data(), inp[1].data(), inp[2].data());
            let gd = g.data();
            let p = saved.data();
            let mut gq = Tensor::zeros(&[b, lq, c]);
            let mut gk = Tensor::zeros(&[b, lk, c]);
            let mut gv = Tensor::zeros(&[b, lk, c]);
            let mut dp = vec![0.0; lk];
            for bi in 0..b {
                let valid = |j: usize| mask.as_ref().is_none_or(|m| m[bi * lk + j]);
                for h in 0..heads {
                    let off = h * d;
                    for i in 0..lq {
                        let prow = &p[((bi * heads + h) * lq + i) * lk..((bi * heads + h) * lq + i + 1) * lk];
                        let grow = &gd[(bi * lq + i) * c + off..(bi * lq + i) * c + off + d];
                        let mut dot = 0.0;
                        for j in 0..lk {
                            if !valid(j) {
                                continue;
                            }
                            let vrow = &vd[(bi * lk + j) * c + off..(bi * lk + j) * c + off + d];
                            dp[j] = grow.iter().zip(vrow).map(|(a, b)| a * b).sum();
                            dot += prow[j] * dp[j];
                            let gvrow = &mut gv.data_mut()[(bi * lk + j) * c + off..(bi * lk + j) * c + off + d];
                            for (o, &gg) in gvrow.iter_mut().zip(grow) {
                                *o += prow[j] * gg;
                            }
                        }
                        let qrow = &qd[(bi * lq + i) * c + off..(bi * lq + i) * c + off + d];
                        for j in 0..lk {
                            if !valid(j) {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let krow = &kd[(bi * lk + j) * c + off..(bi * lk + j) * c + off + d];
                            let gqrow = &mut gq.data_mut()[(bi * lq + i) * c + off..(bi * lq + i) * c + off + d];
                            for (o, &kk) in gqrow.iter_mut().zip(krow) {
                                *o += ds * kk;
                            }
                            let gkrow = &mut gk.data_mut()[(bi * lk + j) * c + off..(bi * lk + j) * c + off + d];
                            for (o, &qq) in gkrow.iter_mut().zip(qrow) {
                                *o += ds * qq;
                            }
                        }
                    }
                }
            }
            vec![Some(gq), Some(gk), Some(gv)]
        })?;
        Ok((var, weights))
    }
}
