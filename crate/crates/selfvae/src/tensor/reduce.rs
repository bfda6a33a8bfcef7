//! Reductions: sums, means and log-sum-exp.
//!
//! Every reduction is built on a deterministic pairwise sum that always
//! splits at the midpoint, so concatenating a batch with itself exactly
//! doubles batch totals (and leaves batch means bit-identical).

use super::Tensor;
use crate::par;

impl Tensor {
    /// Sum of all elements as a scalar tensor.
    pub fn sum_all(&self) -> Tensor {
        let total = par::pairwise_sum(self.data());
        Tensor::record(&[self], vec![total], vec![1], move |g, ids, store| {
            let acc = store.accum(ids[0]);
            for a in acc.iter_mut() {
                *a += g[0];
            }
        })
    }

    /// Mean of all elements as a scalar tensor.
    pub fn mean_all(&self) -> Tensor {
        let n = self.numel() as f64;
        let total = par::pairwise_sum(self.data()) / n;
        Tensor::record(&[self], vec![total], vec![1], move |g, ids, store| {
            let acc = store.accum(ids[0]);
            let gv = g[0] / n;
            for a in acc.iter_mut() {
                *a += gv;
            }
        })
    }

    /// Sum over the trailing axis: [..., D] -> [...] (a scalar input stays
    /// a scalar).
    pub fn sum_last_axis(&self) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("sum_last_axis on rank-0 tensor");
        let out_shape: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rows = self.numel() / d;
        let x = self.data();
        let out: Vec<f64> = par::map_indexed(rows, |r| par::pairwise_sum(&x[r * d..(r + 1) * d]));
        Tensor::record(&[self], out, out_shape, move |g, ids, store| {
            let acc = store.accum(ids[0]);
            for r in 0..rows {
                for i in 0..d {
                    acc[r * d + i] += g[r];
                }
            }
        })
    }

    /// log(sum(exp(x))) over the trailing axis with max-shifting.
    ///
    /// Rows that are entirely -inf reduce to -inf with zero gradient.
    pub fn logsumexp_last_axis(&self) -> Tensor {
        let shape = self.shape();
        let d = *shape.last().expect("logsumexp_last_axis on rank-0 tensor");
        let out_shape: Vec<usize> = if shape.len() == 1 {
            vec![1]
        } else {
            shape[..shape.len() - 1].to_vec()
        };
        let rows = self.numel() / d;
        let xarc = self.data.clone();
        let x = self.data();
        let out: Vec<f64> = par::map_indexed(rows, |r| {
            let row = &x[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return f64::NEG_INFINITY;
            }
            let s: f64 = par::pairwise_sum(&row.iter().map(|&v| (v - m).exp()).collect::<Vec<_>>());
            m + s.ln()
        });
        let yarc = std::sync::Arc::new(out.clone());
        Tensor::record(&[self], out, out_shape, move |g, ids, store| {
            let acc = store.accum(ids[0]);
            for r in 0..rows {
                let y = yarc[r];
                if y == f64::NEG_INFINITY {
                    continue;
                }
                for i in 0..d {
                    acc[r * d + i] += g[r] * (xarc[r * d + i] - y).exp();
                }
            }
        })
    }
}
