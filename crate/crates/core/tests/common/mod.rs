//! Shared helpers for the integration tests: independent `f64` reference
//! implementations and random instance generators.
#![allow(dead_code)]

use certood::network::{LayerParams, NetworkSpec, ParamStore};
use certood::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fully connected ReLU net in `f64`: `layers[i] = (W [out][in], b [out])`.
#[derive(Clone, Debug)]
pub struct RefMlp {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl RefMlp {
    pub fn random(dims: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let layers = dims
            .windows(2)
            .map(|w| {
                let weight = (0..w[1])
                    .map(|_| (0..w[0]).map(|_| rng.random_range(-scale..scale)).collect())
                    .collect();
                let bias = (0..w[1])
                    .map(|_| rng.random_range(-scale..scale) * 0.5)
                    .collect();
                (weight, bias)
            })
            .collect();
        RefMlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0[0].len()
    }

    pub fn classes(&self) -> usize {
        self.layers.last().unwrap().1.len()
    }

    pub fn spec(&self) -> NetworkSpec {
        let hidden: Vec<usize> = self.layers[..self.layers.len() - 1]
            .iter()
            .map(|l| l.1.len())
            .collect();
        NetworkSpec::mlp(self.input_dim(), &hidden, self.classes()).unwrap()
    }

    pub fn params(&self) -> ParamStore {
        ParamStore {
            layers: self
                .layers
                .iter()
                .map(|(w, b)| LayerParams {
                    weight: Tensor::new(
                        vec![w.len(), w[0].len()],
                        w.iter().flatten().map(|&v| v as f32).collect(),
                    )
                    .unwrap(),
                    bias: Tensor::new(vec![b.len()], b.iter().map(|&v| v as f32).collect())
                        .unwrap(),
                })
                .collect(),
        }
    }

    /// Parameters as `f64` read back from the `f32` store, so both sides
    /// see identical values.
    pub fn from_params(params: &ParamStore) -> Self {
        RefMlp {
            layers: params
                .layers
                .iter()
                .map(|p| {
                    let (m, n) = (p.weight.shape()[0], p.weight.shape()[1]);
                    let w = (0..m)
                        .map(|i| (0..n).map(|j| p.weight.data()[i * n + j] as f64).collect())
                        .collect();
                    (w, p.bias.data().iter().map(|&v| v as f64).collect())
                })
                .collect(),
        }
    }

    pub fn param_len(&self) -> usize {
        self.layers
            .iter()
            .map(|(w, b)| w.len() * w[0].len() + b.len())
            .sum()
    }

    /// Flat parameter accessor in store order (weights row-major, then bias).
    pub fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for (w, b) in &mut self.layers {
            let n = w.len() * w[0].len();
            if idx < n {
                let cols = w[0].len();
                return &mut w[idx / cols][idx % cols];
            }
            idx -= n;
            if idx < b.len() {
                return &mut b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            a = w.iter().zip(b).map(|(row, bi)| dot(row, &a) + bi).collect();
            if i + 1 < self.layers.len() {
                a.iter_mut().for_each(|v| *v = v.max(0.0));
            }
        }
        a
    }

    /// Training-form bound on `max_{k,l} (f_k − f_l)` over the unclipped
    /// box `[x − ε, x + ε]`: center/radius propagation with the last layer
    /// applied to logit differences.
    pub fn training_bound(&self, x: &[f64], eps: f64) -> f64 {
        let mut c = x.to_vec();
        let mut r = vec![eps; x.len()];
        let last = self.layers.len() - 1;
        for (w, b) in &self.layers[..last] {
            let nc: Vec<f64> = w.iter().zip(b).map(|(row, bi)| dot(row, &c) + bi).collect();
            let nr: Vec<f64> = w
                .iter()
                .map(|row| row.iter().zip(&r).map(|(a, v)| a.abs() * v).sum())
                .collect();
            c = Vec::with_capacity(nc.len());
            r = Vec::with_capacity(nc.len());
            for (ci, ri) in nc.iter().zip(&nr) {
                let (lo, hi) = ((ci - ri).max(0.0), (ci + ri).max(0.0));
                c.push((hi + lo) / 2.0);
                r.push((hi - lo) / 2.0);
            }
        }
        let (w, b) = &self.layers[last];
        let mut best = f64::NEG_INFINITY;
        for k in 0..w.len() {
            for l in 0..w.len() {
                let dw: Vec<f64> = w[k].iter().zip(&w[l]).map(|(a, b)| a - b).collect();
                let ub = dot(&dw, &c) + b[k] - b[l]
                    + dw.iter().zip(&r).map(|(a, v)| a.abs() * v).sum::<f64>();
                best = best.max(ub);
            }
        }
        best
    }

    /// Quantile-GOOD total loss with mean reductions.
    pub fn good_loss(
        &self,
        xin: &[Vec<f64>],
        labels: &[usize],
        xout: &[Vec<f64>],
        eps: f64,
        kappa: f64,
        q: f64,
    ) -> f64 {
        let ce = xin
            .iter()
            .zip(labels)
            .map(|(x, &y)| {
                let z = self.logits(x);
                lse(&z) - z[y]
            })
            .sum::<f64>()
            / xin.len() as f64;
        let cub = |a: f64| (0.5 * a * a).ln_1p();
        let cub_eps: Vec<f64> = xout
            .iter()
            .map(|x| cub(self.training_bound(x, eps)))
            .collect();
        let cub0: Vec<f64> = xout
            .iter()
            .map(|x| cub(self.training_bound(x, 0.0)))
            .collect();
        let m = xout.len();
        let cut = (q * m as f64 + 1e-9).floor() as usize;
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| cub_eps[a].total_cmp(&cub_eps[b]));
        let mut total = 0.0;
        for (rank, &j) in order.iter().enumerate() {
            total += if rank < cut { cub_eps[j] } else { cub0[j] };
        }
        ce + kappa * total / m as f64
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn lse(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax confidence in `f64`.
pub fn confidence(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m - lse(z)).exp()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_point(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(0.0..1.0)).collect()
}

/// `[B, 1, 1, d]` batch from `f64` rows (values rounded to `f32`).
pub fn batch(rows: &[Vec<f64>]) -> Tensor {
    let d = rows[0].len();
    Tensor::new(
        vec![rows.len(), 1, 1, d],
        rows.iter().flatten().map(|&v| v as f32).collect(),
    )
    .unwrap()
}

/// Every row rounded to `f32` and back.
pub fn as_f32(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|&v| v as f32 as f64).collect())
        .collect()
}

/// Exact pair counting: `(in > out, in == out)` over all pairs.
pub fn brute_pairs(ins: &[f32], outs: &[f32]) -> (u64, u64) {
    let (mut gt, mut eq) = (0, 0);
    for a in ins {
        for b in outs {
            if a > b {
                gt += 1;
            } else if a == b {
                eq += 1;
            }
        }
    }
    (gt, eq)
}
