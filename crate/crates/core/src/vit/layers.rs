use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

const LN_EPS: f64 = 1e-6;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Row-wise layer normalisation with learnable gain and shift (`1×d` each).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

#[derive(Clone, Debug)]
pub(crate) struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gamma: Mat::from_raw(1, d, vec![1.0; d]), beta: Mat::zeros(1, d) }
    }

    pub(crate) fn forward(&self, x: &Mat) -> (Mat, LnCache) {
        let (n, d) = x.shape();
        let mut xhat = Mat::zeros(n, d);
        let mut y = Mat::zeros(n, d);
        let mut rstd = Vec::with_capacity(n);
        let (g, b) = (self.gamma.as_slice(), self.beta.as_slice());
        for r in 0..n {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let h = (row[c] - mean) * rs;
                xhat[(r, c)] = h;
                y[(r, c)] = h * g[c] + b[c];
            }
        }
        (y, LnCache { xhat, rstd })
    }

    /// Returns `dx`; accumulates into `grads` (`[dγ, dβ]`) when given.
    pub(crate) fn backward(
        &self,
        cache: &LnCache,
        dy: &Mat,
        grads: Option<(&mut Mat, &mut Mat)>,
    ) -> Mat {
        let (n, d) = dy.shape();
        let g = self.gamma.as_slice();
        if let Some((dg, db)) = grads {
            for r in 0..n {
                for c in 0..d {
                    dg.as_mut_slice()[c] += dy[(r, c)] * cache.xhat[(r, c)];
                    db.as_mut_slice()[c] += dy[(r, c)];
                }
            }
        }
        let mut dx = Mat::zeros(n, d);
        for r in 0..n {
            let dxhat: Vec<f64> = (0..d).map(|c| dy[(r, c)] * g[c]).collect();
            let mean_d = dxhat.iter().sum::<f64>() / d as f64;
            let mean_dx = (0..d).map(|c| dxhat[c] * cache.xhat[(r, c)]).sum::<f64>() / d as f64;
            for c in 0..d {
                dx[(r, c)] = cache.rstd[r] * (dxhat[c] - mean_d - cache.xhat[(r, c)] * mean_dx);
            }
        }
        dx
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
