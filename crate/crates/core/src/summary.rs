//! Finite path summaries fed to path-dependent coefficients.
//!
//! Feature layout: current state, then `|x|` running sup, then the running
//! mean of the state over grid nodes, then one state copy per lag.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSummarySpec {
    pub dim_state: usize,
    #[serde(default)]
    pub running_sup: bool,
    #[serde(default)]
    pub running_mean: bool,
    /// Lags in grid steps; each must be ≥ 1.
    #[serde(default)]
    pub lags: Vec<usize>,
}

impl PathSummarySpec {
    pub fn markovian(dim_state: usize) -> Self {
        PathSummarySpec { dim_state, running_sup: false, running_mean: false, lags: Vec::new() }
    }

    pub fn check(&self) -> Result<(), String> {
        if self.dim_state == 0 {
            return Err("summary over a zero-dimensional state".into());
        }
        if self.lags.contains(&0) {
            return Err("lags must be at least one step".into());
        }
        Ok(())
    }

    pub fn is_markovian(&self) -> bool {
        !self.running_sup && !self.running_mean && self.lags.is_empty()
    }

    pub fn dim(&self) -> usize {
        let n = self.dim_state;
        n + usize::from(self.running_sup) + if self.running_mean { n } else { 0 } + n * self.lags.len()
    }

    /// Number of trailing nodes needed to build a summary.
    pub fn history_len(&self) -> usize {
        self.lags.iter().copied().max().unwrap_or(0) + 1
    }

    fn mean_offset(&self) -> usize {
        self.dim_state + usize::from(self.running_sup)
    }

    fn lag_offset(&self) -> usize {
        self.mean_offset() + if self.running_mean { self.dim_state } else { 0 }
    }

    pub fn init(&self, x0: &[f64], out: &mut [f64]) {
        let n = self.dim_state;
        out[..n].copy_from_slice(x0);
        if self.running_sup {
            out[n] = norm(x0);
        }
        if self.running_mean {
            let o = self.mean_offset();
            out[o..o + n].copy_from_slice(x0);
        }
        let lo = self.lag_offset();
        for j in 0..self.lags.len() {
            out[lo + j * n..lo + (j + 1) * n].copy_from_slice(x0);
        }
    }

    /// Summary at node `node` (≥ 1) from the summary at `node − 1`, the new
    /// state, and a lookup of earlier states by node index.
    pub fn advance<'a>(
        &self,
        prev: &[f64],
        node: usize,
        x: &[f64],
        state_at: impl Fn(usize) -> &'a [f64],
        out: &mut [f64],
    ) {
        let n = self.dim_state;
        out[..n].copy_from_slice(x);
        if self.running_sup {
            out[n] = prev[n].max(norm(x));
        }
        if self.running_mean {
            let o = self.mean_offset();
            let w = 1.0 / (node as f64 + 1.0);
            for i in 0..n {
                out[o + i] = prev[o + i] + (x[i] - prev[o + i]) * w;
            }
        }
        let lo = self.lag_offset();
        for (j, &lag) in self.lags.iter().enumerate() {
            let src = state_at(node.saturating_sub(lag));
            out[lo + j * n..lo + (j + 1) * n].copy_from_slice(src);
        }
    }

    /// Summary at the last node of a flat path (node-major, `dim_state` per node).
    pub fn summarize(&self, path: &[f64]) -> Vec<f64> {
        let n = self.dim_state;
        let len = path.len() / n;
        let mut cur = vec![0.0; self.dim()];
        let mut next = vec![0.0; self.dim()];
        self.init(&path[..n], &mut cur);
        for k in 1..len {
            self.advance(&cur, k, &path[k * n..(k + 1) * n], |j| &path[j * n..(j + 1) * n], &mut next);
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}
