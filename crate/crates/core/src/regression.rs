//! Least-squares regression on path-summary features.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Gram matrices whose estimated condition number exceeds this are regularized.
pub const COND_LIMIT: f64 = 1e8;

const OBS_CHUNK: usize = 4096;

/// Declared regression basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegressionBasis {
    /// Monomials of total degree ≤ `degree` in standardized features.
    Polynomial {
        degree: usize,
        #[serde(default)]
        features: Option<Vec<usize>>,
    },
    /// Tensor-product hat functions on a box; features outside are clamped to it.
    Tents {
        lo: Vec<f64>,
        hi: Vec<f64>,
        cells: Vec<usize>,
        #[serde(default)]
        features: Option<Vec<usize>>,
    },
}

impl RegressionBasis {
    pub fn polynomial(degree: usize) -> Self {
        RegressionBasis::Polynomial { degree, features: None }
    }

    pub fn tents_1d(lo: f64, hi: f64, cells: usize) -> Self {
        RegressionBasis::Tents { lo: vec![lo], hi: vec![hi], cells: vec![cells], features: None }
    }

    pub fn check(&self, summary_dim: usize) -> Result<(), String> {
        match self {
            RegressionBasis::Polynomial { features, .. } => check_features(features, summary_dim),
            RegressionBasis::Tents { lo, hi, cells, features } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.len() != cells.len() {
                    return Err("tent box needs matching lo, hi and cells".into());
                }
                if lo.iter().zip(hi).any(|(a, b)| !(a.is_finite() && b.is_finite() && a < b)) {
                    return Err("tent box needs finite lo < hi".into());
                }
                if cells.contains(&0) {
                    return Err("tent box needs at least one cell per axis".into());
                }
                let f = self.features(summary_dim);
                if f.len() != lo.len() {
                    return Err("one feature per tent axis is required".into());
                }
                if f.iter().any(|&i| i >= summary_dim) {
                    return Err("tent feature index out of range".into());
                }
                check_features(features, summary_dim)
            }
        }
    }

    /// Summary feature indices the basis reads.
    pub fn features(&self, summary_dim: usize) -> Vec<usize> {
        match self {
            RegressionBasis::Polynomial { features, .. } => {
                features.clone().unwrap_or_else(|| (0..summary_dim).collect())
            }
            RegressionBasis::Tents { lo, features, .. } => features.clone().unwrap_or_else(|| (0..lo.len()).collect()),
        }
    }

    /// Box covered by the basis, if it declares one.
    pub fn bounding_box(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            RegressionBasis::Tents { lo, hi, .. } => Some((lo.clone(), hi.clone())),
            RegressionBasis::Polynomial { .. } => None,
        }
    }

    /// Basis specialized to the data seen at one node.
    pub fn prepare<'a>(&self, summary_dim: usize, obs: impl Iterator<Item = &'a [f64]>) -> NodeBasis {
        let feats = self.features(summary_dim);
        let mut lo = vec![f64::INFINITY; feats.len()];
        let mut hi = vec![f64::NEG_INFINITY; feats.len()];
        let mut sum = vec![0.0; feats.len()];
        let mut sum2 = vec![0.0; feats.len()];
        let mut count = 0usize;
        for s in obs {
            for (j, &f) in feats.iter().enumerate() {
                let v = s[f];
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
                sum[j] += v;
                sum2[j] += v * v;
            }
            count += 1;
        }
        let spread_ok = |j: usize| count > 1 && hi[j] - lo[j] > 1e-12 * (1.0 + lo[j].abs().max(hi[j].abs()));
        match self {
            RegressionBasis::Polynomial { degree, .. } => {
                let mut used = Vec::new();
                let mut mean = Vec::new();
                let mut scale = Vec::new();
                for (j, &f) in feats.iter().enumerate() {
                    if spread_ok(j) {
                        let m = sum[j] / count as f64;
                        let var = (sum2[j] / count as f64 - m * m).max(0.0);
                        used.push(f);
                        mean.push(m);
                        scale.push(if var > 0.0 { 1.0 / var.sqrt() } else { 1.0 });
                    }
                }
                if used.is_empty() || *degree == 0 {
                    return NodeBasis::Constant;
                }
                let exps = monomials(used.len(), *degree);
                NodeBasis::Poly { features: used, mean, scale, exps }
            }
            RegressionBasis::Tents { lo: blo, hi: bhi, cells, .. } => {
                if !(0..feats.len()).any(spread_ok) {
                    return NodeBasis::Constant;
                }
                NodeBasis::Tents { features: feats, lo: blo.clone(), hi: bhi.clone(), cells: cells.clone() }
            }
        }
    }
}

fn check_features(features: &Option<Vec<usize>>, summary_dim: usize) -> Result<(), String> {
    match features {
        Some(f) if f.is_empty() => Err("feature list is empty".into()),
        Some(f) if f.iter().any(|&i| i >= summary_dim) => Err("feature index out of range".into()),
        _ => Ok(()),
    }
}

fn monomials(nvars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut cur = vec![0u32; nvars];
    fn rec(i: usize, left: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if i == cur.len() {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur[i] = e as u32;
            rec(i + 1, left - e, cur, out);
        }
        cur[i] = 0;
    }
    rec(0, degree, &mut cur, &mut out);
    out.sort_by_key(|e| e.iter().sum::<u32>());
    out
}

/// A basis frozen at one node (standardization, box).
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeBasis {
    Constant,
    Poly { features: Vec<usize>, mean: Vec<f64>, scale: Vec<f64>, exps: Vec<Vec<u32>> },
    Tents { features: Vec<usize>, lo: Vec<f64>, hi: Vec<f64>, cells: Vec<usize> },
}

impl NodeBasis {
    pub fn len(&self) -> usize {
        match self {
            NodeBasis::Constant => 1,
            NodeBasis::Poly { exps, .. } => exps.len(),
            NodeBasis::Tents { cells, .. } => cells.iter().map(|c| c + 1).product(),
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Nonzeros per row.
    pub fn row_nnz(&self) -> usize {
        match self {
            NodeBasis::Constant => 1,
            NodeBasis::Poly { exps, .. } => exps.len(),
            NodeBasis::Tents { cells, .. } => 1 << cells.len(),
        }
    }

    /// Writes exactly `row_nnz()` (index, weight) pairs.
    pub fn eval(&self, s: &[f64], idx: &mut [usize], w: &mut [f64]) {
        match self {
            NodeBasis::Constant => {
                idx[0] = 0;
                w[0] = 1.0;
            }
            NodeBasis::Poly { features, mean, scale, exps } => {
                let mut z = [0.0f64; 8];
                let mut zs = Vec::new();
                let zv: &mut [f64] = if features.len() <= 8 {
                    &mut z[..features.len()]
                } else {
                    zs.resize(features.len(), 0.0);
                    &mut zs
                };
                for (j, &f) in features.iter().enumerate() {
                    zv[j] = (s[f] - mean[j]) * scale[j];
                }
                for (i, e) in exps.iter().enumerate() {
                    let mut v = 1.0;
                    for (j, &p) in e.iter().enumerate() {
                        if p > 0 {
                            v *= zv[j].powi(p as i32);
                        }
                    }
                    idx[i] = i;
                    w[i] = v;
                }
            }
            NodeBasis::Tents { features, lo, hi, cells } => {
                let dims = features.len();
                let mut base = 0usize;
                let mut stride = 1usize;
                let mut frac = [0.0f64; 8];
                let mut strides = [0usize; 8];
                for j in (0..dims).rev() {
                    let c = cells[j];
                    let h = (hi[j] - lo[j]) / c as f64;
                    let mut u = (s[features[j]] - lo[j]) / h;
                    if u.is_nan() {
                        u = 0.0;
                    }
                    let u = u.clamp(0.0, c as f64);
                    let cell = (u.floor() as usize).min(c - 1);
                    frac[j] = u - cell as f64;
                    base += cell * stride;
                    strides[j] = stride;
                    stride *= c + 1;
                }
                for corner in 0..(1usize << dims) {
                    let mut wt = 1.0;
                    let mut id = base;
                    for j in 0..dims {
                        if corner >> j & 1 == 1 {
                            wt *= frac[j];
                            id += strides[j];
                        } else {
                            wt *= 1.0 - frac[j];
                        }
                    }
                    idx[corner] = id;
                    w[corner] = wt;
                }
            }
        }
    }

    pub fn dot(idx: &[usize], w: &[f64], coeffs: &[f64]) -> f64 {
        idx.iter().zip(w).map(|(&i, &x)| x * coeffs[i]).sum()
    }

    /// Curvature penalty (second differences along each tent axis).
    fn penalty(&self) -> Option<DMatrix<f64>> {
        let NodeBasis::Tents { cells, .. } = self else {
            return None;
        };
        let nb = self.len();
        let sizes: Vec<usize> = cells.iter().map(|c| c + 1).collect();
        let mut p = DMatrix::zeros(nb, nb);
        let mut strides = vec![1usize; sizes.len()];
        for j in (0..sizes.len().saturating_sub(1)).rev() {
            strides[j] = strides[j + 1] * sizes[j + 1];
        }
        for (ax, &sz) in sizes.iter().enumerate() {
            if sz < 3 {
                continue;
            }
            for flat in 0..nb {
                let pos = flat / strides[ax] % sz;
                if pos + 2 >= sz {
                    continue;
                }
                let ids = [flat, flat + strides[ax], flat + 2 * strides[ax]];
                let coef = [1.0, -2.0, 1.0];
                for a in 0..3 {
                    for b in 0..3 {
                        p[(ids[a], ids[b])] += coef[a] * coef[b];
                    }
                }
            }
        }
        Some(p)
    }
}

/// Design rows of a set of observations, stored with fixed stride `nnz`.
pub struct Design {
    pub nnz: usize,
    pub idx: Vec<usize>,
    pub w: Vec<f64>,
}

impl Design {
    pub fn build(basis: &NodeBasis, obs: &[&[f64]]) -> Design {
        let nnz = basis.row_nnz();
        let mut idx = vec![0usize; obs.len() * nnz];
        let mut w = vec![0.0; obs.len() * nnz];
        idx.par_chunks_mut(OBS_CHUNK * nnz).zip(w.par_chunks_mut(OBS_CHUNK * nnz)).enumerate().for_each(
            |(c, (ic, wc))| {
                let start = c * OBS_CHUNK;
                for i in 0..ic.len() / nnz {
                    basis.eval(obs[start + i], &mut ic[i * nnz..(i + 1) * nnz], &mut wc[i * nnz..(i + 1) * nnz]);
                }
            },
        );
        Design { nnz, idx, w }
    }

    pub fn rows(&self) -> usize {
        self.idx.len() / self.nnz.max(1)
    }

    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        (&self.idx[i * self.nnz..(i + 1) * self.nnz], &self.w[i * self.nnz..(i + 1) * self.nnz])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitDiagnostics {
    pub cond_estimate: f64,
    pub regularized: bool,
    /// RMS residual of each target.
    pub residual_rms: Vec<f64>,
}

/// Least-squares coefficients for several targets sharing one design.
/// `targets[t][i]` is the value of target t on observation i.
pub fn fit_targets(basis: &NodeBasis, design: &Design, targets: &[Vec<f64>]) -> (Vec<Vec<f64>>, FitDiagnostics) {
    let nb = basis.len();
    let nt = targets.len();
    let nobs = design.rows();
    let nnz = design.nnz;
    if nobs == 0 {
        return (
            vec![vec![0.0; nb]; nt],
            FitDiagnostics { cond_estimate: f64::INFINITY, regularized: true, residual_rms: vec![0.0; nt] },
        );
    }
    let chunks: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..nobs.div_ceil(OBS_CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut g = vec![0.0; nb * nb];
            let mut r = vec![0.0; nb * nt];
            let mut yy = vec![0.0; nt];
            let end = ((c + 1) * OBS_CHUNK).min(nobs);
            for i in c * OBS_CHUNK..end {
                let (ix, wx) = design.row(i);
                for a in 0..nnz {
                    let ia = ix[a];
                    let wa = wx[a];
                    if wa == 0.0 {
                        continue;
                    }
                    for b in 0..nnz {
                        g[ia * nb + ix[b]] += wa * wx[b];
                    }
                    for t in 0..nt {
                        r[t * nb + ia] += wa * targets[t][i];
                    }
                }
                for t in 0..nt {
                    yy[t] += targets[t][i] * targets[t][i];
                }
            }
            (g, r, yy)
        })
        .collect();
    let mut g = vec![0.0; nb * nb];
    let mut r = vec![0.0; nb * nt];
    let mut yy = vec![0.0; nt];
    for (cg, cr, cy) in &chunks {
        for (a, b) in g.iter_mut().zip(cg) {
            *a += b;
        }
        for (a, b) in r.iter_mut().zip(cr) {
            *a += b;
        }
        for (a, b) in yy.iter_mut().zip(cy) {
            *a += b;
        }
    }
    let inv_n = 1.0 / nobs as f64;
    let gram = DMatrix::from_row_slice(nb, nb, &g) * inv_n;
    let mean_diag = (0..nb).map(|i| gram[(i, i)]).sum::<f64>() / nb as f64;
    let mut system = gram.clone();
    if let Some(p) = basis.penalty() {
        system += p * (1e-6 * mean_diag);
        for i in 0..nb {
            system[(i, i)] += 1e-12 * mean_diag;
        }
    }
    let mut regularized = false;
    let mut cond = f64::INFINITY;
    let mut chol = None;
    for attempt in 0..6 {
        if let Some(c) = system.clone().cholesky() {
            let l = c.l_dirty();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in 0..nb {
                let v = l[(i, i)].abs();
                lo = lo.min(v);
                hi = hi.max(v);
            }
            cond = (hi / lo).powi(2);
            // the tent system is held positive definite by its curvature penalty
            if cond <= COND_LIMIT || attempt == 5 || matches!(basis, NodeBasis::Tents { .. }) {
                chol = Some(c);
                break;
            }
        }
        regularized = true;
        let eps = mean_diag.max(1e-300) * 10f64.powi(attempt - 8);
        for i in 0..nb {
            system[(i, i)] += eps;
        }
    }
    let chol = match chol {
        Some(c) => c,
        None => {
            return (
                vec![vec![0.0; nb]; nt],
                FitDiagnostics { cond_estimate: f64::INFINITY, regularized: true, residual_rms: vec![0.0; nt] },
            )
        }
    };
    let mut coeffs = Vec::with_capacity(nt);
    let mut rms = Vec::with_capacity(nt);
    for t in 0..nt {
        let rhs = DVector::from_column_slice(&r[t * nb..(t + 1) * nb]) * inv_n;
        let c = chol.solve(&rhs);
        let gc = &gram * &c;
        let ss = yy[t] * inv_n - 2.0 * c.dot(&rhs) + c.dot(&gc);
        rms.push(ss.max(0.0).sqrt());
        coeffs.push(c.as_slice().to_vec());
    }
    (coeffs, FitDiagnostics { cond_estimate: cond, regularized, residual_rms: rms })
}
