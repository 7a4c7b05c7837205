//! Soft-margin kernel SVC trained by SMO on the dual, with second-order
//! working-set selection and per-sample box constraints for class weights.

use serde::{Deserialize, Serialize};

use crate::dataset::Label;
use crate::error::{arg_err, shape_err};
use crate::Result;

const TAU: f64 = 1e-12;
const TOLERANCE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kernel {
    Linear,
    Rbf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassWeight {
    None,
    /// Weight `n / (2 * n_class)` per class.
    Balanced,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvcParams {
    pub c: f64,
    pub kernel: Kernel,
    pub class_weight: ClassWeight,
    /// RBF scale; `None` uses `1 / (d * var(X))` of the training data.
    #[serde(default)]
    pub gamma: Option<f64>,
}

impl SvcParams {
    pub fn new(c: f64, kernel: Kernel, class_weight: ClassWeight) -> Self {
        Self {
            c,
            kernel,
            class_weight,
            gamma: None,
        }
    }

    /// C = 1, RBF kernel, balanced class weights.
    pub fn paper_optimum() -> Self {
        Self::new(1.0, Kernel::Rbf, ClassWeight::Balanced)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return arg_err(format!("C must be positive, got {}", self.c));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return arg_err(format!("gamma must be positive, got {g}"));
            }
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        let k = match self.kernel {
            Kernel::Linear => "linear",
            Kernel::Rbf => "rbf",
        };
        let w = match self.class_weight {
            ClassWeight::None => "none",
            ClassWeight::Balanced => "balanced",
        };
        format!("C={} kernel={k} class_weight={w}", self.c)
    }
}

/// C in {0.1, 1, 10} x kernel in {linear, rbf} x class weight in
/// {none, balanced}.
pub fn default_grid() -> Vec<SvcParams> {
    let mut grid = Vec::new();
    for c in [0.1, 1.0, 10.0] {
        for kernel in [Kernel::Linear, Kernel::Rbf] {
            for cw in [ClassWeight::None, ClassWeight::Balanced] {
                grid.push(SvcParams::new(c, kernel, cw));
            }
        }
    }
    grid
}

fn kernel_value(kernel: Kernel, gamma: f64, a: &[f64], b: &[f64]) -> f64 {
    match kernel {
        Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
        Kernel::Rbf => {
            let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            (-gamma * d2).exp()
        }
    }
}

/// Per-sample upper bounds `C * w_class`.
pub(crate) fn sample_bounds(params: &SvcParams, labels: &[Label]) -> Vec<f64> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|l| **l == Label::Glaucoma).count() as f64;
    let w = |l: Label| match params.class_weight {
        ClassWeight::None => 1.0,
        ClassWeight::Balanced => {
            let nc = if l == Label::Glaucoma { pos } else { n - pos };
            n / (2.0 * nc)
        }
    };
    labels.iter().map(|&l| params.c * w(l)).collect()
}

pub(crate) fn scale_gamma(x: &[f64], dim: usize) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (dim as f64 * var)
    } else {
        1.0
    }
}

/// A fitted classifier. Positive decision values predict glaucoma.
#[derive(Clone, Debug, PartialEq)]
pub struct Svc {
    kernel: Kernel,
    gamma: f64,
    dim: usize,
    support: Vec<f64>,
    coef: Vec<f64>,
    rho: f64,
}

impl Svc {
    /// Fits on `x` (`n x dim`, row-major). Both classes must be present.
    pub fn fit(x: &[f64], dim: usize, labels: &[Label], params: &SvcParams) -> Result<Self> {
        params.validate()?;
        let n = labels.len();
        if dim == 0 || x.len() != n * dim {
            return shape_err("training matrix does not match labels");
        }
        let pos = labels.iter().filter(|l| **l == Label::Glaucoma).count();
        if pos == 0 || pos == n {
            return arg_err("SVC training needs both classes");
        }
        let gamma = params.gamma.unwrap_or_else(|| scale_gamma(x, dim));
        let y: Vec<f64> = labels
            .iter()
            .map(|l| if *l == Label::Glaucoma { 1.0 } else { -1.0 })
            .collect();
        let rows: Vec<&[f64]> = x.chunks_exact(dim).collect();
        let kmat: Vec<f64> = crate::par::map_range(n, |i| {
            (0..n)
                .map(|j| kernel_value(params.kernel, gamma, rows[i], rows[j]))
                .collect::<Vec<f64>>()
        })
        .concat();
        let bounds = sample_bounds(params, labels);
        let (alpha, rho) = solve_smo(&kmat, &y, &bounds);
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for i in 0..n {
            if alpha[i] > 0.0 {
                support.extend_from_slice(rows[i]);
                coef.push(alpha[i] * y[i]);
            }
        }
        Ok(Self {
            kernel: params.kernel,
            gamma,
            dim,
            support,
            coef,
            rho,
        })
    }

    pub fn support_count(&self) -> usize {
        self.coef.len()
    }

    pub fn decision_function(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() % self.dim != 0 {
            return shape_err(format!("rows must have {} features", self.dim));
        }
        Ok(x.chunks_exact(self.dim)
            .map(|row| {
                self.support
                    .chunks_exact(self.dim)
                    .zip(&self.coef)
                    .map(|(s, c)| c * kernel_value(self.kernel, self.gamma, s, row))
                    .sum::<f64>()
                    - self.rho
            })
            .collect())
    }

    pub fn predict(&self, x: &[f64]) -> Result<Vec<Label>> {
        Ok(self
            .decision_function(x)?
            .into_iter()
            .map(|s| if s > 0.0 { Label::Glaucoma } else { Label::Normal })
            .collect())
    }
}

/// Solves `min 1/2 a'Qa - e'a` s.t. `y'a = 0`, `0 <= a_i <= c_i`, with
/// `Q_ij = y_i y_j K_ij`. Returns `(alpha, rho)`.
pub(crate) fn solve_smo(k: &[f64], y: &[f64], c: &[f64]) -> (Vec<f64>, f64) {
    let n = y.len();
    let q = |i: usize, j: usize| y[i] * y[j] * k[i * n + j];
    let mut alpha = vec![0.0f64; n];
    let mut grad = vec![-1.0f64; n];
    let is_upper = |a: f64, ci: f64| a >= ci;
    let is_lower = |a: f64| a <= 0.0;
    let max_iter = (100 * n).max(10_000_000);

    for _ in 0..max_iter {
        // Working set: maximal violating i, then j by second-order gain.
        let mut gmax = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            let in_up = if y[t] > 0.0 { !is_upper(alpha[t], c[t]) } else { !is_lower(alpha[t]) };
            if in_up && -y[t] * grad[t] >= gmax {
                if -y[t] * grad[t] > gmax || i_sel == usize::MAX {
                    gmax = -y[t] * grad[t];
                    i_sel = t;
                }
            }
        }
        let mut gmin = f64::INFINITY;
        let mut j_sel = usize::MAX;
        let mut best_obj = f64::INFINITY;
        if i_sel != usize::MAX {
            let i = i_sel;
            for t in 0..n {
                let in_low = if y[t] > 0.0 { !is_lower(alpha[t]) } else { !is_upper(alpha[t], c[t]) };
                if !in_low {
                    continue;
                }
                let yg = -y[t] * grad[t];
                gmin = gmin.min(yg);
                let b = gmax - yg;
                if b > 0.0 {
                    let mut a = k[i * n + i] + k[t * n + t] - 2.0 * y[i] * y[t] * q(i, t);
                    if a <= 0.0 {
                        a = TAU;
                    }
                    let obj = -(b * b) / a;
                    if obj < best_obj {
                        best_obj = obj;
                        j_sel = t;
                    }
                }
            }
        }
        if i_sel == usize::MAX || j_sel == usize::MAX || gmax - gmin < TOLERANCE {
            break;
        }
        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let (ci, cj) = (c[i], c[j]);
        if y[i] != y[j] {
            let mut quad = k[i * n + i] + k[j * n + j] + 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > ci - cj {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = ci - diff;
                }
            } else if alpha[j] > cj {
                alpha[j] = cj;
                alpha[i] = cj + diff;
            }
        } else {
            let mut quad = k[i * n + i] + k[j * n + j] - 2.0 * q(i, j);
            if quad <= 0.0 {
                quad = TAU;
            }
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > ci {
                if alpha[i] > ci {
                    alpha[i] = ci;
                    alpha[j] = sum - ci;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > cj {
                if alpha[j] > cj {
                    alpha[j] = cj;
                    alpha[i] = sum - cj;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += q(t, i) * di + q(t, j) * dj;
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum_free) = (0usize, 0.0f64);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if is_upper(alpha[t], c[t]) {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if is_lower(alpha[t]) {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum_free += yg;
        }
    }
    let rho = if free > 0 { sum_free / free as f64 } else { (ub + lb) / 2.0 };
    (alpha, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&l| Label::from_u8(l).unwrap()).collect()
    }

    /// Independent reference: Platt's original SMO sweeping every pair with
    /// the analytic two-variable update, no working-set heuristics. Returns
    /// the decision function on `test`.
    fn reference_decision(x: &[f64], dim: usize, y01: &[u8], c: f64, gamma: f64, kernel: Kernel, test: &[f64]) -> Vec<f64> {
        let n = y01.len();
        let y: Vec<f64> = y01.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();
        let kf = |a: &[f64], b: &[f64]| kernel_value(kernel, gamma, a, b);
        let row = |i: usize| &x[i * dim..(i + 1) * dim];
        let kk: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| kf(row(i), row(j))).collect()).collect();
        let mut a = vec![0.0f64; n];
        let mut b = 0.0f64;
        let f = |a: &[f64], b: f64, i: usize| (0..n).map(|j| a[j] * y[j] * kk[j][i]).sum::<f64>() + b;
        for _sweep in 0..2000 {
            let mut changed = 0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let (ei, ej) = (f(&a, b, i) - y[i], f(&a, b, j) - y[j]);
                    let (lo, hi) = if y[i] != y[j] {
                        ((a[j] - a[i]).max(0.0), (c + a[j] - a[i]).min(c))
                    } else {
                        ((a[i] + a[j] - c).max(0.0), (a[i] + a[j]).min(c))
                    };
                    if hi - lo < 1e-14 {
                        continue;
                    }
                    let eta = kk[i][i] + kk[j][j] - 2.0 * kk[i][j];
                    if eta <= 1e-14 {
                        continue;
                    }
                    let aj = (a[j] + y[j] * (ei - ej) / eta).clamp(lo, hi);
                    if (aj - a[j]).abs() < 1e-12 {
                        continue;
                    }
                    let ai = a[i] + y[i] * y[j] * (a[j] - aj);
                    let b1 = b - ei - y[i] * (ai - a[i]) * kk[i][i] - y[j] * (aj - a[j]) * kk[i][j];
                    let b2 = b - ej - y[i] * (ai - a[i]) * kk[i][j] - y[j] * (aj - a[j]) * kk[j][j];
                    b = if ai > 0.0 && ai < c {
                        b1
                    } else if aj > 0.0 && aj < c {
                        b2
                    } else {
                        (b1 + b2) / 2.0
                    };
                    a[i] = ai;
                    a[j] = aj;
                    changed += 1;
                }
            }
            if changed == 0 {
                break;
            }
        }
        test.chunks_exact(dim)
            .map(|t| (0..n).map(|j| a[j] * y[j] * kf(row(j), t)).sum::<f64>() + b)
            .collect()
    }

    fn small_problem(seed: u64, n: usize) -> (Vec<f64>, Vec<u8>) {
        let mut rng = crate::rng::stream(seed, &[]);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let l = (i % 2) as u8;
            let c = if l == 1 { 1.5 } else { -1.5 };
            x.push(c + rng.gen_range(-1.0..1.0));
            x.push(rng.gen_range(-1.0..1.0));
            y.push(l);
        }
        (x, y)
    }

    #[test]
    fn matches_reference_solver_on_small_instances() {
        for seed in 0..5 {
            let (x, y) = small_problem(seed, 16);
            let mut rng = crate::rng::stream(seed + 100, &[]);
            let test: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for kernel in [Kernel::Linear, Kernel::Rbf] {
                let params = SvcParams {
                    gamma: Some(0.5),
                    ..SvcParams::new(1.0, kernel, ClassWeight::None)
                };
                let svc = Svc::fit(&x, 2, &labels(&y), &params).unwrap();
                let ours = svc.decision_function(&test).unwrap();
                let reference = reference_decision(&x, 2, &y, 1.0, 0.5, kernel, &test);
                for (a, b) in ours.iter().zip(&reference) {
                    assert!((a - b).abs() < 0.05, "{kernel:?}: {a} vs {b}");
                    if a.abs() > 0.05 {
                        assert_eq!(a.signum(), b.signum());
                    }
                }
            }
        }
    }

    #[test]
    fn duplicate_point_leaves_predictions_unchanged() {
        // Separable data with large C: no multiplier sits at its bound, so a
        // duplicated training point can share its multiplier.
        for seed in 0..5 {
            let (x, y) = small_problem(seed, 12);
            let mut rng = crate::rng::stream(seed + 7, &[]);
            let test: Vec<f64> = (0..40).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let params = SvcParams {
                gamma: Some(0.5),
                ..SvcParams::new(1000.0, Kernel::Rbf, ClassWeight::None)
            };
            let base = Svc::fit(&x, 2, &labels(&y), &params).unwrap();
            for dup in [0usize, 5] {
                let mut x2 = x.clone();
                x2.extend_from_slice(&x[dup * 2..dup * 2 + 2]);
                let mut y2 = y.clone();
                y2.push(y[dup]);
                let twin = Svc::fit(&x2, 2, &labels(&y2), &params).unwrap();
                let (p, q) = (base.decision_function(&test).unwrap(), twin.decision_function(&test).unwrap());
                for (a, b) in p.iter().zip(&q) {
                    if a.abs() > 1e-2 {
                        assert_eq!(a.signum(), b.signum());
                    }
                }
                let reference = reference_decision(&x2, 2, &y2, 1000.0, 0.5, Kernel::Rbf, &test);
                for (a, b) in q.iter().zip(&reference) {
                    if a.abs() > 1e-2 {
                        assert_eq!(a.signum(), b.signum());
                    }
                }
            }
        }
    }

    #[test]
    fn balanced_bounds() {
        let l = labels(&[0, 0, 0, 1]);
        let b = sample_bounds(&SvcParams::new(2.0, Kernel::Linear, ClassWeight::Balanced), &l);
        assert_eq!(b, vec![2.0 * 4.0 / 6.0, 2.0 * 4.0 / 6.0, 2.0 * 4.0 / 6.0, 2.0 * 2.0]);
        let b = sample_bounds(&SvcParams::new(2.0, Kernel::Linear, ClassWeight::None), &l);
        assert_eq!(b, vec![2.0; 4]);
    }

    #[test]
    fn rejects_bad_input() {
        let l = labels(&[1, 1]);
        assert!(Svc::fit(&[0.0, 1.0], 1, &l, &SvcParams::paper_optimum()).is_err());
        let l = labels(&[0, 1]);
        assert!(Svc::fit(&[0.0, 1.0], 1, &l, &SvcParams::new(0.0, Kernel::Rbf, ClassWeight::None)).is_err());
        assert!(Svc::fit(&[0.0], 1, &l, &SvcParams::paper_optimum()).is_err());
    }

    #[test]
    fn grid_contains_paper_optimum() {
        let g = default_grid();
        assert_eq!(g.len(), 12);
        assert!(g.contains(&SvcParams::paper_optimum()));
    }
}
