//! Binary soft-margin SVMs trained by sequential minimal optimization.
//!
//! The solver keeps the full kernel matrix in memory and picks working pairs
//! with second-order information: `i` is the maximal violator in the "up"
//! set, `j` maximizes the guaranteed decrease of the dual objective.

use std::fmt::{self, Write as _};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Kernel {
    Linear,
    Rbf { gamma: f64 },
}

impl Kernel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Kernel::Rbf { gamma } if !(gamma > 0.0 && gamma.is_finite()) => {
                Err(Error::Config(format!("rbf gamma must be positive, got {gamma}")))
            }
            _ => Ok(()),
        }
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf { gamma } => (-gamma * squared_distance(a, b)).exp(),
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Kernel::Linear => f.write_str("linear"),
            Kernel::Rbf { gamma } => write!(f, "rbf(gamma={gamma:e})"),
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn linear_kernel(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dims(a, b)?;
    Ok(Kernel::Linear.eval(a, b))
}

pub fn rbf_kernel(a: &[f64], b: &[f64], gamma: f64) -> Result<f64> {
    check_dims(a, b)?;
    let k = Kernel::Rbf { gamma };
    k.validate()?;
    Ok(k.eval(a, b))
}

fn check_dims(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvmConfig {
    pub c: f64,
    /// Stop once the maximal KKT violation drops below this.
    pub tol: f64,
    /// Iteration cap; `None` means `max(10_000_000, 100 N)`.
    pub max_iter: Option<usize>,
}

impl Default for SvmConfig {
    fn default() -> Self {
        SvmConfig {
            c: 1.0,
            tol: 1e-3,
            max_iter: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub kernel: Kernel,
    pub c: f64,
    /// Training-set index of every support vector.
    pub support_index: Vec<usize>,
    pub support: Vec<Vec<f64>>,
    /// `α_i y_i` per support vector.
    pub coef: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    /// Final maximal KKT violation.
    pub violation: f64,
}

/// Solver output before support vectors are extracted; exposed for
/// feasibility checks.
#[derive(Debug, Clone)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    pub bias: f64,
    pub iterations: usize,
    pub violation: f64,
}

const TAU: f64 = 1e-12;

pub fn kernel_matrix(x: &[Vec<f64>], kernel: Kernel) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0f64; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel.eval(&x[i], &x[j]);
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

fn check_training_set(x: &[Vec<f64>], y: &[i8]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("{} samples but {} labels", x.len(), y.len())));
    }
    if y.iter().any(|&v| v != 1 && v != -1) {
        return Err(Error::Data("svm labels must be -1 or +1".into()));
    }
    if !(y.contains(&1) && y.contains(&-1)) {
        return Err(Error::Data("svm training needs both classes".into()));
    }
    let d = x[0].len();
    if x.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("ragged feature matrix".into()));
    }
    Ok(())
}

/// Solves the dual over a precomputed `n × n` kernel matrix.
pub fn solve_dual(k: &[f64], y: &[i8], cfg: &SvmConfig) -> Result<DualSolution> {
    let n = y.len();
    if k.len() != n * n {
        return Err(Error::Shape(format!("kernel matrix has {} entries for {n} samples", k.len())));
    }
    if !(cfg.c > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::Config(format!("svm needs C > 0 and tol > 0, got C={} tol={}", cfg.c, cfg.tol)));
    }
    let c = cfg.c;
    let yf: Vec<f64> = y.iter().map(|&v| v as f64).collect();
    let diag: Vec<f64> = (0..n).map(|t| k[t * n + t]).collect();
    let mut alpha = vec![0f64; n];
    // Gradient of ½αᵀQα − eᵀα.
    let mut grad = vec![-1f64; n];
    let max_iter = cfg.max_iter.unwrap_or((100 * n).max(10_000_000));
    let in_up = |a: f64, yv: f64| (yv > 0.0 && a < c) || (yv < 0.0 && a > 0.0);
    let in_low = |a: f64, yv: f64| (yv > 0.0 && a > 0.0) || (yv < 0.0 && a < c);

    let mut iterations = 0;
    let violation = loop {
        let mut g_max = f64::NEG_INFINITY;
        let mut i_sel = usize::MAX;
        for t in 0..n {
            if in_up(alpha[t], yf[t]) && -yf[t] * grad[t] >= g_max {
                g_max = -yf[t] * grad[t];
                i_sel = t;
            }
        }
        let mut g_min = f64::INFINITY;
        let mut j_sel = usize::MAX;
        let mut best_gain = f64::INFINITY;
        let k_i = if i_sel == usize::MAX { &k[..0] } else { &k[i_sel * n..(i_sel + 1) * n] };
        for t in 0..n {
            if !in_low(alpha[t], yf[t]) {
                continue;
            }
            let v = -yf[t] * grad[t];
            g_min = g_min.min(v);
            if i_sel == usize::MAX {
                continue;
            }
            let b = g_max - v;
            if b > 0.0 {
                let a = diag[i_sel] + diag[t] - 2.0 * k_i[t];
                let gain = -(b * b) / if a > 0.0 { a } else { TAU };
                if gain <= best_gain {
                    best_gain = gain;
                    j_sel = t;
                }
            }
        }
        let gap = g_max - g_min;
        if i_sel == usize::MAX || j_sel == usize::MAX || gap < cfg.tol {
            break gap.max(0.0);
        }
        if iterations >= max_iter {
            return Err(Error::NotConverged { iterations, violation: gap });
        }
        iterations += 1;

        let (i, j) = (i_sel, j_sel);
        let (old_i, old_j) = (alpha[i], alpha[j]);
        let quad = (diag[i] + diag[j] - 2.0 * k[i * n + j]).max(TAU);
        if yf[i] != yf[j] {
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
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        // Q is symmetric, so read rows i and j instead of columns.
        let (di, dj) = (yf[i] * (alpha[i] - old_i), yf[j] * (alpha[j] - old_j));
        let (k_i, k_j) = (&k[i * n..(i + 1) * n], &k[j * n..(j + 1) * n]);
        for t in 0..n {
            grad[t] += yf[t] * (k_i[t] * di + k_j[t] * dj);
        }
    };

    // ρ from free vectors, else the midpoint of the feasible interval.
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = yf[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else if (alpha[t] >= c && yf[t] < 0.0) || (alpha[t] <= 0.0 && yf[t] > 0.0) {
            ub = ub.min(yg);
        } else {
            lb = lb.max(yg);
        }
    }
    let rho = if free > 0 { sum / free as f64 } else { (ub + lb) / 2.0 };
    Ok(DualSolution {
        alpha,
        bias: -rho,
        iterations,
        violation,
    })
}

pub fn train_svm(x: &[Vec<f64>], y: &[i8], kernel: Kernel, cfg: &SvmConfig) -> Result<SvmModel> {
    if x.len() < 2 {
        return Err(Error::Data(format!("svm training needs at least 2 samples, got {}", x.len())));
    }
    check_training_set(x, y)?;
    kernel.validate()?;
    let k = kernel_matrix(x, kernel);
    let sol = solve_dual(&k, y, cfg)?;
    let mut model = SvmModel {
        kernel,
        c: cfg.c,
        support_index: Vec::new(),
        support: Vec::new(),
        coef: Vec::new(),
        bias: sol.bias,
        iterations: sol.iterations,
        violation: sol.violation,
    };
    for (i, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            model.support_index.push(i);
            model.support.push(x[i].clone());
            model.coef.push(a * y[i] as f64);
        }
    }
    Ok(model)
}

impl SvmModel {
    pub fn decision_value(&self, x: &[f64]) -> Result<f64> {
        if let Some(sv) = self.support.first() {
            check_dims(sv, x)?;
        }
        Ok(self
            .support
            .iter()
            .zip(&self.coef)
            .map(|(sv, &cf)| cf * self.kernel.eval(sv, x))
            .sum::<f64>()
            + self.bias)
    }

    /// Sum of `α_i y_i`; zero for a dual-feasible model.
    pub fn coef_sum(&self) -> f64 {
        self.coef.iter().sum()
    }

    /// Text dump: header lines, then one `index alpha_y` line per support
    /// vector.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "kernel {}", self.kernel);
        let _ = writeln!(s, "C {:e}", self.c);
        let _ = writeln!(s, "bias {:e}", self.bias);
        let _ = writeln!(s, "support_vectors {}", self.coef.len());
        for (i, c) in self.support_index.iter().zip(&self.coef) {
            let _ = writeln!(s, "{i} {c:e}");
        }
        s
    }
}

/// Predicted class and decision value; an exactly zero decision is `+1`.
pub fn svm_predict(model: &SvmModel, x: &[f64]) -> Result<(i8, f64)> {
    let f = model.decision_value(x)?;
    Ok((if f >= 0.0 { 1 } else { -1 }, f))
}

/// `1 / (d · var)` over every entry of the feature matrix.
pub fn default_gamma(x: &[Vec<f64>]) -> f64 {
    let d = x.first().map_or(1, Vec::len).max(1);
    let n = (x.len() * d) as f64;
    let mean = x.iter().flatten().sum::<f64>() / n;
    let var = x.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var > 0.0 {
        1.0 / (d as f64 * var)
    } else {
        1.0 / d as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelFamily {
    Linear,
    Rbf,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::Linear => "linear",
            KernelFamily::Rbf => "rbf",
        }
    }
}

pub const C_GRID: [f64; 3] = [0.1, 1.0, 10.0];

/// Candidate `(kernel, C)` pairs; the default `(C = 1, γ₀)` comes first so it
/// wins validation ties.
pub fn hyperparameter_grid(family: KernelFamily, gamma0: f64) -> Vec<(Kernel, f64)> {
    let mut out = Vec::new();
    let gammas: Vec<Option<f64>> = match family {
        KernelFamily::Linear => vec![None],
        KernelFamily::Rbf => vec![Some(gamma0), Some(gamma0 / 10.0), Some(gamma0 * 10.0)],
    };
    for &c in &[1.0, 0.1, 10.0] {
        for g in &gammas {
            let k = g.map_or(Kernel::Linear, |gamma| Kernel::Rbf { gamma });
            out.push((k, c));
        }
    }
    out
}

/// Result of a validation-set grid search.
#[derive(Debug, Clone)]
pub struct GridSearchOutcome {
    pub model: SvmModel,
    pub validation_accuracy: f64,
}

pub fn accuracy(model: &SvmModel, x: &[Vec<f64>], y: &[i8]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::Contract("accuracy over an empty set".into()));
    }
    let mut correct = 0;
    for (xi, &yi) in x.iter().zip(y) {
        if svm_predict(model, xi)?.0 == yi {
            correct += 1;
        }
    }
    Ok(correct as f64 / x.len() as f64)
}

/// Fits every grid candidate on the training set and keeps the best one on
/// the validation set. An empty validation set selects the defaults.
pub fn grid_search(
    train_x: &[Vec<f64>],
    train_y: &[i8],
    val_x: &[Vec<f64>],
    val_y: &[i8],
    family: KernelFamily,
    tol: f64,
) -> Result<GridSearchOutcome> {
    let gamma0 = default_gamma(train_x);
    let mut grid = hyperparameter_grid(family, gamma0);
    if val_x.is_empty() {
        grid.truncate(1);
    }
    let mut best: Option<GridSearchOutcome> = None;
    for (kernel, c) in grid {
        let cfg = SvmConfig { c, tol, max_iter: None };
        let model = train_svm(train_x, train_y, kernel, &cfg)?;
        let acc = if val_x.is_empty() { f64::NAN } else { accuracy(&model, val_x, val_y)? };
        if best.as_ref().is_none_or(|b| acc > b.validation_accuracy) {
            best = Some(GridSearchOutcome {
                model,
                validation_accuracy: acc,
            });
        }
    }
    Ok(best.expect("grid is never empty"))
}
