//! Lasso entry levels along a geometric penalty grid.
//!
//! Minimizes (1/2n)‖y − Xb‖² + λ‖b‖₁ by covariance-updated coordinate
//! descent with warm starts from one grid point to the next.

use nalgebra::{DMatrix, DVector};

use crate::error::{out_of_range, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LassoConfig {
    pub grid_points: usize,
    /// Smallest penalty as a fraction of λ_max.
    pub min_ratio: f64,
    /// A sweep has converged once max_j G_jj·(Δb_j)² < tol · yᵀy/n, with
    /// G = XᵀX/n (the objective decrease it could still buy is negligible).
    pub tol: f64,
    pub max_sweeps: usize,
}

impl Default for LassoConfig {
    fn default() -> Self {
        Self { grid_points: 50, min_ratio: 1e-3, tol: 1e-7, max_sweeps: 10_000 }
    }
}

/// `points` geometrically spaced values from `lambda_max` down to
/// `min_ratio · lambda_max`.
pub fn geometric_grid(lambda_max: f64, points: usize, min_ratio: f64) -> Vec<f64> {
    if points == 1 {
        return vec![lambda_max];
    }
    let step = min_ratio.ln() / (points - 1) as f64;
    (0..points).map(|i| lambda_max * (step * i as f64).exp()).collect()
}

/// λ_max = max|Xᵀy| / rows, the smallest penalty with an all-zero solution.
pub fn lambda_max(design: &DMatrix<f64>, response: &DVector<f64>) -> f64 {
    (design.transpose() * response).amax() / design.nrows() as f64
}

fn soft(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

struct Solver<'a> {
    gram: &'a DMatrix<f64>,
    grad: DVector<f64>,
    beta: DVector<f64>,
    tol: f64,
    sweeps: usize,
    max_sweeps: usize,
}

impl Solver<'_> {
    fn update(&mut self, j: usize, lambda: f64) -> f64 {
        let gjj = self.gram[(j, j)];
        if gjj <= 0.0 {
            return 0.0;
        }
        let old = self.beta[j];
        let new = soft(self.grad[j] + gjj * old, lambda) / gjj;
        let delta = new - old;
        if delta != 0.0 {
            self.beta[j] = new;
            self.grad.axpy(-delta, &self.gram.column(j), 1.0);
        }
        gjj * delta * delta
    }

    fn sweep(&mut self, coords: &[usize], lambda: f64) -> Result<f64> {
        self.sweeps += 1;
        if self.sweeps > self.max_sweeps {
            return Err(Error::Numerical(format!(
                "lasso coordinate descent did not converge within {} sweeps",
                self.max_sweeps
            )));
        }
        Ok(coords.iter().map(|&j| self.update(j, lambda)).fold(0.0, f64::max))
    }

    fn solve(&mut self, lambda: f64) -> Result<()> {
        let all: Vec<usize> = (0..self.beta.len()).collect();
        self.sweeps = 0;
        loop {
            if self.sweep(&all, lambda)? < self.tol {
                return Ok(());
            }
            let active: Vec<usize> = all.iter().copied().filter(|&j| self.beta[j] != 0.0).collect();
            while self.sweep(&active, lambda)? >= self.tol {}
        }
    }
}

/// For each column, the largest grid penalty at which its lasso coefficient
/// is nonzero; 0 if it never enters.
pub fn lasso_entry_path(design: &DMatrix<f64>, response: &DVector<f64>, grid: &[f64]) -> Result<Vec<f64>> {
    lasso_entry_path_with(design, response, grid, &LassoConfig::default())
}

pub fn lasso_entry_path_with(
    design: &DMatrix<f64>,
    response: &DVector<f64>,
    grid: &[f64],
    cfg: &LassoConfig,
) -> Result<Vec<f64>> {
    let (n, p) = design.shape();
    if response.len() != n {
        return Err(Error::Dimension(format!("design has {n} rows, response has {}", response.len())));
    }
    if grid.is_empty() || grid.iter().any(|v| !(*v > 0.0 && v.is_finite())) || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(out_of_range("lasso grid must be positive and strictly descending"));
    }
    let nf = n as f64;
    let gram = design.transpose() * design / nf;
    let scale = response.norm_squared() / nf;
    let mut solver = Solver {
        gram: &gram,
        grad: design.transpose() * response / nf,
        beta: DVector::zeros(p),
        tol: cfg.tol * scale.max(f64::MIN_POSITIVE),
        sweeps: 0,
        max_sweeps: cfg.max_sweeps,
    };
    let mut entry = vec![0.0; p];
    for &lambda in grid {
        solver.solve(lambda)?;
        for j in 0..p {
            if entry[j] == 0.0 && solver.beta[j] != 0.0 {
                entry[j] = lambda;
            }
        }
    }
    Ok(entry)
}

/// Entry levels on the default geometric grid from λ_max.
pub fn lasso_entry_levels(design: &DMatrix<f64>, response: &DVector<f64>, cfg: &LassoConfig) -> Result<Vec<f64>> {
    if cfg.grid_points == 0 || !(cfg.min_ratio > 0.0 && cfg.min_ratio < 1.0) {
        return Err(out_of_range("lasso grid needs at least one point and min_ratio in (0, 1)"));
    }
    let top = lambda_max(design, response);
    if top == 0.0 {
        return Ok(vec![0.0; design.ncols()]);
    }
    lasso_entry_path_with(design, response, &geometric_grid(top, cfg.grid_points, cfg.min_ratio), cfg)
}
