//! Design-matrix knockoffs and their coupling with the whitening filter.

use nalgebra::{DMatrix, DVector};

use crate::error::{out_of_range, Error, Result};
use crate::filter::OrderingDecision;
use crate::linalg::{self, sign};

/// A design X with knockoff copy X̃ and the diagonal D = diag(XᵀX − XᵀX̃).
#[derive(Debug, Clone)]
pub struct KnockoffPair {
    pub x: DMatrix<f64>,
    pub x_tilde: DMatrix<f64>,
    pub d_matrix: DVector<f64>,
}

impl KnockoffPair {
    /// Largest deviations from X̃ᵀX̃ = XᵀX and XᵀX̃ = XᵀX − D, relative to ‖XᵀX‖_max.
    pub fn gram_errors(&self) -> (f64, f64) {
        let g = self.x.transpose() * &self.x;
        let scale = linalg::max_abs(&g).max(f64::MIN_POSITIVE);
        let gt = self.x_tilde.transpose() * &self.x_tilde;
        let mut target = g.clone();
        for j in 0..g.nrows() {
            target[(j, j)] -= self.d_matrix[j];
        }
        let cross = self.x.transpose() * &self.x_tilde;
        (linalg::max_abs_diff(&gt, &g) / scale, linalg::max_abs_diff(&cross, &target) / scale)
    }
}

/// X̃ = X(I − G⁻¹D) + ŨC with G = XᵀX, CᵀC = 2D − DG⁻¹D, and Ũ the first d
/// columns of the orthogonal complement of col(X) from a full QR.
pub fn construct_knockoff_matrix(x: &DMatrix<f64>, d_diag: &DVector<f64>) -> Result<KnockoffPair> {
    let (n, d) = x.shape();
    if d_diag.len() != d {
        return Err(Error::Dimension(format!("D has {} entries, X has {d} columns", d_diag.len())));
    }
    if n < 2 * d {
        return Err(Error::Dimension(format!("need n >= 2d, got n = {n}, d = {d}")));
    }
    if d_diag.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(out_of_range("D entries must be non-negative and finite"));
    }
    let g = x.transpose() * x;
    let g_inv = linalg::spd_inverse(&g).map_err(|_| Error::RankDeficient("X is not full column rank".into()))?;
    let dm = DMatrix::from_diagonal(d_diag);
    let s = 2.0 * &dm - &dm * &g_inv * &dm;
    let (vals, vecs) = linalg::sym_eigen_desc(&s)?;
    let tol = 1e-8 * d_diag.max().max(f64::MIN_POSITIVE);
    if vals[d - 1] < -tol {
        return Err(Error::NotDominating { min_eig: vals[d - 1] });
    }
    let c = linalg::spectral_map(&vals, &vecs, |v| v.max(0.0).sqrt());

    let mut aug = DMatrix::zeros(n, d + n);
    aug.columns_mut(0, d).copy_from(x);
    aug.columns_mut(d, n).copy_from(&DMatrix::identity(n, n));
    let q = aug.qr().q();
    let u_tilde = q.columns(d, d).into_owned();

    let x_tilde = x * (DMatrix::identity(d, d) - &g_inv * &dm) + u_tilde * c;
    Ok(KnockoffPair { x: x.clone(), x_tilde, d_matrix: d_diag.clone() })
}

/// Whitening quantities induced by a knockoff pair and response y, with
/// Δ = 2D⁻¹.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub omega: DVector<f64>,
    pub beta_tilde: DVector<f64>,
    pub xi: DVector<f64>,
    pub beta_hat: DVector<f64>,
    pub delta: DVector<f64>,
}

/// β̃ = D⁻¹(X − X̃)ᵀy, ξ = ½(X + X̃)ᵀy, ω = β̃ − β̂.
pub fn couple_omega(pair: &KnockoffPair, y: &DVector<f64>) -> Result<Coupling> {
    if y.len() != pair.x.nrows() {
        return Err(Error::Dimension(format!("y has {} entries, X has {} rows", y.len(), pair.x.nrows())));
    }
    if let Some(j) = pair.d_matrix.iter().position(|v| *v <= 0.0) {
        return Err(out_of_range(format!(
            "D entry {} is zero; coupling needs D > 0 (D_jj = 0 corresponds to an infinite delta_jj)",
            j + 1
        )));
    }
    let g = pair.x.transpose() * &pair.x;
    let beta_hat = linalg::spd_inverse(&g)? * (pair.x.transpose() * y);
    let beta_tilde = ((&pair.x - &pair.x_tilde).transpose() * y).component_div(&pair.d_matrix);
    let xi = 0.5 * (&pair.x + &pair.x_tilde).transpose() * y;
    let omega = &beta_tilde - &beta_hat;
    let delta = pair.d_matrix.map(|v| 2.0 / v);
    Ok(Coupling { omega, beta_tilde, xi, beta_hat, delta })
}

/// W*_j = sgn((X_j − X̃_j)ᵀy) · W_j.
pub fn wstar(w: &[f64], pair: &KnockoffPair, y: &DVector<f64>) -> Result<Vec<f64>> {
    if w.len() != pair.x.ncols() || y.len() != pair.x.nrows() {
        return Err(Error::Dimension("W or y does not match the knockoff pair".into()));
    }
    let diff = (&pair.x - &pair.x_tilde).transpose() * y;
    Ok(w.iter().zip(diff.iter()).map(|(wj, s)| f64::from(sign(*s)) * wj).collect())
}

/// W_[j] = (d + 1 − j) · ψ_[j] · sgn(β̃_[j]) along the ordering.
pub fn whitening_to_w(ordering: &OrderingDecision, beta_tilde: &DVector<f64>) -> Result<Vec<f64>> {
    ordering.validate()?;
    let d = ordering.order.len();
    if beta_tilde.len() != d {
        return Err(Error::Dimension(format!("beta_tilde has {} entries, ordering has {d}", beta_tilde.len())));
    }
    let mut w = vec![0.0; d];
    for (pos, &j) in ordering.order.iter().enumerate() {
        w[j] = (d - pos) as f64 * f64::from(ordering.psi[j]) * f64::from(sign(beta_tilde[j]));
    }
    Ok(w)
}

/// Ordering by descending |W| and ψ = sgn(W*). Ties or zeros in |W| are errors.
pub fn w_to_whitening(w: &[f64], w_star: &[f64]) -> Result<OrderingDecision> {
    let d = w.len();
    if w_star.len() != d {
        return Err(Error::Dimension("W and W* lengths differ".into()));
    }
    if let Some(j) = (0..d).find(|&j| !(w[j].abs() > 0.0) || !(w_star[j].abs() > 0.0)) {
        return Err(Error::TieOrZero(j));
    }
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()));
    if let Some(pos) = order.windows(2).position(|p| w[p[0]].abs() == w[p[1]].abs()) {
        return Err(Error::TieOrZero(order[pos + 1]));
    }
    let psi = w_star.iter().map(|v| if *v > 0.0 { 1 } else { -1 }).collect();
    Ok(OrderingDecision { order, psi })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand_distr::{Distribution, StandardNormal};

    fn random_design(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = seeded(seed);
        let mut x = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
        for mut c in x.column_iter_mut() {
            let norm = c.norm();
            c /= norm;
        }
        x
    }

    #[test]
    fn zero_d_gives_identical_copy() {
        let x = random_design(12, 4, 1);
        let pair = construct_knockoff_matrix(&x, &DVector::zeros(4)).unwrap();
        assert_eq!(pair.x_tilde, x);
    }

    #[test]
    fn orthonormal_design() {
        let x = DMatrix::<f64>::identity(8, 3);
        let pair = construct_knockoff_matrix(&x, &DVector::from_element(3, 1.0)).unwrap();
        assert!((pair.x_tilde.transpose() * &x).amax() < 1e-12);
        assert!(linalg::max_abs_diff(&(pair.x_tilde.transpose() * &pair.x_tilde), &DMatrix::identity(3, 3)) < 1e-12);
    }

    #[test]
    fn random_design_gram_conditions() {
        let x = random_design(60, 20, 2);
        let g = x.transpose() * &x;
        let lmin = linalg::sym_eigen_desc(&g).unwrap().0[19];
        let pair = construct_knockoff_matrix(&x, &DVector::from_element(20, 2.0 * lmin * 0.9)).unwrap();
        let (e1, e2) = pair.gram_errors();
        assert!(e1 < 1e-8 && e2 < 1e-8, "{e1} {e2}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let x = random_design(7, 4, 3);
        assert!(construct_knockoff_matrix(&x, &DVector::from_element(4, 0.1)).is_err());
        let x = random_design(10, 2, 3);
        assert!(construct_knockoff_matrix(&x, &DVector::from_element(2, 5.0)).is_err());
    }

    #[test]
    fn w_mappings() {
        let o = OrderingDecision { order: vec![0, 1, 2], psi: vec![1, 1, 1] };
        let bt = DVector::from_vec(vec![1.0, -1.0, 2.0]);
        let w = whitening_to_w(&o, &bt).unwrap();
        assert_eq!(w, vec![3.0, -2.0, 1.0]);
        let ws: Vec<f64> = w.iter().zip(bt.iter()).map(|(a, b)| a * b.signum()).collect();
        assert_eq!(ws, vec![3.0, 2.0, 1.0]);
        let back = w_to_whitening(&w, &ws).unwrap();
        assert_eq!(back.order, vec![0, 1, 2]);
        assert_eq!(back.psi, vec![1, 1, 1]);
        let single = w_to_whitening(&[1.0], &[-1.0]).unwrap();
        assert_eq!((single.order, single.psi), (vec![0], vec![-1]));
        assert!(matches!(w_to_whitening(&[2.0, -2.0], &[2.0, 2.0]), Err(Error::TieOrZero(_))));
        assert!(matches!(w_to_whitening(&[0.0, 1.0], &[0.0, 1.0]), Err(Error::TieOrZero(0))));
    }

    #[test]
    fn wstar_sign_cases() {
        let x = DMatrix::<f64>::identity(4, 2);
        let pair = construct_knockoff_matrix(&x, &DVector::from_element(2, 1.0)).unwrap();
        let y = DVector::from_vec(vec![1.0, -1.0, 0.3, 0.2]);
        let diff = (&pair.x - &pair.x_tilde).transpose() * &y;
        let ws = wstar(&[0.0, 5.0], &pair, &y).unwrap();
        assert_eq!(ws[0], 0.0);
        assert_eq!(ws[1], 5.0 * diff[1].signum());
    }
}
