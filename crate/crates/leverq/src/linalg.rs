//! Dense row-major matrices and the spectral diagnostics used throughout the
//! crate: SVD, rank-capped pseudo-inverse, numeric rank, condition number,
//! spikiness, coherence, and exact leverage scores.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from matrix construction and spectral computations.
#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("matrix dimensions {rows}x{cols} do not match data length {len}")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("operation requires a non-empty matrix")]
    EmptyMatrix,
    #[error("operation is undefined for an all-zero matrix")]
    ZeroMatrix,
    #[error("rank {rank} is outside the valid range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },
    #[error("dimension mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    DimensionMismatch {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("SVD failed to converge")]
    SvdFailed,
}

/// Dense `rows x cols` matrix of `f64`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major `data`; the length must be `rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::ShapeMismatch { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// All-zero matrix of the given shape.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    /// Builds a matrix by evaluating `f(row, col)` at every position.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Row-major backing slice.
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = value;
    }

    /// View of row `r`.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Matrix product `self * rhs`.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let v = self.get(r, k);
                if v == 0.0 {
                    continue;
                }
                let rhs_row = rhs.row(k);
                let out_row = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
                for (o, &x) in out_row.iter_mut().zip(rhs_row) {
                    *o += v * x;
                }
            }
        }
        Ok(out)
    }

    /// Entry-wise difference `self - rhs`.
    pub fn sub(&self, rhs: &Matrix) -> Result<Matrix, LinalgError> {
        if self.rows != rhs.rows || self.cols != rhs.cols {
            return Err(LinalgError::DimensionMismatch {
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: rhs.rows,
                right_cols: rhs.cols,
            });
        }
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, data })
    }

    /// Submatrix at the given row and column index lists (in the given order).
    pub fn select(&self, row_idx: &[usize], col_idx: &[usize]) -> Matrix {
        Matrix::from_fn(row_idx.len(), col_idx.len(), |r, c| self.get(row_idx[r], col_idx[c]))
    }

    /// Multiplies row `r` by `weights[r]` (left-diagonal scaling).
    pub fn scale_rows(&self, weights: &[f64]) -> Matrix {
        debug_assert_eq!(weights.len(), self.rows);
        Matrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c) * weights[r])
    }

    /// Multiplies column `c` by `weights[c]` (right-diagonal scaling).
    pub fn scale_cols(&self, weights: &[f64]) -> Matrix {
        debug_assert_eq!(weights.len(), self.cols);
        Matrix::from_fn(self.rows, self.cols, |r, c| self.get(r, c) * weights[c])
    }

    /// Largest entry magnitude, `max_{s,a} |Q(s,a)|`.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm.
    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    fn check_nonempty(&self) -> Result<(), LinalgError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(LinalgError::EmptyMatrix);
        }
        Ok(())
    }

    /// Thin SVD with singular values sorted in non-increasing order.
    pub fn svd(&self) -> Result<Svd, LinalgError> {
        self.check_nonempty()?;
        let mat = faer::Mat::from_fn(self.rows, self.cols, |r, c| self.get(r, c));
        let svd = mat.thin_svd().map_err(|_| LinalgError::SvdFailed)?;
        let k = self.rows.min(self.cols);
        let (u_ref, v_ref, s_ref) = (svd.U(), svd.V(), svd.S().column_vector());
        let singular_values: Vec<f64> = (0..k).map(|i| *s_ref.get(i)).collect();
        let u = Matrix::from_fn(self.rows, k, |r, c| *u_ref.get(r, c));
        let vt = Matrix::from_fn(k, self.cols, |r, c| *v_ref.get(c, r));
        let svd = Svd { u, singular_values, vt };
        #[cfg(debug_assertions)]
        {
            let gap = svd.truncated(k).sub(self)?.max_abs();
            let scale = svd.singular_values[0].max(1.0);
            debug_assert!(
                gap <= 1e-10 * scale * self.rows.max(self.cols) as f64,
                "SVD reconstruction off by {gap:e} at scale {scale:e}"
            );
        }
        Ok(svd)
    }

    /// Number of singular values above `tol`; the default tolerance is
    /// `max(rows, cols) * machine_epsilon * sigma_1`.
    pub fn numeric_rank(&self, tol: Option<f64>) -> Result<usize, LinalgError> {
        let svd = self.svd()?;
        let s = &svd.singular_values;
        let tol = tol.unwrap_or_else(|| self.rows.max(self.cols) as f64 * f64::EPSILON * s[0]);
        Ok(s.iter().filter(|&&v| v > tol).count())
    }

    /// Ratio of the largest to the smallest singular value; `+inf` when the
    /// smallest is zero. Errors on an all-zero matrix.
    pub fn cond_number(&self) -> Result<f64, LinalgError> {
        let svd = self.svd()?;
        let s = &svd.singular_values;
        let smax = s[0];
        let smin = s[s.len() - 1];
        if smax == 0.0 {
            return Err(LinalgError::ZeroMatrix);
        }
        if smin == 0.0 {
            return Ok(f64::INFINITY);
        }
        Ok(smax / smin)
    }

    /// Ratio of the largest singular value to the smallest one above the
    /// numeric-rank tolerance. For a full-rank matrix this equals
    /// [`cond_number`](Self::cond_number); for an exactly rank-`r` matrix it
    /// is `sigma_1 / sigma_r` — the conditioning that matters when the matrix
    /// is treated as rank `r`, where the full ratio would be infinite.
    pub fn cond_effective(&self) -> Result<f64, LinalgError> {
        let svd = self.svd()?;
        let s = &svd.singular_values;
        if s[0] == 0.0 {
            return Err(LinalgError::ZeroMatrix);
        }
        let tol = self.rows.max(self.cols) as f64 * f64::EPSILON * s[0];
        let rank = s.iter().filter(|&&v| v > tol).count();
        Ok(s[0] / s[rank - 1])
    }

    /// Moore-Penrose pseudo-inverse computed from the SVD, discarding singular
    /// values below `rtol * sigma_1` and, when set, any beyond `rank_cap`.
    pub fn pseudo_inverse(&self, opts: &PinvOptions) -> Result<Matrix, LinalgError> {
        let svd = self.svd()?;
        let s = &svd.singular_values;
        let cutoff = opts.rtol * s[0];
        let mut keep = s.iter().filter(|&&v| v > cutoff).count();
        if let Some(cap) = opts.rank_cap {
            keep = keep.min(cap);
        }
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..keep {
            let inv = 1.0 / s[i];
            for r in 0..self.cols {
                let v_ri = svd.vt.get(i, r);
                if v_ri == 0.0 {
                    continue;
                }
                for c in 0..self.rows {
                    let val = out.get(r, c) + v_ri * inv * svd.u.get(c, i);
                    out.set(r, c, val);
                }
            }
        }
        Ok(out)
    }

    /// Best rank-`d` approximation in spectral/Frobenius norm (truncated SVD).
    pub fn low_rank_approx(&self, d: usize) -> Result<Matrix, LinalgError> {
        let svd = self.svd()?;
        let max = svd.singular_values.len();
        if d == 0 || d > max {
            return Err(LinalgError::RankOutOfRange { rank: d, max });
        }
        Ok(svd.truncated(d))
    }

    /// Entry-wise gap to the best rank-`d` approximation,
    /// `zeta_d = max_{s,a} |Q(s,a) - Q_d(s,a)|`.
    pub fn low_rank_inf_gap(&self, d: usize) -> Result<f64, LinalgError> {
        Ok(self.sub(&self.low_rank_approx(d)?)?.max_abs())
    }

    /// Spikiness `alpha = sqrt(S*A) * max|Q| / ||Q||_F`, in `[1, sqrt(S*A)]`.
    /// Errors on an all-zero matrix.
    pub fn spikiness(&self) -> Result<f64, LinalgError> {
        self.check_nonempty()?;
        let fro = self.fro_norm();
        if fro == 0.0 {
            return Err(LinalgError::ZeroMatrix);
        }
        Ok(((self.rows * self.cols) as f64).sqrt() * self.max_abs() / fro)
    }

    /// Coherence of the rank-`d` singular subspaces,
    /// `mu = max( sqrt(S/d) * max_s ||U_{s,:}||, sqrt(A/d) * max_a ||W_{a,:}|| )`.
    /// `d` defaults to the numeric rank.
    pub fn coherence(&self, d: Option<usize>) -> Result<f64, LinalgError> {
        let svd = self.svd()?;
        let max = svd.singular_values.len();
        let d = match d {
            Some(d) => d,
            None => self.numeric_rank(None)?.max(1),
        };
        if d == 0 || d > max {
            return Err(LinalgError::RankOutOfRange { rank: d, max });
        }
        let row_max = (0..self.rows)
            .map(|s| (0..d).map(|i| svd.u.get(s, i).powi(2)).sum::<f64>())
            .fold(0.0, f64::max);
        let col_max = (0..self.cols)
            .map(|a| (0..d).map(|i| svd.vt.get(i, a).powi(2)).sum::<f64>())
            .fold(0.0, f64::max);
        let mu_row = (self.rows as f64 / d as f64 * row_max).sqrt();
        let mu_col = (self.cols as f64 / d as f64 * col_max).sqrt();
        Ok(mu_row.max(mu_col))
    }

    /// Exact row and column leverage scores of the rank-`d` truncation:
    /// `ell_s = ||U_{s,1..d}||^2 / d` and `rho_a = ||W_{a,1..d}||^2 / d`.
    /// Each profile sums to one.
    pub fn leverage_scores_exact(&self, d: usize) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
        let svd = self.svd()?;
        let max = svd.singular_values.len();
        if d == 0 || d > max {
            return Err(LinalgError::RankOutOfRange { rank: d, max });
        }
        let rows = (0..self.rows)
            .map(|s| (0..d).map(|i| svd.u.get(s, i).powi(2)).sum::<f64>() / d as f64)
            .collect();
        let cols = (0..self.cols)
            .map(|a| (0..d).map(|i| svd.vt.get(i, a).powi(2)).sum::<f64>() / d as f64)
            .collect();
        Ok((rows, cols))
    }
}

/// Thin SVD, `Q = U * diag(sigma) * Vt`, with `sigma` non-increasing.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub singular_values: Vec<f64>,
    pub vt: Matrix,
}

impl Svd {
    /// Reconstructs the rank-`d` truncation `sum_{i<d} sigma_i u_i w_i^T`.
    pub fn truncated(&self, d: usize) -> Matrix {
        let rows = self.u.rows();
        let cols = self.vt.cols();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..d.min(self.singular_values.len()) {
            let s = self.singular_values[i];
            for r in 0..rows {
                let ur = self.u.get(r, i) * s;
                if ur == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let val = out.get(r, c) + ur * self.vt.get(i, c);
                    out.set(r, c, val);
                }
            }
        }
        out
    }
}

/// Options for [`Matrix::pseudo_inverse`].
#[derive(Debug, Clone)]
pub struct PinvOptions {
    /// Relative cutoff: singular values below `rtol * sigma_1` are dropped.
    pub rtol: f64,
    /// Hard cap on the number of singular values kept.
    pub rank_cap: Option<usize>,
}

impl Default for PinvOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, rank_cap: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn example() -> Matrix {
        Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap()
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        assert!(matches!(
            Matrix::from_vec(2, 2, vec![1.0; 5]),
            Err(LinalgError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn svd_reconstructs_and_sorts() {
        let m = example();
        let svd = m.svd().unwrap();
        assert!(svd.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let rebuilt = svd.truncated(svd.singular_values.len());
        for (a, b) in m.as_slice().iter().zip(rebuilt.as_slice()) {
            assert_relative_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn pseudo_inverse_satisfies_moore_penrose() {
        let m = example();
        let p = m.pseudo_inverse(&PinvOptions::default()).unwrap();
        let mpm = m.matmul(&p).unwrap().matmul(&m).unwrap();
        let pmp = p.matmul(&m).unwrap().matmul(&p).unwrap();
        assert!(mpm.sub(&m).unwrap().max_abs() < 1e-8);
        assert!(pmp.sub(&p).unwrap().max_abs() < 1e-8);
        let mp = m.matmul(&p).unwrap();
        let pm = p.matmul(&m).unwrap();
        assert!(mp.sub(&mp.transpose()).unwrap().max_abs() < 1e-8);
        assert!(pm.sub(&pm.transpose()).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn pseudo_inverse_rank_cap_truncates() {
        let m = example();
        let p = m.pseudo_inverse(&PinvOptions { rtol: 1e-10, rank_cap: Some(1) }).unwrap();
        let approx_m = m.matmul(&p).unwrap().matmul(&m).unwrap();
        let rank1 = m.low_rank_approx(1).unwrap();
        assert!(approx_m.sub(&rank1).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn numeric_rank_of_outer_product() {
        let u = Matrix::from_vec(4, 1, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let v = Matrix::from_vec(1, 5, vec![2.0, 1.0, -1.0, 0.0, 4.0]).unwrap();
        let m = u.matmul(&v).unwrap();
        assert_eq!(m.numeric_rank(None).unwrap(), 1);
    }

    #[test]
    fn cond_number_identity_is_one() {
        let eye = Matrix::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 });
        assert_relative_eq!(eye.cond_number().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn cond_number_singular_is_infinite() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(m.cond_number().unwrap().is_infinite());
    }

    #[test]
    fn svd_handles_a_numerically_rank_one_matrix() {
        // A near-rank-one matrix on which a previous SVD backend silently
        // returned a non-decomposition (s1 > ||M||_F, reconstruction off by
        // more than the matrix norm). For rank one, s1 must equal ||M||_F.
        let data = vec![
            7.328271980806224, 4.1829677055819605, 3.9014275031841934, 4.478478562332761,
            3.44603877052659, 4.280587545273374, 5.49049425360483, 4.728420618354503,
            3.7238814601398693, 3.4935066408110678, 3.6062628012645495, 2.058449914937733,
            1.919903206842456, 2.2038716204723285, 1.6958051587624432, 2.106488906594511,
            2.70188732612426, 2.3268687938119053, 1.8325323106449023, 1.7191642283098771,
            4.125578784850307, 2.354874773897836, 2.1963767965933823, 2.5212377752298245,
            1.940007750898467, 2.4098315687147056, 3.090969695221737, 2.661947023803828,
            2.096424148760953, 1.9667306180519488, 3.489730454383959, 1.9919334094185757,
            1.8578636831564752, 2.1326559752711205, 1.6410071127261132, 2.0384200748173846,
            2.614578860693017, 2.2516786325926432, 1.7733160796982614, 1.6636113600807898,
            4.488374318201131, 2.561957972189409, 2.389521984920789, 2.742950618704691,
            2.110608334088512, 2.6217475627730336, 3.36278367760576, 2.8960335703506743,
            2.280779691787353, 2.139681159235091, 3.689072713401453, 2.1057177004508794,
            1.9639895712123054, 2.254478696359403, 1.7347456031885076, 2.1548598021408054,
            2.7639302399134897, 2.3803002298964024, 1.8746123940984234, 1.7586410625121232,
            3.9818893589533375, 2.272857044515675, 2.1198793795243294, 2.4334258032944316,
            1.8724393891001387, 2.3258997538894617, 2.983314579628675, 2.569234301646372,
            2.023407973799472, 1.8982315278298405, 6.13189879376324, 3.5000795133407103,
            3.2645020085755556, 3.7473469006320346, 2.88345752390165, 3.581762477458164,
            4.594146502616507, 3.9564847977849475, 3.115941151386798, 2.923176051994255,
        ];
        let m = Matrix::from_vec(8, 10, data).unwrap();
        let svd = m.svd().unwrap();
        assert_relative_eq!(svd.singular_values[0], m.fro_norm(), max_relative = 1e-12);
        assert_eq!(m.numeric_rank(None).unwrap(), 1);
        let recon = svd.truncated(8).sub(&m).unwrap().max_abs();
        assert!(recon < 1e-12, "reconstruction error {recon}");
    }

    #[test]
    fn effective_cond_ignores_the_null_space() {
        // diag(4, 2) embedded in a 3x3 rank-2 matrix: full cond is infinite,
        // the rank-2 cond is 4/2.
        let mut m = Matrix::zeros(3, 3);
        m.set(0, 0, 4.0);
        m.set(1, 1, 2.0);
        assert!(m.cond_number().unwrap().is_infinite());
        assert_relative_eq!(m.cond_effective().unwrap(), 2.0, epsilon = 1e-12);
        let full = Matrix::from_fn(2, 2, |r, c| if r == c { 3.0 } else { 1.0 });
        assert_relative_eq!(
            full.cond_effective().unwrap(),
            full.cond_number().unwrap(),
            epsilon = 1e-12
        );
        assert_eq!(Matrix::zeros(2, 2).cond_effective(), Err(LinalgError::ZeroMatrix));
    }

    #[test]
    fn spikiness_bounds() {
        let flat = Matrix::from_fn(4, 5, |_, _| 1.5);
        assert_relative_eq!(flat.spikiness().unwrap(), 1.0, epsilon = 1e-12);
        let mut spiky = Matrix::zeros(4, 5);
        spiky.set(2, 3, -7.0);
        assert_relative_eq!(spiky.spikiness().unwrap(), 20f64.sqrt(), epsilon = 1e-12);
        assert_eq!(Matrix::zeros(2, 2).spikiness(), Err(LinalgError::ZeroMatrix));
    }

    #[test]
    fn leverage_scores_sum_to_one() {
        let m = example();
        let (rows, cols) = m.leverage_scores_exact(2).unwrap();
        assert_relative_eq!(rows.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        assert_relative_eq!(cols.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn coherence_of_identity_block_is_maximal() {
        let mut m = Matrix::zeros(4, 4);
        m.set(0, 0, 5.0);
        let mu = m.coherence(Some(1)).unwrap();
        assert_relative_eq!(mu, 2.0, epsilon = 1e-10);
    }

    #[test]
    fn inf_gap_matches_tail_singular_value_ordering() {
        let m = example();
        let zeta = m.low_rank_inf_gap(1).unwrap();
        let s = m.svd().unwrap().singular_values;
        assert!(zeta <= s[1] + 1e-12);
        assert!(s[1] <= (6f64).sqrt() * zeta + 1e-12);
    }
}
