use super::vector;
use super::Matrix;
use crate::error::{Error, Result};

/// Largest `min(rows, cols)` the oracle accepts.
pub const SVD_ORACLE_MAX_DIM: usize = 512;

const MAX_SWEEPS: usize = 80;

/// Thin singular value decomposition `m = U diag(s) V^T`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Non-negative, sorted descending.
    pub singular_values: Vec<f64>,
    /// `rows x r` with orthonormal columns, `r = min(rows, cols)`.
    pub left_vectors: Matrix,
    /// `cols x r` with orthonormal columns.
    pub right_vectors: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let (m, n) = (self.left_vectors.rows(), self.right_vectors.rows());
        let mut out = Matrix::zeros(m, n);
        for (i, &s) in self.singular_values.iter().enumerate() {
            out.rank_one_update(s, &self.left_vectors.column(i), &self.right_vectors.column(i));
        }
        out
    }
}

/// Full thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Slow but accurate to a few ulps relative on every singular value, which
/// is what the spectral checks need from an oracle.
pub fn svd_oracle(m: &Matrix) -> Result<SvdResult> {
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd_oracle: non-finite entry".into()));
    }
    if m.rows().min(m.cols()) > SVD_ORACLE_MAX_DIM {
        return Err(Error::InvalidInput(format!(
            "svd_oracle: min dimension {} exceeds {SVD_ORACLE_MAX_DIM}",
            m.rows().min(m.cols())
        )));
    }
    if m.rows() < m.cols() {
        let t = jacobi_tall(&m.transpose());
        return Ok(SvdResult {
            singular_values: t.singular_values,
            left_vectors: t.right_vectors,
            right_vectors: t.left_vectors,
        });
    }
    Ok(jacobi_tall(m))
}

fn jacobi_tall(a: &Matrix) -> SvdResult {
    let (rows, n) = (a.rows(), a.cols());
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = vector::dot(&cols[p], &cols[p]);
                let beta = vector::dot(&cols[q], &cols[q]);
                let gamma = vector::dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<(f64, usize)> = cols
        .iter()
        .enumerate()
        .map(|(j, c)| (vector::norm(c), j))
        .collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));

    let sigma_max = order.first().map_or(0.0, |o| o.0);
    let negligible = sigma_max * f64::EPSILON * (rows.max(n) as f64);
    let mut left: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut right: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut singular_values = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &(s, j)) in order.iter().enumerate() {
        singular_values.push(s);
        right.push(v[j].clone());
        if s > negligible && s > 0.0 {
            let mut u = cols[j].clone();
            vector::scale(&mut u, 1.0 / s);
            left.push(u);
        } else {
            left.push(Vec::new());
            pending.push(slot);
        }
    }
    // Null directions: complete the left basis with Gram-Schmidt on e_i.
    let mut candidate = 0;
    for slot in pending {
        loop {
            let mut e = vec![0.0; rows];
            e[candidate % rows] = 1.0;
            candidate += 1;
            for other in left.iter().filter(|u| !u.is_empty()) {
                let d = vector::dot(other, &e);
                vector::axpy(-d, other, &mut e);
            }
            if vector::normalize(&mut e) > 1e-8 {
                left[slot] = e;
                break;
            }
        }
    }

    SvdResult {
        singular_values,
        left_vectors: Matrix::from_columns(rows, &left).expect("left vectors"),
        right_vectors: Matrix::from_columns(n, &right).expect("right vectors"),
    }
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    #[test]
    fn diagonal() {
        let r = svd_oracle(&Matrix::from_diag(&[3.0, 1.0])).unwrap();
        assert_eq!(r.singular_values, vec![3.0, 1.0]);
        assert_eq!(r.right_vectors.column(0)[0].abs(), 1.0);
        assert_eq!(r.left_vectors.column(0)[0].abs(), 1.0);
    }

    #[test]
    fn zero_matrix_has_unit_vectors() {
        let r = svd_oracle(&Matrix::zeros(2, 2)).unwrap();
        assert_eq!(r.singular_values, vec![0.0, 0.0]);
        for i in 0..2 {
            assert!((vector::norm(&r.left_vectors.column(i)) - 1.0).abs() < 1e-12);
            assert!((vector::norm(&r.right_vectors.column(i)) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Matrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(svd_oracle(&m), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn reconstructs_rectangular() {
        let mut rng = Rng::new(3);
        for (r, c) in [(5, 3), (3, 5), (7, 7), (1, 4)] {
            let m = Matrix::from_fn(r, c, |_, _| rng.normal());
            let s = svd_oracle(&m).unwrap();
            let err = crate::numerics::vector::max_abs_diff(
                s.reconstruct().as_slice(),
                m.as_slice(),
            );
            assert!(err < 1e-12 * m.frobenius_norm().max(1.0), "{r}x{c}: {err}");
            assert!(s.singular_values.windows(2).all(|w| w[0] >= w[1]));
        }
    }

    #[test]
    fn rank_deficient_left_basis_is_orthonormal() {
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0], vec![0.0, 0.0]]).unwrap();
        let s = svd_oracle(&m).unwrap();
        assert!(s.singular_values[1] < 1e-14);
        let u0 = s.left_vectors.column(0);
        let u1 = s.left_vectors.column(1);
        assert!(vector::dot(&u0, &u1).abs() < 1e-12);
        assert!((vector::norm(&u1) - 1.0).abs() < 1e-12);
    }
}
