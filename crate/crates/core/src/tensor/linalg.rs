use super::Tensor;
use crate::error::{Error, Result};

/// Largest pivot ratio accepted by [`dense_solve`] before the system is
/// reported singular.
const MAX_PIVOT_RATIO: f64 = 1e12;
const SYMMETRY_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 100;

/// Full eigendecomposition of a symmetric matrix.
///
/// Eigenvalues are sorted in non-increasing order and column `i` of
/// `eigenvectors` pairs with `eigenvalues[i]`. Each eigenvector is signed so
/// that its largest-magnitude entry is positive (ties go to the lowest index).
#[derive(Debug, Clone)]
pub struct SymEig {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Tensor,
}

impl SymEig {
    pub fn vector(&self, i: usize) -> Vec<f64> {
        let n = self.eigenvalues.len();
        (0..n).map(|r| self.eigenvectors.at(r, i)).collect()
    }

    /// `V Λ Vᵀ`.
    pub fn reconstruct(&self) -> Tensor {
        let n = self.eigenvalues.len();
        let mut scaled = self.eigenvectors.clone();
        for r in 0..n {
            for (c, lambda) in self.eigenvalues.iter().enumerate() {
                let v = scaled.at(r, c) * lambda;
                scaled.set(r, c, v);
            }
        }
        scaled
            .matmul_nt(&self.eigenvectors)
            .expect("square factors")
    }
}

/// Cyclic Jacobi eigensolver with a fixed (row-major upper triangle) sweep
/// order, so repeated calls are bit-reproducible.
pub fn sym_eig(a: &Tensor) -> Result<SymEig> {
    let (n, m, w) = jacobi(a, true)?;
    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps lower original index first on exact ties
    order.sort_by(|&i, &j| m[j].total_cmp(&m[i]));

    let eigenvalues = order.iter().map(|&i| m[i]).collect();
    let mut vectors = Tensor::zeros(&[n, n]);
    for (col, &src) in order.iter().enumerate() {
        let mut column = w[src * n..src * n + n].to_vec();
        let peak = column.iter().fold(0.0_f64, |acc, x| acc.max(x.abs()));
        let lead = column
            .iter()
            .position(|x| x.abs() >= peak - 1e-12 * peak.max(1.0))
            .unwrap_or(0);
        if column[lead] < 0.0 {
            column.iter_mut().for_each(|x| *x = -*x);
        }
        for (r, x) in column.into_iter().enumerate() {
            vectors.set(r, col, x);
        }
    }
    Ok(SymEig {
        eigenvalues,
        eigenvectors: vectors,
    })
}

/// Eigenvalues only, non-increasing; same rotations as [`sym_eig`] without
/// accumulating the eigenvectors.
pub fn sym_eigvals(a: &Tensor) -> Result<Vec<f64>> {
    let (_, mut vals, _) = jacobi(a, false)?;
    vals.sort_by(|x, y| y.total_cmp(x));
    Ok(vals)
}

/// Returns `(n, eigenvalues in sweep order, Vᵀ)`; `Vᵀ` is empty unless `vectors` is set.
fn jacobi(a: &Tensor, vectors: bool) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::shape("sym_eig", a.shape(), &[c, n]));
    }
    let scale = a.data().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    if a.asymmetry()? > SYMMETRY_TOL * scale {
        return Err(Error::Contract(
            "sym_eig requires a symmetric matrix".into(),
        ));
    }
    // odd row stride keeps the column writes below off a single cache set
    let ld = n | 1;
    let mut m = vec![0.0; n * ld];
    for i in 0..n {
        m[i * ld..i * ld + n].copy_from_slice(a.row(i));
    }
    // symmetrize exactly so rounding in the input cannot drift the rotations
    for i in 0..n {
        for j in i + 1..n {
            let avg = 0.5 * (m[i * ld + j] + m[j * ld + i]);
            m[i * ld + j] = avg;
            m[j * ld + i] = avg;
        }
    }
    // rows of `w` are the eigenvectors (Vᵀ), so rotations touch contiguous memory
    let mut w = if vectors {
        Tensor::eye(n).into_data()
    } else {
        Vec::new()
    };
    let total: f64 = m.iter().map(|x| x * x).sum();

    for sweep in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += 2.0 * m[i * ld + j] * m[i * ld + j];
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * ld + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[p * ld + p];
                let aqq = m[q * ld + q];
                // negligible against both diagonal entries: drop it instead of rotating
                if sweep > 3
                    && app.abs() + 1e3 * apq.abs() == app.abs()
                    && aqq.abs() + 1e3 * apq.abs() == aqq.abs()
                {
                    m[p * ld + q] = 0.0;
                    m[q * ld + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let cos = 1.0 / (t * t + 1.0).sqrt();
                let sin = t * cos;
                {
                    let (head, tail) = m.split_at_mut(q * ld);
                    let rp = &mut head[p * ld..p * ld + n];
                    let rq = &mut tail[..n];
                    for k in 0..n {
                        let akp = rp[k];
                        let akq = rq[k];
                        rp[k] = cos * akp - sin * akq;
                        rq[k] = sin * akp + cos * akq;
                    }
                    rp[p] = app - t * apq;
                    rq[q] = aqq + t * apq;
                    rp[q] = 0.0;
                    rq[p] = 0.0;
                }
                for k in 0..n {
                    if k != p && k != q {
                        m[k * ld + p] = m[p * ld + k];
                        m[k * ld + q] = m[q * ld + k];
                    }
                }
                if !vectors {
                    continue;
                }
                let (head, tail) = w.split_at_mut(q * n);
                let wp = &mut head[p * n..p * n + n];
                let wq = &mut tail[..n];
                for k in 0..n {
                    let a = wp[k];
                    let b = wq[k];
                    wp[k] = cos * a - sin * b;
                    wq[k] = sin * a + cos * b;
                }
            }
        }
    }

    let diag = (0..n).map(|i| m[i * ld + i]).collect();
    Ok((n, diag, w))
}

/// Solves `a · x = b` by LU factorization with partial pivoting.
///
/// The system is rejected as singular when the ratio of largest to smallest
/// pivot magnitude exceeds `1e12`, a cheap stand-in for a condition number.
pub fn dense_solve(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::shape("dense_solve", a.shape(), &[c, n]));
    }
    let (bn, m) = match b.shape() {
        [r] => (*r, 1),
        [r, k] => (*r, *k),
        other => return Err(Error::shape("dense_solve", a.shape(), other)),
    };
    if bn != n {
        return Err(Error::shape("dense_solve", a.shape(), b.shape()));
    }

    let mut lu = a.data().to_vec();
    let mut perm: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let (pivot_row, pivot_abs) =
            (col..n)
                .map(|r| (r, lu[r * n + col].abs()))
                .fold(
                    (col, -1.0),
                    |best, cur| if cur.1 > best.1 { cur } else { best },
                );
        if pivot_abs == 0.0 || !pivot_abs.is_finite() {
            return Err(Error::Singular {
                ratio: f64::INFINITY,
            });
        }
        if pivot_row != col {
            for k in 0..n {
                lu.swap(col * n + k, pivot_row * n + k);
            }
            perm.swap(col, pivot_row);
        }
        let pivot = lu[col * n + col];
        for r in col + 1..n {
            let factor = lu[r * n + col] / pivot;
            lu[r * n + col] = factor;
            if factor != 0.0 {
                for k in col + 1..n {
                    lu[r * n + k] -= factor * lu[col * n + k];
                }
            }
        }
    }

    let (mut hi, mut lo) = (0.0_f64, f64::INFINITY);
    for i in 0..n {
        let d = lu[i * n + i].abs();
        hi = hi.max(d);
        lo = lo.min(d);
    }
    if n > 0 && hi / lo > MAX_PIVOT_RATIO {
        return Err(Error::Singular { ratio: hi / lo });
    }

    let bd = b.data();
    let mut x = vec![0.0; n * m];
    let mut y = vec![0.0; n];
    for j in 0..m {
        for i in 0..n {
            let mut s = bd[perm[i] * m + j];
            for k in 0..i {
                s -= lu[i * n + k] * y[k];
            }
            y[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= lu[i * n + k] * x[k * m + j];
            }
            x[i * m + j] = s / lu[i * n + i];
        }
    }
    Tensor::new(b.shape().to_vec(), x)
}

pub fn dense_inverse(a: &Tensor) -> Result<Tensor> {
    let (n, _) = a.dims2()?;
    dense_solve(a, &Tensor::eye(n))
}
