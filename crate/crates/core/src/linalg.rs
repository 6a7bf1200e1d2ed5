//! Small dense linear-algebra helpers used throughout the crate.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Operator 2-norm (largest singular value).
pub fn op_norm_2(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Operator infinity-norm (maximum absolute row sum).
pub fn op_norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// L1 norm of a row vector (sum of absolute entries).
pub fn row_l1(r: &nalgebra::RowDVector<f64>) -> f64 {
    r.iter().map(|v| v.abs()).sum()
}

/// Spectral radius via complex eigenvalues.
pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

pub fn is_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

pub fn is_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// `m^k` by repeated multiplication (k is small everywhere we need this).
pub fn mat_pow(m: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let n = m.nrows();
    let mut acc = DMatrix::<f64>::identity(n, n);
    for _ in 0..k {
        acc = &acc * m;
    }
    acc
}

/// Real block-diagonal eigendecomposition `m = V * D * V^{-1}`.
///
/// `D` is block diagonal with 1x1 blocks for real eigenvalues and 2x2
/// rotation-scaling blocks `[[a, b], [-b, a]]` for complex pairs `a ± bi`,
/// so `||D||_2` equals the spectral radius of `m`. Columns of `V` are
/// normalized per block. Fails when `m` is numerically non-diagonalizable
/// (repeated eigenvalues make the Sylvester solves singular).
pub fn real_eigen_decomposition(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "eigendecomposition expects a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), DMatrix::zeros(0, 0)));
    }
    let schur = m.clone().schur();
    let (u, mut t) = schur.unpack();

    // Diagonal block structure of the quasi-triangular factor: a 2x2 block
    // wherever the subdiagonal entry is nonzero.
    let mut starts: Vec<usize> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    let mut i = 0;
    while i < n {
        let two = i + 1 < n && t[(i + 1, i)].abs() > 1e-14 * (1.0 + t[(i, i)].abs());
        starts.push(i);
        sizes.push(if two { 2 } else { 1 });
        if two {
            t[(i + 1, i)] = t[(i + 1, i)]; // keep as is; block handled below
            i += 2;
        } else {
            if i + 1 < n {
                t[(i + 1, i)] = 0.0;
            }
            i += 1;
        }
    }
    let p = starts.len();

    // Solve T_ii X_ij - X_ij T_jj = -T_ij - sum_{i<k<j} T_ik X_kj for the
    // coupling blocks, walking outward from the diagonal.
    let mut x = DMatrix::<f64>::zeros(n, n); // strictly upper block-triangular
    for d in 1..p {
        for bi in 0..p - d {
            let bj = bi + d;
            let (ri, ni) = (starts[bi], sizes[bi]);
            let (rj, nj) = (starts[bj], sizes[bj]);
            let tii = t.view((ri, ri), (ni, ni)).into_owned();
            let tjj = t.view((rj, rj), (nj, nj)).into_owned();
            let mut rhs = -t.view((ri, rj), (ni, nj)).into_owned();
            for bk in bi + 1..bj {
                let (rk, nk) = (starts[bk], sizes[bk]);
                let tik = t.view((ri, rk), (ni, nk));
                let xkj = x.view((rk, rj), (nk, nj));
                rhs -= tik * xkj;
            }
            let xij = solve_sylvester_small(&tii, &tjj, &rhs)?;
            x.view_mut((ri, rj), (ni, nj)).copy_from(&xij);
        }
    }
    let s = DMatrix::<f64>::identity(n, n) + x;

    // Convert each 2x2 block to rotation-scaling form.
    let mut w = DMatrix::<f64>::identity(n, n);
    let mut d = DMatrix::<f64>::zeros(n, n);
    for (b, (&r0, &sz)) in starts.iter().zip(sizes.iter()).enumerate() {
        let _ = b;
        if sz == 1 {
            d[(r0, r0)] = t[(r0, r0)];
        } else {
            let (p11, p12) = (t[(r0, r0)], t[(r0, r0 + 1)]);
            let (p21, p22) = (t[(r0 + 1, r0)], t[(r0 + 1, r0 + 1)]);
            let tr = p11 + p22;
            let disc = (p11 - p22) * (p11 - p22) + 4.0 * p12 * p21;
            if disc >= 0.0 {
                // Real eigenvalues hiding in a 2x2 block: treat as failure,
                // the Schur fallback handles it.
                return Err(Error::CertificationFailed(
                    "unexpected real 2x2 Schur block".into(),
                ));
            }
            let a = tr / 2.0;
            let bim = (-disc).sqrt() / 2.0;
            // Complex eigenvector of [[p11,p12],[p21,p22]] for a + i*bim.
            let (vre, vim) = if p12.abs() >= p21.abs() {
                // v = [p12, lambda - p11]
                (
                    DVector::from_vec(vec![p12, a - p11]),
                    DVector::from_vec(vec![0.0, bim]),
                )
            } else {
                // v = [lambda - p22, p21]
                (
                    DVector::from_vec(vec![a - p22, p21]),
                    DVector::from_vec(vec![bim, 0.0]),
                )
            };
            w[(r0, r0)] = vre[0];
            w[(r0 + 1, r0)] = vre[1];
            w[(r0, r0 + 1)] = vim[0];
            w[(r0 + 1, r0 + 1)] = vim[1];
            d[(r0, r0)] = a;
            d[(r0, r0 + 1)] = bim;
            d[(r0 + 1, r0)] = -bim;
            d[(r0 + 1, r0 + 1)] = a;
        }
    }

    let mut v = u * s * w;
    // Per-block column normalization (a uniform scalar per block keeps the
    // block-diagonal form of D intact).
    for (&r0, &sz) in starts.iter().zip(sizes.iter()) {
        let mut scale: f64 = 0.0;
        for c in r0..r0 + sz {
            scale = scale.max(v.column(c).norm());
        }
        if scale > 0.0 {
            for c in r0..r0 + sz {
                let mut col = v.column_mut(c);
                col /= scale;
            }
        }
    }
    Ok((v, d))
}

/// Solve `A X - X B = C` for blocks of size at most 2x2 via the Kronecker
/// system `(I ⊗ A - B^T ⊗ I) vec(X) = vec(C)`.
fn solve_sylvester_small(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    c: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let (na, nb) = (a.nrows(), b.nrows());
    let dim = na * nb;
    let mut k = DMatrix::<f64>::zeros(dim, dim);
    // vec is column-major: index (i, j) -> j * na + i.
    for j in 0..nb {
        for i in 0..na {
            let row = j * na + i;
            for ii in 0..na {
                k[(row, j * na + ii)] += a[(i, ii)];
            }
            for jj in 0..nb {
                k[(row, jj * na + i)] -= b[(jj, j)];
            }
        }
    }
    let mut rhs = DVector::<f64>::zeros(dim);
    for j in 0..nb {
        for i in 0..na {
            rhs[j * na + i] = c[(i, j)];
        }
    }
    let lu = k.full_piv_lu();
    let sol = lu.solve(&rhs).ok_or_else(|| {
        Error::CertificationFailed("near-repeated eigenvalues: Sylvester system singular".into())
    })?;
    let mut x = DMatrix::<f64>::zeros(na, nb);
    for j in 0..nb {
        for i in 0..na {
            x[(i, j)] = sol[j * na + i];
        }
    }
    Ok(x)
}

/// Solve the discrete algebraic Riccati equation
/// `P = Q + A' P A - A' P B (R + B' P B)^{-1} B' P A`
/// by fixed-point iteration and return the LQR gain
/// `K = (R + B' P B)^{-1} B' P A` (so that `u = -K x`).
pub fn dlqr(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    q: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || q.nrows() != n || r.nrows() != b.ncols() {
        return Err(Error::DimensionMismatch("dlqr".into()));
    }
    let mut p = q.clone();
    for _ in 0..100_000 {
        let btpb = b.transpose() * &p * b + r;
        let inv = btpb.clone().try_inverse().ok_or_else(|| {
            Error::InvalidArgument("dlqr: R + B'PB not invertible".into())
        })?;
        let next = q + a.transpose() * &p * a - a.transpose() * &p * b * &inv * b.transpose() * &p * a;
        let diff = (&next - &p).norm() / (1.0 + p.norm());
        p = next;
        if diff < 1e-14 {
            let btpb = b.transpose() * &p * b + r;
            let inv = btpb
                .try_inverse()
                .ok_or_else(|| Error::InvalidArgument("dlqr: singular".into()))?;
            return Ok(inv * b.transpose() * &p * a);
        }
    }
    Err(Error::InvalidArgument(
        "dlqr: Riccati iteration did not converge (is (A,B) stabilizable?)".into(),
    ))
}
