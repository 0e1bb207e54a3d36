//! Dense complex linear algebra used by the suppression operator, HSVD and
//! the low-rank model.
//!
//! Everything here is sized for desk-scale problems (a few hundred rows):
//!
//! * [`hermitian_eig_desc`] — Householder tridiagonalization plus implicit
//!   QL with eigenvector accumulation, eigenvalues descending.
//! * [`jacobi_svd`] — one-sided Jacobi SVD. Slower than a bidiagonal solver
//!   but its singular vectors stay orthonormal to machine precision even for
//!   badly graded spectra, which the suppression operator's invariants need.
//! * [`qr_lstsq`] — Householder QR least squares with multiple right-hand
//!   sides, for pole shift-invariance and Vandermonde amplitude fits.
//! * [`eigvals`] — eigenvalues of a small general complex matrix through
//!   Hessenberg reduction and shifted QR (values only, no vectors).
//! * [`lu_solve`] / [`lu_inverse`] — partial-pivot LU, mainly serving the
//!   test suites as an independent oracle path.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use num_complex::Complex64;

use crate::{Error, Result};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);
const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// `A^H A` exploiting Hermitian symmetry of the result.
pub fn gram_aha(a: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    let mut g = Array2::from_elem((n, n), ZERO);
    for i in 0..n {
        for j in i..n {
            let mut acc = ZERO;
            for k in 0..m {
                acc += a[[k, i]].conj() * a[[k, j]];
            }
            g[[i, j]] = acc;
            g[[j, i]] = acc.conj();
        }
    }
    for i in 0..n {
        g[[i, i]] = Complex64::new(g[[i, i]].re, 0.0);
    }
    g
}

/// `A A^H` exploiting Hermitian symmetry of the result.
pub fn gram_aah(a: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    let mut g = Array2::from_elem((m, m), ZERO);
    for i in 0..m {
        for j in i..m {
            let mut acc = ZERO;
            for k in 0..n {
                acc += a[[i, k]] * a[[j, k]].conj();
            }
            g[[i, j]] = acc;
            g[[j, i]] = acc.conj();
        }
    }
    for i in 0..m {
        g[[i, i]] = Complex64::new(g[[i, i]].re, 0.0);
    }
    g
}

/// Eigendecomposition of a Hermitian matrix, eigenvalues sorted descending,
/// eigenvectors as matching columns. The input is only read from its lower
/// triangle logically; callers pass full Hermitian matrices.
pub fn hermitian_eig_desc(a: &ArrayView2<Complex64>) -> Result<(Array1<f64>, Array2<Complex64>)> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "square matrix required");
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::from_elem((0, 0), ZERO)));
    }

    // Householder tridiagonalization, accumulating the unitary Q.
    let mut t = a.to_owned();
    let mut q = Array2::from_elem((n, n), ZERO);
    for i in 0..n {
        q[[i, i]] = ONE;
    }
    for k in 0..n.saturating_sub(2) {
        // reflector for column k below the diagonal
        let mut norm2 = 0.0;
        for i in k + 1..n {
            norm2 += t[[i, k]].norm_sqr();
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = t[[k + 1, k]];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        let alpha = -phase * norm;
        // v = x - alpha e1
        let mut v = vec![ZERO; n - k - 1];
        for i in k + 1..n {
            v[i - k - 1] = t[[i, k]];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;

        // two-sided update of the trailing block: A <- (I - beta v v^H) A (I - beta v v^H)
        let m = n - k - 1;
        let mut p = vec![ZERO; m];
        for i in 0..m {
            let mut acc = ZERO;
            for j in 0..m {
                acc += t[[k + 1 + i, k + 1 + j]] * v[j];
            }
            p[i] = acc * beta;
        }
        let mut vhp = ZERO;
        for i in 0..m {
            vhp += v[i].conj() * p[i];
        }
        let kcoef = vhp * beta * 0.5;
        let w: Vec<Complex64> = (0..m).map(|i| p[i] - kcoef * v[i]).collect();
        for i in 0..m {
            for j in 0..m {
                let upd = v[i] * w[j].conj() + w[i] * v[j].conj();
                t[[k + 1 + i, k + 1 + j]] -= upd;
            }
        }
        t[[k + 1, k]] = alpha;
        t[[k, k + 1]] = alpha.conj();
        for i in k + 2..n {
            t[[i, k]] = ZERO;
            t[[k, i]] = ZERO;
        }

        // Q <- Q (I - beta v v^H), touching columns k+1..n
        for r in 0..n {
            let mut acc = ZERO;
            for j in 0..m {
                acc += q[[r, k + 1 + j]] * v[j];
            }
            acc *= beta;
            for j in 0..m {
                q[[r, k + 1 + j]] -= acc * v[j].conj();
            }
        }
    }

    // absorb off-diagonal phases so the tridiagonal is real
    let mut d = vec![0.0f64; n];
    let mut e = vec![0.0f64; n];
    let mut phi = vec![ONE; n];
    for i in 0..n {
        d[i] = t[[i, i]].re;
    }
    for i in 0..n - 1 {
        let b = t[[i + 1, i]];
        let ab = b.norm();
        e[i] = ab;
        phi[i + 1] = if ab > 0.0 { phi[i] * (b / ab) } else { phi[i] };
    }
    let mut z = q;
    for j in 0..n {
        let ph = phi[j];
        for i in 0..n {
            z[[i, j]] *= ph;
        }
    }

    tql2(&mut d, &mut e, &mut z)?;

    // sort descending
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]));
    let vals = Array1::from_iter(order.iter().map(|&i| d[i]));
    let mut vecs = Array2::from_elem((n, n), ZERO);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, dst]] = z[[r, src]];
        }
    }
    Ok((vals, vecs))
}

/// Implicit-shift QL on a real symmetric tridiagonal (d diagonal, e
/// subdiagonal with e[i] between rows i and i+1), rotations accumulated into
/// the complex column matrix z.
fn tql2(d: &mut [f64], e: &mut [f64], z: &mut Array2<Complex64>) -> Result<()> {
    let n = d.len();
    if n == 0 {
        return Ok(());
    }
    e[n - 1] = 0.0;
    // absolute deflation floor: inside a cluster of eigenvalues that are
    // zero relative to the matrix scale, the purely relative test below
    // never fires and the sweep spins forever
    let anorm = (0..n)
        .map(|i| d[i].abs() + e[i].abs() + if i > 0 { e[i - 1].abs() } else { 0.0 })
        .fold(0.0f64, f64::max);
    let floor = f64::EPSILON * anorm;
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= f64::EPSILON * dd + floor {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > 60 {
                return Err(Error::Numeric("tridiagonal QL failed to converge".into()));
            }
            let mut g = (d[l + 1] - d[l]) / (2.0 * e[l]);
            let mut r = g.hypot(1.0);
            g = d[m] - d[l] + e[l] / (g + r.copysign(g));
            let mut s = 1.0;
            let mut c = 1.0;
            let mut p = 0.0;
            let mut underflow = false;
            for i in (l..m).rev() {
                let mut f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r == 0.0 {
                    d[i + 1] -= p;
                    e[m] = 0.0;
                    underflow = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + 2.0 * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..z.nrows() {
                    f = z[[k, i + 1]].re;
                    let fi = z[[k, i + 1]].im;
                    let zre = z[[k, i]].re;
                    let zim = z[[k, i]].im;
                    z[[k, i + 1]] = Complex64::new(s * zre + c * f, s * zim + c * fi);
                    z[[k, i]] = Complex64::new(c * zre - s * f, c * zim - s * fi);
                }
            }
            if underflow {
                continue;
            }
            d[l] -= p;
            e[l] = g;
            e[m] = 0.0;
        }
    }
    Ok(())
}

/// Thin singular value decomposition `A = U diag(s) V^H` with singular values
/// descending. U is m x r and V is n x r with r = min(m, n); exactly zero
/// singular values get zero U columns.
pub struct Svd {
    pub u: Array2<Complex64>,
    pub s: Array1<f64>,
    pub v: Array2<Complex64>,
}

/// One-sided Jacobi SVD. Orthogonality of the computed singular vectors does
/// not degrade with the condition number, unlike Gram-matrix routes.
pub fn jacobi_svd(a: &ArrayView2<Complex64>) -> Svd {
    let (m, n) = a.dim();
    if m < n {
        // factor the adjoint and swap factors
        let ah = conj_transpose(a);
        let svd = jacobi_svd(&ah.view());
        return Svd { u: svd.v, s: svd.s, v: svd.u };
    }
    let mut w = a.to_owned();
    let mut v = Array2::from_elem((n, n), ZERO);
    for i in 0..n {
        v[[i, i]] = ONE;
    }
    let tol = 1e-15;
    let max_sweeps = 40;
    for _ in 0..max_sweeps {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = ZERO;
                for k in 0..m {
                    let wp = w[[k, p]];
                    let wq = w[[k, q]];
                    app += wp.norm_sqr();
                    aqq += wq.norm_sqr();
                    apq += wp.conj() * wq;
                }
                let denom = (app * aqq).sqrt();
                if denom == 0.0 || apq.norm() <= tol * denom {
                    continue;
                }
                off = off.max(apq.norm() / denom);
                let b = apq / apq.norm(); // unit phase of the coupling
                let r = apq.norm();
                let zeta = (aqq - app) / (2.0 * r);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // columns (p, q) <- (c p - s b^* q, s b p + c q)
                for k in 0..m {
                    let wp = w[[k, p]];
                    let wq = w[[k, q]];
                    w[[k, p]] = c * wp - s * (b.conj() * wq);
                    w[[k, q]] = s * (b * wp) + c * wq;
                }
                for k in 0..n {
                    let vp = v[[k, p]];
                    let vq = v[[k, q]];
                    v[[k, p]] = c * vp - s * (b.conj() * vq);
                    v[[k, q]] = s * (b * vp) + c * vq;
                }
            }
        }
        if off <= tol {
            break;
        }
    }
    // singular values and left vectors
    let mut s = vec![0.0f64; n];
    for j in 0..n {
        let mut norm2 = 0.0;
        for k in 0..m {
            norm2 += w[[k, j]].norm_sqr();
        }
        s[j] = norm2.sqrt();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
    let mut u = Array2::from_elem((m, n), ZERO);
    let mut v_sorted = Array2::from_elem((n, n), ZERO);
    let mut s_sorted = Array1::zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        s_sorted[dst] = s[src];
        if s[src] > 0.0 {
            let inv = 1.0 / s[src];
            for k in 0..m {
                u[[k, dst]] = w[[k, src]] * inv;
            }
        }
        for k in 0..n {
            v_sorted[[k, dst]] = v[[k, src]];
        }
    }
    Svd { u, s: s_sorted, v: v_sorted }
}

/// Conjugate transpose.
pub fn conj_transpose(a: &ArrayView2<Complex64>) -> Array2<Complex64> {
    let (m, n) = a.dim();
    let mut out = Array2::from_elem((n, m), ZERO);
    for i in 0..m {
        for j in 0..n {
            out[[j, i]] = a[[i, j]].conj();
        }
    }
    out
}

/// Least squares `argmin_X ||A X - B||_F` through Householder QR. Requires
/// m >= n and numerically full column rank.
pub fn qr_lstsq(a: &ArrayView2<Complex64>, b: &ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    let (m, n) = a.dim();
    assert!(m >= n, "qr_lstsq needs at least as many rows as columns");
    assert_eq!(m, b.nrows(), "row counts must match");
    let nrhs = b.ncols();
    let mut r = a.to_owned();
    let mut c = b.to_owned();

    for k in 0..n {
        let mut norm2 = 0.0;
        for i in k..m {
            norm2 += r[[i, k]].norm_sqr();
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            return Err(Error::Numeric("rank-deficient least-squares matrix".into()));
        }
        let x0 = r[[k, k]];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        let alpha = -phase * norm;
        let mut v = vec![ZERO; m - k];
        for i in k..m {
            v[i - k] = r[[i, k]];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm2 > 0.0 {
            let beta = 2.0 / vnorm2;
            for j in k..n {
                let mut acc = ZERO;
                for i in 0..m - k {
                    acc += v[i].conj() * r[[k + i, j]];
                }
                acc *= beta;
                for i in 0..m - k {
                    r[[k + i, j]] -= acc * v[i];
                }
            }
            for j in 0..nrhs {
                let mut acc = ZERO;
                for i in 0..m - k {
                    acc += v[i].conj() * c[[k + i, j]];
                }
                acc *= beta;
                for i in 0..m - k {
                    c[[k + i, j]] -= acc * v[i];
                }
            }
        }
        r[[k, k]] = alpha;
        for i in k + 1..m {
            r[[i, k]] = ZERO;
        }
    }

    // back substitution on the n x n upper triangle
    let mut x = Array2::from_elem((n, nrhs), ZERO);
    for j in 0..nrhs {
        for i in (0..n).rev() {
            let mut acc = c[[i, j]];
            for l in i + 1..n {
                acc -= r[[i, l]] * x[[l, j]];
            }
            let piv = r[[i, i]];
            if piv.norm() == 0.0 {
                return Err(Error::Numeric("singular triangular factor".into()));
            }
            x[[i, j]] = acc / piv;
        }
    }
    Ok(x)
}

/// Eigenvalues of a general complex square matrix (values only): Householder
/// Hessenberg reduction, then explicitly shifted QR with Givens rotations and
/// Wilkinson shifts. Intended for small systems (pole estimation, n <= 64).
pub fn eigvals(a: &ArrayView2<Complex64>) -> Result<Vec<Complex64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    if n == 0 {
        return Ok(vec![]);
    }
    if n == 1 {
        return Ok(vec![a[[0, 0]]]);
    }
    let mut h = a.to_owned();

    // Hessenberg reduction
    for k in 0..n.saturating_sub(2) {
        let mut norm2 = 0.0;
        for i in k + 1..n {
            norm2 += h[[i, k]].norm_sqr();
        }
        let norm = norm2.sqrt();
        if norm == 0.0 {
            continue;
        }
        let x0 = h[[k + 1, k]];
        let phase = if x0.norm() > 0.0 { x0 / x0.norm() } else { ONE };
        let alpha = -phase * norm;
        let mut v = vec![ZERO; n - k - 1];
        for i in k + 1..n {
            v[i - k - 1] = h[[i, k]];
        }
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|z| z.norm_sqr()).sum();
        if vnorm2 == 0.0 {
            continue;
        }
        let beta = 2.0 / vnorm2;
        // H <- P H
        for j in k..n {
            let mut acc = ZERO;
            for i in 0..n - k - 1 {
                acc += v[i].conj() * h[[k + 1 + i, j]];
            }
            acc *= beta;
            for i in 0..n - k - 1 {
                h[[k + 1 + i, j]] -= acc * v[i];
            }
        }
        // H <- H P
        for r in 0..n {
            let mut acc = ZERO;
            for i in 0..n - k - 1 {
                acc += h[[r, k + 1 + i]] * v[i];
            }
            acc *= beta;
            for i in 0..n - k - 1 {
                h[[r, k + 1 + i]] -= acc * v[i].conj();
            }
        }
        h[[k + 1, k]] = alpha;
        for i in k + 2..n {
            h[[i, k]] = ZERO;
        }
    }

    // shifted QR on the active trailing block
    let mut eigs = vec![ZERO; n];
    let mut hi = n; // active block is 0..hi
    let mut iters_at_this_size = 0;
    let max_total = 60 * n;
    let mut total = 0;
    while hi > 0 {
        if hi == 1 {
            eigs[0] = h[[0, 0]];
            break;
        }
        // deflate where the subdiagonal is negligible
        let mut deflated = false;
        for k in (1..hi).rev() {
            let small = f64::EPSILON * (h[[k - 1, k - 1]].norm() + h[[k, k]].norm() + 1e-300);
            if h[[k, k - 1]].norm() <= small {
                h[[k, k - 1]] = ZERO;
                if k == hi - 1 {
                    eigs[hi - 1] = h[[hi - 1, hi - 1]];
                    hi -= 1;
                    iters_at_this_size = 0;
                    deflated = true;
                    break;
                }
            }
        }
        if deflated {
            continue;
        }
        total += 1;
        iters_at_this_size += 1;
        if total > max_total {
            return Err(Error::Numeric("eigenvalue QR iteration failed to converge".into()));
        }
        // Wilkinson shift from the trailing 2x2 of the active block;
        // occasionally replace with an exceptional shift to break cycles
        let mu = if iters_at_this_size % 12 == 0 {
            h[[hi - 1, hi - 1]] + Complex64::new(h[[hi - 1, hi - 2]].norm(), 0.0)
        } else {
            let a11 = h[[hi - 2, hi - 2]];
            let a12 = h[[hi - 2, hi - 1]];
            let a21 = h[[hi - 1, hi - 2]];
            let a22 = h[[hi - 1, hi - 1]];
            let tr = a11 + a22;
            let det = a11 * a22 - a12 * a21;
            let disc = (tr * tr - 4.0 * det).sqrt();
            let r1 = (tr + disc) * 0.5;
            let r2 = (tr - disc) * 0.5;
            if (r1 - a22).norm() < (r2 - a22).norm() {
                r1
            } else {
                r2
            }
        };
        // QR step: Givens rotations eliminating the subdiagonal of H - mu I
        let mut cs = vec![(0.0f64, ZERO); hi - 1];
        for i in 0..hi {
            h[[i, i]] -= mu;
        }
        for k in 0..hi - 1 {
            let x = h[[k, k]];
            let y = h[[k + 1, k]];
            let nrm = (x.norm_sqr() + y.norm_sqr()).sqrt();
            let (c, s) = if nrm == 0.0 {
                (1.0, ZERO)
            } else {
                // unitary rotation [c, s; -s^*, c] with real c >= 0 chosen so
                // the second entry of G [x; y] vanishes
                let c = x.norm() / nrm;
                let s = if x.norm() > 0.0 { (x / x.norm()) * y.conj() / nrm } else { y.conj() / nrm };
                (c, s)
            };
            cs[k] = (c, s);
            for j in k..hi {
                let hk = h[[k, j]];
                let hk1 = h[[k + 1, j]];
                h[[k, j]] = c * hk + s * hk1;
                h[[k + 1, j]] = -s.conj() * hk + c * hk1;
            }
        }
        // H <- R Q^H... multiply on the right by the adjoint rotations
        for k in 0..hi - 1 {
            let (c, s) = cs[k];
            let top = if k + 2 < hi { k + 2 } else { hi };
            for i in 0..top {
                let hik = h[[i, k]];
                let hik1 = h[[i, k + 1]];
                h[[i, k]] = c * hik + s.conj() * hik1;
                h[[i, k + 1]] = -s * hik + c * hik1;
            }
        }
        for i in 0..hi {
            h[[i, i]] += mu;
        }
    }
    Ok(eigs)
}

/// Partial-pivot LU solve `A X = B` for a general complex square system.
pub fn lu_solve(a: &ArrayView2<Complex64>, b: &ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols());
    assert_eq!(n, b.nrows());
    let mut lu = a.to_owned();
    let mut x = b.to_owned();
    let mut piv: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut best = k;
        let mut best_mag = lu[[k, k]].norm();
        for i in k + 1..n {
            let m = lu[[i, k]].norm();
            if m > best_mag {
                best = i;
                best_mag = m;
            }
        }
        if best_mag == 0.0 {
            return Err(Error::Numeric("singular matrix in LU solve".into()));
        }
        if best != k {
            piv.swap(k, best);
            for j in 0..n {
                let tmp = lu[[k, j]];
                lu[[k, j]] = lu[[best, j]];
                lu[[best, j]] = tmp;
            }
            for j in 0..x.ncols() {
                let tmp = x[[k, j]];
                x[[k, j]] = x[[best, j]];
                x[[best, j]] = tmp;
            }
        }
        let piv_val = lu[[k, k]];
        for i in k + 1..n {
            let factor = lu[[i, k]] / piv_val;
            lu[[i, k]] = factor;
            for j in k + 1..n {
                let sub = factor * lu[[k, j]];
                lu[[i, j]] -= sub;
            }
            for j in 0..x.ncols() {
                let sub = factor * x[[k, j]];
                x[[i, j]] -= sub;
            }
        }
    }
    for j in 0..x.ncols() {
        for i in (0..n).rev() {
            let mut acc = x[[i, j]];
            for l in i + 1..n {
                acc -= lu[[i, l]] * x[[l, j]];
            }
            x[[i, j]] = acc / lu[[i, i]];
        }
    }
    Ok(x)
}

/// Dense inverse through [`lu_solve`].
pub fn lu_inverse(a: &ArrayView2<Complex64>) -> Result<Array2<Complex64>> {
    let n = a.nrows();
    let mut eye = Array2::from_elem((n, n), ZERO);
    for i in 0..n {
        eye[[i, i]] = ONE;
    }
    lu_solve(a, &eye.view())
}

/// Frobenius norm.
pub fn fro_norm(a: &ArrayView2<Complex64>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Max absolute deviation of `V^H V` from the identity.
pub fn orthonormality_defect(v: &ArrayView2<Complex64>) -> f64 {
    let g = gram_aha(v);
    let n = g.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { ONE } else { ZERO };
            worst = worst.max((g[[i, j]] - want).norm());
        }
    }
    worst
}

/// Sum over an axis of squared magnitudes (test helper for energy checks).
pub fn col_norms(a: &ArrayView2<Complex64>) -> Array1<f64> {
    let mut out = Array1::zeros(a.ncols());
    for (j, col) in a.axis_iter(Axis(1)).enumerate() {
        out[j] = col.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(m: usize, n: usize, seed: u64) -> Array2<Complex64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((m, n), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        })
    }

    fn rand_hermitian(n: usize, seed: u64) -> Array2<Complex64> {
        let a = rand_matrix(n, n, seed);
        let ah = conj_transpose(&a.view());
        let mut h = Array2::from_elem((n, n), ZERO);
        for i in 0..n {
            for j in 0..n {
                h[[i, j]] = (a[[i, j]] + ah[[i, j]]) * 0.5;
            }
        }
        h
    }

    fn matmul(a: &Array2<Complex64>, b: &Array2<Complex64>) -> Array2<Complex64> {
        a.dot(b)
    }

    #[test]
    fn hermitian_eig_reconstructs_random_matrices() {
        for n in [1usize, 2, 3, 5, 8, 17, 33, 64] {
            let h = rand_hermitian(n, 1000 + n as u64);
            let (vals, vecs) = hermitian_eig_desc(&h.view()).unwrap();
            assert!(orthonormality_defect(&vecs.view()) < 1e-12, "n={n}");
            // residual || H V - V diag(vals) ||
            let hv = matmul(&h, &vecs);
            let mut worst = 0.0f64;
            for j in 0..n {
                for i in 0..n {
                    let r = hv[[i, j]] - vecs[[i, j]] * vals[j];
                    worst = worst.max(r.norm());
                }
            }
            let scale = fro_norm(&h.view()).max(1.0);
            assert!(worst < 1e-12 * scale * n as f64, "n={n} residual {worst}");
            for j in 1..n {
                assert!(vals[j] <= vals[j - 1] + 1e-12);
            }
            // trace identity
            let tr: f64 = (0..n).map(|i| h[[i, i]].re).sum();
            let sum: f64 = vals.sum();
            assert!((tr - sum).abs() < 1e-10 * scale * n as f64);
        }
    }

    #[test]
    fn hermitian_eig_handles_degenerate_spectra() {
        // identity plus a rank-1 bump: eigenvalue 1 repeated n-1 times
        let n = 12;
        let x = rand_matrix(n, 1, 7);
        let nrm: f64 = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let mut h = Array2::from_elem((n, n), ZERO);
        for i in 0..n {
            h[[i, i]] = ONE;
            for j in 0..n {
                h[[i, j]] += x[[i, 0]] * x[[j, 0]].conj() / (nrm * nrm);
            }
        }
        let (vals, vecs) = hermitian_eig_desc(&h.view()).unwrap();
        assert!((vals[0] - 2.0).abs() < 1e-12);
        for j in 1..n {
            assert!((vals[j] - 1.0).abs() < 1e-12);
        }
        assert!(orthonormality_defect(&vecs.view()) < 1e-12);
    }

    #[test]
    fn hermitian_eig_diagonal_is_exact() {
        let mut h = Array2::from_elem((5, 5), ZERO);
        for (i, v) in [3.0, -1.0, 0.5, 7.25, 0.0].iter().enumerate() {
            h[[i, i]] = Complex64::new(*v, 0.0);
        }
        let (vals, _) = hermitian_eig_desc(&h.view()).unwrap();
        let want = [7.25, 3.0, 0.5, 0.0, -1.0];
        for (got, want) in vals.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-14);
        }
    }

    #[test]
    fn jacobi_svd_factors_random_matrices() {
        for (m, n, seed) in [(8usize, 3usize, 1u64), (16, 16, 2), (40, 12, 3), (12, 40, 4), (64, 24, 5)] {
            let a = rand_matrix(m, n, seed);
            let svd = jacobi_svd(&a.view());
            let r = m.min(n);
            assert_eq!(svd.u.dim(), (m, r));
            assert_eq!(svd.v.dim(), (n, r));
            assert!(orthonormality_defect(&svd.u.view()) < 1e-13);
            assert!(orthonormality_defect(&svd.v.view()) < 1e-13);
            // reconstruction
            let mut rec = Array2::from_elem((m, n), ZERO);
            for k in 0..r {
                for i in 0..m {
                    for j in 0..n {
                        rec[[i, j]] += svd.u[[i, k]] * svd.s[k] * svd.v[[j, k]].conj();
                    }
                }
            }
            let mut diff = 0.0f64;
            for i in 0..m {
                for j in 0..n {
                    diff += (rec[[i, j]] - a[[i, j]]).norm_sqr();
                }
            }
            assert!(diff.sqrt() < 1e-12 * fro_norm(&a.view()), "m={m} n={n}");
            for k in 1..r {
                assert!(svd.s[k] <= svd.s[k - 1] + 1e-12);
            }
        }
    }

    #[test]
    fn jacobi_svd_matches_gram_eigenvalues() {
        // independent cross-check: squared singular values against the
        // eigenvalues of A^H A computed by the Hermitian solver
        let a = rand_matrix(48, 20, 99);
        let svd = jacobi_svd(&a.view());
        let g = gram_aha(&a.view());
        let (vals, _) = hermitian_eig_desc(&g.view()).unwrap();
        for k in 0..20 {
            let want = vals[k].max(0.0);
            let got = svd.s[k] * svd.s[k];
            assert!((got - want).abs() <= 1e-10 * vals[0], "k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn jacobi_svd_graded_matrix_keeps_orthonormal_vectors() {
        // singular values spanning 12 orders of magnitude
        let m = 24;
        let n = 8;
        let q = jacobi_svd(&rand_matrix(m, n, 11).view()).u;
        let p = jacobi_svd(&rand_matrix(n, n, 12).view()).u;
        let sigmas: Vec<f64> = (0..n).map(|k| 10f64.powi(-(12 * k as i32) / n as i32)).collect();
        let mut a = Array2::from_elem((m, n), ZERO);
        for i in 0..m {
            for j in 0..n {
                for k in 0..n {
                    a[[i, j]] += q[[i, k]] * sigmas[k] * p[[j, k]].conj();
                }
            }
        }
        let svd = jacobi_svd(&a.view());
        assert!(orthonormality_defect(&svd.u.view()) < 1e-13);
        assert!(orthonormality_defect(&svd.v.view()) < 1e-13);
        for k in 0..n {
            assert!((svd.s[k] - sigmas[k]).abs() < 1e-13 * sigmas[0].max(1.0) + 1e-12 * sigmas[k]);
        }
    }

    #[test]
    fn qr_lstsq_solves_overdetermined_systems() {
        let a = rand_matrix(30, 7, 21);
        let x_true = rand_matrix(7, 3, 22);
        let b = a.dot(&x_true);
        let x = qr_lstsq(&a.view(), &b.view()).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                assert!((x[[i, j]] - x_true[[i, j]]).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn qr_lstsq_residual_is_orthogonal_to_range() {
        let a = rand_matrix(25, 6, 31);
        let b = rand_matrix(25, 1, 32);
        let x = qr_lstsq(&a.view(), &b.view()).unwrap();
        let r = &b - &a.dot(&x);
        let atr = conj_transpose(&a.view()).dot(&r);
        for v in atr.iter() {
            assert!(v.norm() < 1e-10);
        }
    }

    #[test]
    fn eigvals_of_triangular_matrix_are_its_diagonal() {
        let n = 9;
        let mut a = rand_matrix(n, n, 41);
        for i in 0..n {
            for j in 0..i {
                a[[i, j]] = ZERO;
            }
        }
        let mut got = eigvals(&a.view()).unwrap();
        let mut want: Vec<Complex64> = (0..n).map(|i| a[[i, i]]).collect();
        got.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
        want.sort_by(|x, y| x.re.total_cmp(&y.re).then(x.im.total_cmp(&y.im)));
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).norm() < 1e-10);
        }
    }

    #[test]
    fn eigvals_of_companion_matrix_are_polynomial_roots() {
        // z^4 = 1: roots are the 4th roots of unity
        let mut a = Array2::from_elem((4, 4), ZERO);
        a[[0, 3]] = ONE;
        for i in 1..4 {
            a[[i, i - 1]] = ONE;
        }
        let got = eigvals(&a.view()).unwrap();
        let want = [
            Complex64::new(-1.0, 0.0),
            Complex64::new(0.0, -1.0),
            Complex64::new(1.0, 0.0),
            Complex64::new(0.0, 1.0),
        ];
        // greedy nearest-root matching; every root must be hit once
        let mut used = [false; 4];
        for g in &got {
            let (k, dist) = want
                .iter()
                .enumerate()
                .filter(|(k, _)| !used[*k])
                .map(|(k, w)| (k, (g - w).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            assert!(dist < 1e-10, "{g} missed all remaining roots");
            used[k] = true;
        }
    }

    #[test]
    fn eigvals_random_matrices_satisfy_trace_and_det() {
        for n in [2usize, 4, 8, 16, 32] {
            let a = rand_matrix(n, n, 600 + n as u64);
            let eigs = eigvals(&a.view()).unwrap();
            let tr_a: Complex64 = (0..n).map(|i| a[[i, i]]).sum();
            let tr_e: Complex64 = eigs.iter().sum();
            assert!((tr_a - tr_e).norm() < 1e-9 * n as f64, "n={n} trace");
            // determinant through LU on a shifted copy vs eig product
            let prod: Complex64 = eigs.iter().product();
            let det = det_via_lu(&a);
            assert!((prod - det).norm() < 1e-8 * det.norm().max(1.0), "n={n} det {prod} vs {det}");
        }
    }

    fn det_via_lu(a: &Array2<Complex64>) -> Complex64 {
        let n = a.nrows();
        let mut lu = a.clone();
        let mut det = ONE;
        for k in 0..n {
            let mut best = k;
            for i in k + 1..n {
                if lu[[i, k]].norm() > lu[[best, k]].norm() {
                    best = i;
                }
            }
            if best != k {
                det = -det;
                for j in 0..n {
                    let tmp = lu[[k, j]];
                    lu[[k, j]] = lu[[best, j]];
                    lu[[best, j]] = tmp;
                }
            }
            let p = lu[[k, k]];
            if p.norm() == 0.0 {
                return ZERO;
            }
            det *= p;
            for i in k + 1..n {
                let f = lu[[i, k]] / p;
                for j in k + 1..n {
                    let s = f * lu[[k, j]];
                    lu[[i, j]] -= s;
                }
            }
        }
        det
    }

    #[test]
    fn lu_solve_and_inverse_agree_with_construction() {
        let n = 20;
        let a = rand_matrix(n, n, 77);
        let x_true = rand_matrix(n, 4, 78);
        let b = a.dot(&x_true);
        let x = lu_solve(&a.view(), &b.view()).unwrap();
        for i in 0..n {
            for j in 0..4 {
                assert!((x[[i, j]] - x_true[[i, j]]).norm() < 1e-9);
            }
        }
        let inv = lu_inverse(&a.view()).unwrap();
        let eye = a.dot(&inv);
        for i in 0..n {
            for j in 0..n {
                let want = if i == j { ONE } else { ZERO };
                assert!((eye[[i, j]] - want).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn gram_matrices_are_hermitian_and_consistent() {
        let a = rand_matrix(10, 6, 90);
        let g1 = gram_aha(&a.view());
        let g2 = conj_transpose(&a.view()).dot(&a);
        for i in 0..6 {
            for j in 0..6 {
                assert!((g1[[i, j]] - g2[[i, j]]).norm() < 1e-12);
            }
        }
        let h1 = gram_aah(&a.view());
        let h2 = a.dot(&conj_transpose(&a.view()));
        for i in 0..10 {
            for j in 0..10 {
                assert!((h1[[i, j]] - h2[[i, j]]).norm() < 1e-12);
            }
        }
    }
}
