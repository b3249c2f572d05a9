//! Singular values of `df` and the adapted tangent/normal frames of the graph.
//!
//! At a node, the squared singular values `λ_i²` are the eigenvalues of
//! `f*g_N` relative to `g_M`. With `g_M`-orthonormal eigenvectors `α_i` and
//! `g_N`-orthonormal `β`'s satisfying `df(α_i) = λ_i β_{n−m+i}` on the
//! nonzero block, the graph has the `g_K`-orthonormal frames
//!
//! ```text
//! e_i = α_i                                 (i ≤ m−r)
//! e_i = (α_i ⊕ λ_i β_{n−m+i}) / √(1+λ_i²)    (i > m−r)
//! ξ_a = β_a                                 (a ≤ n−r)
//! ξ_a = (−λ α ⊕ β_a) / √(1+λ²), λ = λ_{a+m−n} (a > n−r)
//! ```
//!
//! on which `s_K = g_M ⊕ (−g_N)` is diagonal with the closed forms returned
//! by [`s_tensor_values`].

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

/// Relative threshold below which a singular value counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct SingularData {
    pub m: usize,
    pub n: usize,
    /// Singular values, ascending.
    pub lambdas: Vec<f64>,
    pub rank: usize,
    pub alpha: Vec<DVector<f64>>,
    pub beta: Vec<DVector<f64>>,
    /// Tangent frame `e_1..e_m` as `(m+n)`-vectors.
    pub tangent: Vec<DVector<f64>>,
    /// Normal frame `ξ_1..ξ_n` as `(m+n)`-vectors.
    pub normal: Vec<DVector<f64>>,
}

impl SingularData {
    pub fn lambda_max(&self) -> f64 {
        self.lambdas.last().copied().unwrap_or(0.0)
    }

    /// `Σ log(1 + λ_i²) = log det(I + dfᵀdf)` in metric-orthonormal terms.
    pub fn log_det(&self) -> f64 {
        self.lambdas.iter().map(|l| (l * l).ln_1p()).sum()
    }
}

/// Values of the `s`-tensors on the adapted frames.
#[derive(Clone, Debug, PartialEq)]
pub struct STensorValues {
    /// `s(e_i, e_i) = (1−λ_i²)/(1+λ_i²)`.
    pub tangent: Vec<f64>,
    /// `s⊥(ξ_a, ξ_a)`: `−1` on the kernel block, `−(1−λ²)/(1+λ²)` otherwise.
    pub normal: Vec<f64>,
    /// `s_K(e_{m−r+i}, ξ_{n−r+i}) = −2λ/(1+λ²)`, `i = 1..r`.
    pub mixed: Vec<f64>,
    /// `min_i s(e_i, e_i)`.
    pub eps_node: f64,
}

fn sign_normalize(v: &mut DVector<f64>) {
    let mut best = 0;
    for k in 0..v.len() {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Euclidean orthonormal complement of `basis` in `R^d`.
fn complete(basis: &[DVector<f64>], d: usize) -> Result<Vec<DVector<f64>>> {
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(d - basis.len());
    for e in 0..d {
        if out.len() == d - basis.len() {
            break;
        }
        let mut v = DVector::from_fn(d, |k, _| if k == e { 1.0 } else { 0.0 });
        for _ in 0..2 {
            for b in basis.iter().chain(out.iter()) {
                let p = v.dot(b);
                v -= b * p;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            out.push(v / norm);
        }
    }
    if out.len() != d - basis.len() {
        return Err(Error::Numerical("could not complete an orthonormal frame".into()));
    }
    Ok(out)
}

fn lift(m: usize, n: usize, dom: &DVector<f64>, dc: f64, tgt: &DVector<f64>, tc: f64) -> DVector<f64> {
    let mut v = DVector::zeros(m + n);
    for i in 0..m {
        v[i] = dc * dom[i];
    }
    for a in 0..n {
        v[m + a] = tc * tgt[a];
    }
    v
}

/// Solves `f*g_N v = λ² g_M v` and assembles the adapted frames.
pub fn singular_decompose(
    gm: &DMatrix<f64>,
    gn: &DMatrix<f64>,
    df: &DMatrix<f64>,
) -> Result<SingularData> {
    let m = gm.nrows();
    let n = gn.nrows();
    if df.nrows() != n || df.ncols() != m || gm.ncols() != m || gn.ncols() != n {
        return Err(Error::Internal(format!(
            "shape mismatch: g_M {}x{}, g_N {}x{}, df {}x{}",
            gm.nrows(),
            gm.ncols(),
            gn.nrows(),
            gn.ncols(),
            df.nrows(),
            df.ncols()
        )));
    }
    let lm = gm
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("domain metric is not positive definite".into()))?
        .l();
    let ln = gn
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("target metric is not positive definite".into()))?
        .l();
    // A = L_Nᵀ df L_M⁻ᵀ, so AᵀA = L_M⁻¹ (f*g_N) L_M⁻ᵀ
    let right = lm
        .solve_lower_triangular(&(df.transpose() * &ln))
        .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
    let svd = SVD::new(right.transpose(), true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(Error::Numerical("singular value decomposition failed".into())),
    };
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
    let lmax = order.last().map_or(0.0, |&k| svd.singular_values[k]);
    let threshold = RANK_TOLERANCE * (1.0 + lmax);
    order.retain(|&k| svd.singular_values[k] > threshold);
    let rank = order.len();

    let lmt = lm.transpose();
    let lnt = ln.transpose();
    let unwhiten = |l: &DMatrix<f64>, w: &DVector<f64>| {
        l.solve_upper_triangular(w)
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))
    };
    let kept_v: Vec<DVector<f64>> = order.iter().map(|&k| vt.row(k).transpose()).collect();
    let kept_u: Vec<DVector<f64>> = order.iter().map(|&k| u.column(k).into_owned()).collect();

    let mut lambdas = vec![0.0; m - rank];
    let mut alpha = Vec::with_capacity(m);
    for w in complete(&kept_v, m)? {
        let mut a = unwhiten(&lmt, &w)?;
        sign_normalize(&mut a);
        alpha.push(a);
    }
    let mut completion = Vec::with_capacity(n - rank);
    for w in complete(&kept_u, n)? {
        let mut b = unwhiten(&lnt, &w)?;
        sign_normalize(&mut b);
        completion.push(b);
    }
    let mut image = Vec::with_capacity(rank);
    for (j, &k) in order.iter().enumerate() {
        lambdas.push(svd.singular_values[k]);
        let mut a = unwhiten(&lmt, &kept_v[j])?;
        let mut b = unwhiten(&lnt, &kept_u[j])?;
        let flip = {
            let mut probe = a.clone();
            sign_normalize(&mut probe);
            probe != a
        };
        if flip {
            a.neg_mut();
            b.neg_mut();
        }
        alpha.push(a);
        image.push(b);
    }

    let mut beta = completion;
    beta.extend(image);

    let mut tangent = Vec::with_capacity(m);
    for i in 0..m {
        if i < m - rank {
            tangent.push(lift(m, n, &alpha[i], 1.0, &beta[0], 0.0));
        } else {
            let lam = lambdas[i];
            let s = 1.0 / (1.0 + lam * lam).sqrt();
            tangent.push(lift(m, n, &alpha[i], s, &beta[n + i - m], lam * s));
        }
    }
    let mut normal = Vec::with_capacity(n);
    for a in 0..n {
        if a < n - rank {
            normal.push(lift(m, n, &alpha[0], 0.0, &beta[a], 1.0));
        } else {
            let i = a + m - n;
            let lam = lambdas[i];
            let s = 1.0 / (1.0 + lam * lam).sqrt();
            normal.push(lift(m, n, &alpha[i], -lam * s, &beta[a], s));
        }
    }
    Ok(SingularData {
        m,
        n,
        lambdas,
        rank,
        alpha,
        beta,
        tangent,
        normal,
    })
}

/// Closed-form values of `s`, `s⊥` and the mixed terms from the singular
/// values alone.
pub fn s_tensor_values(sd: &SingularData) -> STensorValues {
    let ratio = |l: f64| (1.0 - l * l) / (1.0 + l * l);
    let (m, n, r) = (sd.m, sd.n, sd.rank);
    let tangent: Vec<f64> = (0..m)
        .map(|i| if i < m - r { 1.0 } else { ratio(sd.lambdas[i]) })
        .collect();
    let normal = (0..n)
        .map(|a| {
            if a < n - r {
                -1.0
            } else {
                -ratio(sd.lambdas[a + m - n])
            }
        })
        .collect();
    let mixed = (0..r)
        .map(|i| {
            let l = sd.lambdas[m - r + i];
            -2.0 * l / (1.0 + l * l)
        })
        .collect();
    let eps_node = tangent.iter().copied().fold(f64::INFINITY, f64::min);
    STensorValues {
        tangent,
        normal,
        mixed,
        eps_node,
    }
}

/// Direct evaluation of `s_K(V, W) = g_M(V_M, W_M) − g_N(V_N, W_N)`.
pub fn s_k(gm: &DMatrix<f64>, gn: &DMatrix<f64>, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let m = gm.nrows();
    let n = gn.nrows();
    let vm = v.rows(0, m);
    let wm = w.rows(0, m);
    let vn = v.rows(m, n);
    let wn = w.rows(m, n);
    (vm.transpose() * gm * wm)[(0, 0)] - (vn.transpose() * gn * wn)[(0, 0)]
}

/// Product metric `g_K = g_M ⊕ g_N`.
pub fn g_k(gm: &DMatrix<f64>, gn: &DMatrix<f64>, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let m = gm.nrows();
    let n = gn.nrows();
    (v.rows(0, m).transpose() * gm * w.rows(0, m))[(0, 0)]
        + (v.rows(m, n).transpose() * gn * w.rows(m, n))[(0, 0)]
}

/// Largest deviation between the closed forms and `s_K` evaluated on the
/// stored frames, including every mixed pair that must vanish.
pub fn frame_formula_residual(sd: &SingularData, gm: &DMatrix<f64>, gn: &DMatrix<f64>) -> f64 {
    let sv = s_tensor_values(sd);
    let (m, n, r) = (sd.m, sd.n, sd.rank);
    let mut worst: f64 = 0.0;
    for i in 0..m {
        for j in 0..m {
            let want = if i == j { sv.tangent[i] } else { 0.0 };
            worst = worst.max((s_k(gm, gn, &sd.tangent[i], &sd.tangent[j]) - want).abs());
        }
    }
    for a in 0..n {
        for b in 0..n {
            let want = if a == b { sv.normal[a] } else { 0.0 };
            worst = worst.max((s_k(gm, gn, &sd.normal[a], &sd.normal[b]) - want).abs());
        }
    }
    for i in 0..m {
        for a in 0..n {
            let want = if i >= m - r && a >= n - r && i - (m - r) == a - (n - r) {
                sv.mixed[i - (m - r)]
            } else {
                0.0
            };
            worst = worst.max((s_k(gm, gn, &sd.tangent[i], &sd.normal[a]) - want).abs());
        }
    }
    worst
}

/// Largest deviation of the frames from `g_K`-orthonormality.
pub fn frame_orthonormality_residual(
    sd: &SingularData,
    gm: &DMatrix<f64>,
    gn: &DMatrix<f64>,
) -> f64 {
    let all: Vec<&DVector<f64>> = sd.tangent.iter().chain(sd.normal.iter()).collect();
    let mut worst: f64 = 0.0;
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((g_k(gm, gn, a, b) - want).abs());
        }
    }
    worst
}

/// Field-level `ε = min_x min_i s(e_i, e_i)` over the given nodes.
pub fn epsilon_min<'a>(values: impl IntoIterator<Item = &'a STensorValues>) -> f64 {
    values
        .into_iter()
        .map(|v| v.eps_node)
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn diag(m: usize, v: f64) -> DMatrix<f64> {
        DMatrix::identity(m, m) * v
    }

    #[test]
    fn zero_differential() {
        let sd = singular_decompose(&diag(2, 1.0), &diag(3, 1.0), &DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(sd.lambdas, vec![0.0, 0.0]);
        assert_eq!(sd.rank, 0);
        for e in &sd.tangent {
            assert!(e.rows(2, 3).iter().all(|v| *v == 0.0));
        }
        for x in &sd.normal {
            assert!(x.rows(0, 2).iter().all(|v| *v == 0.0));
        }
        let sv = s_tensor_values(&sd);
        assert_eq!(sv.tangent, vec![1.0, 1.0]);
        assert_eq!(sv.normal, vec![-1.0, -1.0, -1.0]);
        assert!(sv.mixed.is_empty());
        assert_eq!(sv.eps_node, 1.0);
    }

    #[test]
    fn scaled_identity() {
        let sd = singular_decompose(&diag(2, 1.0), &diag(2, 1.0), &diag(2, 0.5)).unwrap();
        assert!((sd.lambdas[0] - 0.5).abs() < 1e-15 && (sd.lambdas[1] - 0.5).abs() < 1e-15);
        assert_eq!(sd.rank, 2);
        // the sphere dilation at the chart origin
        let sd = singular_decompose(&diag(2, 4.0), &diag(2, 4.0), &diag(2, 0.5)).unwrap();
        assert!((sd.lambdas[0] - 0.5).abs() < 1e-15 && (sd.lambdas[1] - 0.5).abs() < 1e-15);
        let sv = s_tensor_values(&sd);
        assert!((sv.tangent[0] - 0.6).abs() < 1e-15);
        assert!((sv.mixed[0] + 0.8).abs() < 1e-15);
        assert!((sv.eps_node - 0.6).abs() < 1e-15);
        assert!(frame_formula_residual(&sd, &diag(2, 4.0), &diag(2, 4.0)) < 1e-14);
    }

    #[test]
    fn closed_forms_at_special_lambdas() {
        let mk = |l: f64| singular_decompose(&diag(2, 1.0), &diag(2, 1.0), &diag(2, l)).unwrap();
        let sv = s_tensor_values(&mk(1.0));
        assert_eq!(sv.tangent, vec![0.0, 0.0]);
        assert_eq!(sv.mixed, vec![-1.0, -1.0]);
        assert_eq!(sv.eps_node, 0.0);
        let sv = s_tensor_values(&mk(0.5));
        assert!((sv.tangent[1] - 0.6).abs() < 1e-15);
        assert!((sv.normal[1] + 0.6).abs() < 1e-15);
        assert!((sv.mixed[1] + 0.8).abs() < 1e-15);
    }

    #[test]
    fn non_spd_metric_is_numerical_error() {
        let mut gm = diag(2, 1.0);
        gm[(1, 1)] = -1.0;
        let r = singular_decompose(&gm, &diag(2, 1.0), &diag(2, 0.5));
        assert!(matches!(r, Err(Error::Numerical(_))));
    }

    #[test]
    fn differential_maps_alpha_onto_beta() {
        let gm = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let gn = DMatrix::from_row_slice(3, 3, &[1.5, 0.1, 0.0, 0.1, 1.0, 0.2, 0.0, 0.2, 0.7]);
        let df = DMatrix::from_row_slice(3, 2, &[0.4, -0.2, 0.1, 0.3, 0.05, 0.2]);
        let sd = singular_decompose(&gm, &gn, &df).unwrap();
        assert_eq!(sd.rank, 2);
        for i in 0..2 {
            let lhs = &df * &sd.alpha[i];
            let rhs = &sd.beta[3 - 2 + i] * sd.lambdas[i];
            assert!((lhs - rhs).norm() < 1e-12);
        }
        assert!(frame_orthonormality_residual(&sd, &gm, &gn) < 1e-12);
        assert!(frame_formula_residual(&sd, &gm, &gn) < 1e-12);
    }

    #[test]
    fn epsilon_min_takes_the_smallest_node() {
        let a = s_tensor_values(
            &singular_decompose(&diag(2, 1.0), &diag(2, 1.0), &diag(2, 0.5)).unwrap(),
        );
        let b = s_tensor_values(
            &singular_decompose(&diag(2, 1.0), &diag(2, 1.0), &DMatrix::zeros(2, 2)).unwrap(),
        );
        assert!((epsilon_min([&a, &b]) - 0.6).abs() < 1e-15);
    }
}
