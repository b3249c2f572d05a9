//! Second-order geometry of the graph `Γ(f) ⊂ M × N`.
//!
//! Ambient vectors are stored as `(2 + n)`-vectors in product chart
//! coordinates: the first two entries are domain components, the rest target
//! components. The product metric is `a² δ ⊕ b² δ` with `a`, `b` the conformal
//! factors of the domain and target charts.

use nalgebra::{DMatrix, DVector, Matrix2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{MapField, NodeJet, Patch};
use crate::frames::SingularData;
use crate::manifold::ModelManifold;

/// Domain dimension of every grid this crate builds.
pub const M: usize = 2;

/// `Γ(u, w)` for a conformal metric with `∇ ln λ = grad`.
#[inline]
fn conformal_gamma(grad: &[f64], u: &[f64], w: &[f64], out: &mut [f64]) {
    let ug: f64 = u.iter().zip(grad).map(|(a, b)| a * b).sum();
    let wg: f64 = w.iter().zip(grad).map(|(a, b)| a * b).sum();
    let uw: f64 = u.iter().zip(w).map(|(a, b)| a * b).sum();
    for c in 0..out.len() {
        out[c] = u[c] * wg + w[c] * ug - uw * grad[c];
    }
}

/// Pointwise first- and second-order data of the graph at one node.
#[derive(Clone, Debug)]
pub struct NodeGeometry {
    pub n: usize,
    /// Domain conformal factor and `∇ ln a`.
    pub a: f64,
    pub grad_a: [f64; 2],
    /// Target conformal factor and `∇ ln b`.
    pub b: f64,
    pub grad_b: Vec<f64>,
    /// `n × 2` differential of `f` in chart coordinates.
    pub df: DMatrix<f64>,
    pub g: Matrix2<f64>,
    pub ginv: Matrix2<f64>,
    /// `dF(∂_k) = (e_k, ∂_k f)`.
    pub tangent: [DVector<f64>; 2],
    /// `∂_i∂_j F + Γ_K(∂_i F, ∂_j F)` before projection.
    pub hessian: [[DVector<f64>; 2]; 2],
    /// Second fundamental form `A(∂_i, ∂_j)`.
    pub a_form: [[DVector<f64>; 2]; 2],
    pub h: DVector<f64>,
    pub a2: f64,
    pub h2: f64,
    /// Graph-gauge velocity of `f` (target chart components).
    pub velocity: Vec<f64>,
}

impl NodeGeometry {
    /// Product metric `g_K(V, W)`.
    #[inline]
    pub fn inner(&self, v: &DVector<f64>, w: &DVector<f64>) -> f64 {
        let dom = v[0] * w[0] + v[1] * w[1];
        let tgt: f64 = (M..M + self.n).map(|k| v[k] * w[k]).sum();
        self.a * self.a * dom + self.b * self.b * tgt
    }

    /// Normal projection `V − g^{kl} ⟨V, dF(∂_k)⟩ dF(∂_l)`.
    pub fn project_normal(&self, v: &DVector<f64>) -> DVector<f64> {
        let w = [self.inner(v, &self.tangent[0]), self.inner(v, &self.tangent[1])];
        let mut out = v.clone();
        for l in 0..M {
            let c = self.ginv[(l, 0)] * w[0] + self.ginv[(l, 1)] * w[1];
            out.axpy(-c, &self.tangent[l], 1.0);
        }
        out
    }

    /// Product metric on the domain and target blocks.
    pub fn metrics(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::identity(M, M) * (self.a * self.a),
            DMatrix::identity(self.n, self.n) * (self.b * self.b),
        )
    }

    /// `Γ_K(U, W)` for product vectors at this node.
    pub fn product_gamma(&self, u: &DVector<f64>, w: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(M + self.n);
        conformal_gamma(
            &self.grad_a,
            &u.as_slice()[..M],
            &w.as_slice()[..M],
            &mut out.as_mut_slice()[..M],
        );
        conformal_gamma(
            &self.grad_b,
            &u.as_slice()[M..],
            &w.as_slice()[M..],
            &mut out.as_mut_slice()[M..],
        );
        out
    }

    /// The vector `(0, v)` in product coordinates.
    pub fn lifted_velocity(&self) -> DVector<f64> {
        let mut out = DVector::zeros(M + self.n);
        out.as_mut_slice()[M..].copy_from_slice(&self.velocity);
        out
    }
}

/// Induced metric `g_M + f*g_N` and its inverse.
pub fn induced_metric(
    gm: &DMatrix<f64>,
    gn: &DMatrix<f64>,
    df: &DMatrix<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let g = gm + df.transpose() * gn * df;
    let chol = g
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("induced metric is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok((g, inv))
}

fn invert2(g: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let det = g[(0, 0)] * g[(1, 1)] - g[(0, 1)] * g[(1, 0)];
    if !(det > 0.0 && g[(0, 0)] > 0.0) || !det.is_finite() {
        return Err(Error::Numerical("induced metric is not positive definite".into()));
    }
    Ok(Matrix2::new(g[(1, 1)], -g[(0, 1)], -g[(1, 0)], g[(0, 0)]) / det)
}

/// Induced metric of the graph from a jet, without the full geometry.
pub fn metric_from_jet(
    domain: &ModelManifold,
    target: &ModelManifold,
    jet: &NodeJet,
) -> Matrix2<f64> {
    let a = domain.conformal_factor(&jet.x);
    let b = target.conformal_factor(&jet.value);
    let mut g = Matrix2::identity() * (a * a);
    for i in 0..M {
        for j in 0..M {
            let s: f64 = (0..jet.target_dim()).map(|al| jet.df(al, i) * jet.df(al, j)).sum();
            g[(i, j)] += b * b * s;
        }
    }
    g
}

/// Full pointwise geometry from a jet.
pub fn node_geometry(
    domain: &ModelManifold,
    target: &ModelManifold,
    jet: &NodeJet,
) -> Result<NodeGeometry> {
    let n = jet.target_dim();
    let mut grad_a = [0.0; 2];
    let a = domain.conformal(&jet.x, &mut grad_a);
    let mut grad_b = vec![0.0; n];
    let b = target.conformal(&jet.value, &mut grad_b);
    let df = DMatrix::from_fn(n, M, |al, i| jet.df(al, i));
    let g = metric_from_jet(domain, target, jet);
    let ginv = invert2(&g)?;

    let tangent: [DVector<f64>; 2] = std::array::from_fn(|k| {
        let mut t = DVector::zeros(M + n);
        t[k] = 1.0;
        for al in 0..n {
            t[M + al] = jet.df(al, k);
        }
        t
    });

    let mut scratch = vec![0.0; n];
    let hessian: [[DVector<f64>; 2]; 2] = std::array::from_fn(|i| {
        std::array::from_fn(|j| {
            let mut v = DVector::zeros(M + n);
            let ei = [(i == 0) as u8 as f64, (i == 1) as u8 as f64];
            let ej = [(j == 0) as u8 as f64, (j == 1) as u8 as f64];
            conformal_gamma(&grad_a, &ei, &ej, &mut v.as_mut_slice()[..M]);
            let ui: Vec<f64> = (0..n).map(|al| jet.df(al, i)).collect();
            let uj: Vec<f64> = (0..n).map(|al| jet.df(al, j)).collect();
            conformal_gamma(&grad_b, &ui, &uj, &mut scratch);
            for al in 0..n {
                v[M + al] = jet.ddf(al, i, j) + scratch[al];
            }
            v
        })
    });

    // v^α = g^ij (∂_ij f^α − Γ_M^k_ij ∂_k f^α + Γ_N(∂_i f, ∂_j f)^α)
    let mut velocity = vec![0.0; n];
    for i in 0..M {
        for j in 0..M {
            let gij = ginv[(i, j)];
            let hij = &hessian[i][j];
            for al in 0..n {
                let mut s = hij[M + al];
                for k in 0..M {
                    s -= hij[k] * jet.df(al, k);
                }
                velocity[al] += gij * s;
            }
        }
    }

    let mut geom = NodeGeometry {
        n,
        a,
        grad_a,
        b,
        grad_b,
        df,
        g,
        ginv,
        tangent,
        a_form: std::array::from_fn(|_| std::array::from_fn(|_| DVector::zeros(M + n))),
        hessian,
        h: DVector::zeros(M + n),
        a2: 0.0,
        h2: 0.0,
        velocity,
    };
    for i in 0..M {
        for j in 0..M {
            geom.a_form[i][j] = geom.project_normal(&geom.hessian[i][j]);
        }
    }
    let mut h = DVector::zeros(M + n);
    for i in 0..M {
        for j in 0..M {
            h.axpy(ginv[(i, j)], &geom.a_form[i][j], 1.0);
        }
    }
    let mut a2 = 0.0;
    for i in 0..M {
        for j in 0..M {
            for k in 0..M {
                for l in 0..M {
                    a2 += ginv[(i, k)]
                        * ginv[(j, l)]
                        * geom.inner(&geom.a_form[i][j], &geom.a_form[k][l]);
                }
            }
        }
    }
    geom.h2 = geom.inner(&h, &h);
    geom.h = h;
    geom.a2 = a2;
    Ok(geom)
}

/// Per-node quantities the time stepper needs, from one jet.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeRates {
    /// Graph-gauge velocity `∂_t f` in target chart components.
    pub velocity: Vec<f64>,
    /// Tangential part of `(0, v)`: `(0, v) = H + dF(drift)`.
    pub drift: [f64; 2],
    pub h2: f64,
    pub a2: f64,
    /// Smallest eigenvalue of the induced metric.
    pub g_min_eig: f64,
}

/// Allocation-light evaluation of [`NodeRates`]; agrees with
/// [`node_geometry`] to round-off.
pub fn node_rates(domain: &ModelManifold, target: &ModelManifold, jet: &NodeJet) -> Result<NodeRates> {
    let n = jet.target_dim();
    let mut ga = [0.0; 2];
    let a = domain.conformal(&jet.x, &mut ga);
    let mut gb = vec![0.0; n];
    let b = target.conformal(&jet.value, &mut gb);
    let (a2m, b2m) = (a * a, b * b);
    let g = metric_from_jet(domain, target, jet);
    let gi = invert2(&g)?;
    let d = M + n;
    // rows: T_0, T_1, Ã_00, Ã_01, Ã_11
    let mut vecs = vec![0.0; 5 * d];
    for k in 0..M {
        vecs[k * d + k] = 1.0;
        for al in 0..n {
            vecs[k * d + M + al] = jet.df(al, k);
        }
    }
    let pairs = [(0usize, 0usize), (0, 1), (1, 1)];
    let mut ui = vec![0.0; n];
    let mut uj = vec![0.0; n];
    let mut gam = vec![0.0; n];
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let row = &mut vecs[(2 + r) * d..(3 + r) * d];
        let ei = [(i == 0) as u8 as f64, (i == 1) as u8 as f64];
        let ej = [(j == 0) as u8 as f64, (j == 1) as u8 as f64];
        conformal_gamma(&ga, &ei, &ej, &mut row[..M]);
        for al in 0..n {
            ui[al] = jet.df(al, i);
            uj[al] = jet.df(al, j);
        }
        conformal_gamma(&gb, &ui, &uj, &mut gam);
        for al in 0..n {
            row[M + al] = jet.ddf(al, i, j) + gam[al];
        }
    }
    let ip = |p: usize, q: usize| -> f64 {
        let (x, y) = (&vecs[p * d..(p + 1) * d], &vecs[q * d..(q + 1) * d]);
        a2m * (x[0] * y[0] + x[1] * y[1])
            + b2m * (M..d).map(|k| x[k] * y[k]).sum::<f64>()
    };
    let slot = |i: usize, j: usize| 2 + i + j;
    // w[r][p] = ⟨Ã_r, T_p⟩, c[r][l] = g^{lp} w[r][p]
    let mut w = [[0.0; 2]; 3];
    let mut c = [[0.0; 2]; 3];
    for r in 0..3 {
        for p in 0..M {
            w[r][p] = ip(2 + r, p);
        }
        for l in 0..M {
            c[r][l] = gi[(l, 0)] * w[r][0] + gi[(l, 1)] * w[r][1];
        }
    }
    let mut aa = [[0.0; 3]; 3];
    for r in 0..3 {
        for q in 0..3 {
            aa[r][q] = ip(2 + r, 2 + q) - c[q][0] * w[r][0] - c[q][1] * w[r][1];
        }
    }
    let mut a2 = 0.0;
    for i in 0..M {
        for j in 0..M {
            for k in 0..M {
                for l in 0..M {
                    a2 += gi[(i, k)] * gi[(j, l)] * aa[slot(i, j) - 2][slot(k, l) - 2];
                }
            }
        }
    }
    let mut velocity = vec![0.0; n];
    for i in 0..M {
        for j in 0..M {
            let row = &vecs[slot(i, j) * d..(slot(i, j) + 1) * d];
            for al in 0..n {
                velocity[al] += gi[(i, j)] * (row[M + al] - row[0] * jet.df(al, 0) - row[1] * jet.df(al, 1));
            }
        }
    }
    let mut wv = [0.0; 2];
    for (k, o) in wv.iter_mut().enumerate() {
        *o = b2m * (0..n).map(|al| velocity[al] * jet.df(al, k)).sum::<f64>();
    }
    let drift = [
        gi[(0, 0)] * wv[0] + gi[(0, 1)] * wv[1],
        gi[(1, 0)] * wv[0] + gi[(1, 1)] * wv[1],
    ];
    let v2 = b2m * velocity.iter().map(|v| v * v).sum::<f64>();
    let h2 = (v2 - drift[0] * wv[0] - drift[1] * wv[1]).max(0.0);
    let tr = g[(0, 0)] + g[(1, 1)];
    let det = g.determinant();
    let g_min_eig = 0.5 * tr - (0.25 * tr * tr - det).max(0.0).sqrt();
    Ok(NodeRates {
        velocity,
        drift,
        h2,
        a2: a2.max(0.0),
        g_min_eig,
    })
}

/// Components of `H` and `A` in the adapted frames of `sd`.
#[derive(Clone, Debug)]
pub struct FrameComponents {
    /// `H_ξa = ⟨H, ξ_a⟩`.
    pub h: Vec<f64>,
    /// `A_ξa(e_i, e_j)` at `a[(a * 2 + i) * 2 + j]`.
    pub a: Vec<f64>,
}

pub fn frame_components(geom: &NodeGeometry, sd: &SingularData) -> FrameComponents {
    let n = geom.n;
    let h = sd.normal.iter().map(|xi| geom.inner(&geom.h, xi)).collect();
    // e_i = Σ_k e_i^k dF(∂_k): the domain block carries the coefficients.
    let mut ae: Vec<Vec<DVector<f64>>> = vec![vec![DVector::zeros(M + n); M]; M];
    for i in 0..M {
        for j in 0..M {
            for k in 0..M {
                for l in 0..M {
                    let c = sd.tangent[i][k] * sd.tangent[j][l];
                    ae[i][j].axpy(c, &geom.a_form[k][l], 1.0);
                }
            }
        }
    }
    let mut a = vec![0.0; n * M * M];
    for (al, xi) in sd.normal.iter().enumerate() {
        for i in 0..M {
            for j in 0..M {
                a[(al * M + i) * M + j] = geom.inner(&ae[i][j], xi);
            }
        }
    }
    FrameComponents { h, a }
}

/// Per-node geometry on a node set.
#[derive(Clone, Debug)]
pub struct GraphData {
    pub nodes: Vec<Option<NodeGeometry>>,
}

impl GraphData {
    pub fn get(&self, idx: usize) -> Option<&NodeGeometry> {
        self.nodes[idx].as_ref()
    }
}

/// Geometry at every listed node, computed in parallel.
pub fn compute_graph(field: &MapField, nodes: &[usize]) -> Result<GraphData> {
    let domain = field.domain();
    let target = field.target();
    let list: Vec<(usize, NodeGeometry)> = nodes
        .par_iter()
        .map(|&k| Ok((k, node_geometry(domain, target, &field.jet(k)?)?)))
        .collect::<Result<_>>()?;
    let mut out = vec![None; field.grid().node_count()];
    for (k, g) in list {
        out[k] = Some(g);
    }
    Ok(GraphData { nodes: out })
}

/// Largest `|⟨V, dF(∂_k)⟩| / |dF(∂_k)|` over the tangent directions.
pub fn tangential_part(geom: &NodeGeometry, v: &DVector<f64>) -> f64 {
    geom.tangent
        .iter()
        .map(|t| geom.inner(v, t).abs() / geom.inner(t, t).sqrt())
        .fold(0.0, f64::max)
}

/// Orthonormal frame `E` of the induced metric, `Eᵀ g E = I`.
fn orthonormal_frame(g: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let l = g
        .cholesky()
        .ok_or_else(|| Error::Numerical("induced metric is not positive definite".into()))?
        .l();
    l.transpose()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("singular induced metric".into()))
}

/// Christoffel symbols `Γ^l_ij` at patch offset `(a, b)` from central
/// differences of the induced metric at its axis neighbors.
fn induced_christoffel(
    metric: &dyn Fn(isize, isize) -> Matrix2<f64>,
    a: isize,
    b: isize,
    h: f64,
) -> Result<[[[f64; 2]; 2]; 2]> {
    let dg = [
        (metric(a + 1, b) - metric(a - 1, b)) / (2.0 * h),
        (metric(a, b + 1) - metric(a, b - 1)) / (2.0 * h),
    ];
    let ginv = invert2(&metric(a, b))?;
    let mut gam = [[[0.0; 2]; 2]; 2];
    for l in 0..M {
        for i in 0..M {
            for j in 0..M {
                let mut s = 0.0;
                for p in 0..M {
                    s += ginv[(l, p)] * (dg[i][(p, j)] + dg[j][(p, i)] - dg[p][(i, j)]);
                }
                gam[l][i][j] = 0.5 * s;
            }
        }
    }
    Ok(gam)
}

/// Pointwise Gauss and Codazzi residuals, both in an orthonormal frame of
/// the induced metric.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvatureResiduals {
    pub gauss: f64,
    pub codazzi: f64,
}

/// Gauss and Codazzi residuals at a node. The intrinsic curvature comes from
/// finite differences of the induced metric on a radius-3 patch.
pub fn curvature_residuals(field: &MapField, idx: usize) -> Result<CurvatureResiduals> {
    let patch = field.patch(idx, 3)?;
    curvature_residuals_on_patch(field.domain(), field.target(), &patch)
}

fn curvature_residuals_on_patch(
    domain: &ModelManifold,
    target: &ModelManifold,
    patch: &Patch,
) -> Result<CurvatureResiduals> {
    let h = patch.h;
    let mut gtab = [[Matrix2::zeros(); 5]; 5];
    for a in -2..=2isize {
        for b in -2..=2isize {
            gtab[(a + 2) as usize][(b + 2) as usize] =
                metric_from_jet(domain, target, &patch.jet(a, b));
        }
    }
    let metric = |a: isize, b: isize| gtab[(a + 2) as usize][(b + 2) as usize];
    let gam_c = induced_christoffel(&metric, 0, 0, h)?;
    let gam_n = [
        [
            induced_christoffel(&metric, 1, 0, h)?,
            induced_christoffel(&metric, -1, 0, h)?,
        ],
        [
            induced_christoffel(&metric, 0, 1, h)?,
            induced_christoffel(&metric, 0, -1, h)?,
        ],
    ];
    let dgam = |k: usize, l: usize, i: usize, j: usize| {
        (gam_n[k][0][l][i][j] - gam_n[k][1][l][i][j]) / (2.0 * h)
    };
    // R(∂_0, ∂_1)∂_1 = Rc^l ∂_l
    let mut rc = [0.0; 2];
    for (l, r) in rc.iter_mut().enumerate() {
        let mut s = dgam(0, l, 1, 1) - dgam(1, l, 0, 1);
        for p in 0..M {
            s += gam_c[l][0][p] * gam_c[p][1][1] - gam_c[l][1][p] * gam_c[p][0][1];
        }
        *r = s;
    }
    let g0 = metric(0, 0);
    let r0101 = g0[(0, 0)] * rc[0] + g0[(0, 1)] * rc[1];
    let det = g0.determinant();
    let k_ind = r0101 / det;

    let center = node_geometry(domain, target, &patch.jet(0, 0))?;
    let n = center.n;
    let (km, kn) = (domain.curvature(), target.curvature());
    let a2 = center.a * center.a;
    let b2 = center.b * center.b;
    let hmet = center.df.transpose() * &center.df * b2;

    let ambient = km * a2 * a2 + kn * (hmet[(0, 0)] * hmet[(1, 1)] - hmet[(0, 1)] * hmet[(1, 0)]);
    let af = &center.a_form;
    let aterm = center.inner(&af[0][0], &af[1][1]) - center.inner(&af[0][1], &af[0][1]);
    let gauss = (r0101 - ambient - aterm).abs() / det;

    // Codazzi–Ricci identity for ∇dF along (k, i) = (0, 1).
    let neighbors = [
        [
            node_geometry(domain, target, &patch.jet(1, 0))?,
            node_geometry(domain, target, &patch.jet(-1, 0))?,
        ],
        [
            node_geometry(domain, target, &patch.jet(0, 1))?,
            node_geometry(domain, target, &patch.jet(0, -1))?,
        ],
    ];
    let mut gam_jet = [[[0.0; 2]; 2]; 2];
    for l in 0..M {
        for k in 0..M {
            for i in 0..M {
                let w = [
                    center.inner(&center.hessian[k][i], &center.tangent[0]),
                    center.inner(&center.hessian[k][i], &center.tangent[1]),
                ];
                gam_jet[l][k][i] = center.ginv[(l, 0)] * w[0] + center.ginv[(l, 1)] * w[1];
            }
        }
    }
    let cov_a = |k: usize, i: usize, j: usize| -> DVector<f64> {
        let nb = &neighbors[k];
        let mut out = (&nb[0].a_form[i][j] - &nb[1].a_form[i][j]) / (2.0 * h);
        out += center.product_gamma(&center.tangent[k], &af[i][j]);
        for l in 0..M {
            out.axpy(-gam_jet[l][k][i], &af[l][j], 1.0);
            out.axpy(-gam_jet[l][k][j], &af[i][l], 1.0);
        }
        out
    };
    let mut w: Vec<DVector<f64>> = Vec::with_capacity(M);
    for j in 0..M {
        let (k, i) = (0usize, 1usize);
        let mut res = cov_a(k, i, j) - cov_a(i, k, j);
        // R_K(∂_k F, ∂_i F) ∂_j F
        let mut rk = DVector::zeros(M + n);
        rk[k] += km * a2 * if i == j { 1.0 } else { 0.0 };
        rk[i] -= km * a2 * if k == j { 1.0 } else { 0.0 };
        for al in 0..n {
            rk[M + al] +=
                kn * (hmet[(i, j)] * center.df[(al, k)] - hmet[(k, j)] * center.df[(al, i)]);
        }
        // dF(R(∂_k, ∂_i) ∂_j) = K (g_ij T_k − g_kj T_i)
        let mut rind = DVector::zeros(M + n);
        rind.axpy(k_ind * center.g[(i, j)], &center.tangent[k], 1.0);
        rind.axpy(-k_ind * center.g[(k, j)], &center.tangent[i], 1.0);
        res -= rk - rind;
        w.push(res);
    }
    let e = orthonormal_frame(&center.g)?;
    let scale = e.determinant().abs();
    let mut codazzi: f64 = 0.0;
    for c in 0..M {
        let v = &w[0] * e[(0, c)] + &w[1] * e[(1, c)];
        codazzi = codazzi.max(scale * center.inner(&v, &v).sqrt());
    }
    Ok(CurvatureResiduals { gauss, codazzi })
}

/// Mean curvature from the divergence form `Δ_g F + g^{ij} Γ_K(∂_i F, ∂_j F)`,
/// projected to the normal bundle. Independent of the velocity formula.
pub fn divergence_mean_curvature(field: &MapField, idx: usize) -> Result<(NodeGeometry, DVector<f64>)> {
    let patch = field.patch(idx, 2)?;
    let domain = field.domain();
    let target = field.target();
    let center = node_geometry(domain, target, &patch.jet(0, 0))?;
    let n = center.n;
    let h = patch.h;
    let flux = |a: isize, b: isize, dir: usize| -> Result<DVector<f64>> {
        let jet = patch.jet(a, b);
        let g = metric_from_jet(domain, target, &jet);
        let ginv = invert2(&g)?;
        let sq = g.determinant().sqrt();
        let mut q = DVector::zeros(M + n);
        for j in 0..M {
            let c = sq * ginv[(dir, j)];
            q[j] += c;
            for al in 0..n {
                q[M + al] += c * jet.df(al, j);
            }
        }
        Ok(q)
    };
    let mut lap = (flux(1, 0, 0)? - flux(-1, 0, 0)? + flux(0, 1, 1)? - flux(0, -1, 1)?) / (2.0 * h);
    lap /= center.g.determinant().sqrt();
    for i in 0..M {
        for j in 0..M {
            let gam = center.product_gamma(&center.tangent[i], &center.tangent[j]);
            lap.axpy(center.ginv[(i, j)], &gam, 1.0);
        }
    }
    let hdiv = center.project_normal(&lap);
    Ok((center, hdiv))
}

/// `‖pr(0, v) − H_div‖ / (1 + ‖H‖)` at a node.
pub fn gauge_residual_at(field: &MapField, idx: usize) -> Result<f64> {
    let (center, hdiv) = divergence_mean_curvature(field, idx)?;
    let lifted = center.project_normal(&center.lifted_velocity());
    let d = lifted - hdiv;
    Ok(center.inner(&d, &d).sqrt() / (1.0 + center.h2.sqrt()))
}

/// Maxima of the curvature residuals over a node set.
pub fn max_curvature_residuals(field: &MapField, nodes: &[usize]) -> Result<CurvatureResiduals> {
    let list: Vec<CurvatureResiduals> = nodes
        .par_iter()
        .map(|&k| curvature_residuals(field, k))
        .collect::<Result<_>>()?;
    Ok(list.iter().fold(
        CurvatureResiduals {
            gauss: 0.0,
            codazzi: 0.0,
        },
        |acc, r| CurvatureResiduals {
            gauss: acc.gauss.max(r.gauss),
            codazzi: acc.codazzi.max(r.codazzi),
        },
    ))
}

/// Maximum gauge residual over a node set.
pub fn max_gauge_residual(field: &MapField, nodes: &[usize]) -> Result<f64> {
    let list: Vec<f64> = nodes
        .par_iter()
        .map(|&k| gauge_residual_at(field, k))
        .collect::<Result<_>>()?;
    Ok(list.into_iter().fold(0.0, f64::max))
}
