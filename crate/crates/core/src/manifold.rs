//! Closed-form Riemannian data of the constant-curvature model spaces.
//!
//! Every model space is realized through conformal charts
//! `g = λ(y)² · δ` with
//!
//! * sphere of curvature `κ > 0`: two stereographic charts of the sphere of
//!   radius `R = 1/√κ`, chart 0 centered at the north pole and chart 1 at the
//!   south pole, `λ(y) = 2 / (1 + κ|y|²)`. The transition between them is the
//!   inversion `y ↦ y / (κ|y|²)`. Each chart is restricted to
//!   `|y| ≤ 1.8·R`.
//! * hyperbolic space of curvature `κ < 0`: the Poincaré ball of radius
//!   `1/√|κ|`, `λ(y) = 2 / (1 + κ|y|²)`.
//! * Euclidean space: the identity chart, `λ ≡ 1`.
//!
//! With this normalization the curvature tensor is exactly
//! `R(X,Y,Z,W) = κ(⟨X,Z⟩⟨Y,W⟩ − ⟨X,W⟩⟨Y,Z⟩)`, which is what the tests pin.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Normalized radius (in units of `1/√κ`) of each stereographic chart.
pub const SPHERE_CHART_RADIUS: f64 = 1.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ManifoldKind {
    Sphere,
    Hyperbolic,
    Euclidean,
}

impl ManifoldKind {
    pub fn name(self) -> &'static str {
        match self {
            ManifoldKind::Sphere => "sphere",
            ManifoldKind::Hyperbolic => "hyperbolic",
            ManifoldKind::Euclidean => "euclidean",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "sphere" => Some(ManifoldKind::Sphere),
            "hyperbolic" => Some(ManifoldKind::Hyperbolic),
            "euclidean" => Some(ManifoldKind::Euclidean),
            _ => None,
        }
    }
}

/// A point given by its chart and coordinates in that chart.
#[derive(Clone, Debug, PartialEq)]
pub struct ChartPoint {
    pub chart: u8,
    pub coords: Vec<f64>,
}

impl ChartPoint {
    pub fn new(chart: u8, coords: Vec<f64>) -> Self {
        Self { chart, coords }
    }

    pub fn origin(dim: usize) -> Self {
        Self::new(0, vec![0.0; dim])
    }
}

/// Christoffel symbols `Γ^k_ij`, stored as `data[(k·d + i)·d + j]`.
#[derive(Clone, Debug)]
pub struct Christoffel {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.dim + i) * self.dim + j]
    }
}

/// Fully covariant curvature tensor `R_ijkl = R(∂_i, ∂_j, ∂_k, ∂_l)`, stored
/// as `components[((i·d + j)·d + k)·d + l]`, together with the (constant)
/// sectional curvature.
#[derive(Clone, Debug)]
pub struct Riemann {
    pub dim: usize,
    pub components: Vec<f64>,
    pub sectional: f64,
}

impl Riemann {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let d = self.dim;
        self.components[((i * d + j) * d + k) * d + l]
    }

    /// Sectional curvature of the plane spanned by `x`, `y` with respect to `g`.
    pub fn sectional_of(&self, g: &DMatrix<f64>, x: &[f64], y: &[f64]) -> f64 {
        let d = self.dim;
        let mut num = 0.0;
        for i in 0..d {
            for j in 0..d {
                for k in 0..d {
                    for l in 0..d {
                        num += self.get(i, j, k, l) * x[i] * y[j] * x[k] * y[l];
                    }
                }
            }
        }
        let ip = |a: &[f64], b: &[f64]| {
            let mut s = 0.0;
            for i in 0..d {
                for j in 0..d {
                    s += g[(i, j)] * a[i] * b[j];
                }
            }
            s
        };
        num / (ip(x, x) * ip(y, y) - ip(x, y).powi(2))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelManifold {
    kind: ManifoldKind,
    dim: usize,
    curvature: f64,
}

impl fmt::Display for ModelManifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}({}, κ={})",
            self.kind.name(),
            self.dim,
            self.curvature
        )
    }
}

impl ModelManifold {
    pub fn new(kind: ManifoldKind, dim: usize, curvature: f64) -> Result<Self> {
        let key = "manifold";
        if dim == 0 {
            return Err(Error::config(key, "dimension must be at least 1"));
        }
        if !curvature.is_finite() {
            return Err(Error::config(key, "curvature must be finite"));
        }
        match kind {
            ManifoldKind::Sphere if curvature <= 0.0 => {
                Err(Error::config(key, "sphere requires curvature > 0"))
            }
            ManifoldKind::Hyperbolic if curvature >= 0.0 => {
                Err(Error::config(key, "hyperbolic space requires curvature < 0"))
            }
            ManifoldKind::Euclidean if curvature != 0.0 => {
                Err(Error::config(key, "euclidean space requires curvature = 0"))
            }
            _ => Ok(Self {
                kind,
                dim,
                curvature,
            }),
        }
    }

    pub fn sphere(dim: usize, curvature: f64) -> Result<Self> {
        Self::new(ManifoldKind::Sphere, dim, curvature)
    }

    pub fn hyperbolic(dim: usize, curvature: f64) -> Result<Self> {
        Self::new(ManifoldKind::Hyperbolic, dim, curvature)
    }

    pub fn euclidean(dim: usize) -> Result<Self> {
        Self::new(ManifoldKind::Euclidean, dim, 0.0)
    }

    pub fn kind(&self) -> ManifoldKind {
        self.kind
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Constant sectional curvature κ.
    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    /// Constant Ricci curvature `(dim − 1)·κ` on unit vectors.
    pub fn ricci(&self) -> f64 {
        (self.dim as f64 - 1.0) * self.curvature
    }

    pub fn chart_count(&self) -> usize {
        match self.kind {
            ManifoldKind::Sphere => 2,
            _ => 1,
        }
    }

    /// Length scale `1/√|κ|` (1 for Euclidean space).
    pub fn length_scale(&self) -> f64 {
        if self.curvature == 0.0 {
            1.0
        } else {
            1.0 / self.curvature.abs().sqrt()
        }
    }

    /// Largest admissible chart radius; infinite for Euclidean space.
    pub fn chart_radius(&self) -> f64 {
        match self.kind {
            ManifoldKind::Sphere => SPHERE_CHART_RADIUS * self.length_scale(),
            ManifoldKind::Hyperbolic => self.length_scale(),
            ManifoldKind::Euclidean => f64::INFINITY,
        }
    }

    /// Whether raw chart coordinates lie in the chart domain.
    pub fn coords_in_domain(&self, chart: u8, coords: &[f64]) -> bool {
        if coords.len() != self.dim || (chart as usize) >= self.chart_count() {
            return false;
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return false;
        }
        let r2: f64 = coords.iter().map(|c| c * c).sum();
        match self.kind {
            ManifoldKind::Sphere => r2 <= self.chart_radius().powi(2),
            ManifoldKind::Hyperbolic => r2 * self.curvature.abs() < 1.0,
            ManifoldKind::Euclidean => true,
        }
    }

    pub fn contains(&self, p: &ChartPoint) -> bool {
        self.coords_in_domain(p.chart, &p.coords)
    }

    pub(crate) fn domain_error(&self, chart: u8, coords: &[f64]) -> Error {
        Error::Domain {
            manifold: self.to_string(),
            chart,
            coords: coords.to_vec(),
        }
    }

    fn check(&self, p: &ChartPoint) -> Result<()> {
        if self.contains(p) {
            Ok(())
        } else {
            Err(self.domain_error(p.chart, &p.coords))
        }
    }

    /// Conformal factor λ at raw coordinates and the gradient of `ln λ`
    /// written into `grad` (length `dim`). Valid in every chart.
    #[inline]
    pub fn conformal(&self, coords: &[f64], grad: &mut [f64]) -> f64 {
        if self.kind == ManifoldKind::Euclidean {
            grad.iter_mut().for_each(|g| *g = 0.0);
            return 1.0;
        }
        let k = self.curvature;
        let r2: f64 = coords.iter().map(|c| c * c).sum();
        let denom = 1.0 + k * r2;
        for (g, c) in grad.iter_mut().zip(coords) {
            *g = -2.0 * k * c / denom;
        }
        2.0 / denom
    }

    #[inline]
    pub fn conformal_factor(&self, coords: &[f64]) -> f64 {
        if self.kind == ManifoldKind::Euclidean {
            return 1.0;
        }
        let r2: f64 = coords.iter().map(|c| c * c).sum();
        2.0 / (1.0 + self.curvature * r2)
    }

    pub fn metric_at(&self, p: &ChartPoint) -> Result<DMatrix<f64>> {
        self.check(p)?;
        let l = self.conformal_factor(&p.coords);
        Ok(DMatrix::identity(self.dim, self.dim) * (l * l))
    }

    pub fn christoffel_at(&self, p: &ChartPoint) -> Result<Christoffel> {
        self.check(p)?;
        let d = self.dim;
        let mut grad = vec![0.0; d];
        self.conformal(&p.coords, &mut grad);
        let mut data = vec![0.0; d * d * d];
        for k in 0..d {
            for i in 0..d {
                for j in 0..d {
                    let mut v = 0.0;
                    if i == k {
                        v += grad[j];
                    }
                    if j == k {
                        v += grad[i];
                    }
                    if i == j {
                        v -= grad[k];
                    }
                    data[(k * d + i) * d + j] = v;
                }
            }
        }
        Ok(Christoffel { dim: d, data })
    }

    pub fn riemann_at(&self, p: &ChartPoint) -> Result<Riemann> {
        let g = self.metric_at(p)?;
        let d = self.dim;
        let k = self.curvature;
        let mut components = vec![0.0; d * d * d * d];
        for i in 0..d {
            for j in 0..d {
                for a in 0..d {
                    for b in 0..d {
                        components[((i * d + j) * d + a) * d + b] =
                            k * (g[(i, a)] * g[(j, b)] - g[(i, b)] * g[(j, a)]);
                    }
                }
            }
        }
        Ok(Riemann {
            dim: d,
            components,
            sectional: k,
        })
    }

    /// Coordinates of `p` in `chart`.
    pub fn to_chart(&self, p: &ChartPoint, chart: u8) -> Result<ChartPoint> {
        if p.chart == chart {
            self.check(p)?;
            return Ok(p.clone());
        }
        let mut out = vec![0.0; self.dim];
        self.transfer(p.chart, &p.coords, chart, &mut out)?;
        Ok(ChartPoint::new(chart, out))
    }

    /// Coordinates of `p` in the other chart of a two-chart atlas.
    pub fn transition(&self, p: &ChartPoint) -> Result<ChartPoint> {
        if self.kind != ManifoldKind::Sphere {
            return Err(self.domain_error(1, &p.coords));
        }
        self.to_chart(p, 1 - p.chart)
    }

    /// Slice-level chart change used by the field kernels. Fails with a
    /// domain error when the image is not inside the destination chart.
    #[inline]
    pub fn transfer(&self, from: u8, coords: &[f64], to: u8, out: &mut [f64]) -> Result<()> {
        if from == to {
            out.copy_from_slice(coords);
        } else {
            if self.kind != ManifoldKind::Sphere || to > 1 {
                return Err(self.domain_error(to, coords));
            }
            let r2: f64 = coords.iter().map(|c| c * c).sum();
            if r2 == 0.0 {
                return Err(self.domain_error(to, coords));
            }
            let s = 1.0 / (self.curvature * r2);
            for (o, c) in out.iter_mut().zip(coords) {
                *o = c * s;
            }
        }
        if self.coords_in_domain(to, out) {
            Ok(())
        } else {
            Err(self.domain_error(to, out))
        }
    }

    /// Ambient coordinates of a sphere point on the radius-`1/√κ` sphere in
    /// `R^{dim+1}`.
    pub fn sphere_embedding(&self, chart: u8, coords: &[f64]) -> Vec<f64> {
        let r = self.length_scale();
        let s = 1.0 / r;
        let q2: f64 = coords.iter().map(|c| (c * s).powi(2)).sum();
        let den = 1.0 + q2;
        let mut out: Vec<f64> = coords.iter().map(|c| r * 2.0 * c * s / den).collect();
        let z = r * (1.0 - q2) / den;
        out.push(if chart == 0 { z } else { -z });
        out
    }

    /// Geodesic distance, closed form per model space.
    pub fn distance(&self, p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
        self.check(p)?;
        self.check(q)?;
        Ok(self.distance_raw(p.chart, &p.coords, q.chart, &q.coords))
    }

    pub(crate) fn distance_raw(&self, pc: u8, p: &[f64], qc: u8, q: &[f64]) -> f64 {
        match self.kind {
            ManifoldKind::Euclidean => p
                .iter()
                .zip(q)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt(),
            ManifoldKind::Sphere => {
                if pc == qc && p == q {
                    return 0.0;
                }
                let a = self.sphere_embedding(pc, p);
                let b = self.sphere_embedding(qc, q);
                let diff = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                let sum = a.iter().zip(&b).map(|(x, y)| (x + y).powi(2)).sum::<f64>();
                let angle = 2.0 * diff.sqrt().atan2(sum.sqrt());
                (angle * self.length_scale()).min(PI * self.length_scale())
            }
            ManifoldKind::Hyperbolic => {
                let k = self.curvature.abs();
                let d2: f64 = p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum();
                let p2: f64 = p.iter().map(|a| a * a).sum();
                let q2: f64 = q.iter().map(|a| a * a).sum();
                let u = (k * d2 / ((1.0 - k * p2) * (1.0 - k * q2))).sqrt();
                2.0 * u.asinh() / k.sqrt()
            }
        }
    }

    /// Inverse of the generalized sine `sn_κ`, i.e. the geodesic radius
    /// whose circle has circumference `2π·x`.
    pub fn inverse_sn(&self, x: f64) -> f64 {
        let k = self.curvature;
        if k > 0.0 {
            (k.sqrt() * x).clamp(-1.0, 1.0).asin() / k.sqrt()
        } else if k < 0.0 {
            (k.abs().sqrt() * x).asinh() / k.abs().sqrt()
        } else {
            x
        }
    }

    /// Generalized sine `sn_κ(r)` and its derivative `cs_κ(r)`.
    pub fn sn_cs(&self, r: f64) -> (f64, f64) {
        let k = self.curvature;
        if k > 0.0 {
            let s = k.sqrt();
            ((s * r).sin() / s, (s * r).cos())
        } else if k < 0.0 {
            let s = k.abs().sqrt();
            ((s * r).sinh() / s, (s * r).cosh())
        } else {
            (r, 1.0)
        }
    }

    /// Chart-0 coordinates of the point at geodesic distance `radius` from
    /// the chart origin in the unit direction `dir`.
    pub fn from_polar(&self, radius: f64, dir: &[f64]) -> Vec<f64> {
        let k = self.curvature;
        let r = if k > 0.0 {
            (k.sqrt() * radius / 2.0).tan() / k.sqrt()
        } else if k < 0.0 {
            (k.abs().sqrt() * radius / 2.0).tanh() / k.abs().sqrt()
        } else {
            radius
        };
        dir.iter().map(|d| d * r).collect()
    }

    /// Geodesic distance from the chart-0 origin to a chart-0 point.
    pub fn polar_radius(&self, coords: &[f64]) -> f64 {
        let r: f64 = coords.iter().map(|c| c * c).sum::<f64>().sqrt();
        let k = self.curvature;
        if k > 0.0 {
            2.0 * (k.sqrt() * r).atan() / k.sqrt()
        } else if k < 0.0 {
            2.0 * (k.abs().sqrt() * r).atanh() / k.abs().sqrt()
        } else {
            r
        }
    }
}

/// Outcome of checking the curvature hypotheses
/// `sec_M > −σ`, `Ric_M ≥ (m−1)σ ≥ (m−1)·sec_N ≥ −μ`.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisCheck {
    pub sigma: f64,
    pub mu: f64,
    pub holds: bool,
    /// Smallest slack among the chained inequalities (negative when violated).
    pub margin: f64,
    /// Individual slacks, in the order they appear in the chain.
    pub slacks: [f64; 4],
}

pub fn check_hypotheses(
    domain: &ModelManifold,
    target: &ModelManifold,
    sigma: f64,
    mu: f64,
) -> Result<HypothesisCheck> {
    if domain.dim() < 2 {
        return Err(Error::Hypothesis(format!(
            "domain dimension must be at least 2, got {}",
            domain.dim()
        )));
    }
    if !(sigma > 0.0 && sigma.is_finite()) || !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::Hypothesis(format!(
            "sigma and mu must be positive, got sigma={sigma}, mu={mu}"
        )));
    }
    let m1 = domain.dim() as f64 - 1.0;
    // A 1-dimensional target has no 2-planes; its sectional bound is vacuous.
    let sec_n = if target.dim() >= 2 { target.curvature() } else { 0.0 };
    let slacks = [
        domain.curvature() + sigma,
        domain.ricci() - m1 * sigma,
        m1 * sigma - m1 * sec_n,
        m1 * sec_n + mu,
    ];
    let holds = slacks[0] > 0.0 && slacks[1..].iter().all(|s| *s >= 0.0);
    let margin = slacks.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(HypothesisCheck {
        sigma,
        mu,
        holds,
        margin,
        slacks,
    })
}
