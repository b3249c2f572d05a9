//! Reduced flow for rotationally equivariant maps `(θ, φ) ↦ (ρ(θ), φ)`
//! from a round sphere to a 2D model space.
//!
//! With `S = sn_M(θ)` and `T = sn_N(ρ)` the induced metric is
//! `(1 + ρ'²) dθ² + (S² + T²) dφ²`, and the graph-gauge velocity reduces to
//!
//! ```text
//! ∂_t ρ = ρ'' / (1 + ρ'²) + (S S' ρ' − T T') / (S² + T²)
//! ```
//!
//! with both endpoints held fixed. The singular values are `|ρ'|` (radial)
//! and `T / S` (angular).

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::flow::{Controls, Termination, CURVATURE_STEP_LIMIT};
use crate::manifold::{ManifoldKind, ModelManifold};
use crate::monitor::{assert_suite, MonitorReport, MonitorSample, MonitorSettings};

#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    /// `ρ` at `θ_i = i · dθ`, `i = 0..=cells`.
    pub rho: Vec<f64>,
    pub dtheta: f64,
}

impl Profile {
    /// Samples `rho_of(θ)` on `cells + 1` uniform nodes of `[0, π R_M]`.
    pub fn from_fn(domain: &ModelManifold, cells: usize, rho_of: impl Fn(f64) -> f64) -> Result<Self> {
        check_domain(domain)?;
        if cells < 4 {
            return Err(Error::config("resolution", "the reduced profile needs at least 4 cells"));
        }
        let len = std::f64::consts::PI * domain.length_scale();
        let dtheta = len / cells as f64;
        let mut rho: Vec<f64> = (0..=cells).map(|i| rho_of(i as f64 * dtheta)).collect();
        rho[0] = 0.0;
        if rho.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::Numerical("profile values must be finite and nonnegative".into()));
        }
        Ok(Self { rho, dtheta })
    }

    /// Equivariant contraction `sn_N(ρ) = c · sn_M(θ)`.
    pub fn dilation(domain: &ModelManifold, target: &ModelManifold, cells: usize, c: f64) -> Result<Self> {
        if target.kind() == ManifoldKind::Sphere && c * domain.length_scale() > target.length_scale() {
            return Err(Error::config(
                "dilation",
                "the contracted image does not fit in the target sphere",
            ));
        }
        Self::from_fn(domain, cells, |th| target.inverse_sn(c * domain.sn_cs(th).0).max(0.0))
    }

    pub fn cells(&self) -> usize {
        self.rho.len() - 1
    }

    pub fn theta(&self, i: usize) -> f64 {
        i as f64 * self.dtheta
    }

    /// Cubic interpolation of nodal data at `θ`.
    pub fn interpolate(&self, data: &[f64], theta: f64) -> f64 {
        let n = data.len();
        let s = (theta / self.dtheta).clamp(0.0, (n - 1) as f64);
        let base = (s.floor() as isize - 1).clamp(0, n as isize - 4) as usize;
        let mut acc = 0.0;
        for a in 0..4 {
            let xa = (base + a) as f64;
            let mut w = 1.0;
            for b in 0..4 {
                if a != b {
                    let xb = (base + b) as f64;
                    w *= (s - xb) / (xa - xb);
                }
            }
            acc += w * data[base + a];
        }
        acc
    }

    /// Second-order `ρ'` including one-sided values at the endpoints.
    pub fn derivative(&self) -> Vec<f64> {
        let n = self.rho.len();
        let h = self.dtheta;
        let r = &self.rho;
        (0..n)
            .map(|i| {
                if i == 0 {
                    (-3.0 * r[0] + 4.0 * r[1] - r[2]) / (2.0 * h)
                } else if i == n - 1 {
                    (3.0 * r[n - 1] - 4.0 * r[n - 2] + r[n - 3]) / (2.0 * h)
                } else {
                    (r[i + 1] - r[i - 1]) / (2.0 * h)
                }
            })
            .collect()
    }
}

fn check_domain(domain: &ModelManifold) -> Result<()> {
    if domain.kind() != ManifoldKind::Sphere || domain.dim() != 2 {
        return Err(Error::config(
            "domain_kind",
            "the reduced solver needs a round 2-sphere as domain",
        ));
    }
    Ok(())
}

/// Pointwise reduced quantities at an interior node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReducedPoint {
    pub velocity: f64,
    pub h2: f64,
    pub a2: f64,
    pub lambda_radial: f64,
    pub lambda_angular: f64,
    /// `dθ/dt` of a point moving with the normal velocity.
    pub drift: f64,
}

fn reduced_point(
    domain: &ModelManifold,
    target: &ModelManifold,
    theta: f64,
    rho: f64,
    d1: f64,
    d2: f64,
) -> ReducedPoint {
    let (s, sp) = domain.sn_cs(theta);
    let (t, tp) = target.sn_cs(rho);
    let q = 1.0 + d1 * d1;
    let w = s * s + t * t;
    let first = (s * sp * d1 - t * tp) / w;
    let velocity = d2 / q + first;
    let mixed = s * d1 * tp - t * sp;
    let a2 = d2 * d2 / (q * q * q) + 2.0 * mixed * mixed / (w * w * q) + first * first / q;
    ReducedPoint {
        velocity,
        h2: velocity * velocity / q,
        a2,
        lambda_radial: d1.abs(),
        lambda_angular: t / s,
        drift: -velocity * d1 / q,
    }
}

/// Reduced velocity `∂_t ρ` at every node; zero at the pinned endpoints.
pub fn reduced_rhs(profile: &Profile, domain: &ModelManifold, target: &ModelManifold) -> Vec<f64> {
    let n = profile.rho.len();
    let h = profile.dtheta;
    let r = &profile.rho;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        let d1 = (r[i + 1] - r[i - 1]) / (2.0 * h);
        let d2 = (r[i + 1] - 2.0 * r[i] + r[i - 1]) / (h * h);
        out[i] = reduced_point(domain, target, profile.theta(i), r[i], d1, d2).velocity;
    }
    out
}

fn interior_points(profile: &Profile, domain: &ModelManifold, target: &ModelManifold) -> Vec<ReducedPoint> {
    let n = profile.rho.len();
    let h = profile.dtheta;
    let r = &profile.rho;
    (1..n - 1)
        .map(|i| {
            let d1 = (r[i + 1] - r[i - 1]) / (2.0 * h);
            let d2 = (r[i + 1] - 2.0 * r[i] + r[i - 1]) / (h * h);
            reduced_point(domain, target, profile.theta(i), r[i], d1, d2)
        })
        .collect()
}

#[derive(Clone, Debug)]
struct Tracer {
    theta0: f64,
    rho0: f64,
    theta: f64,
    integral: f64,
}

/// Explicit midpoint integrator for the reduced equation.
#[derive(Clone, Debug)]
pub struct ReducedSolver {
    pub domain: ModelManifold,
    pub target: ModelManifold,
    pub profile: Profile,
    pub t: f64,
    pub steps: u64,
    pub cfl_safety: f64,
    kappa: Option<f64>,
    tracers: Vec<Tracer>,
}

impl ReducedSolver {
    pub fn new(domain: ModelManifold, target: ModelManifold, profile: Profile, cfl_safety: f64) -> Result<Self> {
        check_domain(&domain)?;
        if target.dim() != 2 {
            return Err(Error::config("target_dim", "the reduced solver needs a 2D target"));
        }
        let cells = profile.cells();
        let tracers = (1..16)
            .map(|k| {
                let i = k * cells / 16;
                Tracer {
                    theta0: profile.theta(i),
                    rho0: profile.rho[i],
                    theta: profile.theta(i),
                    integral: 0.0,
                }
            })
            .collect();
        let mut s = Self {
            domain,
            target,
            profile,
            t: 0.0,
            steps: 0,
            cfl_safety,
            kappa: None,
            tracers,
        };
        s.kappa = s.choose_kappa();
        Ok(s)
    }

    fn choose_kappa(&self) -> Option<f64> {
        let pts = self.all_points();
        let ratio = |l: f64| (1.0 - l * l) / (1.0 + l * l);
        let eps0 = pts
            .iter()
            .map(|p| ratio(p.lambda_radial.max(p.lambda_angular)))
            .fold(f64::INFINITY, f64::min);
        if !(eps0 > 0.0) {
            return None;
        }
        let max_h2 = pts.iter().map(|p| p.h2).fold(0.0, f64::max);
        let mut kappa = 0.5 * eps0 * eps0 / (2.0 * (1.0 + max_h2));
        for p in &pts {
            if p.h2 > 0.0 {
                let top = (-ratio(p.lambda_radial)).max(-ratio(p.lambda_angular));
                let bound = (-top - 0.5 * eps0) / p.h2;
                if bound > 0.0 {
                    kappa = kappa.min(bound);
                }
            }
        }
        Some(kappa)
    }

    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    /// Interior points plus the endpoints, where `λ` comes from one-sided
    /// differences and curvature terms are extrapolated.
    fn all_points(&self) -> Vec<ReducedPoint> {
        let mut pts = interior_points(&self.profile, &self.domain, &self.target);
        let d = self.profile.derivative();
        let n = d.len();
        for (i, near) in [(0, 0), (n - 1, pts.len() - 1)] {
            let lam = d[i].abs();
            let mut p = pts[near];
            p.lambda_radial = lam;
            p.lambda_angular = lam;
            p.velocity = 0.0;
            p.drift = 0.0;
            pts.push(p);
        }
        pts
    }

    /// `cfl · dθ²`; the leading coefficient `1 / (1 + ρ'²)` never exceeds 1.
    pub fn dt_bound(&self) -> f64 {
        self.cfl_safety * self.profile.dtheta.powi(2)
    }

    fn step(&mut self, dt: f64) -> Result<()> {
        let v1 = reduced_rhs(&self.profile, &self.domain, &self.target);
        let pts = interior_points(&self.profile, &self.domain, &self.target);
        let mut half = self.profile.clone();
        for (r, v) in half.rho.iter_mut().zip(&v1) {
            *r += 0.5 * dt * v;
        }
        let v2 = reduced_rhs(&half, &self.domain, &self.target);
        for (r, v) in self.profile.rho.iter_mut().zip(&v2) {
            *r += dt * v;
        }
        if self.profile.rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::Numerical(format!("reduced profile blew up at t = {}", self.t)));
        }
        // tracers: interior data padded with zero rates at the endpoints
        let mut drift = vec![0.0];
        drift.extend(pts.iter().map(|p| p.drift));
        drift.push(0.0);
        let mut hn = vec![pts[0].h2.sqrt()];
        hn.extend(pts.iter().map(|p| p.h2.sqrt()));
        hn.push(pts[pts.len() - 1].h2.sqrt());
        let len = std::f64::consts::PI * self.domain.length_scale();
        let profile = &self.profile;
        for tr in &mut self.tracers {
            tr.integral += profile.interpolate(&hn, tr.theta).max(0.0) * dt;
            tr.theta = (tr.theta + dt * profile.interpolate(&drift, tr.theta)).clamp(0.0, len);
        }
        self.t += dt;
        self.steps += 1;
        Ok(())
    }

    /// Integrates to exactly `t_end`.
    pub fn advance_to(&mut self, t_end: f64) -> Result<()> {
        let bound = self.dt_bound();
        while self.t < t_end {
            let dt = bound.min(t_end - self.t);
            if dt <= 0.0 {
                break;
            }
            self.step(dt)?;
            if (t_end - self.t) < 1e-15 * t_end.abs().max(1.0) {
                self.t = t_end;
            }
        }
        Ok(())
    }

    /// Largest `max ‖A‖² · dt` a step of the bound would take.
    fn curvature_step(&self) -> f64 {
        let a2 = interior_points(&self.profile, &self.domain, &self.target)
            .iter()
            .map(|p| p.a2)
            .fold(0.0, f64::max);
        a2 * self.dt_bound()
    }

    pub fn sample(&self) -> MonitorSample {
        let pts = self.all_points();
        let ratio = |l: f64| (1.0 - l * l) / (1.0 + l * l);
        let mut s = MonitorSample {
            t: self.t,
            eps_min: f64::INFINITY,
            lambda_max: 0.0,
            max_h2: 0.0,
            max_a2: 0.0,
            max_logdet: f64::NEG_INFINITY,
            p_max_eig: f64::NEG_INFINITY,
            image_diameter: 0.0,
            displacement_budget_residual: f64::NEG_INFINITY,
        };
        let kappa = self.kappa.unwrap_or(0.0);
        for p in &pts {
            let lmax = p.lambda_radial.max(p.lambda_angular);
            s.lambda_max = s.lambda_max.max(lmax);
            s.eps_min = s.eps_min.min(ratio(lmax));
            s.max_h2 = s.max_h2.max(p.h2);
            s.max_a2 = s.max_a2.max(p.a2);
            let ld = (p.lambda_radial * p.lambda_radial).ln_1p()
                + (p.lambda_angular * p.lambda_angular).ln_1p();
            s.max_logdet = s.max_logdet.max(ld);
            // H lies along the normal paired with the radial singular value
            let p_radial = kappa * p.h2 - ratio(p.lambda_radial);
            let p_angular = -ratio(p.lambda_angular);
            s.p_max_eig = s.p_max_eig.max(p_radial.max(p_angular));
        }
        let rmax = self.profile.rho.iter().copied().fold(0.0, f64::max);
        s.image_diameter = match self.target.kind() {
            ManifoldKind::Sphere => (2.0 * rmax).min(std::f64::consts::PI * self.target.length_scale()),
            _ => 2.0 * rmax,
        };
        for tr in &self.tracers {
            let rho = self.profile.interpolate(&self.profile.rho, tr.theta);
            let dm = tr.theta - tr.theta0;
            let dn = rho - tr.rho0;
            s.displacement_budget_residual = s
                .displacement_budget_residual
                .max((dm * dm + dn * dn).sqrt() - tr.integral);
        }
        if !s.displacement_budget_residual.is_finite() {
            s.displacement_budget_residual = 0.0;
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ReducedOutcome {
    /// Time series and verdicts, in the same form as the full solver's.
    pub report: MonitorReport,
    pub profile: Profile,
    pub termination: Termination,
    pub steps: u64,
}

/// Runs the reduced flow with the same termination rules as the full
/// solver: diameter below `diam_tol`, `t ≥ t_max`, the step cap, or a
/// suspected singularity. Unset tolerances default to `5 dθ²` and
/// `10 max‖H‖²(0) + 1`.
pub fn run_reduced(
    domain: &ModelManifold,
    target: &ModelManifold,
    profile: Profile,
    controls: &Controls,
    settings: &MonitorSettings,
) -> Result<ReducedOutcome> {
    let mut solver = ReducedSolver::new(domain.clone(), target.clone(), profile, controls.cfl_safety)?;
    let mut samples = vec![solver.sample()];
    let mut settings = settings.clone();
    settings.tol_disp.get_or_insert(5.0 * solver.profile.dtheta.powi(2));
    settings.h2_ceiling.get_or_insert(10.0 * samples[0].max_h2 + 1.0);
    let stride = controls.monitor_stride.max(1) as u64;
    let termination = loop {
        let last = samples.last().expect("non-empty");
        if last.image_diameter < controls.diam_tol {
            break Termination::Converged;
        }
        if solver.t >= controls.t_max {
            break Termination::TimeLimit;
        }
        if controls.max_steps.is_some_and(|m| solver.steps >= m) {
            break Termination::StepLimit;
        }
        if solver.curvature_step() > CURVATURE_STEP_LIMIT {
            warn!("reduced run: singularity suspected at t = {}", solver.t);
            break Termination::SingularitySuspected;
        }
        let bound = solver.dt_bound();
        let dt = controls.dt.map_or(bound, |d| d.min(bound)).min(controls.t_max - solver.t);
        if let Err(e) = solver.step(dt) {
            warn!("reduced run stopped: {e}");
            break Termination::SingularitySuspected;
        }
        if solver.steps % stride == 0 || solver.t >= controls.t_max {
            samples.push(solver.sample());
        }
    };
    if samples.last().is_some_and(|s| s.t != solver.t) {
        samples.push(solver.sample());
    }
    debug!("reduced run finished at t = {} after {} steps", solver.t, solver.steps);
    let mut report = MonitorReport {
        samples,
        verdicts: Vec::new(),
        kappa_used: solver.kappa,
        settings,
        frame_check_max: 0.0,
        logdet_route_gap: 0.0,
        p_null_gap: 0.0,
    };
    report.verdicts = assert_suite(&report);
    Ok(ReducedOutcome {
        report,
        profile: solver.profile,
        termination,
        steps: solver.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s2() -> ModelManifold {
        ModelManifold::sphere(2, 1.0).unwrap()
    }

    #[test]
    fn stationary_profiles() {
        let s = s2();
        let zero = Profile::from_fn(&s, 100, |_| 0.0).unwrap();
        assert!(reduced_rhs(&zero, &s, &s).iter().all(|v| *v == 0.0));
        let id = Profile::from_fn(&s, 100, |t| t).unwrap();
        let v = reduced_rhs(&id, &s, &s);
        assert!(v.iter().all(|x| x.abs() < 1e-12), "{:?}", v.iter().fold(0.0f64, |a, b| a.max(b.abs())));
    }

    #[test]
    fn zero_profile_converges_immediately() {
        let s = s2();
        let zero = Profile::from_fn(&s, 100, |_| 0.0).unwrap();
        let out = run_reduced(&s, &s, zero, &Controls::default(), &MonitorSettings::default()).unwrap();
        assert_eq!(out.termination, Termination::Converged);
        assert_eq!(out.steps, 0);
        assert!(out.report.all_passed());
    }

    #[test]
    fn dilation_profile_values() {
        let s = s2();
        let p = Profile::dilation(&s, &s, 400, 0.5).unwrap();
        let solver = ReducedSolver::new(s.clone(), s.clone(), p, 0.2).unwrap();
        let smp = solver.sample();
        assert!((smp.lambda_max - 0.5).abs() < 1e-5);
        assert!((smp.eps_min - 0.6).abs() < 1e-5);
        assert!((smp.image_diameter - std::f64::consts::PI / 3.0).abs() < 1e-4);
        assert!(smp.p_max_eig < -0.3);
    }

    #[test]
    fn dilation_contracts_monotonically() {
        let s = s2();
        let p = Profile::dilation(&s, &s, 100, 0.5).unwrap();
        let controls = Controls {
            t_max: 1.0,
            monitor_stride: 25,
            ..Controls::default()
        };
        let out = run_reduced(&s, &s, p, &controls, &MonitorSettings::default()).unwrap();
        for w in out.report.samples.windows(2) {
            assert!(w[1].image_diameter < w[0].image_diameter);
            assert!(w[1].eps_min >= w[0].eps_min);
        }
    }

    #[test]
    fn interpolation_reproduces_cubics() {
        let s = s2();
        let p = Profile::from_fn(&s, 50, |t| t).unwrap();
        let data: Vec<f64> = (0..=50).map(|i| (p.theta(i)).powi(3) - p.theta(i)).collect();
        for th in [0.0, 0.013, 1.0, 3.1] {
            assert!((p.interpolate(&data, th) - (th.powi(3) - th)).abs() < 1e-12);
        }
    }
}
