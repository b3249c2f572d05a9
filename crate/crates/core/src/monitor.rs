//! Runtime monitors for the quantities the length-decreasing theory
//! controls, and the pass/fail suite built on their time series.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::MapField;
use crate::flow::RhsField;
use crate::frames::{frame_formula_residual, s_tensor_values, singular_decompose};
use crate::geometry::{frame_components, node_geometry, M};
use crate::manifold::{ChartPoint, ManifoldKind};

/// `P` eigenvalues above this trigger the null-direction identity check.
pub const P_NEAR_ZERO: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorSettings {
    pub tol_eps: f64,
    /// Allowed growth of `max_logdet` per unit time.
    pub tol_logdet: f64,
    /// Defaults to `5 h²`.
    pub tol_disp: Option<f64>,
    /// Defaults to `10 · max_H2(0) + 1`.
    pub h2_ceiling: Option<f64>,
    pub diam_tol: f64,
    /// Approximate number of tracked particles for the displacement budget.
    pub particles: usize,
}

impl Default for MonitorSettings {
    fn default() -> Self {
        Self {
            tol_eps: 1e-3,
            tol_logdet: 1e-6,
            tol_disp: None,
            h2_ceiling: None,
            diam_tol: 1e-3,
            particles: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorSample {
    pub t: f64,
    pub eps_min: f64,
    pub lambda_max: f64,
    pub max_h2: f64,
    pub max_a2: f64,
    pub max_logdet: f64,
    pub p_max_eig: f64,
    pub image_diameter: f64,
    pub displacement_budget_residual: f64,
}

impl MonitorSample {
    /// Column names in output order.
    pub const COLUMNS: [&'static str; 9] = [
        "t",
        "eps_min",
        "lambda_max",
        "max_H2",
        "max_A2",
        "max_logdet",
        "P_max_eig",
        "image_diameter",
        "displacement_budget_residual",
    ];

    pub fn values(&self) -> [f64; 9] {
        [
            self.t,
            self.eps_min,
            self.lambda_max,
            self.max_h2,
            self.max_a2,
            self.max_logdet,
            self.p_max_eig,
            self.image_diameter,
            self.displacement_budget_residual,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VerdictStatus {
    Pass,
    Fail,
    Disabled,
}

impl VerdictStatus {
    pub fn name(self) -> &'static str {
        match self {
            VerdictStatus::Pass => "pass",
            VerdictStatus::Fail => "fail",
            VerdictStatus::Disabled => "disabled",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Verdict {
    pub name: &'static str,
    pub status: VerdictStatus,
    pub first_violation: Option<f64>,
}

impl Verdict {
    pub fn passed(&self) -> bool {
        self.status != VerdictStatus::Fail
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MonitorReport {
    pub samples: Vec<MonitorSample>,
    pub verdicts: Vec<Verdict>,
    /// `None` when the initial map is not strictly length decreasing.
    pub kappa_used: Option<f64>,
    /// Settings with every default resolved.
    pub settings: MonitorSettings,
    /// Largest deviation between closed-form and directly evaluated
    /// `s`-tensor values on the checked nodes.
    pub frame_check_max: f64,
    /// Largest gap between the singular-value and determinant routes to
    /// `max_logdet`.
    pub logdet_route_gap: f64,
    /// Largest `|κθ(η,η) + s⊥(η,η) − λ_P|` at near-null `P` directions.
    pub p_null_gap: f64,
}

impl MonitorReport {
    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(Verdict::passed)
    }
}

/// Per-node invariants feeding one sample.
#[derive(Clone, Debug)]
pub struct NodeStats {
    pub node: usize,
    pub lambdas: Vec<f64>,
    pub eps_node: f64,
    pub logdet: f64,
    /// `ln(det g / det g_M)`.
    pub logdet_direct: f64,
    pub h2: f64,
    pub a2: f64,
    pub h_frame: Vec<f64>,
    pub s_perp: Vec<f64>,
    pub frame_residual: Option<f64>,
}

/// Invariants at every owned node. Frames are checked against the closed
/// forms at every node in debug builds and at `check_every`-th nodes
/// otherwise.
pub fn node_stats(field: &MapField, check_every: usize) -> Result<Vec<NodeStats>> {
    let domain = field.domain();
    let target = field.target();
    let owned = field.grid().owned();
    owned
        .par_iter()
        .enumerate()
        .map(|(pos, &k)| {
            let geom = node_geometry(domain, target, &field.jet(k)?)?;
            let (gm, gn) = geom.metrics();
            let sd = singular_decompose(&gm, &gn, &geom.df)?;
            let sv = s_tensor_values(&sd);
            let fc = frame_components(&geom, &sd);
            let check = cfg!(debug_assertions) || pos % check_every.max(1) == 0;
            let frame_residual = check.then(|| frame_formula_residual(&sd, &gm, &gn));
            let logdet_direct = (geom.g.determinant() / gm.determinant()).ln();
            Ok(NodeStats {
                node: k,
                eps_node: sv.eps_node,
                logdet: sd.log_det(),
                logdet_direct,
                lambdas: sd.lambdas,
                h2: geom.h2,
                a2: geom.a2,
                h_frame: fc.h,
                s_perp: sv.normal,
                frame_residual,
            })
        })
        .collect()
}

/// Largest eigenvalue of `κ H Hᵀ + diag(s⊥)` and its unit eigenvector.
fn p_tensor_top(kappa: f64, s: &NodeStats) -> (f64, Vec<f64>) {
    let n = s.s_perp.len();
    let p = DMatrix::from_fn(n, n, |a, b| {
        kappa * s.h_frame[a] * s.h_frame[b] + if a == b { s.s_perp[a] } else { 0.0 }
    });
    let eig = SymmetricEigen::new(p);
    let mut best = 0;
    for i in 1..n {
        if eig.eigenvalues[i] > eig.eigenvalues[best] {
            best = i;
        }
    }
    (
        eig.eigenvalues[best],
        eig.eigenvectors.column(best).iter().copied().collect(),
    )
}

/// `κ = min(ε₀² / (2m(1 + max‖H‖²)), min_x (−max s⊥ − ε₀/2) / ‖H‖²)`, or
/// `None` when `ε₀ ≤ 0`.
pub fn choose_kappa(stats: &[NodeStats]) -> Option<f64> {
    let eps0 = stats.iter().map(|s| s.eps_node).fold(f64::INFINITY, f64::min);
    if !(eps0 > 0.0) {
        return None;
    }
    let max_h2 = stats.iter().map(|s| s.h2).fold(0.0, f64::max);
    let mut kappa = 0.5 * eps0 * eps0 / (M as f64 * (1.0 + max_h2));
    for s in stats {
        if s.h2 > 0.0 {
            let top = s.s_perp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let bound = (-top - 0.5 * eps0) / s.h2;
            if bound > 0.0 {
                kappa = kappa.min(bound);
            }
        }
    }
    Some(kappa)
}

/// Reduces node statistics to a sample (diameter and displacement are
/// filled by the caller).
pub fn reduce_stats(t: f64, stats: &[NodeStats], kappa: Option<f64>) -> (MonitorSample, SampleChecks) {
    let mut s = MonitorSample {
        t,
        eps_min: f64::INFINITY,
        lambda_max: 0.0,
        max_h2: 0.0,
        max_a2: 0.0,
        max_logdet: f64::NEG_INFINITY,
        p_max_eig: f64::NEG_INFINITY,
        image_diameter: 0.0,
        displacement_budget_residual: 0.0,
    };
    let mut checks = SampleChecks::default();
    let mut argmax = None;
    for st in stats {
        s.eps_min = s.eps_min.min(st.eps_node);
        s.lambda_max = s.lambda_max.max(st.lambdas.last().copied().unwrap_or(0.0));
        s.max_h2 = s.max_h2.max(st.h2);
        s.max_a2 = s.max_a2.max(st.a2);
        if st.logdet > s.max_logdet {
            s.max_logdet = st.logdet;
            argmax = Some(st);
        }
        let (top, eta) = p_tensor_top(kappa.unwrap_or(0.0), st);
        s.p_max_eig = s.p_max_eig.max(top);
        if top > -P_NEAR_ZERO {
            let k = kappa.unwrap_or(0.0);
            let theta: f64 = eta.iter().zip(&st.h_frame).map(|(e, h)| e * h).sum();
            let sp: f64 = eta.iter().zip(&st.s_perp).map(|(e, v)| e * e * v).sum();
            checks.p_null_gap = checks.p_null_gap.max((k * theta * theta + sp - top).abs());
        }
        if let Some(r) = st.frame_residual {
            checks.frame_check_max = checks.frame_check_max.max(r);
        }
    }
    if let Some(st) = argmax {
        checks.logdet_route_gap = (st.logdet - st.logdet_direct).abs();
    }
    (s, checks)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SampleChecks {
    pub frame_check_max: f64,
    pub logdet_route_gap: f64,
    pub p_null_gap: f64,
}

fn hyperboloid(k: f64, y: &[f64]) -> Vec<f64> {
    let s = k.abs().sqrt();
    let u2: f64 = y.iter().map(|v| v * v * s * s).sum();
    let d = 1.0 - u2;
    let mut p = Vec::with_capacity(y.len() + 1);
    p.push((1.0 + u2) / d);
    p.extend(y.iter().map(|v| 2.0 * v * s / d));
    p
}

/// Exact diameter of the image of the owned nodes.
pub fn image_diameter(field: &MapField) -> f64 {
    let target = field.target();
    let owned = field.grid().owned();
    let kind = target.kind();
    let pts: Vec<Vec<f64>> = owned
        .iter()
        .map(|&k| match kind {
            ManifoldKind::Sphere => target.sphere_embedding(field.chart(k), field.coords(k)),
            ManifoldKind::Hyperbolic => hyperboloid(target.curvature(), field.coords(k)),
            ManifoldKind::Euclidean => field.coords(k).to_vec(),
        })
        .collect();
    // Each score is increasing in the geodesic distance.
    let score = |p: &[f64], q: &[f64]| -> f64 {
        match kind {
            ManifoldKind::Hyperbolic => {
                p[0] * q[0] - p[1..].iter().zip(&q[1..]).map(|(a, b)| a * b).sum::<f64>()
            }
            _ => p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum(),
        }
    };
    let best: Vec<(f64, usize, usize)> = (0..pts.len())
        .into_par_iter()
        .map(|i| {
            let mut b = (f64::NEG_INFINITY, i, i);
            for j in i + 1..pts.len() {
                let s = score(&pts[i], &pts[j]);
                if s > b.0 {
                    b = (s, i, j);
                }
            }
            b
        })
        .collect();
    let top = best
        .into_iter()
        .fold((f64::NEG_INFINITY, 0, 0), |a, b| if b.0 > a.0 { b } else { a });
    if top.1 == top.2 {
        return 0.0;
    }
    let (i, j) = (owned[top.1], owned[top.2]);
    target.distance_raw(field.chart(i), field.coords(i), field.chart(j), field.coords(j))
}

#[derive(Clone, Debug)]
struct Particle {
    chart: u8,
    x: [f64; 2],
    start_domain: ChartPoint,
    start_target: ChartPoint,
    integral: f64,
}

/// Points of `M` moved with the normal velocity, so that their image in
/// `M × N` traces a curve of speed `‖H‖`.
#[derive(Clone, Debug)]
pub struct ParticleTracker {
    particles: Vec<Particle>,
}

const PARTICLE_STENCIL: usize = 4;

impl ParticleTracker {
    pub fn new(field: &MapField, count: usize) -> Self {
        let owned = field.grid().owned();
        let stride = (owned.len() / count.max(1)).max(1);
        let particles = owned
            .iter()
            .step_by(stride)
            .map(|&k| {
                let p = field.grid().point(k);
                Particle {
                    chart: p.chart,
                    x: field.grid().coords(k),
                    start_domain: p,
                    start_target: field.value(k),
                    integral: 0.0,
                }
            })
            .collect();
        Self { particles }
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    fn stencil(field: &MapField, p: &Particle) -> Result<crate::grid::Stencil> {
        let grid = field.grid();
        grid.stencil_at(p.chart, p.x, PARTICLE_STENCIL, |k| grid.role(k).is_computed())
            .ok_or_else(|| Error::Internal(format!("no interpolation stencil at particle {:?}", p.x)))
    }

    /// Euler step of the particle positions with the rates evaluated on
    /// `field` at the start of an accepted step of length `dt`.
    pub fn advance(&mut self, field: &MapField, rhs: &RhsField, dt: f64) -> Result<()> {
        let grid = field.grid();
        for p in &mut self.particles {
            let st = Self::stencil(field, p)?;
            let (mut z, mut hn) = ([0.0; 2], 0.0);
            for (&k, w) in st.nodes.iter().zip(&st.weights) {
                z[0] += w * rhs.drift[2 * k];
                z[1] += w * rhs.drift[2 * k + 1];
                hn += w * rhs.h_norm[k];
            }
            p.integral += hn.max(0.0) * dt;
            p.x[0] -= dt * z[0];
            p.x[1] -= dt * z[1];
            let moved = grid.canonical(&ChartPoint::new(p.chart, p.x.to_vec()))?;
            p.chart = moved.chart;
            p.x = [moved.coords[0], moved.coords[1]];
        }
        Ok(())
    }

    /// `max (dist_{M×N}(start, now) − ∫‖H‖)` over particles.
    pub fn budget_residual(&self, field: &MapField) -> Result<f64> {
        let grid = field.grid();
        let target = field.target();
        let n = target.dim();
        let mut worst = f64::NEG_INFINITY;
        for p in &self.particles {
            let st = Self::stencil(field, p)?;
            let chart = field.chart(st.anchor());
            let mut y = vec![0.0; n];
            let mut buf = vec![0.0; n];
            for (&k, w) in st.nodes.iter().zip(&st.weights) {
                field.coords_in(k, chart, &mut buf)?;
                for (a, b) in y.iter_mut().zip(&buf) {
                    *a += w * b;
                }
            }
            let here = ChartPoint::new(p.chart, p.x.to_vec());
            let dm = grid.distance(&p.start_domain, &here)?;
            let dn = target.distance_raw(p.start_target.chart, &p.start_target.coords, chart, &y);
            worst = worst.max((dm * dm + dn * dn).sqrt() - p.integral);
        }
        Ok(if worst.is_finite() { worst } else { 0.0 })
    }
}

/// Stateful sampler used by the flow driver.
#[derive(Clone, Debug)]
pub struct Monitors {
    report: MonitorReport,
    particles: ParticleTracker,
}

/// Nodes between frame checks in release builds.
const FRAME_CHECK_STRIDE: usize = 97;

impl Monitors {
    /// Samples `t = 0`, fixes `κ` and resolves the default tolerances.
    pub fn new(field: &MapField, mut settings: MonitorSettings) -> Result<Self> {
        let stats = node_stats(field, FRAME_CHECK_STRIDE)?;
        let kappa = choose_kappa(&stats);
        let h = field.grid().h();
        settings.tol_disp.get_or_insert(5.0 * h * h);
        let (mut s, checks) = reduce_stats(0.0, &stats, kappa);
        settings.h2_ceiling.get_or_insert(10.0 * s.max_h2 + 1.0);
        s.image_diameter = image_diameter(field);
        let particles = ParticleTracker::new(field, settings.particles);
        Ok(Self {
            report: MonitorReport {
                samples: vec![s],
                verdicts: Vec::new(),
                kappa_used: kappa,
                settings,
                frame_check_max: checks.frame_check_max,
                logdet_route_gap: checks.logdet_route_gap,
                p_null_gap: checks.p_null_gap,
            },
            particles,
        })
    }

    pub fn sample(&mut self, field: &MapField, t: f64) -> Result<&MonitorSample> {
        let stats = node_stats(field, FRAME_CHECK_STRIDE)?;
        let (mut s, checks) = reduce_stats(t, &stats, self.report.kappa_used);
        s.image_diameter = image_diameter(field);
        s.displacement_budget_residual = self.particles.budget_residual(field)?;
        let r = &mut self.report;
        r.frame_check_max = r.frame_check_max.max(checks.frame_check_max);
        r.logdet_route_gap = r.logdet_route_gap.max(checks.logdet_route_gap);
        r.p_null_gap = r.p_null_gap.max(checks.p_null_gap);
        if r.samples.last().is_some_and(|l| l.t >= t) {
            r.samples.pop();
        }
        r.samples.push(s);
        Ok(self.last())
    }

    pub fn advance_particles(&mut self, field: &MapField, rhs: &RhsField, dt: f64) -> Result<()> {
        self.particles.advance(field, rhs, dt)
    }

    pub fn last(&self) -> &MonitorSample {
        self.report.samples.last().expect("monitors always hold the initial sample")
    }

    pub fn report(&self) -> &MonitorReport {
        &self.report
    }

    /// Closes the series and evaluates the verdicts.
    pub fn finish(mut self) -> MonitorReport {
        self.report.verdicts = assert_suite(&self.report);
        self.report
    }
}

/// Names of the six verdicts, in order.
pub const VERDICT_NAMES: [&str; 6] = [
    "eps_preserved",
    "h2_bounded",
    "logdet_nonincreasing",
    "p_negative",
    "displacement_budget",
    "diameter_converged",
];

fn verdict(name: &'static str, first: Option<f64>) -> Verdict {
    Verdict {
        name,
        status: if first.is_some() {
            VerdictStatus::Fail
        } else {
            VerdictStatus::Pass
        },
        first_violation: first,
    }
}

/// Evaluates the six assertions on a report's time series.
pub fn assert_suite(report: &MonitorReport) -> Vec<Verdict> {
    let s = &report.samples;
    let cfg = &report.settings;
    let Some(first) = s.first() else {
        return VERDICT_NAMES
            .iter()
            .map(|&name| Verdict {
                name,
                status: VerdictStatus::Disabled,
                first_violation: None,
            })
            .collect();
    };
    let find = |pred: &dyn Fn(&MonitorSample) -> bool| s.iter().find(|x| !pred(x)).map(|x| x.t);

    let eps_floor = first.eps_min - cfg.tol_eps;
    let v1 = verdict(VERDICT_NAMES[0], find(&|x| x.eps_min >= eps_floor));

    let ceiling = first.max_h2.max(cfg.h2_ceiling.unwrap_or(10.0 * first.max_h2 + 1.0));
    let v2 = verdict(VERDICT_NAMES[1], find(&|x| x.max_h2 <= ceiling));

    let v3 = verdict(
        VERDICT_NAMES[2],
        s.windows(2)
            .find(|w| w[1].max_logdet - w[0].max_logdet > cfg.tol_logdet * (w[1].t - w[0].t))
            .map(|w| w[1].t),
    );

    let v4 = if report.kappa_used.is_some() {
        verdict(VERDICT_NAMES[3], find(&|x| x.p_max_eig < 0.0))
    } else {
        Verdict {
            name: VERDICT_NAMES[3],
            status: VerdictStatus::Disabled,
            first_violation: None,
        }
    };

    let tol_disp = cfg.tol_disp.unwrap_or(0.0);
    let v5 = verdict(
        VERDICT_NAMES[4],
        find(&|x| x.displacement_budget_residual <= tol_disp),
    );

    let last = s.last().expect("non-empty");
    let v6 = verdict(
        VERDICT_NAMES[5],
        (!(last.image_diameter < cfg.diam_tol)).then_some(last.t),
    );
    vec![v1, v2, v3, v4, v5, v6]
}

/// Reference value of `max_logdet` for `λ ≡ c`: `m · ln(1 + c²)`.
pub fn uniform_logdet(c: f64) -> f64 {
    M as f64 * (c * c).ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::InitialMap;
    use crate::grid::build_grid;
    use crate::manifold::ModelManifold;
    use std::sync::Arc;

    fn s2() -> ModelManifold {
        ModelManifold::sphere(2, 1.0).unwrap()
    }

    fn field(res: usize, init: InitialMap) -> MapField {
        let s = s2();
        MapField::new(Arc::new(build_grid(&s, res).unwrap()), s, &init).unwrap()
    }

    #[test]
    fn constant_map_sample() {
        let f = field(32, InitialMap::Constant(ChartPoint::new(0, vec![0.1, 0.0])));
        let m = Monitors::new(&f, MonitorSettings::default()).unwrap();
        let s = m.last();
        assert_eq!(s.eps_min, 1.0);
        assert_eq!(s.max_h2, 0.0);
        assert_eq!(s.max_logdet, 0.0);
        assert_eq!(s.p_max_eig, -1.0);
        assert_eq!(s.image_diameter, 0.0);
        assert_eq!(m.report().kappa_used, Some(0.25));
    }

    #[test]
    fn identity_map_sample() {
        let f = field(32, InitialMap::Identity);
        let m = Monitors::new(&f, MonitorSettings::default()).unwrap();
        let s = m.last();
        assert!(s.eps_min.abs() < 1e-12);
        assert!((s.max_logdet - uniform_logdet(1.0)).abs() < 1e-12);
        assert_eq!(m.report().kappa_used, None);
        let r = m.finish();
        assert_eq!(r.verdicts[3].status, VerdictStatus::Disabled);
    }

    #[test]
    fn dilation_sample_at_start() {
        let f = field(64, InitialMap::Dilation(0.5));
        let m = Monitors::new(&f, MonitorSettings::default()).unwrap();
        let s = m.last().clone();
        assert!((s.eps_min - 0.6).abs() < 5e-3, "{s:?}");
        assert!((s.max_logdet - uniform_logdet(0.5)).abs() < 5e-3);
        assert!(((1.0 - s.lambda_max.powi(2)) / (1.0 + s.lambda_max.powi(2)) - s.eps_min).abs() < 1e-14);
        assert!(s.p_max_eig <= -0.3);
        let r = m.report();
        assert!(r.logdet_route_gap < 1e-12);
        assert!(r.frame_check_max < 1e-10);
        // the cap of geodesic radius asin(1/2) around the target origin
        assert!((s.image_diameter - std::f64::consts::PI / 3.0).abs() < 1e-2);
    }

    fn sample(t: f64, eps: f64, h2: f64, logdet: f64, p: f64, diam: f64) -> MonitorSample {
        MonitorSample {
            t,
            eps_min: eps,
            lambda_max: 0.0,
            max_h2: h2,
            max_a2: 0.0,
            max_logdet: logdet,
            p_max_eig: p,
            image_diameter: diam,
            displacement_budget_residual: 0.0,
        }
    }

    fn report(samples: Vec<MonitorSample>) -> MonitorReport {
        MonitorReport {
            samples,
            verdicts: vec![],
            kappa_used: Some(0.1),
            settings: MonitorSettings {
                tol_disp: Some(1e-3),
                ..MonitorSettings::default()
            },
            frame_check_max: 0.0,
            logdet_route_gap: 0.0,
            p_null_gap: 0.0,
        }
    }

    #[test]
    fn suite_detects_each_violation() {
        let ok = report(vec![
            sample(0.0, 0.6, 1.0, 0.4, -0.5, 1.0),
            sample(1.0, 0.65, 0.5, 0.2, -0.6, 1e-4),
        ]);
        assert!(assert_suite(&ok).iter().all(|v| v.status == VerdictStatus::Pass));

        let bad = report(vec![
            sample(0.0, 0.6, 1.0, 0.4, -0.5, 1.0),
            sample(1.0, 0.5, 20.0, 0.5, 0.1, 0.5),
        ]);
        let v = assert_suite(&bad);
        for (i, verdict) in v.iter().enumerate() {
            if i == 4 {
                assert_eq!(verdict.status, VerdictStatus::Pass);
            } else {
                assert_eq!(verdict.status, VerdictStatus::Fail, "{}", verdict.name);
                assert_eq!(verdict.first_violation, Some(1.0));
            }
        }
        let empty = report(vec![]);
        assert!(assert_suite(&empty)
            .iter()
            .all(|v| v.status == VerdictStatus::Disabled));
    }
}
