//! Mean curvature flow of the graph in the graph gauge.
//!
//! `f` evolves by `∂_t f = g^{ij}(∂_i∂_j f − Γ_M^k_{ij} ∂_k f + Γ_N(∂_i f, ∂_j f))`
//! with `g` the induced metric, whose lift `(0, ∂_t f)` differs from the mean
//! curvature vector by a tangential field only. Time stepping is explicit
//! midpoint with a parabolic step bound.

use log::{debug, info, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::MapField;
use crate::geometry::{max_gauge_residual, node_rates};
use crate::monitor::{MonitorReport, MonitorSettings, Monitors};

/// Declared singular once the retried step falls below this many `h²`.
pub const MIN_DT_FACTOR: f64 = 1e-12;
/// Declared singular once `max ‖A‖² · dt` exceeds this.
pub const CURVATURE_STEP_LIMIT: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Controls {
    pub cfl_safety: f64,
    pub t_max: f64,
    pub diam_tol: f64,
    pub retry_max: usize,
    pub monitor_stride: usize,
    pub snapshot_stride: usize,
    /// Requested step; clamped to the stability bound.
    pub dt: Option<f64>,
    /// Hard cap on the number of accepted steps.
    pub max_steps: Option<u64>,
}

impl Default for Controls {
    fn default() -> Self {
        Self {
            cfl_safety: 0.2,
            t_max: 10.0,
            diam_tol: 1e-3,
            retry_max: 8,
            monitor_stride: 20,
            snapshot_stride: 0,
            dt: None,
            max_steps: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub t: f64,
    pub field: MapField,
    pub dt_last: f64,
    pub step_index: u64,
}

impl FlowState {
    pub fn new(field: MapField) -> Self {
        Self {
            t: 0.0,
            field,
            dt_last: 0.0,
            step_index: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub accepted: bool,
    pub dt_used: f64,
    /// Stability bound at the start of the step.
    pub dt_bound: f64,
    /// Largest target-metric speed `‖∂_t f‖` over computed nodes.
    pub max_velocity: f64,
    /// Filled on steps where the gauge check ran.
    pub gauge_residual: Option<f64>,
    pub chart_migrations: usize,
    pub retries: usize,
    pub singularity_suspected: bool,
}

/// Velocity and auxiliary per-node rates, `n` (resp. 2) entries per node;
/// zero on nodes that are not computed.
#[derive(Clone, Debug)]
pub struct RhsField {
    pub n: usize,
    pub velocity: Vec<f64>,
    pub drift: Vec<f64>,
    pub h_norm: Vec<f64>,
    pub max_a2: f64,
    pub max_speed: f64,
    pub g_min_eig: f64,
}

/// Graph-gauge velocity at every computed node.
pub fn flow_rhs(field: &MapField) -> Result<RhsField> {
    let grid = field.grid();
    let domain = field.domain();
    let target = field.target();
    let n = target.dim();
    let rates: Vec<_> = grid
        .computed()
        .par_iter()
        .map(|&k| {
            let jet = field.jet(k)?;
            let r = node_rates(domain, target, &jet)?;
            let b = target.conformal_factor(field.coords(k));
            Ok((k, r, b))
        })
        .collect::<Result<_>>()?;
    let count = grid.node_count();
    let mut out = RhsField {
        n,
        velocity: vec![0.0; count * n],
        drift: vec![0.0; count * 2],
        h_norm: vec![0.0; count],
        max_a2: 0.0,
        max_speed: 0.0,
        g_min_eig: f64::INFINITY,
    };
    for (k, r, b) in rates {
        if !r.velocity.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite velocity at node {k}")));
        }
        out.velocity[k * n..(k + 1) * n].copy_from_slice(&r.velocity);
        out.drift[2 * k..2 * k + 2].copy_from_slice(&r.drift);
        out.h_norm[k] = r.h2.sqrt();
        out.max_a2 = out.max_a2.max(r.a2);
        let speed = b * r.velocity.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.max_speed = out.max_speed.max(speed);
        out.g_min_eig = out.g_min_eig.min(r.g_min_eig);
    }
    Ok(out)
}

/// Parabolic step bound `cfl · h² · min λ_min(g)`, i.e. `cfl · h²` over the
/// largest eigenvalue of `g^{ij}`.
pub fn cfl_dt(field: &MapField, cfl_safety: f64) -> Result<f64> {
    Ok(cfl_bound(field, cfl_safety, flow_rhs(field)?.g_min_eig))
}

fn cfl_bound(field: &MapField, cfl_safety: f64, g_min_eig: f64) -> f64 {
    let h = field.grid().h();
    cfl_safety * h * h * g_min_eig
}

/// Maximum gauge residual over owned nodes.
pub fn gauge_residual(field: &MapField) -> Result<f64> {
    max_gauge_residual(field, field.grid().owned())
}

fn midpoint(field: &MapField, k1: &RhsField, dt: f64) -> Result<(MapField, usize)> {
    let mut half = field.clone();
    half.apply_rates(&k1.velocity, 0.5 * dt)?;
    half.halo_exchange()?;
    let k2 = flow_rhs(&half)?;
    let mut next = field.clone();
    next.apply_rates(&k2.velocity, dt)?;
    let moved = next.reown_all();
    next.halo_exchange()?;
    Ok((next, moved))
}

/// One accepted step together with the rates at its start.
pub(crate) fn step_with_rates(
    state: &FlowState,
    controls: &Controls,
    check_gauge: bool,
) -> Result<(FlowState, StepResult, RhsField)> {
    let field = &state.field;
    let h = field.grid().h();
    let k1 = flow_rhs(field)?;
    let bound = cfl_bound(field, controls.cfl_safety, k1.g_min_eig);
    let mut dt = controls.dt.map_or(bound, |d| d.min(bound));
    let gauge = if check_gauge {
        Some(gauge_residual(field)?)
    } else {
        None
    };
    let mut result = StepResult {
        accepted: false,
        dt_used: dt,
        dt_bound: bound,
        max_velocity: k1.max_speed,
        gauge_residual: gauge,
        chart_migrations: 0,
        retries: 0,
        singularity_suspected: false,
    };
    if !(bound > 0.0) || k1.max_a2 * dt > CURVATURE_STEP_LIMIT {
        warn!(
            "singularity suspected at t = {}: max |A|^2 = {}, dt = {dt}",
            state.t, k1.max_a2
        );
        result.singularity_suspected = true;
        return Ok((state.clone(), result, k1));
    }
    loop {
        match midpoint(field, &k1, dt) {
            Ok((next, moved)) => {
                result.accepted = true;
                result.dt_used = dt;
                result.chart_migrations = moved;
                let new_state = FlowState {
                    t: state.t + dt,
                    field: next,
                    dt_last: dt,
                    step_index: state.step_index + 1,
                };
                return Ok((new_state, result, k1));
            }
            Err(Error::ChartEscape { node, detail }) => {
                result.retries += 1;
                dt *= 0.5;
                debug!("step rejected at node {node} ({detail}); retrying with dt = {dt}");
                if result.retries > controls.retry_max || dt < MIN_DT_FACTOR * h * h {
                    warn!("singularity suspected at t = {}: persistent chart escape", state.t);
                    result.dt_used = dt;
                    result.singularity_suspected = true;
                    return Ok((state.clone(), result, k1));
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Advances the flow by one explicit midpoint step. Rejected steps are
/// retried with halved `dt`; the returned state is unchanged when no step
/// could be accepted.
pub fn step(state: &FlowState, controls: &Controls) -> Result<(FlowState, StepResult)> {
    let (s, r, _) = step_with_rates(state, controls, false)?;
    Ok((s, r))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Image diameter fell below `diam_tol`.
    Converged,
    /// `t` reached `t_max`.
    TimeLimit,
    /// The step cap in [`Controls::max_steps`] was reached.
    StepLimit,
    SingularitySuspected,
}

impl Termination {
    pub fn name(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::TimeLimit => "time_limit",
            Termination::StepLimit => "step_limit",
            Termination::SingularitySuspected => "singularity_suspected",
        }
    }
}

/// Callbacks invoked during [`run`].
pub trait Observer {
    fn on_sample(&mut self, _state: &FlowState, _report: &MonitorReport) -> Result<()> {
        Ok(())
    }
    fn on_snapshot(&mut self, _state: &FlowState) -> Result<()> {
        Ok(())
    }
    fn on_step(&mut self, _state: &FlowState, _result: &StepResult) -> Result<()> {
        Ok(())
    }
}

/// Observer that does nothing.
pub struct Silent;

impl Observer for Silent {}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub state: FlowState,
    pub report: MonitorReport,
    pub termination: Termination,
    pub steps: u64,
    pub rejected_attempts: usize,
    /// Largest gauge residual seen on checked steps.
    pub max_gauge_residual: f64,
}

/// Runs the flow until convergence, `t_max`, the step cap or a suspected
/// singularity. Monitors are sampled every `monitor_stride` steps and at the
/// end.
pub fn run(
    initial: MapField,
    controls: &Controls,
    settings: &MonitorSettings,
    observer: &mut dyn Observer,
) -> Result<RunOutcome> {
    let mut state = FlowState::new(initial);
    let mut monitors = Monitors::new(&state.field, settings.clone())?;
    observer.on_sample(&state, monitors.report())?;
    if controls.snapshot_stride > 0 {
        observer.on_snapshot(&state)?;
    }
    let stride = controls.monitor_stride.max(1) as u64;
    let mut rejected = 0;
    let mut max_gauge: f64 = 0.0;
    let termination = loop {
        if monitors.last().image_diameter < controls.diam_tol {
            break Termination::Converged;
        }
        if state.t >= controls.t_max {
            break Termination::TimeLimit;
        }
        if controls.max_steps.is_some_and(|m| state.step_index >= m) {
            break Termination::StepLimit;
        }
        let check = (state.step_index + 1) % stride == 0;
        let (next, result, k1) = step_with_rates(&state, controls, check)?;
        rejected += result.retries;
        if let Some(g) = result.gauge_residual {
            max_gauge = max_gauge.max(g);
        }
        if result.singularity_suspected {
            monitors.sample(&state.field, state.t)?;
            observer.on_sample(&state, monitors.report())?;
            break Termination::SingularitySuspected;
        }
        monitors.advance_particles(&state.field, &k1, result.dt_used)?;
        state = next;
        observer.on_step(&state, &result)?;
        let last = state.t >= controls.t_max
            || controls.max_steps.is_some_and(|m| state.step_index >= m);
        if state.step_index % stride == 0 || last {
            monitors.sample(&state.field, state.t)?;
            observer.on_sample(&state, monitors.report())?;
            debug!(
                "t = {:.6} step {} dt {:.3e} diameter {:.3e}",
                state.t,
                state.step_index,
                result.dt_used,
                monitors.last().image_diameter
            );
        }
        if controls.snapshot_stride > 0 && state.step_index % controls.snapshot_stride as u64 == 0 {
            observer.on_snapshot(&state)?;
        }
    };
    if monitors.last().t != state.t {
        monitors.sample(&state.field, state.t)?;
        observer.on_sample(&state, monitors.report())?;
    }
    info!(
        "run finished ({}) at t = {} after {} steps",
        termination.name(),
        state.t,
        state.step_index
    );
    let report = monitors.finish();
    Ok(RunOutcome {
        steps: state.step_index,
        state,
        report,
        termination,
        rejected_attempts: rejected,
        max_gauge_residual: max_gauge,
    })
}
