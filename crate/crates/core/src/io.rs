//! Run orchestration and file output.
//!
//! Every float is written with 17 significant digits; files are UTF-8 with
//! LF line endings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::{info, warn};

use crate::config::{InitialSpec, RunConfig};
use crate::equivariant::{run_reduced, Profile};
use crate::error::{Error, Result};
use crate::field::MapField;
use crate::flow::{run, FlowState, Observer, Termination};
use crate::grid::build_grid;
use crate::manifold::{check_hypotheses, HypothesisCheck};
use crate::monitor::{MonitorReport, MonitorSample, Verdict};

pub const TIMESERIES_FILE: &str = "timeseries.csv";
pub const REDUCED_TIMESERIES_FILE: &str = "timeseries_reduced.csv";
pub const VERDICTS_FILE: &str = "verdicts.csv";
pub const REDUCED_VERDICTS_FILE: &str = "verdicts_reduced.csv";
pub const HYPOTHESES_FILE: &str = "hypotheses.csv";
pub const CONFIG_FILE: &str = "config.toml";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.txt";
pub const PLOT_DIR: &str = "plot";

fn num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Which solver produced a time series.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Full,
    Reduced,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Full => "full",
            Source::Reduced => "reduced",
        }
    }
}

pub fn timeseries_csv(samples: &[MonitorSample], source: Source) -> String {
    let mut out = String::from("source");
    for c in MonitorSample::COLUMNS {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    for s in samples {
        out.push_str(source.name());
        for v in s.values() {
            out.push(',');
            out.push_str(&num(v));
        }
        out.push('\n');
    }
    out
}

/// One line per assertion: name, status, first violation time (empty when
/// none).
pub fn verdicts_csv(verdicts: &[Verdict]) -> String {
    let mut out = String::from("name,status,first_violation\n");
    for v in verdicts {
        let first = v.first_violation.map(num).unwrap_or_default();
        let _ = writeln!(out, "{},{},{}", v.name, v.status.name(), first);
    }
    out
}

pub fn hypotheses_csv(h: &HypothesisCheck) -> String {
    let mut out = String::from("sigma,mu,holds,margin,slack_0,slack_1,slack_2,slack_3\n");
    let _ = write!(out, "{},{},{},{}", num(h.sigma), num(h.mu), h.holds, num(h.margin));
    for s in h.slacks {
        let _ = write!(out, ",{}", num(s));
    }
    out.push('\n');
    out
}

/// Owned nodes with their domain position and target value.
pub fn snapshot_csv(state: &FlowState) -> String {
    let field = &state.field;
    let grid = field.grid();
    let n = field.target().dim();
    let mut out = String::from("node,domain_chart,x0,x1,target_chart");
    for a in 0..n {
        let _ = write!(out, ",y{a}");
    }
    out.push('\n');
    for &k in grid.owned() {
        let x = grid.coords(k);
        let _ = write!(
            out,
            "{k},{},{},{},{}",
            grid.chart_of(k),
            num(x[0]),
            num(x[1]),
            field.chart(k)
        );
        for v in field.coords(k) {
            let _ = write!(out, ",{}", num(*v));
        }
        out.push('\n');
    }
    out
}

/// Writes `plot/<column>.dat`, one `(t, value)` pair per line, for every
/// monitored quantity.
pub fn emit_plotdata(report: &MonitorReport, dir: &Path) -> Result<Vec<PathBuf>> {
    let plot = dir.join(PLOT_DIR);
    fs::create_dir_all(&plot)?;
    let mut written = Vec::new();
    for (col, name) in MonitorSample::COLUMNS.iter().enumerate().skip(1) {
        let mut out = format!("# t {name}\n");
        for s in &report.samples {
            let v = s.values();
            let _ = writeln!(out, "{} {}", num(v[0]), num(v[col]));
        }
        let path = plot.join(format!("{name}.dat"));
        fs::write(&path, out)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: MonitorReport,
    pub termination: Termination,
    pub hypotheses: HypothesisCheck,
    pub exploratory: bool,
    pub steps: u64,
    pub output_dir: PathBuf,
}

impl RunSummary {
    /// Zero iff every enabled verdict passed.
    pub fn exit_code(&self) -> i32 {
        if self.report.all_passed() {
            0
        } else {
            1
        }
    }
}

struct FileObserver {
    dir: PathBuf,
    last: Option<MonitorSample>,
}

impl Observer for FileObserver {
    fn on_sample(&mut self, _state: &FlowState, report: &MonitorReport) -> Result<()> {
        self.last = report.samples.last().cloned();
        Ok(())
    }

    fn on_snapshot(&mut self, state: &FlowState) -> Result<()> {
        let path = self.dir.join(format!("snapshot_{:06}.csv", state.step_index));
        fs::write(path, snapshot_csv(state))?;
        Ok(())
    }
}

fn write_diagnostic(dir: &Path, config: &RunConfig, err: &Error, last: Option<&MonitorSample>) {
    let mut out = format!("error: {err}\n\n[last sample]\n");
    match last {
        Some(s) => {
            for (c, v) in MonitorSample::COLUMNS.iter().zip(s.values()) {
                let _ = writeln!(out, "{c} = {}", num(v));
            }
        }
        None => out.push_str("none\n"),
    }
    out.push_str("\n[config]\n");
    out.push_str(&config.emit());
    if let Err(e) = fs::create_dir_all(dir).and_then(|_| fs::write(dir.join(DIAGNOSTIC_FILE), out)) {
        warn!("could not write the diagnostic dump: {e}");
    }
}

fn prepare(config: &RunConfig) -> Result<HypothesisCheck> {
    let dir = &config.output_dir;
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), config.emit())?;
    let h = check_hypotheses(&config.domain_manifold()?, &config.target_manifold()?, config.sigma, config.mu)?;
    fs::write(dir.join(HYPOTHESES_FILE), hypotheses_csv(&h))?;
    if !h.holds {
        warn!("curvature hypotheses fail (margin {}); the run is informational", h.margin);
    }
    if config.exploratory() {
        warn!("dilation factor >= 1: the initial map is not length decreasing; the run is exploratory");
    }
    Ok(h)
}

/// Full 2D run: hypothesis check, flow, monitors and verdicts. Writes the
/// configuration, hypothesis check, time series, verdicts, plot data and
/// snapshots into `output_dir`; on failure a diagnostic dump is written
/// instead.
pub fn orchestrate(config: &RunConfig) -> Result<RunSummary> {
    let dir = config.output_dir.clone();
    let mut observer = FileObserver {
        dir: dir.clone(),
        last: None,
    };
    let result = (|| {
        let hypotheses = prepare(config)?;
        let domain = config.domain_manifold()?;
        let target = config.target_manifold()?;
        let grid = Arc::new(build_grid(&domain, config.resolution)?);
        let field = MapField::new(grid, target, &config.initial_map())?;
        let out = run(field, &config.controls(), &config.monitor_settings(), &mut observer)?;
        fs::write(dir.join(TIMESERIES_FILE), timeseries_csv(&out.report.samples, Source::Full))?;
        fs::write(dir.join(VERDICTS_FILE), verdicts_csv(&out.report.verdicts))?;
        emit_plotdata(&out.report, &dir)?;
        info!("run written to {}", dir.display());
        Ok(RunSummary {
            report: out.report,
            termination: out.termination,
            hypotheses,
            exploratory: config.exploratory(),
            steps: out.steps,
            output_dir: dir.clone(),
        })
    })();
    if let Err(e) = &result {
        write_diagnostic(&dir, config, e, observer.last.as_ref());
    }
    result
}

/// Reduced run of a rotationally symmetric configuration. Writes
/// `timeseries_reduced.csv` and `verdicts_reduced.csv`.
pub fn orchestrate_reduced(config: &RunConfig) -> Result<RunSummary> {
    let dir = config.output_dir.clone();
    let result = (|| {
        let hypotheses = prepare(config)?;
        let domain = config.domain_manifold()?;
        let target = config.target_manifold()?;
        let cells = config.reduced_cells;
        let profile = match &config.initial {
            InitialSpec::Dilation(c) => Profile::dilation(&domain, &target, cells, *c)?,
            InitialSpec::Identity => Profile::from_fn(&domain, cells, |t| t)?,
            InitialSpec::Constant(p) => {
                if p.coords.iter().any(|v| *v != 0.0) || p.chart != 0 {
                    return Err(Error::config(
                        "constant_point",
                        "the reduced solver needs the constant map onto the chart origin",
                    ));
                }
                Profile::from_fn(&domain, cells, |_| 0.0)?
            }
        };
        let out = run_reduced(&domain, &target, profile, &config.controls(), &config.monitor_settings())?;
        fs::write(
            dir.join(REDUCED_TIMESERIES_FILE),
            timeseries_csv(&out.report.samples, Source::Reduced),
        )?;
        fs::write(dir.join(REDUCED_VERDICTS_FILE), verdicts_csv(&out.report.verdicts))?;
        Ok(RunSummary {
            report: out.report,
            termination: out.termination,
            hypotheses,
            exploratory: config.exploratory(),
            steps: out.steps,
            output_dir: dir.clone(),
        })
    })();
    if let Err(e) = &result {
        write_diagnostic(&dir, config, e, None);
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::ChartPoint;
    use crate::monitor::MonitorSettings;

    fn sample(t: f64) -> MonitorSample {
        MonitorSample {
            t,
            eps_min: 0.6,
            lambda_max: 0.5,
            max_h2: 0.1,
            max_a2: 0.2,
            max_logdet: 0.3,
            p_max_eig: -0.5,
            image_diameter: 1.0 / 3.0,
            displacement_budget_residual: 0.0,
        }
    }

    fn report(n: usize) -> MonitorReport {
        MonitorReport {
            samples: (0..n).map(|i| sample(i as f64)).collect(),
            verdicts: Vec::new(),
            kappa_used: None,
            settings: MonitorSettings::default(),
            frame_check_max: 0.0,
            logdet_route_gap: 0.0,
            p_null_gap: 0.0,
        }
    }

    #[test]
    fn timeseries_has_full_precision() {
        let text = timeseries_csv(&[sample(0.1)], Source::Reduced);
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("source,t,eps_min"));
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(row[0], "reduced");
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.1);
        assert_eq!(row[8].parse::<f64>().unwrap(), 1.0 / 3.0);
    }

    #[test]
    fn plotdata_rows() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_plotdata(&report(0), dir.path()).unwrap();
        assert_eq!(files.len(), MonitorSample::COLUMNS.len() - 1);
        for f in &files {
            assert_eq!(fs::read_to_string(f).unwrap().lines().count(), 1);
        }
        emit_plotdata(&report(3), dir.path()).unwrap();
        let diam = fs::read_to_string(dir.path().join("plot/image_diameter.dat")).unwrap();
        assert_eq!(diam.lines().count(), 4);
    }

    #[test]
    fn constant_map_run_passes() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            initial: InitialSpec::Constant(ChartPoint::new(0, vec![0.2, 0.1])),
            resolution: 32,
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        let s = orchestrate(&config).unwrap();
        assert_eq!(s.exit_code(), 0);
        assert_eq!(s.termination, Termination::Converged);
        assert_eq!(s.report.samples[0].image_diameter, 0.0);
        for f in [TIMESERIES_FILE, VERDICTS_FILE, CONFIG_FILE, HYPOTHESES_FILE] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let parsed = RunConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn failures_leave_a_diagnostic() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            domain: crate::config::ManifoldSpec {
                kind: crate::manifold::ManifoldKind::Euclidean,
                dim: 2,
                curvature: 0.0,
            },
            initial: InitialSpec::Dilation(0.5),
            output_dir: dir.path().to_path_buf(),
            ..RunConfig::default()
        };
        assert!(orchestrate_reduced(&config).is_err());
        assert!(dir.path().join(DIAGNOSTIC_FILE).exists());
    }
}
