//! Flat, typed run configuration.
//!
//! The document is TOML restricted to top-level scalar keys (plus the
//! `constant_point` array). Every key is optional; missing keys take the
//! values of [`RunConfig::default`]. Parsing reports every violation at once.
//!
//! | key | type | default |
//! |-----|------|---------|
//! | `domain_kind` | `"sphere"` \| `"euclidean"` | `"sphere"` |
//! | `domain_dim` | integer | 2 |
//! | `domain_curvature` | float | 1.0 |
//! | `target_kind` | `"sphere"` \| `"hyperbolic"` \| `"euclidean"` | `"sphere"` |
//! | `target_dim` | integer | 2 |
//! | `target_curvature` | float | 1.0 |
//! | `initial_map` | `"constant"` \| `"dilation"` \| `"identity"` | `"dilation"` |
//! | `dilation` | float, dilation only | 0.5 |
//! | `constant_chart` | integer, constant only | 0 |
//! | `constant_point` | float array, constant only | origin |
//! | `resolution` | integer ≥ 8 | 64 |
//! | `reduced_cells` | integer ≥ 8 | 400 |
//! | `cfl_safety` | float in (0, 1] | 0.2 |
//! | `t_max` | float | 10.0 |
//! | `diam_tol` | float | 1e-3 |
//! | `tol_eps` | float | 1e-3 |
//! | `tol_logdet` | float | 1e-6 |
//! | `tol_disp` | float, optional | `5 h²` |
//! | `h2_ceiling` | float, optional | `10 max‖H‖²(0) + 1` |
//! | `sigma`, `mu` | float | 1.0 |
//! | `monitor_stride` | integer ≥ 1 | 20 |
//! | `snapshot_stride` | integer, 0 disables | 0 |
//! | `retry_max` | integer | 8 |
//! | `dt` | float, optional | stability bound |
//! | `max_steps` | integer, optional | none |
//! | `particles` | integer ≥ 1 | 64 |
//! | `output_dir` | string | `"output"` |
//! | `seed` | integer | 0 |

use std::path::{Path, PathBuf};

use toml::{Table, Value};

use crate::error::{ConfigViolation, Error, Result};
use crate::field::InitialMap;
use crate::flow::Controls;
use crate::grid::MIN_RESOLUTION;
use crate::manifold::{ChartPoint, ManifoldKind, ModelManifold};
use crate::monitor::MonitorSettings;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldSpec {
    pub kind: ManifoldKind,
    pub dim: usize,
    pub curvature: f64,
}

impl ManifoldSpec {
    pub fn build(&self) -> Result<ModelManifold> {
        ModelManifold::new(self.kind, self.dim, self.curvature)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum InitialSpec {
    Constant(ChartPoint),
    Dilation(f64),
    Identity,
}

impl InitialSpec {
    pub fn name(&self) -> &'static str {
        match self {
            InitialSpec::Constant(_) => "constant",
            InitialSpec::Dilation(_) => "dilation",
            InitialSpec::Identity => "identity",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub domain: ManifoldSpec,
    pub target: ManifoldSpec,
    pub initial: InitialSpec,
    pub resolution: usize,
    /// Cell count of the reduced solver used by `oracle`.
    pub reduced_cells: usize,
    pub cfl_safety: f64,
    pub t_max: f64,
    pub diam_tol: f64,
    pub tol_eps: f64,
    pub tol_logdet: f64,
    pub tol_disp: Option<f64>,
    pub h2_ceiling: Option<f64>,
    pub sigma: f64,
    pub mu: f64,
    pub monitor_stride: usize,
    pub snapshot_stride: usize,
    pub retry_max: usize,
    pub dt: Option<f64>,
    pub max_steps: Option<u64>,
    pub particles: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let controls = Controls::default();
        let settings = MonitorSettings::default();
        Self {
            domain: ManifoldSpec {
                kind: ManifoldKind::Sphere,
                dim: 2,
                curvature: 1.0,
            },
            target: ManifoldSpec {
                kind: ManifoldKind::Sphere,
                dim: 2,
                curvature: 1.0,
            },
            initial: InitialSpec::Dilation(0.5),
            resolution: 64,
            reduced_cells: 400,
            cfl_safety: controls.cfl_safety,
            t_max: controls.t_max,
            diam_tol: controls.diam_tol,
            tol_eps: settings.tol_eps,
            tol_logdet: settings.tol_logdet,
            tol_disp: None,
            h2_ceiling: None,
            sigma: 1.0,
            mu: 1.0,
            monitor_stride: controls.monitor_stride,
            snapshot_stride: controls.snapshot_stride,
            retry_max: controls.retry_max,
            dt: None,
            max_steps: None,
            particles: settings.particles,
            output_dir: PathBuf::from("output"),
            seed: 0,
        }
    }
}

const KEYS: &[&str] = &[
    "domain_kind",
    "domain_dim",
    "domain_curvature",
    "target_kind",
    "target_dim",
    "target_curvature",
    "initial_map",
    "dilation",
    "constant_chart",
    "constant_point",
    "resolution",
    "reduced_cells",
    "cfl_safety",
    "t_max",
    "diam_tol",
    "tol_eps",
    "tol_logdet",
    "tol_disp",
    "h2_ceiling",
    "sigma",
    "mu",
    "monitor_stride",
    "snapshot_stride",
    "retry_max",
    "dt",
    "max_steps",
    "particles",
    "output_dir",
    "seed",
];

struct Reader {
    table: Table,
    violations: Vec<ConfigViolation>,
}

impl Reader {
    fn bad(&mut self, key: &str, msg: impl Into<String>) {
        self.violations.push(ConfigViolation::new(key, msg));
    }

    fn float(&mut self, key: &str) -> Option<f64> {
        match self.table.get(key)? {
            Value::Float(v) => Some(*v),
            Value::Integer(v) => Some(*v as f64),
            other => {
                let t = other.type_str();
                self.bad(key, format!("expected a number, found {t}"));
                None
            }
        }
    }

    fn int(&mut self, key: &str) -> Option<i64> {
        match self.table.get(key)? {
            Value::Integer(v) => Some(*v),
            other => {
                let t = other.type_str();
                self.bad(key, format!("expected an integer, found {t}"));
                None
            }
        }
    }

    fn count(&mut self, key: &str) -> Option<usize> {
        let v = self.int(key)?;
        if v < 0 {
            self.bad(key, format!("must be nonnegative, got {v}"));
            return None;
        }
        Some(v as usize)
    }

    fn string(&mut self, key: &str) -> Option<String> {
        match self.table.get(key)? {
            Value::String(s) => Some(s.clone()),
            other => {
                let t = other.type_str();
                self.bad(key, format!("expected a string, found {t}"));
                None
            }
        }
    }

    fn float_array(&mut self, key: &str) -> Option<Vec<f64>> {
        match self.table.get(key)? {
            Value::Array(items) => {
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    match item {
                        Value::Float(v) => out.push(*v),
                        Value::Integer(v) => out.push(*v as f64),
                        other => {
                            let t = other.type_str();
                            self.bad(key, format!("expected numbers, found {t}"));
                            return None;
                        }
                    }
                }
                Some(out)
            }
            other => {
                let t = other.type_str();
                self.bad(key, format!("expected an array of numbers, found {t}"));
                None
            }
        }
    }

    fn kind(&mut self, key: &str) -> Option<ManifoldKind> {
        let s = self.string(key)?;
        let k = ManifoldKind::from_name(&s);
        if k.is_none() {
            self.bad(key, format!("unknown manifold kind {s:?}"));
        }
        k
    }

    fn positive(&mut self, key: &str, default: f64) -> f64 {
        match self.float(key) {
            Some(v) if v > 0.0 && v.is_finite() => v,
            Some(v) => {
                self.bad(key, format!("must be positive and finite, got {v}"));
                default
            }
            None => default,
        }
    }

    fn optional_positive(&mut self, key: &str) -> Option<f64> {
        if self.table.contains_key(key) {
            Some(self.positive(key, f64::NAN))
        } else {
            None
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let table: Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("document", e.message().to_string()))?;
        let mut r = Reader {
            table,
            violations: Vec::new(),
        };
        let unknown: Vec<String> = r
            .table
            .keys()
            .filter(|k| !KEYS.contains(&k.as_str()))
            .cloned()
            .collect();
        for k in unknown {
            r.bad(&k, "unknown key");
        }

        let d = RunConfig::default();
        let mut c = d.clone();
        c.domain = read_manifold(&mut r, "domain", &d.domain);
        c.target = read_manifold(&mut r, "target", &d.target);

        let map = r.string("initial_map").unwrap_or_else(|| d.initial.name().to_string());
        let has_dilation = r.table.contains_key("dilation");
        let has_point = r.table.contains_key("constant_point") || r.table.contains_key("constant_chart");
        if has_dilation && map != "dilation" {
            r.bad("dilation", "only used with initial_map = \"dilation\"");
        }
        if has_point && map != "constant" {
            r.bad("constant_point", "only used with initial_map = \"constant\"");
        }
        c.initial = match map.as_str() {
            "dilation" => {
                let v = r.float("dilation").unwrap_or(0.5);
                if !(v > 0.0 && v.is_finite()) {
                    r.bad("dilation", format!("must be positive and finite, got {v}"));
                }
                InitialSpec::Dilation(v)
            }
            "identity" => InitialSpec::Identity,
            "constant" => {
                let chart = r.count("constant_chart").unwrap_or(0);
                let point = r
                    .float_array("constant_point")
                    .unwrap_or_else(|| vec![0.0; c.target.dim]);
                InitialSpec::Constant(ChartPoint::new(chart.min(u8::MAX as usize) as u8, point))
            }
            other => {
                r.bad("initial_map", format!("unknown initial map {other:?}"));
                d.initial.clone()
            }
        };

        c.resolution = r.count("resolution").unwrap_or(d.resolution);
        if c.resolution < MIN_RESOLUTION {
            r.bad(
                "resolution",
                format!("must be at least {MIN_RESOLUTION}, got {}", c.resolution),
            );
        }
        c.reduced_cells = r.count("reduced_cells").unwrap_or(d.reduced_cells);
        if c.reduced_cells < MIN_RESOLUTION {
            r.bad(
                "reduced_cells",
                format!("must be at least {MIN_RESOLUTION}, got {}", c.reduced_cells),
            );
        }
        c.cfl_safety = r.positive("cfl_safety", d.cfl_safety);
        if c.cfl_safety > 1.0 {
            r.bad("cfl_safety", format!("must not exceed 1, got {}", c.cfl_safety));
        }
        c.t_max = r.positive("t_max", d.t_max);
        c.diam_tol = r.positive("diam_tol", d.diam_tol);
        c.tol_eps = r.positive("tol_eps", d.tol_eps);
        c.tol_logdet = r.positive("tol_logdet", d.tol_logdet);
        c.tol_disp = r.optional_positive("tol_disp");
        c.h2_ceiling = r.optional_positive("h2_ceiling");
        c.sigma = r.positive("sigma", d.sigma);
        c.mu = r.positive("mu", d.mu);
        c.monitor_stride = r.count("monitor_stride").unwrap_or(d.monitor_stride);
        if c.monitor_stride == 0 {
            r.bad("monitor_stride", "must be at least 1");
        }
        c.snapshot_stride = r.count("snapshot_stride").unwrap_or(d.snapshot_stride);
        c.retry_max = r.count("retry_max").unwrap_or(d.retry_max);
        c.dt = r.optional_positive("dt");
        c.max_steps = r.count("max_steps").map(|v| v as u64);
        c.particles = r.count("particles").unwrap_or(d.particles);
        if c.particles == 0 {
            r.bad("particles", "must be at least 1");
        }
        c.output_dir = r.string("output_dir").map_or(d.output_dir.clone(), PathBuf::from);
        c.seed = match r.int("seed") {
            Some(v) if v >= 0 => v as u64,
            Some(v) => {
                r.bad("seed", format!("must be nonnegative, got {v}"));
                0
            }
            None => d.seed,
        };

        let mut violations = r.violations;
        violations.extend(c.semantic_violations());
        if violations.is_empty() {
            Ok(c)
        } else {
            Err(Error::Config(violations))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks that involve several keys.
    fn semantic_violations(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        let domain = manifold_or_violation(&self.domain, "domain", &mut v);
        let target = manifold_or_violation(&self.target, "target", &mut v);
        if let Some(m) = &domain {
            if m.dim() != 2 {
                v.push(ConfigViolation::new("domain_dim", "only 2-dimensional domains are supported"));
            }
            if m.kind() == ManifoldKind::Hyperbolic {
                v.push(ConfigViolation::new("domain_kind", "the domain must be closed"));
            }
        }
        match &self.initial {
            InitialSpec::Identity => {
                if self.domain != self.target {
                    v.push(ConfigViolation::new(
                        "initial_map",
                        "identity requires identical domain and target",
                    ));
                }
            }
            InitialSpec::Constant(p) => {
                if let Some(t) = &target {
                    if !t.contains(p) {
                        v.push(ConfigViolation::new(
                            "constant_point",
                            format!("{:?} is not a point of chart {} of the target", p.coords, p.chart),
                        ));
                    }
                }
            }
            InitialSpec::Dilation(c) => {
                if let (Some(m), Some(t)) = (&domain, &target) {
                    if t.kind() == ManifoldKind::Sphere && c * m.length_scale() > t.length_scale() {
                        v.push(ConfigViolation::new(
                            "dilation",
                            "the contracted image does not fit in the target sphere",
                        ));
                    }
                }
            }
        }
        v
    }

    /// Dilation factors `c ≥ 1` violate the length-decreasing hypothesis;
    /// such runs are accepted but informational only.
    pub fn exploratory(&self) -> bool {
        matches!(self.initial, InitialSpec::Dilation(c) if c >= 1.0)
    }

    pub fn emit(&self) -> String {
        let mut t = Table::new();
        let mut put = |k: &str, v: Value| {
            t.insert(k.to_string(), v);
        };
        for (prefix, spec) in [("domain", &self.domain), ("target", &self.target)] {
            put(&format!("{prefix}_kind"), Value::String(spec.kind.name().into()));
            put(&format!("{prefix}_dim"), Value::Integer(spec.dim as i64));
            put(&format!("{prefix}_curvature"), Value::Float(spec.curvature));
        }
        put("initial_map", Value::String(self.initial.name().into()));
        match &self.initial {
            InitialSpec::Dilation(c) => put("dilation", Value::Float(*c)),
            InitialSpec::Constant(p) => {
                put("constant_chart", Value::Integer(p.chart as i64));
                put(
                    "constant_point",
                    Value::Array(p.coords.iter().map(|x| Value::Float(*x)).collect()),
                );
            }
            InitialSpec::Identity => {}
        }
        put("resolution", Value::Integer(self.resolution as i64));
        put("reduced_cells", Value::Integer(self.reduced_cells as i64));
        put("cfl_safety", Value::Float(self.cfl_safety));
        put("t_max", Value::Float(self.t_max));
        put("diam_tol", Value::Float(self.diam_tol));
        put("tol_eps", Value::Float(self.tol_eps));
        put("tol_logdet", Value::Float(self.tol_logdet));
        if let Some(x) = self.tol_disp {
            put("tol_disp", Value::Float(x));
        }
        if let Some(x) = self.h2_ceiling {
            put("h2_ceiling", Value::Float(x));
        }
        put("sigma", Value::Float(self.sigma));
        put("mu", Value::Float(self.mu));
        put("monitor_stride", Value::Integer(self.monitor_stride as i64));
        put("snapshot_stride", Value::Integer(self.snapshot_stride as i64));
        put("retry_max", Value::Integer(self.retry_max as i64));
        if let Some(x) = self.dt {
            put("dt", Value::Float(x));
        }
        if let Some(x) = self.max_steps {
            put("max_steps", Value::Integer(x as i64));
        }
        put("particles", Value::Integer(self.particles as i64));
        put(
            "output_dir",
            Value::String(self.output_dir.to_string_lossy().into_owned()),
        );
        put("seed", Value::Integer(self.seed as i64));
        let mut out = String::new();
        for key in KEYS {
            if let Some(v) = t.get(*key) {
                out.push_str(&format!("{key} = {v}\n"));
            }
        }
        out
    }

    pub fn domain_manifold(&self) -> Result<ModelManifold> {
        self.domain.build()
    }

    pub fn target_manifold(&self) -> Result<ModelManifold> {
        self.target.build()
    }

    pub fn initial_map(&self) -> InitialMap {
        match &self.initial {
            InitialSpec::Constant(p) => InitialMap::Constant(p.clone()),
            InitialSpec::Dilation(c) => InitialMap::Dilation(*c),
            InitialSpec::Identity => InitialMap::Identity,
        }
    }

    pub fn controls(&self) -> Controls {
        Controls {
            cfl_safety: self.cfl_safety,
            t_max: self.t_max,
            diam_tol: self.diam_tol,
            retry_max: self.retry_max,
            monitor_stride: self.monitor_stride,
            snapshot_stride: self.snapshot_stride,
            dt: self.dt,
            max_steps: self.max_steps,
        }
    }

    pub fn monitor_settings(&self) -> MonitorSettings {
        MonitorSettings {
            tol_eps: self.tol_eps,
            tol_logdet: self.tol_logdet,
            tol_disp: self.tol_disp,
            h2_ceiling: self.h2_ceiling,
            diam_tol: self.diam_tol,
            particles: self.particles,
        }
    }
}

fn read_manifold(r: &mut Reader, prefix: &str, default: &ManifoldSpec) -> ManifoldSpec {
    let kind = r.kind(&format!("{prefix}_kind")).unwrap_or(default.kind);
    let dim = r.count(&format!("{prefix}_dim")).unwrap_or(default.dim);
    let curvature = r.float(&format!("{prefix}_curvature")).unwrap_or(match kind {
        ManifoldKind::Sphere => 1.0,
        ManifoldKind::Hyperbolic => -1.0,
        ManifoldKind::Euclidean => 0.0,
    });
    ManifoldSpec { kind, dim, curvature }
}

fn manifold_or_violation(
    spec: &ManifoldSpec,
    prefix: &str,
    out: &mut Vec<ConfigViolation>,
) -> Option<ModelManifold> {
    match spec.build() {
        Ok(m) => Some(m),
        Err(Error::Config(v)) => {
            for c in v {
                let field = if c.message.contains("dimension") { "dim" } else { "curvature" };
                out.push(ConfigViolation::new(format!("{prefix}_{field}"), c.message));
            }
            None
        }
        Err(e) => {
            out.push(ConfigViolation::new(prefix, e.to_string()));
            None
        }
    }
}
