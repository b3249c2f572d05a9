//! The discretized map `f: M → N`, halo exchange and finite-difference jets.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::DomainGrid;
use crate::manifold::{ChartPoint, ManifoldKind, ModelManifold};

/// Sphere-target values are moved to the other chart once their normalized
/// radius exceeds this.
pub const REOWN_RADIUS: f64 = 1.4;

/// Named families of initial maps.
#[derive(Clone)]
pub enum InitialMap {
    /// `f ≡ q`.
    Constant(ChartPoint),
    /// Equivariant contraction by the factor `c`: the planar part of the
    /// domain point is scaled by `c` and lifted to the target, so that
    /// `sn_N(dist(f(x), o)) = c · sn_M(dist(x, o))` on round domains.
    Dilation(f64),
    /// The identity between equal model spaces.
    Identity,
    /// Arbitrary map given on the ambient domain position (see
    /// [`DomainGrid::embed`]).
    Custom(Arc<dyn Fn(&[f64]) -> ChartPoint + Send + Sync>),
}

impl std::fmt::Debug for InitialMap {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InitialMap::Constant(q) => write!(f, "Constant({q:?})"),
            InitialMap::Dilation(c) => write!(f, "Dilation({c})"),
            InitialMap::Identity => write!(f, "Identity"),
            InitialMap::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

/// Chart-0 target point whose planar ambient coordinates are `planar`.
pub fn lift_planar(target: &ModelManifold, planar: &[f64]) -> Result<ChartPoint> {
    let n = target.dim();
    let mut x = vec![0.0; n];
    for (o, p) in x.iter_mut().zip(planar) {
        *o = *p;
    }
    let k = target.curvature();
    let r2: f64 = x.iter().map(|v| v * v).sum();
    let y = match target.kind() {
        ManifoldKind::Euclidean => x,
        _ => {
            let disc = 1.0 - k * r2;
            if disc < 0.0 {
                return Err(Error::config(
                    "dilation",
                    "the contracted image does not fit in the target sphere",
                ));
            }
            let s = 1.0 / (1.0 + disc.sqrt());
            x.iter().map(|v| v * s).collect()
        }
    };
    let p = ChartPoint::new(0, y);
    if target.contains(&p) {
        Ok(p)
    } else {
        Err(target.domain_error(0, &p.coords))
    }
}

/// Planar ambient coordinates of a domain node used by the dilation family.
pub fn planar_coords(grid: &DomainGrid, chart: u8, x: &[f64]) -> Vec<f64> {
    let e = grid.embed_point(chart, x);
    if grid.is_periodic() {
        e.iter().map(|v| v.sin()).collect()
    } else {
        e[..2].to_vec()
    }
}

impl InitialMap {
    pub fn evaluate(
        &self,
        grid: &DomainGrid,
        target: &ModelManifold,
        chart: u8,
        x: &[f64],
    ) -> Result<ChartPoint> {
        match self {
            InitialMap::Constant(q) => {
                if target.contains(q) {
                    Ok(q.clone())
                } else {
                    Err(target.domain_error(q.chart, &q.coords))
                }
            }
            InitialMap::Dilation(c) => {
                let p: Vec<f64> = planar_coords(grid, chart, x).iter().map(|v| c * v).collect();
                lift_planar(target, &p)
            }
            InitialMap::Identity => {
                if grid.manifold() != target {
                    return Err(Error::config(
                        "initial_map",
                        "identity requires the target to equal the domain",
                    ));
                }
                Ok(ChartPoint::new(chart, x.to_vec()))
            }
            InitialMap::Custom(func) => Ok(func(&grid.embed_point(chart, x))),
        }
    }
}

/// Per-node finite-difference jet of `f` in chart coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeJet {
    /// Domain chart coordinates of the node.
    pub x: [f64; 2],
    /// Target chart in which all target quantities are expressed.
    pub chart: u8,
    pub value: Vec<f64>,
    /// `∂_i f^α` at `d1[2α + i]`.
    pub d1: Vec<f64>,
    /// `∂_i ∂_j f^α` at `d2[4α + 2i + j]`.
    pub d2: Vec<f64>,
}

impl NodeJet {
    pub fn target_dim(&self) -> usize {
        self.value.len()
    }

    #[inline]
    pub fn df(&self, alpha: usize, i: usize) -> f64 {
        self.d1[2 * alpha + i]
    }

    #[inline]
    pub fn ddf(&self, alpha: usize, i: usize, j: usize) -> f64 {
        self.d2[4 * alpha + 2 * i + j]
    }
}

/// Jets at the computed nodes, indexed by node.
#[derive(Clone, Debug)]
pub struct JetField {
    pub jets: Vec<Option<NodeJet>>,
}

impl JetField {
    pub fn get(&self, idx: usize) -> Option<&NodeJet> {
        self.jets[idx].as_ref()
    }
}

/// Target values on a square block of lattice offsets around a node, all
/// expressed in the target chart of the central value.
#[derive(Clone, Debug)]
pub struct Patch {
    pub radius: usize,
    pub chart: u8,
    pub center: [f64; 2],
    pub h: f64,
    n: usize,
    values: Vec<f64>,
}

impl Patch {
    #[inline]
    fn slot(&self, a: isize, b: isize) -> usize {
        let w = 2 * self.radius + 1;
        let r = self.radius as isize;
        ((a + r) as usize * w + (b + r) as usize) * self.n
    }

    #[inline]
    pub fn value(&self, a: isize, b: isize) -> &[f64] {
        let s = self.slot(a, b);
        &self.values[s..s + self.n]
    }

    pub fn position(&self, a: isize, b: isize) -> [f64; 2] {
        [
            self.center[0] + a as f64 * self.h,
            self.center[1] + b as f64 * self.h,
        ]
    }

    /// Second-order central jet at offset `(a, b)`; needs one ring of
    /// patch values around it.
    pub fn jet(&self, a: isize, b: isize) -> NodeJet {
        debug_assert!(a.unsigned_abs() < self.radius && b.unsigned_abs() < self.radius);
        let n = self.n;
        let h = self.h;
        let mut d1 = vec![0.0; 2 * n];
        let mut d2 = vec![0.0; 4 * n];
        let c = self.value(a, b);
        let (xp, xm) = (self.value(a + 1, b), self.value(a - 1, b));
        let (yp, ym) = (self.value(a, b + 1), self.value(a, b - 1));
        let (pp, pm) = (self.value(a + 1, b + 1), self.value(a + 1, b - 1));
        let (mp, mm) = (self.value(a - 1, b + 1), self.value(a - 1, b - 1));
        for al in 0..n {
            d1[2 * al] = (xp[al] - xm[al]) / (2.0 * h);
            d1[2 * al + 1] = (yp[al] - ym[al]) / (2.0 * h);
            d2[4 * al] = (xp[al] - 2.0 * c[al] + xm[al]) / (h * h);
            d2[4 * al + 3] = (yp[al] - 2.0 * c[al] + ym[al]) / (h * h);
            let mixed = (pp[al] - pm[al] - mp[al] + mm[al]) / (4.0 * h * h);
            d2[4 * al + 1] = mixed;
            d2[4 * al + 2] = mixed;
        }
        NodeJet {
            x: self.position(a, b),
            chart: self.chart,
            value: c.to_vec(),
            d1,
            d2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MapField {
    grid: Arc<DomainGrid>,
    target: ModelManifold,
    charts: Vec<u8>,
    coords: Vec<f64>,
}

impl MapField {
    /// Samples `init` at every node that carries a value and fills the halo.
    pub fn new(grid: Arc<DomainGrid>, target: ModelManifold, init: &InitialMap) -> Result<Self> {
        let n = target.dim();
        let count = grid.node_count();
        let mut charts = vec![0u8; count];
        let mut coords = vec![0.0; count * n];
        for idx in 0..count {
            if !grid.role(idx).has_value() {
                continue;
            }
            let p = init.evaluate(&grid, &target, grid.chart_of(idx), &grid.coords(idx))?;
            if p.coords.len() != n || !target.contains(&p) {
                return Err(target.domain_error(p.chart, &p.coords));
            }
            charts[idx] = p.chart;
            coords[idx * n..(idx + 1) * n].copy_from_slice(&p.coords);
        }
        let mut field = Self {
            grid,
            target,
            charts,
            coords,
        };
        field.reown_all();
        field.halo_exchange()?;
        Ok(field)
    }

    pub fn grid(&self) -> &DomainGrid {
        &self.grid
    }

    pub fn grid_arc(&self) -> &Arc<DomainGrid> {
        &self.grid
    }

    pub fn target(&self) -> &ModelManifold {
        &self.target
    }

    pub fn domain(&self) -> &ModelManifold {
        self.grid.manifold()
    }

    #[inline]
    pub fn chart(&self, idx: usize) -> u8 {
        self.charts[idx]
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> &[f64] {
        let n = self.target.dim();
        &self.coords[idx * n..(idx + 1) * n]
    }

    pub fn value(&self, idx: usize) -> ChartPoint {
        ChartPoint::new(self.charts[idx], self.coords(idx).to_vec())
    }

    pub fn set_value(&mut self, idx: usize, p: &ChartPoint) -> Result<()> {
        if !self.target.contains(p) {
            return Err(Error::ChartEscape {
                node: idx,
                detail: format!("value {:?} outside the target chart", p.coords),
            });
        }
        let n = self.target.dim();
        self.charts[idx] = p.chart;
        self.coords[idx * n..(idx + 1) * n].copy_from_slice(&p.coords);
        Ok(())
    }

    /// Adds `scale · rates` to every computed node, keeping each value in its
    /// current chart. `rates` holds `n` entries per node.
    pub fn apply_rates(&mut self, rates: &[f64], scale: f64) -> Result<()> {
        let n = self.target.dim();
        let grid = Arc::clone(&self.grid);
        for &idx in grid.computed() {
            let y = &mut self.coords[idx * n..(idx + 1) * n];
            for (v, r) in y.iter_mut().zip(&rates[idx * n..(idx + 1) * n]) {
                *v += scale * r;
            }
            if !y.iter().all(|v| v.is_finite())
                || !self.target.coords_in_domain(self.charts[idx], y)
            {
                return Err(Error::ChartEscape {
                    node: idx,
                    detail: format!("updated value {y:?} left target chart {}", self.charts[idx]),
                });
            }
        }
        Ok(())
    }

    /// Value of node `idx` expressed in `chart`.
    #[inline]
    pub fn coords_in(&self, idx: usize, chart: u8, out: &mut [f64]) -> Result<()> {
        self.target
            .transfer(self.charts[idx], self.coords(idx), chart, out)
            .map_err(|_| Error::ChartEscape {
                node: idx,
                detail: format!("value cannot be expressed in target chart {chart}"),
            })
    }

    /// Moves sphere-target values whose chart radius exceeds
    /// [`REOWN_RADIUS`] to the other chart. Returns the number of moves.
    pub fn reown_all(&mut self) -> usize {
        if self.target.kind() != ManifoldKind::Sphere {
            return 0;
        }
        let n = self.target.dim();
        let limit = (REOWN_RADIUS * self.target.length_scale()).powi(2);
        let mut moved = 0;
        let mut buf = vec![0.0; n];
        for idx in 0..self.grid.node_count() {
            if !self.grid.role(idx).has_value() {
                continue;
            }
            let y = &self.coords[idx * n..(idx + 1) * n];
            if y.iter().map(|v| v * v).sum::<f64>() > limit {
                let c = self.charts[idx];
                if self.target.transfer(c, y, 1 - c, &mut buf).is_ok() {
                    self.coords[idx * n..(idx + 1) * n].copy_from_slice(&buf);
                    self.charts[idx] = 1 - c;
                    moved += 1;
                }
            }
        }
        moved
    }

    /// Fills every halo node with the interpolated value of the other
    /// chart's computed nodes at its transition image. Reads only computed
    /// nodes, so repeated application is bit-for-bit idempotent.
    pub fn halo_exchange(&mut self) -> Result<()> {
        let n = self.target.dim();
        let limit = (REOWN_RADIUS * self.target.length_scale()).powi(2);
        let grid = Arc::clone(&self.grid);
        let updates: Vec<(usize, u8, Vec<f64>)> = grid
            .halo()
            .par_iter()
            .map(|link| {
                let anchor = link.stencil.anchor();
                let chart = self.charts[anchor];
                let mut acc = vec![0.0; n];
                let mut buf = vec![0.0; n];
                for (&k, w) in link.stencil.nodes.iter().zip(&link.stencil.weights) {
                    self.coords_in(k, chart, &mut buf).map_err(|_| Error::ChartEscape {
                        node: link.node,
                        detail: format!("halo source {k} cannot be expressed in chart {chart}"),
                    })?;
                    for (a, b) in acc.iter_mut().zip(&buf) {
                        *a += w * b;
                    }
                }
                let mut chart = chart;
                if self.target.kind() == ManifoldKind::Sphere
                    && acc.iter().map(|v| v * v).sum::<f64>() > limit
                {
                    self.target
                        .transfer(chart, &acc, 1 - chart, &mut buf)
                        .map_err(|_| Error::ChartEscape {
                            node: link.node,
                            detail: "interpolated halo value left the atlas".into(),
                        })?;
                    acc.copy_from_slice(&buf);
                    chart = 1 - chart;
                }
                if !self.target.coords_in_domain(chart, &acc) {
                    return Err(Error::ChartEscape {
                        node: link.node,
                        detail: "interpolated halo value left the target chart".into(),
                    });
                }
                Ok((link.node, chart, acc))
            })
            .collect::<Result<_>>()?;
        for (idx, chart, v) in updates {
            self.charts[idx] = chart;
            self.coords[idx * n..(idx + 1) * n].copy_from_slice(&v);
        }
        Ok(())
    }

    /// Values on the `(2r+1)²` block around `idx`, in the chart of `idx`.
    pub fn patch(&self, idx: usize, radius: usize) -> Result<Patch> {
        let n = self.target.dim();
        let chart = self.charts[idx];
        let r = radius as isize;
        let w = 2 * radius + 1;
        let mut values = vec![0.0; w * w * n];
        for a in -r..=r {
            for b in -r..=r {
                let k = self.grid.neighbor(idx, a, b).ok_or_else(|| {
                    Error::Internal(format!(
                        "stencil of node {idx} reaches offset ({a}, {b}) outside owned and halo nodes"
                    ))
                })?;
                let s = ((a + r) as usize * w + (b + r) as usize) * n;
                self.coords_in(k, chart, &mut values[s..s + n])?;
            }
        }
        Ok(Patch {
            radius,
            chart,
            center: self.grid.coords(idx),
            h: self.grid.h(),
            n,
            values,
        })
    }

    /// Central second-order jet at a single node.
    pub fn jet(&self, idx: usize) -> Result<NodeJet> {
        Ok(self.patch(idx, 1)?.jet(0, 0))
    }

    /// Jets at every computed node. Requires a current halo.
    pub fn compute_jets(&self) -> Result<JetField> {
        let computed = self.grid.computed();
        let list: Vec<(usize, NodeJet)> = computed
            .par_iter()
            .map(|&idx| Ok((idx, self.jet(idx)?)))
            .collect::<Result<_>>()?;
        let mut jets = vec![None; self.grid.node_count()];
        for (idx, j) in list {
            jets[idx] = Some(j);
        }
        Ok(JetField { jets })
    }

    /// Largest target distance between corresponding computed nodes.
    pub fn max_displacement(&self, other: &MapField) -> f64 {
        self.grid
            .computed()
            .iter()
            .map(|&k| {
                self.target.distance_raw(
                    self.charts[k],
                    self.coords(k),
                    other.charts[k],
                    other.coords(k),
                )
            })
            .fold(0.0, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, NodeRole};

    fn s2() -> ModelManifold {
        ModelManifold::sphere(2, 1.0).unwrap()
    }

    #[test]
    fn constant_map_has_vanishing_jets() {
        let grid = Arc::new(build_grid(&s2(), 32).unwrap());
        let q = ChartPoint::new(0, vec![0.3, -0.2]);
        let f = MapField::new(grid, s2(), &InitialMap::Constant(q.clone())).unwrap();
        let jets = f.compute_jets().unwrap();
        for &k in f.grid().computed() {
            let j = jets.get(k).unwrap();
            assert!(j.d1.iter().chain(&j.d2).all(|v| v.abs() < 1e-12));
        }
        for link in f.grid().halo() {
            assert_eq!(f.chart(link.node), 0);
            for (a, b) in f.coords(link.node).iter().zip(&q.coords) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_map_on_flat_domain_has_exact_jets() {
        let r2 = ModelManifold::euclidean(2).unwrap();
        let grid = Arc::new(build_grid(&r2, 16).unwrap());
        let b = [[0.3, -0.1], [0.05, 0.2]];
        let init = InitialMap::Custom(Arc::new(move |x: &[f64]| {
            ChartPoint::new(
                0,
                vec![
                    b[0][0] * x[0] + b[0][1] * x[1],
                    b[1][0] * x[0] + b[1][1] * x[1],
                ],
            )
        }));
        let f = MapField::new(grid.clone(), r2, &init).unwrap();
        // interior nodes only: the linear map is not periodic
        let idx = grid.index(0, 8, 8);
        let j = f.jet(idx).unwrap();
        for al in 0..2 {
            for i in 0..2 {
                assert!((j.df(al, i) - b[al][i]).abs() < 1e-13);
                for k in 0..2 {
                    assert!(j.ddf(al, i, k).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dilation_jet_at_origin_is_half_identity() {
        let mut errs = Vec::new();
        for res in [32, 64] {
            let grid = Arc::new(build_grid(&s2(), res).unwrap());
            let f = MapField::new(grid.clone(), s2(), &InitialMap::Dilation(0.5)).unwrap();
            let origin = grid.index(0, res / 2, res / 2);
            let j = f.jet(origin).unwrap();
            let e = (j.df(0, 0) - 0.5)
                .abs()
                .max((j.df(1, 1) - 0.5).abs())
                .max(j.df(0, 1).abs())
                .max(j.df(1, 0).abs());
            errs.push(e);
        }
        assert!(errs[0] < 0.01);
        assert!(errs[0] / errs[1] > 3.5, "{errs:?}");
    }

    #[test]
    fn single_chart_exchange_is_identity() {
        let r2 = ModelManifold::euclidean(2).unwrap();
        let grid = Arc::new(build_grid(&r2, 16).unwrap());
        let mut f = MapField::new(grid, r2.clone(), &InitialMap::Dilation(0.4)).unwrap();
        let before = f.clone();
        f.halo_exchange().unwrap();
        assert_eq!(f.coords, before.coords);
    }

    #[test]
    fn halo_exchange_is_idempotent() {
        let grid = Arc::new(build_grid(&s2(), 32).unwrap());
        let mut f = MapField::new(grid, s2(), &InitialMap::Dilation(0.5)).unwrap();
        let once = f.clone();
        f.halo_exchange().unwrap();
        assert_eq!(f.coords, once.coords);
        assert_eq!(f.charts, once.charts);
    }

    #[test]
    fn halo_values_match_the_exact_map() {
        let grid = Arc::new(build_grid(&s2(), 48).unwrap());
        let f = MapField::new(grid.clone(), s2(), &InitialMap::Dilation(0.5)).unwrap();
        let mut buf = vec![0.0; 2];
        for link in grid.halo() {
            let exact = InitialMap::Dilation(0.5)
                .evaluate(&grid, &s2(), grid.chart_of(link.node), &grid.coords(link.node))
                .unwrap();
            f.coords_in(link.node, exact.chart, &mut buf).unwrap();
            for (a, b) in buf.iter().zip(&exact.coords) {
                assert!((a - b).abs() < 1e-7, "{a} {b}");
            }
        }
    }

    #[test]
    fn patch_outside_active_region_is_internal_error() {
        let grid = Arc::new(build_grid(&s2(), 32).unwrap());
        let f = MapField::new(grid.clone(), s2(), &InitialMap::Dilation(0.5)).unwrap();
        let edge = grid
            .halo()
            .iter()
            .map(|l| l.node)
            .find(|&k| grid.normalized_radius(k) > 1.7)
            .unwrap();
        assert_eq!(grid.role(edge), NodeRole::Halo);
        assert!(matches!(f.patch(edge, 1), Err(Error::Internal(_))));
    }
}
