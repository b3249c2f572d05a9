//! Discretization of the domain manifold.
//!
//! A sphere domain is covered by two square lattices, one per stereographic
//! chart, each spanning `[-1.8R, 1.8R]²`. A node is *owned* by the chart in
//! which its normalized radius is smaller (`|x| ≤ R` in chart 0, `|x| < R`
//! in chart 1), so every point of the sphere has exactly one owner. Nodes
//! with `|x| ≤ 1.3R` are *computed*: they carry evolved values and full
//! stencils. Computed nodes that are not owned form the overlap. The ring
//! of up to three lattice layers around the computed disk is the *halo*,
//! filled by interpolation from the other chart through the transition map.
//!
//! Flat domains are periodic square lattices on `[0, 2π)²` with no halo.

use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::manifold::{ChartPoint, ManifoldKind, ModelManifold, SPHERE_CHART_RADIUS};

/// Normalized radius of the computed disk in each sphere chart.
pub const COMPUTED_RADIUS: f64 = 1.3;
/// Number of lattice layers in the halo ring.
pub const HALO_LAYERS: usize = 3;
/// Points per axis of the Lagrange stencil used to fill halo nodes.
pub const HALO_STENCIL_WIDTH: usize = 6;
pub const MIN_RESOLUTION: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Owned,
    Overlap,
    Halo,
    Inactive,
}

impl NodeRole {
    pub fn is_computed(self) -> bool {
        matches!(self, NodeRole::Owned | NodeRole::Overlap)
    }

    pub fn has_value(self) -> bool {
        !matches!(self, NodeRole::Inactive)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum BoundaryPolicy {
    /// Two stereographic charts, no boundary.
    Atlas,
    /// Periodic square of the given side length.
    Periodic { period: f64 },
}

/// Tensor-product Lagrange interpolation stencil on one chart lattice.
#[derive(Clone, Debug)]
pub struct Stencil {
    pub nodes: Vec<usize>,
    pub weights: Vec<f64>,
}

impl Stencil {
    /// Node carrying the largest weight.
    pub fn anchor(&self) -> usize {
        let mut best = 0;
        for (k, w) in self.weights.iter().enumerate() {
            if w.abs() > self.weights[best].abs() {
                best = k;
            }
        }
        self.nodes[best]
    }
}

#[derive(Clone, Debug)]
pub struct HaloLink {
    pub node: usize,
    pub stencil: Stencil,
}

#[derive(Clone, Debug)]
pub struct DomainGrid {
    manifold: ModelManifold,
    policy: BoundaryPolicy,
    resolution: usize,
    n: usize,
    h: f64,
    lo: f64,
    roles: Vec<NodeRole>,
    owned: Vec<usize>,
    computed: Vec<usize>,
    halo: Vec<HaloLink>,
}

fn lagrange_weights(x: f64, lo: f64, h: f64, first: isize, width: usize) -> Vec<f64> {
    let t = |k: usize| lo + (first + k as isize) as f64 * h;
    (0..width)
        .map(|k| {
            let mut w = 1.0;
            for l in 0..width {
                if l != k {
                    w *= (x - t(l)) / (t(k) - t(l));
                }
            }
            w
        })
        .collect()
}

pub fn build_grid(manifold: &ModelManifold, resolution: usize) -> Result<DomainGrid> {
    if resolution < MIN_RESOLUTION {
        return Err(Error::config(
            "resolution",
            format!("must be at least {MIN_RESOLUTION}, got {resolution}"),
        ));
    }
    if manifold.dim() != 2 {
        return Err(Error::config(
            "domain_dim",
            "only 2-dimensional domains are discretized",
        ));
    }
    match manifold.kind() {
        ManifoldKind::Sphere => build_atlas(manifold, resolution),
        ManifoldKind::Euclidean => Ok(build_periodic(manifold, resolution)),
        ManifoldKind::Hyperbolic => Err(Error::config(
            "domain_kind",
            "the domain must be compact; hyperbolic domains are not supported",
        )),
    }
}

fn build_periodic(manifold: &ModelManifold, resolution: usize) -> DomainGrid {
    let n = resolution;
    let period = 2.0 * PI;
    let all: Vec<usize> = (0..n * n).collect();
    DomainGrid {
        manifold: manifold.clone(),
        policy: BoundaryPolicy::Periodic { period },
        resolution,
        n,
        h: period / n as f64,
        lo: 0.0,
        roles: vec![NodeRole::Owned; n * n],
        owned: all.clone(),
        computed: all,
        halo: Vec::new(),
    }
}

fn build_atlas(manifold: &ModelManifold, resolution: usize) -> Result<DomainGrid> {
    let scale = manifold.length_scale();
    let n = resolution + 1;
    let extent = SPHERE_CHART_RADIUS * scale;
    let h = 2.0 * extent / resolution as f64;
    let mut grid = DomainGrid {
        manifold: manifold.clone(),
        policy: BoundaryPolicy::Atlas,
        resolution,
        n,
        h,
        lo: -extent,
        roles: vec![NodeRole::Inactive; 2 * n * n],
        owned: Vec::new(),
        computed: Vec::new(),
        halo: Vec::new(),
    };
    for idx in 0..grid.node_count() {
        let r = grid.normalized_radius(idx);
        let owned = if grid.chart_of(idx) == 0 { r <= 1.0 } else { r < 1.0 };
        grid.roles[idx] = if owned {
            NodeRole::Owned
        } else if r <= COMPUTED_RADIUS {
            NodeRole::Overlap
        } else {
            NodeRole::Inactive
        };
    }
    let too_coarse = || {
        Error::config(
            "resolution",
            format!(
                "{resolution} is too coarse for the two-chart overlap \
                 (halo stencils would leave the computed disk)"
            ),
        )
    };
    let layers = HALO_LAYERS as isize;
    let mut halo_nodes = Vec::new();
    for idx in 0..grid.node_count() {
        if grid.roles[idx] != NodeRole::Inactive {
            continue;
        }
        let (c, i, j) = grid.split(idx);
        let near = (-layers..=layers).any(|di| {
            (-layers..=layers).any(|dj| {
                grid.lattice_index(c, i as isize + di, j as isize + dj)
                    .is_some_and(|k| grid.roles[k].is_computed())
            })
        });
        if near {
            if grid.normalized_radius(idx) > SPHERE_CHART_RADIUS {
                return Err(too_coarse());
            }
            halo_nodes.push(idx);
        }
    }
    for &idx in &halo_nodes {
        grid.roles[idx] = NodeRole::Halo;
    }
    for idx in 0..grid.node_count() {
        match grid.roles[idx] {
            NodeRole::Owned => {
                grid.owned.push(idx);
                grid.computed.push(idx);
            }
            NodeRole::Overlap => grid.computed.push(idx),
            _ => {}
        }
    }
    let roles = grid.roles.clone();
    for &idx in &halo_nodes {
        let c = grid.chart_of(idx);
        let x = grid.coords(idx);
        let mut u = [0.0; 2];
        manifold
            .transfer(c, &x, 1 - c, &mut u)
            .map_err(|_| too_coarse())?;
        let stencil = grid
            .stencil_at(1 - c, u, HALO_STENCIL_WIDTH, |k| roles[k].is_computed())
            .ok_or_else(too_coarse)?;
        grid.halo.push(HaloLink { node: idx, stencil });
    }
    Ok(grid)
}

impl DomainGrid {
    pub fn manifold(&self) -> &ModelManifold {
        &self.manifold
    }

    pub fn policy(&self) -> &BoundaryPolicy {
        &self.policy
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Lattice spacing in chart coordinates.
    pub fn h(&self) -> f64 {
        self.h
    }

    /// Nodes per lattice axis.
    pub fn nodes_per_axis(&self) -> usize {
        self.n
    }

    pub fn chart_count(&self) -> usize {
        self.roles.len() / (self.n * self.n)
    }

    pub fn node_count(&self) -> usize {
        self.roles.len()
    }

    pub fn role(&self, idx: usize) -> NodeRole {
        self.roles[idx]
    }

    pub fn owned(&self) -> &[usize] {
        &self.owned
    }

    pub fn computed(&self) -> &[usize] {
        &self.computed
    }

    pub fn halo(&self) -> &[HaloLink] {
        &self.halo
    }

    pub fn is_periodic(&self) -> bool {
        matches!(self.policy, BoundaryPolicy::Periodic { .. })
    }

    #[inline]
    pub fn chart_of(&self, idx: usize) -> u8 {
        (idx / (self.n * self.n)) as u8
    }

    #[inline]
    pub fn split(&self, idx: usize) -> (u8, usize, usize) {
        let nn = self.n * self.n;
        let c = idx / nn;
        let r = idx % nn;
        (c as u8, r / self.n, r % self.n)
    }

    #[inline]
    pub fn index(&self, chart: u8, i: usize, j: usize) -> usize {
        chart as usize * self.n * self.n + i * self.n + j
    }

    /// Index of lattice position `(i, j)` in `chart`, wrapping on periodic
    /// domains; `None` outside the lattice.
    #[inline]
    pub fn lattice_index(&self, chart: u8, i: isize, j: isize) -> Option<usize> {
        let n = self.n as isize;
        if self.is_periodic() {
            Some(self.index(chart, i.rem_euclid(n) as usize, j.rem_euclid(n) as usize))
        } else if (0..n).contains(&i) && (0..n).contains(&j) {
            Some(self.index(chart, i as usize, j as usize))
        } else {
            None
        }
    }

    /// Neighbor at lattice offset `(di, dj)` carrying a value, if any.
    #[inline]
    pub fn neighbor(&self, idx: usize, di: isize, dj: isize) -> Option<usize> {
        let (c, i, j) = self.split(idx);
        self.lattice_index(c, i as isize + di, j as isize + dj)
            .filter(|k| self.roles[*k].has_value())
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [f64; 2] {
        let (_, i, j) = self.split(idx);
        [self.lo + i as f64 * self.h, self.lo + j as f64 * self.h]
    }

    pub fn point(&self, idx: usize) -> ChartPoint {
        ChartPoint::new(self.chart_of(idx), self.coords(idx).to_vec())
    }

    /// Chart radius of a node in units of the curvature length scale.
    pub fn normalized_radius(&self, idx: usize) -> f64 {
        let x = self.coords(idx);
        (x[0] * x[0] + x[1] * x[1]).sqrt() / self.manifold.length_scale()
    }

    /// Ambient position of a node: a point of the round sphere in `R³`, or
    /// the periodic coordinates on flat domains.
    pub fn embed(&self, idx: usize) -> Vec<f64> {
        self.embed_point(self.chart_of(idx), &self.coords(idx))
    }

    pub fn embed_point(&self, chart: u8, x: &[f64]) -> Vec<f64> {
        match self.policy {
            BoundaryPolicy::Atlas => self.manifold.sphere_embedding(chart, x),
            BoundaryPolicy::Periodic { .. } => x.to_vec(),
        }
    }

    /// Lagrange stencil of `width` points per axis around `p` in `chart`
    /// whose nodes all satisfy `accept`. The stencil is shifted by up to two
    /// lattice cells when the centered choice is rejected.
    pub fn stencil_at(
        &self,
        chart: u8,
        p: [f64; 2],
        width: usize,
        accept: impl Fn(usize) -> bool,
    ) -> Option<Stencil> {
        let half = (width / 2) as isize - 1;
        let base = |x: f64| ((x - self.lo) / self.h).floor() as isize - half;
        let (b0, b1) = (base(p[0]), base(p[1]));
        let shifts = [0isize, -1, 1, -2, 2];
        for s0 in shifts {
            for s1 in shifts {
                let (f0, f1) = (b0 + s0, b1 + s1);
                let mut nodes = Vec::with_capacity(width * width);
                let ok = (0..width as isize).all(|a| {
                    (0..width as isize).all(|b| match self.lattice_index(chart, f0 + a, f1 + b) {
                        Some(k) if self.roles[k].has_value() && accept(k) => {
                            nodes.push(k);
                            true
                        }
                        _ => false,
                    })
                });
                if !ok {
                    continue;
                }
                let w0 = lagrange_weights(p[0], self.lo, self.h, f0, width);
                let w1 = lagrange_weights(p[1], self.lo, self.h, f1, width);
                let weights = w0
                    .iter()
                    .flat_map(|a| w1.iter().map(move |b| a * b))
                    .collect();
                return Some(Stencil { nodes, weights });
            }
        }
        None
    }

    /// Re-expresses a domain point in its preferred chart: the sphere chart
    /// with the smaller radius, or the fundamental cell of a periodic domain.
    pub fn canonical(&self, p: &ChartPoint) -> Result<ChartPoint> {
        match self.policy {
            BoundaryPolicy::Atlas => {
                let r = p.coords.iter().map(|c| c * c).sum::<f64>().sqrt()
                    / self.manifold.length_scale();
                if r > 1.0 {
                    self.manifold.transition(p)
                } else {
                    Ok(p.clone())
                }
            }
            BoundaryPolicy::Periodic { period } => Ok(ChartPoint::new(
                0,
                p.coords.iter().map(|c| c.rem_euclid(period)).collect(),
            )),
        }
    }

    /// Geodesic distance between two domain points.
    pub fn distance(&self, p: &ChartPoint, q: &ChartPoint) -> Result<f64> {
        match self.policy {
            BoundaryPolicy::Atlas => self.manifold.distance(p, q),
            BoundaryPolicy::Periodic { period } => Ok(p
                .coords
                .iter()
                .zip(&q.coords)
                .map(|(a, b)| {
                    let d = (a - b).rem_euclid(period);
                    d.min(period - d).powi(2)
                })
                .sum::<f64>()
                .sqrt()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sphere_grid_layout() {
        let s2 = ModelManifold::sphere(2, 1.0).unwrap();
        let g = build_grid(&s2, 64).unwrap();
        assert_eq!(g.chart_count(), 2);
        assert_eq!(g.nodes_per_axis(), 65);
        assert!((g.h() - 2.0 * 1.8 / 64.0).abs() < 1e-15);
        let origin = g.index(0, 32, 32);
        assert_eq!(g.coords(origin), [0.0, 0.0]);
        assert_eq!(g.role(origin), NodeRole::Owned);
        assert!(!g.halo().is_empty());
        // halo is at least three layers deep around every computed node
        for &k in g.computed() {
            for di in -3..=3 {
                for dj in -3..=3 {
                    assert!(g.neighbor(k, di, dj).is_some());
                }
            }
        }
    }

    #[test]
    fn every_sphere_point_has_one_owner() {
        let s2 = ModelManifold::sphere(2, 1.0).unwrap();
        let g = build_grid(&s2, 48).unwrap();
        for &k in g.owned() {
            let r = g.normalized_radius(k);
            assert!(r <= 1.0);
            if g.chart_of(k) == 1 {
                assert!(r < 1.0);
            }
        }
    }

    #[test]
    fn periodic_grid_wraps() {
        let r2 = ModelManifold::euclidean(2).unwrap();
        let g = build_grid(&r2, 32).unwrap();
        assert_eq!(g.chart_count(), 1);
        assert_eq!(g.owned().len(), 32 * 32);
        let corner = g.index(0, 0, 0);
        assert_eq!(g.neighbor(corner, -1, -1), Some(g.index(0, 31, 31)));
        assert!(g.halo().is_empty());
    }

    #[test]
    fn too_small_resolution_is_rejected() {
        let s2 = ModelManifold::sphere(2, 1.0).unwrap();
        let err = build_grid(&s2, 4).unwrap_err();
        assert_eq!(err.config_keys(), vec!["resolution"]);
        let err = build_grid(&s2, 16).unwrap_err();
        assert_eq!(err.config_keys(), vec!["resolution"]);
        let h2 = ModelManifold::hyperbolic(2, -1.0).unwrap();
        assert!(build_grid(&h2, 32).is_err());
    }

    #[test]
    fn halo_stencils_reproduce_quintics() {
        let s2 = ModelManifold::sphere(2, 1.0).unwrap();
        let g = build_grid(&s2, 32).unwrap();
        let poly = |x: [f64; 2]| x[0].powi(5) - 2.0 * x[0] * x[1].powi(4) + x[1].powi(3) + 0.5;
        for link in g.halo() {
            let c = g.chart_of(link.node);
            let mut u = [0.0; 2];
            s2.transfer(c, &g.coords(link.node), 1 - c, &mut u).unwrap();
            let v: f64 = link
                .stencil
                .nodes
                .iter()
                .zip(&link.stencil.weights)
                .map(|(&k, w)| w * poly(g.coords(k)))
                .sum();
            assert!((v - poly(u)).abs() < 1e-11, "{v} vs {}", poly(u));
        }
    }

    #[test]
    fn canonical_chart_has_small_radius() {
        let s2 = ModelManifold::sphere(2, 1.0).unwrap();
        let g = build_grid(&s2, 32).unwrap();
        let p = g.canonical(&ChartPoint::new(0, vec![1.5, 0.2])).unwrap();
        assert_eq!(p.chart, 1);
        assert!(p.coords.iter().map(|c| c * c).sum::<f64>() < 1.0);
        let t = build_grid(&ModelManifold::euclidean(2).unwrap(), 16).unwrap();
        let a = ChartPoint::new(0, vec![0.1, 0.0]);
        let b = ChartPoint::new(0, vec![2.0 * PI - 0.1, 0.0]);
        assert!((t.distance(&a, &b).unwrap() - 0.2).abs() < 1e-12);
    }
}
