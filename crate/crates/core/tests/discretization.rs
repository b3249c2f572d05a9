//! Jets and halo values against closed-form maps.

use std::sync::Arc;

use mcflow::field::lift_planar;
use mcflow::grid::NodeRole;
use mcflow::{build_grid, ChartPoint, InitialMap, MapField, ModelManifold};

fn torus_map(x: &[f64]) -> [f64; 2] {
    [x[0].sin() * x[1].cos(), 0.5 * (2.0 * x[1]).sin() + 0.3 * x[0].cos()]
}

fn torus_jet(x: &[f64]) -> ([[f64; 2]; 2], [[[f64; 2]; 2]; 2]) {
    let (s0, c0, s1, c1) = (x[0].sin(), x[0].cos(), x[1].sin(), x[1].cos());
    let d1 = [[c0 * c1, -s0 * s1], [-0.3 * s0, (2.0 * x[1]).cos()]];
    let d2 = [
        [[-s0 * c1, -c0 * s1], [-c0 * s1, -s0 * c1]],
        [[-0.3 * c0, 0.0], [0.0, -2.0 * (2.0 * x[1]).sin()]],
    ];
    (d1, d2)
}

/// Largest first- and second-derivative errors over owned nodes.
fn torus_jet_errors(res: usize) -> (f64, f64) {
    let e = ModelManifold::euclidean(2).unwrap();
    let grid = Arc::new(build_grid(&e, res).unwrap());
    let init = InitialMap::Custom(Arc::new(|x: &[f64]| ChartPoint::new(0, torus_map(x).to_vec())));
    let field = MapField::new(grid.clone(), e, &init).unwrap();
    let (mut e1, mut e2) = (0.0f64, 0.0f64);
    for &k in grid.owned() {
        let x = grid.coords(k);
        let jet = field.jet(k).unwrap();
        let (d1, d2) = torus_jet(&x);
        for a in 0..2 {
            for i in 0..2 {
                e1 = e1.max((jet.df(a, i) - d1[a][i]).abs());
                for j in 0..2 {
                    e2 = e2.max((jet.ddf(a, i, j) - d2[a][i][j]).abs());
                }
            }
        }
    }
    (e1, e2)
}

#[test]
fn jets_converge_at_second_order() {
    let coarse = torus_jet_errors(32);
    let fine = torus_jet_errors(64);
    assert!(coarse.0 < 5e-2 && coarse.1 < 5e-2, "{coarse:?}");
    assert!(coarse.0 / fine.0 > 3.5, "{coarse:?} {fine:?}");
    assert!(coarse.1 / fine.1 > 3.5, "{coarse:?} {fine:?}");
}

/// Largest distance between interpolated halo values and the exact map.
fn halo_error(res: usize) -> f64 {
    let s = ModelManifold::sphere(2, 1.0).unwrap();
    let grid = Arc::new(build_grid(&s, res).unwrap());
    let init = InitialMap::Dilation(0.5);
    let field = MapField::new(grid.clone(), s.clone(), &init).unwrap();
    let mut err = 0.0f64;
    for link in grid.halo() {
        let k = link.node;
        assert_eq!(grid.role(k), NodeRole::Halo);
        let e = grid.embed(k);
        let exact = lift_planar(&s, &[0.5 * e[0], 0.5 * e[1]]).unwrap();
        err = err.max(s.distance(&field.value(k), &exact).unwrap());
    }
    err
}

#[test]
fn halo_interpolation_is_high_order() {
    let coarse = halo_error(32);
    let fine = halo_error(64);
    assert!(coarse < 1e-4, "{coarse}");
    assert!(coarse / fine > 16.0, "{coarse} {fine}");
}

#[test]
fn halo_exchange_is_idempotent() {
    let s = ModelManifold::sphere(2, 1.0).unwrap();
    let grid = Arc::new(build_grid(&s, 32).unwrap());
    let mut field = MapField::new(grid, s, &InitialMap::Dilation(0.5)).unwrap();
    let before = field.clone();
    field.halo_exchange().unwrap();
    for k in 0..field.grid().node_count() {
        if field.grid().role(k).has_value() {
            assert_eq!(field.value(k), before.value(k));
        }
    }
}

#[test]
fn owned_nodes_cover_the_sphere_once() {
    let s = ModelManifold::sphere(2, 1.0).unwrap();
    let grid = build_grid(&s, 48).unwrap();
    // every owned node in chart 1 must sit strictly closer to its own pole
    for &k in grid.owned() {
        let z = grid.embed(k)[2];
        if grid.chart_of(k) == 1 {
            assert!(z < 0.0);
        } else {
            assert!(z >= -1e-12);
        }
    }
    // owned nodes sample both hemispheres with comparable density
    let south = grid.owned().iter().filter(|&&k| grid.chart_of(k) == 1).count();
    let north = grid.owned().len() - south;
    assert!((north as f64 / south as f64 - 1.0).abs() < 0.1, "{north} {south}");
}
