//! Level curves of gridded planar fields by marching squares.
//!
//! Crossing points are found by linear interpolation along cell edges and chained
//! into polylines. Every polyline edge becomes a [`Segment`], the piece of the
//! curve over which Hausdorff integrals are approximated by the midpoint rule.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::PlanarField;
use crate::levels::GridValues;

/// Segments shorter than this fraction of the cell diagonal are merged away.
const MERGE_FRACTION: f64 = 1e-12;

/// Default gradient floor, relative to the largest gradient norm on the curve.
pub const DEFAULT_GRADIENT_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Segment {
    pub start: [f64; 2],
    pub end: [f64; 2],
    pub midpoint: [f64; 2],
    pub length: f64,
    /// `-grad f / |grad f|` at the midpoint, once attached.
    pub normal: Option<[f64; 2]>,
    /// `|grad f|` at the midpoint, once attached.
    pub grad_norm: Option<f64>,
    pub loop_id: usize,
}

/// An ordered chain of crossing points. Open polylines end on the grid boundary.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Polyline {
    pub points: Vec<[f64; 2]>,
    pub closed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Contour {
    pub level: f64,
    pub segments: Vec<Segment>,
    pub loops: Vec<Polyline>,
}

impl Contour {
    pub fn total_length(&self) -> f64 {
        neumaier(self.segments.iter().map(|s| s.length))
    }

    pub fn n_loops(&self) -> usize {
        self.loops.len()
    }

    pub fn is_closed(&self) -> bool {
        self.loops.iter().all(|l| l.closed)
    }

    pub fn midpoints(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.segments.iter().map(|s| s.midpoint)
    }

    pub fn has_normals(&self) -> bool {
        self.segments.iter().all(|s| s.normal.is_some() && s.grad_norm.is_some())
    }

    /// Gradient norms at the midpoints; requires [`attach_normals`] first.
    pub fn grad_norms(&self) -> Result<Vec<f64>> {
        self.segments
            .iter()
            .map(|s| {
                s.grad_norm
                    .ok_or_else(|| Error::InvalidInput("contour has no gradient information attached".into()))
            })
            .collect()
    }

    /// Writes `x,y,length,nx,ny,loop_id` rows, one per segment midpoint. Missing
    /// normals are written as empty fields.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["x", "y", "length", "nx", "ny", "loop_id"])
            .map_err(|e| Error::Csv(e.to_string()))?;
        for s in &self.segments {
            let (nx, ny) = match s.normal {
                Some(n) => (n[0].to_string(), n[1].to_string()),
                None => (String::new(), String::new()),
            };
            w.write_record([
                s.midpoint[0].to_string(),
                s.midpoint[1].to_string(),
                s.length.to_string(),
                nx,
                ny,
                s.loop_id.to_string(),
            ])
            .map_err(|e| Error::Csv(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Edge ids: horizontal edges `(i,j)-(i+1,j)` first, then vertical `(i,j)-(i,j+1)`.
struct EdgeIndex {
    nx: usize,
    n_horizontal: usize,
}

impl EdgeIndex {
    fn horizontal(&self, i: usize, j: usize) -> usize {
        j * (self.nx - 1) + i
    }

    fn vertical(&self, i: usize, j: usize) -> usize {
        self.n_horizontal + j * self.nx + i
    }
}

const NONE: u32 = u32::MAX;

/// Marching squares on `field` at `level`; normals are left unset.
///
/// Nodes with value `>= level` count as inside. Ambiguous saddle cells are resolved
/// by the mean of the four corner values, the bilinear value at the cell centre.
pub fn extract_contour(field: &GridValues, level: f64) -> Result<Contour> {
    let (min, max) = (field.min(), field.max());
    if !(level > min && level < max) {
        return Err(Error::EmptyContour(format!(
            "level {level:.6e} is outside the field range ({min:.6e}, {max:.6e})"
        )));
    }
    let grid = *field.grid();
    let [nx, ny] = grid.counts;
    let idx = EdgeIndex {
        nx,
        n_horizontal: (nx - 1) * ny,
    };
    let n_edges = idx.n_horizontal + nx * (ny - 1);
    let mut points: Vec<[f64; 2]> = vec![[f64::NAN; 2]; n_edges];
    let mut adjacency: Vec<[u32; 2]> = vec![[NONE; 2]; n_edges];

    let crossing = |a: [f64; 2], va: f64, b: [f64; 2], vb: f64| {
        let t = (level - va) / (vb - va);
        [a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]
    };
    let link = |adj: &mut Vec<[u32; 2]>, e1: usize, e2: usize| {
        for (from, to) in [(e1, e2), (e2, e1)] {
            let slot = &mut adj[from];
            if slot[0] == NONE {
                slot[0] = to as u32;
            } else {
                debug_assert_eq!(slot[1], NONE);
                slot[1] = to as u32;
            }
        }
    };

    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let corners = [(i, j), (i + 1, j), (i + 1, j + 1), (i, j + 1)];
            let v = corners.map(|(a, b)| field.get(a, b));
            let inside = v.map(|x| x >= level);
            let case = inside.iter().enumerate().fold(0u8, |acc, (k, &b)| acc | ((b as u8) << k));
            if case == 0 || case == 15 {
                continue;
            }
            // edges: 0 bottom (c0-c1), 1 right (c1-c2), 2 top (c3-c2), 3 left (c0-c3)
            let edge_ids = [
                idx.horizontal(i, j),
                idx.vertical(i + 1, j),
                idx.horizontal(i, j + 1),
                idx.vertical(i, j),
            ];
            let ends = [(0, 1), (1, 2), (3, 2), (0, 3)];
            for (e, &(a, b)) in ends.iter().enumerate() {
                if inside[a] != inside[b] && points[edge_ids[e]][0].is_nan() {
                    let (pa, pb) = (grid.node(corners[a].0, corners[a].1), grid.node(corners[b].0, corners[b].1));
                    points[edge_ids[e]] = crossing(pa, v[a], pb, v[b]);
                }
            }
            let pairs: &[(usize, usize)] = match case {
                // saddles: c0,c2 share one class and c1,c3 the other
                5 | 10 => {
                    let centre_inside = 0.25 * (v[0] + v[1] + v[2] + v[3]) >= level;
                    if centre_inside == inside[0] {
                        // c1 and c3 are cut off
                        &[(0, 1), (2, 3)]
                    } else {
                        &[(3, 0), (1, 2)]
                    }
                }
                _ => {
                    let crossed: Vec<usize> = (0..4).filter(|&e| inside[ends[e].0] != inside[ends[e].1]).collect();
                    debug_assert_eq!(crossed.len(), 2);
                    link(&mut adjacency, edge_ids[crossed[0]], edge_ids[crossed[1]]);
                    &[]
                }
            };
            for &(e1, e2) in pairs {
                link(&mut adjacency, edge_ids[e1], edge_ids[e2]);
            }
        }
    }

    let chains = chain_edges(&adjacency);
    let merge_below = MERGE_FRACTION * grid.cell_diagonal();
    let mut segments = Vec::new();
    let mut loops = Vec::new();
    for (edges, closed) in chains {
        let mut pts: Vec<[f64; 2]> = Vec::with_capacity(edges.len() + 1);
        for e in edges {
            let p = points[e as usize];
            if pts.last().is_none_or(|q| dist(*q, p) >= merge_below) {
                pts.push(p);
            }
        }
        if closed {
            while pts.len() > 1 && dist(pts[0], *pts.last().unwrap()) < merge_below {
                pts.pop();
            }
        }
        let needed = if closed { 3 } else { 2 };
        if pts.len() < needed {
            continue;
        }
        let loop_id = loops.len();
        let n_seg = if closed { pts.len() } else { pts.len() - 1 };
        for k in 0..n_seg {
            let (a, b) = (pts[k], pts[(k + 1) % pts.len()]);
            segments.push(Segment {
                start: a,
                end: b,
                midpoint: [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])],
                length: dist(a, b),
                normal: None,
                grad_norm: None,
                loop_id,
            });
        }
        if closed {
            pts.push(pts[0]);
        }
        loops.push(Polyline { points: pts, closed });
    }
    if segments.is_empty() {
        return Err(Error::EmptyContour(format!("no crossings found at level {level:.6e}")));
    }
    Ok(Contour { level, segments, loops })
}

/// Walks the crossing graph (every vertex has degree 1 or 2). Open chains start at
/// degree-one vertices; the remaining vertices form cycles.
fn chain_edges(adjacency: &[[u32; 2]]) -> Vec<(Vec<u32>, bool)> {
    let mut visited = vec![false; adjacency.len()];
    let mut chains = Vec::new();
    let walk = |start: usize, visited: &mut Vec<bool>| {
        let mut chain = vec![start as u32];
        visited[start] = true;
        let mut prev = NONE;
        let mut cur = start as u32;
        loop {
            let [a, b] = adjacency[cur as usize];
            let next = if a != NONE && a != prev && !visited[a as usize] {
                a
            } else if b != NONE && b != prev && !visited[b as usize] {
                b
            } else {
                break;
            };
            visited[next as usize] = true;
            chain.push(next);
            prev = cur;
            cur = next;
        }
        chain
    };
    for (e, adj) in adjacency.iter().enumerate() {
        if !visited[e] && adj[0] != NONE && adj[1] == NONE {
            chains.push((walk(e, &mut visited), false));
        }
    }
    for (e, adj) in adjacency.iter().enumerate() {
        if !visited[e] && adj[0] != NONE {
            chains.push((walk(e, &mut visited), true));
        }
    }
    chains
}

/// Sets `normal = -grad f / |grad f|` and the gradient norm at every midpoint.
///
/// Fails with [`Error::DegenerateGradient`] when some norm falls below
/// [`DEFAULT_GRADIENT_FLOOR`] times the largest norm on the curve.
pub fn attach_normals<F: PlanarField + ?Sized>(contour: Contour, field: &F) -> Result<Contour> {
    attach_normals_with_floor(contour, field, DEFAULT_GRADIENT_FLOOR)
}

pub fn attach_normals_with_floor<F: PlanarField + ?Sized>(
    mut contour: Contour,
    field: &F,
    relative_floor: f64,
) -> Result<Contour> {
    use rayon::prelude::*;
    let grads: Vec<_> = contour.segments.par_iter().map(|s| field.gradient(s.midpoint)).collect();
    let scale = grads.iter().map(|g| g.norm()).fold(0.0, f64::max);
    let floor = relative_floor * scale;
    for (s, g) in contour.segments.iter_mut().zip(&grads) {
        let norm = g.norm();
        if !(norm > floor) || !norm.is_finite() {
            return Err(Error::DegenerateGradient {
                norm,
                x: s.midpoint[0],
                y: s.midpoint[1],
            });
        }
        s.normal = Some([-g[0] / norm, -g[1] / norm]);
        s.grad_norm = Some(norm);
    }
    Ok(contour)
}

/// `sum_i integrand(midpoint_i) * length_i`, compensated.
pub fn hausdorff_integral(contour: &Contour, integrand: impl Fn([f64; 2]) -> f64) -> f64 {
    neumaier(contour.segments.iter().map(|s| integrand(s.midpoint) * s.length))
}

/// Neumaier-compensated sum in iteration order.
pub(crate) fn neumaier(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::density_models::MixtureDensity;
    use crate::levels::EvalGrid;
    use std::f64::consts::PI;

    fn radial(count: usize) -> GridValues {
        GridValues::from_fn(EvalGrid::square(-2.0, 2.0, count).unwrap(), |p| p[0].hypot(p[1]))
    }

    #[test]
    fn unit_circle_length() {
        let c = extract_contour(&radial(512), 1.0).unwrap();
        assert_eq!(c.n_loops(), 1);
        assert!(c.is_closed());
        let rel = (c.total_length() - 2.0 * PI).abs() / (2.0 * PI);
        assert!(rel < 5e-3, "{rel}");
        let closing = &c.loops[0].points;
        assert_eq!(closing.first(), closing.last());
    }

    #[test]
    fn square_perimeter() {
        let g = GridValues::from_fn(EvalGrid::square(-2.0, 2.0, 401).unwrap(), |p| p[0].abs().max(p[1].abs()));
        let c = extract_contour(&g, 1.0).unwrap();
        assert_eq!(c.n_loops(), 1);
        assert!((c.total_length() - 8.0).abs() / 8.0 < 0.01, "{}", c.total_length());
    }

    #[test]
    fn normal_density_half_level_loop() {
        let m = MixtureDensity::standard_bivariate_normal();
        let grid = EvalGrid::square(-4.0, 4.0, 512).unwrap();
        let c = extract_contour(&m.grid_values(&grid), 0.5 / (2.0 * PI)).unwrap();
        let r = (2.0 * 2f64.ln()).sqrt();
        assert_eq!(c.n_loops(), 1);
        assert!((c.total_length() / (2.0 * PI * r) - 1.0).abs() < 5e-3);
    }

    #[test]
    fn level_outside_range_is_empty() {
        let g = radial(64);
        assert!(matches!(extract_contour(&g, 10.0), Err(Error::EmptyContour(_))));
        assert!(matches!(extract_contour(&g, -1.0), Err(Error::EmptyContour(_))));
    }

    #[test]
    fn open_chains_end_on_the_boundary() {
        // a straight line x = 0.3 crossing the whole box
        let g = GridValues::from_fn(EvalGrid::square(-1.0, 1.0, 64).unwrap(), |p| p[0]);
        let c = extract_contour(&g, 0.3).unwrap();
        assert_eq!(c.n_loops(), 1);
        assert!(!c.loops[0].closed);
        let span = 2.0 - 2.0 / 64.0;
        assert!((c.total_length() - span).abs() < 1e-12);
    }

    #[test]
    fn two_blobs_give_two_loops() {
        let g = GridValues::from_fn(EvalGrid::square(-4.0, 4.0, 256).unwrap(), |p| {
            (-((p[0] - 1.5).powi(2) + p[1] * p[1])).exp() + (-((p[0] + 1.5).powi(2) + p[1] * p[1])).exp()
        });
        let c = extract_contour(&g, 0.5).unwrap();
        assert_eq!(c.n_loops(), 2);
        assert!(c.is_closed());
    }

    #[test]
    fn saddle_cells_resolve_deterministically() {
        // checkerboard corner values around a single cell
        let grid = EvalGrid::square(0.0, 2.0, 2).unwrap();
        let g = GridValues::new(grid, vec![1.0, 0.0, 0.0, 1.0]);
        let c = extract_contour(&g, 0.6).unwrap();
        assert_eq!(c.segments.len(), 2);
        let c2 = extract_contour(&g, 0.4).unwrap();
        assert_eq!(c2.segments.len(), 2);
        assert_ne!(c.segments[0].midpoint, c2.segments[0].midpoint);
    }

    #[test]
    fn normals_point_outward_and_are_perpendicular() {
        let m = MixtureDensity::standard_bivariate_normal();
        let grid = EvalGrid::square(-4.0, 4.0, 512).unwrap();
        let c = extract_contour(&m.grid_values(&grid), 0.3 / (2.0 * PI)).unwrap();
        let c = attach_normals(c, &m).unwrap();
        for s in &c.segments {
            let n = s.normal.unwrap();
            assert!((n[0].hypot(n[1]) - 1.0).abs() < 1e-9);
            let r = s.midpoint[0].hypot(s.midpoint[1]);
            assert!((n[0] * s.midpoint[0] + n[1] * s.midpoint[1]) / r > 0.999);
            let t = [(s.end[0] - s.start[0]) / s.length, (s.end[1] - s.start[1]) / s.length];
            assert!((n[0] * t[0] + n[1] * t[1]).abs() < 0.05);
        }
    }

    #[test]
    fn vanishing_gradient_is_reported() {
        struct Flat;
        impl PlanarField for Flat {
            fn value(&self, x: [f64; 2]) -> f64 {
                x[0]
            }
            fn gradient(&self, x: [f64; 2]) -> nalgebra::Vector2<f64> {
                nalgebra::Vector2::new(if x[1] > 0.0 { 1.0 } else { 0.0 }, 0.0)
            }
            fn hessian(&self, _: [f64; 2]) -> nalgebra::Matrix2<f64> {
                nalgebra::Matrix2::zeros()
            }
        }
        let g = GridValues::from_fn(EvalGrid::square(-1.0, 1.0, 64).unwrap(), |p| p[0]);
        let c = extract_contour(&g, 0.1).unwrap();
        assert!(matches!(attach_normals(c, &Flat), Err(Error::DegenerateGradient { .. })));
    }

    #[test]
    fn integral_of_x_squared_on_unit_circle() {
        let c = extract_contour(&radial(512), 1.0).unwrap();
        assert!((hausdorff_integral(&c, |_| 1.0) - c.total_length()).abs() < 1e-12);
        let v = hausdorff_integral(&c, |p| p[0] * p[0]);
        // integral of cos^2 over a full turn, by a fine midpoint rule in theta
        let m = 100_000;
        let oracle: f64 = (0..m)
            .map(|k| {
                let th = (k as f64 + 0.5) * 2.0 * PI / m as f64;
                th.cos().powi(2) * 2.0 * PI / m as f64
            })
            .sum();
        assert!((v - oracle).abs() / oracle < 5e-3, "{v} vs {oracle}");
    }

    #[test]
    fn length_converges_at_second_order() {
        let errs: Vec<f64> = [128, 256, 512]
            .iter()
            .map(|&m| (extract_contour(&radial(m), 1.0).unwrap().total_length() - 2.0 * PI).abs())
            .collect();
        for w in errs.windows(2) {
            let order = (w[0] / w[1]).log2();
            assert!(order >= 1.8, "order {order} from {errs:?}");
        }
    }

    #[test]
    fn csv_schema() {
        let c = extract_contour(&radial(64), 1.0).unwrap();
        let mut buf = Vec::new();
        c.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("x,y,length,nx,ny,loop_id\n"));
        assert_eq!(text.lines().count(), c.segments.len() + 1);
    }
}
