//! Reference generation: any-angle grid search, spline smoothing and a
//! trapezoidal velocity profile.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::dynamics::{InputVec, StateVec};
use crate::error::{Error, Result};
use crate::geometry::Ellipsoid;
use crate::ocp::ReferenceTrajectory;

/// Boolean occupancy grid. Cell `(ix, iy)` covers
/// `[origin + (ix, iy)·res, origin + (ix+1, iy+1)·res)`; row `iy = 0` is the
/// bottom row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyGrid {
    resolution: f64,
    width: usize,
    height: usize,
    origin: [f64; 2],
    occupied: Vec<bool>,
}

impl OccupancyGrid {
    pub fn new(resolution: f64, width: usize, height: usize, origin: [f64; 2], occupied: Vec<bool>) -> Result<Self> {
        if !(resolution > 0.0 && resolution.is_finite()) {
            return Err(Error::invalid(format!("grid resolution must be positive, got {resolution}")));
        }
        if width == 0 || height == 0 {
            return Err(Error::invalid("grid must have at least one cell"));
        }
        if occupied.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "occupancy has {} cells, expected {}",
                occupied.len(),
                width * height
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Self {
            resolution,
            width,
            height,
            origin,
            occupied,
        })
    }

    pub fn empty(resolution: f64, width: usize, height: usize, origin: [f64; 2]) -> Result<Self> {
        Self::new(resolution, width, height, origin, vec![false; width * height])
    }

    /// Parses rows of `.` (free) and `#` (occupied); the first row is the top
    /// of the map.
    pub fn from_rows<S: AsRef<str>>(rows: &[S], resolution: f64, origin: [f64; 2]) -> Result<Self> {
        let height = rows.len();
        if height == 0 {
            return Err(Error::invalid("map has no rows"));
        }
        let width = rows[0].as_ref().chars().count();
        let mut occupied = vec![false; width * height];
        for (r, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.chars().count() != width {
                return Err(Error::invalid(format!(
                    "map row {} has {} cells, expected {width}",
                    r + 1,
                    row.chars().count()
                )));
            }
            let iy = height - 1 - r;
            for (ix, ch) in row.chars().enumerate() {
                occupied[iy * width + ix] = match ch {
                    '.' => false,
                    '#' => true,
                    other => {
                        return Err(Error::invalid(format!(
                            "map row {} column {}: unexpected character {other:?}",
                            r + 1,
                            ix + 1
                        )))
                    }
                };
            }
        }
        Self::new(resolution, width, height, origin, occupied)
    }

    pub fn from_text(text: &str, resolution: f64, origin: [f64; 2]) -> Result<Self> {
        let rows: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
        Self::from_rows(&rows, resolution, origin)
    }

    /// Marks every cell touched by one of the ellipses, tested on a 3 x 3
    /// grid of points spanning the cell.
    pub fn rasterize(
        obstacles: &[Ellipsoid],
        resolution: f64,
        width: usize,
        height: usize,
        origin: [f64; 2],
    ) -> Result<Self> {
        let mut grid = Self::empty(resolution, width, height, origin)?;
        for iy in 0..height {
            for ix in 0..width {
                let x0 = origin[0] + ix as f64 * resolution;
                let y0 = origin[1] + iy as f64 * resolution;
                let hit = obstacles.iter().any(|e| {
                    (0..3).any(|i| {
                        (0..3).any(|j| {
                            let p = nalgebra::DVector::from_row_slice(&[
                                x0 + 0.5 * i as f64 * resolution,
                                y0 + 0.5 * j as f64 * resolution,
                            ]);
                            e.contains(&p)
                        })
                    })
                });
                grid.occupied[iy * width + ix] = hit;
            }
        }
        Ok(grid)
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn origin(&self) -> [f64; 2] {
        self.origin
    }

    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.width + ix
    }

    pub fn is_occupied(&self, ix: usize, iy: usize) -> bool {
        self.occupied[self.index(ix, iy)]
    }

    pub fn set_occupied(&mut self, ix: usize, iy: usize, value: bool) {
        let i = self.index(ix, iy);
        self.occupied[i] = value;
    }

    /// Occupied or outside the grid.
    pub fn blocked(&self, ix: i64, iy: i64) -> bool {
        if ix < 0 || iy < 0 || ix >= self.width as i64 || iy >= self.height as i64 {
            return true;
        }
        self.is_occupied(ix as usize, iy as usize)
    }

    pub fn cell_of(&self, p: &Vector2<f64>) -> Option<(usize, usize)> {
        let gx = ((p[0] - self.origin[0]) / self.resolution).floor();
        let gy = ((p[1] - self.origin[1]) / self.resolution).floor();
        if gx < 0.0 || gy < 0.0 || gx >= self.width as f64 || gy >= self.height as f64 {
            return None;
        }
        Some((gx as usize, gy as usize))
    }

    pub fn cell_center(&self, ix: usize, iy: usize) -> Vector2<f64> {
        Vector2::new(
            self.origin[0] + (ix as f64 + 0.5) * self.resolution,
            self.origin[1] + (iy as f64 + 0.5) * self.resolution,
        )
    }

    /// Rows of `.` and `#`, top row first.
    pub fn to_rows(&self) -> Vec<String> {
        (0..self.height)
            .rev()
            .map(|iy| {
                (0..self.width)
                    .map(|ix| if self.is_occupied(ix, iy) { '#' } else { '.' })
                    .collect()
            })
            .collect()
    }

    /// Cells crossed by the segment `a → b`. When the segment passes exactly
    /// through a cell corner, both cells sharing that corner are included.
    pub fn supercover(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> Vec<(i64, i64)> {
        let x0 = (a[0] - self.origin[0]) / self.resolution;
        let y0 = (a[1] - self.origin[1]) / self.resolution;
        let x1 = (b[0] - self.origin[0]) / self.resolution;
        let y1 = (b[1] - self.origin[1]) / self.resolution;
        let (mut ix, mut iy) = (x0.floor() as i64, y0.floor() as i64);
        let (jx, jy) = (x1.floor() as i64, y1.floor() as i64);
        let (dx, dy) = (x1 - x0, y1 - y0);
        let step_x: i64 = if dx > 0.0 { 1 } else { -1 };
        let step_y: i64 = if dy > 0.0 { 1 } else { -1 };
        let t_delta_x = if dx != 0.0 { 1.0 / dx.abs() } else { f64::INFINITY };
        let t_delta_y = if dy != 0.0 { 1.0 / dy.abs() } else { f64::INFINITY };
        let mut t_max_x = if dx > 0.0 {
            (ix as f64 + 1.0 - x0) / dx
        } else if dx < 0.0 {
            (x0 - ix as f64) / -dx
        } else {
            f64::INFINITY
        };
        let mut t_max_y = if dy > 0.0 {
            (iy as f64 + 1.0 - y0) / dy
        } else if dy < 0.0 {
            (y0 - iy as f64) / -dy
        } else {
            f64::INFINITY
        };
        let mut cells = vec![(ix, iy)];
        let max_steps = ((jx - ix).abs() + (jy - iy).abs()) as usize + 2;
        for _ in 0..max_steps {
            if (ix, iy) == (jx, jy) {
                break;
            }
            let tm = t_max_x.min(t_max_y);
            if tm > 1.0 + 1e-12 {
                break;
            }
            if (t_max_x - t_max_y).abs() <= 1e-12 {
                cells.push((ix + step_x, iy));
                cells.push((ix, iy + step_y));
                ix += step_x;
                iy += step_y;
                t_max_x += t_delta_x;
                t_max_y += t_delta_y;
            } else if t_max_x < t_max_y {
                ix += step_x;
                t_max_x += t_delta_x;
            } else {
                iy += step_y;
                t_max_y += t_delta_y;
            }
            cells.push((ix, iy));
        }
        if cells.last() != Some(&(jx, jy)) {
            cells.push((jx, jy));
        }
        cells
    }

    /// True when no cell of the supercover is occupied or outside the grid.
    pub fn line_of_sight(&self, a: &Vector2<f64>, b: &Vector2<f64>) -> bool {
        self.supercover(a, b).iter().all(|&(ix, iy)| !self.blocked(ix, iy))
    }
}

/// Ordered world-coordinate waypoints.
#[derive(Debug, Clone, PartialEq)]
pub struct PathPolyline {
    pub waypoints: Vec<Vector2<f64>>,
}

impl PathPolyline {
    pub fn new(waypoints: Vec<Vector2<f64>>) -> Result<Self> {
        if waypoints.is_empty() {
            return Err(Error::invalid("path needs at least one waypoint"));
        }
        Ok(Self { waypoints })
    }

    pub fn length(&self) -> f64 {
        self.waypoints.windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }

    /// Cumulative arc length at each waypoint.
    pub fn cumulative(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = vec![0.0];
        for w in self.waypoints.windows(2) {
            acc += (w[1] - w[0]).norm();
            out.push(acc);
        }
        out
    }

    pub fn point_at(&self, s: f64) -> Vector2<f64> {
        let cum = self.cumulative();
        let total = *cum.last().expect("nonempty");
        let s = s.clamp(0.0, total);
        for i in 1..cum.len() {
            if s <= cum[i] {
                let seg = cum[i] - cum[i - 1];
                let t = if seg > 0.0 { (s - cum[i - 1]) / seg } else { 0.0 };
                return self.waypoints[i - 1] + (self.waypoints[i] - self.waypoints[i - 1]) * t;
            }
        }
        *self.waypoints.last().expect("nonempty")
    }

    /// Arc length of the point closest to `p` among points with arc length at
    /// least `s_min`.
    pub fn closest_arclength(&self, p: &Vector2<f64>, s_min: f64) -> f64 {
        let cum = self.cumulative();
        let total = *cum.last().expect("nonempty");
        let s_min = s_min.clamp(0.0, total);
        if self.waypoints.len() == 1 {
            return 0.0;
        }
        let mut best = (f64::INFINITY, s_min);
        for i in 1..cum.len() {
            if cum[i] < s_min {
                continue;
            }
            let (a, b) = (self.waypoints[i - 1], self.waypoints[i]);
            let seg = cum[i] - cum[i - 1];
            if seg <= 0.0 {
                continue;
            }
            let t_min = ((s_min - cum[i - 1]) / seg).max(0.0);
            let t = ((p - a).dot(&(b - a)) / (seg * seg)).clamp(t_min, 1.0);
            let q = a + (b - a) * t;
            let d = (p - q).norm();
            if d < best.0 - 1e-15 {
                best = (d, cum[i - 1] + t * seg);
            }
        }
        best.1
    }

    /// Sub-polyline between arc lengths `s0 ≤ s1`.
    pub fn clip(&self, s0: f64, s1: f64) -> Vec<Vector2<f64>> {
        let cum = self.cumulative();
        let total = *cum.last().expect("nonempty");
        let s0 = s0.clamp(0.0, total);
        let s1 = s1.clamp(s0, total);
        let mut pts = vec![self.point_at(s0)];
        for (i, &c) in cum.iter().enumerate() {
            if c > s0 && c < s1 {
                pts.push(self.waypoints[i]);
            }
        }
        pts.push(self.point_at(s1));
        let mut out: Vec<Vector2<f64>> = Vec::with_capacity(pts.len());
        for p in pts {
            if out.last().map_or(true, |q: &Vector2<f64>| (p - q).norm() > 1e-9) {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Clone, Copy, PartialEq)]
struct HeapEntry {
    f: f64,
    g: f64,
    cell: usize,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed for a min-heap on (f, g, cell).
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.g.total_cmp(&self.g))
            .then_with(|| other.cell.cmp(&self.cell))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Any-angle path on the 8-connected grid.
///
/// Search nodes sit at cell centres except for the start and goal cells,
/// which use the exact endpoints. Every edge is checked with the supercover
/// line of sight. Ties are broken by smaller g-value, then by smaller cell
/// index, and equal-cost parent updates keep the smaller parent index, which
/// makes the output deterministic.
pub fn theta_star(grid: &OccupancyGrid, start: &Vector2<f64>, goal: &Vector2<f64>) -> Result<PathPolyline> {
    let (sx, sy) = grid
        .cell_of(start)
        .ok_or_else(|| Error::invalid(format!("start ({}, {}) is outside the grid", start[0], start[1])))?;
    let (gx, gy) = grid
        .cell_of(goal)
        .ok_or_else(|| Error::invalid(format!("goal ({}, {}) is outside the grid", goal[0], goal[1])))?;
    if grid.is_occupied(sx, sy) {
        return Err(Error::invalid("start cell is occupied"));
    }
    if grid.is_occupied(gx, gy) {
        return Err(Error::invalid("goal cell is occupied"));
    }
    let start_idx = grid.index(sx, sy);
    let goal_idx = grid.index(gx, gy);
    if start_idx == goal_idx {
        return PathPolyline::new(vec![*start, *goal]);
    }
    let pos = |idx: usize| -> Vector2<f64> {
        if idx == start_idx {
            *start
        } else if idx == goal_idx {
            *goal
        } else {
            grid.cell_center(idx % grid.width, idx / grid.width)
        }
    };
    let n = grid.width * grid.height;
    let mut g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut heap = BinaryHeap::new();
    g[start_idx] = 0.0;
    parent[start_idx] = start_idx;
    heap.push(HeapEntry {
        f: (goal - start).norm(),
        g: 0.0,
        cell: start_idx,
    });
    while let Some(HeapEntry { cell, g: g_cell, .. }) = heap.pop() {
        if closed[cell] || g_cell > g[cell] {
            continue;
        }
        if cell == goal_idx {
            break;
        }
        closed[cell] = true;
        let (cx, cy) = ((cell % grid.width) as i64, (cell / grid.width) as i64);
        for (ddx, ddy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
            let (nx, ny) = (cx + ddx, cy + ddy);
            if grid.blocked(nx, ny) {
                continue;
            }
            let nb = grid.index(nx as usize, ny as usize);
            if closed[nb] {
                continue;
            }
            let p_nb = pos(nb);
            let par = parent[cell];
            let (cand, cand_parent) = if grid.line_of_sight(&pos(par), &p_nb) {
                (g[par] + (p_nb - pos(par)).norm(), par)
            } else if grid.line_of_sight(&pos(cell), &p_nb) {
                (g[cell] + (p_nb - pos(cell)).norm(), cell)
            } else {
                continue;
            };
            let better = cand < g[nb] - 1e-12 || ((cand - g[nb]).abs() <= 1e-12 && cand_parent < parent[nb]);
            if better {
                g[nb] = cand;
                parent[nb] = cand_parent;
                heap.push(HeapEntry {
                    f: cand + (goal - p_nb).norm(),
                    g: cand,
                    cell: nb,
                });
            }
        }
    }
    if !g[goal_idx].is_finite() {
        return Err(Error::PathNotFound);
    }
    let mut cells = vec![goal_idx];
    let mut cur = goal_idx;
    while cur != start_idx {
        cur = parent[cur];
        cells.push(cur);
    }
    cells.reverse();
    PathPolyline::new(cells.into_iter().map(pos).collect())
}

/// Natural cubic spline through planar points, parameterised by cumulative
/// chord length.
#[derive(Debug, Clone, PartialEq)]
pub struct CubicSpline {
    knots: Vec<f64>,
    points: Vec<Vector2<f64>>,
    /// Second derivatives at the knots.
    second: Vec<Vector2<f64>>,
    /// Arc-length table over a uniform parameter grid.
    arc_table: Vec<(f64, f64)>,
}

impl CubicSpline {
    pub fn fit(points: &[Vector2<f64>]) -> Result<Self> {
        let mut pts: Vec<Vector2<f64>> = Vec::with_capacity(points.len());
        for p in points {
            if !(p[0].is_finite() && p[1].is_finite()) {
                return Err(Error::invalid("spline points must be finite"));
            }
            if pts.last().map_or(true, |q| (p - q).norm() > 1e-9) {
                pts.push(*p);
            }
        }
        if pts.is_empty() {
            return Err(Error::invalid("spline needs at least one point"));
        }
        let n = pts.len();
        let mut knots = vec![0.0];
        for w in pts.windows(2) {
            knots.push(knots.last().unwrap() + (w[1] - w[0]).norm());
        }
        let mut second = vec![Vector2::zeros(); n];
        if n >= 3 {
            // Tridiagonal system for interior second derivatives (Thomas algorithm).
            let m = n - 2;
            let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
            let mut diag = vec![0.0; m];
            let mut upper = vec![0.0; m];
            let mut lower = vec![0.0; m];
            let mut rhs = vec![Vector2::zeros(); m];
            for i in 0..m {
                let (h0, h1) = (h[i], h[i + 1]);
                lower[i] = h0;
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = ((pts[i + 2] - pts[i + 1]) / h1 - (pts[i + 1] - pts[i]) / h0) * 6.0;
            }
            for i in 1..m {
                let f = lower[i] / diag[i - 1];
                diag[i] -= f * upper[i - 1];
                let prev = rhs[i - 1];
                rhs[i] -= prev * f;
            }
            let mut sol = vec![Vector2::zeros(); m];
            sol[m - 1] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                sol[i] = (rhs[i] - sol[i + 1] * upper[i]) / diag[i];
            }
            second[1..(m + 1)].copy_from_slice(&sol);
        }
        let mut spline = Self {
            knots,
            points: pts,
            second,
            arc_table: Vec::new(),
        };
        spline.build_arc_table();
        Ok(spline)
    }

    fn build_arc_table(&mut self) {
        let total = self.parameter_length();
        let samples = ((total / 0.005).ceil() as usize).clamp(16, 200_000);
        // Simpson's rule on each sub-interval.
        let mut table = vec![(0.0, 0.0)];
        let mut acc = 0.0;
        for i in 0..samples {
            let a = total * i as f64 / samples as f64;
            let b = total * (i + 1) as f64 / samples as f64;
            let speed = |u: f64| self.derivative(u).norm();
            acc += (b - a) / 6.0 * (speed(a) + 4.0 * speed(0.5 * (a + b)) + speed(b));
            table.push((b, acc));
        }
        self.arc_table = table;
    }

    pub fn parameter_length(&self) -> f64 {
        *self.knots.last().expect("nonempty")
    }

    pub fn arc_length(&self) -> f64 {
        self.arc_table.last().map_or(0.0, |e| e.1)
    }

    fn segment(&self, u: f64) -> (usize, f64, f64) {
        let n = self.points.len();
        if n == 1 {
            return (0, 0.0, 1.0);
        }
        let u = u.clamp(0.0, self.parameter_length());
        let i = match self.knots.binary_search_by(|k| k.total_cmp(&u)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.saturating_sub(1).min(n - 2),
        };
        let h = self.knots[i + 1] - self.knots[i];
        (i, u - self.knots[i], h)
    }

    pub fn eval(&self, u: f64) -> Vector2<f64> {
        if self.points.len() == 1 {
            return self.points[0];
        }
        let (i, t, h) = self.segment(u);
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let a = (h - t) / h;
        let b = t / h;
        p0 * a + p1 * b + (m0 * (a * a * a - a) + m1 * (b * b * b - b)) * (h * h / 6.0)
    }

    pub fn derivative(&self, u: f64) -> Vector2<f64> {
        if self.points.len() == 1 {
            return Vector2::zeros();
        }
        let (i, t, h) = self.segment(u);
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        let (m0, m1) = (self.second[i], self.second[i + 1]);
        let a = (h - t) / h;
        let b = t / h;
        (p1 - p0) / h + (m1 * (3.0 * b * b - 1.0) - m0 * (3.0 * a * a - 1.0)) * (h / 6.0)
    }

    pub fn second_derivative(&self, u: f64) -> Vector2<f64> {
        if self.points.len() == 1 {
            return Vector2::zeros();
        }
        let (i, t, h) = self.segment(u);
        let a = (h - t) / h;
        let b = t / h;
        self.second[i] * a + self.second[i + 1] * b
    }

    pub fn curvature(&self, u: f64) -> f64 {
        let d = self.derivative(u);
        let dd = self.second_derivative(u);
        let speed = d.norm();
        if speed <= 1e-12 {
            return 0.0;
        }
        (d[0] * dd[1] - d[1] * dd[0]) / (speed * speed * speed)
    }

    /// Spline parameter at arc length `s`.
    pub fn parameter_at_arclength(&self, s: f64) -> f64 {
        let table = &self.arc_table;
        let s = s.clamp(0.0, self.arc_length());
        let i = table.partition_point(|e| e.1 < s);
        if i == 0 {
            return 0.0;
        }
        if i >= table.len() {
            return self.parameter_length();
        }
        let (u0, s0) = table[i - 1];
        let (u1, s1) = table[i];
        if s1 - s0 <= 0.0 {
            return u0;
        }
        u0 + (u1 - u0) * (s - s0) / (s1 - s0)
    }

    pub fn start(&self) -> Vector2<f64> {
        self.points[0]
    }

    pub fn end(&self) -> Vector2<f64> {
        *self.points.last().expect("nonempty")
    }
}

/// Clips the polyline to `[s, s + lookahead]`, where `s` is the arc length of
/// the point closest to `current_position`, and fits a spline through it.
pub fn segment_and_fit(path: &PathPolyline, current_position: &Vector2<f64>, lookahead: f64) -> Result<CubicSpline> {
    let (spline, _) = segment_and_fit_from(path, current_position, lookahead, 0.0)?;
    Ok(spline)
}

/// As [`segment_and_fit`], restricting the closest-point search to arc
/// lengths of at least `progress`. Returns the spline and the new progress.
pub fn segment_and_fit_from(
    path: &PathPolyline,
    current_position: &Vector2<f64>,
    lookahead: f64,
    progress: f64,
) -> Result<(CubicSpline, f64)> {
    if !(lookahead > 0.0) {
        return Err(Error::invalid(format!("lookahead must be positive, got {lookahead}")));
    }
    let s0 = path.closest_arclength(current_position, progress);
    let window = densify(&path.clip(s0, s0 + lookahead), SPLINE_KNOT_SPACING);
    Ok((CubicSpline::fit(&window)?, s0))
}

/// Largest distance between consecutive spline knots. Knots on every segment
/// keep the interpolating spline close to the polyline at corners.
pub const SPLINE_KNOT_SPACING: f64 = 0.1;

/// Inserts evenly spaced points so that no segment is longer than `spacing`.
fn densify(points: &[Vector2<f64>], spacing: f64) -> Vec<Vector2<f64>> {
    let mut out = Vec::with_capacity(points.len());
    for w in points.windows(2) {
        let pieces = ((w[1] - w[0]).norm() / spacing).ceil().max(1.0) as usize;
        out.extend((0..pieces).map(|i| w[0] + (w[1] - w[0]) * (i as f64 / pieces as f64)));
    }
    out.extend(points.last());
    out
}

/// Trapezoidal speed profile over a path of length `length`, starting at
/// `v_start` and ending at rest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrapezoidProfile {
    pub length: f64,
    pub v_start: f64,
    pub v_peak: f64,
    pub accel: f64,
    pub t_accel: f64,
    pub t_cruise: f64,
    pub t_decel: f64,
}

impl TrapezoidProfile {
    pub fn new(length: f64, v_start: f64, v_max: f64, a_max: f64) -> Result<Self> {
        if !(v_max > 0.0 && a_max > 0.0) {
            return Err(Error::invalid(format!(
                "v_max and a_max must be positive, got {v_max} and {a_max}"
            )));
        }
        let length = length.max(0.0);
        // Never start faster than allows stopping within the path.
        let v0 = v_start.clamp(0.0, v_max).min((2.0 * a_max * length).sqrt());
        let v_peak = v_max.min(((2.0 * a_max * length + v0 * v0) / 2.0).sqrt()).max(v0);
        let s_accel = (v_peak * v_peak - v0 * v0) / (2.0 * a_max);
        let s_decel = v_peak * v_peak / (2.0 * a_max);
        let s_cruise = (length - s_accel - s_decel).max(0.0);
        Ok(Self {
            length,
            v_start: v0,
            v_peak,
            accel: a_max,
            t_accel: (v_peak - v0) / a_max,
            t_cruise: if v_peak > 0.0 { s_cruise / v_peak } else { 0.0 },
            t_decel: v_peak / a_max,
        })
    }

    pub fn total_time(&self) -> f64 {
        self.t_accel + self.t_cruise + self.t_decel
    }

    /// `(s, v)` at time `t`; the profile rests at the end afterwards.
    pub fn sample(&self, t: f64) -> (f64, f64) {
        let a = self.accel;
        let t = t.max(0.0);
        if t <= self.t_accel {
            return (self.v_start * t + 0.5 * a * t * t, self.v_start + a * t);
        }
        let s1 = self.v_start * self.t_accel + 0.5 * a * self.t_accel * self.t_accel;
        let t2 = t - self.t_accel;
        if t2 <= self.t_cruise {
            return (s1 + self.v_peak * t2, self.v_peak);
        }
        let s2 = s1 + self.v_peak * self.t_cruise;
        let t3 = (t2 - self.t_cruise).min(self.t_decel);
        let s = s2 + self.v_peak * t3 - 0.5 * a * t3 * t3;
        (s.min(self.length), (self.v_peak - a * t3).max(0.0))
    }
}

fn unwrap_near(angle: f64, reference: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    angle + two_pi * ((reference - angle) / two_pi).round()
}

/// Samples the curve with a trapezoidal profile at `dt` into `N + 1` states
/// and `N` inputs. Headings follow the tangent and are unwrapped to stay
/// continuous, starting near `heading_hint`.
pub fn time_parameterize(
    curve: &CubicSpline,
    v_max: f64,
    a_max: f64,
    dt: f64,
    n: usize,
    v_start: f64,
    heading_hint: f64,
) -> Result<ReferenceTrajectory> {
    if !(dt > 0.0) || n == 0 {
        return Err(Error::invalid("time parameterisation needs dt > 0 and N ≥ 1"));
    }
    let profile = TrapezoidProfile::new(curve.arc_length(), v_start, v_max, a_max)?;
    let mut states = Vec::with_capacity(n + 1);
    let mut prev_heading = heading_hint;
    for k in 0..=n {
        let t = k as f64 * dt;
        let (s, v) = profile.sample(t);
        let u = curve.parameter_at_arclength(s);
        let p = curve.eval(u);
        let tangent = curve.derivative(u);
        let heading = if tangent.norm() > 1e-12 {
            unwrap_near(tangent[1].atan2(tangent[0]), prev_heading)
        } else {
            prev_heading
        };
        prev_heading = heading;
        let omega = curve.curvature(u) * v;
        states.push(StateVec::new(p[0], p[1], heading, v, omega));
    }
    let inputs = (0..n)
        .map(|k| InputVec::new((states[k + 1][3] - states[k][3]) / dt, (states[k + 1][4] - states[k][4]) / dt))
        .collect();
    let timestamps = (0..=n).map(|k| k as f64 * dt).collect();
    ReferenceTrajectory::new(states, inputs, timestamps)
}
