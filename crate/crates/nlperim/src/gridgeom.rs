//! Classical perimeter, directional variations along lines, Cauchy-Crofton estimates
//! and halfspace fits for grid sets.

use crate::error::{invalid, Result};
use crate::grid::{dot, DomainKind, DomainMask, Grid, GridSet};
use crate::numeric::CompSum;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

/// Number of faces inside Omega separating a 1-cell from a 0-cell, per axis.
pub fn boundary_faces(e: &GridSet, omega: &DomainMask) -> [usize; 3] {
    let g = &e.grid;
    let mut counts = [0usize; 3];
    for i in 0..g.len() {
        if !omega.omega[i] {
            continue;
        }
        let c = g.coords(i);
        for (a, cnt) in counts.iter_mut().enumerate().take(g.dim) {
            let mut k = [0i64; 3];
            k[a] = 1;
            if let Some(j) = g.offset(c, k) {
                if omega.omega[j] && e.bits[i] != e.bits[j] {
                    *cnt += 1;
                }
            }
        }
    }
    counts
}

/// Total variation of the cell indicator inside Omega.
pub fn classical_perimeter(e: &GridSet, omega: &DomainMask) -> f64 {
    let f = boundary_faces(e, omega);
    (f[0] + f[1] + f[2]) as f64 * e.grid.h.powi(e.grid.dim as i32 - 1)
}

/// Perimeter over the whole world box.
pub fn world_perimeter(e: &GridSet) -> f64 {
    classical_perimeter(e, &DomainMask::full(&e.grid))
}

/// Samples of the indicator along one line x = foot + t v.
#[derive(Debug, Clone)]
pub struct LineScan {
    pub foot: [f64; 3],
    /// Coordinate along v of each sample, relative to the reference point.
    pub t: Vec<f64>,
    /// Value at each sample; None outside Omega.
    pub vals: Vec<Option<bool>>,
    /// 0 -> 1 transitions along +v.
    pub up: u32,
    /// 1 -> 0 transitions along +v.
    pub down: u32,
}

impl LineScan {
    fn finish(mut self) -> Self {
        let (mut up, mut down) = (0, 0);
        for w in self.vals.windows(2) {
            if let (Some(a), Some(b)) = (w[0], w[1]) {
                if !a && b {
                    up += 1;
                }
                if a && !b {
                    down += 1;
                }
            }
        }
        self.up = up;
        self.down = down;
        self
    }

    /// Largest sample coordinate carrying a 1, if any.
    pub fn last_one(&self) -> Option<f64> {
        self.t.iter().zip(&self.vals).filter(|(_, v)| **v == Some(true)).map(|(t, _)| *t).next_back()
    }

    pub fn touches_omega(&self) -> bool {
        self.vals.iter().any(|v| v.is_some())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DirectionalVariation {
    pub v: [f64; 3],
    /// Total 1 -> 0 jumps along +v times the line cross-section.
    pub phi_plus: f64,
    /// Total 0 -> 1 jumps along +v times the line cross-section.
    pub phi_minus: f64,
    pub cross_section: f64,
    /// Cross-section times the number of lines with a 0 -> 1 jump.
    pub bad_measure: f64,
    #[serde(skip)]
    pub lines: Vec<LineScan>,
}

impl DirectionalVariation {
    /// (I_+, I_-) per line: I_+ counts 0 -> 1 jumps, I_- counts 1 -> 0 jumps.
    pub fn counts(&self) -> Vec<(u32, u32)> {
        self.lines.iter().map(|l| (l.up, l.down)).collect()
    }
}

/// Reference point of Omega used for line coordinates.
pub fn domain_center(omega: &DomainMask) -> [f64; 3] {
    match &omega.kind {
        DomainKind::Ball { center, .. } => *center,
        DomainKind::Box { lo, hi } => [0.5 * (lo[0] + hi[0]), 0.5 * (lo[1] + hi[1]), 0.5 * (lo[2] + hi[2])],
        DomainKind::Full => omega.grid().world_center(),
    }
}

fn axis_of(v: &[f64; 3], dim: usize) -> Option<(usize, bool)> {
    let nz: Vec<usize> = (0..dim).filter(|&a| v[a] != 0.0).collect();
    if nz.len() == 1 && v[nz[0]].abs() == 1.0 {
        Some((nz[0], v[nz[0]] > 0.0))
    } else {
        None
    }
}

/// Orthonormal basis of the complement of v, depending only on the line +-v.
pub fn orthogonal_basis(v: &[f64; 3], dim: usize) -> Vec<[f64; 3]> {
    let mut c = *v;
    let last = (0..dim).rev().find(|&a| c[a] != 0.0).unwrap_or(0);
    if c[last] < 0.0 {
        for x in c.iter_mut() {
            *x = -*x;
        }
    }
    if dim == 2 {
        return vec![[-c[1], c[0], 0.0]];
    }
    let a = (0..3).min_by(|&i, &j| c[i].abs().partial_cmp(&c[j].abs()).unwrap()).unwrap();
    let mut e = [0.0; 3];
    e[a] = 1.0;
    let mut u1 = cross(&c, &e);
    let n1 = dot(&u1, &u1).sqrt();
    for x in u1.iter_mut() {
        *x /= n1;
    }
    let u2 = cross(&c, &u1);
    vec![u1, u2]
}

pub fn cross(a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn check_unit(v: &[f64], dim: usize) -> Result<[f64; 3]> {
    if v.len() < dim {
        return invalid("direction has too few components");
    }
    let mut out = [0.0; 3];
    out[..dim].copy_from_slice(&v[..dim]);
    let n = dot(&out, &out).sqrt();
    if (n - 1.0).abs() > 1e-9 {
        return invalid(format!("direction must be a unit vector, |v| = {n}"));
    }
    Ok(out)
}

/// Indicator along every line parallel to `v` that meets Omega.
/// Axis directions scan grid columns; other directions cast rays with spacing h.
pub fn scan_lines(e: &GridSet, omega: &DomainMask, v: &[f64]) -> Result<Vec<LineScan>> {
    let g = &e.grid;
    let dim = g.dim;
    let v = check_unit(v, dim)?;
    let c = domain_center(omega);
    if let Some((axis, positive)) = axis_of(&v, dim) {
        return Ok(scan_axis(e, omega, axis, positive, &c));
    }
    let basis = orthogonal_basis(&v, dim);
    // canonical representative of +-v; rays are sampled along it then reversed if needed
    let flip = dot(&v, &cross_last(&basis, dim)) < 0.0;
    let dir = if flip { [-v[0], -v[1], -v[2]] } else { v };
    let (_, rb) = omega_bounding_ball(omega);
    let m = (rb / g.h).ceil() as i64 + 1;
    let mut feet = Vec::new();
    let range2 = if dim == 3 { -m..=m } else { 0..=0 };
    for m2 in range2 {
        for m1 in -m..=m {
            let mut p = c;
            for a in 0..3 {
                p[a] += g.h * m1 as f64 * basis[0][a];
                if dim == 3 {
                    p[a] += g.h * m2 as f64 * basis[1][a];
                }
            }
            feet.push(p);
        }
    }
    let h = g.h;
    let lines: Vec<LineScan> = feet
        .par_iter()
        .filter_map(|foot| {
            let mut t = Vec::with_capacity((2 * m + 1) as usize);
            let mut vals = Vec::with_capacity((2 * m + 1) as usize);
            let mut any = false;
            for i in -m..=m {
                let s = i as f64 * h;
                let x = [foot[0] + (i as f64 * h) * dir[0], foot[1] + (i as f64 * h) * dir[1], foot[2] + (i as f64 * h) * dir[2]];
                let val = g.locate(&x).and_then(|j| if omega.omega[j] { Some(e.bits[j]) } else { None });
                any |= val.is_some();
                t.push(s);
                vals.push(val);
            }
            if !any {
                return None;
            }
            if flip {
                t.reverse();
                for x in t.iter_mut() {
                    *x = -*x;
                }
                vals.reverse();
            }
            Some(LineScan { foot: *foot, t, vals, up: 0, down: 0 }.finish())
        })
        .collect();
    Ok(lines)
}

fn cross_last(basis: &[[f64; 3]], dim: usize) -> [f64; 3] {
    if dim == 2 {
        [basis[0][1], -basis[0][0], 0.0]
    } else {
        cross(&basis[0], &basis[1])
    }
}

fn scan_axis(e: &GridSet, omega: &DomainMask, axis: usize, positive: bool, c: &[f64; 3]) -> Vec<LineScan> {
    let g = &e.grid;
    let len = g.shape[axis];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let mut out = Vec::new();
    for q in 0..g.shape[others[1]] {
        for p in 0..g.shape[others[0]] {
            let mut cell = [0usize; 3];
            cell[others[0]] = p;
            cell[others[1]] = q;
            let mut t = Vec::with_capacity(len);
            let mut vals = Vec::with_capacity(len);
            let mut any = false;
            for r in 0..len {
                let rr = if positive { r } else { len - 1 - r };
                cell[axis] = rr;
                let i = g.index(cell);
                let coord = g.origin[axis] + g.h * rr as f64 - c[axis];
                t.push(if positive { coord } else { -coord });
                let val = if omega.omega[i] { Some(e.bits[i]) } else { None };
                any |= val.is_some();
                vals.push(val);
            }
            if !any {
                continue;
            }
            cell[axis] = 0;
            let mut foot = g.center(g.index(cell));
            foot[axis] = c[axis];
            out.push(LineScan { foot, t, vals, up: 0, down: 0 }.finish());
        }
    }
    out
}

/// Directional variation of the indicator of E inside Omega along v.
pub fn directional_variation(e: &GridSet, omega: &DomainMask, v: &[f64]) -> Result<DirectionalVariation> {
    let dim = e.grid.dim;
    let lines = scan_lines(e, omega, v)?;
    let cs = e.grid.h.powi(dim as i32 - 1);
    let ups: u64 = lines.iter().map(|l| l.up as u64).sum();
    let downs: u64 = lines.iter().map(|l| l.down as u64).sum();
    let bad = lines.iter().filter(|l| l.up >= 1).count();
    let mut vv = [0.0; 3];
    vv[..dim].copy_from_slice(&v[..dim]);
    Ok(DirectionalVariation {
        v: vv,
        phi_plus: downs as f64 * cs,
        phi_minus: ups as f64 * cs,
        cross_section: cs,
        bad_measure: bad as f64 * cs,
        lines,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CroftonEstimate {
    pub estimate: f64,
    pub stderr: f64,
    pub lines: usize,
    pub mean_crossings: f64,
}

/// Bounding ball (center, radius) of the Omega cells.
pub fn omega_bounding_ball(omega: &DomainMask) -> ([f64; 3], f64) {
    let g = omega.grid();
    let c = domain_center(omega);
    let half_diag = 0.5 * g.h * (g.dim as f64).sqrt();
    let mut r2: f64 = 0.0;
    for i in omega.cells() {
        let p = g.center(i);
        r2 = r2.max((0..g.dim).map(|a| (p[a] - c[a]).powi(2)).sum());
    }
    (c, r2.sqrt() + half_diag)
}

const CROFTON_CHUNK: usize = 4096;

/// Monte Carlo Cauchy-Crofton estimate of the staircase perimeter inside Omega.
pub fn crofton_perimeter(e: &GridSet, omega: &DomainMask, line_count: usize, seed: u64) -> Result<CroftonEstimate> {
    if line_count == 0 {
        return invalid("line_count must be at least 1");
    }
    let g = &e.grid;
    let dim = g.dim;
    let (c, rb) = omega_bounding_ball(omega);
    let chunks = line_count.div_ceil(CROFTON_CHUNK);
    let parts: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|ci| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(ci as u64 + 1);
            let n = CROFTON_CHUNK.min(line_count - ci * CROFTON_CHUNK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let v = random_direction(&mut rng, dim);
                let basis = orthogonal_basis(&v, dim);
                let mut foot = c;
                if dim == 2 {
                    let y = rng.gen_range(-rb..rb);
                    for a in 0..2 {
                        foot[a] += y * basis[0][a];
                    }
                } else {
                    let (rr, th) = (rb * rng.gen::<f64>().sqrt(), 2.0 * PI * rng.gen::<f64>());
                    for a in 0..3 {
                        foot[a] += rr * (th.cos() * basis[0][a] + th.sin() * basis[1][a]);
                    }
                }
                let k = line_crossings(e, omega, &foot, &v, rb) as f64;
                s1 += k;
                s2 += k * k;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = parts.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
    let n = line_count as f64;
    let mean = s1 / n;
    let var = if line_count > 1 { (s2 / n - mean * mean).max(0.0) * n / (n - 1.0) } else { 0.0 };
    // c(2) = 1/4, c(3) = 1/(2 pi); times direction measure and offset area
    let factor = if dim == 2 { 0.25 * 2.0 * PI * 2.0 * rb } else { 4.0 * PI * PI * rb * rb / (2.0 * PI) };
    Ok(CroftonEstimate { estimate: factor * mean, stderr: factor * (var / n).sqrt(), lines: line_count, mean_crossings: mean })
}

fn random_direction(rng: &mut ChaCha8Rng, dim: usize) -> [f64; 3] {
    if dim == 2 {
        let th = 2.0 * PI * rng.gen::<f64>();
        [th.cos(), th.sin(), 0.0]
    } else {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let th = 2.0 * PI * rng.gen::<f64>();
        let r = (1.0 - z * z).sqrt();
        [r * th.cos(), r * th.sin(), z]
    }
}

/// Number of cell faces crossed by the segment foot + t v, |t| <= half, that separate
/// two Omega cells of different value.
pub fn line_crossings(e: &GridSet, omega: &DomainMask, foot: &[f64; 3], v: &[f64; 3], half: f64) -> usize {
    let g = &e.grid;
    let dim = g.dim;
    let start = [foot[0] - half * v[0], foot[1] - half * v[1], foot[2] - half * v[2]];
    // cell coordinates: continuous index u = (x - origin)/h + 1/2, cell = floor(u)
    let mut cell = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for a in 0..dim {
        let u = (start[a] - g.origin[a]) / g.h + 0.5;
        cell[a] = u.floor() as i64;
        if v[a] > 0.0 {
            step[a] = 1;
            t_delta[a] = g.h / v[a];
            t_max[a] = ((cell[a] + 1) as f64 - u) * g.h / v[a];
        } else if v[a] < 0.0 {
            step[a] = -1;
            t_delta[a] = -g.h / v[a];
            t_max[a] = (u - cell[a] as f64) * g.h / -v[a];
        }
    }
    let total = 2.0 * half;
    let value = |c: &[i64; 3]| -> Option<bool> {
        for a in 0..dim {
            if c[a] < 0 || c[a] >= g.shape[a] as i64 {
                return None;
            }
        }
        let i = g.index([c[0] as usize, c[1] as usize, c[2] as usize]);
        if omega.omega[i] {
            Some(e.bits[i])
        } else {
            None
        }
    };
    let mut cur = value(&cell);
    let mut count = 0;
    loop {
        let a = (0..dim).min_by(|&i, &j| t_max[i].partial_cmp(&t_max[j]).unwrap()).unwrap();
        if t_max[a] > total {
            break;
        }
        cell[a] += step[a];
        t_max[a] += t_delta[a];
        let next = value(&cell);
        if let (Some(x), Some(y)) = (cur, next) {
            if x != y {
                count += 1;
            }
        }
        cur = next;
    }
    count
}

/// h^n times the number of Omega cells where E and F differ.
pub fn symmetric_difference_measure(e: &GridSet, f: &GridSet, omega: &DomainMask) -> Result<f64> {
    e.grid.same_world(&f.grid)?;
    e.grid.same_world(&omega.exterior.grid)?;
    let n = (0..e.bits.len()).filter(|&i| omega.omega[i] && e.bits[i] != f.bits[i]).count();
    Ok(n as f64 * e.grid.cell_volume())
}

#[derive(Debug, Clone, Serialize)]
pub struct HalfspaceFit {
    /// The fit is {x : x . v <= t} in world coordinates.
    pub v: [f64; 3],
    pub t: f64,
    pub symdiff: f64,
}

/// Sampled unit directions: uniform angles (n = 2) or a Fibonacci sphere (n = 3).
pub fn sample_directions(dim: usize, count: usize) -> Vec<[f64; 3]> {
    if dim == 2 {
        (0..count)
            .map(|j| {
                let th = 2.0 * PI * j as f64 / count as f64;
                [th.cos(), th.sin(), 0.0]
            })
            .collect()
    } else {
        let golden = PI * (3.0 - 5f64.sqrt());
        (0..count)
            .map(|j| {
                let z = 1.0 - 2.0 * (j as f64 + 0.5) / count as f64;
                let r = (1.0 - z * z).sqrt();
                let th = golden * j as f64;
                [r * th.cos(), r * th.sin(), z]
            })
            .collect()
    }
}

/// Best threshold for a fixed direction: (t, number of mismatched cells).
pub fn best_threshold(e: &GridSet, omega: &DomainMask, v: &[f64; 3]) -> (f64, usize) {
    let g = &e.grid;
    let mut proj: Vec<(f64, bool)> = omega.cells().into_iter().map(|i| (dot(&g.center(i), v), e.bits[i])).collect();
    proj.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // threshold below everything: mismatches are all E cells
    let mut cost = proj.iter().filter(|p| p.1).count();
    let mut best = (f64::NEG_INFINITY, cost);
    if let Some(first) = proj.first() {
        best.0 = first.0 - g.h;
    }
    let mut i = 0;
    while i < proj.len() {
        let t = proj[i].0;
        while i < proj.len() && proj[i].0 == t {
            if proj[i].1 {
                cost -= 1;
            } else {
                cost += 1;
            }
            i += 1;
        }
        if cost < best.1 {
            best = (t, cost);
        }
    }
    best
}

/// Halfspace {x . v <= t} over sampled directions and all thresholds with least
/// symmetric difference with E inside Omega. Ties keep the first direction.
pub fn best_halfspace_fit(e: &GridSet, omega: &DomainMask, direction_samples: usize) -> Result<HalfspaceFit> {
    if direction_samples < 8 {
        return invalid("direction_samples must be at least 8");
    }
    let dirs = sample_directions(e.grid.dim, direction_samples);
    Ok(best_halfspace_over(e, omega, &dirs))
}

pub fn best_halfspace_over(e: &GridSet, omega: &DomainMask, dirs: &[[f64; 3]]) -> HalfspaceFit {
    let fits: Vec<(f64, usize)> = dirs.par_iter().map(|v| best_threshold(e, omega, v)).collect();
    let mut bi = 0;
    for (j, f) in fits.iter().enumerate() {
        if f.1 < fits[bi].1 {
            bi = j;
        }
    }
    HalfspaceFit { v: dirs[bi], t: fits[bi].0, symdiff: fits[bi].1 as f64 * e.grid.cell_volume() }
}

/// Perimeter of each of a list of sets with compensated accumulation.
pub fn total_classical(sets: &[GridSet], omega: &DomainMask) -> f64 {
    let mut s = CompSum::new();
    for e in sets {
        s.add(classical_perimeter(e, omega));
    }
    s.value()
}

/// Grid for a world covering [-half, half]^n with `cells` cells per axis.
pub fn square_world(dim: usize, cells: usize, half: f64) -> Result<Grid> {
    Grid::cube(dim, cells, 2.0 * half / cells as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_ball_domain(cells: usize) -> (Grid, DomainMask) {
        let g = square_world(2, cells, 1.25).unwrap();
        let d = DomainMask::ball(GridSet::empty(&g), &[0.0, 0.0], 1.0);
        (g, d)
    }

    #[test]
    fn unit_square_perimeter() {
        let g = square_world(2, 64, 1.0).unwrap();
        let sq = GridSet::from_fn(&g, |p| p[0].abs() < 0.5 && p[1].abs() < 0.5);
        assert!((world_perimeter(&sq) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn single_cell() {
        let g = Grid::cube(3, 3, 0.5).unwrap();
        let mut e = GridSet::empty(&g);
        e.bits[g.index([1, 1, 1])] = true;
        assert!((world_perimeter(&e) - 6.0 * 0.25).abs() < 1e-15);
    }

    #[test]
    fn halfplane_variation() {
        let (g, d) = unit_ball_domain(200);
        let e = GridSet::halfspace(&g, &[0.0, 1.0], 0.0);
        let dv = directional_variation(&e, &d, &[0.0, 1.0]).unwrap();
        assert!((dv.phi_plus - 2.0).abs() < 0.03);
        assert_eq!(dv.phi_minus, 0.0);
        let dh = directional_variation(&e, &d, &[1.0, 0.0]).unwrap();
        assert_eq!((dh.phi_plus, dh.phi_minus), (0.0, 0.0));
    }

    #[test]
    fn reversed_direction_swaps() {
        let (g, d) = unit_ball_domain(40);
        let e = GridSet::ball(&g, &[0.2, -0.1], 0.5);
        for v in [[0.6, 0.8], [1.0, 0.0], [-0.28, 0.96]] {
            let a = directional_variation(&e, &d, &v).unwrap();
            let b = directional_variation(&e, &d, &[-v[0], -v[1]]).unwrap();
            assert_eq!(a.phi_plus, b.phi_minus);
            assert_eq!(a.phi_minus, b.phi_plus);
        }
    }

    #[test]
    fn rejects_non_unit() {
        let (g, d) = unit_ball_domain(8);
        assert!(directional_variation(&GridSet::empty(&g), &d, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn halfspace_fit_recovers_halfplane() {
        let (g, d) = unit_ball_domain(40);
        let e = GridSet::halfspace(&g, &[0.0, 1.0], 0.0);
        let f = best_halfspace_fit(&e, &d, 16).unwrap();
        assert_eq!(f.symdiff, 0.0);
    }

    #[test]
    fn crofton_empty() {
        let (g, d) = unit_ball_domain(16);
        let c = crofton_perimeter(&GridSet::empty(&g), &d, 100, 1).unwrap();
        assert_eq!(c.estimate, 0.0);
    }
}
