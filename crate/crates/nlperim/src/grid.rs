//! Uniform grids, binary cell sets and domain masks.

use crate::error::{invalid, Error, Result};
use serde::{Deserialize, Serialize};

/// Geometry of a uniform grid of cubic cells. Axis 0 varies fastest in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub dim: usize,
    /// Cells per axis; unused trailing axes are 1.
    pub shape: [usize; 3],
    pub h: f64,
    /// World coordinates of the center of cell (0, .., 0).
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dim: usize, shape: &[usize], h: f64, origin: &[f64]) -> Result<Self> {
        if !(dim == 2 || dim == 3) {
            return invalid(format!("dimension must be 2 or 3, got {dim}"));
        }
        if shape.len() != dim || origin.len() != dim {
            return invalid("shape/origin length must equal dimension");
        }
        if shape.contains(&0) {
            return invalid("empty grid axis");
        }
        if !(h > 0.0 && h.is_finite()) {
            return invalid(format!("cell size must be positive, got {h}"));
        }
        let mut sh = [1usize; 3];
        let mut or = [0.0; 3];
        sh[..dim].copy_from_slice(shape);
        or[..dim].copy_from_slice(origin);
        Ok(Grid { dim, shape: sh, h, origin: or })
    }

    /// Grid whose cell centers are symmetric about the coordinate origin.
    pub fn centered(dim: usize, shape: &[usize], h: f64) -> Result<Self> {
        let origin: Vec<f64> = shape.iter().map(|&s| -0.5 * (s as f64 - 1.0) * h).collect();
        Grid::new(dim, shape, h, &origin)
    }

    /// Square (cubic) centered grid with `n` cells per axis.
    pub fn cube(dim: usize, n: usize, h: f64) -> Result<Self> {
        Grid::centered(dim, &vec![n; dim], h)
    }

    pub fn len(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.h.powi(self.dim as i32)
    }

    #[inline]
    pub fn index(&self, c: [usize; 3]) -> usize {
        c[0] + self.shape[0] * (c[1] + self.shape[1] * c[2])
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let x = i % self.shape[0];
        let r = i / self.shape[0];
        [x, r % self.shape[1], r / self.shape[1]]
    }

    /// Index of the cell at `c + k`, if inside the world.
    #[inline]
    pub fn offset(&self, c: [usize; 3], k: [i64; 3]) -> Option<usize> {
        let mut out = [0usize; 3];
        for a in 0..3 {
            let v = c[a] as i64 + k[a];
            if v < 0 || v >= self.shape[a] as i64 {
                return None;
            }
            out[a] = v as usize;
        }
        Some(self.index(out))
    }

    #[inline]
    pub fn center(&self, i: usize) -> [f64; 3] {
        let c = self.coords(i);
        let mut p = [0.0; 3];
        for a in 0..self.dim {
            p[a] = self.origin[a] + self.h * c[a] as f64;
        }
        p
    }

    /// Cell containing the world point `p`, if any.
    pub fn locate(&self, p: &[f64; 3]) -> Option<usize> {
        let mut c = [0usize; 3];
        for a in 0..self.dim {
            let t = ((p[a] - self.origin[a]) / self.h).round();
            if t < 0.0 || t >= self.shape[a] as f64 {
                return None;
            }
            c[a] = t as usize;
        }
        Some(self.index(c))
    }

    /// Half-diagonal of the world box measured from its center.
    pub fn bounding_radius(&self) -> f64 {
        let mut r2 = 0.0;
        for a in 0..self.dim {
            let half = 0.5 * self.shape[a] as f64 * self.h;
            r2 += half * half;
        }
        r2.sqrt()
    }

    pub fn world_center(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..self.dim {
            c[a] = self.origin[a] + 0.5 * (self.shape[a] as f64 - 1.0) * self.h;
        }
        c
    }

    pub fn same_world(&self, other: &Grid) -> Result<()> {
        if self.dim != other.dim || self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                &self.shape[..self.dim],
                &other.shape[..other.dim]
            )));
        }
        Ok(())
    }
}

/// Binary indicator of a set on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSet {
    pub grid: Grid,
    pub bits: Vec<bool>,
}

impl GridSet {
    pub fn empty(grid: &Grid) -> Self {
        GridSet { grid: grid.clone(), bits: vec![false; grid.len()] }
    }

    pub fn full(grid: &Grid) -> Self {
        GridSet { grid: grid.clone(), bits: vec![true; grid.len()] }
    }

    /// Set of cells whose center satisfies `f`.
    pub fn from_fn(grid: &Grid, f: impl Fn(&[f64; 3]) -> bool) -> Self {
        let bits = (0..grid.len()).map(|i| f(&grid.center(i))).collect();
        GridSet { grid: grid.clone(), bits }
    }

    pub fn from_bits(grid: &Grid, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!("{} bits for {} cells", bits.len(), grid.len())));
        }
        Ok(GridSet { grid: grid.clone(), bits })
    }

    /// Halfspace {x . v <= t} sampled at cell centers.
    pub fn halfspace(grid: &Grid, v: &[f64], t: f64) -> Self {
        GridSet::from_fn(grid, |p| dot(p, v) <= t)
    }

    pub fn ball(grid: &Grid, center: &[f64], r: f64) -> Self {
        GridSet::from_fn(grid, |p| dist2(p, center) < r * r)
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.grid.cell_volume()
    }

    pub fn complement(&self) -> Self {
        GridSet { grid: self.grid.clone(), bits: self.bits.iter().map(|b| !b).collect() }
    }

    fn zip(&self, other: &GridSet, f: impl Fn(bool, bool) -> bool) -> Result<Self> {
        self.grid.same_world(&other.grid)?;
        let bits = self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect();
        Ok(GridSet { grid: self.grid.clone(), bits })
    }

    pub fn union(&self, other: &GridSet) -> Result<Self> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &GridSet) -> Result<Self> {
        self.zip(other, |a, b| a && b)
    }

    pub fn difference(&self, other: &GridSet) -> Result<Self> {
        self.zip(other, |a, b| a && !b)
    }

    pub fn is_subset(&self, other: &GridSet) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Integer cell translation; cells shifted in from outside the world take `fill`.
    pub fn shifted(&self, k: [i64; 3], fill: bool) -> Self {
        let g = &self.grid;
        let neg = [-k[0], -k[1], -k[2]];
        let bits = (0..g.len())
            .map(|i| match g.offset(g.coords(i), neg) {
                Some(j) => self.bits[j],
                None => fill,
            })
            .collect();
        GridSet { grid: g.clone(), bits }
    }

    /// Periodic integer translation.
    pub fn shifted_periodic(&self, k: [i64; 3]) -> Self {
        let g = &self.grid;
        let bits = (0..g.len())
            .map(|i| {
                let c = g.coords(i);
                let mut src = [0usize; 3];
                for a in 0..3 {
                    let n = g.shape[a] as i64;
                    src[a] = (c[a] as i64 - k[a]).rem_euclid(n) as usize;
                }
                self.bits[g.index(src)]
            })
            .collect();
        GridSet { grid: g.clone(), bits }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DomainKind {
    Ball { center: [f64; 3], radius: f64 },
    Box { lo: [f64; 3], hi: [f64; 3] },
    Full,
}

/// Domain Omega inside the world, with exterior data on the rest of the world.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainMask {
    pub omega: Vec<bool>,
    /// Exterior data; only values outside Omega are meaningful.
    pub exterior: GridSet,
    pub kind: DomainKind,
}

impl DomainMask {
    /// Ball domain by cell-center membership (open ball).
    pub fn ball(exterior: GridSet, center: &[f64], radius: f64) -> Self {
        let g = &exterior.grid;
        let mut c = [0.0; 3];
        c[..g.dim].copy_from_slice(&center[..g.dim]);
        let omega = (0..g.len()).map(|i| dist2(&g.center(i), &c) < radius * radius).collect();
        DomainMask { omega, exterior, kind: DomainKind::Ball { center: c, radius } }
    }

    pub fn boxed(exterior: GridSet, lo: &[f64], hi: &[f64]) -> Self {
        let g = &exterior.grid;
        let mut l = [0.0; 3];
        let mut u = [0.0; 3];
        l[..g.dim].copy_from_slice(&lo[..g.dim]);
        u[..g.dim].copy_from_slice(&hi[..g.dim]);
        let omega = (0..g.len())
            .map(|i| {
                let p = g.center(i);
                (0..g.dim).all(|a| p[a] > l[a] && p[a] < u[a])
            })
            .collect();
        DomainMask { omega, exterior, kind: DomainKind::Box { lo: l, hi: u } }
    }

    pub fn full(grid: &Grid) -> Self {
        DomainMask { omega: vec![true; grid.len()], exterior: GridSet::empty(grid), kind: DomainKind::Full }
    }

    pub fn grid(&self) -> &Grid {
        &self.exterior.grid
    }

    pub fn count(&self) -> usize {
        self.omega.iter().filter(|&&b| b).count()
    }

    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.grid().cell_volume()
    }

    /// Indices of Omega cells in increasing order.
    pub fn cells(&self) -> Vec<usize> {
        (0..self.omega.len()).filter(|&i| self.omega[i]).collect()
    }

    /// `E` inside Omega, exterior data outside.
    pub fn with_interior(&self, interior: &GridSet) -> Result<GridSet> {
        self.grid().same_world(&interior.grid)?;
        let bits = (0..self.omega.len())
            .map(|i| if self.omega[i] { interior.bits[i] } else { self.exterior.bits[i] })
            .collect();
        Ok(GridSet { grid: self.grid().clone(), bits })
    }

    /// Same domain with new exterior data.
    pub fn with_exterior(&self, exterior: GridSet) -> Result<Self> {
        self.grid().same_world(&exterior.grid)?;
        Ok(DomainMask { omega: self.omega.clone(), exterior, kind: self.kind.clone() })
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// JSON sidecar stored next to a bitmap.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Sidecar {
    pub h: f64,
    pub origin: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Sidecar {
    pub fn of(grid: &Grid) -> Self {
        Sidecar { h: grid.h, origin: grid.origin[..grid.dim].to_vec(), shape: grid.shape[..grid.dim].to_vec() }
    }

    pub fn grid(&self) -> Result<Grid> {
        Grid::new(self.shape.len(), &self.shape, self.h, &self.origin)
    }
}

/// PBM "P1" text: one image for n = 2, one image per z slice for n = 3.
/// The first text row is the largest y.
pub fn to_pbm(set: &GridSet) -> String {
    let g = &set.grid;
    let (nx, ny, nz) = (g.shape[0], g.shape[1], g.shape[2]);
    let mut out = String::new();
    for z in 0..nz {
        out.push_str("P1\n");
        if g.dim == 3 {
            out.push_str(&format!("# slice {z}\n"));
        }
        out.push_str(&format!("{nx} {ny}\n"));
        for y in (0..ny).rev() {
            let mut col = 0;
            for x in 0..nx {
                if col > 0 {
                    if col >= 35 {
                        out.push('\n');
                        col = 0;
                    } else {
                        out.push(' ');
                    }
                }
                out.push(if set.bits[g.index([x, y, z])] { '1' } else { '0' });
                col += 1;
            }
            out.push('\n');
        }
    }
    out
}

/// Parse PBM "P1" text written by [`to_pbm`] (or any conforming P1 stream).
pub fn from_pbm(text: &str, grid: &Grid) -> Result<GridSet> {
    let mut toks = PbmTokens::new(text);
    let (nx, ny, nz) = (grid.shape[0], grid.shape[1], grid.shape[2]);
    let mut bits = vec![false; grid.len()];
    for z in 0..nz {
        match toks.word() {
            Some(w) if w == "P1" => {}
            other => return Err(Error::Parse(format!("expected P1 magic, found {other:?}"))),
        }
        let w: usize = toks.number()?;
        let hgt: usize = toks.number()?;
        if w != nx || hgt != ny {
            return Err(Error::ShapeMismatch(format!("bitmap {w}x{hgt}, sidecar {nx}x{ny}")));
        }
        for y in (0..ny).rev() {
            for x in 0..nx {
                bits[grid.index([x, y, z])] = toks.bit()?;
            }
        }
    }
    if toks.word().is_some() {
        return Err(Error::Parse("trailing data after bitmap".into()));
    }
    GridSet::from_bits(grid, bits)
}

struct PbmTokens<'a> {
    chars: std::iter::Peekable<std::str::Chars<'a>>,
}

impl<'a> PbmTokens<'a> {
    fn new(text: &'a str) -> Self {
        PbmTokens { chars: text.chars().peekable() }
    }

    fn skip_ws(&mut self) {
        while let Some(&c) = self.chars.peek() {
            if c == '#' {
                for c in self.chars.by_ref() {
                    if c == '\n' {
                        break;
                    }
                }
            } else if c.is_whitespace() {
                self.chars.next();
            } else {
                break;
            }
        }
    }

    fn word(&mut self) -> Option<String> {
        self.skip_ws();
        let mut s = String::new();
        while let Some(&c) = self.chars.peek() {
            if c.is_whitespace() || c == '#' {
                break;
            }
            s.push(c);
            self.chars.next();
        }
        (!s.is_empty()).then_some(s)
    }

    fn number(&mut self) -> Result<usize> {
        let w = self.word().ok_or_else(|| Error::Parse("unexpected end of bitmap header".into()))?;
        w.parse().map_err(|_| Error::Parse(format!("bad number {w:?}")))
    }

    fn bit(&mut self) -> Result<bool> {
        self.skip_ws();
        match self.chars.next() {
            Some('0') => Ok(false),
            Some('1') => Ok(true),
            other => Err(Error::Parse(format!("bad pixel {other:?}"))),
        }
    }
}

/// Write `<stem>.pbm` and `<stem>.json`.
pub fn save_set(set: &GridSet, stem: &std::path::Path) -> Result<()> {
    std::fs::write(stem.with_extension("pbm"), to_pbm(set))?;
    let side = serde_json::to_string_pretty(&Sidecar::of(&set.grid))?;
    std::fs::write(stem.with_extension("json"), side)?;
    Ok(())
}

/// Load a bitmap; the sidecar is `<path without extension>.json`.
pub fn load_set(pbm_path: &std::path::Path) -> Result<GridSet> {
    let side: Sidecar = serde_json::from_str(&std::fs::read_to_string(pbm_path.with_extension("json"))?)?;
    let grid = side.grid()?;
    from_pbm(&std::fs::read_to_string(pbm_path)?, &grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_roundtrip() {
        let g = Grid::new(3, &[3, 4, 5], 0.5, &[0.0, 0.0, 0.0]).unwrap();
        for i in 0..g.len() {
            assert_eq!(g.index(g.coords(i)), i);
        }
    }

    #[test]
    fn centered_grid_is_symmetric() {
        let g = Grid::cube(2, 6, 0.25).unwrap();
        let a = g.center(0);
        let b = g.center(g.len() - 1);
        assert_eq!(a[0], -b[0]);
        assert_eq!(a[1], -b[1]);
    }

    #[test]
    fn pbm_roundtrip_2d_and_3d() {
        let g = Grid::new(2, &[77, 5], 0.1, &[0.3, -1.0]).unwrap();
        let s = GridSet::from_fn(&g, |p| (p[0] * 7.0).sin() > p[1]);
        assert_eq!(from_pbm(&to_pbm(&s), &g).unwrap(), s);
        let g3 = Grid::new(3, &[4, 3, 2], 1.0 / 3.0, &[0.0, 0.0, 0.1]).unwrap();
        let s3 = GridSet::from_fn(&g3, |p| p[0] + p[2] > p[1]);
        assert_eq!(from_pbm(&to_pbm(&s3), &g3).unwrap(), s3);
    }

    #[test]
    fn pbm_accepts_packed_bits() {
        let g = Grid::new(2, &[3, 2], 1.0, &[0.0, 0.0]).unwrap();
        let s = from_pbm("P1 # c\n3 2\n101\n011\n", &g).unwrap();
        assert_eq!(s.bits, vec![false, true, true, true, false, true]);
    }

    #[test]
    fn shift_and_complement() {
        let g = Grid::cube(2, 5, 1.0).unwrap();
        let s = GridSet::halfspace(&g, &[0.0, 1.0], 0.0);
        let t = s.shifted([0, 1, 0], true);
        assert!(s.is_subset(&t));
        assert_eq!(t.count() - s.count(), 5);
        assert_eq!(s.complement().complement(), s);
        assert_eq!(s.shifted_periodic([0, 5, 0]), s);
    }
}
