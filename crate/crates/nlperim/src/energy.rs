//! Discrete interaction energies L_K and nonlocal perimeters.

use crate::error::{invalid, Error, Result};
use crate::grid::{DomainMask, Grid, GridSet};
use crate::gridgeom::classical_perimeter;
use crate::kernels::{build_weights, InteractionWeights, Kernel};
use crate::numeric::{fft_nd, next_fast_len, CompSum};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use serde::Serialize;

/// Above this many (cell, offset) visits the FFT path is used.
pub const DIRECT_LIMIT: usize = 20_000_000;

/// out(x) = sum_k w(k) b(x + k) at every world cell, by direct summation over the cells in `at`.
fn field_direct(b: &[bool], g: &Grid, w: &InteractionWeights, at: &[bool]) -> Vec<f64> {
    let s0 = g.shape[0] as i64;
    let s1 = g.shape[1] as i64;
    let offs: Vec<([i64; 3], i64, f64)> =
        w.offsets.iter().map(|(k, v)| (*k, k[0] + s0 * (k[1] + s1 * k[2]), *v)).collect();
    (0..g.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|i| {
            if !at[i] {
                return 0.0;
            }
            let c = g.coords(i);
            let mut acc = CompSum::new();
            for (k, lin, v) in &offs {
                let mut inside = true;
                for a in 0..3 {
                    let p = c[a] as i64 + k[a];
                    if p < 0 || p >= g.shape[a] as i64 {
                        inside = false;
                        break;
                    }
                }
                if inside && b[(i as i64 + lin) as usize] {
                    acc.add(*v);
                }
            }
            acc.value()
        })
        .collect()
}

/// FFT-accelerated non-periodic correlation of an indicator with a stencil.
pub struct Convolver {
    shape: [usize; 3],
    padded: [usize; 3],
    dim: usize,
    w_hat: Vec<Complex<f64>>,
}

impl Convolver {
    pub fn new(g: &Grid, w: &InteractionWeights) -> Self {
        let mut padded = [1usize; 3];
        for a in 0..g.dim {
            padded[a] = next_fast_len(g.shape[a] + w.ext[a] as usize);
        }
        let total: usize = padded.iter().product();
        let mut w_hat = vec![Complex::new(0.0, 0.0); total];
        for (k, v) in &w.offsets {
            let mut idx = 0usize;
            let mut stride = 1usize;
            for a in 0..3 {
                idx += (k[a].rem_euclid(padded[a] as i64)) as usize * stride;
                stride *= padded[a];
            }
            w_hat[idx].re += v;
        }
        fft_nd(&mut w_hat, &padded[..g.dim], false);
        Convolver { shape: g.shape, padded, dim: g.dim, w_hat }
    }

    /// sum_k w(k) u(x + k) for a real field u on the world.
    pub fn apply(&self, u: &[f64]) -> Vec<f64> {
        let total: usize = self.padded.iter().product();
        let mut buf = vec![Complex::new(0.0, 0.0); total];
        for z in 0..self.shape[2] {
            for y in 0..self.shape[1] {
                for x in 0..self.shape[0] {
                    let src = x + self.shape[0] * (y + self.shape[1] * z);
                    let dst = x + self.padded[0] * (y + self.padded[1] * z);
                    buf[dst].re = u[src];
                }
            }
        }
        fft_nd(&mut buf, &self.padded[..self.dim], false);
        for (b, w) in buf.iter_mut().zip(&self.w_hat) {
            *b *= w;
        }
        fft_nd(&mut buf, &self.padded[..self.dim], true);
        let mut out = vec![0.0; u.len()];
        for z in 0..self.shape[2] {
            for y in 0..self.shape[1] {
                for x in 0..self.shape[0] {
                    out[x + self.shape[0] * (y + self.shape[1] * z)] = buf[x + self.padded[0] * (y + self.padded[1] * z)].re;
                }
            }
        }
        out
    }

    pub fn apply_mask(&self, b: &[bool]) -> Vec<f64> {
        let u: Vec<f64> = b.iter().map(|&x| if x { 1.0 } else { 0.0 }).collect();
        self.apply(&u)
    }
}

/// sum_k w(k) b(x + k) at the cells of `at` (zero elsewhere).
pub fn neighbor_field(b: &[bool], g: &Grid, w: &InteractionWeights, at: &[bool]) -> Vec<f64> {
    let visits = at.iter().filter(|&&x| x).count() * w.offsets.len();
    if visits <= DIRECT_LIMIT {
        field_direct(b, g, w, at)
    } else {
        let mut f = Convolver::new(g, w).apply_mask(b);
        for (v, &m) in f.iter_mut().zip(at) {
            if !m {
                *v = 0.0;
            }
        }
        f
    }
}

fn masked_sum(field: &[f64], mask: &[bool]) -> f64 {
    let mut s = CompSum::new();
    for (v, &m) in field.iter().zip(mask) {
        if m {
            s.add(*v);
        }
    }
    s.value()
}

/// L_K(A, B) = sum over a in A, b in B of w(b - a). A and B must be disjoint.
pub fn interaction(a: &[bool], b: &[bool], g: &Grid, w: &InteractionWeights) -> Result<f64> {
    if a.len() != g.len() || b.len() != g.len() {
        return Err(Error::ShapeMismatch("mask length differs from grid".into()));
    }
    let overlap = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    if overlap > 0 {
        return Err(Error::Overlap(overlap));
    }
    Ok(interaction_unchecked(a, b, g, w))
}

fn interaction_unchecked(a: &[bool], b: &[bool], g: &Grid, w: &InteractionWeights) -> f64 {
    // put the smaller set on the outer loop
    let (na, nb) = (a.iter().filter(|&&x| x).count(), b.iter().filter(|&&x| x).count());
    let (outer, inner) = if na <= nb { (a, b) } else { (b, a) };
    if na.min(nb) == 0 {
        return 0.0;
    }
    masked_sum(&neighbor_field(inner, g, w, outer), outer)
}

/// Interaction by the double loop over all cell pairs; test oracle for small worlds.
pub fn interaction_double_loop(a: &[bool], b: &[bool], g: &Grid, w: &InteractionWeights) -> f64 {
    let mut s = CompSum::new();
    for i in (0..g.len()).filter(|&i| a[i]) {
        let ci = g.coords(i);
        for j in (0..g.len()).filter(|&j| b[j]) {
            let cj = g.coords(j);
            let k = [cj[0] as i64 - ci[0] as i64, cj[1] as i64 - ci[1] as i64, cj[2] as i64 - ci[2] as i64];
            s.add(w.get(k));
        }
    }
    s.value()
}

/// Interaction through the FFT path regardless of size.
pub fn interaction_fft(a: &[bool], b: &[bool], g: &Grid, w: &InteractionWeights) -> f64 {
    masked_sum(&Convolver::new(g, w).apply_mask(b), a)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnergyReport {
    pub term_in_in: f64,
    pub term_in_out: f64,
    pub term_out_in: f64,
    pub total: f64,
    pub classical_perimeter: f64,
    /// Bound on the interactions dropped beyond the stencil cutoff.
    pub tail_bound: f64,
}

pub const ENERGY_CSV_HEADER: &str =
    "set_id,kernel_id,R,term_in_in,term_in_out,term_out_in,total,classical_perimeter,tail_bound";

impl EnergyReport {
    pub fn csv_row(&self, set_id: &str, kernel_id: &str, r: f64) -> String {
        format!(
            "{set_id},{kernel_id},{r},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
            self.term_in_in, self.term_in_out, self.term_out_in, self.total, self.classical_perimeter, self.tail_bound
        )
    }
}

pub(crate) struct Parts {
    pub e_in: Vec<bool>,
    pub c_in: Vec<bool>,
    pub e_out: Vec<bool>,
    pub c_out: Vec<bool>,
}

pub(crate) fn split(e: &GridSet, omega: &DomainMask) -> Parts {
    let n = e.bits.len();
    let mut p = Parts { e_in: vec![false; n], c_in: vec![false; n], e_out: vec![false; n], c_out: vec![false; n] };
    for i in 0..n {
        match (omega.omega[i], e.bits[i]) {
            (true, true) => p.e_in[i] = true,
            (true, false) => p.c_in[i] = true,
            (false, true) => p.e_out[i] = true,
            (false, false) => p.c_out[i] = true,
        }
    }
    p
}

/// Three-term K-perimeter of E in Omega over the world box.
pub fn k_perimeter(e: &GridSet, omega: &DomainMask, w: &InteractionWeights) -> Result<EnergyReport> {
    let g = &e.grid;
    g.same_world(omega.grid())?;
    let p = split(e, omega);
    let term_in_in = interaction_unchecked(&p.e_in, &p.c_in, g, w);
    let term_in_out = interaction_unchecked(&p.e_in, &p.c_out, g, w);
    let term_out_in = interaction_unchecked(&p.e_out, &p.c_in, g, w);
    let mut tot = CompSum::new();
    tot.add(term_in_in);
    tot.add(term_in_out);
    tot.add(term_out_in);
    Ok(EnergyReport {
        term_in_in,
        term_in_out,
        term_out_in,
        total: tot.value(),
        classical_perimeter: classical_perimeter(e, omega),
        tail_bound: omega.count() as f64 * w.tail,
    })
}

/// P_{K,Omega}(E) only.
pub fn k_perimeter_total(e: &GridSet, omega: &DomainMask, w: &InteractionWeights) -> Result<f64> {
    Ok(k_perimeter(e, omega, w)?.total)
}

/// Whole-space K-perimeter of a set, exact when the stencil cutoff exceeds its diameter:
/// |E| times the single-cell perimeter minus the interactions of E with itself.
pub fn whole_space_perimeter(e: &GridSet, w: &InteractionWeights) -> f64 {
    let g = &e.grid;
    let inner = masked_sum(&neighbor_field(&e.bits, g, w, &e.bits), &e.bits);
    e.count() as f64 * w.cell_perimeter() - inner
}

/// P_K(B_R) with `resolution` cells across the diameter.
pub fn pk_ball(kernel: &Kernel, r: f64, resolution: usize) -> Result<f64> {
    pk_ball_with_cell(kernel, r, 2.0 * r / resolution as f64)
}

/// P_K(B_R) on a grid of cell size h; the stencil reaches across the ball.
pub fn pk_ball_with_cell(kernel: &Kernel, r: f64, h: f64) -> Result<f64> {
    if !(r > 0.0) {
        return invalid(format!("radius must be positive, got {r}"));
    }
    let cells = (2.0 * r / h).round() as usize;
    let shape = vec![cells; kernel.dim];
    let g = Grid::centered(kernel.dim, &shape, h)?;
    let ball = GridSet::ball(&g, &[0.0; 3][..kernel.dim], r);
    let w = build_weights(kernel, &shape, h, cells as f64)?;
    Ok(whole_space_perimeter(&ball, &w))
}

#[derive(Debug, Clone, Serialize)]
pub struct SubmodularityReport {
    pub p_union: f64,
    pub p_inter: f64,
    pub cross: f64,
    pub p_e: f64,
    pub p_f: f64,
    /// P(E u F) + P(E n F) + 2 L(F \ E, E \ F) - P(E) - P(F).
    pub defect: f64,
}

pub fn submodularity_defect(e: &GridSet, f: &GridSet, omega: &DomainMask, w: &InteractionWeights) -> Result<SubmodularityReport> {
    let u = e.union(f)?;
    let i = e.intersection(f)?;
    let fe = f.difference(e)?;
    let ef = e.difference(f)?;
    let p_union = k_perimeter_total(&u, omega, w)?;
    let p_inter = k_perimeter_total(&i, omega, w)?;
    // only pairs touching Omega enter P_{K,Omega}
    let cross = interaction_in(&fe, &ef, omega, w)?;
    let p_e = k_perimeter_total(e, omega, w)?;
    let p_f = k_perimeter_total(f, omega, w)?;
    let mut d = CompSum::new();
    d.add(p_union);
    d.add(p_inter);
    d.add(2.0 * cross);
    d.add(-p_e);
    d.add(-p_f);
    Ok(SubmodularityReport { p_union, p_inter, cross, p_e, p_f, defect: d.value() })
}

/// L_K(A, B) restricted to pairs with at least one point in Omega.
pub fn interaction_in(a: &GridSet, b: &GridSet, omega: &DomainMask, w: &InteractionWeights) -> Result<f64> {
    let a_in: Vec<bool> = a.bits.iter().zip(&omega.omega).map(|(x, m)| *x && *m).collect();
    let a_out: Vec<bool> = a.bits.iter().zip(&omega.omega).map(|(x, m)| *x && !*m).collect();
    let b_in: Vec<bool> = b.bits.iter().zip(&omega.omega).map(|(x, m)| *x && *m).collect();
    Ok(interaction(&a_in, &b.bits, &a.grid, w)? + interaction(&a_out, &b_in, &a.grid, w)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct CoareaReport {
    /// Nonlocal total variation F_{K,Omega}(u).
    pub functional: f64,
    /// sum_j (t_{j+1} - t_j) P_{K,Omega}({u > t_j}).
    pub level_sum: f64,
    pub levels: Vec<f64>,
}

/// Nonlocal total variation of a piecewise constant u and its level-set decomposition.
pub fn coarea(u: &[f64], omega: &DomainMask, w: &InteractionWeights) -> Result<CoareaReport> {
    let g = omega.grid();
    if u.len() != g.len() {
        return Err(Error::ShapeMismatch(format!("{} values for {} cells", u.len(), g.len())));
    }
    if let Some(v) = u.iter().find(|v| !(**v >= 0.0 && **v <= 1.0)) {
        return invalid(format!("values must lie in [0,1], found {v}"));
    }
    // pairs with both ends in Omega are visited twice
    let s0 = g.shape[0] as i64;
    let s1 = g.shape[1] as i64;
    let parts: Vec<CompSum> = (0..g.len())
        .into_par_iter()
        .with_min_len(64)
        .map(|i| {
            let mut acc = CompSum::new();
            if !omega.omega[i] {
                return acc;
            }
            let c = g.coords(i);
            for (k, v) in &w.offsets {
                if (0..3).any(|a| {
                    let p = c[a] as i64 + k[a];
                    p < 0 || p >= g.shape[a] as i64
                }) {
                    continue;
                }
                let j = (i as i64 + k[0] + s0 * (k[1] + s1 * k[2])) as usize;
                let d = (u[i] - u[j]).abs() * v;
                acc.add(if omega.omega[j] { 0.5 * d } else { d });
            }
            acc
        })
        .collect();
    let mut functional = CompSum::new();
    for p in &parts {
        functional.merge(p);
    }
    let mut levels: Vec<f64> = u.to_vec();
    levels.push(0.0);
    levels.push(1.0);
    levels.sort_by(|a, b| a.partial_cmp(b).unwrap());
    levels.dedup();
    let mut sum = CompSum::new();
    for j in 0..levels.len() - 1 {
        let t = levels[j];
        let bits: Vec<bool> = u.iter().map(|&x| x > t).collect();
        let e = GridSet::from_bits(g, bits)?;
        sum.add((levels[j + 1] - t) * k_perimeter_total(&e, omega, w)?);
    }
    Ok(CoareaReport { functional: functional.value(), level_sum: sum.value(), levels })
}

#[derive(Debug, Clone, Serialize)]
pub struct InterpolationReport {
    /// In-in fractional term L(E n Omega, CE n Omega).
    pub ptilde: f64,
    pub per: f64,
    pub ratio: Option<f64>,
    /// Set when the classical perimeter vanishes.
    pub flagged: bool,
}

/// Ratio of the in-in fractional term to the classical perimeter in Omega.
pub fn interpolation_check(e: &GridSet, omega: &DomainMask, w: &InteractionWeights) -> Result<InterpolationReport> {
    let p = split(e, omega);
    let ptilde = interaction_unchecked(&p.e_in, &p.c_in, &e.grid, w);
    let per = classical_perimeter(e, omega);
    let ratio = if per > 0.0 { Some(ptilde / per) } else { None };
    Ok(InterpolationReport { ptilde, per, ratio, flagged: ratio.is_none() })
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundCheck {
    /// L_K(Omega, W \ Omega) with the same truncated stencil.
    pub pk_ball: f64,
    pub energy: f64,
    pub slack: f64,
    pub pass: bool,
}

/// P_{K,Omega}(E) <= P_{K,Omega}(E u Omega) <= L_K(Omega, world \ Omega).
pub fn minimizer_energy_bound_check(e: &GridSet, omega: &DomainMask, w: &InteractionWeights) -> Result<BoundCheck> {
    let out: Vec<bool> = omega.omega.iter().map(|m| !m).collect();
    let pk = interaction(&omega.omega, &out, &e.grid, w)?;
    let energy = k_perimeter_total(e, omega, w)?;
    let slack = pk - energy;
    Ok(BoundCheck { pk_ball: pk, energy, slack, pass: slack >= -1e-10 * pk })
}

/// L_K(E n Q, CE n Q) / min{|E n Q|, |CE n Q|}, or None if either side is empty.
pub fn below_estimate_ratio(e: &GridSet, q: &[bool], w: &InteractionWeights) -> Option<f64> {
    let a: Vec<bool> = e.bits.iter().zip(q).map(|(x, m)| *x && *m).collect();
    let b: Vec<bool> = e.bits.iter().zip(q).map(|(x, m)| !*x && *m).collect();
    let vol = e.grid.cell_volume();
    let m = a.iter().filter(|&&x| x).count().min(b.iter().filter(|&&x| x).count()) as f64 * vol;
    if m == 0.0 {
        return None;
    }
    Some(interaction_unchecked(&a, &b, &e.grid, w) / m)
}

/// Midpoint weights of the indicator kernel of B_{r0}.
pub fn indicator_weights(g: &Grid, r0: f64) -> Result<InteractionWeights> {
    let cut = (r0 / g.h).max(1.0);
    crate::kernels::build_weights_with(
        g.dim,
        &g.shape[..g.dim],
        g.h,
        cut,
        0,
        crate::kernels::DEFAULT_STENCIL_BUDGET,
        |z| if (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt() <= r0 { 1.0 } else { 0.0 },
        |_| 0.0,
    )
}

/// L_{K0}(E n Q, CE n Q) / L_K(E n Q, CE n Q) for the indicator kernel weights `w0`.
pub fn tilde_estimate_ratio(e: &GridSet, q: &[bool], w0: &InteractionWeights, w: &InteractionWeights) -> Option<f64> {
    let a: Vec<bool> = e.bits.iter().zip(q).map(|(x, m)| *x && *m).collect();
    let b: Vec<bool> = e.bits.iter().zip(q).map(|(x, m)| !*x && *m).collect();
    let den = interaction_unchecked(&a, &b, &e.grid, w);
    if den == 0.0 {
        return None;
    }
    Some(interaction_unchecked(&a, &b, &e.grid, w0) / den)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::KernelSpec;

    fn setup(n: usize) -> (Grid, InteractionWeights) {
        let k = KernelSpec::fractional(2, 0.5).build().unwrap();
        let g = Grid::cube(2, n, 0.25).unwrap();
        let w = build_weights(&k, &[n, n], 0.25, n as f64 * 1.5).unwrap();
        (g, w)
    }

    #[test]
    fn single_pair() {
        let (g, w) = setup(6);
        let mut a = vec![false; g.len()];
        let mut b = vec![false; g.len()];
        a[g.index([1, 1, 0])] = true;
        b[g.index([3, 2, 0])] = true;
        assert_eq!(interaction(&a, &b, &g, &w).unwrap(), w.get([2, 1, 0]));
        assert_eq!(interaction(&a, &vec![false; g.len()], &g, &w).unwrap(), 0.0);
        assert!(interaction(&a, &a, &g, &w).is_err());
    }

    #[test]
    fn fft_matches_direct() {
        let (g, w) = setup(12);
        let a: Vec<bool> = (0..g.len()).map(|i| (i * 7 + 3) % 5 < 2).collect();
        let b: Vec<bool> = a.iter().map(|x| !x).collect();
        let d = interaction_double_loop(&a, &b, &g, &w);
        let f = interaction_fft(&a, &b, &g, &w);
        let m = interaction(&a, &b, &g, &w).unwrap();
        assert!((d - f).abs() <= 1e-10 * d);
        assert!((d - m).abs() <= 1e-12 * d);
    }

    #[test]
    fn empty_and_full() {
        let (g, w) = setup(8);
        let d = DomainMask::ball(GridSet::empty(&g), &[0.0, 0.0], 0.8);
        assert_eq!(k_perimeter(&GridSet::empty(&g), &d, &w).unwrap().total, 0.0);
        assert_eq!(k_perimeter(&GridSet::full(&g), &d, &w).unwrap().total, 0.0);
    }

    #[test]
    fn coarea_binary() {
        let (g, w) = setup(8);
        let d = DomainMask::ball(GridSet::empty(&g), &[0.0, 0.0], 0.8);
        let e = GridSet::halfspace(&g, &[0.3, 0.954], 0.1);
        let u: Vec<f64> = e.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let r = coarea(&u, &d, &w).unwrap();
        let p = k_perimeter_total(&e, &d, &w).unwrap();
        assert!((r.functional - p).abs() < 1e-12 * p);
        assert!((r.level_sum - p).abs() < 1e-12 * p);
        let half = coarea(&vec![0.5; g.len()], &d, &w).unwrap();
        assert_eq!(half.functional, 0.0);
        assert!(coarea(&vec![1.5; g.len()], &d, &w).is_err());
    }
}
