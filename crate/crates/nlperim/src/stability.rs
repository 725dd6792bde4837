//! Translation perturbations of sets and the flatness certificate.

use crate::energy::k_perimeter_total;
use crate::error::{invalid, Result};
use crate::grid::{dot, DomainKind, DomainMask, GridSet};
use crate::gridgeom::{best_halfspace_over, directional_variation, domain_center, sample_directions, scan_lines};
use crate::kernels::InteractionWeights;
use rayon::prelude::*;
use serde::Serialize;
use std::f64::consts::PI;

/// Piecewise linear cutoff: 1 on B_{R/2}, 2 - 2|x|/R on the annulus, 0 outside B_R.
pub fn cutoff_phi(r_abs: f64, big_r: f64) -> f64 {
    if r_abs <= 0.5 * big_r {
        1.0
    } else if r_abs < big_r {
        2.0 - 2.0 * r_abs / big_r
    } else {
        0.0
    }
}

/// Logarithmic cutoff: 1 on B_{sqrt R}, 2 - 2 log|x| / log R up to R, 0 beyond.
pub fn cutoff_phi_log(r_abs: f64, big_r: f64) -> f64 {
    if r_abs <= big_r.sqrt() {
        1.0
    } else if r_abs < big_r {
        2.0 - 2.0 * r_abs.ln() / big_r.ln()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Linear,
    Log,
}

impl Variant {
    pub fn phi(self, r_abs: f64, big_r: f64) -> f64 {
        match self {
            Variant::Linear => cutoff_phi(r_abs, big_r),
            Variant::Log => cutoff_phi_log(r_abs, big_r),
        }
    }

    /// Radius inside which the cutoff equals one.
    pub fn core(self, big_r: f64) -> f64 {
        match self {
            Variant::Linear => 0.5 * big_r,
            Variant::Log => big_r.sqrt(),
        }
    }
}

fn norm3(x: &[f64; 3]) -> f64 {
    (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]).sqrt()
}

/// Preimage of y under x -> x + t phi(x) v, by fixed-point iteration.
pub fn psi_inverse(y: &[f64; 3], big_r: f64, t: f64, v: &[f64; 3], variant: Variant) -> [f64; 3] {
    if norm3(y) >= big_r {
        return *y;
    }
    let mut x = *y;
    for _ in 0..200 {
        let f = t * variant.phi(norm3(&x), big_r);
        let nx = [y[0] - f * v[0], y[1] - f * v[1], y[2] - f * v[2]];
        let d = ((nx[0] - x[0]).powi(2) + (nx[1] - x[1]).powi(2) + (nx[2] - x[2]).powi(2)).sqrt();
        x = nx;
        if d <= 1e-15 * (1.0 + big_r) {
            break;
        }
    }
    x
}

fn check_perturb(big_r: f64, t: f64, variant: Variant) -> Result<()> {
    if !(t.abs() < 1.0) {
        return invalid(format!("|t| must be below 1, got {t}"));
    }
    if !(big_r > 0.0) || (variant == Variant::Log && big_r < 4.0) {
        return invalid(format!("R = {big_r} too small for the {variant:?} cutoff"));
    }
    Ok(())
}

const SUPERSAMPLE: usize = 4;

/// E_{R,t} = Psi_{R,t}(E) resampled at cell centers; Psi fixes the complement of B_R (centered at the origin).
pub fn perturb(e: &GridSet, big_r: f64, t: f64, v: &[f64], variant: Variant) -> Result<GridSet> {
    check_perturb(big_r, t, variant)?;
    let g = &e.grid;
    let dim = g.dim;
    let mut vv = [0.0; 3];
    vv[..dim].copy_from_slice(&v[..dim]);
    if (norm3(&vv) - 1.0).abs() > 1e-9 {
        return invalid("direction must be a unit vector");
    }
    if t == 0.0 {
        return Ok(e.clone());
    }
    let core = variant.core(big_r);
    let value_at = |x: &[f64; 3], own: usize| -> bool { g.locate(x).map_or(e.bits[own], |j| e.bits[j]) };
    let bits: Vec<bool> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let y = g.center(i);
            if norm3(&y) >= big_r {
                return e.bits[i];
            }
            let x0 = psi_inverse(&y, big_r, t, &vv, variant);
            if norm3(&x0) < core {
                let x = [y[0] - t * vv[0], y[1] - t * vv[1], y[2] - t * vv[2]];
                return value_at(&x, i);
            }
            let centre = value_at(&x0, i);
            let per_axis = SUPERSAMPLE;
            let total = per_axis.pow(dim as u32);
            let mut ones = 0;
            for s in 0..total {
                let mut q = y;
                let mut rem = s;
                for a in q.iter_mut().take(dim) {
                    let j = rem % per_axis;
                    rem /= per_axis;
                    *a += g.h * ((j as f64 + 0.5) / per_axis as f64 - 0.5);
                }
                if value_at(&psi_inverse(&q, big_r, t, &vv, variant), i) {
                    ones += 1;
                }
            }
            match (2 * ones).cmp(&total) {
                std::cmp::Ordering::Greater => true,
                std::cmp::Ordering::Less => false,
                std::cmp::Ordering::Equal => centre,
            }
        })
        .collect();
    GridSet::from_bits(g, bits)
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub lhs: f64,
    pub rhs: f64,
    pub defect: f64,
    pub p_plus: f64,
    pub p_minus: f64,
    pub p_zero: f64,
}

/// Second difference of P_{K,B_R} under the perturbation against the K* bound.
pub fn perturbation_defect(
    e: &GridSet,
    big_r: f64,
    t: f64,
    v: &[f64],
    variant: Variant,
    w: &InteractionWeights,
    w_star: &InteractionWeights,
) -> Result<PerturbationReport> {
    check_perturb(big_r, t, variant)?;
    let g = &e.grid;
    let ball = |r: f64| DomainMask::ball(GridSet::empty(g), &[0.0; 3][..g.dim], r);
    let om = ball(big_r);
    let p_zero = k_perimeter_total(e, &om, w)?;
    let p_plus = k_perimeter_total(&perturb(e, big_r, t, v, variant)?, &om, w)?;
    let p_minus = k_perimeter_total(&perturb(e, big_r, -t, v, variant)?, &om, w)?;
    let lhs = p_plus + p_minus - 2.0 * p_zero;
    let rhs = match variant {
        Variant::Linear => 32.0 * t * t / (big_r * big_r) * k_perimeter_total(e, &om, w_star)?,
        Variant::Log => {
            let mut sup: f64 = 0.0;
            let mut rho = big_r;
            while rho >= 1.0 {
                sup = sup.max(k_perimeter_total(e, &ball(rho), w_star)? / (rho * rho));
                rho *= 0.5;
            }
            (32.0 * PI * t).powi(2) / big_r.ln() * sup
        }
    };
    Ok(PerturbationReport { lhs, rhs, defect: lhs - rhs, p_plus, p_minus, p_zero })
}

#[derive(Debug, Clone, Serialize)]
pub struct ProductRow {
    pub t: f64,
    /// |((E + tv) \ E) n B_1|
    pub gained: f64,
    /// |(E \ (E + tv)) n B_1|
    pub lost: f64,
    /// min over the sign of t of gained * lost / t^2.
    pub product: f64,
}

fn shift_cells(t: f64, v: &[f64; 3], h: f64) -> [i64; 3] {
    [(t * v[0] / h).round() as i64, (t * v[1] / h).round() as i64, (t * v[2] / h).round() as i64]
}

fn gain_loss(e: &GridSet, omega: &DomainMask, k: [i64; 3]) -> (f64, f64) {
    let s = e.shifted(k, false);
    let (mut gained, mut lost) = (0usize, 0usize);
    for i in 0..e.bits.len() {
        if omega.omega[i] {
            if s.bits[i] && !e.bits[i] {
                gained += 1;
            }
            if e.bits[i] && !s.bits[i] {
                lost += 1;
            }
        }
    }
    let vol = e.grid.cell_volume();
    (gained as f64 * vol, lost as f64 * vol)
}

/// Translation product per t; translations are rounded to whole cells.
pub fn translation_product(e: &GridSet, omega: &DomainMask, v: &[f64], ts: &[f64]) -> Result<Vec<ProductRow>> {
    let g = &e.grid;
    let mut vv = [0.0; 3];
    vv[..g.dim].copy_from_slice(&v[..g.dim]);
    let mut rows = Vec::new();
    for &t in ts {
        if t == 0.0 {
            return invalid("t must be nonzero");
        }
        let (gp, lp) = gain_loss(e, omega, shift_cells(t, &vv, g.h));
        let (gm, lm) = gain_loss(e, omega, shift_cells(-t, &vv, g.h));
        let product = (gp * lp).min(gm * lm) / (t * t);
        rows.push(ProductRow { t, gained: gp, lost: lp, product });
    }
    Ok(rows)
}

/// Estimate of the small-t limit: the row with the smallest |t|.
pub fn product_limit(rows: &[ProductRow]) -> Option<f64> {
    rows.iter().min_by(|a, b| a.t.abs().partial_cmp(&b.t.abs()).unwrap()).map(|r| r.product)
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphSample {
    /// Coordinates of the line in the frame (first n-1 axes), relative to the ball center.
    pub y: Vec<f64>,
    /// Normalized height of the graph, None on bad lines.
    pub g: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FlatnessCertificate {
    /// Rows e_1 .. e_n of the chosen frame; e_n points away from E.
    pub frame: Vec<[f64; 3]>,
    pub mu: f64,
    /// (Phi_+, Phi_-) along each frame axis.
    pub phi: Vec<(f64, f64)>,
    pub eps: f64,
    pub bad_measure: f64,
    pub t_star: f64,
    pub t_lower: f64,
    pub t_upper: f64,
    /// Set when the full-E and full-complement levels were out of order.
    pub unordered: bool,
    pub osc_g: f64,
    pub symdiff: f64,
    pub per_rescaled: f64,
    /// eps / mu when mu > 0.
    pub c_measured: Option<f64>,
    /// Best symmetric difference over a larger halfspace family containing the frame normal.
    pub best_fit_symdiff: f64,
    #[serde(skip)]
    pub graph: Vec<GraphSample>,
}

impl FlatnessCertificate {
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "frame": self.frame.iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
            "mu": self.mu,
            "eps": self.eps,
            "bad_measure": self.bad_measure,
            "t_star": self.t_star,
            "osc_g": self.osc_g,
            "symdiff": self.symdiff,
            "per_rescaled": self.per_rescaled,
        })
    }

    pub fn graph_csv(&self) -> String {
        let mut s = String::from(if self.frame.len() == 2 { "y1,g\n" } else { "y1,y2,g\n" });
        for p in &self.graph {
            for y in &p.y {
                s.push_str(&format!("{y:.12},"));
            }
            match p.g {
                Some(v) => s.push_str(&format!("{v:.12}\n")),
                None => s.push_str("bad\n"),
            }
        }
        s
    }
}

/// Candidate frames: rotations by sampled angles (n = 2) or sampled normals with in-plane angles (n = 3).
pub fn sample_frames(dim: usize, direction_samples: usize) -> Vec<Vec<[f64; 3]>> {
    if dim == 2 {
        (0..direction_samples)
            .map(|j| {
                let th = PI * j as f64 / direction_samples as f64;
                let (c, s) = (th.cos(), th.sin());
                vec![[c, s, 0.0], [-s, c, 0.0]]
            })
            .collect()
    } else {
        let mut normals: Vec<[f64; 3]> = vec![[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        for p in [[0.0, 1.0, phi], [0.0, -1.0, phi], [1.0, phi, 0.0], [-1.0, phi, 0.0], [phi, 0.0, 1.0], [-phi, 0.0, 1.0]] {
            let n = norm3(&p);
            normals.push([p[0] / n, p[1] / n, p[2] / n]);
        }
        for d in sample_directions(3, 2 * direction_samples) {
            if d[2] > 0.0 {
                normals.push(d);
            }
        }
        let mut frames = Vec::new();
        for nrm in normals {
            let basis = crate::gridgeom::orthogonal_basis(&nrm, 3);
            for j in 0..12 {
                let th = 0.5 * PI * j as f64 / 12.0;
                let (c, s) = (th.cos(), th.sin());
                let e1 = [
                    c * basis[0][0] + s * basis[1][0],
                    c * basis[0][1] + s * basis[1][1],
                    c * basis[0][2] + s * basis[1][2],
                ];
                let e2 = crate::gridgeom::cross(&nrm, &e1);
                frames.push(vec![e1, e2, nrm]);
            }
        }
        frames
    }
}

fn frame_mu(e: &GridSet, omega: &DomainMask, frame: &[[f64; 3]]) -> Result<(f64, Vec<(f64, f64)>)> {
    let dim = frame.len();
    let mut phis = Vec::with_capacity(dim);
    let mut mu: f64 = 0.0;
    for (i, ax) in frame.iter().enumerate() {
        let dv = directional_variation(e, omega, &ax[..dim])?;
        phis.push((dv.phi_plus, dv.phi_minus));
        if i + 1 < dim {
            mu = mu.max(dv.phi_plus.max(dv.phi_minus));
        } else {
            mu = mu.max(dv.phi_plus.min(dv.phi_minus));
        }
    }
    Ok((mu, phis))
}

fn domain_radius(omega: &DomainMask) -> f64 {
    match omega.kind {
        DomainKind::Ball { radius, .. } => radius,
        _ => crate::gridgeom::omega_bounding_ball(omega).1,
    }
}

/// Flatness certificate of E inside the ball Omega.
pub fn flatness_certificate(e: &GridSet, omega: &DomainMask, direction_samples: usize) -> Result<FlatnessCertificate> {
    let g = &e.grid;
    let dim = g.dim;
    if direction_samples == 0 {
        return invalid("direction_samples must be positive");
    }
    let frames = sample_frames(dim, direction_samples);
    let scored = frames.par_iter().map(|f| frame_mu(e, omega, f)).collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    let mut best_mu = f64::INFINITY;
    let mut best_phi = Vec::new();
    for (j, (mu, phi)) in scored.into_iter().enumerate() {
        if mu < best_mu {
            best = j;
            best_mu = mu;
            best_phi = phi;
        }
    }
    let mut frame = frames[best].clone();
    // orient e_n so that E lies below: no 0 -> 1 jumps along +e_n on good lines
    let (pp, pm) = best_phi[dim - 1];
    if pp < pm {
        for x in frame[dim - 1].iter_mut() {
            *x = -*x;
        }
        if dim == 3 {
            // keep the frame right-handed
            for x in frame[0].iter_mut() {
                *x = -*x;
            }
            best_phi[0] = (best_phi[0].1, best_phi[0].0);
        }
        best_phi[dim - 1] = (pm, pp);
    }
    let en = frame[dim - 1];
    let c = domain_center(omega);
    let r = domain_radius(omega);
    let h = g.h;
    let cs = h.powi(dim as i32 - 1);

    let lines = scan_lines(e, omega, &en[..dim])?;
    let mut graph = Vec::with_capacity(lines.len());
    let mut bad = 0usize;
    let (mut gmin, mut gmax) = (f64::INFINITY, f64::NEG_INFINITY);
    for l in &lines {
        let rel = [l.foot[0] - c[0], l.foot[1] - c[1], l.foot[2] - c[2]];
        let y: Vec<f64> = frame[..dim - 1].iter().map(|ax| dot(&rel, ax)).collect();
        if l.up >= 1 {
            bad += 1;
            graph.push(GraphSample { y, g: None });
            continue;
        }
        let has_zero = l.vals.contains(&Some(false));
        let gv = match l.last_one() {
            None => -1.0,
            Some(_) if !has_zero => 1.0,
            Some(t) => ((t + 0.5 * h) / r).clamp(-1.0, 1.0),
        };
        gmin = gmin.min(gv);
        gmax = gmax.max(gv);
        graph.push(GraphSample { y, g: Some(gv) });
    }
    let bad_measure = bad as f64 * cs;
    let osc_g = if gmax >= gmin { gmax - gmin } else { 0.0 };

    // horizontal slabs of thickness h that lie entirely in E or entirely outside
    let mut slabs: std::collections::BTreeMap<i64, (bool, bool)> = std::collections::BTreeMap::new();
    let o = g.center(0);
    let s0 = dot(&[o[0] - c[0], o[1] - c[1], o[2] - c[2]], &en);
    for i in omega.cells() {
        let p = g.center(i);
        let s = dot(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]], &en);
        let j = ((s - s0) / h).round() as i64;
        let ent = slabs.entry(j).or_insert((true, true));
        ent.0 &= e.bits[i];
        ent.1 &= !e.bits[i];
    }
    let mut t_lower = -1.0f64;
    let mut t_upper = 1.0f64;
    for (&j, &(all_e, all_c)) in &slabs {
        if all_e {
            t_lower = t_lower.max(((s0 + (j as f64 + 0.5) * h) / r).min(1.0));
        }
        if all_c {
            t_upper = t_upper.min(((s0 + (j as f64 - 0.5) * h) / r).max(-1.0));
        }
    }
    let unordered = t_lower > t_upper;
    if unordered {
        std::mem::swap(&mut t_lower, &mut t_upper);
    }
    let t_star = 0.5 * (t_lower + t_upper);
    let level = dot(&c, &en) + t_star * r;
    let half = GridSet::from_fn(g, |p| dot(p, &en) <= level);
    let symdiff = crate::gridgeom::symmetric_difference_measure(e, &half, omega)?;
    let eps = symdiff.max(bad_measure);

    let eps_f = eps.max(h);
    let faces = crate::gridgeom::boundary_faces(e, omega);
    let mut per_rescaled = 0.0;
    for (a, &cnt) in faces.iter().enumerate().take(dim) {
        let nn = en[a];
        let tang = (1.0 - nn * nn).max(0.0);
        per_rescaled += cnt as f64 * cs * (tang / (eps_f * eps_f) + nn * nn).sqrt();
    }

    let mut dirs = sample_directions(dim, 2 * direction_samples);
    dirs.push(en);
    let best_fit_symdiff = best_halfspace_over(e, omega, &dirs).symdiff;

    Ok(FlatnessCertificate {
        frame,
        mu: best_mu,
        phi: best_phi,
        eps,
        bad_measure,
        t_star,
        t_lower,
        t_upper,
        unordered,
        osc_g,
        symdiff,
        per_rescaled,
        c_measured: if best_mu > 0.0 { Some(eps / best_mu) } else { None },
        best_fit_symdiff,
        graph,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn cutoff_values() {
        assert_eq!(cutoff_phi(4.0, 8.0), 1.0);
        assert_eq!(cutoff_phi(6.0, 8.0), 0.5);
        assert_eq!(cutoff_phi(9.0, 8.0), 0.0);
        assert!((cutoff_phi_log(4.0, 16.0) - 1.0).abs() < 1e-15);
        assert_eq!(cutoff_phi_log(16.0, 16.0), 0.0);
        assert!((cutoff_phi_log(8.0, 16.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn perturb_translates_core_and_fixes_outside() {
        let g = Grid::cube(2, 64, 0.25).unwrap();
        let e = GridSet::from_fn(&g, |p| (p[0] * 1.3).sin() + (p[1] * 0.7).cos() > 0.4);
        let out = perturb(&e, 6.0, 0.5, &[1.0, 0.0], Variant::Linear).unwrap();
        let shifted = e.shifted([2, 0, 0], false);
        for i in 0..g.len() {
            let p = g.center(i);
            let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
            if r >= 6.0 {
                assert_eq!(out.bits[i], e.bits[i]);
            }
            if ((p[0] - 0.5).powi(2) + p[1] * p[1]).sqrt() < 3.0 {
                assert_eq!(out.bits[i], shifted.bits[i]);
            }
        }
        assert_eq!(perturb(&e, 6.0, 0.0, &[1.0, 0.0], Variant::Linear).unwrap(), e);
        assert!(perturb(&e, 6.0, 1.0, &[1.0, 0.0], Variant::Linear).is_err());
    }

    #[test]
    fn halfplane_certificate() {
        let g = Grid::cube(2, 40, 0.05).unwrap();
        let e = GridSet::halfspace(&g, &[0.0, 1.0], 0.0);
        let d = DomainMask::ball(e.clone(), &[0.0, 0.0], 1.0);
        let c = flatness_certificate(&e, &d, 180).unwrap();
        assert_eq!(c.mu, 0.0);
        assert_eq!(c.bad_measure, 0.0);
        assert_eq!(c.symdiff, 0.0);
        assert!(c.osc_g < 1e-12);
        assert!(c.graph.iter().all(|p| p.g.unwrap().abs() < 1e-12));
    }
}
