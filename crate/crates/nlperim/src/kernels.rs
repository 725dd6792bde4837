//! Interaction kernels, their companion kernels K*, audits and cell-pair weights.

use crate::error::{invalid, Error, Result};
use crate::numeric::{gauss_integrate, sphere_measure, CompSum, GL4_NODES, GL4_WEIGHTS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

pub const ATABLE_2D: usize = 256;
pub const ATABLE_POLAR: usize = 32;
pub const ATABLE_AZIMUTH: usize = 64;
const EVEN_TOL: f64 = 1e-12;
/// Support radius of the truncated family (9 - |z|^2)^3_+ |z|^{-n-s}.
pub const TRUNCATION_RADIUS: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Fractional,
    Anisotropic,
    Truncated,
    Integrable,
}

/// Serialized kernel description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: FamilyKind,
    pub dim: usize,
    #[serde(default)]
    pub s: Option<f64>,
    /// Regularization weight: K + epsilon |z|^{-n-1/2}.
    #[serde(default)]
    pub epsilon: f64,
    /// Indicator radius for the K* = C1 (K + chi_{B_r0}) variant.
    #[serde(default)]
    pub r0: Option<f64>,
    #[serde(default)]
    pub c1: Option<f64>,
    /// Interaction cutoff radius in length units.
    #[serde(default)]
    pub cutoff: Option<f64>,
    #[serde(default)]
    pub a_table: Option<Vec<f64>>,
    #[serde(default = "default_true")]
    pub normalize: bool,
}

fn default_true() -> bool {
    true
}

impl KernelSpec {
    pub fn fractional(dim: usize, s: f64) -> Self {
        KernelSpec {
            family: FamilyKind::Fractional,
            dim,
            s: Some(s),
            epsilon: 0.0,
            r0: None,
            c1: None,
            cutoff: None,
            a_table: None,
            normalize: true,
        }
    }

    pub fn anisotropic(dim: usize, s: f64, table: Vec<f64>) -> Self {
        KernelSpec { family: FamilyKind::Anisotropic, a_table: Some(table), ..KernelSpec::fractional(dim, s) }
    }

    pub fn truncated(dim: usize, s: f64) -> Self {
        KernelSpec { family: FamilyKind::Truncated, ..KernelSpec::fractional(dim, s) }
    }

    pub fn integrable(dim: usize) -> Self {
        KernelSpec { family: FamilyKind::Integrable, s: None, ..KernelSpec::fractional(dim, 0.5) }
    }

    pub fn unnormalized(mut self) -> Self {
        self.normalize = false;
        self
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon = eps;
        self
    }

    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = Some(cutoff);
        self
    }

    pub fn build(&self) -> Result<Kernel> {
        Kernel::new(self)
    }
}

/// Positive even function on the sphere, sampled on a uniform angular grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ATable {
    dim: usize,
    values: Vec<f64>,
    min: f64,
    max: f64,
    mean: f64,
    /// Largest angular slope (per radian) between neighbouring samples.
    slope: f64,
}

impl ATable {
    pub fn new(dim: usize, raw: &[f64]) -> Result<Self> {
        let expected = if dim == 2 { ATABLE_2D } else { ATABLE_POLAR * ATABLE_AZIMUTH };
        if raw.len() != expected {
            return invalid(format!("a_table needs {expected} samples for n={dim}, got {}", raw.len()));
        }
        if let Some(v) = raw.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return invalid(format!("a_table entries must be positive, found {v}"));
        }
        let scale = raw.iter().cloned().fold(0.0, f64::max);
        let mirror = |i: usize| -> usize {
            if dim == 2 {
                (i + ATABLE_2D / 2) % ATABLE_2D
            } else {
                let (p, a) = (i / ATABLE_AZIMUTH, i % ATABLE_AZIMUTH);
                (ATABLE_POLAR - 1 - p) * ATABLE_AZIMUTH + (a + ATABLE_AZIMUTH / 2) % ATABLE_AZIMUTH
            }
        };
        let mut values = vec![0.0; raw.len()];
        for i in 0..raw.len() {
            let j = mirror(i);
            if (raw[i] - raw[j]).abs() > EVEN_TOL * scale {
                return invalid(format!("a_table is not even: a[{i}]={} vs a[{j}]={}", raw[i], raw[j]));
            }
            values[i] = 0.5 * (raw[i] + raw[j]);
        }
        // bit-identical values on antipodal samples
        for i in 0..raw.len() {
            let j = mirror(i);
            if j < i {
                values[i] = values[j];
            }
        }
        let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = values.iter().cloned().fold(0.0, f64::max);
        let (mean, slope) = if dim == 2 {
            let d = 2.0 * PI / ATABLE_2D as f64;
            let slope = (0..ATABLE_2D)
                .map(|i| (values[(i + 1) % ATABLE_2D] - values[i]).abs() / d)
                .fold(0.0, f64::max);
            (values.iter().sum::<f64>() / ATABLE_2D as f64, slope)
        } else {
            let dp = PI / ATABLE_POLAR as f64;
            let da = 2.0 * PI / ATABLE_AZIMUTH as f64;
            let mut acc = 0.0;
            let mut wsum = 0.0;
            let mut slope: f64 = 0.0;
            for p in 0..ATABLE_POLAR {
                let th = (p as f64 + 0.5) * dp;
                for a in 0..ATABLE_AZIMUTH {
                    let v = values[p * ATABLE_AZIMUTH + a];
                    acc += v * th.sin();
                    wsum += th.sin();
                    let va = values[p * ATABLE_AZIMUTH + (a + 1) % ATABLE_AZIMUTH];
                    slope = slope.max((va - v).abs() / (da * th.sin()));
                    if p + 1 < ATABLE_POLAR {
                        let vp = values[(p + 1) * ATABLE_AZIMUTH + a];
                        slope = slope.max((vp - v).abs() / dp);
                    }
                }
            }
            (acc / wsum, slope)
        };
        Ok(ATable { dim, values, min, max, mean, slope })
    }

    /// Constant table.
    pub fn constant(dim: usize, c: f64) -> Result<Self> {
        let len = if dim == 2 { ATABLE_2D } else { ATABLE_POLAR * ATABLE_AZIMUTH };
        ATable::new(dim, &vec![c; len])
    }

    /// Sample a function of the direction onto the table grid (not symmetrized).
    pub fn sample(dim: usize, f: impl Fn(&[f64; 3]) -> f64) -> Vec<f64> {
        if dim == 2 {
            (0..ATABLE_2D)
                .map(|i| {
                    let th = 2.0 * PI * i as f64 / ATABLE_2D as f64;
                    f(&[th.cos(), th.sin(), 0.0])
                })
                .collect()
        } else {
            let mut out = Vec::with_capacity(ATABLE_POLAR * ATABLE_AZIMUTH);
            for p in 0..ATABLE_POLAR {
                let th = (p as f64 + 0.5) * PI / ATABLE_POLAR as f64;
                for a in 0..ATABLE_AZIMUTH {
                    let ph = 2.0 * PI * a as f64 / ATABLE_AZIMUTH as f64;
                    out.push(f(&[th.sin() * ph.cos(), th.sin() * ph.sin(), th.cos()]));
                }
            }
            out
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interpolated value at the direction of `z` (z != 0).
    pub fn eval(&self, z: &[f64; 3]) -> f64 {
        if self.dim == 2 {
            let mut th = z[1].atan2(z[0]);
            if th < 0.0 {
                th += 2.0 * PI;
            }
            let x = th / (2.0 * PI) * ATABLE_2D as f64;
            let i = (x.floor() as usize).min(ATABLE_2D - 1);
            let f = x - i as f64;
            let a = self.values[i];
            let b = self.values[(i + 1) % ATABLE_2D];
            a + f * (b - a)
        } else {
            let r = (z[0] * z[0] + z[1] * z[1] + z[2] * z[2]).sqrt();
            let th = (z[2] / r).clamp(-1.0, 1.0).acos();
            let mut ph = z[1].atan2(z[0]);
            if ph < 0.0 {
                ph += 2.0 * PI;
            }
            let xp = (th / PI * ATABLE_POLAR as f64 - 0.5).clamp(0.0, (ATABLE_POLAR - 1) as f64);
            let p0 = (xp.floor() as usize).min(ATABLE_POLAR - 2);
            let fp = xp - p0 as f64;
            let xa = ph / (2.0 * PI) * ATABLE_AZIMUTH as f64;
            let a0 = (xa.floor() as usize).min(ATABLE_AZIMUTH - 1);
            let fa = xa - a0 as f64;
            let a1 = (a0 + 1) % ATABLE_AZIMUTH;
            let v = |p: usize, a: usize| self.values[p * ATABLE_AZIMUTH + a];
            let lo = v(p0, a0) + fa * (v(p0, a1) - v(p0, a0));
            let hi = v(p0 + 1, a0) + fa * (v(p0 + 1, a1) - v(p0 + 1, a0));
            lo + fp * (hi - lo)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    Fractional,
    Anisotropic(ATable),
    Truncated,
    Integrable,
}

/// Companion kernel dominating the scaled first and second derivatives of K.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KStar {
    ProportionalC1 { c1: f64 },
    ProportionalPlusIndicator { c1: f64, r0: f64 },
    /// Closed-form integrable bound for e^{9-|z|^2}, plus C_eps eps |z|^{-n-1/2}.
    IntegrableKStar,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub family: Family,
    pub dim: usize,
    /// Order s (0 for the integrable family).
    pub s: f64,
    /// Normalization factor applied to the base family.
    pub scale: f64,
    pub epsilon: f64,
    pub kstar: KStar,
    /// Sandwich constants lambda <= K |z|^{n+s} <= Lambda (power-law families, epsilon = 0).
    pub lambda: Option<f64>,
    pub big_lambda: Option<f64>,
    pub spec: KernelSpec,
}

/// C1 making C1 |z|^{-a} dominate both derivative terms of |z|^{-a}.
pub fn power_law_c1(a: f64) -> f64 {
    a * (a + 1.0) * 2f64.powf(a + 2.0)
}

impl Kernel {
    pub fn new(spec: &KernelSpec) -> Result<Kernel> {
        let dim = spec.dim;
        if !(dim == 2 || dim == 3) {
            return invalid(format!("dimension must be 2 or 3, got {dim}"));
        }
        if !(spec.epsilon >= 0.0 && spec.epsilon.is_finite()) {
            return invalid(format!("epsilon must be >= 0, got {}", spec.epsilon));
        }
        let needs_s = spec.family != FamilyKind::Integrable;
        let s = if needs_s {
            let s = spec.s.ok_or_else(|| Error::InvalidParam("missing order s".into()))?;
            if !(s > 0.0 && s < 1.0) {
                return invalid(format!("order s must lie in (0,1), got {s}"));
            }
            s
        } else {
            0.0
        };
        let family = match spec.family {
            FamilyKind::Fractional => Family::Fractional,
            FamilyKind::Anisotropic => {
                let raw = spec.a_table.as_ref().ok_or_else(|| Error::InvalidParam("anisotropic kernel needs a_table".into()))?;
                Family::Anisotropic(ATable::new(dim, raw)?)
            }
            FamilyKind::Truncated => Family::Truncated,
            FamilyKind::Integrable => Family::Integrable,
        };
        let mut k = Kernel {
            family,
            dim,
            s,
            scale: 1.0,
            epsilon: spec.epsilon,
            kstar: KStar::ProportionalC1 { c1: 1.0 },
            lambda: None,
            big_lambda: None,
            spec: spec.clone(),
        };
        if spec.normalize {
            // every profile is radially nonincreasing, so inf over B_2 sits on |z| = 2
            let inf = k.amin() * k.profile(2.0);
            k.scale = (1.0 / inf).max(1.0);
        }
        if matches!(k.family, Family::Fractional | Family::Anisotropic(_)) && k.epsilon == 0.0 {
            k.lambda = Some(k.scale * k.amin());
            k.big_lambda = Some(k.scale * k.amax());
        }
        k.kstar = k.default_kstar()?;
        if let Some(c1) = spec.c1 {
            if !(c1 > 0.0) {
                return invalid("c1 must be positive");
            }
            k.kstar = match spec.r0 {
                Some(r0) if r0 >= 2.0 => KStar::ProportionalPlusIndicator { c1, r0 },
                Some(r0) => return invalid(format!("r0 must be >= 2, got {r0}")),
                None => KStar::ProportionalC1 { c1 },
            };
        } else if let Some(r0) = spec.r0 {
            if r0 < 2.0 {
                return invalid(format!("r0 must be >= 2, got {r0}"));
            }
        }
        Ok(k)
    }

    fn amin(&self) -> f64 {
        match &self.family {
            Family::Anisotropic(t) => t.min,
            _ => 1.0,
        }
    }

    fn amax(&self) -> f64 {
        match &self.family {
            Family::Anisotropic(t) => t.max,
            _ => 1.0,
        }
    }

    fn amean(&self) -> f64 {
        match &self.family {
            Family::Anisotropic(t) => t.mean,
            _ => 1.0,
        }
    }

    /// Exponent of the power-law part, n + s.
    pub fn order(&self) -> f64 {
        self.dim as f64 + self.s
    }

    /// Unscaled radial profile of the base family.
    pub fn profile(&self, r: f64) -> f64 {
        let a = self.order();
        match self.family {
            Family::Fractional | Family::Anisotropic(_) => r.powf(-a),
            Family::Truncated => {
                let t = TRUNCATION_RADIUS * TRUNCATION_RADIUS - r * r;
                if t <= 0.0 {
                    0.0
                } else {
                    t * t * t * r.powf(-a)
                }
            }
            Family::Integrable => (9.0 - r * r).exp(),
        }
    }

    /// First and second radial derivatives of [`Kernel::profile`].
    fn profile_derivs(&self, r: f64) -> (f64, f64) {
        let a = self.order();
        match self.family {
            Family::Fractional | Family::Anisotropic(_) => (-a * r.powf(-a - 1.0), a * (a + 1.0) * r.powf(-a - 2.0)),
            Family::Truncated => {
                let t = TRUNCATION_RADIUS * TRUNCATION_RADIUS - r * r;
                if t <= 0.0 {
                    return (0.0, 0.0);
                }
                let (p, p1, p2) = (t * t * t, -6.0 * r * t * t, -6.0 * t * t + 24.0 * r * r * t);
                let (q, q1, q2) = (r.powf(-a), -a * r.powf(-a - 1.0), a * (a + 1.0) * r.powf(-a - 2.0));
                (p1 * q + p * q1, p2 * q + 2.0 * p1 * q1 + p * q2)
            }
            Family::Integrable => {
                let e = (9.0 - r * r).exp();
                (-2.0 * r * e, (4.0 * r * r - 2.0) * e)
            }
        }
    }

    fn default_kstar(&self) -> Result<KStar> {
        let n = self.dim as f64;
        let c_eps = power_law_c1(n + 0.5);
        let eps_part = if self.epsilon > 0.0 { c_eps } else { 0.0 };
        Ok(match &self.family {
            Family::Fractional => KStar::ProportionalC1 { c1: power_law_c1(self.order()).max(eps_part) },
            Family::Anisotropic(t) => {
                let a = self.order();
                let c1 = 2f64.powf(a + 2.0) * (a * (a + 1.0) * t.max + (a + 1.0) * t.slope) / t.min;
                KStar::ProportionalC1 { c1: c1.max(eps_part) }
            }
            Family::Truncated => {
                let r0 = 2.0 * TRUNCATION_RADIUS;
                KStar::ProportionalPlusIndicator { c1: self.truncated_c1(r0).max(eps_part), r0 }
            }
            Family::Integrable => KStar::IntegrableKStar,
        })
    }

    /// Radial oracle for the truncated family: the smallest C1 with
    /// r |f'| and r^2 sup_{[r/2, 3r/2]} max(|f''|, |f'|/r) below C1 (f + 1), rounded up.
    fn truncated_c1(&self, r0: f64) -> f64 {
        let need = |r: f64| -> f64 {
            let (d1, _) = self.profile_derivs(r);
            let mut sup: f64 = 0.0;
            for j in 0..=64 {
                let y = r * (0.5 + j as f64 / 64.0);
                let (e1, e2) = self.profile_derivs(y);
                sup = sup.max(e2.abs()).max(e1.abs() / y);
            }
            self.scale * (r * d1.abs()).max(r * r * sup) / (self.scale * self.profile(r) + 1.0)
        };
        let mut worst: f64 = 0.0;
        for j in 0..4000 {
            let r = 1e-3 * (r0 / 1e-3).powf(j as f64 / 3999.0);
            worst = worst.max(need(r));
        }
        let c = worst * 1.05;
        let mag = 10f64.powf(c.log10().floor() - 1.0);
        (c / mag).ceil() * mag
    }

    /// K(z). Evaluation at z and -z is bit-identical.
    pub fn eval(&self, z: &[f64; 3]) -> f64 {
        let c = canonical(z, self.dim);
        let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        self.eval_canonical(&c, r)
    }

    fn eval_canonical(&self, c: &[f64; 3], r: f64) -> f64 {
        let ang = match &self.family {
            Family::Anisotropic(t) => t.eval(c),
            _ => 1.0,
        };
        let mut v = self.scale * ang * self.profile(r);
        if self.epsilon > 0.0 {
            v += self.epsilon * r.powf(-(self.dim as f64) - 0.5);
        }
        v
    }

    /// K*(z).
    pub fn kstar_eval(&self, z: &[f64; 3]) -> f64 {
        let c = canonical(z, self.dim);
        let r = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        match self.kstar {
            KStar::ProportionalC1 { c1 } => c1 * self.eval_canonical(&c, r),
            KStar::ProportionalPlusIndicator { c1, r0 } => {
                c1 * (self.eval_canonical(&c, r) + if r < r0 { 1.0 } else { 0.0 })
            }
            KStar::IntegrableKStar => {
                let base = self.scale * r * r * (9.0 * r * r + 2.0) * (9.0 - 0.25 * r * r).exp();
                let n = self.dim as f64;
                base + if self.epsilon > 0.0 { power_law_c1(n + 0.5) * self.epsilon * r.powf(-n - 0.5) } else { 0.0 }
            }
        }
    }

    /// Proportionality constant when K* = C1 K exactly.
    pub fn kstar_factor(&self) -> Option<f64> {
        match self.kstar {
            KStar::ProportionalC1 { c1 } => Some(c1),
            _ => None,
        }
    }

    /// Radial integral of the base family over [a, b] in n dimensions, without angles.
    fn radial_integral(&self, a: f64, b: f64) -> f64 {
        let n = self.dim as i32;
        if b <= a {
            return 0.0;
        }
        let panels = (((b - a) * 16.0).ceil() as usize).clamp(4, 4096);
        gauss_integrate(|r| self.profile(r) * r.powi(n - 1), a, b, panels)
    }

    /// Integral of K over {|z| > rho}.
    pub fn tail_integral(&self, rho: f64) -> f64 {
        let n = self.dim as f64;
        let sph = sphere_measure(self.dim);
        let rho = rho.max(1e-300);
        let base = match self.family {
            Family::Fractional | Family::Anisotropic(_) => self.amean() * rho.powf(-self.s) / self.s,
            Family::Truncated => self.radial_integral(rho, TRUNCATION_RADIUS),
            Family::Integrable => self.radial_integral(rho, rho.max(0.0) + 12.0),
        };
        let mut v = self.scale * sph * base;
        if self.epsilon > 0.0 {
            v += self.epsilon * sph * 2.0 * rho.powf(-0.5);
            let _ = n;
        }
        v
    }

    /// L1 norm over the whole space, when finite.
    pub fn l1_norm(&self) -> Option<f64> {
        if self.family != Family::Integrable || self.epsilon > 0.0 {
            return None;
        }
        Some(self.scale * sphere_measure(self.dim) * self.radial_integral(0.0, 12.0))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.spec).expect("kernel spec serializes")
    }
}

/// Representative of {z, -z} with the last nonzero coordinate positive; -0.0 becomes 0.0.
#[inline]
fn canonical(z: &[f64; 3], dim: usize) -> [f64; 3] {
    let mut c = [0.0; 3];
    for a in 0..dim {
        c[a] = z[a] + 0.0;
    }
    let mut flip = false;
    for a in (0..dim).rev() {
        if c[a] != 0.0 {
            flip = c[a] < 0.0;
            break;
        }
    }
    if flip {
        for v in c.iter_mut().take(dim) {
            *v = -*v + 0.0;
        }
    }
    c
}

#[derive(Debug, Clone, Serialize)]
pub struct KStarAudit {
    pub samples: usize,
    /// Largest observed max(first, second) / K*(z).
    pub max_ratio: f64,
    pub max_first_ratio: f64,
    pub max_second_ratio: f64,
    pub worst_z: [f64; 3],
    pub pass: bool,
}

pub const KSTAR_AUDIT_TOL: f64 = 1e-3;

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> [f64; 3] {
    loop {
        let mut v = [0.0; 3];
        for x in v.iter_mut().take(dim) {
            *x = rng.gen_range(-1.0..1.0);
        }
        let r2: f64 = v.iter().map(|x| x * x).sum();
        if r2 > 1e-4 && r2 <= 1.0 {
            let r = r2.sqrt();
            for x in v.iter_mut() {
                *x /= r;
            }
            return v;
        }
    }
}

/// Directions for the 16-point sup sample: the first points at `first`.
fn sup_directions(first: &[f64; 3], dim: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(16);
    if dim == 2 {
        for j in 0..16 {
            let t = 2.0 * PI * j as f64 / 16.0;
            let (c, s) = (t.cos(), t.sin());
            out.push([c * first[0] - s * first[1], s * first[0] + c * first[1], 0.0]);
        }
    } else {
        out.push(*first);
        let golden = PI * (3.0 - 5f64.sqrt());
        for j in 0..15 {
            let y = 1.0 - 2.0 * (j as f64 + 0.5) / 15.0;
            let rr = (1.0 - y * y).sqrt();
            let t = golden * j as f64;
            out.push([rr * t.cos(), y, rr * t.sin()]);
        }
    }
    out
}

/// Finite-difference audit of the derivative bound against K*.
pub fn kstar_audit(kernel: &Kernel, sample_count: usize, seed: u64) -> KStarAudit {
    let dim = kernel.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = KStarAudit {
        samples: sample_count,
        max_ratio: 0.0,
        max_first_ratio: 0.0,
        max_second_ratio: 0.0,
        worst_z: [0.0; 3],
        pass: true,
    };
    let add = |a: &[f64; 3], b: &[f64; 3], t: f64| [a[0] + t * b[0], a[1] + t * b[1], a[2] + t * b[2]];
    for _ in 0..sample_count {
        let dir = random_unit(&mut rng, dim);
        let r = 0.05 * (8.0f64 / 0.05).powf(rng.gen::<f64>());
        let z = [dir[0] * r, dir[1] * r, dir[2] * r];
        let e = random_unit(&mut rng, dim);
        let step = 1e-4 * r;
        let first = r * (kernel.eval(&add(&z, &e, step)) - kernel.eval(&add(&z, &e, -step))).abs() / (2.0 * step);
        let inward = [-dir[0], -dir[1], -dir[2]];
        let mut second: f64 = 0.0;
        for u in sup_directions(&inward, dim) {
            let y = add(&z, &u, 0.5 * r);
            let d2 = (kernel.eval(&add(&y, &e, step)) - 2.0 * kernel.eval(&y) + kernel.eval(&add(&y, &e, -step))).abs()
                / (step * step);
            second = second.max(r * r * d2);
        }
        let ks = kernel.kstar_eval(&z);
        let (fr, sr) = (first / ks, second / ks);
        rep.max_first_ratio = rep.max_first_ratio.max(fr);
        rep.max_second_ratio = rep.max_second_ratio.max(sr);
        if fr.max(sr) > rep.max_ratio {
            rep.max_ratio = fr.max(sr);
            rep.worst_z = z;
        }
    }
    rep.pass = rep.max_ratio <= 1.0 + KSTAR_AUDIT_TOL;
    rep
}

#[derive(Debug, Clone, Serialize)]
pub struct IntegrabilityReport {
    /// Integral of K |z| over B_1.
    pub inner: f64,
    /// Integral of K outside B_1.
    pub tail: f64,
    pub total: f64,
}

/// Integral of K(z) min{1, |z|} over the whole space.
pub fn integrability_audit(kernel: &Kernel) -> Result<IntegrabilityReport> {
    let n = kernel.dim as i32;
    let sph = sphere_measure(kernel.dim);
    // r^n f(r) on dyadic shells towards the origin with geometric extrapolation
    let g = |r: f64| kernel.profile(r) * r.powi(n);
    let mut acc = CompSum::new();
    let mut prev = f64::NAN;
    let mut last = 0.0;
    let mut ratio = 0.0;
    let mut hi = 1.0f64;
    for _ in 0..200 {
        let lo = 0.5 * hi;
        last = gauss_integrate(g, lo, hi, 2);
        acc.add(last);
        if prev.is_finite() && prev > 0.0 {
            ratio = last / prev;
        }
        prev = last;
        hi = lo;
        if last <= 1e-17 * acc.value() {
            break;
        }
    }
    if ratio >= 1.0 || !acc.value().is_finite() {
        return Err(Error::Divergent(format!("shell ratio {ratio} near the origin")));
    }
    if ratio > 0.0 {
        acc.add(last * ratio / (1.0 - ratio));
    }
    let mut inner = kernel.scale * kernel.amean() * sph * acc.value();
    if kernel.epsilon > 0.0 {
        // eps * |S| * int_0^1 r^{-1/2} dr
        inner += kernel.epsilon * sph * 2.0;
    }
    let tail = kernel.tail_integral(1.0);
    if !(inner.is_finite() && tail.is_finite()) {
        return Err(Error::Divergent("non-finite integral".into()));
    }
    Ok(IntegrabilityReport { inner, tail, total: inner + tail })
}

pub const DEFAULT_DEPTH: u32 = 6;
/// Default cap on dense stencil entries.
pub const DEFAULT_STENCIL_BUDGET: usize = 1 << 26;

/// Discrete interaction stencil: w(k) approximates the integral of K(x - y) over cell pairs at offset k.
#[derive(Debug, Clone)]
pub struct InteractionWeights {
    pub dim: usize,
    pub h: f64,
    /// Euclidean cutoff radius in cells.
    pub cutoff: f64,
    /// Half-width of the stored box per axis.
    pub ext: [i64; 3],
    pub depth: u32,
    dense: Vec<f64>,
    /// Nonzero entries in increasing dense-index order.
    pub offsets: Vec<([i64; 3], f64)>,
    /// h^n times the integral of K beyond the lattice-equivalent cutoff radius.
    pub tail: f64,
}

impl InteractionWeights {
    #[inline]
    fn slot(&self, k: [i64; 3]) -> Option<usize> {
        let mut idx = 0usize;
        let mut stride = 1usize;
        for a in 0..3 {
            if k[a].abs() > self.ext[a] {
                return None;
            }
            idx += (k[a] + self.ext[a]) as usize * stride;
            stride *= (2 * self.ext[a] + 1) as usize;
        }
        Some(idx)
    }

    #[inline]
    pub fn get(&self, k: [i64; 3]) -> f64 {
        self.slot(k).map_or(0.0, |i| self.dense[i])
    }

    /// Sum of all stored weights.
    pub fn total(&self) -> f64 {
        let mut s = CompSum::new();
        for (_, w) in &self.offsets {
            s.add(*w);
        }
        s.value()
    }

    /// Whole-space K-perimeter of one cell: stored weights plus tail.
    pub fn cell_perimeter(&self) -> f64 {
        self.total() + self.tail
    }

    pub fn scaled(&self, factor: f64) -> InteractionWeights {
        let mut w = self.clone();
        for v in w.dense.iter_mut() {
            *v *= factor;
        }
        for (_, v) in w.offsets.iter_mut() {
            *v *= factor;
        }
        w.tail *= factor;
        w
    }

    /// Offsets with k > 0 in the canonical order (one of each pair +-k).
    pub fn half_offsets(&self) -> impl Iterator<Item = &([i64; 3], f64)> {
        self.offsets.iter().filter(|(k, _)| is_canonical(k))
    }
}

fn is_canonical(k: &[i64; 3]) -> bool {
    for a in (0..3).rev() {
        if k[a] != 0 {
            return k[a] > 0;
        }
    }
    false
}

/// Cell-pair weights of `kernel` on a world with `shape` cells of size `h`.
pub fn build_weights(kernel: &Kernel, shape: &[usize], h: f64, cutoff: f64) -> Result<InteractionWeights> {
    build_weights_with(kernel.dim, shape, h, cutoff, DEFAULT_DEPTH, DEFAULT_STENCIL_BUDGET, |z| kernel.eval(z), |r| {
        kernel.tail_integral(r)
    })
}

/// Cell-pair weights of K*.
pub fn build_kstar_weights(kernel: &Kernel, shape: &[usize], h: f64, cutoff: f64) -> Result<InteractionWeights> {
    if let Some(c1) = kernel.kstar_factor() {
        return Ok(build_weights(kernel, shape, h, cutoff)?.scaled(c1));
    }
    build_weights_with(kernel.dim, shape, h, cutoff, DEFAULT_DEPTH, DEFAULT_STENCIL_BUDGET, |z| kernel.kstar_eval(z), |_| 0.0)
}

/// General builder over an even integrand `f`; `tail(r)` integrates f beyond radius r.
#[allow(clippy::too_many_arguments)]
pub fn build_weights_with<F, T>(
    dim: usize,
    shape: &[usize],
    h: f64,
    cutoff: f64,
    depth: u32,
    budget: usize,
    f: F,
    tail: T,
) -> Result<InteractionWeights>
where
    F: Fn(&[f64; 3]) -> f64 + Sync,
    T: Fn(f64) -> f64,
{
    if !(h > 0.0) {
        return invalid("cell size must be positive");
    }
    if shape.len() != dim {
        return invalid("shape length must equal dimension");
    }
    if !(cutoff >= 1.0) {
        return invalid(format!("cutoff must be at least one cell, got {cutoff}"));
    }
    let mut ext = [0i64; 3];
    for a in 0..dim {
        ext[a] = (cutoff.floor() as i64).min(shape[a] as i64 - 1).max(0);
    }
    let needed: usize = ext.iter().map(|e| (2 * e + 1) as usize).product();
    if needed > budget {
        return Err(Error::MemoryBudget { needed, budget });
    }
    let c2 = cutoff * cutoff;
    let mut canon = Vec::new();
    let mut lattice_count: usize = 0;
    let cf = cutoff.floor() as i64;
    for kz in -cf.min(if dim == 3 { cf } else { 0 })..=(if dim == 3 { cf } else { 0 }) {
        for ky in -cf..=cf {
            for kx in -cf..=cf {
                let r2 = (kx * kx + ky * ky + kz * kz) as f64;
                if r2 <= c2 {
                    lattice_count += 1;
                    let k = [kx, ky, kz];
                    if is_canonical(&k) && kx.abs() <= ext[0] && ky.abs() <= ext[1] && kz.abs() <= ext[2] {
                        canon.push(k);
                    }
                }
            }
        }
    }
    let hn2 = h.powi(2 * dim as i32);
    let vals: Vec<f64> = canon
        .par_iter()
        .map(|k| {
            let linf = k.iter().map(|v| v.abs()).max().unwrap();
            if linf >= 3 {
                let z = [h * k[0] as f64, h * k[1] as f64, h * k[2] as f64];
                f(&z) * hn2
            } else {
                near_field(dim, *k, h, depth, &f) * hn2
            }
        })
        .collect();
    let size: usize = needed;
    let mut dense = vec![0.0; size];
    let mut w = InteractionWeights { dim, h, cutoff, ext, depth, dense: Vec::new(), offsets: Vec::new(), tail: 0.0 };
    w.dense = std::mem::take(&mut dense);
    for (k, v) in canon.iter().zip(&vals) {
        if *v < 0.0 {
            return Err(Error::NegativeWeight(*v));
        }
        let i = w.slot(*k).unwrap();
        w.dense[i] = *v;
        let j = w.slot([-k[0], -k[1], -k[2]]).unwrap();
        w.dense[j] = *v;
    }
    let mut offsets = Vec::new();
    for i in 0..size {
        let v = w.dense[i];
        if v != 0.0 {
            let mut rem = i;
            let mut k = [0i64; 3];
            for a in 0..3 {
                let span = (2 * ext[a] + 1) as usize;
                k[a] = (rem % span) as i64 - ext[a];
                rem /= span;
            }
            offsets.push((k, v));
        }
    }
    w.offsets = offsets;
    let ball = crate::numeric::ball_volume(dim);
    let r_eff = h * (lattice_count as f64 / ball).powf(1.0 / dim as f64);
    w.tail = h.powi(dim as i32) * tail(r_eff);
    Ok(w)
}

/// Integral over [-1,1]^n of f(h (k + u)) prod(1 - |u_i|) du, by dyadic subdivision
/// around the singular point u = -k with geometric extrapolation of the excised corner.
pub fn near_field<F: Fn(&[f64; 3]) -> f64>(dim: usize, k: [i64; 3], h: f64, depth: u32, f: &F) -> f64 {
    let singular = k.iter().all(|v| v.abs() <= 1);
    let run = |d: u32| -> f64 {
        let mut acc = CompSum::new();
        let corners: Vec<[f64; 3]> = (0..(1usize << dim))
            .map(|m| {
                let mut lo = [0.0; 3];
                for (a, l) in lo.iter_mut().enumerate().take(dim) {
                    *l = if m >> a & 1 == 1 { 0.0 } else { -1.0 };
                }
                lo
            })
            .collect();
        for lo in corners {
            box_integral(dim, k, h, lo, 1.0, 0, d, f, &mut acc);
        }
        acc.value()
    };
    if !singular || depth < 2 {
        return run(depth);
    }
    let t0 = run(depth - 2);
    let t1 = run(depth - 1);
    let t2 = run(depth);
    let (d1, d2) = (t1 - t0, t2 - t1);
    if d1 > 0.0 && d2 > 0.0 {
        let q = d2 / d1;
        if q < 0.95 {
            return t2 + d2 * q / (1.0 - q);
        }
    }
    t2
}

#[allow(clippy::too_many_arguments)]
fn box_integral<F: Fn(&[f64; 3]) -> f64>(
    dim: usize,
    k: [i64; 3],
    h: f64,
    lo: [f64; 3],
    size: f64,
    level: u32,
    depth: u32,
    f: &F,
    acc: &mut CompSum,
) {
    // distance from the box to the singular point u = -k
    let mut d2 = 0.0;
    let mut touches = true;
    for a in 0..dim {
        let p = -(k[a] as f64);
        let gap = if p < lo[a] {
            lo[a] - p
        } else if p > lo[a] + size {
            p - lo[a] - size
        } else {
            0.0
        };
        if gap > 0.0 {
            touches = false;
        }
        d2 += gap * gap;
    }
    let diam2 = size * size * dim as f64;
    if touches && level >= depth {
        return;
    }
    if (touches || d2 < diam2) && level < depth {
        let half = 0.5 * size;
        for m in 0..(1usize << dim) {
            let mut c = lo;
            for (a, v) in c.iter_mut().enumerate().take(dim) {
                if m >> a & 1 == 1 {
                    *v += half;
                }
            }
            box_integral(dim, k, h, c, half, level + 1, depth, f, acc);
        }
        return;
    }
    let jac = (0.5 * size).powi(dim as i32);
    let npts = GL4_NODES.len();
    let total = npts.pow(dim as u32);
    for idx in 0..total {
        let mut u = [0.0; 3];
        let mut wt = jac;
        let mut rem = idx;
        for a in 0..dim {
            let j = rem % npts;
            rem /= npts;
            u[a] = lo[a] + 0.5 * size * (1.0 + GL4_NODES[j]);
            wt *= GL4_WEIGHTS[j] * (1.0 - u[a].abs());
        }
        let z = [h * (k[0] as f64 + u[0]), h * (k[1] as f64 + u[1]), h * (k[2] as f64 + u[2])];
        acc.add(wt * f(&z));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractional_before_rescale() {
        let k = KernelSpec::fractional(2, 0.5).unnormalized().build().unwrap();
        assert_eq!(k.eval(&[1.0, 0.0, 0.0]), 1.0);
        assert!((k.eval(&[2.0, 0.0, 0.0]) - 0.176_776_695_296_636_9).abs() < 1e-15);
    }

    #[test]
    fn normalization_factor() {
        let k = KernelSpec::fractional(2, 0.5).build().unwrap();
        assert!((k.scale - 2f64.powf(2.5)).abs() < 1e-12);
        assert!((k.eval(&[2.0, 0.0, 0.0]) - 1.0).abs() < 1e-12);
        let t = KernelSpec::truncated(2, 0.5).build().unwrap();
        assert_eq!(t.scale, 1.0);
        let i = KernelSpec::integrable(3).build().unwrap();
        assert_eq!(i.scale, 1.0);
    }

    #[test]
    fn rejects_bad_params() {
        assert!(KernelSpec::fractional(2, 1.0).build().is_err());
        assert!(KernelSpec::fractional(2, 0.0).build().is_err());
        assert!(KernelSpec::fractional(4, 0.5).build().is_err());
        let mut t = vec![1.0; ATABLE_2D];
        t[3] = 0.0;
        assert!(KernelSpec::anisotropic(2, 0.5, t).build().is_err());
        let mut t = vec![1.0; ATABLE_2D];
        t[3] = 1.0 + 1e-9;
        assert!(KernelSpec::anisotropic(2, 0.5, t).build().is_err());
        assert!(KernelSpec::anisotropic(2, 0.5, vec![1.0; 10]).build().is_err());
    }

    #[test]
    fn regularized_difference() {
        let base = KernelSpec::fractional(3, 0.3).build().unwrap();
        let reg = KernelSpec::fractional(3, 0.3).with_epsilon(0.25).build().unwrap();
        let z = [0.3, -0.2, 0.7];
        let r: f64 = (0.09f64 + 0.04 + 0.49).sqrt();
        let d = reg.eval(&z) - base.eval(&z);
        assert!((d - 0.25 * r.powf(-3.5)).abs() < 1e-12 * reg.eval(&z));
    }

    #[test]
    fn kstar_variants() {
        let mut spec = KernelSpec::fractional(2, 0.5);
        spec.c1 = Some(1.0);
        let k = spec.build().unwrap();
        let z = [0.4, 0.1, 0.0];
        assert_eq!(k.kstar_eval(&z), k.eval(&z));
        spec.r0 = Some(2.0);
        let k = spec.build().unwrap();
        assert_eq!(k.kstar_eval(&[1.0, 0.0, 0.0]), k.eval(&[1.0, 0.0, 0.0]) + 1.0);
        assert_eq!(k.kstar_eval(&[3.0, 0.0, 0.0]), k.eval(&[3.0, 0.0, 0.0]));
    }

    #[test]
    fn default_c1_matches_power_law_bound() {
        let k = KernelSpec::fractional(2, 0.5).build().unwrap();
        let expect = 2.5 * 3.5 * 2f64.powf(4.5);
        assert_eq!(k.kstar_factor(), Some(expect));
    }

    #[test]
    fn integrable_l1() {
        let k = KernelSpec::integrable(2).build().unwrap();
        let l1 = k.l1_norm().unwrap();
        assert!((l1 - PI * 9f64.exp()).abs() < 1e-9 * l1);
    }

    #[test]
    fn far_weight_is_midpoint() {
        let k = KernelSpec::fractional(2, 0.5).build().unwrap();
        let w = build_weights(&k, &[32, 32], 0.1, 12.0).unwrap();
        let expect = k.eval(&[1.0, 0.0, 0.0]) * 1e-4;
        assert!((w.get([10, 0, 0]) - expect).abs() < 1e-15 * expect);
        assert_eq!(w.get([-10, 0, 0]), w.get([10, 0, 0]));
    }

    #[test]
    fn weights_even_and_cut() {
        let k = KernelSpec::fractional(3, 0.4).build().unwrap();
        let w = build_weights(&k, &[8, 8, 8], 0.5, 3.5).unwrap();
        for (kk, v) in &w.offsets {
            assert_eq!(*v, w.get([-kk[0], -kk[1], -kk[2]]));
            assert!(*v > 0.0);
        }
        assert_eq!(w.get([3, 2, 0]), 0.0);
        assert!(w.get([3, 1, 0]) > 0.0);
    }
}
