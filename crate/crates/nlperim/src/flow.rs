//! Threshold dynamics: nonlocal diffusion by explicit Euler, then thresholding at 1/2.

use crate::error::{invalid, Error, Result};
use crate::grid::{Grid, GridSet};
use crate::kernels::InteractionWeights;
use rayon::prelude::*;
use serde::Serialize;

/// Stencil folded onto a periodic world, as rates w(k)/h^n.
#[derive(Debug, Clone)]
pub struct PeriodicStencil {
    pub grid: Grid,
    /// Folded offsets and their rates, in a fixed order.
    pub entries: Vec<([usize; 3], f64)>,
    /// Total rate sum_k w(k)/h^n (folded self-offsets excluded).
    pub rate: f64,
}

impl PeriodicStencil {
    pub fn new(g: &Grid, w: &InteractionWeights) -> Result<Self> {
        if w.dim != g.dim || (w.h - g.h).abs() > 1e-12 * g.h {
            return Err(Error::ShapeMismatch("stencil built for a different grid".into()));
        }
        let hn = g.cell_volume();
        let mut folded: std::collections::BTreeMap<[usize; 3], f64> = std::collections::BTreeMap::new();
        for (k, v) in &w.offsets {
            let mut f = [0usize; 3];
            for a in 0..3 {
                f[a] = k[a].rem_euclid(g.shape[a] as i64) as usize;
            }
            if f == [0, 0, 0] {
                continue;
            }
            *folded.entry(f).or_insert(0.0) += v / hn;
        }
        let entries: Vec<([usize; 3], f64)> = folded.into_iter().collect();
        let rate = entries.iter().map(|e| e.1).sum();
        Ok(PeriodicStencil { grid: g.clone(), entries, rate })
    }

    /// Substeps needed so each Euler step keeps all coefficients nonnegative.
    pub fn substeps_for(&self, omega: f64) -> usize {
        ((omega * self.rate).ceil() as usize).max(1)
    }
}

/// Time-scale schedules omega(tau).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Schedule {
    /// omega = tau^{s/(1+s)}, s in (0,1).
    Fractional { s: f64 },
    /// omega = tau^{s/2}, s in (1,2).
    Superlinear { s: f64 },
    Custom { omega: f64 },
}

impl Schedule {
    pub fn omega(&self, tau: f64) -> Result<f64> {
        if !(tau > 0.0) {
            return invalid(format!("tau must be positive, got {tau}"));
        }
        match *self {
            Schedule::Fractional { s } if s > 0.0 && s < 1.0 => Ok(tau.powf(s / (1.0 + s))),
            Schedule::Superlinear { s } if s > 1.0 && s < 2.0 => Ok(tau.powf(s / 2.0)),
            Schedule::Custom { omega } if omega > 0.0 => Ok(omega),
            other => invalid(format!("invalid schedule {other:?}")),
        }
    }
}

/// v(omega) for v_t + L v = 0, v(0) = u, by `substeps` explicit Euler steps.
pub fn diffuse(u: &[f64], st: &PeriodicStencil, omega: f64, substeps: usize) -> Result<Vec<f64>> {
    let g = &st.grid;
    if u.len() != g.len() {
        return Err(Error::ShapeMismatch(format!("{} values for {} cells", u.len(), g.len())));
    }
    if substeps == 0 {
        return invalid("substeps must be positive");
    }
    let delta = omega / substeps as f64;
    if delta * st.rate > 1.0 {
        return Err(Error::StabilityViolation(delta * st.rate));
    }
    let c0 = 1.0 - delta * st.rate;
    let coefs: Vec<([usize; 3], f64)> = st.entries.iter().map(|(k, r)| (*k, delta * r)).collect();
    let mut cur = u.to_vec();
    let mut next = vec![0.0; u.len()];
    let [n0, n1, n2] = g.shape;
    for _ in 0..substeps {
        next.par_chunks_mut(n0).enumerate().for_each(|(row, out)| {
            let y = row % n1;
            let z = row / n1;
            for (x, o) in out.iter_mut().enumerate() {
                let mut acc = c0 * cur[x + n0 * (y + n1 * z)];
                for (k, c) in &coefs {
                    let xx = (x + k[0]) % n0;
                    let yy = (y + k[1]) % n1;
                    let zz = (z + k[2]) % n2;
                    acc += c * cur[xx + n0 * (yy + n1 * zz)];
                }
                *o = acc;
            }
        });
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

#[derive(Debug, Clone)]
pub struct FlowState {
    pub set: GridSet,
    pub step: usize,
    pub tau: f64,
    pub omega: f64,
    pub schedule: Schedule,
    pub substeps: usize,
    pub volumes: Vec<f64>,
}

impl FlowState {
    pub fn new(set: GridSet, st: &PeriodicStencil, tau: f64, schedule: Schedule) -> Result<Self> {
        let omega = schedule.omega(tau)?;
        let substeps = st.substeps_for(omega);
        let v = set.measure();
        Ok(FlowState { set, step: 0, tau, omega, schedule, substeps, volumes: vec![v] })
    }
}

/// Diffuse then threshold at 1/2; exact ties keep the previous value.
pub fn mbo_step(state: &FlowState, st: &PeriodicStencil) -> Result<FlowState> {
    let u: Vec<f64> = state.set.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let v = diffuse(&u, st, state.omega, state.substeps)?;
    let bits = v
        .iter()
        .zip(&state.set.bits)
        .map(|(&x, &prev)| if x > 0.5 { true } else if x < 0.5 { false } else { prev })
        .collect();
    let set = GridSet::from_bits(&state.set.grid, bits)?;
    let mut volumes = state.volumes.clone();
    volumes.push(set.measure());
    Ok(FlowState { set, step: state.step + 1, volumes, ..state.clone() })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRow {
    pub step: usize,
    pub volume: f64,
    pub symdiff_initial: f64,
    pub symdiff_prev: f64,
    /// Mean over columns of the height of E along the last axis.
    pub interface: f64,
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub rows: Vec<TrajectoryRow>,
    /// First step at which the set became empty or full.
    pub extinct_at: Option<usize>,
    /// First step that reproduced the previous set.
    pub fixed_at: Option<usize>,
    pub final_state: FlowState,
    pub snapshots: Vec<(usize, GridSet)>,
}

pub const TRAJECTORY_CSV_HEADER: &str = "step,volume,symdiff_initial,symdiff_prev,interface";

impl Trajectory {
    pub fn csv(&self) -> String {
        let mut s = String::from(TRAJECTORY_CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{},{:.12e},{:.12e},{:.12e},{:.12e}\n", r.step, r.volume, r.symdiff_initial, r.symdiff_prev, r.interface));
        }
        s
    }
}

fn column_height(e: &GridSet) -> f64 {
    let g = &e.grid;
    let axis = g.dim - 1;
    let columns = g.len() / g.shape[axis];
    e.count() as f64 / columns as f64 * g.h
}

fn symdiff(a: &GridSet, b: &GridSet) -> f64 {
    a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count() as f64 * a.grid.cell_volume()
}

/// Run `steps` MBO steps; stops early at extinction. `snapshot_every` = 0 disables snapshots.
pub fn run_flow(
    initial: &GridSet,
    st: &PeriodicStencil,
    tau: f64,
    steps: usize,
    schedule: Schedule,
    snapshot_every: usize,
) -> Result<Trajectory> {
    if steps == 0 {
        return invalid("steps must be at least 1");
    }
    let mut state = FlowState::new(initial.clone(), st, tau, schedule)?;
    let mut rows = vec![TrajectoryRow {
        step: 0,
        volume: initial.measure(),
        symdiff_initial: 0.0,
        symdiff_prev: 0.0,
        interface: column_height(initial),
    }];
    let mut extinct_at = None;
    let mut fixed_at = None;
    let mut snapshots = Vec::new();
    if snapshot_every > 0 {
        snapshots.push((0, initial.clone()));
    }
    for _ in 0..steps {
        let next = mbo_step(&state, st)?;
        let sd_prev = symdiff(&next.set, &state.set);
        rows.push(TrajectoryRow {
            step: next.step,
            volume: next.set.measure(),
            symdiff_initial: symdiff(&next.set, initial),
            symdiff_prev: sd_prev,
            interface: column_height(&next.set),
        });
        if sd_prev == 0.0 && fixed_at.is_none() {
            fixed_at = Some(next.step);
        }
        if snapshot_every > 0 && next.step % snapshot_every == 0 {
            snapshots.push((next.step, next.set.clone()));
        }
        let c = next.set.count();
        state = next;
        if c == 0 || c == state.set.bits.len() {
            extinct_at = Some(state.step);
            break;
        }
    }
    Ok(Trajectory { rows, extinct_at, fixed_at, final_state: state, snapshots })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{build_weights, KernelSpec};

    fn stencil(n: usize) -> PeriodicStencil {
        let k = KernelSpec::fractional(2, 0.5).build().unwrap();
        let h = 1.0 / n as f64;
        let g = Grid::cube(2, n, h).unwrap();
        let w = build_weights(&k, &[n, n], h, 4.0).unwrap();
        PeriodicStencil::new(&g, &w).unwrap()
    }

    #[test]
    fn constants_are_fixed() {
        let st = stencil(16);
        let v = diffuse(&vec![0.3; 256], &st, 0.01, st.substeps_for(0.01)).unwrap();
        assert!(v.iter().all(|x| (x - 0.3).abs() < 1e-14));
    }

    #[test]
    fn stability_guard() {
        let st = stencil(16);
        assert!(matches!(diffuse(&vec![0.0; 256], &st, 1.0, 1), Err(Error::StabilityViolation(_))));
    }

    #[test]
    fn mass_conserved() {
        let st = stencil(16);
        let mut u = vec![0.0; 256];
        u[8 * 16 + 8] = 1.0;
        let v = diffuse(&u, &st, 0.005, st.substeps_for(0.005)).unwrap();
        assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn schedules() {
        assert!((Schedule::Fractional { s: 0.5 }.omega(0.001).unwrap() - 0.1).abs() < 1e-15);
        assert!((Schedule::Superlinear { s: 1.5 }.omega(0.0001).unwrap() - 0.001).abs() < 1e-15);
        assert!(Schedule::Fractional { s: 1.5 }.omega(0.1).is_err());
    }
}
