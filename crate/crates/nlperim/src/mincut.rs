//! Exact minimization of P_{K,Omega} with fixed exterior data by minimum cut.

use crate::energy::{k_perimeter_total, Convolver, DIRECT_LIMIT};
use crate::error::{Error, Result};
use crate::grid::{DomainMask, Grid, GridSet};
use crate::gridgeom::symmetric_difference_measure;
use crate::kernels::{build_weights, InteractionWeights, Kernel, KernelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::VecDeque;
use std::time::Instant;

/// Node graph of the cut problem with integer capacities.
#[derive(Debug, Clone)]
pub struct CutGraph {
    /// World index of each node.
    pub cells: Vec<usize>,
    /// Capacity of source -> node (cost of leaving the node out of E).
    pub source: Vec<i64>,
    /// Capacity of node -> sink (cost of putting the node in E).
    pub sink: Vec<i64>,
    /// Undirected pairs (a, b, w) with a < b.
    pub pairs: Vec<(u32, u32, i64)>,
    /// Real value of one capacity unit.
    pub unit: f64,
}

impl CutGraph {
    /// Integer energy of the interior labelling `in_e` (node order).
    pub fn energy(&self, in_e: &[bool]) -> i128 {
        let mut e: i128 = 0;
        for (i, &b) in in_e.iter().enumerate() {
            e += if b { self.sink[i] } else { self.source[i] } as i128;
        }
        for &(a, b, w) in &self.pairs {
            if in_e[a as usize] != in_e[b as usize] {
                e += w as i128;
            }
        }
        e
    }

    pub fn swapped(&self) -> CutGraph {
        CutGraph { source: self.sink.clone(), sink: self.source.clone(), ..self.clone() }
    }
}

const CAP_UNIT_MAX: f64 = 281_474_976_710_656.0; // 2^48
const CAP_TOTAL_MAX: f64 = 4_611_686_018_427_387_904.0; // 2^62

/// Build the cut graph for Omega with its exterior data.
pub fn build_graph(omega: &DomainMask, w: &InteractionWeights) -> Result<CutGraph> {
    let g = omega.grid();
    let cells = omega.cells();
    let n = cells.len();
    if let Some((_, v)) = w.offsets.iter().find(|(_, v)| *v < 0.0) {
        return Err(Error::NegativeWeight(*v));
    }
    let wsum = w.total();
    let maxcap = wsum.max(f64::MIN_POSITIVE);
    let total = 2.0 * n.max(1) as f64 * wsum;
    let scale = (CAP_UNIT_MAX / maxcap).min(CAP_TOTAL_MAX / total.max(f64::MIN_POSITIVE));
    if !scale.is_finite() || scale < 1.0 {
        return Err(Error::CapacityOverflow(format!("weight total {wsum} cannot be scaled to integers")));
    }
    let q: Vec<([i64; 3], i64)> = w.offsets.iter().map(|(k, v)| (*k, (v * scale).round() as i64)).collect();
    let mut node = vec![u32::MAX; g.len()];
    for (j, &i) in cells.iter().enumerate() {
        node[i] = j as u32;
    }
    let visits = n * q.len();
    let ext_one: Vec<bool> = (0..g.len()).map(|i| !omega.omega[i] && omega.exterior.bits[i]).collect();
    let ext_zero: Vec<bool> = (0..g.len()).map(|i| !omega.omega[i] && !omega.exterior.bits[i]).collect();
    let (source, sink): (Vec<i64>, Vec<i64>) = if visits <= DIRECT_LIMIT {
        cells
            .par_iter()
            .map(|&i| {
                let c = g.coords(i);
                let (mut s, mut t) = (0i64, 0i64);
                for (k, v) in &q {
                    if let Some(j) = g.offset(c, *k) {
                        if ext_one[j] {
                            s += v;
                        } else if ext_zero[j] {
                            t += v;
                        }
                    }
                }
                (s, t)
            })
            .unzip()
    } else {
        let conv = Convolver::new(g, w);
        let f1 = conv.apply_mask(&ext_one);
        let f0 = conv.apply_mask(&ext_zero);
        cells.iter().map(|&i| ((f1[i] * scale).round() as i64, (f0[i] * scale).round() as i64)).unzip()
    };
    let mut pairs = Vec::new();
    for (a, &i) in cells.iter().enumerate() {
        let c = g.coords(i);
        for (k, v) in &q {
            if *v == 0 {
                continue;
            }
            if let Some(j) = g.offset(c, *k) {
                let b = node[j];
                if b != u32::MAX && (a as u32) < b {
                    pairs.push((a as u32, b, *v));
                }
            }
        }
    }
    Ok(CutGraph { cells, source, sink, pairs, unit: 1.0 / scale })
}

/// Highest-label push-relabel (first phase) with gap and global relabeling.
/// Returns the min-cut value and, per node, whether it lies on the maximal source side.
pub fn max_source_side(graph: &CutGraph) -> (i128, Vec<bool>) {
    let n = graph.cells.len();
    let mut constant: i128 = 0;
    let mut excess = vec![0i64; n];
    let mut tcap = vec![0i64; n];
    for v in 0..n {
        let m = graph.source[v].min(graph.sink[v]);
        constant += m as i128;
        excess[v] = graph.source[v] - m;
        tcap[v] = graph.sink[v] - m;
    }
    // CSR arcs; arc e and its partner rev[e] carry the symmetric pair capacity
    let mut deg = vec![0usize; n + 1];
    for &(a, b, _) in &graph.pairs {
        deg[a as usize + 1] += 1;
        deg[b as usize + 1] += 1;
    }
    for v in 0..n {
        deg[v + 1] += deg[v];
    }
    let m = deg[n];
    let mut to = vec![0u32; m];
    let mut cap = vec![0i64; m];
    let mut rev = vec![0u32; m];
    let mut fill = deg.clone();
    for &(a, b, w) in &graph.pairs {
        let (ea, eb) = (fill[a as usize], fill[b as usize]);
        fill[a as usize] += 1;
        fill[b as usize] += 1;
        to[ea] = b;
        cap[ea] = w;
        rev[ea] = eb as u32;
        to[eb] = a;
        cap[eb] = w;
        rev[eb] = ea as u32;
    }
    let inf = n as u32 + 1;
    let mut label = vec![inf; n];
    let mut current = deg[..n].to_vec();
    let mut buckets: Vec<Vec<u32>> = vec![Vec::new(); n + 2];
    let mut in_bucket = vec![false; n];
    let mut count = vec![0usize; n + 2];
    let mut flow_to_sink: i128 = 0;

    let global_relabel = |label: &mut Vec<u32>,
                          count: &mut Vec<usize>,
                          buckets: &mut Vec<Vec<u32>>,
                          in_bucket: &mut Vec<bool>,
                          current: &mut Vec<usize>,
                          cap: &Vec<i64>,
                          tcap: &Vec<i64>,
                          excess: &Vec<i64>| {
        for l in label.iter_mut() {
            *l = inf;
        }
        let mut queue = VecDeque::new();
        for v in 0..n {
            if tcap[v] > 0 {
                label[v] = 1;
                queue.push_back(v);
            }
        }
        while let Some(v) = queue.pop_front() {
            for e in deg[v]..deg[v + 1] {
                let u = to[e] as usize;
                // u -> v residual lives on the partner arc
                if label[u] == inf && cap[rev[e] as usize] > 0 {
                    label[u] = label[v] + 1;
                    queue.push_back(u);
                }
            }
        }
        for c in count.iter_mut() {
            *c = 0;
        }
        for b in buckets.iter_mut() {
            b.clear();
        }
        for v in 0..n {
            in_bucket[v] = false;
            current[v] = deg[v];
            if label[v] < inf {
                count[label[v] as usize] += 1;
                if excess[v] > 0 {
                    buckets[label[v] as usize].push(v as u32);
                    in_bucket[v] = true;
                }
            }
        }
    };

    global_relabel(&mut label, &mut count, &mut buckets, &mut in_bucket, &mut current, &cap, &tcap, &excess);
    let mut highest = n + 1;
    let mut work: usize = 0;
    let relabel_period = 6 * n + m / 2 + 1;
    loop {
        while highest > 0 && buckets[highest].is_empty() {
            highest -= 1;
        }
        if highest == 0 {
            break;
        }
        let v = buckets[highest].pop().unwrap() as usize;
        in_bucket[v] = false;
        if label[v] as usize != highest || label[v] >= inf {
            continue;
        }
        // discharge v
        while excess[v] > 0 {
            if label[v] == 1 && tcap[v] > 0 {
                let d = excess[v].min(tcap[v]);
                excess[v] -= d;
                tcap[v] -= d;
                flow_to_sink += d as i128;
                continue;
            }
            if current[v] < deg[v + 1] {
                let e = current[v];
                let u = to[e] as usize;
                if cap[e] > 0 && label[v] == label[u] + 1 {
                    let d = excess[v].min(cap[e]);
                    cap[e] -= d;
                    cap[rev[e] as usize] += d;
                    excess[v] -= d;
                    excess[u] += d;
                    if !in_bucket[u] && label[u] < inf {
                        buckets[label[u] as usize].push(u as u32);
                        in_bucket[u] = true;
                        // v may have been relabeled above `highest` during this discharge
                        highest = highest.max(label[u] as usize);
                    }
                } else {
                    current[v] += 1;
                }
                continue;
            }
            // relabel
            work += deg[v + 1] - deg[v] + 12;
            let old = label[v] as usize;
            let mut best = if tcap[v] > 0 { 0 } else { inf };
            for e in deg[v]..deg[v + 1] {
                if cap[e] > 0 {
                    best = best.min(label[to[e] as usize]);
                }
            }
            let new = if best >= inf { inf } else { best + 1 };
            count[old] -= 1;
            current[v] = deg[v];
            if count[old] == 0 {
                // gap: everything above `old` is cut off from the sink
                for u in 0..n {
                    if u != v && (label[u] as usize) > old && label[u] < inf {
                        count[label[u] as usize] -= 1;
                        label[u] = inf;
                    }
                }
                label[v] = inf;
                break;
            }
            label[v] = new;
            if new >= inf {
                break;
            }
            count[label[v] as usize] += 1;
        }
        if excess[v] > 0 && label[v] < inf && !in_bucket[v] {
            buckets[label[v] as usize].push(v as u32);
            in_bucket[v] = true;
        }
        highest = highest.max(if label[v] < inf { label[v] as usize } else { 0 });
        if work > relabel_period {
            work = 0;
            global_relabel(&mut label, &mut count, &mut buckets, &mut in_bucket, &mut current, &cap, &tcap, &excess);
            highest = n + 1;
        }
    }
    // nodes that still reach the sink form the minimal sink side
    let mut reach = vec![false; n];
    let mut queue = VecDeque::new();
    for v in 0..n {
        if tcap[v] > 0 {
            reach[v] = true;
            queue.push_back(v);
        }
    }
    while let Some(v) = queue.pop_front() {
        for e in deg[v]..deg[v + 1] {
            let u = to[e] as usize;
            if !reach[u] && cap[rev[e] as usize] > 0 {
                reach[u] = true;
                queue.push_back(u);
            }
        }
    }
    (constant + flow_to_sink, reach.iter().map(|r| !r).collect())
}

#[derive(Debug, Clone, Serialize)]
pub struct MinimizeResult {
    #[serde(skip)]
    pub e_min: GridSet,
    #[serde(skip)]
    pub e_max: GridSet,
    /// P_{K,Omega} of the minimal minimizer.
    pub energy: f64,
    pub energy_max: f64,
    /// Min-cut value in capacity units times the unit.
    pub cut_value: f64,
    pub cut_units: i128,
    pub nodes: usize,
    pub edges: usize,
    pub solve_seconds: f64,
}

pub const MINIMIZE_CSV_HEADER: &str = "nodes,edges,energy,energy_max,cut_value,min_cells,max_cells,solve_seconds";

impl MinimizeResult {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.17e},{:.17e},{:.17e},{},{},{:.3}",
            self.nodes,
            self.edges,
            self.energy,
            self.energy_max,
            self.cut_value,
            self.e_min.count(),
            self.e_max.count(),
            self.solve_seconds
        )
    }
}

/// Minimal and maximal minimizers of P_{K,Omega} among sets equal to the exterior data off Omega.
pub fn minimize(omega: &DomainMask, w: &InteractionWeights) -> Result<MinimizeResult> {
    let start = Instant::now();
    let graph = build_graph(omega, w)?;
    minimize_graph(omega, w, &graph, start)
}

pub(crate) fn minimize_graph(omega: &DomainMask, w: &InteractionWeights, graph: &CutGraph, start: Instant) -> Result<MinimizeResult> {
    let (cut, max_side) = max_source_side(graph);
    let (cut_c, max_comp) = max_source_side(&graph.swapped());
    if cut != cut_c {
        return Err(Error::CapacityOverflow(format!("complement cut {cut_c} differs from {cut}")));
    }
    let min_side: Vec<bool> = max_comp.iter().map(|b| !b).collect();
    let e_max = labelled(omega, graph, &max_side)?;
    let e_min = labelled(omega, graph, &min_side)?;
    let energy = k_perimeter_total(&e_min, omega, w)?;
    let energy_max = k_perimeter_total(&e_max, omega, w)?;
    Ok(MinimizeResult {
        e_min,
        e_max,
        energy,
        energy_max,
        cut_value: cut as f64 * graph.unit,
        cut_units: cut,
        nodes: graph.cells.len(),
        edges: graph.pairs.len(),
        solve_seconds: start.elapsed().as_secs_f64(),
    })
}

/// World set from a node labelling: the labelling on Omega, exterior data elsewhere.
pub fn labelled(omega: &DomainMask, graph: &CutGraph, in_e: &[bool]) -> Result<GridSet> {
    let mut bits = omega.exterior.bits.clone();
    for (j, &i) in graph.cells.iter().enumerate() {
        bits[i] = in_e[j];
    }
    GridSet::from_bits(omega.grid(), bits)
}

pub const ENUMERATION_MAX_NODES: usize = 20;

#[derive(Debug, Clone)]
pub struct Enumeration {
    pub best: i128,
    /// All optimal labellings as bit masks over nodes.
    pub optima: Vec<u32>,
    pub nodes: usize,
}

/// Exhaustive minimization over all interior labellings (at most 20 nodes).
pub fn enumerate_minimizers(graph: &CutGraph) -> Result<Enumeration> {
    let n = graph.cells.len();
    if n > ENUMERATION_MAX_NODES {
        return Err(Error::InvalidParam(format!("{n} nodes is too many to enumerate")));
    }
    let energies: Vec<i128> = (0..1u32 << n)
        .into_par_iter()
        .map(|mask| {
            let in_e: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
            graph.energy(&in_e)
        })
        .collect();
    let best = *energies.iter().min().unwrap();
    let optima = (0..1u32 << n).filter(|&m| energies[m as usize] == best).collect();
    Ok(Enumeration { best, optima, nodes: n })
}

/// Node labelling of a world set.
pub fn node_labels(graph: &CutGraph, e: &GridSet) -> Vec<bool> {
    graph.cells.iter().map(|&i| e.bits[i]).collect()
}

/// Exterior data for randomized trials: random bits, a random halfplane, or a halfplane with noise.
pub fn random_exterior(g: &Grid, rng: &mut ChaCha8Rng) -> GridSet {
    let kind = rng.gen_range(0..3);
    if kind == 0 {
        let p: f64 = rng.gen_range(0.2..0.8);
        let bits = (0..g.len()).map(|_| rng.gen_bool(p)).collect();
        return GridSet::from_bits(g, bits).unwrap();
    }
    let th: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut v = [th.cos(), th.sin(), 0.0];
    if g.dim == 3 {
        let z: f64 = rng.gen_range(-1.0..1.0);
        let r = (1.0 - z * z).sqrt();
        v = [r * th.cos(), r * th.sin(), z];
    }
    let t = rng.gen_range(-0.25..0.25) * g.bounding_radius();
    let c = g.world_center();
    let mut e = GridSet::from_fn(g, |p| (0..3).map(|a| (p[a] - c[a]) * v[a]).sum::<f64>() <= t);
    if kind == 2 {
        for b in e.bits.iter_mut() {
            if rng.gen_bool(0.15) {
                *b = !*b;
            }
        }
    }
    e
}

#[derive(Debug, Clone, Serialize)]
pub struct InclusionReport {
    pub trials: usize,
    pub violations: usize,
    pub unique: usize,
    pub max_optima: usize,
    /// Trial indices with a violation.
    pub counterexamples: Vec<usize>,
}

/// E_min within E_max, and every enumerated optimum between them, on random exterior data.
pub fn mutual_inclusion_check(omega: &DomainMask, w: &InteractionWeights, trials: usize, seed: u64) -> Result<InclusionReport> {
    let g = omega.grid().clone();
    let results: Vec<Result<(bool, usize)>> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64 + 1);
            let dom = omega.with_exterior(random_exterior(&g, &mut rng))?;
            let graph = build_graph(&dom, w)?;
            let res = minimize_graph(&dom, w, &graph, Instant::now())?;
            let mut ok = res.e_min.is_subset(&res.e_max);
            let lo = node_labels(&graph, &res.e_min);
            let hi = node_labels(&graph, &res.e_max);
            let mut count = 0;
            if graph.cells.len() <= ENUMERATION_MAX_NODES {
                let en = enumerate_minimizers(&graph)?;
                ok &= en.best == res.cut_units;
                for m in &en.optima {
                    for i in 0..graph.cells.len() {
                        let b = m >> i & 1 == 1;
                        ok &= (!lo[i] || b) && (!b || hi[i]);
                    }
                }
                count = en.optima.len();
            }
            Ok((ok, count))
        })
        .collect();
    let mut rep = InclusionReport { trials, violations: 0, unique: 0, max_optima: 0, counterexamples: Vec::new() };
    for (t, r) in results.into_iter().enumerate() {
        let (ok, count) = r?;
        if !ok {
            rep.violations += 1;
            rep.counterexamples.push(t);
        }
        if count == 1 {
            rep.unique += 1;
        }
        rep.max_optima = rep.max_optima.max(count);
    }
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub epsilon: f64,
    /// P_{K,Omega}(E_eps) with the unregularized kernel.
    pub base_energy: f64,
    /// Optimum of the regularized problem.
    pub reg_energy: f64,
    pub cells: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// |E_i delta E_j| inside Omega.
    pub distances: Vec<Vec<f64>>,
    #[serde(skip)]
    pub sets: Vec<GridSet>,
}

/// Minimizers for K + eps |z|^{-n-1/2} over a list of eps, compared under K.
pub fn regularization_sweep(omega: &DomainMask, spec: &KernelSpec, eps: &[f64], cutoff: f64) -> Result<SweepReport> {
    let g = omega.grid();
    let shape = &g.shape[..g.dim];
    let base: Kernel = KernelSpec { epsilon: 0.0, ..spec.clone() }.build()?;
    let wb = build_weights(&base, shape, g.h, cutoff)?;
    let mut rows = Vec::new();
    let mut sets = Vec::new();
    for &e in eps {
        let k = KernelSpec { epsilon: e, ..spec.clone() }.build()?;
        let w = if e == 0.0 { wb.clone() } else { build_weights(&k, shape, g.h, cutoff)? };
        let r = minimize(omega, &w)?;
        rows.push(SweepRow { epsilon: e, base_energy: k_perimeter_total(&r.e_min, omega, &wb)?, reg_energy: r.energy, cells: r.e_min.count() });
        sets.push(r.e_min);
    }
    let mut distances = vec![vec![0.0; sets.len()]; sets.len()];
    for i in 0..sets.len() {
        for j in 0..sets.len() {
            distances[i][j] = symmetric_difference_measure(&sets[i], &sets[j], omega)?;
        }
    }
    Ok(SweepReport { rows, distances, sets })
}

#[derive(Debug, Clone, Serialize)]
pub struct CompetitorReport {
    pub competitors: usize,
    /// max over F of 2 L_K(F \ E, E \ F) - delta(F).
    pub max_excess: f64,
    pub violations: usize,
}

/// Random competitors F agreeing with the exterior data: 2 L_K(F \ E, E \ F) <= P(F) - P(E) + tol.
pub fn competitor_check(omega: &DomainMask, w: &InteractionWeights, e: &GridSet, count: usize, tol: f64, rng: &mut ChaCha8Rng) -> Result<CompetitorReport> {
    let p_e = k_perimeter_total(e, omega, w)?;
    let cells = omega.cells();
    let mut rep = CompetitorReport { competitors: count, max_excess: f64::NEG_INFINITY, violations: 0 };
    for _ in 0..count {
        let mut f = e.clone();
        match rng.gen_range(0..3) {
            0 => {
                let p: f64 = rng.gen_range(0.01..0.3);
                for &i in &cells {
                    if rng.gen_bool(p) {
                        f.bits[i] = !f.bits[i];
                    }
                }
            }
            1 => {
                let p: f64 = rng.gen_range(0.1..0.9);
                for &i in &cells {
                    f.bits[i] = rng.gen_bool(p);
                }
            }
            _ => {
                let g = omega.grid();
                let c = g.center(cells[rng.gen_range(0..cells.len())]);
                let r = rng.gen_range(0.5..4.0) * g.h;
                let fill = rng.gen_bool(0.5);
                for &i in &cells {
                    let x = g.center(i);
                    if crate::grid::dist2(&x, &c) < r * r {
                        f.bits[i] = fill;
                    }
                }
            }
        }
        let delta = k_perimeter_total(&f, omega, w)? - p_e;
        let cross = crate::energy::interaction(&f.difference(e)?.bits, &e.difference(&f)?.bits, &e.grid, w)?;
        let excess = 2.0 * cross - delta;
        rep.max_excess = rep.max_excess.max(excess);
        if excess > tol {
            rep.violations += 1;
        }
    }
    Ok(rep)
}

/// Largest energy decrease over single-cell flips of `e` inside Omega (<= 0 at a minimizer).
pub fn local_flip_check(omega: &DomainMask, w: &InteractionWeights, e: &GridSet, flips: usize, rng: &mut ChaCha8Rng) -> Result<f64> {
    let p_e = k_perimeter_total(e, omega, w)?;
    let cells = omega.cells();
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..flips {
        let i = cells[rng.gen_range(0..cells.len())];
        let mut f = e.clone();
        f.bits[i] = !f.bits[i];
        worst = worst.max(p_e - k_perimeter_total(&f, omega, w)?);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> (Grid, InteractionWeights) {
        let k = KernelSpec::fractional(2, 0.5).build().unwrap();
        let g = Grid::cube(2, 8, 0.25).unwrap();
        let w = build_weights(&k, &[8, 8], 0.25, 12.0).unwrap();
        (g, w)
    }

    #[test]
    fn all_ones_fills() {
        let (g, w) = small();
        let d = DomainMask::ball(GridSet::full(&g), &[0.0, 0.0], 0.6);
        let r = minimize(&d, &w).unwrap();
        assert_eq!(r.energy, 0.0);
        assert_eq!(r.e_min, GridSet::full(&g));
        assert_eq!(r.e_max, GridSet::full(&g));
    }

    #[test]
    fn matches_enumeration() {
        let (g, w) = small();
        let d = DomainMask::boxed(GridSet::empty(&g), &[-0.5, -0.5], &[0.5, 0.5]);
        assert_eq!(d.count(), 16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let dom = d.with_exterior(random_exterior(&g, &mut rng)).unwrap();
            let graph = build_graph(&dom, &w).unwrap();
            let r = minimize(&dom, &w).unwrap();
            let en = enumerate_minimizers(&graph).unwrap();
            assert_eq!(en.best, r.cut_units);
            assert_eq!(graph.energy(&node_labels(&graph, &r.e_min)), en.best);
            assert_eq!(graph.energy(&node_labels(&graph, &r.e_max)), en.best);
        }
    }
}
