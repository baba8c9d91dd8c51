//! Global-threshold search: turn one compression ratio into per-layer channel
//! selections.
//!
//! Each layer's criterion vector A_l lives on its own scale (it sums to one
//! over C_l channels), so a shared threshold t is compared locally as t/C_l.
//! U_l(t) counts entries strictly below the local threshold and
//! g(t) = sum U_l / sum C_l is the global pruned fraction, a nondecreasing
//! step function whose breakpoints are the scaled values C_l * a. The solver
//! minimizes |g(t) - r| either over a uniform grid or exactly over the
//! breakpoints.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::NetworkGraph;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionRequest {
    /// target pruned fraction in [0,1]
    pub r: f64,
    /// upper end of the grid; None picks max C_l*max(A_l) plus a margin
    pub t_max: Option<f64>,
    pub grid_steps: usize,
    /// minimum channels every layer must retain
    pub min_keep: usize,
}

impl CompressionRequest {
    pub fn new(r: f64) -> Self {
        CompressionRequest { r, t_max: None, grid_steps: 10_000, min_keep: 1 }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.r) {
            return Err(Error::InvalidInput(format!("ratio {} outside [0,1]", self.r)));
        }
        if self.grid_steps < 2 {
            return Err(Error::InvalidInput("grid needs at least 2 steps".into()));
        }
        if self.min_keep < 1 {
            return Err(Error::InvalidInput("min_keep must be at least 1".into()));
        }
        Ok(())
    }
}

/// How `solve_threshold` scans candidate thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    /// uniform grid over [0, T]
    Grid,
    /// exact: evaluate g only where it can change
    Breakpoints,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PruneMask {
    /// layer id -> keep flags, length C_l
    pub keep: BTreeMap<String, Vec<bool>>,
    /// layers whose selection must be realized by input sampling rather than
    /// structural removal (residual branches, shared producers)
    pub residual_samplers: BTreeMap<String, Vec<bool>>,
}

impl PruneMask {
    pub fn keep_count(&self, layer: &str) -> Option<usize> {
        self.keep.get(layer).map(|v| v.iter().filter(|&&k| k).count())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ThresholdSolution {
    /// canonical threshold: the smallest surviving scaled value C_l*a (0 when
    /// nothing is pruned), so grid and breakpoint searches that land in the
    /// same step of g report the identical number
    pub t_star: f64,
    /// the raw candidate the search selected
    pub t_search: f64,
    /// g(t_star), before the min_keep safeguard
    pub g_t_star: f64,
    /// pruned fraction after the safeguard re-keeps channels
    pub achieved_ratio: f64,
    /// layer id -> t_star / C_l
    pub local_thresholds: BTreeMap<String, f64>,
    /// layer id -> U_l(t_star)
    pub under_counts: BTreeMap<String, usize>,
    pub masks: PruneMask,
}

/// U_l(t): entries of A_l strictly below the local threshold t/C_l.
///
/// Compared as C_l*a < t so the test agrees bit-for-bit with the breakpoint
/// values (a < t/C_l and a*C_l < t can round differently).
pub fn count_under(a_l: &[f64], t: f64) -> usize {
    let c_l = a_l.len() as f64;
    a_l.iter().filter(|&&a| a * c_l < t).count()
}

/// g(t): globally pruned fraction at threshold t.
pub fn global_ratio(stats: &BTreeMap<String, Vec<f64>>, t: f64) -> f64 {
    let total: usize = stats.values().map(|a| a.len()).sum();
    if total == 0 {
        return 0.0;
    }
    let under: usize = stats.values().map(|a| count_under(a, t)).sum();
    under as f64 / total as f64
}

/// All scaled values C_l * a_{l,c}, ascending — the breakpoints of g.
fn scaled_values(stats: &BTreeMap<String, Vec<f64>>) -> Vec<f64> {
    let mut v: Vec<f64> = stats
        .values()
        .flat_map(|a| {
            let c = a.len() as f64;
            a.iter().map(move |x| x * c)
        })
        .collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

fn default_t_max(stats: &BTreeMap<String, Vec<f64>>) -> f64 {
    let top = stats
        .values()
        .map(|a| {
            let c = a.len() as f64;
            a.iter().cloned().fold(0.0, f64::max) * c
        })
        .fold(0.0, f64::max);
    top + top.max(1.0) * 1e-6
}

pub fn solve_threshold(
    stats: &BTreeMap<String, Vec<f64>>,
    request: &CompressionRequest,
    mode: SearchMode,
) -> Result<ThresholdSolution> {
    request.validate()?;
    if stats.is_empty() || stats.values().all(|a| a.is_empty()) {
        return Err(Error::InvalidInput("no statistics to solve over".into()));
    }
    for (id, a) in stats {
        if a.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidInput(format!("non-finite or negative statistic in '{id}'")));
        }
    }

    let t_max = request.t_max.unwrap_or_else(|| default_t_max(stats));
    let candidates: Vec<f64> = match mode {
        SearchMode::Grid => {
            let n = request.grid_steps;
            (0..n).map(|i| t_max * i as f64 / (n - 1) as f64).collect()
        }
        SearchMode::Breakpoints => {
            // g can only change across a scaled value; evaluating at 0, every
            // breakpoint, and one point past the largest covers every step
            let mut c = vec![0.0];
            c.extend(scaled_values(stats));
            c.push(t_max.max(c.last().copied().unwrap_or(0.0) + 1.0));
            c
        }
    };

    let pick = |candidates: &[f64]| -> f64 {
        let mut best_t = 0.0;
        let mut best_err = f64::INFINITY;
        for &t in candidates {
            let err = (global_ratio(stats, t) - request.r).abs();
            // strict < keeps the earlier (smaller) t on ties: prune less
            if err < best_err {
                best_err = err;
                best_t = t;
            }
        }
        best_t
    };
    let mut best_t = pick(&candidates);
    if mode == SearchMode::Grid {
        // |g(t) - r| is quasiconvex over t (g is nondecreasing), so its grid
        // minimizers form one contiguous plateau and the true optimal step
        // lies within one grid cell of that plateau. Enumerating breakpoints
        // in the plateau's one-cell neighborhood makes the grid search exact
        // even when a step of g is narrower than the grid pitch.
        let best_err = (global_ratio(stats, best_t) - request.r).abs();
        let plateau: Vec<f64> = candidates
            .iter()
            .copied()
            .filter(|&t| (global_ratio(stats, t) - request.r).abs() == best_err)
            .collect();
        let cell = t_max / (request.grid_steps - 1) as f64;
        let lo = plateau.iter().cloned().fold(best_t, f64::min) - cell;
        let hi = plateau.iter().cloned().fold(best_t, f64::max) + cell;
        let mut refined: Vec<f64> = scaled_values(stats)
            .into_iter()
            .filter(|&v| v >= lo && v <= hi)
            .collect();
        refined.push(best_t);
        refined.sort_by(|a, b| a.partial_cmp(b).unwrap());
        best_t = pick(&refined);
    }

    // Canonicalize: both search modes land somewhere inside one step of g;
    // report the step's representative so solutions compare exactly.
    let sorted = scaled_values(stats);
    let pruned_total = sorted.iter().filter(|&&v| v < best_t).count();
    let t_star = if pruned_total == sorted.len() {
        sorted.last().unwrap() + 1.0
    } else {
        // smallest surviving scaled value; 0 when nothing is pruned — either
        // way, a < t_star reproduces the same selection as a < best_t
        if pruned_total == 0 { 0.0 } else { sorted[pruned_total] }
    };
    let g_t_star = global_ratio(stats, t_star);
    debug_assert_eq!(g_t_star, global_ratio(stats, best_t));

    let mut keep = BTreeMap::new();
    let mut local_thresholds = BTreeMap::new();
    let mut under_counts = BTreeMap::new();
    let mut kept_after = 0usize;
    let total: usize = stats.values().map(|a| a.len()).sum();
    for (id, a) in stats {
        let c_l = a.len();
        let local = t_star / c_l as f64;
        let mut flags: Vec<bool> = a.iter().map(|&v| !(v * (c_l as f64) < t_star)).collect();
        under_counts.insert(id.clone(), flags.iter().filter(|&&k| !k).count());
        local_thresholds.insert(id.clone(), local);

        // safeguard: every layer retains its strongest min_keep channels
        let min_keep = request.min_keep.min(c_l);
        if flags.iter().filter(|&&k| k).count() < min_keep {
            let mut order: Vec<usize> = (0..c_l).collect();
            order.sort_by(|&i, &j| {
                a[j].partial_cmp(&a[i]).unwrap().then(i.cmp(&j))
            });
            for &i in order.iter().take(min_keep) {
                flags[i] = true;
            }
        }
        kept_after += flags.iter().filter(|&&k| k).count();
        keep.insert(id.clone(), flags);
    }

    Ok(ThresholdSolution {
        t_star,
        t_search: best_t,
        g_t_star,
        achieved_ratio: (total - kept_after) as f64 / total as f64,
        local_thresholds,
        under_counts,
        masks: PruneMask { keep, residual_samplers: BTreeMap::new() },
    })
}

/// Split the keep-map by how each layer's selection must be realized: layers
/// whose input comes from a shared tensor (residual trunk, multi-consumer
/// producer, the graph input) get sampling masks; the trunk itself is left
/// structurally intact.
pub fn derive_residual_masks(mut masks: PruneMask, graph: &NetworkGraph) -> Result<PruneMask> {
    masks.residual_samplers.clear();
    for (id, flags) in &masks.keep {
        let layer = graph.layer(id)?;
        if flags.len() != graph.effective_in_channels(layer) {
            return Err(Error::dim(
                format!("mask for {id}"),
                graph.effective_in_channels(layer),
                flags.len(),
            ));
        }
        if graph.prune_route(id)?.is_sampler() {
            masks.residual_samplers.insert(id.clone(), flags.clone());
        }
    }
    Ok(masks)
}

/// The `masks.json` interchange schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MasksFile {
    pub t_star: f64,
    pub achieved_ratio: f64,
    pub layers: Vec<MaskLayer>,
    pub residual_samplers: Vec<MaskLayer>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskLayer {
    pub id: String,
    pub keep: Vec<bool>,
}

impl MasksFile {
    pub fn from_solution(sol: &ThresholdSolution) -> MasksFile {
        MasksFile {
            t_star: sol.t_star,
            achieved_ratio: sol.achieved_ratio,
            layers: sol
                .masks
                .keep
                .iter()
                .map(|(id, keep)| MaskLayer { id: id.clone(), keep: keep.clone() })
                .collect(),
            residual_samplers: sol
                .masks
                .residual_samplers
                .iter()
                .map(|(id, keep)| MaskLayer { id: id.clone(), keep: keep.clone() })
                .collect(),
        }
    }

    pub fn to_mask(&self) -> PruneMask {
        PruneMask {
            keep: self.layers.iter().map(|l| (l.id.clone(), l.keep.clone())).collect(),
            residual_samplers: self
                .residual_samplers
                .iter()
                .map(|l| (l.id.clone(), l.keep.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<MasksFile> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
