//! Budgeted design-space sweep over resolution assignments.
//!
//! The menu is a list of branch templates ordered from the largest model to
//! the smallest. Every strictly increasing choice of resolutions from the grid
//! is paired with it, so larger models always see smaller images. Candidates
//! over the MAC budget are dropped and the rest are ranked by the resolution
//! of the largest-image branch (descending), then total MACs (ascending),
//! then config id.

use std::cmp::Reverse;
use std::io::Write;

use rayon::prelude::*;

use crate::config::PiipConfig;
use crate::cost::{self, count_macs, CostReport};
use crate::error::{bail, Result};

/// Classification resolution grid: multiples of 16 from 64 to 512.
pub fn default_grid() -> Vec<usize> {
    (4..=32).map(|k| k * 16).collect()
}

#[derive(Debug, Clone)]
pub struct SweepEntry {
    pub config_id: String,
    pub config: PiipConfig,
    pub report: CostReport,
}

impl SweepEntry {
    pub fn resolutions(&self) -> Vec<usize> {
        self.config.branches.iter().map(|b| b.resolution).collect()
    }
}

fn join(v: impl IntoIterator<Item = usize>) -> String {
    v.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join("-")
}

/// Stable identifier `name:dims@resolutions`, e.g. `piip-tsb:768-384-192@128-192-368`.
pub fn config_id(cfg: &PiipConfig) -> String {
    format!(
        "{}:{}@{}",
        cfg.name,
        join(cfg.branches.iter().map(|b| b.dim)),
        join(cfg.branches.iter().map(|b| b.resolution))
    )
}

/// All strictly increasing `k`-tuples of `grid` (which must be sorted).
fn increasing_tuples(grid: &[usize], k: usize) -> Vec<Vec<usize>> {
    fn go(grid: &[usize], k: usize, from: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        for i in from..grid.len() {
            if grid.len() - i < k - cur.len() {
                break;
            }
            cur.push(grid[i]);
            go(grid, k, i + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(grid, k, 0, &mut Vec::with_capacity(k), &mut out);
    out
}

/// Ranked feasible configs. `base.branches` is the menu; its interaction
/// spec, mode and head carry over to every candidate. An empty feasible set
/// is an empty result.
pub fn sweep(base: &PiipConfig, budget_macs: u64, grid: &[usize]) -> Result<Vec<SweepEntry>> {
    let menu = &base.branches;
    if menu.is_empty() {
        bail!(Config, "sweep: the branch menu is empty");
    }
    if grid.is_empty() {
        bail!(Config, "sweep: the resolution grid is empty");
    }
    let params: Vec<u64> = menu.iter().map(cost::branch_params).collect();
    if params.windows(2).any(|p| p[0] <= p[1]) {
        bail!(Config, "sweep: menu must be ordered by strictly decreasing branch parameters, got {params:?}");
    }
    let mut grid = grid.to_vec();
    grid.sort_unstable();
    grid.dedup();
    for &r in &grid {
        if let Some(b) = menu.iter().find(|b| r == 0 || r % b.patch != 0) {
            bail!(Config, "sweep: grid resolution {r} is not a positive multiple of patch {}", b.patch);
        }
    }

    let mut entries = increasing_tuples(&grid, menu.len())
        .into_par_iter()
        .map(|res| {
            let mut cfg = base.clone();
            for (b, r) in cfg.branches.iter_mut().zip(res) {
                b.resolution = r;
            }
            cfg.validate()?;
            let report = count_macs(&cfg);
            Ok((report.total_macs() <= budget_macs).then(|| SweepEntry { config_id: config_id(&cfg), config: cfg, report }))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect::<Vec<_>>();
    entries.sort_by(|a, b| {
        let key = |e: &SweepEntry| (Reverse(e.config.input_resolution()), e.report.total_macs());
        key(a).cmp(&key(b)).then_with(|| a.config_id.cmp(&b.config_id))
    });
    Ok(entries)
}

/// Writes the ranked entries with columns `config_id, branch_dims,
/// branch_resolutions, params_total, macs_total, macs_branch_1..M,
/// macs_interactions, macs_merge`. Dims and resolutions are `-`-joined.
pub fn write_csv<W: Write>(entries: &[SweepEntry], branches: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["config_id", "branch_dims", "branch_resolutions", "params_total", "macs_total"]
        .into_iter()
        .map(String::from)
        .collect();
    header.extend((1..=branches).map(|j| format!("macs_branch_{j}")));
    header.extend(["macs_interactions".to_string(), "macs_merge".to_string()]);
    out.write_record(&header)?;
    for e in entries {
        let r = &e.report;
        let mut row = vec![
            e.config_id.clone(),
            join(e.config.branches.iter().map(|b| b.dim)),
            join(e.resolutions()),
            r.total_params().to_string(),
            r.total_macs().to_string(),
        ];
        row.extend((1..=branches).map(|j| r.branch_macs(j).to_string()));
        row.extend([r.interaction_macs().to_string(), r.merge_macs().to_string()]);
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
