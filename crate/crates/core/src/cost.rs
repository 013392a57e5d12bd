//! Analytical parameter and MAC accounting.
//!
//! One multiply-accumulate is one MAC. Counted: every matrix product
//! (linear layers, convolutions via im2col, attention scores and
//! attention-weighted sums), 4 MACs per output element of a bilinear resize,
//! and 4 MACs per sampled point per channel in deformable attention.
//! Element-wise ops, norms, softmax and pooling are free.
//!
//! Rows are `branchJ` (patch embedding, layers, input resize),
//! `branchJ.pos_embed` (parameters only), `interactions`, `merge` and
//! `heads`. Totals are exact sums of the rows. [`CostReport::breakdown`]
//! splits the interaction row by component and is not part of the totals.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::config::{AttentionKind, BranchConfig, GateShape, Mode, PiipConfig};
use crate::error::Result;
use crate::interaction::{unit_plan, DeformableWeights, RegularWeights};
use crate::merge::{ClassifierHead, Proj};
use crate::model::{branch_scope, Model, HEADS_SCOPE, INTERACTIONS_SCOPE, MERGE_SCOPE};
use crate::numerics::counter::MacCounter;
use crate::numerics::{Real, Tape, Tensor};
use crate::params::{LayerNorm, Linear};
use crate::vit::LayerWeights;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    fn new(name: impl Into<String>, params: u64, macs: u64) -> Self {
        Self {
            name: name.into(),
            params,
            macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub breakdown: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn row(&self, name: &str) -> Option<&CostRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    fn get(&self, name: &str) -> (u64, u64) {
        self.row(name).map(|r| (r.params, r.macs)).unwrap_or((0, 0))
    }

    /// Parameters of branch `number` including its position embedding.
    pub fn branch_params(&self, number: usize) -> u64 {
        let s = branch_scope(number);
        self.get(&s).0 + self.get(&format!("{s}.pos_embed")).0
    }

    pub fn branch_macs(&self, number: usize) -> u64 {
        self.get(&branch_scope(number)).1
    }

    pub fn interaction_macs(&self) -> u64 {
        self.get(INTERACTIONS_SCOPE).1
    }

    pub fn merge_macs(&self) -> u64 {
        self.get(MERGE_SCOPE).1
    }

    /// Human-readable table with the breakdown appended.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let line = |s: &mut String, r: &CostRow| {
            let _ = writeln!(
                s,
                "{:<28} {:>14} {:>9.2}M {:>17} {:>9.2}G",
                r.name,
                r.params,
                r.params as f64 / 1e6,
                r.macs,
                r.macs as f64 / 1e9
            );
        };
        let _ = writeln!(s, "{:<28} {:>14} {:>10} {:>17} {:>10}", "module", "params", "", "MACs", "");
        for r in &self.rows {
            line(&mut s, r);
        }
        line(&mut s, &CostRow::new("total", self.total_params(), self.total_macs()));
        if !self.breakdown.is_empty() {
            let _ = writeln!(s, "\ninteraction breakdown (included in `interactions` above)");
            for r in &self.breakdown {
                line(&mut s, r);
            }
        }
        s
    }

    /// CSV with columns `module,params,macs`, rows then `total`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["module", "params", "macs"])?;
        for r in self
            .rows
            .iter()
            .chain(std::iter::once(&CostRow::new("total", self.total_params(), self.total_macs())))
        {
            out.write_record([r.name.clone(), r.params.to_string(), r.macs.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Branch parameters excluding the position embedding.
pub fn branch_params(b: &BranchConfig) -> u64 {
    let patch = Linear::num_params(3 * b.patch * b.patch, b.dim);
    let cls = if b.use_cls_token { b.dim as u64 } else { 0 };
    patch + cls + b.depth as u64 * LayerWeights::num_params(b)
}

pub fn pos_embed_params(b: &BranchConfig) -> u64 {
    (b.tokens() * b.dim) as u64
}

/// MACs of one ViT layer over `n` tokens.
pub fn layer_macs(n: u64, d: u64, hidden: u64) -> u64 {
    4 * n * d * d + 2 * n * n * d + 2 * n * d * hidden
}

/// MACs of a branch: input resize, patch embedding and all layers.
pub fn branch_macs(b: &BranchConfig, input_resolution: usize) -> u64 {
    let r = b.resolution as u64;
    let resize = if b.resolution != input_resolution { 4 * 3 * r * r } else { 0 };
    let n_sp = b.spatial_tokens() as u64;
    let patch = n_sp * (3 * b.patch * b.patch) as u64 * b.dim as u64;
    let n = b.tokens() as u64;
    resize + patch + b.depth as u64 * layer_macs(n, b.dim as u64, b.mlp_hidden() as u64)
}

#[derive(Default)]
struct Parts {
    fc: (u64, u64),
    attention: (u64, u64),
    ffn: (u64, u64),
    norms_gates: (u64, u64),
}

fn add(a: &mut (u64, u64), p: u64, m: u64) {
    a.0 += p;
    a.1 += m;
}

fn half_cost(cfg: &PiipConfig, query: usize, source: usize, parts: &mut Parts) {
    let spec = &cfg.interactions;
    let (qb, sb) = (&cfg.branches[query], &cfg.branches[source]);
    let (dq, ds) = (qb.dim as u64, sb.dim as u64);
    let (nq, ns) = (qb.spatial_tokens() as u64, sb.spatial_tokens() as u64);
    let hf = spec.ffn_hidden(qb.dim) as u64;
    add(&mut parts.fc, Linear::num_params(sb.dim, qb.dim), ns * ds * dq);
    match spec.attention {
        AttentionKind::Deformable => {
            let (h, k) = (qb.heads as u64, spec.sample_points as u64);
            let p = DeformableWeights::num_params(qb.dim, qb.heads, spec.sample_points);
            let m = ns * dq * dq + nq * dq * 2 * h * k + nq * dq * h * k + 4 * nq * k * dq + nq * k * dq + nq * dq * dq;
            add(&mut parts.attention, p, m);
        }
        AttentionKind::Regular => {
            let m = 2 * nq * dq * dq + 2 * ns * dq * dq + 2 * nq * ns * dq;
            add(&mut parts.attention, RegularWeights::num_params(qb.dim), m);
        }
    }
    add(&mut parts.ffn, Linear::num_params(qb.dim, hf as usize) + Linear::num_params(hf as usize, qb.dim), 2 * nq * dq * hf);
    let gate = match spec.gate {
        GateShape::Vector => dq,
        GateShape::Scalar => 1,
    };
    add(&mut parts.norms_gates, 3 * LayerNorm::num_params(qb.dim) + 2 * gate, 0);
}

/// Closed-form parameter and MAC counts for `cfg`.
pub fn cost_report(cfg: &PiipConfig) -> CostReport {
    let mut rows = Vec::new();
    let input = cfg.input_resolution();
    for (j, b) in cfg.branches.iter().enumerate() {
        let s = branch_scope(j + 1);
        rows.push(CostRow::new(&s, branch_params(b), branch_macs(b, input)));
        rows.push(CostRow::new(format!("{s}.pos_embed"), pos_embed_params(b), 0));
    }

    let mut parts = Parts::default();
    for (_, halves) in unit_plan(cfg.interactions.direction, cfg.num_branches()) {
        for (q, s) in halves {
            half_cost(cfg, q, s, &mut parts);
        }
    }
    let n = cfg.interactions.count as u64;
    let scaled = |(p, m): (u64, u64)| (p * n, m * n);
    let breakdown: Vec<CostRow> = [
        ("interactions.fc", parts.fc),
        ("interactions.attention", parts.attention),
        ("interactions.ffn", parts.ffn),
        ("interactions.norms_gates", parts.norms_gates),
    ]
    .into_iter()
    .map(|(name, v)| {
        let (p, m) = scaled(v);
        CostRow::new(name, p, m)
    })
    .collect();
    rows.push(CostRow::new(
        INTERACTIONS_SCOPE,
        breakdown.iter().map(|r| r.params).sum(),
        breakdown.iter().map(|r| r.macs).sum(),
    ));

    let d1 = cfg.merge_dim() as u64;
    let g = cfg.merge_grid();
    let mask = cfg.merge_mask();
    let (mut mp, mut mm) = (0u64, 0u64);
    if cfg.mode.uses_merge() {
        mp += cfg.num_branches() as u64;
        for (b, _) in cfg.branches.iter().zip(&mask).filter(|(_, &on)| on) {
            let n = b.spatial_tokens() as u64;
            let dj = b.dim as u64;
            mp += Proj::num_params(cfg.mode, b.dim, d1 as usize);
            mm += match cfg.mode {
                Mode::ClassifyPretrain => n * dj * d1,
                _ => n * 9 * dj * d1 + n * 9 * d1 * d1,
            };
            if b.grid() != g {
                mm += 4 * d1 * (g * g) as u64;
            }
        }
    }
    rows.push(CostRow::new(MERGE_SCOPE, mp, mm));

    let c = cfg.num_classes as u64;
    let (hp, hm) = match cfg.mode {
        Mode::Dense => (0, 0),
        Mode::ClassifyPretrain => (ClassifierHead::num_params(d1 as usize, cfg.num_classes), d1 * c),
        Mode::ClassifyFinetune => cfg
            .branches
            .iter()
            .zip(&mask)
            .filter(|(_, &on)| on)
            .fold((0, 0), |(p, m), (b, _)| {
                (p + ClassifierHead::num_params(b.dim, cfg.num_classes), m + b.dim as u64 * c)
            }),
    };
    rows.push(CostRow::new(HEADS_SCOPE, hp, hm));
    CostReport { rows, breakdown }
}

/// Closed-form parameter counts (the MAC columns are filled as well).
pub fn count_params(cfg: &PiipConfig) -> CostReport {
    cost_report(cfg)
}

/// Closed-form MAC counts (the parameter columns are filled as well).
pub fn count_macs(cfg: &PiipConfig) -> CostReport {
    cost_report(cfg)
}

/// Row a parameter tensor belongs to, from its name.
pub fn row_of(name: &str) -> String {
    let head = name.split('.').next().unwrap_or(name);
    if head.starts_with("branch") {
        if name.starts_with(&format!("{head}.pos_embed")) {
            format!("{head}.pos_embed")
        } else {
            head.to_string()
        }
    } else if head.starts_with("interaction") {
        INTERACTIONS_SCOPE.to_string()
    } else if head == "merge" {
        MERGE_SCOPE.to_string()
    } else {
        HEADS_SCOPE.to_string()
    }
}

/// Row-wise parameter totals by enumerating a model's tensors.
pub fn enumerate_params<T: Real>(model: &Model<T>) -> BTreeMap<String, u64> {
    let mut m = BTreeMap::new();
    for (name, shape) in model.params().layout() {
        *m.entry(row_of(name)).or_insert(0) += shape.iter().product::<usize>() as u64;
    }
    m
}

/// Runs one forward pass with the MAC hook enabled and reports executed
/// MACs per row; parameter columns come from tensor enumeration.
pub fn instrumented_macs<T: Real>(model: &Model<T>, image: &Tensor<T>) -> Result<CostReport> {
    let counter = MacCounter::start()?;
    {
        let tape = Tape::inference();
        let x = tape.constant(image.clone());
        model.forward(&tape, &x)?;
    }
    let counts = counter.finish();
    let params = enumerate_params(model);
    let template = cost_report(model.config());
    let rows = template
        .rows
        .iter()
        .map(|r| {
            CostRow::new(
                &r.name,
                params.get(&r.name).copied().unwrap_or(0),
                counts.get(&r.name).copied().unwrap_or(0),
            )
        })
        .collect();
    let unassigned: u64 = counts
        .iter()
        .filter(|(k, _)| template.row(k).is_none())
        .map(|(_, v)| v)
        .sum();
    let mut report = CostReport { rows, breakdown: Vec::new() };
    if unassigned > 0 {
        report.rows.push(CostRow::new("unattributed", 0, unassigned));
    }
    Ok(report)
}

/// A published reference figure and this model's deviation from it.
#[derive(Debug, Clone)]
pub struct Deviation {
    pub label: &'static str,
    pub reference: f64,
    pub measured: f64,
}

impl Deviation {
    pub fn relative(&self) -> f64 {
        (self.measured - self.reference) / self.reference
    }
}

/// Published per-module figures of the from-scratch three-branch base model
/// (`piip-b`), in millions of parameters and GMACs.
pub fn piip_b_reference(report: &CostReport) -> Vec<Deviation> {
    let m = |v: u64| v as f64 / 1e6;
    let g = |v: u64| v as f64 / 1e9;
    let row = |n: &str| report.get(n);
    vec![
        Deviation { label: "branch1 params (M)", reference: 59.6, measured: m(report.branch_params(1)) },
        Deviation { label: "branch2 params (M)", reference: 15.1, measured: m(report.branch_params(2)) },
        Deviation { label: "branch3 params (M)", reference: 4.0, measured: m(report.branch_params(3)) },
        Deviation { label: "interactions params (M)", reference: 21.2, measured: m(row(INTERACTIONS_SCOPE).0) },
        Deviation { label: "merge params (M)", reference: 0.3, measured: m(row(MERGE_SCOPE).0) },
        Deviation { label: "branch1 MACs (G)", reference: 3.8, measured: g(report.branch_macs(1)) },
        Deviation { label: "branch2 MACs (G)", reference: 4.3, measured: g(report.branch_macs(2)) },
        Deviation { label: "branch3 MACs (G)", reference: 4.9, measured: g(report.branch_macs(3)) },
        Deviation { label: "interactions MACs (G)", reference: 5.1, measured: g(row(INTERACTIONS_SCOPE).1) },
        Deviation { label: "total MACs (G)", reference: 18.4, measured: g(report.total_macs()) },
    ]
}

/// Published figures for a built-in preset, if `cfg` is exactly that
/// preset. Parameters are in millions, MACs in GMACs.
pub fn published_reference(cfg: &PiipConfig, report: &CostReport) -> Vec<Deviation> {
    let is_preset = crate::config::preset(&cfg.name).is_ok_and(|p| &p == cfg);
    if !is_preset {
        return Vec::new();
    }
    let total = report.total_macs() as f64 / 1e9;
    let one = |label, reference| vec![Deviation { label, reference, measured: total }];
    match cfg.name.as_str() {
        "piip-b" => piip_b_reference(report),
        "piip-tsb" => one("total MACs (G)", 17.4),
        "piip-sbl" => one("total MACs (G)", 39.0),
        "vit-b" => one("total MACs (G)", 17.5),
        "vit-l" => one("total MACs (G)", 61.6),
        _ => Vec::new(),
    }
}

pub fn deviation_table(devs: &[Deviation]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<26} {:>10} {:>10} {:>9}", "reference figure", "published", "this", "deviation");
    for d in devs {
        let _ = writeln!(
            s,
            "{:<26} {:>10.2} {:>10.2} {:>+8.1}%",
            d.label,
            d.reference,
            d.measured,
            100.0 * d.relative()
        );
    }
    s
}
