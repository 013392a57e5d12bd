//! Cross-branch interaction units and their scheduling.
//!
//! A unit couples two branches. Each of its halves lets one branch (the
//! query side) read the other (the source side):
//!
//! ```text
//! F̂ = F + γ ⊙ Attention(norm(F), norm(FC(F_src)))
//! F̃ = F̂ + τ ⊙ FFN(norm(F̂))
//! ```
//!
//! `γ` and `τ` start at zero, so a freshly built unit is the identity.
//! Units at one interaction point read the block outputs and their updates
//! are summed per branch in a fixed order, which makes the result independent
//! of evaluation order. The `chain_one_way` scheme is the exception: it is a
//! sequential sweep by definition.

use crate::config::{AttentionKind, Direction, GateShape, InteractionSpec, PiipConfig};
use crate::error::{bail, Result};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{Bound, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::vit::{multi_head_attention, BranchFeature};

/// Normalized `(x, y)` patch centers of a `(g_h, g_w)` grid in raster order.
pub fn reference_points<T: Real>(grid: (usize, usize)) -> Tensor<T> {
    let (gh, gw) = grid;
    let mut data = Vec::with_capacity(gh * gw * 2);
    for r in 0..gh {
        for c in 0..gw {
            data.push(T::lit((c as f64 + 0.5) / gw as f64));
            data.push(T::lit((r as f64 + 0.5) / gh as f64));
        }
    }
    Tensor::from_parts(vec![gh * gw, 2], data)
}

#[derive(Debug, Clone)]
pub struct DeformableWeights {
    pub value: Linear,
    /// Predicts `heads · K` offsets `(dx, dy)` in source-grid pixel units.
    pub offset: Linear,
    /// Predicts `heads · K` sampling logits.
    pub logit: Linear,
    pub output: Linear,
    pub heads: usize,
    pub points: usize,
}

impl DeformableWeights {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        dim: usize,
        heads: usize,
        points: usize,
    ) -> Self {
        let hk = heads * points;
        Self {
            value: Linear::new(store, &format!("{prefix}.value"), dim, dim),
            offset: Linear::with_init(store, &format!("{prefix}.offset"), dim, 2 * hk, Init::Zeros),
            logit: Linear::with_init(store, &format!("{prefix}.logit"), dim, hk, Init::Zeros),
            output: Linear::new(store, &format!("{prefix}.output"), dim, dim),
            heads,
            points,
        }
    }

    pub fn num_params(dim: usize, heads: usize, points: usize) -> u64 {
        let hk = heads * points;
        2 * Linear::num_params(dim, dim) + Linear::num_params(dim, 2 * hk) + Linear::num_params(dim, hk)
    }
}

/// Output of a cross-attention call.
pub struct CrossOutput<T: Real> {
    /// `[n_q, D]`.
    pub out: Var<T>,
    /// Per-head attention weights: `[n_q, K]` per head for deformable
    /// attention, a single `[heads, n_q, n_k]` tensor for regular attention.
    pub weights: Vec<Var<T>>,
}

fn check_grid<T: Real>(what: &str, x: &Var<T>, grid: (usize, usize)) -> Result<()> {
    if x.shape().len() != 2 || x.shape()[0] != grid.0 * grid.1 {
        bail!(
            Contract,
            "{what}: {:?} tokens do not match the {}x{} patch grid (class tokens cannot be sampled)",
            x.shape(),
            grid.0,
            grid.1
        );
    }
    Ok(())
}

/// Deformable cross-attention of `query` patches over the `source` map.
///
/// Each query samples `K` points per head around its own patch center,
/// expressed in normalized coordinates so both grids share one frame.
#[allow(clippy::too_many_arguments)]
pub fn deformable_cross_attention<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    w: &DeformableWeights,
    query: &Var<T>,
    query_grid: (usize, usize),
    source: &Var<T>,
    source_grid: (usize, usize),
    keep_weights: bool,
) -> Result<CrossOutput<T>> {
    check_grid("deformable attention query", query, query_grid)?;
    check_grid("deformable attention source", source, source_grid)?;
    let d = query.shape()[1];
    let (heads, k) = (w.heads, w.points);
    if heads == 0 || !d.is_multiple_of(heads) || source.shape()[1] != d {
        bail!(
            Config,
            "deformable attention: {heads} heads incompatible with query {:?} / source {:?}",
            query.shape(),
            source.shape()
        );
    }
    let hd = d / heads;
    let nq = query.shape()[0];

    let value = w.value.apply(tape, p, source)?;
    let value_t = tape.transpose_last2(&value)?;
    let offsets = w.offset.apply(tape, p, query)?;
    let logits = w.logit.apply(tape, p, query)?;

    let refs = reference_points::<T>(query_grid);
    let mut base = Vec::with_capacity(nq * k * 2);
    let mut scale = Vec::with_capacity(nq * k * 2);
    for q in 0..nq {
        for _ in 0..k {
            base.extend_from_slice(&refs.data()[2 * q..2 * q + 2]);
            scale.push(T::lit(1.0 / source_grid.1 as f64));
            scale.push(T::lit(1.0 / source_grid.0 as f64));
        }
    }
    let base = tape.constant(Tensor::from_parts(vec![nq * k, 2], base));
    let scale = tape.constant(Tensor::from_parts(vec![nq * k, 2], scale));

    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::new();
    for h in 0..heads {
        let off = tape.slice_cols(&offsets, 2 * k * h, 2 * k * (h + 1))?;
        let off = tape.reshape(&off, &[nq * k, 2])?;
        let off = tape.mul(&off, &scale)?;
        let pts = tape.add(&base, &off)?;
        let map = tape.slice_rows(&value_t, h * hd, (h + 1) * hd)?;
        let map = tape.reshape(&map, &[hd, source_grid.0, source_grid.1])?;
        let samples = tape.grid_sample(&map, &pts)?;
        let samples = tape.reshape(&samples, &[nq, k, hd])?;
        let a = tape.slice_cols(&logits, k * h, k * (h + 1))?;
        let a = tape.softmax(&a)?;
        if keep_weights {
            weights.push(a.clone());
        }
        let a = tape.reshape(&a, &[nq, 1, k])?;
        let agg = tape.bmm(&a, &samples)?;
        outs.push(tape.reshape(&agg, &[nq, hd])?);
    }
    let refs: Vec<&Var<T>> = outs.iter().collect();
    let cat = tape.concat_cols(&refs)?;
    Ok(CrossOutput {
        out: w.output.apply(tape, p, &cat)?,
        weights,
    })
}

#[derive(Debug, Clone)]
pub struct RegularWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl RegularWeights {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, &format!("{prefix}.q"), dim, dim),
            k: Linear::new(store, &format!("{prefix}.k"), dim, dim),
            v: Linear::new(store, &format!("{prefix}.v"), dim, dim),
            o: Linear::new(store, &format!("{prefix}.o"), dim, dim),
            heads,
        }
    }

    pub fn num_params(dim: usize) -> u64 {
        4 * Linear::num_params(dim, dim)
    }
}

/// Standard multi-head cross-attention from every query to every source token.
pub fn regular_cross_attention<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    w: &RegularWeights,
    query: &Var<T>,
    source: &Var<T>,
    keep_weights: bool,
) -> Result<CrossOutput<T>> {
    let q = w.q.apply(tape, p, query)?;
    let k = w.k.apply(tape, p, source)?;
    let v = w.v.apply(tape, p, source)?;
    let (a, probs) = multi_head_attention(tape, &q, &k, &v, w.heads, keep_weights)?;
    Ok(CrossOutput {
        out: w.o.apply(tape, p, &a)?,
        weights: probs.into_iter().collect(),
    })
}

#[derive(Debug, Clone)]
pub enum CrossAttention {
    Deformable(DeformableWeights),
    Regular(RegularWeights),
}

/// One direction of a unit: branch `query` reads branch `source`
/// (0-based indices).
#[derive(Debug, Clone)]
pub struct Half {
    pub query: usize,
    pub source: usize,
    /// Projects source channels to the query width.
    pub fc: Linear,
    pub q_norm: LayerNorm,
    pub kv_norm: LayerNorm,
    pub attention: CrossAttention,
    pub gamma: ParamId,
    pub ffn_norm: LayerNorm,
    pub ffn1: Linear,
    pub ffn2: Linear,
    pub tau: ParamId,
}

impl Half {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        cfg: &PiipConfig,
        query: usize,
        source: usize,
    ) -> Self {
        let spec = &cfg.interactions;
        let qb = &cfg.branches[query];
        let (dq, ds) = (qb.dim, cfg.branches[source].dim);
        let prefix = format!("{prefix}.b{}_from_b{}", query + 1, source + 1);
        let gate = match spec.gate {
            GateShape::Vector => dq,
            GateShape::Scalar => 1,
        };
        let attention = match spec.attention {
            AttentionKind::Deformable => CrossAttention::Deformable(DeformableWeights::register(
                store,
                &format!("{prefix}.attn"),
                dq,
                qb.heads,
                spec.sample_points,
            )),
            AttentionKind::Regular => {
                CrossAttention::Regular(RegularWeights::register(store, &format!("{prefix}.attn"), dq, qb.heads))
            }
        };
        let hidden = spec.ffn_hidden(dq);
        Self {
            query,
            source,
            fc: Linear::new(store, &format!("{prefix}.fc"), ds, dq),
            q_norm: LayerNorm::new(store, &format!("{prefix}.q_norm"), dq),
            kv_norm: LayerNorm::new(store, &format!("{prefix}.kv_norm"), dq),
            attention,
            gamma: store.add(format!("{prefix}.gamma"), &[gate], Init::Zeros),
            ffn_norm: LayerNorm::new(store, &format!("{prefix}.ffn_norm"), dq),
            ffn1: Linear::new(store, &format!("{prefix}.ffn.fc1"), dq, hidden),
            ffn2: Linear::new(store, &format!("{prefix}.ffn.fc2"), hidden, dq),
            tau: store.add(format!("{prefix}.tau"), &[gate], Init::Zeros),
        }
    }

    /// Runs the cross-attention on pre-normalized inputs.
    #[allow(clippy::too_many_arguments)]
    pub fn attend<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        query: &Var<T>,
        query_grid: (usize, usize),
        source: &Var<T>,
        source_grid: (usize, usize),
        keep_weights: bool,
    ) -> Result<CrossOutput<T>> {
        match &self.attention {
            CrossAttention::Deformable(w) => {
                deformable_cross_attention(tape, p, w, query, query_grid, source, source_grid, keep_weights)
            }
            CrossAttention::Regular(w) => regular_cross_attention(tape, p, w, query, source, keep_weights),
        }
    }

    /// The residual update `γ ⊙ A + τ ⊙ FFN(norm(F + γ ⊙ A))` for the
    /// query branch's patch tokens `f`.
    pub fn update<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        f: &Var<T>,
        f_grid: (usize, usize),
        src: &Var<T>,
        src_grid: (usize, usize),
    ) -> Result<Var<T>> {
        let kv = self.fc.apply(tape, p, src)?;
        let kv = self.kv_norm.apply(tape, p, &kv)?;
        let q = self.q_norm.apply(tape, p, f)?;
        let a = self.attend(tape, p, &q, f_grid, &kv, src_grid, false)?.out;
        let ga = tape.mul_row(&a, &p[self.gamma])?;
        let f_hat = tape.add(f, &ga)?;
        let h = self.ffn_norm.apply(tape, p, &f_hat)?;
        let h = self.ffn1.apply(tape, p, &h)?;
        let h = tape.gelu(&h);
        let h = self.ffn2.apply(tape, p, &h)?;
        let th = tape.mul_row(&h, &p[self.tau])?;
        tape.add(&ga, &th)
    }
}

/// An interaction unit between branches `pair.0 < pair.1`, holding only the
/// halves its direction scheme uses.
#[derive(Debug, Clone)]
pub struct Unit {
    pub pair: (usize, usize),
    pub halves: Vec<Half>,
}

/// Branch pair of a unit, and its `(query, source)` halves.
pub type UnitPlan = ((usize, usize), Vec<(usize, usize)>);

/// `(pair, [(query, source)])` for every unit at one interaction point, in
/// execution order.
pub fn unit_plan(direction: Direction, branches: usize) -> Vec<UnitPlan> {
    let adjacent = (0..branches.saturating_sub(1)).map(|j| (j, j + 1));
    match direction {
        Direction::AdjacentBidirectional => adjacent.map(|(a, b)| ((a, b), vec![(a, b), (b, a)])).collect(),
        Direction::AdjacentDownOnly => adjacent.map(|(a, b)| ((a, b), vec![(b, a)])).collect(),
        Direction::AdjacentUpOnly => adjacent.map(|(a, b)| ((a, b), vec![(a, b)])).collect(),
        Direction::ChainOneWay => adjacent.rev().map(|(a, b)| ((a, b), vec![(a, b)])).collect(),
        Direction::AllPairsBidirectional => {
            let mut v = Vec::new();
            for a in 0..branches {
                for b in a + 1..branches {
                    v.push(((a, b), vec![(a, b), (b, a)]));
                }
            }
            v
        }
    }
}

pub fn register_units<T: Real>(store: &mut ParamStore<T>, cfg: &PiipConfig, point: usize) -> Vec<Unit> {
    unit_plan(cfg.interactions.direction, cfg.num_branches())
        .into_iter()
        .map(|(pair, halves)| {
            let prefix = format!("interaction{point}.unit{}_{}", pair.0 + 1, pair.1 + 1);
            Unit {
                pair,
                halves: halves
                    .into_iter()
                    .map(|(q, s)| Half::register(store, &prefix, cfg, q, s))
                    .collect(),
            }
        })
        .collect()
}

fn check_units(units: &[Unit], direction: Direction, branches: usize) -> Result<()> {
    for u in units {
        let (a, b) = u.pair;
        if a >= b || b >= branches {
            bail!(Schedule, "unit pair ({}, {}) invalid for {branches} branches", a + 1, b + 1);
        }
        if direction.adjacent_only() && b != a + 1 {
            bail!(
                Schedule,
                "branches {} and {} are not feature-scale adjacent, but {direction:?} connects adjacent branches only",
                a + 1,
                b + 1
            );
        }
        for h in &u.halves {
            if !((h.query, h.source) == (a, b) || (h.query, h.source) == (b, a)) {
                bail!(Schedule, "half {}<-{} does not belong to its unit", h.query + 1, h.source + 1);
            }
        }
    }
    Ok(())
}

/// Applies one interaction point to the block outputs `feats`.
pub fn schedule_interactions<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    units: &[Unit],
    spec: &InteractionSpec,
    feats: &[BranchFeature<T>],
) -> Result<Vec<BranchFeature<T>>> {
    let order: Vec<usize> = (0..units.len()).collect();
    schedule_in_order(tape, p, units, spec, feats, &order)
}

/// [`schedule_interactions`] evaluating the units in `order`. The result
/// does not depend on `order` except under `chain_one_way`.
pub fn schedule_in_order<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    units: &[Unit],
    spec: &InteractionSpec,
    feats: &[BranchFeature<T>],
    order: &[usize],
) -> Result<Vec<BranchFeature<T>>> {
    check_units(units, spec.direction, feats.len())?;
    let mut spatial = feats.iter().map(|f| f.spatial(tape)).collect::<Result<Vec<_>>>()?;
    let grids: Vec<_> = feats.iter().map(|f| f.grid).collect();
    let mut touched = vec![false; feats.len()];

    if spec.direction == Direction::ChainOneWay {
        for &u in order {
            for h in &units[u].halves {
                let d = h.update(tape, p, &spatial[h.query], grids[h.query], &spatial[h.source], grids[h.source])?;
                spatial[h.query] = tape.add(&spatial[h.query], &d)?;
                touched[h.query] = true;
            }
        }
    } else {
        let mut updates = Vec::new();
        for &u in order {
            let unit = &units[u];
            for h in &unit.halves {
                let d = h.update(tape, p, &spatial[h.query], grids[h.query], &spatial[h.source], grids[h.source])?;
                updates.push(((unit.pair, h.query), d));
            }
        }
        updates.sort_by_key(|(key, _)| *key);
        for ((_, q), d) in updates {
            spatial[q] = tape.add(&spatial[q], &d)?;
            touched[q] = true;
        }
    }

    feats
        .iter()
        .zip(spatial)
        .zip(touched)
        .map(|((f, s), t)| if t { f.with_spatial(tape, s) } else { Ok(f.clone()) })
        .collect()
}
