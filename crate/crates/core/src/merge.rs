//! Branch merging and output heads.
//!
//! Selected branches are projected to Branch 1's width, upsampled to the last
//! branch's grid and summed with learnable scalar weights `w_j`.

use crate::config::{Mode, PiipConfig};
use crate::error::{bail, Result};
use crate::numerics::{Real, Tape, Var};
use crate::params::{Bound, GroupNorm, Init, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};
use crate::vit::BranchFeature;

/// 3×3 convolution, stride 1, zero padding 1, weight `[C_out, 9·C_in]`.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Conv3x3 {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        Self {
            weight: store.add(format!("{name}.weight"), &[c_out, 9 * c_in], Init::TruncNormal(INIT_STD)),
            bias: store.add(format!("{name}.bias"), &[c_out], Init::Zeros),
            c_in,
            c_out,
        }
    }

    pub fn num_params(c_in: usize, c_out: usize) -> u64 {
        (9 * c_in * c_out + c_out) as u64
    }

    /// `x: [C_in, H, W] → [C_out, H·W]`.
    pub fn apply<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        if x.shape().len() != 3 || x.shape()[0] != self.c_in {
            bail!(Config, "conv3x3: expected {} input channels, got {:?}", self.c_in, x.shape());
        }
        let cols = tape.im2col3x3(x)?;
        let y = tape.matmul(&p[self.weight], &cols)?;
        tape.add_col(&y, &p[self.bias])
    }
}

/// Projection of one branch to the merge width.
#[derive(Debug, Clone)]
pub enum Proj {
    /// conv–GN–GELU–conv–GN on the patch map.
    Dense {
        conv1: Conv3x3,
        gn1: GroupNorm,
        conv2: Conv3x3,
        gn2: GroupNorm,
    },
    /// Per-token linear map, then GroupNorm over channels.
    Linear { linear: Linear, gn: GroupNorm },
}

impl Proj {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, mode: Mode, d_in: usize, d_out: usize) -> Self {
        match mode {
            Mode::ClassifyPretrain => Proj::Linear {
                linear: Linear::new(store, &format!("{prefix}.linear"), d_in, d_out),
                gn: GroupNorm::per_token(store, &format!("{prefix}.gn"), d_out),
            },
            _ => Proj::Dense {
                conv1: Conv3x3::new(store, &format!("{prefix}.conv1"), d_in, d_out),
                gn1: GroupNorm::new(store, &format!("{prefix}.gn1"), d_out),
                conv2: Conv3x3::new(store, &format!("{prefix}.conv2"), d_out, d_out),
                gn2: GroupNorm::new(store, &format!("{prefix}.gn2"), d_out),
            },
        }
    }

    pub fn num_params(mode: Mode, d_in: usize, d_out: usize) -> u64 {
        let gn = 2 * d_out as u64;
        match mode {
            Mode::ClassifyPretrain => Linear::num_params(d_in, d_out) + gn,
            _ => Conv3x3::num_params(d_in, d_out) + Conv3x3::num_params(d_out, d_out) + 2 * gn,
        }
    }

    /// Projects a branch's patch tokens to a `[D_1, g_h, g_w]` map.
    pub fn apply<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, f: &BranchFeature<T>) -> Result<Var<T>> {
        let (gh, gw) = f.grid;
        match self {
            Proj::Dense { conv1, gn1, conv2, gn2 } => {
                let x = f.to_map(tape)?;
                proj_dense(tape, p, (conv1, gn1, conv2, gn2), &x)
            }
            Proj::Linear { linear, gn } => {
                let y = proj_linear(tape, p, linear, gn, &f.spatial(tape)?)?;
                let t = tape.transpose_last2(&y)?;
                tape.reshape(&t, &[linear.d_out, gh, gw])
            }
        }
    }
}

/// `x: [D_j, g_h, g_w] → [D_1, g_h, g_w]` through conv–GN–GELU–conv–GN.
pub fn proj_dense<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    (conv1, gn1, conv2, gn2): (&Conv3x3, &GroupNorm, &Conv3x3, &GroupNorm),
    x: &Var<T>,
) -> Result<Var<T>> {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let c = conv2.c_out;
    let y = conv1.apply(tape, p, x)?;
    let y = tape.reshape(&y, &[1, c, h * w])?;
    let y = gn1.apply(tape, p, &y)?;
    let y = tape.gelu(&y);
    let y = tape.reshape(&y, &[c, h, w])?;
    let y = conv2.apply(tape, p, &y)?;
    let y = tape.reshape(&y, &[1, c, h * w])?;
    let y = gn2.apply(tape, p, &y)?;
    tape.reshape(&y, &[c, h, w])
}

/// `x: [n, D_j] → [n, D_1]`: linear map, then GroupNorm over each token's
/// channels.
pub fn proj_linear<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    linear: &Linear,
    gn: &GroupNorm,
    x: &Var<T>,
) -> Result<Var<T>> {
    let n = x.shape()[0];
    let y = linear.apply(tape, p, x)?;
    let y = tape.reshape(&y, &[n, linear.d_out, 1])?;
    let y = gn.apply(tape, p, &y)?;
    tape.reshape(&y, &[n, linear.d_out])
}

#[derive(Debug, Clone)]
pub struct MergeWeights {
    /// One projection per branch; `None` for branches outside the subset.
    pub projs: Vec<Option<Proj>>,
    /// `w`, shape `[M]`, initialized to `1/M`.
    pub weights: ParamId,
    pub dim: usize,
    pub grid: usize,
}

impl MergeWeights {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &PiipConfig) -> Self {
        let m = cfg.num_branches();
        let d1 = cfg.merge_dim();
        let projs = cfg
            .merge_mask()
            .iter()
            .zip(&cfg.branches)
            .enumerate()
            .map(|(j, (&on, b))| on.then(|| Proj::register(store, &format!("merge.proj{}", j + 1), cfg.mode, b.dim, d1)))
            .collect();
        Self {
            projs,
            weights: store.add("merge.weights", &[m], Init::Full(1.0 / m as f64)),
            dim: d1,
            grid: cfg.merge_grid(),
        }
    }
}

/// Weighted sum of the projected, upsampled branch maps: `[D_1, G, G]`.
pub fn branch_merge<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    w: &MergeWeights,
    feats: &[BranchFeature<T>],
) -> Result<Var<T>> {
    if feats.len() != w.projs.len() {
        bail!(Config, "merge: {} features for {} branches", feats.len(), w.projs.len());
    }
    if w.projs.iter().all(Option::is_none) {
        bail!(Config, "merge: empty branch subset");
    }
    let m = feats.len();
    let weights = tape.reshape(&p[w.weights], &[1, m])?;
    let mut acc: Option<Var<T>> = None;
    for (j, (f, proj)) in feats.iter().zip(&w.projs).enumerate() {
        let Some(proj) = proj else { continue };
        let y = proj.apply(tape, p, f)?;
        let y = tape.bilinear_resize(&y, w.grid, w.grid)?;
        let wj = tape.slice_cols(&weights, j, j + 1)?;
        let y = tape.mul_row(&y, &wj)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &y)?,
            None => y,
        });
    }
    Ok(acc.expect("non-empty subset"))
}

/// Arithmetic mean of per-branch logit vectors.
pub fn cls_logits_average<T: Real>(tape: &Tape<T>, logits: &[Var<T>]) -> Result<Var<T>> {
    let Some(first) = logits.first() else {
        bail!(Config, "logit average: no branches");
    };
    for l in logits {
        if l.shape() != first.shape() {
            bail!(Config, "logit average: class-count mismatch {:?} vs {:?}", first.shape(), l.shape());
        }
    }
    let mut acc = first.clone();
    for l in &logits[1..] {
        acc = tape.add(&acc, l)?;
    }
    if logits.len() == 1 {
        return Ok(acc);
    }
    Ok(tape.mul_const(&acc, T::lit(1.0 / logits.len() as f64)))
}

/// LayerNorm + linear classifier on one `[1, D]` vector.
#[derive(Debug, Clone)]
pub struct ClassifierHead {
    pub norm: LayerNorm,
    pub linear: Linear,
}

impl ClassifierHead {
    pub fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, dim: usize, classes: usize) -> Self {
        Self {
            norm: LayerNorm::new(store, &format!("{prefix}.norm"), dim),
            linear: Linear::new(store, &format!("{prefix}.linear"), dim, classes),
        }
    }

    pub fn num_params(dim: usize, classes: usize) -> u64 {
        LayerNorm::num_params(dim) + Linear::num_params(dim, classes)
    }

    /// `x: [1, D]` → logits `[classes]`.
    pub fn apply<T: Real>(&self, tape: &Tape<T>, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let h = self.norm.apply(tape, p, x)?;
        let y = self.linear.apply(tape, p, &h)?;
        tape.reshape(&y, &[self.linear.d_out])
    }
}

#[derive(Debug, Clone)]
pub enum Heads {
    /// Dense mode: the merged map is the output.
    None,
    /// Mean-pool the merged map, then one classifier.
    Pooled(ClassifierHead),
    /// One classifier per selected branch on its class token; logits averaged.
    PerBranch(Vec<Option<ClassifierHead>>),
}

impl Heads {
    pub fn register<T: Real>(store: &mut ParamStore<T>, cfg: &PiipConfig) -> Self {
        match cfg.mode {
            Mode::Dense => Heads::None,
            Mode::ClassifyPretrain => {
                Heads::Pooled(ClassifierHead::register(store, "head", cfg.merge_dim(), cfg.num_classes))
            }
            Mode::ClassifyFinetune => Heads::PerBranch(
                cfg.merge_mask()
                    .iter()
                    .zip(&cfg.branches)
                    .enumerate()
                    .map(|(j, (&on, b))| {
                        on.then(|| ClassifierHead::register(store, &format!("head{}", j + 1), b.dim, cfg.num_classes))
                    })
                    .collect(),
            ),
        }
    }
}

/// Mean over the spatial positions of a `[D, G, G]` map, as a `[1, D]` row.
pub fn mean_pool<T: Real>(tape: &Tape<T>, map: &Var<T>) -> Result<Var<T>> {
    let d = map.shape()[0];
    let flat = tape.reshape(map, &[d, map.value().len() / d])?;
    let pooled = tape.mean_last(&flat)?;
    tape.reshape(&pooled, &[1, d])
}

/// Shape of the model output for `cfg`.
pub fn output_shape(cfg: &PiipConfig) -> Vec<usize> {
    match cfg.mode {
        Mode::Dense => vec![cfg.merge_dim(), cfg.merge_grid(), cfg.merge_grid()],
        _ => vec![cfg.num_classes],
    }
}
