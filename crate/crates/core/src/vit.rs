//! One pyramid branch: patch embedding, position embedding and a stack of
//! pre-norm ViT layers that can be run block by block.

use crate::config::BranchConfig;
use crate::error::{bail, Result};
use crate::numerics::{Real, Tape, Var};
use crate::params::{check_finite, Bound, Init, LayerNorm, Linear, ParamId, ParamStore, INIT_STD};

/// Token sequence of one branch with its patch-grid metadata.
#[derive(Debug, Clone)]
pub struct BranchFeature<T: Real> {
    /// `[g_h·g_w + cls, D]`, class token (if any) first.
    pub tokens: Var<T>,
    pub grid: (usize, usize),
    pub has_cls: bool,
}

impl<T: Real> BranchFeature<T> {
    pub fn new(tokens: Var<T>, grid: (usize, usize), has_cls: bool) -> Result<Self> {
        let expect = grid.0 * grid.1 + usize::from(has_cls);
        if tokens.shape().len() != 2 || tokens.shape()[0] != expect {
            bail!(
                Dimension,
                "branch feature: tokens {:?} inconsistent with grid {:?} (cls: {has_cls})",
                tokens.shape(),
                grid
            );
        }
        Ok(Self { tokens, grid, has_cls })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// The patch tokens without the class token.
    pub fn spatial(&self, tape: &Tape<T>) -> Result<Var<T>> {
        if self.has_cls {
            tape.slice_rows(&self.tokens, 1, self.num_tokens())
        } else {
            Ok(self.tokens.clone())
        }
    }

    pub fn cls(&self, tape: &Tape<T>) -> Result<Option<Var<T>>> {
        if self.has_cls {
            Ok(Some(tape.slice_rows(&self.tokens, 0, 1)?))
        } else {
            Ok(None)
        }
    }

    /// Same metadata and class token, new patch tokens.
    pub fn with_spatial(&self, tape: &Tape<T>, spatial: Var<T>) -> Result<Self> {
        let tokens = match self.cls(tape)? {
            Some(cls) => tape.concat_rows(&[&cls, &spatial])?,
            None => spatial,
        };
        Self::new(tokens, self.grid, self.has_cls)
    }

    /// Patch tokens as a `[D, g_h, g_w]` map.
    pub fn to_map(&self, tape: &Tape<T>) -> Result<Var<T>> {
        let s = self.spatial(tape)?;
        let t = tape.transpose_last2(&s)?;
        tape.reshape(&t, &[self.dim(), self.grid.0, self.grid.1])
    }
}

/// Multi-head scaled dot-product attention.
///
/// `q: [n_q, D]`, `k`, `v: [n_k, D]`; returns `[n_q, D]` and, on request,
/// the `[heads, n_q, n_k]` attention probabilities.
pub fn multi_head_attention<T: Real>(
    tape: &Tape<T>,
    q: &Var<T>,
    k: &Var<T>,
    v: &Var<T>,
    heads: usize,
    keep_probs: bool,
) -> Result<(Var<T>, Option<Var<T>>)> {
    let d = q.shape()[1];
    if heads == 0 || !d.is_multiple_of(heads) || k.shape()[1] != d || v.shape()[1] != d {
        bail!(
            Config,
            "attention: {heads} heads incompatible with q {:?}, k {:?}, v {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        );
    }
    let hd = d / heads;
    let split = |x: &Var<T>| -> Result<Var<T>> {
        let r = tape.reshape(x, &[x.shape()[0], heads, hd])?;
        tape.swap01(&r)
    };
    let (qh, kh, vh) = (split(q)?, split(k)?, split(v)?);
    let kt = tape.transpose_last2(&kh)?;
    let scores = tape.bmm(&qh, &kt)?;
    let scores = tape.mul_const(&scores, T::lit(1.0 / (hd as f64).sqrt()));
    let probs = tape.softmax(&scores)?;
    let out = tape.bmm(&probs, &vh)?;
    let out = tape.swap01(&out)?;
    let out = tape.reshape(&out, &[q.shape()[0], d])?;
    Ok((out, keep_probs.then_some(probs)))
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl LayerWeights {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, cfg: &BranchConfig) -> Self {
        let (d, h) = (cfg.dim, cfg.mlp_hidden());
        Self {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), d),
            qkv: Linear::new(store, &format!("{prefix}.attn.qkv"), d, 3 * d),
            proj: Linear::new(store, &format!("{prefix}.attn.proj"), d, d),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), d),
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), d, h),
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), h, d),
        }
    }

    /// Parameter count of one layer.
    pub fn num_params(cfg: &BranchConfig) -> u64 {
        let (d, h) = (cfg.dim, cfg.mlp_hidden());
        2 * LayerNorm::num_params(d)
            + Linear::num_params(d, 3 * d)
            + Linear::num_params(d, d)
            + Linear::num_params(d, h)
            + Linear::num_params(h, d)
    }
}

/// Output of [`vit_layer`].
pub struct LayerOutput<T: Real> {
    pub feature: BranchFeature<T>,
    /// `[heads, n, n]` self-attention probabilities, when requested.
    pub attention: Option<Var<T>>,
}

/// `x + MHSA(LN(x))`, then `+ MLP(LN(·))`, over all tokens including the
/// class token.
pub fn vit_layer<T: Real>(
    tape: &Tape<T>,
    p: &Bound<T>,
    w: &LayerWeights,
    heads: usize,
    x: &BranchFeature<T>,
    keep_attention: bool,
) -> Result<LayerOutput<T>> {
    let d = x.dim();
    if w.qkv.d_in != d {
        bail!(Dimension, "vit layer: token dim {d} but layer expects {}", w.qkv.d_in);
    }
    let h = w.norm1.apply(tape, p, &x.tokens)?;
    let qkv = w.qkv.apply(tape, p, &h)?;
    let q = tape.slice_cols(&qkv, 0, d)?;
    let k = tape.slice_cols(&qkv, d, 2 * d)?;
    let v = tape.slice_cols(&qkv, 2 * d, 3 * d)?;
    let (a, probs) = multi_head_attention(tape, &q, &k, &v, heads, keep_attention)?;
    let a = w.proj.apply(tape, p, &a)?;
    let x1 = tape.add(&x.tokens, &a)?;
    let h = w.norm2.apply(tape, p, &x1)?;
    let h = w.fc1.apply(tape, p, &h)?;
    let h = tape.gelu(&h);
    let h = w.fc2.apply(tape, p, &h)?;
    let out = tape.add(&x1, &h)?;
    Ok(LayerOutput {
        feature: BranchFeature::new(out, x.grid, x.has_cls)?,
        attention: probs,
    })
}

/// Resamples a learned position embedding to another patch grid.
///
/// `pos` is `[cls + g0², D]` over a square source grid; the class-token row
/// passes through unchanged.
pub fn interpolate_pos_embed<T: Real>(
    tape: &Tape<T>,
    pos: &Var<T>,
    has_cls: bool,
    new_grid: (usize, usize),
) -> Result<Var<T>> {
    if pos.shape().len() != 2 {
        bail!(Dimension, "pos embed: expected a matrix, got {:?}", pos.shape());
    }
    let (rows, d) = (pos.shape()[0], pos.shape()[1]);
    let cls = usize::from(has_cls);
    let n0 = rows.saturating_sub(cls);
    let g0 = (n0 as f64).sqrt().round() as usize;
    if n0 == 0 || g0 * g0 != n0 {
        bail!(Config, "pos embed: {n0} spatial rows do not form a square grid");
    }
    let spatial = if has_cls { tape.slice_rows(pos, 1, rows)? } else { pos.clone() };
    let map = tape.transpose_last2(&spatial)?;
    let map = tape.reshape(&map, &[d, g0, g0])?;
    let map = tape.bilinear_resize(&map, new_grid.0, new_grid.1)?;
    let flat = tape.reshape(&map, &[d, new_grid.0 * new_grid.1])?;
    let spatial = tape.transpose_last2(&flat)?;
    if has_cls {
        let c = tape.slice_rows(pos, 0, 1)?;
        tape.concat_rows(&[&c, &spatial])
    } else {
        Ok(spatial)
    }
}

/// Weights of one branch.
#[derive(Debug, Clone)]
pub struct BranchWeights {
    /// 1-based branch number.
    pub number: usize,
    pub cfg: BranchConfig,
    pub blocks: usize,
    pub patch_embed: Linear,
    pub cls_token: Option<ParamId>,
    pub pos_embed: ParamId,
    pub layers: Vec<LayerWeights>,
}

impl BranchWeights {
    pub fn register<T: Real>(
        store: &mut ParamStore<T>,
        number: usize,
        cfg: &BranchConfig,
        blocks: usize,
    ) -> Self {
        let prefix = format!("branch{number}");
        let patch_in = 3 * cfg.patch * cfg.patch;
        let patch_embed = Linear::new(store, &format!("{prefix}.patch_embed"), patch_in, cfg.dim);
        let cls_token = cfg.use_cls_token.then(|| {
            store.add(format!("{prefix}.cls_token"), &[1, cfg.dim], Init::TruncNormal(INIT_STD))
        });
        let pos_embed = store.add(
            format!("{prefix}.pos_embed"),
            &[cfg.tokens(), cfg.dim],
            Init::TruncNormal(INIT_STD),
        );
        let layers = (0..cfg.depth)
            .map(|l| LayerWeights::register(store, &format!("{prefix}.layer{l}"), cfg))
            .collect();
        Self {
            number,
            cfg: cfg.clone(),
            blocks,
            patch_embed,
            cls_token,
            pos_embed,
            layers,
        }
    }

    pub fn layers_per_block(&self) -> usize {
        self.cfg.depth / self.blocks
    }

    /// Resizes the full-resolution input to this branch's resolution.
    pub fn branch_input<T: Real>(&self, tape: &Tape<T>, image: &Var<T>) -> Result<Var<T>> {
        let r = self.cfg.resolution;
        tape.bilinear_resize(image, r, r)
    }

    /// Patchify, project, prepend the class token, add the position embedding.
    pub fn patch_embed<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        image: &Var<T>,
    ) -> Result<BranchFeature<T>> {
        let r = self.cfg.resolution;
        if image.shape() != [3, r, r] {
            bail!(
                Config,
                "branch {}: expected a 3x{r}x{r} image, got {:?}",
                self.number,
                image.shape()
            );
        }
        let patches = tape.patchify(image, self.cfg.patch)?;
        let mut tokens = self.patch_embed.apply(tape, p, &patches)?;
        if let Some(cls) = self.cls_token {
            tokens = tape.concat_rows(&[&p[cls], &tokens])?;
        }
        let tokens = tape.add(&tokens, &p[self.pos_embed])?;
        let g = self.cfg.grid();
        BranchFeature::new(tokens, (g, g), self.cfg.use_cls_token)
    }

    /// Applies the layers of block `block` (0-based).
    pub fn segment<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        x: &BranchFeature<T>,
        block: usize,
    ) -> Result<BranchFeature<T>> {
        if block >= self.blocks {
            bail!(
                Config,
                "branch {}: block index {block} out of range 0..{}",
                self.number,
                self.blocks
            );
        }
        let per = self.layers_per_block();
        let mut f = x.clone();
        for l in block * per..(block + 1) * per {
            f = vit_layer(tape, p, &self.layers[l], self.cfg.heads, &f, false)?.feature;
            check_finite(&f.tokens, || format!("branch {} layer {l}", self.number))?;
        }
        Ok(f)
    }

    /// The branch as a plain ViT: resize, embed, every layer.
    pub fn run<T: Real>(
        &self,
        tape: &Tape<T>,
        p: &Bound<T>,
        image: &Var<T>,
    ) -> Result<BranchFeature<T>> {
        let x = self.branch_input(tape, image)?;
        let mut f = self.patch_embed(tape, p, &x)?;
        for b in 0..self.blocks {
            f = self.segment(tape, p, &f, b)?;
        }
        Ok(f)
    }
}
