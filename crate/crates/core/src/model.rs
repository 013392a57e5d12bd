//! Whole-model assembly and the forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{Mode, PiipConfig};
use crate::error::{bail, Result};
use crate::interaction::{register_units, schedule_interactions, Unit};
use crate::merge::{branch_merge, cls_logits_average, mean_pool, output_shape, Heads, MergeWeights};
use crate::numerics::counter;
use crate::numerics::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::numerics::{Real, Tape, Tensor, Var};
use crate::params::{check_finite, Bound, Init, ParamStore};
use crate::vit::{BranchFeature, BranchWeights};

/// Counter scope of branch `number` (1-based).
pub fn branch_scope(number: usize) -> String {
    format!("branch{number}")
}

pub const INTERACTIONS_SCOPE: &str = "interactions";
pub const MERGE_SCOPE: &str = "merge";
pub const HEADS_SCOPE: &str = "heads";

pub struct Model<T: Real> {
    cfg: PiipConfig,
    store: ParamStore<T>,
    branches: Vec<BranchWeights>,
    /// Units per interaction point.
    interactions: Vec<Vec<Unit>>,
    merge: Option<MergeWeights>,
    heads: Heads,
}

/// Model output plus the final per-branch features.
pub struct ForwardOutput<T: Real> {
    /// `[D_1, G, G]` in dense mode, `[classes]` otherwise.
    pub output: Var<T>,
    pub features: Vec<BranchFeature<T>>,
}

impl<T: Real> Model<T> {
    /// Builds and initializes a model: truncated-normal weights, zero biases,
    /// unit norm gains, zero gates and zero offset/logit projections.
    pub fn build(cfg: &PiipConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::assemble(cfg, ParamStore::new(seed)))
    }

    /// The parameter layout of `cfg` without allocating any tensor.
    pub fn layout(cfg: &PiipConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::assemble(cfg, ParamStore::shapes_only()))
    }

    fn assemble(cfg: &PiipConfig, mut store: ParamStore<T>) -> Self {
        let mut cfg = cfg.clone();
        cfg.canonicalize();
        let blocks = cfg.interactions.blocks();
        let branches: Vec<_> = cfg
            .branches
            .iter()
            .enumerate()
            .map(|(j, b)| BranchWeights::register(&mut store, j + 1, b, blocks))
            .collect();
        let interactions = (0..cfg.interactions.count)
            .map(|i| register_units(&mut store, &cfg, i))
            .collect();
        let merge = cfg.mode.uses_merge().then(|| MergeWeights::register(&mut store, &cfg));
        let heads = Heads::register(&mut store, &cfg);
        Self {
            cfg,
            store,
            branches,
            interactions,
            merge,
            heads,
        }
    }

    pub fn config(&self) -> &PiipConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn branches(&self) -> &[BranchWeights] {
        &self.branches
    }

    /// Units of interaction point `point` (0-based).
    pub fn units(&self, point: usize) -> &[Unit] {
        &self.interactions[point]
    }

    pub fn merge_weights(&self) -> Option<&MergeWeights> {
        self.merge.as_ref()
    }

    pub fn heads(&self) -> &Heads {
        &self.heads
    }

    pub fn num_params(&self) -> u64 {
        self.store.num_elements()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let r = self.cfg.input_resolution();
        [3, r, r]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        output_shape(&self.cfg)
    }

    pub fn bind(&self, tape: &Tape<T>) -> Result<Bound<T>> {
        self.store.bind(tape)
    }

    fn check_input(&self, image: &Var<T>) -> Result<()> {
        let want = self.input_shape();
        if image.shape() != want {
            bail!(Input, "expected a {:?} image, got {:?}", want, image.shape());
        }
        Ok(())
    }

    /// Forward pass with parameters already bound to `tape`.
    pub fn forward_bound(&self, tape: &Tape<T>, p: &Bound<T>, image: &Var<T>) -> Result<ForwardOutput<T>> {
        self.check_input(image)?;
        let mut feats = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let _s = counter::scope(&branch_scope(b.number));
            let x = b.branch_input(tape, image)?;
            feats.push(b.patch_embed(tape, p, &x)?);
        }
        for block in 0..self.cfg.interactions.blocks() {
            for (b, f) in self.branches.iter().zip(feats.iter_mut()) {
                let _s = counter::scope(&branch_scope(b.number));
                *f = b.segment(tape, p, f, block)?;
            }
            if let Some(units) = self.interactions.get(block) {
                let _s = counter::scope(INTERACTIONS_SCOPE);
                feats = schedule_interactions(tape, p, units, &self.cfg.interactions, &feats)?;
                for (j, f) in feats.iter().enumerate() {
                    check_finite(&f.tokens, || format!("interaction {block}, branch {}", j + 1))?;
                }
            }
        }
        let output = self.output(tape, p, &feats)?;
        check_finite(&output, || "model output".to_string())?;
        Ok(ForwardOutput { output, features: feats })
    }

    fn output(&self, tape: &Tape<T>, p: &Bound<T>, feats: &[BranchFeature<T>]) -> Result<Var<T>> {
        let merged = match &self.merge {
            Some(m) => {
                let _s = counter::scope(MERGE_SCOPE);
                Some(branch_merge(tape, p, m, feats)?)
            }
            None => None,
        };
        let _s = counter::scope(HEADS_SCOPE);
        match (&self.heads, merged) {
            (Heads::None, Some(map)) => Ok(map),
            (Heads::Pooled(head), Some(map)) => head.apply(tape, p, &mean_pool(tape, &map)?),
            (Heads::PerBranch(heads), _) => {
                let mut logits = Vec::new();
                for (f, head) in feats.iter().zip(heads) {
                    let Some(head) = head else { continue };
                    let Some(cls) = f.cls(tape)? else {
                        bail!(Config, "per-branch heads need class tokens");
                    };
                    logits.push(head.apply(tape, p, &cls)?);
                }
                cls_logits_average(tape, &logits)
            }
            _ => bail!(Config, "{:?} mode needs a merge module", self.cfg.mode),
        }
    }

    pub fn forward(&self, tape: &Tape<T>, image: &Var<T>) -> Result<ForwardOutput<T>> {
        let p = self.bind(tape)?;
        self.forward_bound(tape, &p, image)
    }

    /// Forward pass without gradient tracking.
    pub fn infer(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let x = tape.constant(image.clone());
        Ok(self.forward(&tape, &x)?.output.into_value())
    }

    /// Every branch run as an isolated ViT on the same input.
    pub fn standalone_features(&self, tape: &Tape<T>, p: &Bound<T>, image: &Var<T>) -> Result<Vec<BranchFeature<T>>> {
        self.check_input(image)?;
        self.branches.iter().map(|b| b.run(tape, p, image)).collect()
    }

    /// Adds Normal(0, `std`) noise to every zero-initialized tensor (biases,
    /// gates, offset and logit projections) so that all gradient paths are
    /// live. Used by gradient checks.
    pub fn perturb_zero_init(&mut self, seed: u64, std: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, std).map_err(|e| crate::Error::Config(e.to_string()))?;
        let ids: Vec<_> = self.store.ids().filter(|&id| self.store.init(id) == Init::Zeros).collect();
        for id in ids {
            for v in self.store.get_mut(id)?.data_mut() {
                *v = *v + T::lit(dist.sample(&mut rng));
            }
        }
        Ok(())
    }
}

/// Deterministic random image in `[0, 1)` for smoke tests and the CLI.
pub fn synthetic_image<T: Real>(shape: [usize; 3], seed: u64) -> Tensor<T> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| T::lit(rng.gen::<f64>()))
}

/// Scalar training objective used by the gradient check.
pub fn check_loss(tape: &Tape<f64>, cfg: &PiipConfig, output: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    match cfg.mode {
        Mode::Dense => {
            use rand::Rng;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            let r = Tensor::from_fn(output.shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
            let prod = tape.mul(output, &tape.constant(r))?;
            Ok(tape.sum(&prod))
        }
        _ => tape.cross_entropy(output, (seed as usize) % cfg.num_classes),
    }
}

/// Finite-difference check of every parameter tensor of `cfg` in double
/// precision. Zero-initialized tensors are perturbed first so that gates,
/// offsets and sampling logits all carry gradient.
pub fn grad_check_model(cfg: &PiipConfig, seed: u64, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut model = Model::<f64>::build(cfg, seed)?;
    model.perturb_zero_init(seed.wrapping_add(1), 0.3)?;
    let image = synthetic_image::<f64>(model.input_shape(), seed.wrapping_add(2));
    let params = model.params().tensors()?;
    grad_check(
        &params,
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let x = tape.constant(image.clone());
            let out = model.forward_bound(tape, &p, &x)?.output;
            check_loss(tape, model.config(), &out, seed)
        },
        opts,
    )
}
