//! Architectural configuration, presets, and the on-disk config file.
//!
//! The config file is TOML with three tables, `model`, `train` and `io`.
//! Unknown keys are rejected and every numeric field is range-checked at
//! parse time. [`ConfigFile::to_canonical_string`] emits the canonical form:
//! all defaults spelled out, so parse → serialize → parse is a fixed point.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cost;
use crate::error::{bail, Error, Result};

fn default_patch() -> usize {
    16
}

fn default_mlp_ratio() -> f64 {
    4.0
}

/// One pyramid branch: a plain ViT at one input resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    #[serde(default = "default_patch")]
    pub patch: usize,
    /// Input side length; images are square.
    pub resolution: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: f64,
    #[serde(default)]
    pub use_cls_token: bool,
}

impl BranchConfig {
    pub fn new(depth: usize, dim: usize, heads: usize, resolution: usize) -> Self {
        Self {
            depth,
            dim,
            heads,
            patch: default_patch(),
            resolution,
            mlp_ratio: default_mlp_ratio(),
            use_cls_token: false,
        }
    }

    /// Patch-grid side length.
    pub fn grid(&self) -> usize {
        self.resolution / self.patch
    }

    /// Spatial (patch) token count.
    pub fn spatial_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token count including the class token.
    pub fn tokens(&self) -> usize {
        self.spatial_tokens() + usize::from(self.use_cls_token)
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Deformable,
    Regular,
}

/// Which branch pairs interact, and in which direction.
///
/// "Down" means information flows from Branch j to Branch j+1 (the
/// higher-resolution branch queries the larger model); "up" is the reverse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    AdjacentBidirectional,
    AdjacentDownOnly,
    AdjacentUpOnly,
    /// A single sequential sweep from the highest-resolution branch down to
    /// Branch 1, each step reading the already-updated neighbour.
    ChainOneWay,
    AllPairsBidirectional,
}

impl Direction {
    pub const ALL: [Direction; 5] = [
        Direction::AdjacentBidirectional,
        Direction::AdjacentDownOnly,
        Direction::AdjacentUpOnly,
        Direction::ChainOneWay,
        Direction::AllPairsBidirectional,
    ];

    pub fn adjacent_only(self) -> bool {
        !matches!(self, Direction::AllPairsBidirectional)
    }
}

/// Shape of the residual gates γ and τ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    Vector,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Merged feature map output.
    Dense,
    /// Merge with linear projections, then pooled LayerNorm + linear head.
    ClassifyPretrain,
    /// Per-branch class-token heads, logits averaged.
    ClassifyFinetune,
}

impl Mode {
    pub fn is_classification(self) -> bool {
        !matches!(self, Mode::Dense)
    }

    pub fn uses_merge(self) -> bool {
        !matches!(self, Mode::ClassifyFinetune)
    }
}

fn default_count() -> usize {
    12
}
fn default_attention() -> AttentionKind {
    AttentionKind::Deformable
}
fn default_direction() -> Direction {
    Direction::AdjacentBidirectional
}
fn default_sample_points() -> usize {
    4
}
fn default_ffn_ratio() -> f64 {
    0.25
}
fn default_gate() -> GateShape {
    GateShape::Vector
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionSpec {
    #[serde(default = "default_count")]
    pub count: usize,
    #[serde(default = "default_attention")]
    pub attention: AttentionKind,
    #[serde(default = "default_direction")]
    pub direction: Direction,
    #[serde(default = "default_sample_points")]
    pub sample_points: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: f64,
    #[serde(default = "default_gate")]
    pub gate: GateShape,
}

impl Default for InteractionSpec {
    fn default() -> Self {
        Self {
            count: default_count(),
            attention: default_attention(),
            direction: default_direction(),
            sample_points: default_sample_points(),
            ffn_ratio: default_ffn_ratio(),
            gate: default_gate(),
        }
    }
}

impl InteractionSpec {
    /// Number of blocks every branch is split into; one block when there are
    /// no interactions.
    pub fn blocks(&self) -> usize {
        self.count.max(1)
    }

    /// FFN hidden width for a unit whose query branch has `dim` channels.
    pub fn ffn_hidden(&self, dim: usize) -> usize {
        ((self.ffn_ratio * dim as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

fn default_classes() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiipConfig {
    #[serde(default)]
    pub name: String,
    /// Branch 1 (most parameters, smallest image) first.
    pub branches: Vec<BranchConfig>,
    #[serde(default)]
    pub interactions: InteractionSpec,
    pub mode: Mode,
    /// Branches that feed the merge; empty means all of them.
    #[serde(default)]
    pub merge_subset: Vec<bool>,
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    /// Ablation variants may break the parameter-inverted ordering.
    #[serde(default)]
    pub ablation: bool,
}

impl PiipConfig {
    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Largest input resolution, which the model's input image must have.
    pub fn input_resolution(&self) -> usize {
        self.branches.iter().map(|b| b.resolution).max().unwrap_or(0)
    }

    /// Channel width of the merged output (Branch 1's width).
    pub fn merge_dim(&self) -> usize {
        self.branches.first().map(|b| b.dim).unwrap_or(0)
    }

    /// Patch grid of the merged output (the last branch's grid).
    pub fn merge_grid(&self) -> usize {
        self.branches.last().map(|b| b.grid()).unwrap_or(0)
    }

    pub fn merge_mask(&self) -> Vec<bool> {
        if self.merge_subset.is_empty() {
            vec![true; self.branches.len()]
        } else {
            self.merge_subset.clone()
        }
    }

    /// Spells out every defaulted field.
    pub fn canonicalize(&mut self) {
        self.merge_subset = self.merge_mask();
    }

    pub fn with_merge_subset(mut self, mask: Vec<bool>) -> Self {
        self.merge_subset = mask;
        self
    }

    /// Checks every structural rule and reports all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut failed: Vec<String> = Vec::new();
        let m = self.branches.len();
        if m == 0 {
            failed.push("at least one branch is required".into());
        }
        for (j, b) in self.branches.iter().enumerate() {
            let id = j + 1;
            if b.depth == 0 || b.dim == 0 || b.heads == 0 || b.patch == 0 || b.resolution == 0 {
                failed.push(format!("branch {id}: depth, dim, heads, patch and resolution must be positive"));
                continue;
            }
            if b.dim % b.heads != 0 {
                failed.push(format!("branch {id}: dim {} not divisible by heads {}", b.dim, b.heads));
            }
            if b.resolution % b.patch != 0 {
                failed.push(format!(
                    "branch {id}: resolution {} not divisible by patch {}",
                    b.resolution, b.patch
                ));
            }
            if self.interactions.count > 0 && b.depth % self.interactions.count != 0 {
                failed.push(format!(
                    "branch {id}: depth {} not divisible by interaction count {}",
                    b.depth, self.interactions.count
                ));
            }
            if !(b.mlp_ratio > 0.0 && b.mlp_ratio <= 16.0) || b.mlp_hidden() == 0 {
                failed.push(format!("branch {id}: mlp_ratio {} out of range (0, 16]", b.mlp_ratio));
            }
            let wants_cls = self.mode == Mode::ClassifyFinetune;
            if b.use_cls_token != wants_cls {
                failed.push(format!(
                    "branch {id}: class token {} in {:?} mode",
                    if b.use_cls_token { "not allowed" } else { "required" },
                    self.mode
                ));
            }
        }
        if failed.is_empty() && m > 1 && !self.ablation {
            let params: Vec<u64> = self.branches.iter().map(cost::branch_params).collect();
            let inverted = self
                .branches
                .windows(2)
                .zip(params.windows(2))
                .all(|(b, p)| p[0] > p[1] && b[0].resolution < b[1].resolution);
            if !inverted {
                failed.push(format!(
                    "parameter-inverted ordering: branch parameters must strictly decrease \
                     ({params:?}) while resolutions strictly increase ({:?}); tag the config \
                     `ablation = true` to allow other pairings",
                    self.branches.iter().map(|b| b.resolution).collect::<Vec<_>>()
                ));
            }
        }
        let spec = &self.interactions;
        if spec.sample_points == 0 || spec.sample_points > 64 {
            failed.push(format!("interactions: sample_points {} out of range 1..=64", spec.sample_points));
        }
        if !(spec.ffn_ratio > 0.0 && spec.ffn_ratio <= 4.0) {
            failed.push(format!("interactions: ffn_ratio {} out of range (0, 4]", spec.ffn_ratio));
        }
        if !self.merge_subset.is_empty() {
            if self.merge_subset.len() != m {
                failed.push(format!(
                    "merge_subset has {} entries for {m} branches",
                    self.merge_subset.len()
                ));
            } else if !self.merge_subset.iter().any(|&b| b) {
                failed.push("merge_subset selects no branch".into());
            }
        }
        if self.mode.is_classification() && self.num_classes == 0 {
            failed.push("num_classes must be positive in classification modes".into());
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(failed.join("; ")))
        }
    }
}

impl fmt::Display for PiipConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |it: &mut dyn Iterator<Item = usize>| {
            it.map(|v| v.to_string()).collect::<Vec<_>>().join("/")
        };
        write!(
            f,
            "{} dims {} res {} ({:?}, N={}, {:?}, {:?})",
            if self.name.is_empty() { "piip" } else { &self.name },
            join(&mut self.branches.iter().map(|b| b.dim)),
            join(&mut self.branches.iter().map(|b| b.resolution)),
            self.mode,
            self.interactions.count,
            self.interactions.attention,
            self.interactions.direction,
        )
    }
}

/// ViT-T/S/B/L layer templates at a placeholder resolution.
pub mod templates {
    use super::BranchConfig;

    pub fn vit_t() -> BranchConfig {
        BranchConfig::new(12, 192, 3, 224)
    }
    pub fn vit_s() -> BranchConfig {
        BranchConfig::new(12, 384, 6, 224)
    }
    pub fn vit_b() -> BranchConfig {
        BranchConfig::new(12, 768, 12, 224)
    }
    pub fn vit_l() -> BranchConfig {
        BranchConfig::new(24, 1024, 16, 224)
    }
}

pub const PRESETS: [&str; 8] = [
    "piip-micro",
    "piip-micro-cls",
    "piip-b",
    "piip-tsb",
    "piip-sbl",
    "piip-tsbl",
    "vit-b",
    "vit-l",
];

fn at(mut b: BranchConfig, resolution: usize, cls: bool) -> BranchConfig {
    b.resolution = resolution;
    b.use_cls_token = cls;
    b
}

/// Built-in configurations.
///
/// * `piip-micro`: three tiny branches for oracle and gradient tests.
/// * `piip-micro-cls`: the same branches with a pooled 8-class head.
/// * `piip-b`: the from-scratch three-branch model (640/320/160 at
///   128/256/512), merged with linear projections and a pooled head.
/// * `piip-tsb`, `piip-sbl`: ViT-T/S/B and ViT-S/B/L classification variants
///   at 368/192/128 and 320/160/96.
/// * `piip-tsbl`: four-branch dense variant at 1568/1120/672/448.
/// * `vit-b`, `vit-l`: single-branch baselines at 224.
pub fn preset(name: &str) -> Result<PiipConfig> {
    let cfg = match name {
        "piip-micro" => PiipConfig {
            name: name.into(),
            branches: vec![
                BranchConfig { patch: 4, ..BranchConfig::new(2, 16, 2, 16) },
                BranchConfig { patch: 4, ..BranchConfig::new(2, 8, 2, 32) },
                BranchConfig { patch: 4, ..BranchConfig::new(2, 4, 1, 64) },
            ],
            interactions: InteractionSpec { count: 2, ..Default::default() },
            mode: Mode::Dense,
            merge_subset: vec![true; 3],
            num_classes: 8,
            ablation: false,
        },
        "piip-micro-cls" => PiipConfig {
            name: name.into(),
            mode: Mode::ClassifyPretrain,
            ..preset("piip-micro")?
        },
        "piip-b" => PiipConfig {
            name: name.into(),
            branches: vec![
                BranchConfig::new(12, 640, 8, 128),
                BranchConfig::new(12, 320, 4, 256),
                BranchConfig::new(12, 160, 2, 512),
            ],
            interactions: InteractionSpec::default(),
            mode: Mode::ClassifyPretrain,
            merge_subset: vec![true; 3],
            num_classes: 1000,
            ablation: false,
        },
        "piip-tsb" => finetune(
            name,
            vec![
                at(templates::vit_b(), 128, true),
                at(templates::vit_s(), 192, true),
                at(templates::vit_t(), 368, true),
            ],
        ),
        "piip-sbl" => finetune(
            name,
            vec![
                at(templates::vit_l(), 96, true),
                at(templates::vit_b(), 160, true),
                at(templates::vit_s(), 320, true),
            ],
        ),
        "piip-tsbl" => PiipConfig {
            name: name.into(),
            branches: vec![
                at(templates::vit_l(), 448, false),
                at(templates::vit_b(), 672, false),
                at(templates::vit_s(), 1120, false),
                at(templates::vit_t(), 1568, false),
            ],
            interactions: InteractionSpec::default(),
            mode: Mode::Dense,
            merge_subset: vec![true; 4],
            num_classes: 1000,
            ablation: false,
        },
        "vit-b" => baseline(name, templates::vit_b()),
        "vit-l" => baseline(name, templates::vit_l()),
        other => bail!(
            Config,
            "unknown preset `{other}` (known: {})",
            PRESETS.join(", ")
        ),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn finetune(name: &str, branches: Vec<BranchConfig>) -> PiipConfig {
    let m = branches.len();
    PiipConfig {
        name: name.into(),
        branches,
        interactions: InteractionSpec::default(),
        mode: Mode::ClassifyFinetune,
        merge_subset: vec![true; m],
        num_classes: 1000,
        ablation: false,
    }
}

fn baseline(name: &str, b: BranchConfig) -> PiipConfig {
    PiipConfig {
        name: name.into(),
        branches: vec![at(b, 224, true)],
        interactions: InteractionSpec { count: 0, ..Default::default() },
        mode: Mode::ClassifyFinetune,
        merge_subset: vec![true],
        num_classes: 1000,
        ablation: false,
    }
}

fn default_epochs() -> usize {
    30
}
fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    1.0
}
fn default_clip() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Global gradient-norm cap per step; 0 disables clipping.
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch: default_batch(),
            lr: default_lr(),
            clip_norm: default_clip(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IoConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub model: PiipConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub io: IoConfig,
}

impl ConfigFile {
    pub fn from_model(model: PiipConfig) -> Self {
        Self {
            model,
            train: TrainConfig::default(),
            io: IoConfig::default(),
        }
    }

    /// Parses and range-checks a config document; the result is canonical.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: ConfigFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.model.canonicalize();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.epochs > 100_000 {
            bail!(Config, "train.epochs {} out of range 1..=100000", t.epochs);
        }
        if t.batch == 0 || t.batch > 65_536 {
            bail!(Config, "train.batch {} out of range 1..=65536", t.batch);
        }
        if !(t.lr >= 0.0 && t.lr <= 100.0) {
            bail!(Config, "train.lr {} out of range [0, 100]", t.lr);
        }
        if !(t.clip_norm >= 0.0 && t.clip_norm <= 1e6) {
            bail!(Config, "train.clip_norm {} out of range [0, 1e6]", t.clip_norm);
        }
        Ok(())
    }

    pub fn to_canonical_string(&self) -> Result<String> {
        let mut c = self.clone();
        c.model.canonicalize();
        toml::to_string(&c).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "PIIP_THREADS";

/// Worker count requested through `PIIP_THREADS`, if set.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if (1..=1024).contains(&n) => Ok(Some(n)),
            _ => bail!(Config, "{THREADS_ENV}={v:?} is not a thread count in 1..=1024"),
        },
    }
}

/// Sizes the global worker pool from `PIIP_THREADS`. Only the first call in
/// a process has an effect.
pub fn init_thread_pool() -> Result<()> {
    if let Some(n) = threads_from_env()? {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}
