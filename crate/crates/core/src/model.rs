//! The promptable dual-branch segmenter.
//!
//! One shared image encoder `E` (a small patch-embedding transformer) and one
//! prompt encoder `P` feed two structurally identical, independently
//! initialized decoders `D1`/`D2` that produce per-pixel class probabilities
//! through progressive 2× upsampling. LoRA factors can be injected into every
//! attention block's query and value projections, after which the encoder
//! base weights are frozen and only the low-rank factors (plus `P`, `D1`,
//! `D2`) train.
//!
//! The model here is a desk-scale stand-in for a pretrained foundation
//! backbone: it exercises every architectural contract (prompt conditioning,
//! default dense embedding, dual decoders, LoRA) while staying small enough
//! to train on a CPU in minutes.

use crate::autodiff::{Graph, NodeId};
use crate::prompt_geometry::{
    center_prompt_set, foreground_components, random_prompt_set, Connectivity, PromptSet,
};
use ndarray::{Array2, Array3, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("wrong resolution: expected {expected:?}, got {got:?}")]
    WrongResolution {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown branch id {0} (valid: 1, 2)")]
    UnknownBranch(u8),
    #[error("prompt point ({row}, {col}) out of bounds for {h}×{w}")]
    PointOutOfBounds {
        row: usize,
        col: usize,
        h: usize,
        w: usize,
    },
    #[error("prompt class {class_id} out of range for {num_classes} classes")]
    InvalidPromptClass { class_id: usize, num_classes: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("LoRA already applied")]
    AlreadyAdapted,
    #[error("invalid LoRA rank {0}")]
    InvalidRank(usize),
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

/// Architecture of the built-in toy segmenter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub num_classes: usize,
    /// Input resolution (height, width) in pixels.
    pub resolution: (usize, usize),
    /// Patch side length; must be a power of two dividing both dimensions.
    /// Decoders run log2(patch) upsampling stages to get back to full size.
    pub patch: usize,
    /// Token embedding width; must be divisible by 4 for the sin-cos tables.
    pub d_model: usize,
    /// Number of transformer blocks in the encoder (at least 2).
    pub n_blocks: usize,
    /// Hidden width of each block's MLP.
    pub mlp_hidden: usize,
    /// Decoder channels halve per upsampling stage but never drop below this.
    pub decoder_channel_floor: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            resolution: (48, 48),
            patch: 8,
            d_model: 32,
            n_blocks: 2,
            mlp_hidden: 64,
            decoder_channel_floor: 8,
            seed: 0,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_classes < 2 {
            return err(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.patch < 2 || !self.patch.is_power_of_two() {
            return err(format!(
                "patch must be a power of two ≥ 2, got {}",
                self.patch
            ));
        }
        let (h, w) = self.resolution;
        if h == 0 || w == 0 || h % self.patch != 0 || w % self.patch != 0 {
            return err(format!(
                "resolution {:?} must be positive and divisible by patch {}",
                self.resolution, self.patch
            ));
        }
        if self.d_model % 4 != 0 || self.d_model == 0 {
            return err(format!(
                "d_model must be a positive multiple of 4, got {}",
                self.d_model
            ));
        }
        if self.n_blocks < 2 {
            return err(format!(
                "need at least 2 encoder blocks, got {}",
                self.n_blocks
            ));
        }
        if self.mlp_hidden == 0 || self.decoder_channel_floor == 0 {
            return err("mlp_hidden and decoder_channel_floor must be positive".into());
        }
        Ok(())
    }

    /// Token grid (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (
            self.resolution.0 / self.patch,
            self.resolution.1 / self.patch,
        )
    }

    pub fn n_tokens(&self) -> usize {
        let (gh, gw) = self.grid();
        gh * gw
    }

    /// Decoder channel widths after each upsampling stage.
    fn decoder_channels(&self) -> Vec<usize> {
        let stages = self.patch.trailing_zeros() as usize;
        let mut dims = Vec::with_capacity(stages);
        let mut d = self.d_model;
        for _ in 0..stages {
            d = (d / 2).max(self.decoder_channel_floor);
            dims.push(d);
        }
        dims
    }
}

/// Low-rank adaptation settings for the encoder's attention projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub scaling: f64,
    pub adapt_query: bool,
    pub adapt_value: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            scaling: 1.0,
            adapt_query: true,
            adapt_value: true,
        }
    }
}

/// One named parameter tensor.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: ArrayD<f64>,
    pub trainable: bool,
}

/// Ordered parameter registry. Registration order is fixed by construction,
/// which pins down optimizer update order and checkpoint layout.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn register(&mut self, name: &str, value: ArrayD<f64>, trainable: bool) -> usize {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter {name}"
        );
        let idx = self.params.len();
        self.params.push(Param {
            name: name.to_string(),
            value,
            trainable,
        });
        self.by_name.insert(name.to_string(), idx);
        idx
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.params[idx]
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Param {
        &mut self.params[idx]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.index_of(name).map(|i| self.get(i))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.index_of(name).map(|i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn set_trainable_by_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn trainable_count_by_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }
}

/// Standard normal via Box-Muller; uses two uniform draws per sample so the
/// stream stays reproducible across platforms.
fn randn<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>(); // (0, 1]
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn gaussian_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> ArrayD<f64> {
    Array2::from_shape_fn((rows, cols), |_| randn(rng) * std).into_dyn()
}

/// The segmenter: config, LoRA state, and every parameter tensor.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ToyModelConfig,
    lora: Option<LoraConfig>,
    store: ParamStore,
    /// Fixed sin-cos positional table over the token grid, (n_tokens, d).
    /// Deliberately not a parameter: prompt positions enter through constants
    /// so that every prompt-encoder *parameter* stays trainable.
    pe_table: Array2<f64>,
    /// Pixel-space center of each token, row-major.
    token_centers: Vec<(f64, f64)>,
}

fn sincos_table(cfg: &ToyModelConfig) -> Array2<f64> {
    let (gh, gw) = cfg.grid();
    let d = cfg.d_model;
    let quads = d / 4;
    let mut table = Array2::<f64>::zeros((gh * gw, d));
    for ty in 0..gh {
        for tx in 0..gw {
            let t = ty * gw + tx;
            for i in 0..quads {
                let omega = 1.0 / 10000f64.powf(i as f64 / quads as f64);
                table[[t, 4 * i]] = (ty as f64 * omega).sin();
                table[[t, 4 * i + 1]] = (ty as f64 * omega).cos();
                table[[t, 4 * i + 2]] = (tx as f64 * omega).sin();
                table[[t, 4 * i + 3]] = (tx as f64 * omega).cos();
            }
        }
    }
    table
}

/// Build the toy segmenter with freshly initialized weights. The two
/// decoders draw from disjoint portions of the seeded stream, so their
/// initializations differ.
pub fn build_toy_model(cfg: ToyModelConfig) -> Result<Model, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.d_model;
    let mut store = ParamStore::default();

    // Image encoder.
    let patch_dim = cfg.patch * cfg.patch;
    let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize| {
        gaussian_matrix(rng, rows, cols, 1.0 / (rows as f64).sqrt())
    };
    store.register(
        "encoder.patch_embed.w",
        xavier(&mut rng, patch_dim, d),
        true,
    );
    store.register(
        "encoder.patch_embed.b",
        ArrayD::zeros(ndarray::IxDyn(&[d])),
        true,
    );
    store.register(
        "encoder.pos_emb",
        gaussian_matrix(&mut rng, cfg.n_tokens(), d, 0.02),
        true,
    );
    for i in 0..cfg.n_blocks {
        let pre = format!("encoder.block{i}");
        store.register(
            &format!("{pre}.ln1.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[d]), 1.0),
            true,
        );
        store.register(
            &format!("{pre}.ln1.beta"),
            ArrayD::zeros(ndarray::IxDyn(&[d])),
            true,
        );
        for proj in ["q", "k", "v", "o"] {
            store.register(
                &format!("{pre}.attn.{proj}.w"),
                xavier(&mut rng, d, d),
                true,
            );
            store.register(
                &format!("{pre}.attn.{proj}.b"),
                ArrayD::zeros(ndarray::IxDyn(&[d])),
                true,
            );
        }
        store.register(
            &format!("{pre}.ln2.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[d]), 1.0),
            true,
        );
        store.register(
            &format!("{pre}.ln2.beta"),
            ArrayD::zeros(ndarray::IxDyn(&[d])),
            true,
        );
        store.register(
            &format!("{pre}.mlp.w1"),
            xavier(&mut rng, d, cfg.mlp_hidden),
            true,
        );
        store.register(
            &format!("{pre}.mlp.b1"),
            ArrayD::zeros(ndarray::IxDyn(&[cfg.mlp_hidden])),
            true,
        );
        store.register(
            &format!("{pre}.mlp.w2"),
            xavier(&mut rng, cfg.mlp_hidden, d),
            true,
        );
        store.register(
            &format!("{pre}.mlp.b2"),
            ArrayD::zeros(ndarray::IxDyn(&[d])),
            true,
        );
    }
    store.register(
        "encoder.ln_f.gamma",
        ArrayD::from_elem(ndarray::IxDyn(&[d]), 1.0),
        true,
    );
    store.register(
        "encoder.ln_f.beta",
        ArrayD::zeros(ndarray::IxDyn(&[d])),
        true,
    );

    // Prompt encoder: a learnable default dense embedding plus one learned
    // embedding per semantic class.
    store.register(
        "prompt.default_dense",
        gaussian_matrix(&mut rng, cfg.n_tokens(), d, 0.02),
        true,
    );
    store.register(
        "prompt.class_emb",
        gaussian_matrix(&mut rng, cfg.num_classes, d, 0.02),
        true,
    );

    // Two decoders, same structure, independent draws from the stream.
    for b in 1..=2u8 {
        let pre = format!("dec{b}");
        store.register(&format!("{pre}.fuse.w1"), xavier(&mut rng, d, d), true);
        store.register(
            &format!("{pre}.fuse.b1"),
            ArrayD::zeros(ndarray::IxDyn(&[d])),
            true,
        );
        store.register(&format!("{pre}.fuse.w2"), xavier(&mut rng, d, d), true);
        store.register(
            &format!("{pre}.fuse.b2"),
            ArrayD::zeros(ndarray::IxDyn(&[d])),
            true,
        );
        let mut d_in = d;
        for (s, &d_out) in cfg.decoder_channels().iter().enumerate() {
            store.register(
                &format!("{pre}.up{s}.w"),
                xavier(&mut rng, d_in, d_out),
                true,
            );
            store.register(
                &format!("{pre}.up{s}.b"),
                ArrayD::zeros(ndarray::IxDyn(&[d_out])),
                true,
            );
            d_in = d_out;
        }
        store.register(
            &format!("{pre}.head.w"),
            xavier(&mut rng, d_in, cfg.num_classes),
            true,
        );
        store.register(
            &format!("{pre}.head.b"),
            ArrayD::zeros(ndarray::IxDyn(&[cfg.num_classes])),
            true,
        );
    }

    let pe_table = sincos_table(&cfg);
    let (gh, gw) = cfg.grid();
    let mut token_centers = Vec::with_capacity(gh * gw);
    let half = (cfg.patch as f64 - 1.0) / 2.0;
    for ty in 0..gh {
        for tx in 0..gw {
            token_centers.push((
                ty as f64 * cfg.patch as f64 + half,
                tx as f64 * cfg.patch as f64 + half,
            ));
        }
    }
    Ok(Model {
        cfg,
        lora: None,
        store,
        pe_table,
        token_centers,
    })
}

/// Inject LoRA factors into every attention block's selected projections and
/// freeze the encoder base. `A` is a small Gaussian, `B` starts at zero, so
/// the adapted forward pass is exactly the base forward pass until training
/// moves `B`.
pub fn apply_lora(model: &mut Model, cfg: LoraConfig) -> Result<(), ModelError> {
    if model.lora.is_some() {
        return Err(ModelError::AlreadyAdapted);
    }
    if cfg.rank == 0 {
        return Err(ModelError::InvalidRank(cfg.rank));
    }
    let d = model.cfg.d_model;
    // Salted so LoRA init draws differ from the base model's stream.
    let mut rng = ChaCha8Rng::seed_from_u64(model.cfg.seed ^ 0x1f0a_5eed_c0de_77u64);
    for i in 0..model.cfg.n_blocks {
        for (proj, on) in [("q", cfg.adapt_query), ("v", cfg.adapt_value)] {
            if !on {
                continue;
            }
            model.store.register(
                &format!("lora.block{i}.{proj}.a"),
                gaussian_matrix(&mut rng, d, cfg.rank, 0.01),
                true,
            );
            model.store.register(
                &format!("lora.block{i}.{proj}.b"),
                ArrayD::zeros(ndarray::IxDyn(&[cfg.rank, d])),
                true,
            );
        }
    }
    model.store.set_trainable_by_prefix("encoder.", false);
    model.lora = Some(cfg);
    Ok(())
}

impl Model {
    pub fn config(&self) -> &ToyModelConfig {
        &self.cfg
    }

    pub fn lora_config(&self) -> Option<&LoraConfig> {
        self.lora.as_ref()
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.cfg.resolution
    }

    /// Flatten a `(n_pixels, C)` map node value into an `(H, W, C)` array.
    pub fn map_to_array(&self, g: &Graph, id: NodeId) -> Array3<f64> {
        let (h, w) = self.cfg.resolution;
        let v = g.value(id).clone();
        v.into_dimensionality::<ndarray::Ix2>()
            .expect("probability map node is not 2-D")
            .into_shape_with_order((h, w, self.cfg.num_classes))
            .expect("map size does not match resolution")
    }
}

/// Checkpoint serialization: one record per parameter.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub trainable: bool,
}

impl ParamRecord {
    fn from_param(p: &Param) -> Self {
        Self {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            data: p.value.iter().copied().collect(),
            trainable: p.trainable,
        }
    }
}

/// Versioned model checkpoint; LoRA factors are stored apart from the frozen
/// base weights so adapters can be swapped or audited independently.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ToyModelConfig,
    pub lora: Option<LoraConfig>,
    pub base_params: Vec<ParamRecord>,
    pub lora_params: Vec<ParamRecord>,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Model {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let (mut base, mut lora) = (Vec::new(), Vec::new());
        for p in self.store.iter() {
            let rec = ParamRecord::from_param(p);
            if p.name.starts_with("lora.") {
                lora.push(rec);
            } else {
                base.push(rec);
            }
        }
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            model: self.cfg.clone(),
            lora: self.lora.clone(),
            base_params: base,
            lora_params: lora,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model, ModelError> {
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(ModelError::CheckpointMismatch(format!(
                "unsupported format version {}",
                ck.format_version
            )));
        }
        let mut model = build_toy_model(ck.model.clone())?;
        if let Some(lora) = &ck.lora {
            apply_lora(&mut model, lora.clone())?;
        }
        let mut seen = 0usize;
        for rec in ck.base_params.iter().chain(ck.lora_params.iter()) {
            let Some(p) = model.store.by_name_mut(&rec.name) else {
                return Err(ModelError::CheckpointMismatch(format!(
                    "unknown parameter {}",
                    rec.name
                )));
            };
            if p.value.shape() != rec.shape.as_slice() {
                return Err(ModelError::CheckpointMismatch(format!(
                    "parameter {} shape {:?} vs checkpoint {:?}",
                    rec.name,
                    p.value.shape(),
                    rec.shape
                )));
            }
            p.value = ArrayD::from_shape_vec(ndarray::IxDyn(&rec.shape), rec.data.clone())
                .map_err(|e| ModelError::CheckpointMismatch(e.to_string()))?;
            p.trainable = rec.trainable;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(ModelError::CheckpointMismatch(format!(
                "checkpoint covers {seen} of {} parameters",
                model.store.len()
            )));
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
        let file = std::fs::File::open(path)?;
        let ck: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Model::from_checkpoint(&ck)
    }

    /// Bitwise parameter equality (names, values, flags).
    pub fn params_identical(&self, other: &Model) -> bool {
        if self.store.len() != other.store.len() {
            return false;
        }
        self.store.iter().zip(other.store.iter()).all(|(a, b)| {
            a.name == b.name
                && a.trainable == b.trainable
                && a.value.shape() == b.value.shape()
                && a.value
                    .iter()
                    .zip(b.value.iter())
                    .all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// How many prompted forward passes to run per branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPolicy {
    /// 0 or 1 center points per class.
    pub num_center: usize,
    /// Any number of independently drawn random points per class.
    pub num_random: usize,
    pub connectivity: Connectivity,
}

impl Default for PromptPolicy {
    fn default() -> Self {
        Self {
            num_center: 1,
            num_random: 1,
            connectivity: Connectivity::Eight,
        }
    }
}

/// All maps of one branch inside a forward graph.
#[derive(Clone, Debug)]
pub struct BranchMaps {
    pub branch_id: u8,
    /// Unprompted map under the default dense embedding.
    pub unprompted: NodeId,
    /// Center-prompted map, if the policy asks for one.
    pub center: Option<NodeId>,
    /// Random-prompted maps, one per draw.
    pub random: Vec<NodeId>,
    /// Elementwise mean of every prompted map; `None` when there are none.
    pub ensemble: Option<NodeId>,
    /// Classes prompted into this branch (from the other branch's argmax).
    pub prompt_classes: Vec<usize>,
    /// The other branch predicted no foreground: prompted maps fell back to
    /// the unprompted map and this branch must not be used for pseudo-supervision.
    pub degenerate: bool,
}

/// One forward graph over a model. Parameters bind lazily into the graph and
/// each parameter binds at most once, so gradients accumulate across every
/// use (shared encoder, repeated decoder calls) automatically.
pub struct Session<'m> {
    pub g: Graph,
    model: &'m Model,
    bound: Vec<Option<NodeId>>,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            g: Graph::new(),
            model,
            bound: vec![None; model.store.len()],
        }
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    fn p(&mut self, name: &str) -> NodeId {
        let idx = self
            .model
            .store
            .index_of(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(id) = self.bound[idx] {
            return id;
        }
        let param = self.model.store.get(idx);
        let id = if param.trainable {
            self.g.param(param.value.clone())
        } else {
            self.g.constant(param.value.clone())
        };
        self.bound[idx] = Some(id);
        id
    }

    fn linear(&mut self, x: NodeId, w: &str, b: &str) -> NodeId {
        let wn = self.p(w);
        let bn = self.p(b);
        let m = self.g.matmul(x, wn);
        self.g.add_row(m, bn)
    }

    /// Encode an image into `(n_tokens, d)` features. The image itself is a
    /// constant: gradients flow into parameters only.
    pub fn encode(&mut self, image: &Array2<f64>) -> Result<NodeId, ModelError> {
        let cfg = &self.model.cfg;
        if image.dim() != cfg.resolution {
            return Err(ModelError::WrongResolution {
                expected: cfg.resolution,
                got: image.dim(),
            });
        }
        debug_assert!(
            image.iter().all(|&v| (0.0..=1.0).contains(&v)),
            "image values should be normalized to [0, 1]"
        );
        // Patchify outside the graph; the image carries no gradient.
        let (gh, gw) = cfg.grid();
        let patch = cfg.patch;
        let mut patches = Array2::<f64>::zeros((gh * gw, patch * patch));
        for ty in 0..gh {
            for tx in 0..gw {
                let t = ty * gw + tx;
                for pr in 0..patch {
                    for pc in 0..patch {
                        patches[[t, pr * patch + pc]] = image[[ty * patch + pr, tx * patch + pc]];
                    }
                }
            }
        }
        let x0 = self.g.constant(patches.into_dyn());
        let mut x = self.linear(x0, "encoder.patch_embed.w", "encoder.patch_embed.b");
        let pos = self.p("encoder.pos_emb");
        x = self.g.add(x, pos);
        let scale = 1.0 / (cfg.d_model as f64).sqrt();
        for i in 0..cfg.n_blocks {
            let pre = format!("encoder.block{i}");
            let g1 = self.p(&format!("{pre}.ln1.gamma"));
            let b1 = self.p(&format!("{pre}.ln1.beta"));
            let h = self.g.layer_norm_rows(x, g1, b1, 1e-5);
            let q = self.attn_proj(h, i, "q");
            let k = self.linear(h, &format!("{pre}.attn.k.w"), &format!("{pre}.attn.k.b"));
            let v = self.attn_proj(h, i, "v");
            let scores = self.g.matmul_t(q, k, false, true);
            let scaled = self.g.scale(scores, scale);
            let attn = self.g.softmax_rows(scaled);
            let ctx = self.g.matmul(attn, v);
            let o = self.linear(ctx, &format!("{pre}.attn.o.w"), &format!("{pre}.attn.o.b"));
            x = self.g.add(x, o);
            let g2 = self.p(&format!("{pre}.ln2.gamma"));
            let b2 = self.p(&format!("{pre}.ln2.beta"));
            let h2 = self.g.layer_norm_rows(x, g2, b2, 1e-5);
            let m = self.linear(h2, &format!("{pre}.mlp.w1"), &format!("{pre}.mlp.b1"));
            let m = self.g.relu(m);
            let m = self.linear(m, &format!("{pre}.mlp.w2"), &format!("{pre}.mlp.b2"));
            x = self.g.add(x, m);
        }
        let gf = self.p("encoder.ln_f.gamma");
        let bf = self.p("encoder.ln_f.beta");
        Ok(self.g.layer_norm_rows(x, gf, bf, 1e-5))
    }

    /// Attention projection with the optional parallel LoRA path
    /// `x·W + b + scaling·(x·A)·B`.
    fn attn_proj(&mut self, x: NodeId, block: usize, proj: &str) -> NodeId {
        let base = self.linear(
            x,
            &format!("encoder.block{block}.attn.{proj}.w"),
            &format!("encoder.block{block}.attn.{proj}.b"),
        );
        let Some(lora) = &self.model.lora else {
            return base;
        };
        let adapted = match proj {
            "q" => lora.adapt_query,
            "v" => lora.adapt_value,
            _ => false,
        };
        if !adapted {
            return base;
        }
        let scaling = lora.scaling;
        let a = self.p(&format!("lora.block{block}.{proj}.a"));
        let b = self.p(&format!("lora.block{block}.{proj}.b"));
        let xa = self.g.matmul(x, a);
        let xab = self.g.matmul(xa, b);
        let delta = self.g.scale(xab, scaling);
        self.g.add(base, delta)
    }

    /// Encode a prompt set into a dense `(n_tokens, d)` embedding. With no
    /// prompts this is exactly the learnable default dense embedding. Each
    /// point adds `gaussian_splat(point) ⊗ (sincos(token) + class_emb)` on
    /// top, so nearby tokens feel the prompt most strongly.
    pub fn prompt_encode(&mut self, prompts: Option<&PromptSet>) -> Result<NodeId, ModelError> {
        let base = self.p("prompt.default_dense");
        let Some(set) = prompts else {
            return Ok(base);
        };
        if set.is_empty() {
            return Ok(base);
        }
        let cfg = &self.model.cfg;
        let (h, w) = cfg.resolution;
        let sigma = cfg.patch as f64;
        let mut out = base;
        for pt in &set.points {
            if pt.row >= h || pt.col >= w {
                return Err(ModelError::PointOutOfBounds {
                    row: pt.row,
                    col: pt.col,
                    h,
                    w,
                });
            }
            if pt.class_id == 0 || pt.class_id >= cfg.num_classes {
                return Err(ModelError::InvalidPromptClass {
                    class_id: pt.class_id,
                    num_classes: cfg.num_classes,
                });
            }
            // Token whose center is nearest the point carries its sin-cos code.
            let ty = (pt.row / cfg.patch).min(cfg.grid().0 - 1);
            let tx = (pt.col / cfg.patch).min(cfg.grid().1 - 1);
            let t = ty * cfg.grid().1 + tx;
            let pe_row = self.g.constant(
                self.model
                    .pe_table
                    .row(t)
                    .to_owned()
                    .insert_axis(ndarray::Axis(0))
                    .into_dyn(),
            );
            let class_rows = {
                let emb = self.p("prompt.class_emb");
                self.g.gather_rows(emb, &[pt.class_id])
            };
            let feature = self.g.add(pe_row, class_rows);
            let splat: Vec<f64> = self
                .model
                .token_centers
                .iter()
                .map(|&(cy, cx)| {
                    let dy = cy - pt.row as f64;
                    let dx = cx - pt.col as f64;
                    (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()
                })
                .collect();
            let splat = self.g.constant(
                Array2::from_shape_vec((splat.len(), 1), splat)
                    .unwrap()
                    .into_dyn(),
            );
            let contribution = self.g.matmul(splat, feature);
            out = self.g.add(out, contribution);
        }
        Ok(out)
    }

    /// Decode features + prompt embedding into a `(n_pixels, C)` probability
    /// map through progressive 2× upsampling.
    pub fn decode(
        &mut self,
        branch: u8,
        features: NodeId,
        prompt_emb: NodeId,
    ) -> Result<NodeId, ModelError> {
        if branch != 1 && branch != 2 {
            return Err(ModelError::UnknownBranch(branch));
        }
        let cfg = &self.model.cfg;
        let pre = format!("dec{branch}");
        let mut x = self.g.add(features, prompt_emb);
        let f = self.linear(x, &format!("{pre}.fuse.w1"), &format!("{pre}.fuse.b1"));
        let f = self.g.relu(f);
        let f = self.linear(f, &format!("{pre}.fuse.w2"), &format!("{pre}.fuse.b2"));
        x = self.g.add(x, f);
        let (mut gh, mut gw) = cfg.grid();
        for s in 0..cfg.decoder_channels().len() {
            x = self.g.upsample2x(x, gh, gw);
            gh *= 2;
            gw *= 2;
            x = self.linear(x, &format!("{pre}.up{s}.w"), &format!("{pre}.up{s}.b"));
            x = self.g.relu(x);
        }
        debug_assert_eq!((gh, gw), cfg.resolution);
        let logits = self.linear(x, &format!("{pre}.head.w"), &format!("{pre}.head.b"));
        Ok(self.g.softmax_rows(logits))
    }

    /// The full cross-prompting forward pass of one image: unprompted maps
    /// for both branches, prompts extracted from each branch's prediction and
    /// fed to the *other* branch, prompted maps and their ensembles.
    ///
    /// Prompt randomness is drawn in a fixed order (branch 2's prompts —
    /// derived from branch 1 — first), so a given RNG state reproduces the
    /// pass bitwise.
    pub fn forward_all<R: Rng>(
        &mut self,
        image: &Array2<f64>,
        policy: &PromptPolicy,
        rng: &mut R,
    ) -> Result<(BranchMaps, BranchMaps), ModelError> {
        if policy.num_center > 1 {
            return Err(ModelError::InvalidConfig(format!(
                "num_center must be 0 or 1, got {}",
                policy.num_center
            )));
        }
        let enc = self.encode(image)?;
        let default_emb = self.prompt_encode(None)?;
        let p1 = self.decode(1, enc, default_emb)?;
        let p2 = self.decode(2, enc, default_emb)?;

        let num_classes = self.model.cfg.num_classes;
        let comps_of = |s: &Session, p: NodeId| {
            let arr = s.model.map_to_array(&s.g, p);
            let classes = crate::prompt_geometry::argmax_map(arr.view());
            foreground_components(&classes.view(), num_classes, policy.connectivity)
        };
        let comps1 = comps_of(self, p1);
        let comps2 = comps_of(self, p2);

        // Branch 2 is prompted from branch 1's prediction, and vice versa.
        let b2 = self.prompted_branch(2, enc, p2, &comps1, Some(1), policy, rng)?;
        let b1 = self.prompted_branch(1, enc, p1, &comps2, Some(2), policy, rng)?;
        Ok((b1, b2))
    }

    /// Prompted maps for one branch given the source components extracted
    /// from the other branch's unprompted prediction.
    #[allow(clippy::too_many_arguments)]
    fn prompted_branch<R: Rng>(
        &mut self,
        branch: u8,
        enc: NodeId,
        unprompted: NodeId,
        source_components: &[(usize, crate::prompt_geometry::BinaryMask)],
        source_branch: Option<u8>,
        policy: &PromptPolicy,
        rng: &mut R,
    ) -> Result<BranchMaps, ModelError> {
        if source_components.is_empty() {
            // Degenerate: nothing to prompt with; every prompted slot falls
            // back to the unprompted map so downstream shapes stay stable.
            let center = (policy.num_center == 1).then_some(unprompted);
            let random = vec![unprompted; policy.num_random];
            let ensemble = (policy.num_center + policy.num_random > 0).then_some(unprompted);
            return Ok(BranchMaps {
                branch_id: branch,
                unprompted,
                center,
                random,
                ensemble,
                prompt_classes: Vec::new(),
                degenerate: true,
            });
        }
        let mut prompted = Vec::new();
        let center = if policy.num_center == 1 {
            let set = center_prompt_set(source_components, source_branch);
            let emb = self.prompt_encode(Some(&set))?;
            let map = self.decode(branch, enc, emb)?;
            prompted.push(map);
            Some(map)
        } else {
            None
        };
        let mut random = Vec::with_capacity(policy.num_random);
        for _ in 0..policy.num_random {
            let set = random_prompt_set(source_components, rng, source_branch);
            let emb = self.prompt_encode(Some(&set))?;
            let map = self.decode(branch, enc, emb)?;
            prompted.push(map);
            random.push(map);
        }
        let ensemble = (!prompted.is_empty()).then(|| self.g.mean_of(&prompted));
        Ok(BranchMaps {
            branch_id: branch,
            unprompted,
            center,
            random,
            ensemble,
            prompt_classes: source_components.iter().map(|(c, _)| *c).collect(),
            degenerate: false,
        })
    }

    /// Gradients of `loss` per parameter-store index (`None` where the loss
    /// does not touch the parameter).
    pub fn param_grads(&self, loss: NodeId) -> Vec<Option<ArrayD<f64>>> {
        let grads = self.g.backward(loss);
        self.bound
            .iter()
            .map(|slot| slot.and_then(|id| grads[id].clone()))
            .collect()
    }
}
