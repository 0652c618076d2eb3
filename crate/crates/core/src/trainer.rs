//! Semi-supervised training loop: batch composition, augmentation, LR
//! schedule, AdamW, the per-step cross-prompting procedure, ablation modes,
//! checkpointing and logging.
//!
//! Determinism contract: three named ChaCha streams (data order,
//! augmentation, prompt sampling) are part of the serializable state, so a
//! resumed run continues the exact trajectory of an uninterrupted one, and
//! changing augmentation randomness never perturbs prompt sampling.

use crate::data_io::ImageSample;
use crate::losses::{
    cross_prompting_loss, one_hot_map, pcr_loss, pseudo_supervision_loss, supervised_branch_loss,
    supervised_loss, total_loss, CrossSample, LossConfig, LossError, PcrSample, SupervisedSample,
};
use crate::metrics::{class_metrics, infer, MetricsError};
use crate::model::{Checkpoint, Model, ModelError, PromptPolicy, Session};
use crate::prompt_geometry::{
    argmax_map, center_prompt_set, foreground_components, random_prompt_set,
};
use ndarray::{Array2, ArrayD, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("labeled set is empty")]
    EmptyLabeled,
    #[error("unlabeled set is empty while unlabeled training is enabled")]
    EmptyUnlabeled,
    #[error("labeled sample {0} has no label map")]
    MissingLabel(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("non-finite loss at iteration {iteration}: l_s={l_s} l_cross={l_cross} l_c={l_c}")]
    NonFinite {
        iteration: u64,
        l_s: f64,
        l_cross: f64,
        l_c: f64,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("state parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Geometric augmentation: a uniform rotation plus independent coin-flip
/// horizontal/vertical mirrors.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            max_rotation_deg: 20.0,
            hflip: true,
            vflip: true,
        }
    }
}

/// Ablation switches. All off reproduces the full method.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(default)]
pub struct AblationFlags {
    /// Train on labeled data only; unsupervised terms report 0.
    pub disable_unlabeled: bool,
    /// Plain cross pseudo-supervision between the unprompted maps; prompted
    /// maps are never built and the consistency term reports 0.
    pub vanilla_cps: bool,
    /// Keep cross prompting but drop the consistency term.
    pub disable_pcr: bool,
    /// One decoder self-training: branch 1 prompts itself from its own
    /// prediction; branch 2 is never touched.
    pub single_branch: bool,
}

/// Where prompts on labeled samples come from.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LabeledPromptSource {
    /// Components of the ground-truth label map.
    #[default]
    GroundTruth,
    /// Components of the model's own unprompted ensemble prediction.
    Predicted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_iterations: u64,
    pub warmup_iterations: u64,
    pub max_lr: f64,
    /// lr at the final iteration as a fraction of `max_lr`; sets the decay
    /// constant.
    pub final_lr_ratio: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub augment: AugmentConfig,
    pub prompts: PromptPolicy,
    pub loss: LossConfig,
    pub labeled_prompts: LabeledPromptSource,
    pub ablation: AblationFlags,
    /// Validation cadence in iterations.
    pub eval_every: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iterations: 10_000,
            warmup_iterations: 5_000,
            max_lr: 1e-3,
            final_lr_ratio: 0.01,
            batch_size: 6,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            augment: AugmentConfig::default(),
            prompts: PromptPolicy::default(),
            loss: LossConfig::default(),
            labeled_prompts: LabeledPromptSource::default(),
            ablation: AblationFlags::default(),
            eval_every: 200,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: String| Err(TrainError::InvalidConfig(m));
        if self.warmup_iterations > self.total_iterations {
            return fail(format!(
                "warmup_iterations {} exceeds total_iterations {}",
                self.warmup_iterations, self.total_iterations
            ));
        }
        if self.total_iterations == 0 {
            return fail("total_iterations must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !self.ablation.disable_unlabeled && self.batch_size % 2 != 0 {
            return fail(format!(
                "batch_size {} must be even for the half-labeled composition",
                self.batch_size
            ));
        }
        if !(self.max_lr > 0.0) || !(self.final_lr_ratio > 0.0 && self.final_lr_ratio <= 1.0) {
            return fail(format!(
                "need max_lr > 0 and final_lr_ratio in (0, 1]; got {} and {}",
                self.max_lr, self.final_lr_ratio
            ));
        }
        if self.prompts.num_center > 1 {
            return fail(format!(
                "num_center must be 0 or 1, got {}",
                self.prompts.num_center
            ));
        }
        if self.prompts.num_center + self.prompts.num_random == 0
            && !self.ablation.vanilla_cps
            && !self.ablation.disable_unlabeled
        {
            return fail("prompt policy produces no prompted maps".into());
        }
        if self.ablation.vanilla_cps && self.ablation.single_branch {
            return fail("vanilla_cps and single_branch cannot be combined".into());
        }
        if self.augment.max_rotation_deg < 0.0 {
            return fail("max_rotation_deg must be non-negative".into());
        }
        self.loss.validate().map_err(TrainError::InvalidConfig)
    }

    fn labeled_per_batch(&self) -> usize {
        if self.ablation.disable_unlabeled {
            self.batch_size
        } else {
            self.batch_size / 2
        }
    }

    fn unlabeled_per_batch(&self) -> usize {
        if self.ablation.disable_unlabeled {
            0
        } else {
            self.batch_size - self.batch_size / 2
        }
    }
}

/// Linear warmup from 0 to `max_lr` over the warmup window, then exponential
/// decay reaching `final_lr_ratio·max_lr` at the last iteration; continuous
/// at the joint. The trainer queries this with 1-based step numbers so no
/// step runs at rate 0.
pub fn lr_schedule(iteration: u64, cfg: &TrainConfig) -> f64 {
    if cfg.warmup_iterations > 0 && iteration < cfg.warmup_iterations {
        return cfg.max_lr * iteration as f64 / cfg.warmup_iterations as f64;
    }
    let decay_span = cfg.total_iterations - cfg.warmup_iterations;
    if decay_span == 0 {
        return cfg.max_lr;
    }
    let gamma = cfg.final_lr_ratio.powf(1.0 / decay_span as f64);
    cfg.max_lr * gamma.powf((iteration - cfg.warmup_iterations) as f64)
}

/// Endless pass over indices, reshuffled at every wraparound.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Cycler {
    order: Vec<usize>,
    pos: usize,
}

impl Cycler {
    pub fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut c = Cycler {
            order: (0..n).collect(),
            pos: 0,
        };
        c.shuffle(rng);
        c
    }

    fn shuffle(&mut self, rng: &mut ChaCha8Rng) {
        for i in (1..self.order.len()).rev() {
            self.order.swap(i, rng.gen_range(0..=i));
        }
    }

    pub fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.shuffle(rng);
            self.pos = 0;
        }
        let idx = self.order[self.pos];
        self.pos += 1;
        idx
    }
}

/// Rotate by `angle_deg` around the image center, then mirror. Image
/// sampling is bilinear, label sampling nearest-neighbor; coordinates clamp
/// to the frame so neither interpolation invents values.
pub fn rotate_flip(
    image: &Array2<f64>,
    label: Option<&Array2<usize>>,
    angle_deg: f64,
    hflip: bool,
    vflip: bool,
) -> (Array2<f64>, Option<Array2<usize>>) {
    let (h, w) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let theta = angle_deg.to_radians();
    let (sin, cos) = (theta.sin(), theta.cos());
    // inverse transform: undo flips, then undo the rotation
    let source_of = |r: usize, c: usize| -> (f64, f64) {
        let y = if vflip { (h - 1 - r) as f64 } else { r as f64 };
        let x = if hflip { (w - 1 - c) as f64 } else { c as f64 };
        let (dy, dx) = (y - cy, x - cx);
        (cy + dy * cos + dx * sin, cx - dy * sin + dx * cos)
    };
    let out_image = Array2::from_shape_fn((h, w), |(r, c)| {
        let (fy, fx) = source_of(r, c);
        let fy = fy.clamp(0.0, (h - 1) as f64);
        let fx = fx.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (wy, wx) = (fy - y0 as f64, fx - x0 as f64);
        image[[y0, x0]] * (1.0 - wy) * (1.0 - wx)
            + image[[y0, x1]] * (1.0 - wy) * wx
            + image[[y1, x0]] * wy * (1.0 - wx)
            + image[[y1, x1]] * wy * wx
    });
    let out_label = label.map(|l| {
        Array2::from_shape_fn((h, w), |(r, c)| {
            let (fy, fx) = source_of(r, c);
            let y = fy.round().clamp(0.0, (h - 1) as f64) as usize;
            let x = fx.round().clamp(0.0, (w - 1) as f64) as usize;
            l[[y, x]]
        })
    });
    (out_image, out_label)
}

/// Draw one augmentation (angle, hflip, vflip — in that order) and apply it
/// to image and label alike.
pub fn augment_sample(
    sample: &ImageSample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> ImageSample {
    if !cfg.enabled {
        return sample.clone();
    }
    let angle = if cfg.max_rotation_deg > 0.0 {
        rng.gen_range(-cfg.max_rotation_deg..=cfg.max_rotation_deg)
    } else {
        0.0
    };
    let hflip = cfg.hflip && rng.gen_bool(0.5);
    let vflip = cfg.vflip && rng.gen_bool(0.5);
    let (image, label) = rotate_flip(&sample.image, sample.label.as_ref(), angle, hflip, vflip);
    ImageSample {
        id: sample.id.clone(),
        image,
        label,
        spacing: sample.spacing,
    }
}

/// AdamW with decoupled weight decay. Moments live per parameter-store slot;
/// frozen parameters and parameters outside the step's graph are untouched.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamW {
    pub step: u64,
    m: Vec<Option<ArrayD<f64>>>,
    v: Vec<Option<ArrayD<f64>>>,
}

impl AdamW {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            m: vec![None; n_params],
            v: vec![None; n_params],
        }
    }

    pub fn apply(
        &mut self,
        model: &mut Model,
        grads: &[Option<ArrayD<f64>>],
        lr: f64,
        cfg: &TrainConfig,
    ) {
        let store = model.params_mut();
        assert_eq!(
            self.m.len(),
            store.len(),
            "optimizer state mismatches parameter store"
        );
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for idx in 0..store.len() {
            let Some(grad) = &grads[idx] else { continue };
            let param = store.get_mut(idx);
            if !param.trainable {
                continue;
            }
            let m = self.m[idx].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            Zip::from(&mut *m)
                .and(grad)
                .for_each(|m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
            let v = self.v[idx].get_or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            Zip::from(&mut *v)
                .and(grad)
                .for_each(|v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            let (m, v) = (self.m[idx].as_ref().unwrap(), self.v[idx].as_ref().unwrap());
            Zip::from(&mut param.value)
                .and(m)
                .and(v)
                .for_each(|p, &m, &v| {
                    let update = (m / bc1) / ((v / bc2).sqrt() + cfg.adam_eps);
                    *p -= lr * (update + cfg.weight_decay * *p);
                });
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct BestVal {
    pub iteration: u64,
    pub dsc: f64,
}

/// Everything needed to continue a run bit-for-bit (model weights live in
/// the model checkpoint alongside).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub opt: AdamW,
    pub data_rng: ChaCha8Rng,
    pub aug_rng: ChaCha8Rng,
    pub prompt_rng: ChaCha8Rng,
    pub labeled_cycle: Cycler,
    pub unlabeled_cycle: Cycler,
    pub best_val: Option<BestVal>,
}

// distinct stream tags so the three randomness sources never collide
const DATA_STREAM: u64 = 0x5eed_0000_0da7_a001;
const AUG_STREAM: u64 = 0x5eed_0000_a060_0002;
const PROMPT_STREAM: u64 = 0x5eed_0000_9600_0003;

impl TrainState {
    pub fn new(cfg: &TrainConfig, model: &Model, n_labeled: usize, n_unlabeled: usize) -> Self {
        let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
        let aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ AUG_STREAM);
        let prompt_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ PROMPT_STREAM);
        let labeled_cycle = Cycler::new(n_labeled, &mut data_rng);
        let unlabeled_cycle = Cycler::new(n_unlabeled, &mut data_rng);
        TrainState {
            iteration: 0,
            opt: AdamW::new(model.params().len()),
            data_rng,
            aug_rng,
            prompt_rng,
            labeled_cycle,
            unlabeled_cycle,
            best_val: None,
        }
    }
}

/// Training inputs, already preprocessed to the model resolution.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub labeled: Vec<ImageSample>,
    pub unlabeled: Vec<ImageSample>,
    pub val: Vec<ImageSample>,
}

impl TrainData {
    fn check(&self, cfg: &TrainConfig) -> Result<(), TrainError> {
        if self.labeled.is_empty() {
            return Err(TrainError::EmptyLabeled);
        }
        if let Some(s) = self.labeled.iter().find(|s| s.label.is_none()) {
            return Err(TrainError::MissingLabel(s.id.clone()));
        }
        if !cfg.ablation.disable_unlabeled && self.unlabeled.is_empty() {
            return Err(TrainError::EmptyUnlabeled);
        }
        Ok(())
    }
}

/// Indices of the next batch: ⌊B/2⌋ labeled + ⌈B/2⌉ unlabeled (all labeled
/// under `disable_unlabeled`), drawn from independently cycling streams.
pub fn compose_batch(state: &mut TrainState, cfg: &TrainConfig) -> (Vec<usize>, Vec<usize>) {
    let labeled: Vec<usize> = (0..cfg.labeled_per_batch())
        .map(|_| state.labeled_cycle.next(&mut state.data_rng))
        .collect();
    let unlabeled: Vec<usize> = (0..cfg.unlabeled_per_batch())
        .map(|_| state.unlabeled_cycle.next(&mut state.data_rng))
        .collect();
    (labeled, unlabeled)
}

/// Loss breakdown and tally of one optimization step.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub lr: f64,
    pub l_s: f64,
    pub l_cross: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
}

fn scalar(g: &crate::autodiff::Graph, id: crate::autodiff::NodeId) -> f64 {
    *g.value(id).iter().next().expect("scalar node")
}

/// One optimization step: compose a batch, build the full loss graph,
/// backpropagate, and apply AdamW at the scheduled rate.
pub fn train_step(
    model: &mut Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<StepStats, TrainError> {
    data.check(cfg)?;
    let (li, ui) = compose_batch(state, cfg);
    assert_eq!(li.len(), cfg.labeled_per_batch(), "labeled tally broke");
    assert_eq!(ui.len(), cfg.unlabeled_per_batch(), "unlabeled tally broke");
    let labeled: Vec<ImageSample> = li
        .iter()
        .map(|&i| augment_sample(&data.labeled[i], &cfg.augment, &mut state.aug_rng))
        .collect();
    let unlabeled: Vec<ImageSample> = ui
        .iter()
        .map(|&i| augment_sample(&data.unlabeled[i], &cfg.augment, &mut state.aug_rng))
        .collect();

    let lr = lr_schedule(state.iteration + 1, cfg);
    let num_classes = model.num_classes();
    let conn = cfg.prompts.connectivity;

    let mut session = Session::new(model);

    // ---- supervised part ----
    let l_s = {
        let mut sup_samples = Vec::new();
        let mut single_terms = Vec::new();
        for s in &labeled {
            let label = s.label.as_ref().expect("checked above");
            let target_arr = one_hot_map(label.view(), num_classes);
            let target = session.g.constant(target_arr.into_dyn());
            let enc = session.encode(&s.image)?;
            let default_emb = session.prompt_encode(None)?;
            let u1 = session.decode(1, enc, default_emb)?;
            let u2 = if cfg.ablation.single_branch {
                u1 // unused below
            } else {
                session.decode(2, enc, default_emb)?
            };

            // prompt source: ground truth by default, or the model's own
            // unprompted prediction
            let comps = if cfg.ablation.vanilla_cps {
                Vec::new() // prompted maps unused in this ablation
            } else {
                match cfg.labeled_prompts {
                    LabeledPromptSource::GroundTruth => {
                        foreground_components(&label.view(), num_classes, conn)
                    }
                    LabeledPromptSource::Predicted => {
                        let probs = if cfg.ablation.single_branch {
                            session.model().map_to_array(&session.g, u1)
                        } else {
                            let sum = session.g.add(u1, u2);
                            let ens = session.g.scale(sum, 0.5);
                            session.model().map_to_array(&session.g, ens)
                        };
                        let classes = argmax_map(probs.view());
                        foreground_components(&classes.view(), num_classes, conn)
                    }
                }
            };
            let classes: Vec<usize> = comps.iter().map(|(c, _)| *c).collect();
            let mut prompt_sets = Vec::new();
            if !comps.is_empty() {
                if cfg.prompts.num_center == 1 {
                    prompt_sets.push(center_prompt_set(&comps, None));
                }
                for _ in 0..cfg.prompts.num_random {
                    prompt_sets.push(random_prompt_set(&comps, &mut state.prompt_rng, None));
                }
            }
            let mut prompted1 = Vec::new();
            let mut prompted2 = Vec::new();
            for set in &prompt_sets {
                let emb = session.prompt_encode(Some(set))?;
                prompted1.push(session.decode(1, enc, emb)?);
                if !cfg.ablation.single_branch {
                    prompted2.push(session.decode(2, enc, emb)?);
                }
            }
            if cfg.ablation.single_branch {
                let term = supervised_branch_loss(
                    &mut session.g,
                    u1,
                    &prompted1,
                    &classes,
                    target,
                    &cfg.loss,
                )?;
                single_terms.push(term);
            } else {
                sup_samples.push(SupervisedSample {
                    unprompted: [u1, u2],
                    prompted: [prompted1, prompted2],
                    prompt_classes: [classes.clone(), classes],
                    target,
                });
            }
        }
        if cfg.ablation.single_branch {
            if single_terms.is_empty() {
                session.g.scalar_const(0.0)
            } else {
                session.g.mean_of(&single_terms)
            }
        } else {
            supervised_loss(&mut session.g, &sup_samples, &cfg.loss)?
        }
    };

    // ---- unsupervised part ----
    let (l_cross, l_c) = if cfg.ablation.disable_unlabeled || unlabeled.is_empty() {
        let z1 = session.g.scalar_const(0.0);
        let z2 = session.g.scalar_const(0.0);
        (z1, z2)
    } else if cfg.ablation.vanilla_cps {
        // unprompted maps cross-supervise each other directly
        let mut terms = Vec::new();
        for s in &unlabeled {
            let enc = session.encode(&s.image)?;
            let default_emb = session.prompt_encode(None)?;
            let p1 = session.decode(1, enc, default_emb)?;
            let p2 = session.decode(2, enc, default_emb)?;
            let d12 = pseudo_supervision_loss(&mut session.g, p1, p2, &[], &cfg.loss)?;
            let d21 = pseudo_supervision_loss(&mut session.g, p2, p1, &[], &cfg.loss)?;
            terms.push(session.g.add(d12, d21));
        }
        let cross = session.g.mean_of(&terms);
        let zero = session.g.scalar_const(0.0);
        (cross, zero)
    } else if cfg.ablation.single_branch {
        // the single decoder prompts itself from its own prediction
        let mut cross_terms = Vec::new();
        let mut pcr_terms = Vec::new();
        for s in &unlabeled {
            let enc = session.encode(&s.image)?;
            let default_emb = session.prompt_encode(None)?;
            let p1 = session.decode(1, enc, default_emb)?;
            let probs = session.model().map_to_array(&session.g, p1);
            let classes_map = argmax_map(probs.view());
            let comps = foreground_components(&classes_map.view(), num_classes, conn);
            if comps.is_empty() {
                continue;
            }
            let classes: Vec<usize> = comps.iter().map(|(c, _)| *c).collect();
            let mut prompted = Vec::new();
            let mut random = Vec::new();
            if cfg.prompts.num_center == 1 {
                let set = center_prompt_set(&comps, Some(1));
                let emb = session.prompt_encode(Some(&set))?;
                prompted.push(session.decode(1, enc, emb)?);
            }
            for _ in 0..cfg.prompts.num_random {
                let set = random_prompt_set(&comps, &mut state.prompt_rng, Some(1));
                let emb = session.prompt_encode(Some(&set))?;
                let map = session.decode(1, enc, emb)?;
                prompted.push(map);
                random.push(map);
            }
            let ens = session.g.mean_of(&prompted);
            cross_terms.push(pseudo_supervision_loss(
                &mut session.g,
                p1,
                ens,
                &classes,
                &cfg.loss,
            )?);
            if !cfg.ablation.disable_pcr && !random.is_empty() {
                let mut maps = Vec::new();
                for &r in &random {
                    maps.push(pseudo_supervision_loss(
                        &mut session.g,
                        r,
                        ens,
                        &classes,
                        &cfg.loss,
                    )?);
                }
                pcr_terms.push(session.g.mean_of(&maps));
            }
        }
        let cross = if cross_terms.is_empty() {
            session.g.scalar_const(0.0)
        } else {
            session.g.mean_of(&cross_terms)
        };
        let pcr = if pcr_terms.is_empty() {
            session.g.scalar_const(0.0)
        } else {
            session.g.mean_of(&pcr_terms)
        };
        (cross, pcr)
    } else {
        // full cross-prompting procedure
        let mut cross_samples = Vec::new();
        let mut pcr_samples = Vec::new();
        for s in &unlabeled {
            let (b1, b2) = session.forward_all(&s.image, &cfg.prompts, &mut state.prompt_rng)?;
            let degenerate = b1.degenerate || b2.degenerate;
            let ens1 = b1.ensemble.unwrap_or(b1.unprompted);
            let ens2 = b2.ensemble.unwrap_or(b2.unprompted);
            cross_samples.push(CrossSample {
                p1: b1.unprompted,
                p2: b2.unprompted,
                ens1,
                ens2,
                classes_into_2: b2.prompt_classes.clone(),
                classes_into_1: b1.prompt_classes.clone(),
                degenerate,
            });
            pcr_samples.push(PcrSample {
                rand: [b1.random, b2.random],
                ens: [ens1, ens2],
                prompt_classes: [b1.prompt_classes, b2.prompt_classes],
                degenerate,
            });
        }
        let cross = cross_prompting_loss(&mut session.g, &cross_samples, &cfg.loss)?;
        let pcr = if cfg.ablation.disable_pcr {
            session.g.scalar_const(0.0)
        } else {
            pcr_loss(&mut session.g, &pcr_samples, &cfg.loss)?
        };
        (cross, pcr)
    };

    let (vs, vx, vc) = (
        scalar(&session.g, l_s),
        scalar(&session.g, l_cross),
        scalar(&session.g, l_c),
    );
    if !(vs.is_finite() && vx.is_finite() && vc.is_finite()) {
        return Err(TrainError::NonFinite {
            iteration: state.iteration,
            l_s: vs,
            l_cross: vx,
            l_c: vc,
        });
    }
    let l_total = total_loss(&mut session.g, l_s, l_cross, l_c, &cfg.loss)?;
    let vt = scalar(&session.g, l_total);
    let grads = session.param_grads(l_total);
    drop(session);
    state.opt.apply(model, &grads, lr, cfg);
    state.iteration += 1;
    Ok(StepStats {
        iteration: state.iteration,
        lr,
        l_s: vs,
        l_cross: vx,
        l_c: vc,
        l_total: vt,
        n_labeled: labeled.len(),
        n_unlabeled: unlabeled.len(),
    })
}

/// Mean over val samples of the mean per-class DSC of unprompted ensemble
/// inference.
pub fn validation_dsc(model: &Model, val: &[ImageSample]) -> Result<f64, TrainError> {
    let mut per_sample = Vec::new();
    for s in val {
        let gt = s
            .label
            .as_ref()
            .ok_or_else(|| TrainError::MissingLabel(s.id.clone()))?;
        let pred = infer(model, &s.image)?;
        let rows = class_metrics(&pred, gt, model.num_classes(), s.spacing)?;
        per_sample.push(rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len() as f64);
    }
    Ok(per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64)
}

/// One line of the structured training log.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct LogRecord {
    pub iteration: u64,
    pub lr: f64,
    pub l_s: f64,
    pub l_cross: f64,
    pub l_c: f64,
    pub l_total: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub val_dsc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub records: Vec<LogRecord>,
    pub best_val: Option<BestVal>,
    pub final_checkpoint: Option<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
}

/// Train from the state's current iteration to `total_iterations`,
/// validating every `eval_every` steps and keeping the best-validation
/// checkpoint. When `out_dir` is given, writes `checkpoints/{best,final}.json`
/// and appends newline-delimited records to `logs/train.jsonl`.
pub fn run_training(
    model: &mut Model,
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, TrainError> {
    cfg.validate()?;
    data.check(cfg)?;
    let mut art = RunArtifacts {
        records: Vec::new(),
        best_val: state.best_val,
        final_checkpoint: None,
        best_checkpoint: None,
        log_path: None,
    };
    let mut log_file = match out_dir {
        None => None,
        Some(dir) => {
            let logs = dir.join("logs");
            let ckpts = dir.join("checkpoints");
            std::fs::create_dir_all(&logs).map_err(|e| io_err(&logs, e))?;
            std::fs::create_dir_all(&ckpts).map_err(|e| io_err(&ckpts, e))?;
            let path = logs.join("train.jsonl");
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(state.iteration > 0)
                .truncate(state.iteration == 0)
                .write(true)
                .open(&path)
                .map_err(|e| io_err(&path, e))?;
            art.log_path = Some(path);
            Some(file)
        }
    };

    while state.iteration < cfg.total_iterations {
        let stats = train_step(model, state, cfg, data)?;
        let due = stats.iteration % cfg.eval_every == 0 || stats.iteration == cfg.total_iterations;
        let val_dsc = if due && !data.val.is_empty() {
            let dsc = validation_dsc(model, &data.val)?;
            let improved = state.best_val.map_or(true, |b| dsc > b.dsc);
            if improved {
                state.best_val = Some(BestVal {
                    iteration: stats.iteration,
                    dsc,
                });
                if let Some(dir) = out_dir {
                    let path = dir.join("checkpoints").join("best.json");
                    model.save_checkpoint(&path)?;
                    art.best_checkpoint = Some(path);
                }
            }
            Some(dsc)
        } else {
            None
        };
        let record = LogRecord {
            iteration: stats.iteration,
            lr: stats.lr,
            l_s: stats.l_s,
            l_cross: stats.l_cross,
            l_c: stats.l_c,
            l_total: stats.l_total,
            n_labeled: stats.n_labeled,
            n_unlabeled: stats.n_unlabeled,
            val_dsc,
        };
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(f, "{line}").map_err(|e| io_err(art.log_path.as_ref().unwrap(), e))?;
        }
        art.records.push(record);
    }
    art.best_val = state.best_val;
    if let Some(dir) = out_dir {
        let path = dir.join("checkpoints").join("final.json");
        model.save_checkpoint(&path)?;
        art.final_checkpoint = Some(path);
    }
    Ok(art)
}

/// Serializable pause point: configuration, model weights, and loop state.
#[derive(Serialize, Deserialize)]
pub struct ResumeBundle {
    pub config: TrainConfig,
    pub checkpoint: Checkpoint,
    pub state: TrainState,
}

pub fn save_resume(
    path: &Path,
    cfg: &TrainConfig,
    model: &Model,
    state: &TrainState,
) -> Result<(), TrainError> {
    let bundle = ResumeBundle {
        config: cfg.clone(),
        checkpoint: model.to_checkpoint(),
        state: state.clone(),
    };
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), &bundle)?;
    Ok(())
}

pub fn load_resume(path: &Path) -> Result<(TrainConfig, Model, TrainState), TrainError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let bundle: ResumeBundle = serde_json::from_reader(std::io::BufReader::new(file))?;
    let model = Model::from_checkpoint(&bundle.checkpoint)?;
    Ok((bundle.config, model, bundle.state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::synthesize_sample;
    use crate::model::{apply_lora, build_toy_model, LoraConfig, ToyModelConfig};

    fn tiny_model_cfg() -> ToyModelConfig {
        ToyModelConfig {
            num_classes: 2,
            resolution: (16, 16),
            patch: 4,
            d_model: 16,
            n_blocks: 2,
            mlp_hidden: 32,
            decoder_channel_floor: 8,
            seed: 3,
        }
    }

    fn tiny_data(n_labeled: usize, n_unlabeled: usize, n_val: usize) -> TrainData {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let gen = |rng: &mut ChaCha8Rng, id: &str| synthesize_sample(rng, (16, 16), 2, id);
        TrainData {
            labeled: (0..n_labeled)
                .map(|i| gen(&mut rng, &format!("l{i}")))
                .collect(),
            unlabeled: (0..n_unlabeled)
                .map(|i| gen(&mut rng, &format!("u{i}")))
                .collect(),
            val: (0..n_val)
                .map(|i| gen(&mut rng, &format!("v{i}")))
                .collect(),
        }
    }

    fn quick_cfg(total: u64) -> TrainConfig {
        TrainConfig {
            total_iterations: total,
            warmup_iterations: total / 2,
            max_lr: 5e-3,
            batch_size: 2,
            eval_every: total,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule_matches_the_stated_points() {
        let cfg = TrainConfig::default(); // 10000 total, 5000 warmup, 1e-3 max
        assert_eq!(lr_schedule(0, &cfg), 0.0);
        assert_eq!(lr_schedule(2500, &cfg), 0.0005);
        assert_eq!(lr_schedule(5000, &cfg), 0.001);
        let final_lr = lr_schedule(10_000, &cfg);
        assert!((final_lr - 1e-5).abs() < 1e-12, "final lr {final_lr}");
        // strictly increasing through warmup, strictly decreasing after
        for t in 0..5000u64 {
            assert!(lr_schedule(t, &cfg) < lr_schedule(t + 1, &cfg));
        }
        for t in 5000..10_000u64 {
            assert!(lr_schedule(t, &cfg) > lr_schedule(t + 1, &cfg));
        }
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let mut cfg = TrainConfig {
            warmup_iterations: 11,
            total_iterations: 10,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err(), "warmup beyond total must fail");
        cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        assert!(
            cfg.validate().is_err(),
            "odd batch with unlabeled data must fail"
        );
        cfg = TrainConfig {
            batch_size: 5,
            ..TrainConfig::default()
        };
        cfg.ablation.disable_unlabeled = true;
        assert!(
            cfg.validate().is_ok(),
            "odd batch is fine when fully labeled"
        );
        cfg = TrainConfig::default();
        cfg.prompts.num_center = 2;
        assert!(
            cfg.validate().is_err(),
            "more than one center point is undefined"
        );
        cfg = TrainConfig::default();
        cfg.ablation.vanilla_cps = true;
        cfg.ablation.single_branch = true;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn batch_composition_counts() {
        let model = build_toy_model(tiny_model_cfg()).unwrap();
        let cfg = TrainConfig {
            batch_size: 6,
            ..TrainConfig::default()
        };
        let mut state = TrainState::new(&cfg, &model, 4, 9);
        let (l, u) = compose_batch(&mut state, &cfg);
        assert_eq!((l.len(), u.len()), (3, 3));
        assert!(l.iter().all(|&i| i < 4) && u.iter().all(|&i| i < 9));

        let mut only = cfg.clone();
        only.ablation.disable_unlabeled = true;
        let mut state = TrainState::new(&only, &model, 4, 0);
        let (l, u) = compose_batch(&mut state, &only);
        assert_eq!((l.len(), u.len()), (6, 0));
    }

    #[test]
    fn cycling_reshuffles_and_covers_every_index() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = Cycler::new(5, &mut rng);
        let first: Vec<usize> = (0..5).map(|_| c.next(&mut rng)).collect();
        let second: Vec<usize> = (0..5).map(|_| c.next(&mut rng)).collect();
        let mut sf = first.clone();
        let mut ss = second.clone();
        sf.sort_unstable();
        ss.sort_unstable();
        assert_eq!(sf, vec![0, 1, 2, 3, 4], "each pass must cover the set");
        assert_eq!(ss, vec![0, 1, 2, 3, 4]);
        // tiny labeled sets repeat within a batch-sized window
        let mut small = Cycler::new(2, &mut rng);
        let draws: Vec<usize> = (0..3).map(|_| small.next(&mut rng)).collect();
        assert!(draws.iter().all(|&i| i < 2));
    }

    #[test]
    fn identity_augmentation_is_exact() {
        let data = tiny_data(1, 0, 0);
        let s = &data.labeled[0];
        let (img, lbl) = rotate_flip(&s.image, s.label.as_ref(), 0.0, false, false);
        assert_eq!(img, s.image, "zero-angle rotation must copy exactly");
        assert_eq!(lbl.as_ref(), s.label.as_ref());
    }

    #[test]
    fn flips_are_involutions() {
        let data = tiny_data(1, 0, 0);
        let s = &data.labeled[0];
        let (once, _) = rotate_flip(&s.image, None, 0.0, true, false);
        let (twice, _) = rotate_flip(&once, None, 0.0, true, false);
        assert_eq!(twice, s.image);
        let (once, _) = rotate_flip(&s.image, None, 0.0, false, true);
        let (twice, _) = rotate_flip(&once, None, 0.0, false, true);
        assert_eq!(twice, s.image);
    }

    #[test]
    fn augmented_labels_never_invent_classes() {
        let data = tiny_data(1, 0, 0);
        let s = &data.labeled[0];
        let original: std::collections::HashSet<usize> =
            s.label.as_ref().unwrap().iter().copied().collect();
        let cfg = AugmentConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let out = augment_sample(s, &cfg, &mut rng);
            for v in out.label.as_ref().unwrap().iter() {
                assert!(original.contains(v), "augmentation invented class {v}");
            }
            assert!(out.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn two_identical_runs_produce_identical_trajectories() {
        let data = tiny_data(2, 3, 2);
        let cfg = quick_cfg(8);
        let run = || {
            let mut model = build_toy_model(tiny_model_cfg()).unwrap();
            apply_lora(&mut model, LoraConfig::default()).unwrap();
            let mut state = TrainState::new(&cfg, &model, data.labeled.len(), data.unlabeled.len());
            let art = run_training(&mut model, &mut state, &cfg, &data, None).unwrap();
            (model, art.records)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert!(
            m1.params_identical(&m2),
            "same seed must give identical parameters"
        );
        assert_eq!(r1, r2, "loss logs must match bit for bit");
        assert!(
            r1.last().unwrap().val_dsc.is_some(),
            "final iteration must validate"
        );
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_trajectory() {
        let data = tiny_data(2, 3, 0);
        let cfg = quick_cfg(10);

        let mut straight = build_toy_model(tiny_model_cfg()).unwrap();
        let mut s_state = TrainState::new(&cfg, &straight, 2, 3);
        let s_art = run_training(&mut straight, &mut s_state, &cfg, &data, None).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let pause = dir.path().join("pause.json");
        let mut half = build_toy_model(tiny_model_cfg()).unwrap();
        let mut h_state = TrainState::new(&cfg, &half, 2, 3);
        let mut first_half = cfg.clone();
        first_half.total_iterations = 5;
        let mut records = run_training(&mut half, &mut h_state, &first_half, &data, None)
            .unwrap()
            .records;
        save_resume(&pause, &cfg, &half, &h_state).unwrap();

        let (cfg2, mut resumed, mut r_state) = load_resume(&pause).unwrap();
        assert_eq!(r_state.iteration, 5);
        let rest = run_training(&mut resumed, &mut r_state, &cfg2, &data, None).unwrap();
        records.extend(rest.records);

        assert!(
            straight.params_identical(&resumed),
            "resume must not fork the trajectory"
        );
        assert_eq!(records, s_art.records);
    }

    #[test]
    fn frozen_base_stays_bitwise_frozen_while_lora_and_decoders_move() {
        let data = tiny_data(2, 2, 0);
        let cfg = quick_cfg(6);
        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        apply_lora(&mut model, LoraConfig::default()).unwrap();
        let before: Vec<(String, ArrayD<f64>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect();
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        run_training(&mut model, &mut state, &cfg, &data, None).unwrap();
        let mut lora_a_moved = false;
        let mut decoder_moved = false;
        for (name, old) in &before {
            let now = &model.params().by_name(name).unwrap().value;
            if name.starts_with("encoder.") {
                assert_eq!(now, old, "frozen base weight {name} changed");
            }
            if name.starts_with("lora.") && name.ends_with(".a") && now != old {
                lora_a_moved = true;
            }
            if name.starts_with("dec1.") && now != old {
                decoder_moved = true;
            }
        }
        assert!(lora_a_moved, "lora A matrices should receive updates");
        assert!(decoder_moved, "decoder weights should receive updates");
    }

    #[test]
    fn ablation_flags_zero_the_right_loss_terms() {
        let data = tiny_data(2, 2, 0);
        let mut model = build_toy_model(tiny_model_cfg()).unwrap();

        let mut cfg = quick_cfg(3);
        cfg.ablation.disable_unlabeled = true;
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        for _ in 0..3 {
            let s = train_step(&mut model, &mut state, &cfg, &data).unwrap();
            assert_eq!(s.l_cross, 0.0);
            assert_eq!(s.l_c, 0.0);
            assert_eq!((s.n_labeled, s.n_unlabeled), (2, 0));
            assert_eq!(s.l_total, s.l_s);
        }

        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        let mut cfg = quick_cfg(3);
        cfg.ablation.vanilla_cps = true;
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        for _ in 0..3 {
            let s = train_step(&mut model, &mut state, &cfg, &data).unwrap();
            assert_eq!(s.l_c, 0.0, "vanilla cps has no consistency term");
            assert!(s.l_cross > 0.0, "cross supervision still active");
        }

        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        let mut cfg = quick_cfg(3);
        cfg.ablation.disable_pcr = true;
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        for _ in 0..3 {
            let s = train_step(&mut model, &mut state, &cfg, &data).unwrap();
            assert_eq!(s.l_c, 0.0);
        }
    }

    #[test]
    fn point_count_configs_run_to_completion() {
        let data = tiny_data(2, 2, 0);
        for (n_center, n_random) in [(0usize, 2usize), (1, 1), (1, 5), (1, 10)] {
            let mut model = build_toy_model(tiny_model_cfg()).unwrap();
            let mut cfg = quick_cfg(2);
            cfg.prompts.num_center = n_center;
            cfg.prompts.num_random = n_random;
            let mut state = TrainState::new(&cfg, &model, 2, 2);
            for _ in 0..2 {
                let s = train_step(&mut model, &mut state, &cfg, &data).unwrap();
                assert!(s.l_total.is_finite(), "({n_center},{n_random}) diverged");
            }
        }
        // no random points → consistency term is an empty sum
        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        let mut cfg = quick_cfg(2);
        cfg.prompts.num_center = 1;
        cfg.prompts.num_random = 0;
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        let s = train_step(&mut model, &mut state, &cfg, &data).unwrap();
        assert_eq!(s.l_c, 0.0);
    }

    #[test]
    fn single_branch_never_touches_the_second_decoder() {
        let data = tiny_data(2, 2, 0);
        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        let before: Vec<ArrayD<f64>> = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("dec2."))
            .map(|p| p.value.clone())
            .collect();
        let mut cfg = quick_cfg(4);
        cfg.ablation.single_branch = true;
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        run_training(&mut model, &mut state, &cfg, &data, None).unwrap();
        let after: Vec<ArrayD<f64>> = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("dec2."))
            .map(|p| p.value.clone())
            .collect();
        assert_eq!(
            before, after,
            "branch 2 must be untouched in single-branch mode"
        );
    }

    #[test]
    fn non_finite_losses_abort_with_a_diagnostic() {
        let data = tiny_data(2, 2, 0);
        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        let cfg = quick_cfg(2);
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        // poison one decoder weight
        model.params_mut().by_name_mut("dec1.head.w").unwrap().value[[0, 0]] = f64::NAN;
        let err = train_step(&mut model, &mut state, &cfg, &data).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { .. }), "got: {err}");
    }

    #[test]
    fn run_training_writes_logs_and_checkpoints() {
        let data = tiny_data(2, 2, 2);
        let dir = tempfile::tempdir().unwrap();
        let mut model = build_toy_model(tiny_model_cfg()).unwrap();
        let mut cfg = quick_cfg(4);
        cfg.eval_every = 2;
        let mut state = TrainState::new(&cfg, &model, 2, 2);
        let art = run_training(&mut model, &mut state, &cfg, &data, Some(dir.path())).unwrap();
        assert_eq!(art.records.len(), 4);
        assert!(art.final_checkpoint.as_ref().unwrap().exists());
        assert!(art.best_checkpoint.as_ref().unwrap().exists());
        assert!(art.best_val.is_some());
        let text = std::fs::read_to_string(art.log_path.as_ref().unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4, "one JSONL record per iteration");
        let parsed: LogRecord = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(parsed, art.records[0]);
    }
}
