//! Segmentation losses: smoothed Dice, cross-entropy, the supervised
//! composite, the cross-prompting loss, prompt consistency regularization,
//! and the weighted total.
//!
//! All losses are built on the [`crate::autodiff`] graph so gradients come
//! for free. Probability maps are `(n_pixels, num_classes)` nodes whose rows
//! lie on the simplex; targets are constants, either one-hot ground truth or
//! pseudo-targets produced by [`pseudo_target`], which hardens (or merely
//! detaches) a prediction so no gradient reaches its source.

use crate::autodiff::{Graph, NodeId};
use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LossError {
    #[error("shape mismatch: prediction {pred:?} vs target {target:?}")]
    ShapeMismatch {
        pred: Vec<usize>,
        target: Vec<usize>,
    },
    #[error("target is not one-hot")]
    NotOneHot,
    #[error("non-finite loss")]
    NonFinite,
}

/// Whether pseudo-targets are hardened to one-hot or kept as probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    #[default]
    Hard,
    Soft,
}

/// Loss weights and smoothing constants.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the cross-prompting loss in the total.
    pub lambda1: f64,
    /// Weight of the prompt consistency loss in the total.
    pub lambda2: f64,
    /// (dice, ce) mixing for the supervised unprompted maps.
    pub sup_unprompted: (f64, f64),
    /// (dice, ce) mixing for the supervised prompted maps.
    pub sup_prompted: (f64, f64),
    /// (dice, ce) mixing inside the unsupervised losses.
    pub unsup: (f64, f64),
    /// Dice smoothing term.
    pub dice_epsilon: f64,
    pub pseudo_label: PseudoLabelMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.4,
            lambda2: 0.05,
            sup_unprompted: (0.8, 0.2),
            sup_prompted: (0.5, 0.5),
            unsup: (0.5, 0.5),
            dice_epsilon: 1e-5,
            pseudo_label: PseudoLabelMode::Hard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), String> {
        let pairs = [
            ("sup_unprompted", self.sup_unprompted),
            ("sup_prompted", self.sup_prompted),
            ("unsup", self.unsup),
        ];
        for (name, (d, c)) in pairs {
            if d < 0.0 || c < 0.0 {
                return Err(format!("{name} weights must be non-negative"));
            }
            if (d + c - 1.0).abs() > 1e-12 {
                return Err(format!("{name} weights must sum to 1, got {}", d + c));
            }
        }
        if self.lambda1 < 0.0 {
            return Err(format!(
                "lambda1 must be non-negative, got {}",
                self.lambda1
            ));
        }
        if self.lambda2 < 0.0 {
            return Err(format!(
                "lambda2 must be non-negative, got {}",
                self.lambda2
            ));
        }
        if self.dice_epsilon <= 0.0 {
            return Err("dice_epsilon must be positive".into());
        }
        Ok(())
    }
}

/// One-hot encode a flattened class-id map into `(n, num_classes)`.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((labels.len(), num_classes));
    for (i, &c) in labels.iter().enumerate() {
        assert!(c < num_classes, "class id {c} out of range");
        out[[i, c]] = 1.0;
    }
    out
}

/// One-hot encode an `(H, W)` class map, flattened row-major.
pub fn one_hot_map(labels: ArrayView2<usize>, num_classes: usize) -> Array2<f64> {
    let flat: Vec<usize> = labels.iter().copied().collect();
    one_hot(&flat, num_classes)
}

fn check_shapes(g: &Graph, pred: NodeId, target: NodeId) -> Result<(), LossError> {
    let p = g.value(pred).shape();
    let t = g.value(target).shape();
    if p != t || p.len() != 2 {
        return Err(LossError::ShapeMismatch {
            pred: p.to_vec(),
            target: t.to_vec(),
        });
    }
    Ok(())
}

/// Detached supervision target from a probability-map node: `Hard` takes the
/// per-pixel argmax as one-hot (ties to the smallest class index), `Soft`
/// keeps the probabilities. Either way the result is a constant, so the
/// source receives no gradient through it.
pub fn pseudo_target(g: &mut Graph, src: NodeId, mode: PseudoLabelMode) -> NodeId {
    match mode {
        PseudoLabelMode::Soft => g.detach(src),
        PseudoLabelMode::Hard => {
            let v = g
                .value(src)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .expect("probability map node is not 2-D");
            let mut hard = Array2::<f64>::zeros(v.raw_dim());
            for (i, row) in v.rows().into_iter().enumerate() {
                let mut best = 0usize;
                let mut best_p = row[0];
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > best_p {
                        best_p = p;
                        best = c;
                    }
                }
                hard[[i, best]] = 1.0;
            }
            g.constant(hard.into_dyn())
        }
    }
}

/// Foreground classes with any target mass.
fn target_support(g: &Graph, target: NodeId) -> Vec<usize> {
    let t = g
        .value(target)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap();
    (1..t.ncols())
        .filter(|&c| t.column(c).iter().any(|&v| v > 0.0))
        .collect()
}

/// Smoothed soft Dice loss averaged over a class set: the union of the
/// target's foreground support and `extra_classes` (a prompt-derived set).
/// Foreground classes outside that union are skipped — the model was neither
/// told about them nor does the target assert them — and background is always
/// excluded. An empty union gives loss 0.
pub fn dice_loss_with_classes(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    extra_classes: &[usize],
    eps: f64,
) -> Result<NodeId, LossError> {
    check_shapes(g, pred, target)?;
    let num_classes = g.value(pred).shape()[1];
    let mut classes = target_support(g, target);
    for &c in extra_classes {
        assert!(
            c >= 1 && c < num_classes,
            "foreground class {c} out of range"
        );
        if !classes.contains(&c) {
            classes.push(c);
        }
    }
    if classes.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    let inter = g.mul(pred, target);
    let inter_c = g.sum_axis0(inter);
    let pred_c = g.sum_axis0(pred);
    let tgt_c = g.sum_axis0(target);
    let two_inter = g.scale(inter_c, 2.0);
    let num = g.add_scalar(two_inter, eps);
    let sums = g.add(pred_c, tgt_c);
    let den = g.add_scalar(sums, eps);
    let ratio = g.div(num, den);
    let mut w = Array1::<f64>::zeros(num_classes);
    for &c in &classes {
        w[c] = 1.0 / classes.len() as f64;
    }
    let w = g.constant(w.into_dyn());
    let weighted = g.mul(ratio, w);
    let mean_dice = g.sum_all(weighted);
    let neg = g.scale(mean_dice, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Dice loss over the target's own foreground support.
pub fn dice_loss(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    eps: f64,
) -> Result<NodeId, LossError> {
    dice_loss_with_classes(g, pred, target, &[], eps)
}

const CE_CLAMP: f64 = 1e-7;

/// Mean per-pixel cross-entropy `−Σ target·log(pred)`, predictions clamped
/// at 1e-7. All classes participate, background included.
pub fn ce_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId, LossError> {
    check_shapes(g, pred, target)?;
    let n = g.value(pred).shape()[0] as f64;
    let clamped = g.clamp_min(pred, CE_CLAMP);
    let logp = g.ln(clamped);
    let weighted = g.mul(target, logp);
    let total = g.sum_all(weighted);
    Ok(g.scale(total, -1.0 / n))
}

/// `wd·dice + wc·ce` against a fixed target.
fn dice_ce(
    g: &mut Graph,
    pred: NodeId,
    target: NodeId,
    weights: (f64, f64),
    extra_classes: &[usize],
    eps: f64,
) -> Result<NodeId, LossError> {
    let d = dice_loss_with_classes(g, pred, target, extra_classes, eps)?;
    let c = ce_loss(g, pred, target)?;
    let wd = g.scale(d, weights.0);
    let wc = g.scale(c, weights.1);
    Ok(g.add(wd, wc))
}

/// One direction of pseudo-supervision: `pred` is pulled toward the detached
/// (by default hardened) pseudo-target built from `ensemble`, `½[L_dice +
/// L_ce]` at the unsupervised mixing. This is the building block behind the
/// symmetric losses below and is used directly by the single-decoder
/// self-training ablation.
pub fn pseudo_supervision_loss(
    g: &mut Graph,
    pred: NodeId,
    ensemble: NodeId,
    prompt_classes: &[usize],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let target = pseudo_target(g, ensemble, cfg.pseudo_label);
    dice_ce(g, pred, target, cfg.unsup, prompt_classes, cfg.dice_epsilon)
}

/// Supervised terms for a single branch: the unprompted map at the
/// unprompted mixing plus every prompted map at the prompted mixing, all
/// against a one-hot ground-truth constant.
pub fn supervised_branch_loss(
    g: &mut Graph,
    unprompted: NodeId,
    prompted: &[NodeId],
    prompt_classes: &[usize],
    target: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    check_one_hot(g, target)?;
    let mut acc = dice_ce(
        g,
        unprompted,
        target,
        cfg.sup_unprompted,
        &[],
        cfg.dice_epsilon,
    )?;
    for &m in prompted {
        let t = dice_ce(
            g,
            m,
            target,
            cfg.sup_prompted,
            prompt_classes,
            cfg.dice_epsilon,
        )?;
        acc = g.add(acc, t);
    }
    Ok(acc)
}

/// Per-sample inputs to the cross-prompting loss: both branches' unprompted
/// maps, both prompted ensembles, and the classes each branch was prompted
/// with (derived from the *other* branch's unprompted prediction).
#[derive(Clone, Debug)]
pub struct CrossSample {
    pub p1: NodeId,
    pub p2: NodeId,
    pub ens1: NodeId,
    pub ens2: NodeId,
    /// Classes prompted into branch 2, from p1's argmax.
    pub classes_into_2: Vec<usize>,
    /// Classes prompted into branch 1, from p2's argmax.
    pub classes_into_1: Vec<usize>,
    /// Neither branch produced usable prompts; the sample contributes 0.
    pub degenerate: bool,
}

/// Symmetric cross-prompting loss: each branch's unprompted map is pulled
/// toward the detached (and by default hardened) prompted ensemble of the
/// other branch, `½[L_dice + L_ce]` per direction, averaged over
/// non-degenerate samples.
pub fn cross_prompting_loss(
    g: &mut Graph,
    samples: &[CrossSample],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let mut terms = Vec::new();
    for s in samples {
        if s.degenerate {
            continue;
        }
        let t2 = pseudo_target(g, s.ens2, cfg.pseudo_label);
        let t1 = pseudo_target(g, s.ens1, cfg.pseudo_label);
        let d12 = dice_ce(g, s.p1, t2, cfg.unsup, &s.classes_into_2, cfg.dice_epsilon)?;
        let d21 = dice_ce(g, s.p2, t1, cfg.unsup, &s.classes_into_1, cfg.dice_epsilon)?;
        terms.push(g.add(d12, d21));
    }
    if terms.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    Ok(g.mean_of(&terms))
}

/// Per-sample inputs to prompt consistency regularization: the random-
/// prompted maps and the prompted ensemble per branch, plus the classes each
/// branch was prompted with.
#[derive(Clone, Debug)]
pub struct PcrSample {
    /// Random-prompted maps per branch; several under multi-point configs.
    pub rand: [Vec<NodeId>; 2],
    /// Prompted ensemble per branch.
    pub ens: [NodeId; 2],
    /// Classes prompted into each branch.
    pub prompt_classes: [Vec<usize>; 2],
    pub degenerate: bool,
}

/// Prompt consistency regularization: random-prompted outputs are pulled
/// toward their branch's detached prompted ensemble, `½[L_dice + L_ce]` per
/// branch (averaged over random maps when there are several). Gradients flow
/// only through the random-prompted side; the ensemble enters as a constant,
/// so center-prompted maps receive none.
pub fn pcr_loss(
    g: &mut Graph,
    samples: &[PcrSample],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let mut terms = Vec::new();
    for s in samples {
        if s.degenerate {
            continue;
        }
        let mut branch_terms = Vec::new();
        for b in 0..2 {
            if s.rand[b].is_empty() {
                continue;
            }
            let target = pseudo_target(g, s.ens[b], cfg.pseudo_label);
            let mut map_terms = Vec::new();
            for &r in &s.rand[b] {
                map_terms.push(dice_ce(
                    g,
                    r,
                    target,
                    cfg.unsup,
                    &s.prompt_classes[b],
                    cfg.dice_epsilon,
                )?);
            }
            branch_terms.push(g.mean_of(&map_terms));
        }
        if branch_terms.is_empty() {
            continue;
        }
        let mut acc = branch_terms[0];
        for &t in &branch_terms[1..] {
            acc = g.add(acc, t);
        }
        terms.push(acc);
    }
    if terms.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    Ok(g.mean_of(&terms))
}

/// Per-sample inputs to the supervised loss on labeled data.
#[derive(Clone, Debug)]
pub struct SupervisedSample {
    /// Unprompted maps `p1^l, p2^l`.
    pub unprompted: [NodeId; 2],
    /// Prompted maps per branch, center first then random draws.
    pub prompted: [Vec<NodeId>; 2],
    /// Classes prompted into each branch.
    pub prompt_classes: [Vec<usize>; 2],
    /// One-hot ground truth (a constant node).
    pub target: NodeId,
}

fn check_one_hot(g: &Graph, target: NodeId) -> Result<(), LossError> {
    let t = g
        .value(target)
        .view()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| LossError::NotOneHot)?;
    for row in t.rows() {
        let mut ones = 0usize;
        for &v in row {
            if v == 1.0 {
                ones += 1;
            } else if v != 0.0 {
                return Err(LossError::NotOneHot);
            }
        }
        if ones != 1 {
            return Err(LossError::NotOneHot);
        }
    }
    Ok(())
}

/// Supervised composite on labeled samples: both unprompted maps at the
/// 0.8/0.2 dice/ce mixing plus every prompted map at 0.5/0.5, all against
/// ground truth, summed per sample and averaged over the batch.
pub fn supervised_loss(
    g: &mut Graph,
    samples: &[SupervisedSample],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    let mut terms = Vec::new();
    for s in samples {
        check_one_hot(g, s.target)?;
        let mut parts = Vec::new();
        for b in 0..2 {
            parts.push(dice_ce(
                g,
                s.unprompted[b],
                s.target,
                cfg.sup_unprompted,
                &[],
                cfg.dice_epsilon,
            )?);
        }
        for b in 0..2 {
            for &m in &s.prompted[b] {
                parts.push(dice_ce(
                    g,
                    m,
                    s.target,
                    cfg.sup_prompted,
                    &s.prompt_classes[b],
                    cfg.dice_epsilon,
                )?);
            }
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = g.add(acc, p);
        }
        terms.push(acc);
    }
    if terms.is_empty() {
        return Ok(g.scalar_const(0.0));
    }
    Ok(g.mean_of(&terms))
}

/// `L_total = L_s + λ1·L_cross + λ2·L_c`. Rejects non-finite inputs so a
/// diverging run aborts instead of training on NaNs.
pub fn total_loss(
    g: &mut Graph,
    l_s: NodeId,
    l_cross: NodeId,
    l_c: NodeId,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    for id in [l_s, l_cross, l_c] {
        if !g.scalar(id).is_finite() {
            return Err(LossError::NonFinite);
        }
    }
    let w_cross = g.scale(l_cross, cfg.lambda1);
    let w_c = g.scale(l_c, cfg.lambda2);
    let partial = g.add(l_s, w_cross);
    Ok(g.add(partial, w_c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn simplex_map(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let mut rest = 1.0;
            for k in 0..c - 1 {
                let v = rng.gen_range(0.0..rest);
                m[[i, k]] = v;
                rest -= v;
            }
            m[[i, c - 1]] = rest;
        }
        m
    }

    fn hardened(p: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::<f64>::zeros(p.raw_dim());
        for (i, row) in p.rows().into_iter().enumerate() {
            let mut best = 0;
            let mut bp = row[0];
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > bp {
                    bp = v;
                    best = c;
                }
            }
            out[[i, best]] = 1.0;
        }
        out
    }

    /// Plain-ndarray re-implementation of the dice/ce mix used as an oracle.
    fn oracle_dice_ce(
        pred: &Array2<f64>,
        target: &Array2<f64>,
        extra: &[usize],
        weights: (f64, f64),
        eps: f64,
    ) -> f64 {
        let c = pred.ncols();
        let mut classes: Vec<usize> = (1..c)
            .filter(|&k| target.column(k).iter().any(|&v| v > 0.0))
            .collect();
        for &k in extra {
            if !classes.contains(&k) {
                classes.push(k);
            }
        }
        let dice = if classes.is_empty() {
            0.0
        } else {
            let mut acc = 0.0;
            for &k in &classes {
                let inter: f64 = pred
                    .column(k)
                    .iter()
                    .zip(target.column(k).iter())
                    .map(|(&a, &b)| a * b)
                    .sum();
                let ps: f64 = pred.column(k).sum();
                let ts: f64 = target.column(k).sum();
                acc += (2.0 * inter + eps) / (ps + ts + eps);
            }
            1.0 - acc / classes.len() as f64
        };
        let n = pred.nrows() as f64;
        let ce: f64 = pred
            .iter()
            .zip(target.iter())
            .map(|(&p, &t)| -t * p.max(1e-7).ln())
            .sum::<f64>()
            / n;
        weights.0 * dice + weights.1 * ce
    }

    #[test]
    fn dice_identity_is_near_zero() {
        let mut g = Graph::new();
        let t = one_hot(&[0, 1, 1, 0], 2);
        let pred = g.param(t.clone().into_dyn());
        let target = g.constant(t.into_dyn());
        let l = dice_loss(&mut g, pred, target, 1e-5).unwrap();
        assert!(g.scalar(l).abs() < 1e-6);
    }

    #[test]
    fn dice_disjoint_is_near_one() {
        let mut g = Graph::new();
        let pred = g.param(one_hot(&[1, 1, 0, 0], 2).into_dyn());
        let target = g.constant(one_hot(&[0, 0, 1, 1], 2).into_dyn());
        let l = dice_loss(&mut g, pred, target, 1e-5).unwrap();
        assert!((g.scalar(l) - 1.0).abs() < 1e-5);
    }

    #[test]
    fn dice_half_overlap_is_half() {
        // |X| = |Y| = 4, |X∩Y| = 2 → dice term 0.5, loss 0.5
        let mut pred = vec![0usize; 16];
        let mut tgt = vec![0usize; 16];
        for i in 0..4 {
            pred[i] = 1;
            tgt[i + 2] = 1;
        }
        let mut g = Graph::new();
        let p = g.param(one_hot(&pred, 2).into_dyn());
        let t = g.constant(one_hot(&tgt, 2).into_dyn());
        let l = dice_loss(&mut g, p, t, 1e-5).unwrap();
        assert_abs_diff_eq!(g.scalar(l), 0.5, epsilon = 1e-5);
    }

    #[test]
    fn dice_skips_classes_absent_from_target_and_prompts() {
        // Class 2 is predicted but neither prompted nor in the target:
        // only class 1 participates, and it matches perfectly.
        let mut pred = one_hot(&[0, 1, 1, 0], 3);
        pred[[0, 0]] = 0.0;
        pred[[0, 2]] = 1.0; // stray class-2 prediction
        let target = one_hot(&[0, 1, 1, 0], 3);
        let mut g = Graph::new();
        let p = g.param(pred.clone().into_dyn());
        let t = g.constant(target.clone().into_dyn());
        let skip = dice_loss(&mut g, p, t, 1e-5).unwrap();
        assert!(g.scalar(skip) < 1e-6, "stray class must be skipped");
        // Once prompted, class 2 participates and the loss jumps.
        let with = dice_loss_with_classes(&mut g, p, t, &[2], 1e-5).unwrap();
        assert!(g.scalar(with) > 0.4, "prompted stray class must count");
    }

    #[test]
    fn dice_on_empty_target_is_zero() {
        let mut g = Graph::new();
        let p = g.param(one_hot(&[0, 0, 0], 2).into_dyn());
        let t = g.constant(one_hot(&[0, 0, 0], 2).into_dyn());
        let l = dice_loss(&mut g, p, t, 1e-5).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn ce_matches_analytic_values() {
        // uniform over C=2 → ln 2
        let mut g = Graph::new();
        let p = g.param(Array2::from_elem((5, 2), 0.5).into_dyn());
        let t = g.constant(one_hot(&[0, 1, 0, 1, 1], 2).into_dyn());
        let l = ce_loss(&mut g, p, t).unwrap();
        assert_abs_diff_eq!(g.scalar(l), std::f64::consts::LN_2, epsilon = 1e-12);

        // single pixel, pred (0.8, 0.2), target (1, 0) → −ln 0.8
        let mut g = Graph::new();
        let p = g.param(ndarray::arr2(&[[0.8, 0.2]]).into_dyn());
        let t = g.constant(ndarray::arr2(&[[1.0, 0.0]]).into_dyn());
        let l = ce_loss(&mut g, p, t).unwrap();
        assert_abs_diff_eq!(g.scalar(l), -(0.8f64.ln()), epsilon = 1e-12);

        // exact one-hot prediction → 0
        let mut g = Graph::new();
        let oh = one_hot(&[1, 0], 2);
        let p = g.param(oh.clone().into_dyn());
        let t = g.constant(oh.into_dyn());
        let l = ce_loss(&mut g, p, t).unwrap();
        assert!(g.scalar(l).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let p = g.param(Array2::<f64>::zeros((4, 2)).into_dyn());
        let t = g.constant(Array2::<f64>::zeros((4, 3)).into_dyn());
        assert!(matches!(
            dice_loss(&mut g, p, t, 1e-5),
            Err(LossError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            ce_loss(&mut g, p, t),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    fn cross_fixture(rng: &mut ChaCha8Rng, g: &mut Graph, n: usize, c: usize) -> CrossSample {
        CrossSample {
            p1: g.param(simplex_map(rng, n, c).into_dyn()),
            p2: g.param(simplex_map(rng, n, c).into_dyn()),
            ens1: g.param(simplex_map(rng, n, c).into_dyn()),
            ens2: g.param(simplex_map(rng, n, c).into_dyn()),
            classes_into_2: vec![1],
            classes_into_1: vec![1],
            degenerate: false,
        }
    }

    #[test]
    fn cross_loss_matches_compositional_oracle() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let mut g = Graph::new();
            let s = cross_fixture(&mut rng, &mut g, 16, 2);
            let l = cross_prompting_loss(&mut g, &[s.clone()], &cfg).unwrap();
            let get = |id: NodeId| {
                g.value(id)
                    .view()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap()
                    .to_owned()
            };
            let expect = oracle_dice_ce(
                &get(s.p1),
                &hardened(&get(s.ens2)),
                &[1],
                cfg.unsup,
                cfg.dice_epsilon,
            ) + oracle_dice_ce(
                &get(s.p2),
                &hardened(&get(s.ens1)),
                &[1],
                cfg.unsup,
                cfg.dice_epsilon,
            );
            assert_abs_diff_eq!(g.scalar(l), expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn cross_loss_is_symmetric_under_branch_swap() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let mut g = Graph::new();
        let s = cross_fixture(&mut rng, &mut g, 16, 4);
        let l = cross_prompting_loss(&mut g, &[s.clone()], &cfg).unwrap();
        let swapped = CrossSample {
            p1: s.p2,
            p2: s.p1,
            ens1: s.ens2,
            ens2: s.ens1,
            classes_into_2: s.classes_into_1.clone(),
            classes_into_1: s.classes_into_2.clone(),
            degenerate: false,
        };
        let l2 = cross_prompting_loss(&mut g, &[swapped], &cfg).unwrap();
        assert_eq!(
            g.scalar(l),
            g.scalar(l2),
            "branch swap must not change the loss"
        );
    }

    #[test]
    fn cross_loss_zero_when_predictions_equal_hardened_targets() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let e1 = simplex_map(&mut rng, 9, 2);
        let e2 = simplex_map(&mut rng, 9, 2);
        let s = CrossSample {
            p1: g.param(hardened(&e2).into_dyn()),
            p2: g.param(hardened(&e1).into_dyn()),
            ens1: g.param(e1.into_dyn()),
            ens2: g.param(e2.into_dyn()),
            classes_into_2: vec![1],
            classes_into_1: vec![1],
            degenerate: false,
        };
        let l = cross_prompting_loss(&mut g, &[s], &cfg).unwrap();
        assert!(
            g.scalar(l).abs() < 1e-4,
            "loss {} should be ~0",
            g.scalar(l)
        );
    }

    #[test]
    fn degenerate_samples_contribute_nothing() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut g = Graph::new();
        let mut s = cross_fixture(&mut rng, &mut g, 8, 2);
        s.degenerate = true;
        let l = cross_prompting_loss(&mut g, &[s.clone()], &cfg).unwrap();
        assert_eq!(g.scalar(l), 0.0);
        let grads = g.backward(l);
        assert!(
            grads[s.p1].is_none(),
            "degenerate sample must not produce gradients"
        );

        let pcr = PcrSample {
            rand: [vec![s.p1], vec![s.p2]],
            ens: [s.ens1, s.ens2],
            prompt_classes: [vec![1], vec![1]],
            degenerate: true,
        };
        let l = pcr_loss(&mut g, &[pcr], &cfg).unwrap();
        assert_eq!(g.scalar(l), 0.0);
    }

    #[test]
    fn pcr_target_side_gets_no_gradient() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut g = Graph::new();
        let c1 = g.param(simplex_map(&mut rng, 12, 3).into_dyn());
        let r1 = g.param(simplex_map(&mut rng, 12, 3).into_dyn());
        let sum = g.add(c1, r1);
        let ens1 = g.scale(sum, 0.5);
        let c2 = g.param(simplex_map(&mut rng, 12, 3).into_dyn());
        let r2 = g.param(simplex_map(&mut rng, 12, 3).into_dyn());
        let sum2 = g.add(c2, r2);
        let ens2 = g.scale(sum2, 0.5);
        let s = PcrSample {
            rand: [vec![r1], vec![r2]],
            ens: [ens1, ens2],
            prompt_classes: [vec![1, 2], vec![1, 2]],
            degenerate: false,
        };
        let l = pcr_loss(&mut g, &[s], &cfg).unwrap();
        let grads = g.backward(l);
        assert!(
            grads[c1].is_none(),
            "center-prompted map must receive no gradient"
        );
        assert!(grads[c2].is_none());
        assert!(
            grads[r1].is_some(),
            "random-prompted map must receive gradient"
        );
        let gr = grads[r1].as_ref().unwrap();
        assert!(gr.iter().any(|&x| x != 0.0));
    }

    #[test]
    fn pcr_matches_compositional_oracle() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut g = Graph::new();
        let r1 = g.param(simplex_map(&mut rng, 16, 2).into_dyn());
        let e1 = g.param(simplex_map(&mut rng, 16, 2).into_dyn());
        let r2 = g.param(simplex_map(&mut rng, 16, 2).into_dyn());
        let e2 = g.param(simplex_map(&mut rng, 16, 2).into_dyn());
        let s = PcrSample {
            rand: [vec![r1], vec![r2]],
            ens: [e1, e2],
            prompt_classes: [vec![1], vec![1]],
            degenerate: false,
        };
        let l = pcr_loss(&mut g, &[s], &cfg).unwrap();
        let get = |id: NodeId| {
            g.value(id)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
                .to_owned()
        };
        let expect = oracle_dice_ce(
            &get(r1),
            &hardened(&get(e1)),
            &[1],
            cfg.unsup,
            cfg.dice_epsilon,
        ) + oracle_dice_ce(
            &get(r2),
            &hardened(&get(e2)),
            &[1],
            cfg.unsup,
            cfg.dice_epsilon,
        );
        assert_abs_diff_eq!(g.scalar(l), expect, epsilon = 1e-12);
    }

    #[test]
    fn supervised_loss_isolates_the_imperfect_map() {
        // All maps equal y except p1^l → total = 0.8·dice + 0.2·ce of that map.
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let y = one_hot(&[0, 1, 1, 0, 1, 0, 0, 1, 0], 2);
        let noisy = simplex_map(&mut rng, 9, 2);
        let mut g = Graph::new();
        let perfect = g.param(y.clone().into_dyn());
        let bad = g.param(noisy.clone().into_dyn());
        let target = g.constant(y.clone().into_dyn());
        let s = SupervisedSample {
            unprompted: [bad, perfect],
            prompted: [vec![perfect, perfect], vec![perfect, perfect]],
            prompt_classes: [vec![1], vec![1]],
            target,
        };
        let l = supervised_loss(&mut g, &[s], &cfg).unwrap();
        let expect = oracle_dice_ce(&noisy, &y, &[], cfg.sup_unprompted, cfg.dice_epsilon);
        // The perfect maps still contribute the ε-scale dice slack and zero CE.
        assert_abs_diff_eq!(g.scalar(l), expect, epsilon = 1e-4);
    }

    #[test]
    fn supervised_mixing_coefficients_extract_to_spec_values() {
        // Build two fixtures with distinct (dice, ce) pairs and solve the 2×2
        // system for the mixing weights the implementation actually used.
        let cfg = LossConfig::default();
        let y = one_hot(&[1, 0, 1, 0], 2);
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut solve = |prompted_slot: bool| -> (f64, f64) {
            let mut rows = Vec::new();
            for _ in 0..2 {
                let noisy = simplex_map(&mut rng, 4, 2);
                let mut g = Graph::new();
                let perfect = g.param(y.clone().into_dyn());
                let bad = g.param(noisy.clone().into_dyn());
                let target = g.constant(y.clone().into_dyn());
                let s = if prompted_slot {
                    SupervisedSample {
                        unprompted: [perfect, perfect],
                        prompted: [vec![bad], vec![]],
                        prompt_classes: [vec![1], vec![1]],
                        target,
                    }
                } else {
                    SupervisedSample {
                        unprompted: [bad, perfect],
                        prompted: [vec![], vec![]],
                        prompt_classes: [vec![1], vec![1]],
                        target,
                    }
                };
                let l = supervised_loss(&mut g, &[s], &cfg).unwrap();
                // Independent dice and ce values of the one imperfect map.
                let d = oracle_dice_ce(&noisy, &y, &[1], (1.0, 0.0), cfg.dice_epsilon);
                let c = oracle_dice_ce(&noisy, &y, &[1], (0.0, 1.0), cfg.dice_epsilon);
                rows.push((d, c, g.scalar(l)));
            }
            let (d1, c1, l1) = rows[0];
            let (d2, c2, l2) = rows[1];
            let det = d1 * c2 - d2 * c1;
            ((l1 * c2 - l2 * c1) / det, (d1 * l2 - d2 * l1) / det)
        };
        let (wd_u, wc_u) = solve(false);
        assert_abs_diff_eq!(wd_u, 0.8, epsilon = 1e-3);
        assert_abs_diff_eq!(wc_u, 0.2, epsilon = 1e-3);
        let (wd_p, wc_p) = solve(true);
        assert_abs_diff_eq!(wd_p, 0.5, epsilon = 1e-3);
        assert_abs_diff_eq!(wc_p, 0.5, epsilon = 1e-3);
    }

    #[test]
    fn supervised_rejects_soft_targets() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let p = g.param(one_hot(&[0, 1], 2).into_dyn());
        let soft = g.constant(ndarray::arr2(&[[0.6, 0.4], [0.3, 0.7]]).into_dyn());
        let s = SupervisedSample {
            unprompted: [p, p],
            prompted: [vec![], vec![]],
            prompt_classes: [vec![], vec![]],
            target: soft,
        };
        assert_eq!(
            supervised_loss(&mut g, &[s], &cfg),
            Err(LossError::NotOneHot)
        );
    }

    #[test]
    fn total_loss_weights_are_exact() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let ls = g.scalar_const(1.0);
        let lx = g.scalar_const(0.5);
        let lc = g.scalar_const(0.2);
        let t = total_loss(&mut g, ls, lx, lc, &cfg).unwrap();
        assert_eq!(
            g.scalar(t),
            1.21,
            "1.0 + 0.4·0.5 + 0.05·0.2 must be exactly 1.21"
        );

        let zero_cfg = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..LossConfig::default()
        };
        let t = total_loss(&mut g, ls, lx, lc, &zero_cfg).unwrap();
        assert_eq!(g.scalar(t), 1.0);
        let z = g.scalar_const(0.0);
        let t = total_loss(&mut g, z, z, z, &cfg).unwrap();
        assert_eq!(g.scalar(t), 0.0);
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let nan = g.constant(ArrayD::from_elem(IxDyn(&[]), f64::NAN));
        let ok = g.scalar_const(0.5);
        assert_eq!(
            total_loss(&mut g, nan, ok, ok, &cfg),
            Err(LossError::NonFinite)
        );
        let inf = g.constant(ArrayD::from_elem(IxDyn(&[]), f64::INFINITY));
        assert_eq!(
            total_loss(&mut g, ok, inf, ok, &cfg),
            Err(LossError::NonFinite)
        );
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Prediction-side gradients for each loss, random fixtures, C ∈ {2, 4}.
        let cfg = LossConfig::default();
        for (seed, c) in [(61u64, 2usize), (67, 4), (71, 2), (73, 4)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred0 = simplex_map(&mut rng, 16, c);
            let tgt = hardened(&simplex_map(&mut rng, 16, c));
            let eval = |pred: &Array2<f64>| -> (f64, Array2<f64>) {
                let mut g = Graph::new();
                let p = g.param(pred.clone().into_dyn());
                let t = g.constant(tgt.clone().into_dyn());
                let d = dice_loss_with_classes(&mut g, p, t, &[1], cfg.dice_epsilon).unwrap();
                let ce = ce_loss(&mut g, p, t).unwrap();
                let wd = g.scale(d, 0.5);
                let wc = g.scale(ce, 0.5);
                let l = g.add(wd, wc);
                let grads = g.backward(l);
                let gr = grads[p]
                    .clone()
                    .unwrap()
                    .into_dimensionality::<ndarray::Ix2>()
                    .unwrap();
                (g.scalar(l), gr)
            };
            let (_, analytic) = eval(&pred0);
            let h = 1e-6;
            for i in [0usize, 5, 11, 15] {
                for k in 0..c {
                    let mut pp = pred0.clone();
                    let mut pm = pred0.clone();
                    pp[[i, k]] += h;
                    pm[[i, k]] -= h;
                    let fd = (eval(&pp).0 - eval(&pm).0) / (2.0 * h);
                    let an = analytic[[i, k]];
                    let denom = an.abs().max(fd.abs()).max(1e-6);
                    assert!(
                        ((an - fd) / denom).abs() < 1e-4,
                        "grad mismatch at ({i},{k}): {an} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn config_validation_catches_bad_weights() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.sup_unprompted = (0.7, 0.2);
        assert!(cfg.validate().is_err());
        cfg = LossConfig {
            lambda1: -0.1,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        cfg = LossConfig {
            dice_epsilon: 0.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
