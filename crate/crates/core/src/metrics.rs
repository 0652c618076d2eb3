//! Segmentation quality metrics and dataset evaluation.
//!
//! Overlap metrics (DSC, Jaccard) are reported in percent; surface metrics
//! (HD95, ASD) are Euclidean distances over boundary pixels, optionally
//! scaled by a physical pixel spacing. Conventions, chosen because the
//! source formulas are silent on the edge cases:
//! - both masks empty → DSC = JC = 100; exactly one empty → 0;
//! - surface metrics are undefined when either mask is empty — recorded as
//!   missing and excluded from aggregation, with an exclusion count;
//! - a boundary pixel is a foreground pixel 4-adjacent to background, where
//!   everything beyond the image border counts as background;
//! - HD95 uses the 95th percentile of the pooled symmetric distance set with
//!   linear interpolation between order statistics.

use crate::model::{Model, ModelError, Session};
use crate::prompt_geometry::{
    argmax_map, center_prompt_set, foreground_components, squared_edt, BinaryMask, Connectivity,
};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("mask shape mismatch: {a:?} vs {b:?}")]
    ShapeMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
}

fn check(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    let da = (a.height(), a.width());
    let db = (b.height(), b.width());
    if da != db {
        return Err(MetricsError::ShapeMismatch { a: da, b: db });
    }
    Ok(())
}

/// Dice similarity coefficient in percent.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    let p = pred.count_ones();
    let g = gt.count_ones();
    if p == 0 && g == 0 {
        return Ok(100.0);
    }
    if p == 0 || g == 0 {
        return Ok(0.0);
    }
    let inter = pred
        .grid()
        .iter()
        .zip(gt.grid().iter())
        .filter(|(&a, &b)| a && b)
        .count();
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Jaccard index in percent.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, MetricsError> {
    check(pred, gt)?;
    let p = pred.count_ones();
    let g = gt.count_ones();
    if p == 0 && g == 0 {
        return Ok(100.0);
    }
    if p == 0 || g == 0 {
        return Ok(0.0);
    }
    let inter = pred
        .grid()
        .iter()
        .zip(gt.grid().iter())
        .filter(|(&a, &b)| a && b)
        .count();
    let union = p + g - inter;
    Ok(100.0 * inter as f64 / union as f64)
}

/// Foreground pixels 4-adjacent to background, with the image border counting
/// as background.
pub fn boundary_mask(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    BinaryMask::from_fn(h, w, |r, c| {
        if !mask.get(r, c) {
            return false;
        }
        r == 0
            || c == 0
            || r == h - 1
            || c == w - 1
            || !mask.get(r - 1, c)
            || !mask.get(r + 1, c)
            || !mask.get(r, c - 1)
            || !mask.get(r, c + 1)
    })
}

/// Pooled symmetric set of boundary-to-boundary nearest distances: every
/// pred-boundary pixel's distance to the gt boundary (row-major), then every
/// gt-boundary pixel's distance to the pred boundary. `None` when either
/// mask is empty. Distances use `spacing = (row, col)` physical pixel size.
pub fn surface_distances(
    pred: &BinaryMask,
    gt: &BinaryMask,
    spacing: (f64, f64),
) -> Result<Option<Vec<f64>>, MetricsError> {
    check(pred, gt)?;
    if pred.is_all_background() || gt.is_all_background() {
        return Ok(None);
    }
    let pb = boundary_mask(pred);
    let gb = boundary_mask(gt);
    let dist_to_g = squared_edt(gb.grid(), spacing);
    let dist_to_p = squared_edt(pb.grid(), spacing);
    let mut pooled = Vec::new();
    for (r, c) in pb.pixels() {
        pooled.push(dist_to_g[[r, c]].sqrt());
    }
    for (r, c) in gb.pixels() {
        pooled.push(dist_to_p[[r, c]].sqrt());
    }
    Ok(Some(pooled))
}

/// q-th percentile (q in [0, 100]) with linear interpolation between order
/// statistics at rank `q/100·(n−1)`.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("non-finite distance"));
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    if lo == hi {
        return sorted[lo];
    }
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

/// 95th-percentile Hausdorff distance; `None` when either mask is empty.
pub fn hd95(
    pred: &BinaryMask,
    gt: &BinaryMask,
    spacing: (f64, f64),
) -> Result<Option<f64>, MetricsError> {
    Ok(surface_distances(pred, gt, spacing)?.map(|d| percentile(&d, 95.0)))
}

/// Average surface distance; `None` when either mask is empty.
pub fn asd(
    pred: &BinaryMask,
    gt: &BinaryMask,
    spacing: (f64, f64),
) -> Result<Option<f64>, MetricsError> {
    Ok(surface_distances(pred, gt, spacing)?.map(|d| d.iter().sum::<f64>() / d.len() as f64))
}

/// Metrics of one foreground class on one sample.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub dsc: f64,
    pub jc: f64,
    /// Missing when either mask was empty (surface undefined).
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

impl ClassMetrics {
    pub fn surface_defined(&self) -> bool {
        self.hd95.is_some()
    }
}

/// All foreground-class metrics between two label maps.
pub fn class_metrics(
    pred: &Array2<usize>,
    gt: &Array2<usize>,
    num_classes: usize,
    spacing: (f64, f64),
) -> Result<Vec<ClassMetrics>, MetricsError> {
    let mut out = Vec::new();
    for c in 1..num_classes {
        let pm = BinaryMask::new(pred.mapv(|k| k == c));
        let gm = BinaryMask::new(gt.mapv(|k| k == c));
        out.push(ClassMetrics {
            class_id: c,
            dsc: dsc(&pm, &gm)?,
            jc: jaccard(&pm, &gm)?,
            hd95: hd95(&pm, &gm, spacing)?,
            asd: asd(&pm, &gm, spacing)?,
        });
    }
    Ok(out)
}

/// Unprompted inference: per-pixel argmax of the mean of both decoders'
/// probability maps under the default dense prompt embedding. Argmax ties go
/// to the lowest class index.
pub fn infer(model: &Model, image: &Array2<f64>) -> Result<Array2<usize>, ModelError> {
    Ok(argmax_map(infer_probs(model, image)?.view()))
}

/// The ensemble probability map behind [`infer`].
pub fn infer_probs(model: &Model, image: &Array2<f64>) -> Result<Array3<f64>, ModelError> {
    let mut s = Session::new(model);
    let enc = s.encode(image)?;
    let emb = s.prompt_encode(None)?;
    let p1 = s.decode(1, enc, emb)?;
    let p2 = s.decode(2, enc, emb)?;
    let sum = s.g.add(p1, p2);
    let ens = s.g.scale(sum, 0.5);
    Ok(model.map_to_array(&s.g, ens))
}

/// Ensemble probability map when both branches receive the same prompt set.
pub fn prompted_probs(
    model: &Model,
    image: &Array2<f64>,
    prompts: &crate::prompt_geometry::PromptSet,
) -> Result<Array3<f64>, ModelError> {
    let mut s = Session::new(model);
    let enc = s.encode(image)?;
    let emb = s.prompt_encode(Some(prompts))?;
    let p1 = s.decode(1, enc, emb)?;
    let p2 = s.decode(2, enc, emb)?;
    let sum = s.g.add(p1, p2);
    let ens = s.g.scale(sum, 0.5);
    Ok(model.map_to_array(&s.g, ens))
}

/// Ground-truth-prompted evaluation ("SAM-point" style): center points of
/// each GT class's largest component prompt both branches; the branch
/// ensemble is argmaxed. Empty ground truth falls back to unprompted
/// inference.
pub fn gt_prompt_eval(
    model: &Model,
    image: &Array2<f64>,
    gt: &Array2<usize>,
    connectivity: Connectivity,
) -> Result<Array2<usize>, ModelError> {
    let comps = foreground_components(&gt.view(), model.num_classes(), connectivity);
    if comps.is_empty() {
        return infer(model, image);
    }
    let set = center_prompt_set(&comps, None);
    Ok(argmax_map(prompted_probs(model, image, &set)?.view()))
}

/// One evaluation input.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub image: Array2<f64>,
    pub gt: Array2<usize>,
    /// Physical pixel size (row, col); (1, 1) when unknown.
    pub spacing: (f64, f64),
}

/// Which forward pass the evaluation uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Unprompted,
    GtPrompted,
}

/// Per-sample evaluation record.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub classes: Vec<ClassMetrics>,
    /// Populated when the sample could not be evaluated; such samples are
    /// excluded from aggregation.
    pub error: Option<String>,
}

/// Per-class aggregation over all evaluable samples (unweighted means).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ClassSummary {
    pub class_id: usize,
    pub dsc: f64,
    pub jc: f64,
    /// Mean over samples where the surface metrics were defined.
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    /// Samples excluded from the surface means.
    pub surface_excluded: usize,
    pub n: usize,
}

/// Grand means (unweighted over per-class summaries).
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GrandSummary {
    pub dsc: f64,
    pub jc: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
    pub surface_excluded: usize,
}

/// Machine-readable evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub num_samples: usize,
    pub num_failed: usize,
    pub per_class: Vec<ClassSummary>,
    pub mean: GrandSummary,
    pub samples: Vec<SampleRecord>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Aggregate per-sample records into per-class and grand summaries.
pub fn aggregate(mode: EvalMode, num_classes: usize, samples: Vec<SampleRecord>) -> EvalReport {
    let ok: Vec<&SampleRecord> = samples.iter().filter(|s| s.error.is_none()).collect();
    let mut per_class = Vec::new();
    for c in 1..num_classes {
        let rows: Vec<&ClassMetrics> = ok
            .iter()
            .flat_map(|s| s.classes.iter().filter(|m| m.class_id == c))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let hd: Vec<f64> = rows.iter().filter_map(|m| m.hd95).collect();
        let as_: Vec<f64> = rows.iter().filter_map(|m| m.asd).collect();
        per_class.push(ClassSummary {
            class_id: c,
            dsc: mean(&rows.iter().map(|m| m.dsc).collect::<Vec<_>>()),
            jc: mean(&rows.iter().map(|m| m.jc).collect::<Vec<_>>()),
            hd95: (!hd.is_empty()).then(|| mean(&hd)),
            asd: (!as_.is_empty()).then(|| mean(&as_)),
            surface_excluded: rows.len() - hd.len(),
            n: rows.len(),
        });
    }
    let grand_hd: Vec<f64> = per_class.iter().filter_map(|c| c.hd95).collect();
    let grand_asd: Vec<f64> = per_class.iter().filter_map(|c| c.asd).collect();
    let mean_summary = GrandSummary {
        dsc: if per_class.is_empty() {
            0.0
        } else {
            mean(&per_class.iter().map(|c| c.dsc).collect::<Vec<_>>())
        },
        jc: if per_class.is_empty() {
            0.0
        } else {
            mean(&per_class.iter().map(|c| c.jc).collect::<Vec<_>>())
        },
        hd95: (!grand_hd.is_empty()).then(|| mean(&grand_hd)),
        asd: (!grand_asd.is_empty()).then(|| mean(&grand_asd)),
        surface_excluded: per_class.iter().map(|c| c.surface_excluded).sum(),
    };
    EvalReport {
        mode,
        num_samples: samples.len(),
        num_failed: samples.len() - ok.len(),
        per_class,
        mean: mean_summary,
        samples,
    }
}

/// Evaluate a model over a dataset split. Per-sample failures (e.g. a
/// resolution mismatch) are recorded on the sample and the run continues.
pub fn evaluate_dataset(
    model: &Model,
    samples: impl IntoIterator<Item = EvalSample>,
    mode: EvalMode,
) -> EvalReport {
    let num_classes = model.num_classes();
    let mut records = Vec::new();
    for s in samples {
        let pred = match mode {
            EvalMode::Unprompted => infer(model, &s.image),
            EvalMode::GtPrompted => gt_prompt_eval(model, &s.image, &s.gt, Connectivity::Eight),
        };
        let record = match pred {
            Err(e) => SampleRecord {
                sample_id: s.id,
                classes: Vec::new(),
                error: Some(e.to_string()),
            },
            Ok(pred) => match class_metrics(&pred, &s.gt, num_classes, s.spacing) {
                Err(e) => SampleRecord {
                    sample_id: s.id,
                    classes: Vec::new(),
                    error: Some(e.to_string()),
                },
                Ok(classes) => SampleRecord {
                    sample_id: s.id,
                    classes,
                    error: None,
                },
            },
        };
        records.push(record);
    }
    aggregate(mode, num_classes, records)
}

/// Plain-text summary table.
pub fn render_table(report: &EvalReport) -> String {
    let fmt_opt = |v: Option<f64>| match v {
        Some(x) => format!("{x:8.3}"),
        None => format!("{:>8}", "-"),
    };
    let mut out = String::new();
    out.push_str(&format!(
        "mode: {:?}   samples: {} ({} failed)\n",
        report.mode, report.num_samples, report.num_failed
    ));
    out.push_str("class      dsc%      jc%     hd95      asd  excl\n");
    for c in &report.per_class {
        out.push_str(&format!(
            "{:>5} {:8.2} {:8.2} {} {} {:5}\n",
            c.class_id,
            c.dsc,
            c.jc,
            fmt_opt(c.hd95),
            fmt_opt(c.asd),
            c.surface_excluded
        ));
    }
    out.push_str(&format!(
        " mean {:8.2} {:8.2} {} {} {:5}\n",
        report.mean.dsc,
        report.mean.jc,
        fmt_opt(report.mean.hd95),
        fmt_opt(report.mean.asd),
        report.mean.surface_excluded
    ));
    out
}
