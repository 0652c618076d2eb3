//! Point-prompt extraction from probability maps and label masks.
//!
//! The pipeline is: per-class argmax binarization → connected components →
//! largest component → a center point (distance-transform argmax) and/or a
//! random interior point. All tie-breaks are lexicographic on (row, col) so
//! results are reproducible; randomness enters only through an explicit RNG.

use ndarray::{Array2, ArrayView2, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no foreground")]
    NoForeground,
}

/// Pixel connectivity used for connected-component analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

/// A binary foreground mask over an H×W pixel grid.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    grid: Array2<bool>,
}

impl BinaryMask {
    pub fn new(grid: Array2<bool>) -> Self {
        let (h, w) = grid.dim();
        assert!(h > 0 && w > 0, "mask dimensions must be positive");
        Self { grid }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        Self::new(Array2::from_elem((h, w), false))
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        Self::new(Array2::from_shape_fn((h, w), |(r, c)| f(r, c)))
    }

    pub fn height(&self) -> usize {
        self.grid.nrows()
    }

    pub fn width(&self) -> usize {
        self.grid.ncols()
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.grid[[r, c]]
    }

    pub fn grid(&self) -> &Array2<bool> {
        &self.grid
    }

    pub fn count_ones(&self) -> usize {
        self.grid.iter().filter(|&&b| b).count()
    }

    pub fn is_all_background(&self) -> bool {
        self.grid.iter().all(|&b| !b)
    }

    /// Foreground pixels in row-major (lexicographic) order.
    pub fn pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for ((r, c), &b) in self.grid.indexed_iter() {
            if b {
                out.push((r, c));
            }
        }
        out
    }
}

/// How a point prompt was chosen from its component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Center,
    Random,
}

/// A single positive point prompt for one foreground class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPoint {
    pub row: usize,
    pub col: usize,
    /// Foreground class index in `1..num_classes`.
    pub class_id: usize,
    pub mode: PromptMode,
    /// Always `true` here; negative prompts are out of scope.
    pub positive: bool,
}

/// A bundle of point prompts, at most one per (class, mode) pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct PromptSet {
    pub points: Vec<PromptPoint>,
    /// Which decoder branch's prediction produced these prompts; `None` for
    /// prompts derived from ground truth.
    pub source_branch: Option<u8>,
}

impl PromptSet {
    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The subset of points with the given mode, as its own set.
    pub fn filter_mode(&self, mode: PromptMode) -> PromptSet {
        PromptSet {
            points: self
                .points
                .iter()
                .copied()
                .filter(|p| p.mode == mode)
                .collect(),
            source_branch: self.source_branch,
        }
    }

    /// Class ids present in this set, deduplicated, ascending.
    pub fn class_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.points.iter().map(|p| p.class_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// Labeled connected components of a mask. Labels are assigned in row-major
/// discovery order starting at 1; background stays 0, and `sizes[k]` is the
/// pixel count of label `k + 1`.
#[derive(Clone, Debug)]
pub struct ComponentMap {
    pub labels: Array2<u32>,
    pub sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn num_components(&self) -> usize {
        self.sizes.len()
    }
}

/// Breadth-first flood fill. Because labels follow row-major discovery order,
/// label `k`'s first-scanned pixel is also its lexicographically smallest.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> ComponentMap {
    let (h, w) = (mask.height(), mask.width());
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) || labels[[r, c]] != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0usize;
            labels[[r, c]] = label;
            queue.push_back((r, c));
            while let Some((pr, pc)) = queue.pop_front() {
                size += 1;
                for &(dr, dc) in connectivity.offsets() {
                    let nr = pr as isize + dr;
                    let nc = pc as isize + dc;
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    let (nr, nc) = (nr as usize, nc as usize);
                    if mask.get(nr, nc) && labels[[nr, nc]] == 0 {
                        labels[[nr, nc]] = label;
                        queue.push_back((nr, nc));
                    }
                }
            }
            sizes.push(size);
        }
    }
    ComponentMap { labels, sizes }
}

/// Mask of the largest component; ties go to the component containing the
/// lexicographically smallest pixel (i.e. the lowest label). An empty mask
/// comes back empty.
pub fn largest_component(mask: &BinaryMask, connectivity: Connectivity) -> BinaryMask {
    let cm = connected_components(mask, connectivity);
    let Some(best) = cm
        .sizes
        .iter()
        .enumerate()
        // max_by_key keeps the later element on ties, so compare (size, -label)
        .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))
        .map(|(i, _)| i as u32 + 1)
    else {
        return BinaryMask::zeros(mask.height(), mask.width());
    };
    BinaryMask::new(cm.labels.mapv(|l| l == best))
}

/// Exact squared Euclidean distance from every cell to the nearest `true`
/// cell, with per-axis spacing `(row_spacing, col_spacing)`. Cells with no
/// feature anywhere come back as `+inf`. Two-pass algorithm: per-column
/// nearest feature, then a lower envelope of parabolas per row.
pub(crate) fn squared_edt(feature: &Array2<bool>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = feature.dim();
    let (sy, sx) = spacing;
    let mut g = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    for j in 0..w {
        let mut last: Option<usize> = None;
        for i in 0..h {
            if feature[[i, j]] {
                last = Some(i);
            }
            if let Some(l) = last {
                let d = (i - l) as f64 * sy;
                g[[i, j]] = d * d;
            }
        }
        last = None;
        for i in (0..h).rev() {
            if feature[[i, j]] {
                last = Some(i);
            }
            if let Some(l) = last {
                let d = (l - i) as f64 * sy;
                let dd = d * d;
                if dd < g[[i, j]] {
                    g[[i, j]] = dd;
                }
            }
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    let mut row_in = vec![0.0; w];
    let mut row_out = vec![0.0; w];
    for i in 0..h {
        for j in 0..w {
            row_in[j] = g[[i, j]];
        }
        envelope_dt(&row_in, sx, &mut row_out);
        for j in 0..w {
            out[[i, j]] = row_out[j];
        }
    }
    out
}

/// 1-D squared distance transform of a sampled function `f` at coordinates
/// `idx * step`: `out[q] = min_p ((q-p)*step)^2 + f[p]`. `+inf` entries in
/// `f` contribute nothing.
fn envelope_dt(f: &[f64], step: f64, out: &mut [f64]) {
    let n = f.len();
    let mut v = vec![0usize; n]; // parabola index per envelope segment
    let mut z = vec![0.0f64; n + 1]; // segment boundaries
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let xq = q as f64 * step;
        let intersect = |p: usize| {
            let xp = p as f64 * step;
            ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
        };
        while k >= 0 && intersect(v[k as usize]) <= z[k as usize] {
            k -= 1;
        }
        if k < 0 {
            k = 0;
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
        } else {
            let s = intersect(v[k as usize]);
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
        }
    }
    if k < 0 {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut seg = 0usize;
    for q in 0..n {
        let xq = q as f64 * step;
        while z[seg + 1] < xq {
            seg += 1;
        }
        let xp = v[seg] as f64 * step;
        let dx = xq - xp;
        out[q] = dx * dx + f[v[seg]];
    }
}

/// The component pixel farthest from background, where everything outside the
/// image border also counts as background. Ties break by smallest row, then
/// smallest column.
pub fn center_point(component: &BinaryMask) -> Result<(usize, usize), PromptError> {
    if component.is_all_background() {
        return Err(PromptError::NoForeground);
    }
    let (h, w) = (component.height(), component.width());
    // Pad one background ring so the border acts as background.
    let mut bg = Array2::<bool>::from_elem((h + 2, w + 2), true);
    for r in 0..h {
        for c in 0..w {
            bg[[r + 1, c + 1]] = !component.get(r, c);
        }
    }
    let dist = squared_edt(&bg, (1.0, 1.0));
    let mut best = (0usize, 0usize);
    let mut best_d = f64::NEG_INFINITY;
    for r in 0..h {
        for c in 0..w {
            if component.get(r, c) && dist[[r + 1, c + 1]] > best_d {
                best_d = dist[[r + 1, c + 1]];
                best = (r, c);
            }
        }
    }
    Ok(best)
}

/// A uniformly random component pixel; deterministic for a given RNG state.
pub fn random_point<R: Rng>(
    component: &BinaryMask,
    rng: &mut R,
) -> Result<(usize, usize), PromptError> {
    let pixels = component.pixels();
    if pixels.is_empty() {
        return Err(PromptError::NoForeground);
    }
    Ok(pixels[rng.gen_range(0..pixels.len())])
}

/// Per-pixel argmax class of an `(H, W, C)` probability map; ties pick the
/// smallest class index.
pub fn argmax_map(prob: ArrayView3<f64>) -> Array2<usize> {
    let (h, w, c) = prob.dim();
    assert!(c >= 1);
    Array2::from_shape_fn((h, w), |(r, col)| {
        let mut best = 0usize;
        let mut best_p = prob[[r, col, 0]];
        for k in 1..c {
            if prob[[r, col, k]] > best_p {
                best_p = prob[[r, col, k]];
                best = k;
            }
        }
        best
    })
}

/// Binary mask of pixels assigned class `c` in a class-id map.
pub fn class_mask(classes: &ArrayView2<usize>, c: usize) -> BinaryMask {
    BinaryMask::new(classes.mapv(|k| k == c))
}

/// Largest connected component per foreground class (class 0 is background).
/// Classes with no pixels are skipped, so the result may be empty.
pub fn foreground_components(
    classes: &ArrayView2<usize>,
    num_classes: usize,
    connectivity: Connectivity,
) -> Vec<(usize, BinaryMask)> {
    let mut out = Vec::new();
    for c in 1..num_classes {
        let mask = class_mask(classes, c);
        if mask.is_all_background() {
            continue;
        }
        out.push((c, largest_component(&mask, connectivity)));
    }
    out
}

/// One center point per component.
pub fn center_prompt_set(
    components: &[(usize, BinaryMask)],
    source_branch: Option<u8>,
) -> PromptSet {
    let points = components
        .iter()
        .map(|(c, comp)| {
            let (row, col) = center_point(comp).expect("component is non-empty by construction");
            PromptPoint {
                row,
                col,
                class_id: *c,
                mode: PromptMode::Center,
                positive: true,
            }
        })
        .collect();
    PromptSet {
        points,
        source_branch,
    }
}

/// One random point per component, drawn in ascending class order.
pub fn random_prompt_set<R: Rng>(
    components: &[(usize, BinaryMask)],
    rng: &mut R,
    source_branch: Option<u8>,
) -> PromptSet {
    let points = components
        .iter()
        .map(|(c, comp)| {
            let (row, col) =
                random_point(comp, rng).expect("component is non-empty by construction");
            PromptPoint {
                row,
                col,
                class_id: *c,
                mode: PromptMode::Random,
                positive: true,
            }
        })
        .collect();
    PromptSet {
        points,
        source_branch,
    }
}

/// Full extraction: binarize per class, keep largest components, emit one
/// point per requested mode per predicted class. Center points come before
/// random points; within a mode, classes ascend.
pub fn extract_prompts<R: Rng>(
    prob: ArrayView3<f64>,
    modes: &[PromptMode],
    connectivity: Connectivity,
    rng: &mut R,
    source_branch: Option<u8>,
) -> PromptSet {
    let (_, _, c) = prob.dim();
    let classes = argmax_map(prob);
    let components = foreground_components(&classes.view(), c, connectivity);
    let mut points = Vec::new();
    if modes.contains(&PromptMode::Center) {
        points.extend(center_prompt_set(&components, source_branch).points);
    }
    if modes.contains(&PromptMode::Random) {
        points.extend(random_prompt_set(&components, rng, source_branch).points);
    }
    PromptSet {
        points,
        source_branch,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mask_from_pixels(h: usize, w: usize, pixels: &[(usize, usize)]) -> BinaryMask {
        BinaryMask::from_fn(h, w, |r, c| pixels.contains(&(r, c)))
    }

    #[test]
    fn empty_mask_has_zero_components() {
        let cm = connected_components(&BinaryMask::zeros(4, 4), Connectivity::Eight);
        assert_eq!(cm.num_components(), 0);
        assert!(cm.labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn single_pixel_is_one_component_of_size_one() {
        let m = mask_from_pixels(4, 5, &[(2, 3)]);
        let cm = connected_components(&m, Connectivity::Four);
        assert_eq!(cm.sizes, vec![1]);
        assert_eq!(cm.labels[[2, 3]], 1);
    }

    #[test]
    fn diagonal_pixels_split_under_4_join_under_8() {
        let m = mask_from_pixels(3, 3, &[(0, 0), (1, 1)]);
        assert_eq!(
            connected_components(&m, Connectivity::Four).num_components(),
            2
        );
        assert_eq!(
            connected_components(&m, Connectivity::Eight).num_components(),
            1
        );
    }

    #[test]
    fn largest_component_picks_bigger_blob() {
        // 5-pixel row-0 strip vs 3-pixel row-3 strip, separated by background
        let mut px: Vec<(usize, usize)> = (0..5).map(|c| (0, c)).collect();
        px.extend((0..3).map(|c| (3, c)));
        let m = mask_from_pixels(5, 6, &px);
        let big = largest_component(&m, Connectivity::Eight);
        assert_eq!(big.count_ones(), 5);
        assert!(big.get(0, 0) && big.get(0, 4) && !big.get(3, 0));
    }

    #[test]
    fn largest_component_of_empty_mask_is_empty() {
        let m = BinaryMask::zeros(3, 3);
        assert!(largest_component(&m, Connectivity::Eight).is_all_background());
    }

    #[test]
    fn largest_component_tie_breaks_lexicographically() {
        // Two size-4 squares; the one whose smallest pixel is (0,4) loses to (0,0)? No:
        // (0,0) < (0,4), so the left square wins.
        let mut px: Vec<(usize, usize)> = vec![(0, 0), (0, 1), (1, 0), (1, 1)];
        px.extend([(0, 4), (0, 5), (1, 4), (1, 5)]);
        let m = mask_from_pixels(3, 7, &px);
        let best = largest_component(&m, Connectivity::Eight);
        assert!(best.get(0, 0) && !best.get(0, 4));

        // Same sizes but the second component's first pixel comes first.
        let mut px2: Vec<(usize, usize)> = vec![(0, 4), (0, 5), (1, 4), (1, 5)];
        px2.extend([(1, 0), (1, 1), (2, 0), (2, 1)]);
        let m2 = mask_from_pixels(4, 7, &px2);
        let best2 = largest_component(&m2, Connectivity::Eight);
        assert!(
            best2.get(0, 4) && !best2.get(1, 0),
            "component containing (0,4) wins the tie"
        );
    }

    #[test]
    fn center_of_single_pixel_is_that_pixel() {
        let m = mask_from_pixels(6, 8, &[(2, 5)]);
        assert_eq!(center_point(&m).unwrap(), (2, 5));
    }

    #[test]
    fn center_of_full_square_is_middle() {
        let m = BinaryMask::from_fn(5, 5, |_, _| true);
        assert_eq!(center_point(&m).unwrap(), (2, 2));
    }

    #[test]
    fn center_of_thin_strip_ties_to_smallest_row_col() {
        // 1×3 image, all foreground: every pixel is 1 away from padded background
        let m = BinaryMask::from_fn(1, 3, |_, _| true);
        assert_eq!(center_point(&m).unwrap(), (0, 0));
    }

    #[test]
    fn center_errors_on_empty_component() {
        assert_eq!(
            center_point(&BinaryMask::zeros(2, 2)),
            Err(PromptError::NoForeground)
        );
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            random_point(&BinaryMask::zeros(2, 2), &mut rng),
            Err(PromptError::NoForeground)
        );
    }

    #[test]
    fn center_is_invariant_to_background_padding() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let h = rng.gen_range(2..10);
            let w = rng.gen_range(2..10);
            let mut m = BinaryMask::zeros(h, w);
            let mut grid = m.grid().clone();
            for _ in 0..rng.gen_range(1..=(h * w / 2).max(1)) {
                grid[[rng.gen_range(0..h), rng.gen_range(0..w)]] = true;
            }
            m = BinaryMask::new(grid);
            if m.is_all_background() {
                continue;
            }
            let comp = largest_component(&m, Connectivity::Eight);
            let (r0, c0) = center_point(&comp).unwrap();
            // Re-embed with a 3-pixel background margin on every side.
            let padded = BinaryMask::from_fn(h + 6, w + 6, |r, c| {
                r >= 3 && c >= 3 && r < h + 3 && c < w + 3 && comp.get(r - 3, c - 3)
            });
            let (r1, c1) = center_point(&padded).unwrap();
            assert_eq!((r1, c1), (r0 + 3, c0 + 3), "padding moved the center");
        }
    }

    #[test]
    fn random_point_is_deterministic_per_seed() {
        let m = mask_from_pixels(4, 4, &[(0, 0), (1, 2), (3, 3), (2, 1)]);
        let a = random_point(&m, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = random_point(&m, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
        let single = mask_from_pixels(4, 4, &[(2, 2)]);
        for seed in 0..20 {
            let p = random_point(&single, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(p, (2, 2));
        }
    }

    #[test]
    fn random_point_is_uniform_over_component() {
        // 10-pixel component, 10^4 draws: frequencies within ±3σ and a
        // chi-square goodness-of-fit at p > 0.01.
        let pixels: Vec<(usize, usize)> = vec![
            (0, 0),
            (0, 1),
            (1, 1),
            (2, 1),
            (2, 2),
            (3, 2),
            (3, 3),
            (4, 3),
            (4, 4),
            (5, 4),
        ];
        let m = mask_from_pixels(6, 6, &pixels);
        let n = 10_000usize;
        let mut counts = std::collections::HashMap::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..n {
            let p = random_point(&m, &mut rng).unwrap();
            *counts.entry(p).or_insert(0usize) += 1;
        }
        let expected = n as f64 / pixels.len() as f64;
        let sigma = (n as f64 * 0.1 * 0.9).sqrt();
        let mut chi2 = 0.0;
        for px in &pixels {
            let c = *counts.get(px).unwrap_or(&0) as f64;
            assert!(
                (c - expected).abs() <= 3.0 * sigma,
                "pixel {px:?} count {c} outside 3 sigma of {expected}"
            );
            chi2 += (c - expected) * (c - expected) / expected;
        }
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let crit = ChiSquared::new((pixels.len() - 1) as f64)
            .unwrap()
            .inverse_cdf(0.99);
        assert!(
            chi2 < crit,
            "chi-square {chi2} exceeds the 99th percentile {crit}"
        );
    }

    #[test]
    fn extract_prompts_on_background_only_map_is_empty() {
        let mut prob = Array3::<f64>::zeros((4, 4, 3));
        prob.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = extract_prompts(
            prob.view(),
            &[PromptMode::Center, PromptMode::Random],
            Connectivity::Eight,
            &mut rng,
            Some(1),
        );
        assert!(ps.is_empty());
    }

    #[test]
    fn extract_prompts_single_blob_center() {
        // 2-class map with a 3×3 blob of class 1 at rows/cols 1..4
        let mut prob = Array3::<f64>::zeros((6, 6, 2));
        for r in 0..6 {
            for c in 0..6 {
                let fg = (1..4).contains(&r) && (1..4).contains(&c);
                prob[[r, c, 1]] = if fg { 0.9 } else { 0.1 };
                prob[[r, c, 0]] = 1.0 - prob[[r, c, 1]];
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = extract_prompts(
            prob.view(),
            &[PromptMode::Center],
            Connectivity::Eight,
            &mut rng,
            None,
        );
        assert_eq!(ps.points.len(), 1);
        let p = ps.points[0];
        assert_eq!(
            (p.row, p.col, p.class_id, p.mode),
            (2, 2, 1, PromptMode::Center)
        );
    }

    #[test]
    fn extract_prompts_multiclass_emits_one_point_per_class_and_mode() {
        // 4-class map with three separated blobs
        let mut prob = Array3::<f64>::zeros((12, 12, 4));
        prob.slice_mut(ndarray::s![.., .., 0]).fill(1.0);
        let blobs = [(1usize, 1usize, 1usize), (1, 8, 2), (8, 4, 3)];
        for &(r0, c0, cls) in &blobs {
            for r in r0..r0 + 3 {
                for c in c0..c0 + 3 {
                    for k in 0..4 {
                        prob[[r, c, k]] = if k == cls { 0.97 } else { 0.01 };
                    }
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = extract_prompts(
            prob.view(),
            &[PromptMode::Center, PromptMode::Random],
            Connectivity::Eight,
            &mut rng,
            Some(2),
        );
        assert_eq!(ps.points.len(), 6, "one point per (class, mode)");
        for cls in 1..4 {
            for mode in [PromptMode::Center, PromptMode::Random] {
                let matches: Vec<_> = ps
                    .points
                    .iter()
                    .filter(|p| p.class_id == cls && p.mode == mode)
                    .collect();
                assert_eq!(matches.len(), 1, "class {cls} {mode:?}");
            }
        }
    }

    #[test]
    fn emitted_points_lie_inside_their_class_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let h = rng.gen_range(3..14);
            let w = rng.gen_range(3..14);
            let c = rng.gen_range(2..5);
            let mut prob = Array3::<f64>::zeros((h, w, c));
            for r in 0..h {
                for col in 0..w {
                    let mut rest = 1.0;
                    for k in 0..c - 1 {
                        let v = rng.gen_range(0.0..rest);
                        prob[[r, col, k]] = v;
                        rest -= v;
                    }
                    prob[[r, col, c - 1]] = rest;
                }
            }
            let ps = extract_prompts(
                prob.view(),
                &[PromptMode::Center, PromptMode::Random],
                Connectivity::Eight,
                &mut rng,
                Some(1),
            );
            let classes = argmax_map(prob.view());
            for p in &ps.points {
                let mask = class_mask(&classes.view(), p.class_id);
                let comp = largest_component(&mask, Connectivity::Eight);
                assert!(
                    comp.get(p.row, p.col),
                    "point {:?} outside largest component of class {}",
                    (p.row, p.col),
                    p.class_id
                );
            }
        }
    }

    #[test]
    fn component_counts_match_union_find_oracle_exhaustively() {
        // Independent oracle: union-find over all 16-bit 4×4 masks.
        fn oracle_count(bits: u16, connectivity: Connectivity) -> usize {
            let idx = |r: usize, c: usize| r * 4 + c;
            let mut parent: Vec<usize> = (0..16).collect();
            fn find(p: &mut Vec<usize>, x: usize) -> usize {
                if p[x] != x {
                    let r = find(p, p[x]);
                    p[x] = r;
                }
                p[x]
            }
            let set = |bits: u16, r: usize, c: usize| bits >> (r * 4 + c) & 1 == 1;
            for r in 0..4 {
                for c in 0..4 {
                    if !set(bits, r, c) {
                        continue;
                    }
                    for &(dr, dc) in connectivity.offsets() {
                        let (nr, nc) = (r as isize + dr, c as isize + dc);
                        if nr < 0 || nc < 0 || nr >= 4 || nc >= 4 {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        if set(bits, nr, nc) {
                            let (a, b) =
                                (find(&mut parent, idx(r, c)), find(&mut parent, idx(nr, nc)));
                            parent[a] = b;
                        }
                    }
                }
            }
            let mut roots = std::collections::HashSet::new();
            for r in 0..4 {
                for c in 0..4 {
                    if set(bits, r, c) {
                        roots.insert(find(&mut parent, idx(r, c)));
                    }
                }
            }
            roots.len()
        }
        for bits in 0..=u16::MAX {
            let m = BinaryMask::from_fn(4, 4, |r, c| bits >> (r * 4 + c) & 1 == 1);
            for conn in [Connectivity::Four, Connectivity::Eight] {
                assert_eq!(
                    connected_components(&m, conn).num_components(),
                    oracle_count(bits, conn),
                    "mask {bits:#018b} connectivity {conn:?}"
                );
            }
        }
    }

    #[test]
    fn squared_edt_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..60 {
            let h = rng.gen_range(1..12);
            let w = rng.gen_range(1..12);
            let feature = Array2::from_shape_fn((h, w), |_| rng.gen_bool(0.25));
            let (sy, sx) = if trial % 2 == 0 {
                (1.0, 1.0)
            } else {
                (1.37, 0.8)
            };
            let dt = squared_edt(&feature, (sy, sx));
            for r in 0..h {
                for c in 0..w {
                    let mut best = f64::INFINITY;
                    for fr in 0..h {
                        for fc in 0..w {
                            if feature[[fr, fc]] {
                                let dy = (r as f64 - fr as f64) * sy;
                                let dx = (c as f64 - fc as f64) * sx;
                                best = best.min(dy * dy + dx * dx);
                            }
                        }
                    }
                    let got = dt[[r, c]];
                    if best.is_infinite() {
                        assert!(got.is_infinite());
                    } else {
                        assert!(
                            (got - best).abs() <= 1e-9 * best.max(1.0),
                            "edt mismatch at ({r},{c}): {got} vs {best}"
                        );
                    }
                }
            }
        }
    }
}
