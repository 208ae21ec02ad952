//! Pixel-level and target-level detection metrics, and the challenge
//! scoring formula with its published golden rows.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Benchmark parameter count for the efficiency score, in millions.
pub const PARAMS_BASE_M: f64 = 2.225;
/// Benchmark FLOP count for the efficiency score, in billions.
pub const FLOPS_BASE_G: f64 = 12.56;
/// A result is valid only while its false-alarm rate stays below this.
pub const FA_VALIDITY_LIMIT: f64 = 1e-4;
/// Maximum centroid distance for a detection to count, in pixels.
pub const MATCH_RADIUS_PX: f64 = 3.0;

// ---------------------------------------------------------------------------
// Connected components
// ---------------------------------------------------------------------------

/// One connected foreground region.
#[derive(Clone, Debug)]
pub struct Component {
    /// Member pixels as (y, x), in discovery order.
    pub pixels: Vec<(usize, usize)>,
    /// Unweighted mean of member coordinates, as (y, x).
    pub centroid: (f64, f64),
}

/// Extract 8-connected foreground components from a binary map, in
/// row-major discovery order.
pub fn label_components(mask: &Tensor<f32>) -> Result<Vec<Component>> {
    if mask.n() != 1 || mask.c() != 1 {
        return Err(Error::Data(format!(
            "expected one single-channel mask, got shape {:?}",
            mask.shape()
        )));
    }
    if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
        return Err(Error::Data("mask is not binary".into()));
    }
    let (h, w) = (mask.h(), mask.w());
    let at = |y: usize, x: usize| mask.at(0, 0, y, x) == 1.0;
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !at(sy, sx) || visited[sy * w + sx] {
                continue;
            }
            let mut pixels = Vec::new();
            let mut stack = vec![(sy, sx)];
            visited[sy * w + sx] = true;
            while let Some((y, x)) = stack.pop() {
                pixels.push((y, x));
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let (ny, nx) = (ny as usize, nx as usize);
                        if at(ny, nx) && !visited[ny * w + nx] {
                            visited[ny * w + nx] = true;
                            stack.push((ny, nx));
                        }
                    }
                }
            }
            let n = pixels.len() as f64;
            let cy = pixels.iter().map(|&(y, _)| y as f64).sum::<f64>() / n;
            let cx = pixels.iter().map(|&(_, x)| x as f64).sum::<f64>() / n;
            components.push(Component { pixels, centroid: (cy, cx) });
        }
    }
    Ok(components)
}

// ---------------------------------------------------------------------------
// Dataset metric accumulation
// ---------------------------------------------------------------------------

/// Streaming accumulator over (prediction, ground-truth) mask pairs. All
/// counts are integers, so accumulation order cannot change the result.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    inter: u64,
    pred_only: u64,
    gt_only: u64,
    matched: u64,
    gt_components: u64,
    false_pixels: u64,
    total_pixels: u64,
    per_image_iou: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold in one image pair.
    pub fn update(&mut self, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::Data(format!(
                "prediction extents {:?} do not match ground truth {:?}",
                pred.shape(),
                gt.shape()
            )));
        }
        let pred_comps = label_components(pred)?;
        let gt_comps = label_components(gt)?;

        let (mut inter, mut pred_only, mut gt_only) = (0u64, 0u64, 0u64);
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            match (p == 1.0, g == 1.0) {
                (true, true) => inter += 1,
                (true, false) => pred_only += 1,
                (false, true) => gt_only += 1,
                (false, false) => {}
            }
        }
        self.inter += inter;
        self.pred_only += pred_only;
        self.gt_only += gt_only;
        self.per_image_iou.push(if inter + pred_only + gt_only == 0 {
            100.0
        } else {
            100.0 * inter as f64 / (inter + pred_only + gt_only) as f64
        });

        // Globally nearest-first one-to-one matching: sort every in-radius
        // (ground truth, prediction) pair by centroid distance and take
        // pairs whose endpoints are still free. Index tie-breaks keep the
        // order total.
        let mut candidates = Vec::new();
        for (gi, g) in gt_comps.iter().enumerate() {
            for (pi, p) in pred_comps.iter().enumerate() {
                let (dy, dx) = (g.centroid.0 - p.centroid.0, g.centroid.1 - p.centroid.1);
                let dist = (dy * dy + dx * dx).sqrt();
                if dist <= MATCH_RADIUS_PX {
                    candidates.push((dist, gi, pi));
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut gt_used = vec![false; gt_comps.len()];
        let mut pred_used = vec![false; pred_comps.len()];
        for (_, gi, pi) in candidates {
            if !gt_used[gi] && !pred_used[pi] {
                gt_used[gi] = true;
                pred_used[pi] = true;
                self.matched += 1;
            }
        }
        self.gt_components += gt_comps.len() as u64;
        for (pi, comp) in pred_comps.iter().enumerate() {
            if !pred_used[pi] {
                self.false_pixels += comp.pixels.len() as u64;
            }
        }
        self.total_pixels += (pred.h() * pred.w()) as u64;
        Ok(())
    }

    /// Micro-averaged IoU percent (single global accumulation); 100 when
    /// neither side ever had foreground.
    pub fn iou_percent(&self) -> f64 {
        let union = self.inter + self.pred_only + self.gt_only;
        if union == 0 {
            100.0
        } else {
            100.0 * self.inter as f64 / union as f64
        }
    }

    /// Mean per-image IoU percent, the secondary macro statistic.
    pub fn macro_iou_percent(&self) -> f64 {
        if self.per_image_iou.is_empty() {
            100.0
        } else {
            self.per_image_iou.iter().sum::<f64>() / self.per_image_iou.len() as f64
        }
    }

    /// Detection rate percent; 100 when no ground-truth targets exist.
    pub fn pd_percent(&self) -> f64 {
        if self.gt_components == 0 {
            100.0
        } else {
            100.0 * self.matched as f64 / self.gt_components as f64
        }
    }

    /// False-alarm rate: pixels of unmatched predicted components over all
    /// pixels; 0 over an empty dataset.
    pub fn fa_rate(&self) -> f64 {
        if self.total_pixels == 0 {
            0.0
        } else {
            self.false_pixels as f64 / self.total_pixels as f64
        }
    }

    pub fn images(&self) -> usize {
        self.per_image_iou.len()
    }
}

fn accumulate(preds: &[Tensor<f32>], gts: &[Tensor<f32>]) -> Result<MetricAccumulator> {
    if preds.len() != gts.len() {
        return Err(Error::Data(format!(
            "{} predictions but {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut acc = MetricAccumulator::new();
    for (p, g) in preds.iter().zip(gts) {
        acc.update(p, g)?;
    }
    Ok(acc)
}

/// Dataset detection rate (percent) and false-alarm rate over paired masks.
pub fn pd_fa(preds: &[Tensor<f32>], gts: &[Tensor<f32>]) -> Result<(f64, f64)> {
    let acc = accumulate(preds, gts)?;
    Ok((acc.pd_percent(), acc.fa_rate()))
}

/// Dataset micro-averaged IoU (percent) over paired masks.
pub fn iou(preds: &[Tensor<f32>], gts: &[Tensor<f32>]) -> Result<f64> {
    Ok(accumulate(preds, gts)?.iou_percent())
}

// ---------------------------------------------------------------------------
// Challenge score
// ---------------------------------------------------------------------------

/// The three challenge score components, all on the 0–100 scale (negative
/// values are possible for very expensive models).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Score {
    /// Accuracy term: mean of IoU and Pd.
    pub s_p: f64,
    /// Efficiency term: 100 minus the mean normalized resource cost.
    pub s_e: f64,
    /// Final score: mean of the two terms.
    pub s_pe: f64,
}

/// Challenge score from accuracy percents and resource use (params in
/// millions, FLOPs in billions).
pub fn score(iou_percent: f64, pd_percent: f64, params_m: f64, flops_g: f64) -> Result<Score> {
    for (name, v) in [
        ("iou", iou_percent),
        ("pd", pd_percent),
        ("params", params_m),
        ("flops", flops_g),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Config(format!("score input {name} must be non-negative, got {v}")));
        }
    }
    let s_p = 0.5 * iou_percent + 0.5 * pd_percent;
    let s_e = 100.0 * (1.0 - (params_m / PARAMS_BASE_M + flops_g / FLOPS_BASE_G) / 2.0);
    Ok(Score { s_p, s_e, s_pe: 0.5 * s_p + 0.5 * s_e })
}

/// Published golden rows for the scoring formula, as
/// (label, IoU %, Pd %, params M, FLOPs G, published score). Each
/// reproduces through [`score`] within ±0.01.
pub const GOLDEN_SCORE_ROWS: &[(&str, f64, f64, f64, f64, f64)] = &[
    ("no-lfea", 34.27, 60.19, 0.016, 0.043, 73.35),
    ("no-lfd", 42.25, 59.43, 0.018, 0.059, 75.10),
    ("no-rft", 41.16, 58.30, 0.015, 0.061, 74.58),
    ("no-sbam", 41.98, 55.13, 0.020, 0.131, 73.79),
    ("lr-net", 42.54, 63.82, 0.020, 0.063, 76.24),
    ("no-eca", 34.47, 55.55, 0.020, 0.061, 72.16),
    ("se-r4", 41.49, 61.43, 0.029, 0.063, 75.28),
    ("se-r2", 42.99, 63.58, 0.038, 0.063, 76.09),
    ("cbam-k3-r4", 41.54, 56.65, 0.029, 0.071, 74.08),
    ("cbam-k3-r2", 43.23, 61.35, 0.038, 0.071, 75.58),
    ("cbam-k7-r4", 43.99, 61.82, 0.031, 0.104, 75.90),
    ("cbam-k7-r2", 43.82, 60.69, 0.040, 0.104, 75.47),
    ("lr-net-eca", 42.54, 63.82, 0.020, 0.063, 76.24),
    ("resize-256", 31.70, 36.16, 0.020, 0.063, 66.61),
    ("resize-512", 40.40, 46.63, 0.020, 0.253, 71.03),
    ("crop-256", 42.54, 63.82, 0.020, 0.063, 76.24),
    ("crop-512", 43.58, 60.27, 0.020, 0.253, 75.23),
    ("channels-x0.5", 37.77, 55.81, 0.006, 0.024, 73.28),
    ("channels-x2", 46.82, 62.58, 0.073, 0.192, 76.15),
    ("channels-x4", 51.81, 67.70, 0.276, 0.652, 75.48),
];

/// The one published row whose printed score does not recompute from its
/// own printed inputs: the formula yields 73.9152 for these values, 0.0152
/// above the printed 73.90 — outside the ±0.01 everything else meets.
pub const GOLDEN_SCORE_ROW_RESIZE768: (&str, f64, f64, f64, f64, f64) =
    ("resize-768", 44.57, 56.52, 0.020, 0.569, 73.90);

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// Everything an evaluation run reports.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub iou_percent: f64,
    pub macro_iou_percent: f64,
    pub pd_percent: f64,
    pub fa_rate: f64,
    pub params: u64,
    pub flops: u64,
    pub s_p: f64,
    pub s_e: f64,
    pub s_pe: f64,
    /// True iff the false-alarm rate is below [`FA_VALIDITY_LIMIT`].
    pub valid: bool,
}

impl EvalReport {
    pub fn new(acc: &MetricAccumulator, params: u64, flops: u64) -> Result<EvalReport> {
        let sc = score(
            acc.iou_percent(),
            acc.pd_percent(),
            params as f64 / 1e6,
            flops as f64 / 1e9,
        )?;
        Ok(EvalReport {
            iou_percent: acc.iou_percent(),
            macro_iou_percent: acc.macro_iou_percent(),
            pd_percent: acc.pd_percent(),
            fa_rate: acc.fa_rate(),
            params,
            flops,
            s_p: sc.s_p,
            s_e: sc.s_e,
            s_pe: sc.s_pe,
            valid: acc.fa_rate() < FA_VALIDITY_LIMIT,
        })
    }

    /// Single-line machine-readable record, `key=value` separated by spaces.
    pub fn record_line(&self) -> String {
        format!(
            "iou={} macro_iou={} pd={} fa={:e} params={} flops={} s_p={} s_e={} s_pe={} valid={}",
            self.iou_percent,
            self.macro_iou_percent,
            self.pd_percent,
            self.fa_rate,
            self.params,
            self.flops,
            self.s_p,
            self.s_e,
            self.s_pe,
            self.valid
        )
    }

    /// Multi-line human-readable table.
    pub fn human_table(&self) -> String {
        format!(
            "IoU (micro)  {:>10.2} %\n\
             IoU (macro)  {:>10.2} %\n\
             Pd           {:>10.2} %\n\
             Fa           {:>10.3e}\n\
             params       {:>10}   ({:.3} M)\n\
             FLOPs        {:>10}   ({:.3} G)\n\
             S_p          {:>10.2}\n\
             S_e          {:>10.2}\n\
             S_pe         {:>10.2}\n\
             valid        {:>10}",
            self.iou_percent,
            self.macro_iou_percent,
            self.pd_percent,
            self.fa_rate,
            self.params,
            self.params as f64 / 1e6,
            self.flops,
            self.flops as f64 / 1e9,
            self.s_p,
            self.s_e,
            self.s_pe,
            if self.valid { "yes" } else { "no" }
        )
    }
}
