//! Segmentation metrics: IoU variants over a threshold grid and streaming,
//! mergeable pixel-level average precision.
//!
//! Everything here works on probabilities in `[0, 1]`; logits are squashed
//! with the logistic function at this boundary. A pixel is predicted
//! foreground at threshold `t` iff `p >= t`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::BinaryMask;

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-pixel foreground probabilities, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl ProbabilityMap {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Result<Self> {
        if values.len() != (width * height) as usize {
            return Err(Error::input("probability map size does not match its dimensions"));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::input("probabilities must lie in [0, 1]"));
        }
        Ok(Self { width, height, values })
    }

    pub fn from_logits(width: u32, height: u32, logits: &[f32]) -> Result<Self> {
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("non-finite logits"));
        }
        Self::new(width, height, logits.iter().map(|&x| sigmoid(x)).collect())
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("threshold {t} outside (0, 1)")))
    }
}

pub fn binarize(probs: &ProbabilityMap, t: f64) -> Result<BinaryMask> {
    check_threshold(t)?;
    BinaryMask::from_bools(
        probs.width,
        probs.height,
        probs.values.iter().map(|&p| p as f64 >= t).collect(),
    )
}

fn check_same(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::input(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
    }
    Ok(())
}

fn ratio(intersection: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

pub fn iou_fg(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    Ok(Confusion::from_masks(pred, gt).iou_fg())
}

pub fn iou_bin(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    Ok(Confusion::from_masks(pred, gt).iou_bin())
}

/// Unweighted mean; `None` for an empty list.
pub fn miou(per_class: &[f64]) -> Option<f64> {
    if per_class.is_empty() {
        None
    } else {
        Some(per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn from_masks(pred: &BinaryMask, gt: &BinaryMask) -> Self {
        let mut c = Confusion::default();
        for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
            match (p, g) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn iou_fg(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp + self.fn_)
    }

    pub fn iou_bg(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp + self.fn_)
    }

    pub fn iou_bin(&self) -> f64 {
        0.5 * (self.iou_fg() + self.iou_bg())
    }

    fn add(&mut self, o: &Confusion) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Ascending thresholds strictly inside `(0, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdGrid(Vec<f64>);

impl ThresholdGrid {
    /// `k` evenly spaced points `i / (k + 1)`, `i = 1..=k`.
    pub fn uniform(k: usize) -> Self {
        Self((1..=k).map(|i| i as f64 / (k + 1) as f64).collect())
    }

    /// The grid used for AP.
    pub fn ap_default() -> Self {
        Self::uniform(256)
    }

    /// `0.1, 0.2, ..., 0.9`.
    pub fn deciles() -> Self {
        Self((1..=9).map(|i| i as f64 / 10.0).collect())
    }

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::config("threshold grid is empty"));
        }
        for &t in &values {
            check_threshold(t).map_err(|e| Error::config(e.to_string()))?;
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("threshold grid must be strictly ascending"));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Number of thresholds `t` with `p >= t`.
    fn rank(&self, p: f32) -> usize {
        let p = p as f64;
        self.0.partition_point(|&t| t <= p)
    }

    /// Per-threshold confusion counts of one image. Pixels are bucketed by
    /// how many thresholds they pass, then the buckets are suffix-summed.
    fn confusions(&self, probs: &[f32], gt: &[bool]) -> Vec<Confusion> {
        let k = self.0.len();
        let mut pos = vec![0u64; k + 1];
        let mut neg = vec![0u64; k + 1];
        for (&p, &g) in probs.iter().zip(gt) {
            let r = self.rank(p);
            if g {
                pos[r] += 1;
            } else {
                neg[r] += 1;
            }
        }
        let total_pos: u64 = pos.iter().sum();
        let total_neg: u64 = neg.iter().sum();
        let mut out = vec![Confusion::default(); k];
        let (mut tp, mut fp) = (0u64, 0u64);
        // Threshold i is passed by every pixel with rank > i.
        for i in (0..k).rev() {
            tp += pos[i + 1];
            fp += neg[i + 1];
            out[i] = Confusion {
                tp,
                fp,
                fn_: total_pos - tp,
                tn: total_neg - fp,
            };
        }
        out
    }
}

fn check_inputs(probs: &ProbabilityMap, gt: &BinaryMask) -> Result<()> {
    if probs.dims() != gt.dims() {
        return Err(Error::input(format!("probabilities {:?} vs ground truth {:?}", probs.dims(), gt.dims())));
    }
    Ok(())
}

/// Pooled pixel-level average precision over a fixed threshold grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApAccumulator {
    grid: ThresholdGrid,
    counts: Vec<Confusion>,
}

impl Default for ApAccumulator {
    fn default() -> Self {
        Self::new(ThresholdGrid::ap_default())
    }
}

impl ApAccumulator {
    pub fn new(grid: ThresholdGrid) -> Self {
        let counts = vec![Confusion::default(); grid.len()];
        Self { grid, counts }
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn counts(&self) -> &[Confusion] {
        &self.counts
    }

    pub fn accumulate(&mut self, probs: &ProbabilityMap, gt: &BinaryMask) -> Result<()> {
        check_inputs(probs, gt)?;
        for (c, d) in self.counts.iter_mut().zip(self.grid.confusions(&probs.values, gt.as_slice())) {
            c.add(&d);
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ApAccumulator) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::config("cannot merge AP accumulators with different threshold grids"));
        }
        for (c, d) in self.counts.iter_mut().zip(&other.counts) {
            c.add(d);
        }
        Ok(())
    }

    /// Precision-recall points sorted by ascending recall. Thresholds with
    /// no predicted pixels are skipped; among points with equal recall the
    /// one from the highest threshold is kept.
    pub fn curve(&self) -> Vec<(f64, f64)> {
        let mut pts = Vec::new();
        for c in self.counts.iter().rev() {
            let predicted = c.tp + c.fp;
            let positives = c.tp + c.fn_;
            if predicted == 0 || positives == 0 {
                continue;
            }
            let recall = c.tp as f64 / positives as f64;
            let precision = c.tp as f64 / predicted as f64;
            if pts.last().is_some_and(|&(r, _)| r >= recall) {
                continue;
            }
            pts.push((recall, precision));
        }
        pts
    }

    /// Area under the precision-recall curve by composite Simpson
    /// integration over recall. The curve is extended flat to recall 0.
    /// `None` when no positive pixel was seen or nothing was ever predicted.
    pub fn finalize(&self) -> Option<f64> {
        let pts = self.curve();
        let first = pts.first()?;
        let mut x = vec![0.0];
        let mut y = vec![first.1];
        for &(r, p) in &pts {
            x.push(r);
            y.push(p);
        }
        Some(simpson(&x, &y).clamp(0.0, 1.0))
    }
}

/// Composite Simpson's rule on an irregular grid; the last interval falls
/// back to the trapezoid rule when the interval count is odd, and so does
/// any pair containing a zero-width interval.
pub fn simpson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().saturating_sub(1);
    let mut total = 0.0;
    let mut i = 0;
    while i + 2 <= n {
        let h0 = x[i + 1] - x[i];
        let h1 = x[i + 2] - x[i + 1];
        if h0 == 0.0 || h1 == 0.0 {
            total += 0.5 * h0 * (y[i] + y[i + 1]) + 0.5 * h1 * (y[i + 1] + y[i + 2]);
        } else {
            let hs = h0 + h1;
            total += hs / 6.0
                * ((2.0 - h1 / h0) * y[i] + hs * hs / (h0 * h1) * y[i + 1] + (2.0 - h0 / h1) * y[i + 2]);
        }
        i += 2;
    }
    if i < n {
        total += 0.5 * (x[i + 1] - x[i]) * (y[i] + y[i + 1]);
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMetric {
    #[default]
    Miou,
    IouFg,
    IouBin,
}

impl std::str::FromStr for TaskMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "miou" | "mIoU" => Ok(TaskMetric::Miou),
            "iou_fg" | "IoU_FG" => Ok(TaskMetric::IouFg),
            "iou_bin" | "IoU_BIN" => Ok(TaskMetric::IouBin),
            _ => Err(Error::config(format!("unknown metric {s:?}"))),
        }
    }
}

/// Per-threshold confusion counts, partitioned by a key (a class name or a
/// sample id) so that mean IoU can be formed over keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouAccumulator {
    grid: ThresholdGrid,
    per_key: BTreeMap<String, Vec<Confusion>>,
}

impl IouAccumulator {
    pub fn new(grid: ThresholdGrid) -> Self {
        Self {
            grid,
            per_key: BTreeMap::new(),
        }
    }

    pub fn grid(&self) -> &ThresholdGrid {
        &self.grid
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.per_key.keys().map(String::as_str)
    }

    pub fn accumulate(&mut self, key: &str, probs: &ProbabilityMap, gt: &BinaryMask) -> Result<()> {
        check_inputs(probs, gt)?;
        let fresh = self.grid.confusions(&probs.values, gt.as_slice());
        self.add_counts(key, &fresh);
        Ok(())
    }

    /// Add an already binarized prediction at every threshold.
    pub fn accumulate_binary(&mut self, key: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
        check_same(pred, gt)?;
        let c = Confusion::from_masks(pred, gt);
        self.add_counts(key, &vec![c; self.grid.len()]);
        Ok(())
    }

    fn add_counts(&mut self, key: &str, counts: &[Confusion]) {
        let k = self.grid.len();
        let slot = self
            .per_key
            .entry(key.to_string())
            .or_insert_with(|| vec![Confusion::default(); k]);
        for (c, d) in slot.iter_mut().zip(counts) {
            c.add(d);
        }
    }

    pub fn merge(&mut self, other: &IouAccumulator) -> Result<()> {
        if self.grid != other.grid {
            return Err(Error::config("cannot merge IoU accumulators with different threshold grids"));
        }
        for (key, counts) in &other.per_key {
            self.add_counts(key, counts);
        }
        Ok(())
    }

    fn pooled(&self, i: usize) -> Confusion {
        let mut c = Confusion::default();
        for counts in self.per_key.values() {
            c.add(&counts[i]);
        }
        c
    }

    pub fn key_iou(&self, key: &str, i: usize) -> Option<f64> {
        self.per_key.get(key).map(|c| c[i].iou_fg())
    }

    /// Metric value at grid index `i`; `None` before any data.
    pub fn value_at(&self, metric: TaskMetric, i: usize) -> Option<f64> {
        if self.per_key.is_empty() {
            return None;
        }
        Some(match metric {
            TaskMetric::Miou => {
                let ious: Vec<f64> = self.per_key.values().map(|c| c[i].iou_fg()).collect();
                miou(&ious).expect("non-empty")
            }
            TaskMetric::IouFg => self.pooled(i).iou_fg(),
            TaskMetric::IouBin => self.pooled(i).iou_bin(),
        })
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        self.grid
            .values()
            .iter()
            .position(|&g| g == t)
            .ok_or_else(|| Error::config(format!("threshold {t} is not on the grid")))
    }

    /// Grid threshold maximizing `metric`; ties go to the smallest threshold.
    pub fn best_threshold(&self, metric: TaskMetric) -> Option<f64> {
        let mut best: Option<(f64, f64)> = None;
        for (i, &t) in self.grid.values().iter().enumerate() {
            let v = self.value_at(metric, i)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((t, v));
            }
        }
        best.map(|(t, _)| t)
    }

    pub fn sweep(&self) -> Vec<SweepPoint> {
        (0..self.grid.len())
            .filter_map(|i| {
                Some(SweepPoint {
                    threshold: self.grid.values()[i],
                    miou: self.value_at(TaskMetric::Miou, i)?,
                    iou_fg: self.value_at(TaskMetric::IouFg, i)?,
                    iou_bin: self.value_at(TaskMetric::IouBin, i)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub miou: f64,
    pub iou_fg: f64,
    pub iou_bin: f64,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("threshold,miou,iou_fg,iou_bin\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.threshold, p.miou, p.iou_fg, p.iou_bin);
    }
    out
}

/// IoU counts plus pooled AP, mergeable across workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub iou: IouAccumulator,
    pub ap: ApAccumulator,
    pub n_images: u64,
    pub n_pixels: u64,
}

impl Default for MetricAccumulator {
    fn default() -> Self {
        Self::new(ThresholdGrid::deciles())
    }
}

impl MetricAccumulator {
    pub fn new(iou_grid: ThresholdGrid) -> Self {
        Self {
            iou: IouAccumulator::new(iou_grid),
            ap: ApAccumulator::default(),
            n_images: 0,
            n_pixels: 0,
        }
    }

    pub fn accumulate(&mut self, key: &str, probs: &ProbabilityMap, gt: &BinaryMask) -> Result<()> {
        self.iou.accumulate(key, probs, gt)?;
        self.ap.accumulate(probs, gt)?;
        self.n_images += 1;
        self.n_pixels += probs.values.len() as u64;
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) -> Result<()> {
        self.iou.merge(&other.iou)?;
        self.ap.merge(&other.ap)?;
        self.n_images += other.n_images;
        self.n_pixels += other.n_pixels;
        Ok(())
    }

    pub fn report(&self, metric: TaskMetric, threshold: f64) -> Result<MetricReport> {
        let i = self.iou.index_of(threshold)?;
        Ok(MetricReport {
            metric,
            value: self.iou.value_at(metric, i),
            threshold,
            n_images: self.n_images,
            n_pixels: self.n_pixels,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: TaskMetric,
    pub value: Option<f64>,
    pub threshold: f64,
    pub n_images: u64,
    pub n_pixels: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: u32, bits: &[u8]) -> BinaryMask {
        BinaryMask::from_values(w, bits.len() as u32 / w, bits).unwrap()
    }

    #[test]
    fn half_covered_region_has_half_iou() {
        let gt = mask(4, &[0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0]);
        let pred = mask(4, &[0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(iou_fg(&pred, &gt).unwrap(), 0.5);
        assert_eq!(iou_fg(&gt, &gt).unwrap(), 1.0);
    }

    #[test]
    fn empty_union_counts_as_perfect() {
        let e = BinaryMask::empty(3, 3);
        assert_eq!(iou_fg(&e, &e).unwrap(), 1.0);
        assert_eq!(iou_bin(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn binarize_rejects_bad_thresholds() {
        let p = ProbabilityMap::new(2, 1, vec![0.2, 0.9]).unwrap();
        assert!(binarize(&p, 0.0).is_err());
        assert!(binarize(&p, 1.0).is_err());
        assert_eq!(binarize(&p, 0.5).unwrap().count(), 1);
        assert_eq!(binarize(&p, 0.2).unwrap().count(), 2);
    }

    #[test]
    fn confusions_match_direct_counts() {
        let grid = ThresholdGrid::new(vec![0.25, 0.5, 0.75]).unwrap();
        let probs = [0.1f32, 0.25, 0.5, 0.8, 0.6, 0.9];
        let gt = [false, true, true, false, true, true];
        let c = grid.confusions(&probs, &gt);
        for (i, &t) in grid.values().iter().enumerate() {
            let mut d = Confusion::default();
            for (&p, &g) in probs.iter().zip(&gt) {
                match (p as f64 >= t, g) {
                    (true, true) => d.tp += 1,
                    (true, false) => d.fp += 1,
                    (false, true) => d.fn_ += 1,
                    (false, false) => d.tn += 1,
                }
            }
            assert_eq!(c[i], d, "threshold {t}");
        }
    }

    #[test]
    fn perfect_separation_gives_unit_ap() {
        let gt = mask(4, &[1, 0, 1, 0, 1, 1, 0, 0]);
        let probs = ProbabilityMap::new(4, 2, gt.as_slice().iter().map(|&g| g as u8 as f32).collect()).unwrap();
        let mut acc = ApAccumulator::default();
        acc.accumulate(&probs, &gt).unwrap();
        assert_eq!(acc.finalize(), Some(1.0));
    }

    #[test]
    fn no_positives_gives_no_ap() {
        let gt = BinaryMask::empty(2, 2);
        let probs = ProbabilityMap::new(2, 2, vec![0.3; 4]).unwrap();
        let mut acc = ApAccumulator::default();
        acc.accumulate(&probs, &gt).unwrap();
        assert_eq!(acc.finalize(), None);
    }

    #[test]
    fn simpson_is_exact_for_quadratics() {
        let x = [0.0, 0.1, 0.35, 0.5, 0.9];
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v * v - v + 2.0).collect();
        let exact = |v: f64| v * v * v - 0.5 * v * v + 2.0 * v;
        assert!((simpson(&x[..5], &y) - exact(0.9)).abs() < 1e-12);
    }

    #[test]
    fn grid_mismatch_refuses_merge() {
        let mut a = ApAccumulator::new(ThresholdGrid::uniform(8));
        let b = ApAccumulator::new(ThresholdGrid::uniform(9));
        assert!(matches!(a.merge(&b), Err(Error::Config(_))));
        let mut c = IouAccumulator::new(ThresholdGrid::uniform(8));
        assert!(c.merge(&IouAccumulator::new(ThresholdGrid::deciles())).is_err());
    }

    #[test]
    fn ties_pick_smallest_threshold() {
        let gt = mask(2, &[1, 0, 1, 1]);
        let probs = ProbabilityMap::new(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        let mut acc = IouAccumulator::new(ThresholdGrid::deciles());
        acc.accumulate("a", &probs, &gt).unwrap();
        assert_eq!(acc.best_threshold(TaskMetric::Miou), Some(0.1));
        let mut single = IouAccumulator::new(ThresholdGrid::new(vec![0.4]).unwrap());
        assert_eq!(single.best_threshold(TaskMetric::Miou), None);
        single.accumulate("a", &probs, &gt).unwrap();
        assert_eq!(single.best_threshold(TaskMetric::Miou), Some(0.4));
    }

    #[test]
    fn miou_averages_per_key() {
        let mut acc = IouAccumulator::new(ThresholdGrid::new(vec![0.5]).unwrap());
        let gt = mask(2, &[1, 1, 0, 0]);
        acc.accumulate_binary("a", &gt, &gt).unwrap();
        acc.accumulate_binary("b", &mask(2, &[0, 0, 1, 1]), &gt).unwrap();
        assert_eq!(acc.value_at(TaskMetric::Miou, 0), Some(0.5));
        // Pooled: tp 2, fp 2, fn 2.
        assert_eq!(acc.value_at(TaskMetric::IouFg, 0), Some(2.0 / 6.0));
    }
}
