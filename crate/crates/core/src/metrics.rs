//! Ranking and localization metrics for anomaly scores.
//!
//! AUROC, average precision and F1-max operate on a [`ScoredSet`]; PRO
//! operates on a [`RegionSet`] built from score maps and binary masks.
//!
//! Tie conventions: AUROC gives half credit to tied positive/negative pairs,
//! AP enters all tied items together, and F1-max thresholds at each distinct
//! score with positives predicted at `score >= t`.

use serde::Serialize;

use crate::error::{Error, Result};

/// Default false-positive-rate cap for PRO.
pub const PRO_FPR_LIMIT: f64 = 0.3;
/// Default number of uniformly spaced PRO thresholds.
pub const PRO_THRESHOLDS: usize = 100;

/// Scores paired with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::UndefinedMetric("empty score set".into()));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score {i} is {}", scores[i])));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }

    /// Groups of tied scores as `(positives, negatives)`, ascending by score.
    fn tie_groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&i, &j| self.scores[i].total_cmp(&self.scores[j]));
        let mut groups: Vec<(usize, usize)> = Vec::new();
        let mut prev = None;
        for i in order {
            let s = self.scores[i];
            if prev != Some(s) {
                groups.push((0, 0));
                prev = Some(s);
            }
            let g = groups.last_mut().expect("group pushed");
            if self.labels[i] {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        groups
    }

    fn require_positive(&self, metric: &str) -> Result<()> {
        if self.positives() == 0 {
            return Err(Error::UndefinedMetric(format!("{metric}: no positive labels")));
        }
        Ok(())
    }
}

/// Area under the ROC curve in the Mann-Whitney form.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (pos, neg) = (s.positives(), s.negatives());
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auroc: needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    // Counted in half-units so the sum stays an exact integer.
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    for (p, n) in s.tie_groups() {
        twice_u += p as u128 * (2 * neg_below + n as u128);
        neg_below += n as u128;
    }
    Ok(twice_u as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Average precision with tied scores entering the ranking together.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    s.require_positive("average_precision")?;
    let total = s.positives() as f64;
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (p, n) in s.tie_groups().into_iter().rev() {
        tp += p;
        fp += n;
        if p > 0 {
            ap += (tp as f64 / (tp + fp) as f64) * (p as f64 / total);
        }
    }
    Ok(ap)
}

/// Maximum F1 over thresholds at each distinct score.
pub fn f1_max(s: &ScoredSet) -> Result<f64> {
    s.require_positive("f1_max")?;
    let total = s.positives() as f64;
    let (mut tp, mut fp, mut best) = (0usize, 0usize, 0.0f64);
    for (p, n) in s.tie_groups().into_iter().rev() {
        tp += p;
        fp += n;
        if tp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / total;
        best = best.max(2.0 * precision * recall / (precision + recall));
    }
    Ok(best)
}

/// Threshold placement for PRO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    /// `n` thresholds spaced linearly over `[min, max]` of the scores.
    Uniform(usize),
    /// One threshold at every distinct score.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProConfig {
    pub fpr_limit: f64,
    pub thresholds: Thresholds,
}

impl Default for ProConfig {
    fn default() -> Self {
        Self {
            fpr_limit: PRO_FPR_LIMIT,
            thresholds: Thresholds::Uniform(PRO_THRESHOLDS),
        }
    }
}

/// Score maps with their ground truth split into 4-connected regions.
///
/// Regions never span two maps. Negative pixels from every map share one
/// false-positive-rate denominator.
#[derive(Debug, Clone, Default)]
pub struct RegionSet {
    scores: Vec<f64>,
    region: Vec<Option<usize>>,
    region_sizes: Vec<usize>,
}

impl RegionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(scores: &[f64], mask: &[bool], h: usize, w: usize) -> Result<Self> {
        let mut set = Self::new();
        set.push_map(scores, mask, h, w)?;
        Ok(set)
    }

    /// Appends one `h x w` score map and its mask, both row-major.
    pub fn push_map(&mut self, scores: &[f64], mask: &[bool], h: usize, w: usize) -> Result<()> {
        if scores.len() != h * w || mask.len() != h * w {
            return Err(Error::Dimension(format!(
                "map {h}x{w} needs {} values, got {} scores and {} mask pixels",
                h * w,
                scores.len(),
                mask.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("pixel score {i} is {}", scores[i])));
        }
        let mut region = vec![None; h * w];
        let mut stack = Vec::new();
        for start in 0..h * w {
            if !mask[start] || region[start].is_some() {
                continue;
            }
            let id = self.region_sizes.len();
            let mut size = 0;
            region[start] = Some(id);
            stack.push(start);
            while let Some(i) = stack.pop() {
                size += 1;
                let (y, x) = (i / w, i % w);
                let mut visit = |j: usize| {
                    if mask[j] && region[j].is_none() {
                        region[j] = Some(id);
                        stack.push(j);
                    }
                };
                if y > 0 {
                    visit(i - w);
                }
                if y + 1 < h {
                    visit(i + w);
                }
                if x > 0 {
                    visit(i - 1);
                }
                if x + 1 < w {
                    visit(i + 1);
                }
            }
            self.region_sizes.push(size);
        }
        self.scores.extend_from_slice(scores);
        self.region.extend(region);
        Ok(())
    }

    pub fn num_regions(&self) -> usize {
        self.region_sizes.len()
    }

    pub fn region_sizes(&self) -> &[usize] {
        &self.region_sizes
    }

    /// Region id of every pixel, `None` for negatives.
    pub fn assignments(&self) -> &[Option<usize>] {
        &self.region
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn negatives(&self) -> usize {
        self.region.iter().filter(|r| r.is_none()).count()
    }

    /// Ascending thresholds for the configured placement.
    pub fn thresholds(&self, mode: Thresholds) -> Result<Vec<f64>> {
        let (lo, hi) = self
            .scores
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &s| (lo.min(s), hi.max(s)));
        match mode {
            Thresholds::Uniform(0) => Err(Error::Config("PRO needs at least one threshold".into())),
            Thresholds::Uniform(1) => Ok(vec![lo]),
            Thresholds::Uniform(n) => Ok((0..n)
                .map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 })
                .collect()),
            Thresholds::Exact => {
                let mut t = self.scores.clone();
                t.sort_by(f64::total_cmp);
                t.dedup();
                Ok(t)
            }
        }
    }

    /// `(fpr, mean region overlap)` with pixels predicted at `score > t`, per threshold.
    pub fn curve(&self, thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
        let negatives = self.negatives();
        if self.num_regions() == 0 {
            return Err(Error::UndefinedMetric("pro: ground truth has no positive pixels".into()));
        }
        if negatives == 0 {
            return Err(Error::UndefinedMetric("pro: ground truth has no negative pixels".into()));
        }
        let t = thresholds.len();
        // hist[c]: pixels exceeding exactly the first c thresholds.
        let mut neg_hist = vec![0usize; t + 1];
        let mut region_hist = vec![0usize; self.num_regions() * (t + 1)];
        for (&s, r) in self.scores.iter().zip(&self.region) {
            let c = thresholds.partition_point(|&th| th < s);
            match r {
                Some(id) => region_hist[id * (t + 1) + c] += 1,
                None => neg_hist[c] += 1,
            }
        }
        let mut overlap_sum = vec![0.0f64; t];
        for (id, &size) in self.region_sizes.iter().enumerate() {
            let hist = &region_hist[id * (t + 1)..(id + 1) * (t + 1)];
            let mut above = 0;
            for i in (0..t).rev() {
                above += hist[i + 1];
                overlap_sum[i] += above as f64 / size as f64;
            }
        }
        let mut fp = 0;
        let mut points = vec![(0.0, 0.0); t];
        for i in (0..t).rev() {
            fp += neg_hist[i + 1];
            points[i] = (fp as f64 / negatives as f64, overlap_sum[i] / self.num_regions() as f64);
        }
        Ok(points)
    }
}

/// Normalized area under a PRO curve up to `fpr_limit`.
///
/// Points are sorted by FPR, joined by straight segments, cut at the limit
/// by interpolation and extended flat when they stop short of it.
pub fn integrate_pro_curve(points: &[(f64, f64)], fpr_limit: f64) -> Result<f64> {
    if !(fpr_limit > 0.0 && fpr_limit <= 1.0) {
        return Err(Error::Config(format!("fpr_limit {fpr_limit} outside (0, 1]")));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut area = 0.0;
    let mut prev = (0.0, 0.0);
    for &(x, y) in &pts {
        if x >= fpr_limit {
            if x > prev.0 {
                let y_cut = prev.1 + (y - prev.1) * (fpr_limit - prev.0) / (x - prev.0);
                area += (fpr_limit - prev.0) * (prev.1 + y_cut) / 2.0;
            }
            return Ok(area / fpr_limit);
        }
        area += (x - prev.0) * (prev.1 + y) / 2.0;
        prev = (x, y);
    }
    area += (fpr_limit - prev.0) * prev.1;
    Ok(area / fpr_limit)
}

/// Per-region overlap integrated over false-positive rate.
pub fn pro(set: &RegionSet, cfg: &ProConfig) -> Result<f64> {
    let thresholds = set.thresholds(cfg.thresholds)?;
    let points = set.curve(&thresholds)?;
    integrate_pro_curve(&points, cfg.fpr_limit)
}

/// A metric value, or the reason it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricValue {
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl MetricValue {
    /// Maps an undefined-metric error to a null value; other errors propagate.
    pub fn from_result(r: Result<f64>) -> Result<Self> {
        match r {
            Ok(v) => Ok(Self { value: Some(v), reason: None }),
            Err(Error::UndefinedMetric(reason)) => Ok(Self { value: None, reason: Some(reason) }),
            Err(e) => Err(e),
        }
    }
}

/// AUROC, AP and F1-max of one score set.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankingMetrics {
    pub auroc: MetricValue,
    pub ap: MetricValue,
    pub f1max: MetricValue,
}

impl RankingMetrics {
    pub fn compute(s: &ScoredSet) -> Result<Self> {
        Ok(Self {
            auroc: MetricValue::from_result(auroc(s))?,
            ap: MetricValue::from_result(average_precision(s))?,
            f1max: MetricValue::from_result(f1_max(s))?,
        })
    }
}
