//! Dense-prediction metrics. Each metric has an accumulator so a split can be
//! folded batch by batch; the free functions are single-shot conveniences.

use std::fmt::Write as _;
use std::path::Path;

use super::task::{Direction, TaskSpec};
use crate::error::{Error, Result};

/// Confusion counts over a split, `counts[gt * classes + pred]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    /// Tokens whose ground truth is `None` are skipped.
    pub fn update(&mut self, pred: &[usize], gt: &[Option<usize>]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("miou", &[pred.len()], &[gt.len()]));
        }
        for (&p, g) in pred.iter().zip(gt) {
            let Some(g) = *g else { continue };
            if p >= self.classes || g >= self.classes {
                return Err(Error::Contract(format!(
                    "label {} outside {} classes",
                    p.max(g),
                    self.classes
                )));
            }
            self.counts[g * self.classes + p] += 1;
        }
        Ok(())
    }

    /// IoU per class; `None` for classes absent from both pred and gt.
    pub fn ious(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.count(c, c);
                let gt_total: u64 = (0..self.classes).map(|p| self.count(c, p)).sum();
                let pred_total: u64 = (0..self.classes).map(|g| self.count(g, c)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::UndefinedMetric("mIoU over no labeled tokens".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn miou(pred: &[usize], gt: &[usize], classes: usize, ignore_index: Option<usize>) -> Result<f64> {
    let gt: Vec<Option<usize>> = gt.iter().map(|&g| (Some(g) != ignore_index).then_some(g)).collect();
    let mut cm = ConfusionMatrix::new(classes);
    cm.update(pred, &gt)?;
    cm.miou()
}

fn check_mask(op: &'static str, n: usize, mask: Option<&[bool]>) -> Result<()> {
    match mask {
        Some(m) if m.len() != n => Err(Error::shape(op, &[n], &[m.len()])),
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RmseAccumulator {
    sum_sq: f64,
    count: usize,
}

impl RmseAccumulator {
    pub fn update(&mut self, pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("rmse", &[pred.len()], &[gt.len()]));
        }
        check_mask("rmse mask", pred.len(), mask)?;
        for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                self.sum_sq += (p - g) * (p - g);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("RMSE over no valid elements".into()));
        }
        Ok((self.sum_sq / self.count as f64).sqrt())
    }
}

pub fn rmse(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let mut acc = RmseAccumulator::default();
    acc.update(pred, gt, mask)?;
    acc.value()
}

/// Angle between two 3-vectors in degrees; a zero `pred` counts as 90°.
pub fn angle_deg(pred: [f64; 3], gt: [f64; 3]) -> f64 {
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let (np, ng) = (norm(pred), norm(gt));
    if np == 0.0 || ng == 0.0 {
        return 90.0;
    }
    let dot = (pred[0] * gt[0] + pred[1] * gt[1] + pred[2] * gt[2]) / (np * ng);
    dot.clamp(-1.0, 1.0).acos().to_degrees()
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AngularAccumulator {
    sum: f64,
    count: usize,
}

impl AngularAccumulator {
    /// `pred` and `gt` are flat `[N x 3]`.
    pub fn update(&mut self, pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<()> {
        if pred.len() != gt.len() || !pred.len().is_multiple_of(3) {
            return Err(Error::shape("mean_angular_error", &[pred.len()], &[gt.len()]));
        }
        check_mask("mean_angular_error mask", pred.len() / 3, mask)?;
        for (i, (p, g)) in pred.chunks_exact(3).zip(gt.chunks_exact(3)).enumerate() {
            if mask.is_none_or(|m| m[i]) {
                if g.iter().all(|&v| v == 0.0) {
                    return Err(Error::Contract(format!("zero ground-truth normal at token {i}")));
                }
                self.sum += angle_deg([p[0], p[1], p[2]], [g[0], g[1], g[2]]);
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        if self.count == 0 {
            return Err(Error::UndefinedMetric("angular error over no valid tokens".into()));
        }
        Ok(self.sum / self.count as f64)
    }
}

pub fn mean_angular_error(pred: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    let mut acc = AngularAccumulator::default();
    acc.update(pred, gt, mask)?;
    acc.value()
}

pub const MAXF_THRESHOLDS: usize = 255;

/// Threshold `i` in `1..=255`, i.e. `i / 256`.
pub fn maxf_threshold(i: usize) -> f64 {
    i as f64 / 256.0
}

/// Histogram of scores over the 256 cells between thresholds. A score `p`
/// passes threshold `i / 256` exactly when `i <= floor(256 p)`, and `256 p`
/// is exact in binary floating point.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxFAccumulator {
    positives: Vec<u64>,
    negatives: Vec<u64>,
}

impl Default for MaxFAccumulator {
    fn default() -> Self {
        Self {
            positives: vec![0; MAXF_THRESHOLDS + 1],
            negatives: vec![0; MAXF_THRESHOLDS + 1],
        }
    }
}

impl MaxFAccumulator {
    pub fn update(&mut self, probs: &[f64], gt: &[bool]) -> Result<()> {
        if probs.len() != gt.len() {
            return Err(Error::shape("max_f_measure", &[probs.len()], &[gt.len()]));
        }
        for (&p, &y) in probs.iter().zip(gt) {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Contract(format!("probability {p} outside [0, 1]")));
            }
            let cell = ((p * 256.0).floor() as usize).min(MAXF_THRESHOLDS);
            if y {
                self.positives[cell] += 1;
            } else {
                self.negatives[cell] += 1;
            }
        }
        Ok(())
    }

    /// F-measure at each threshold, index 0 being `1/256`.
    pub fn curve(&self) -> Vec<f64> {
        let total_pos: u64 = self.positives.iter().sum();
        let mut tp: u64 = 0;
        let mut fp: u64 = 0;
        let mut curve = vec![0.0; MAXF_THRESHOLDS];
        for i in (1..=MAXF_THRESHOLDS).rev() {
            tp += self.positives[i];
            fp += self.negatives[i];
            let precision = if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
            let recall = if total_pos > 0 { tp as f64 / total_pos as f64 } else { 0.0 };
            curve[i - 1] = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
        }
        curve
    }

    pub fn value(&self) -> f64 {
        self.curve().into_iter().fold(0.0, f64::max)
    }
}

pub fn max_f_measure(probs: &[f64], gt: &[bool]) -> Result<f64> {
    let mut acc = MaxFAccumulator::default();
    acc.update(probs, gt)?;
    Ok(acc.value())
}

/// `(100 / T) · Σ_t s_t (m_t − b_t) / b_t`, with `s_t = ±1` by direction.
pub fn mtl_delta(metrics: &[f64], baselines: &[f64], directions: &[Direction]) -> Result<f64> {
    if metrics.len() != baselines.len() || metrics.len() != directions.len() {
        return Err(Error::Contract(format!(
            "{} metrics, {} baselines, {} directions",
            metrics.len(),
            baselines.len(),
            directions.len()
        )));
    }
    if metrics.is_empty() {
        return Err(Error::UndefinedMetric("delta over zero tasks".into()));
    }
    let mut sum = 0.0;
    for ((m, b), d) in metrics.iter().zip(baselines).zip(directions) {
        if *b == 0.0 {
            return Err(Error::UndefinedMetric("zero single-task baseline".into()));
        }
        sum += d.sign() * (m - b) / b;
    }
    Ok(100.0 * sum / metrics.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub baseline: Option<f64>,
    pub direction: Direction,
}

/// Per-task metrics with optional baselines and the derived Δ_m.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricTable {
    pub rows: Vec<MetricRow>,
}

pub const DELTA_ROW: &str = "__delta_m__";
const CSV_HEADER: &str = "task,metric,value,baseline,direction";

impl MetricTable {
    pub fn push(&mut self, spec: &TaskSpec, value: f64) {
        self.rows.push(MetricRow {
            task: spec.name.clone(),
            metric: spec.metric.name().to_string(),
            value,
            baseline: None,
            direction: spec.direction,
        });
    }

    pub fn get(&self, task: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.task == task)
    }

    /// Fills baselines by task name; every row must find one.
    pub fn attach_baselines(&mut self, baselines: &MetricTable) -> Result<()> {
        for row in &mut self.rows {
            let b = baselines
                .get(&row.task)
                .ok_or_else(|| Error::Contract(format!("no single-task baseline for task {}", row.task)))?;
            if b.metric != row.metric {
                return Err(Error::Contract(format!(
                    "baseline for {} measures {} not {}",
                    row.task, b.metric, row.metric
                )));
            }
            row.baseline = Some(b.value);
        }
        Ok(())
    }

    /// `None` unless every baseline is present and nonzero.
    pub fn delta_m(&self) -> Option<f64> {
        let baselines: Option<Vec<f64>> = self.rows.iter().map(|r| r.baseline.filter(|b| *b != 0.0)).collect();
        let baselines = baselines?;
        let values: Vec<f64> = self.rows.iter().map(|r| r.value).collect();
        let dirs: Vec<Direction> = self.rows.iter().map(|r| r.direction).collect();
        mtl_delta(&values, &baselines, &dirs).ok()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let baseline = r.baseline.map(|b| b.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{},{}", r.task, r.metric, r.value, baseline, r.direction.name());
        }
        if let Some(d) = self.delta_m() {
            let _ = writeln!(out, "{DELTA_ROW},,{d},,");
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Contract(format!("metric table line {line}: {why}"));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => return Err(bad(1, "missing header")),
        }
        let mut table = MetricTable::default();
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            if fields[0] == DELTA_ROW {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(i + 1, "bad number"));
            table.rows.push(MetricRow {
                task: fields[0].to_string(),
                metric: fields[1].to_string(),
                value: num(fields[2])?,
                baseline: if fields[3].is_empty() { None } else { Some(num(fields[3])?) },
                direction: fields[4].parse()?,
            });
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}
