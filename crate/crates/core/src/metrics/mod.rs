//! Segmental F1@k, edit score and frame accuracy.

mod report;

pub use report::{MetricsAccumulator, MetricsReport};

use crate::error::{Error, Result};

/// A maximal run of one label, `start..end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub label: usize,
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }

    /// Intersection over union of the two frame ranges.
    pub fn iou(&self, other: &Segment) -> f64 {
        let inter = self
            .end
            .min(other.end)
            .saturating_sub(self.start.max(other.start));
        let union = self.end.max(other.end) - self.start.min(other.start);
        inter as f64 / union as f64
    }
}

pub fn labels_to_segments(labels: &[usize]) -> Vec<Segment> {
    let mut out: Vec<Segment> = Vec::new();
    for (t, &l) in labels.iter().enumerate() {
        match out.last_mut() {
            Some(s) if s.label == l => s.end = t + 1,
            _ => out.push(Segment {
                label: l,
                start: t,
                end: t + 1,
            }),
        }
    }
    out
}

fn segments_without(labels: &[usize], ignore: Option<usize>) -> Vec<Segment> {
    labels_to_segments(labels)
        .into_iter()
        .filter(|s| Some(s.label) != ignore)
        .collect()
}

fn same_len(op: &str, pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Contract(format!(
            "{op}: prediction has {} frames but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    Ok(())
}

/// True positives, false positives and false negatives at one threshold.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `(precision, recall, f1)` as percentages; 0 where undefined.
    pub fn scores(&self) -> (f64, f64, f64) {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f1 = if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
        (100.0 * p, 100.0 * r, 100.0 * f1)
    }
}

/// Greedy segment matching at IoU threshold `k / 100`.
///
/// Predicted segments are visited in order. Each is paired with the unused
/// same-label ground-truth segment of highest IoU (the earliest on ties); the
/// pair is a hit, and the ground-truth segment becomes used, only if the IoU
/// exceeds the threshold.
pub fn f1_counts(pred: &[usize], gt: &[usize], k: f64, ignore: Option<usize>) -> Result<F1Counts> {
    same_len("f1_at_k", pred, gt)?;
    let threshold = k / 100.0;
    let p_segs = segments_without(pred, ignore);
    let g_segs = segments_without(gt, ignore);
    let mut used = vec![false; g_segs.len()];
    let mut tp = 0;
    for p in &p_segs {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in g_segs.iter().enumerate() {
            if used[j] || g.label != p.label {
                continue;
            }
            let iou = p.iou(g);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, iou)) = best {
            if iou > threshold {
                used[j] = true;
                tp += 1;
            }
        }
    }
    Ok(F1Counts {
        tp,
        fp: p_segs.len() - tp,
        fn_: g_segs.len() - tp,
    })
}

/// `(precision, recall, f1)` percentages for one video.
pub fn f1_at_k(pred: &[usize], gt: &[usize], k: f64) -> Result<(f64, f64, f64)> {
    Ok(f1_counts(pred, gt, k, None)?.scores())
}

/// Levenshtein distance between two label sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Segment-level edit distance and the normalizer `max(#pred, #gt)`.
pub(crate) fn edit_parts(pred: &[usize], gt: &[usize], ignore: Option<usize>) -> (usize, usize) {
    let p: Vec<usize> = segments_without(pred, ignore)
        .iter()
        .map(|s| s.label)
        .collect();
    let g: Vec<usize> = segments_without(gt, ignore)
        .iter()
        .map(|s| s.label)
        .collect();
    (levenshtein(&p, &g), p.len().max(g.len()))
}

fn edit_from_parts(dist: usize, norm: usize) -> f64 {
    if norm == 0 {
        return 100.0;
    }
    (100.0 * (1.0 - dist as f64 / norm as f64)).max(0.0)
}

/// `100 · (1 − dist / max(#pred, #gt))` over segment label sequences.
pub fn edit_score(pred: &[usize], gt: &[usize]) -> Result<f64> {
    same_len("edit_score", pred, gt)?;
    let (d, n) = edit_parts(pred, gt, None);
    Ok(edit_from_parts(d, n))
}

/// Percentage of frames with the right label.
pub fn frame_accuracy(pred: &[usize], gt: &[usize]) -> Result<f64> {
    same_len("frame_accuracy", pred, gt)?;
    if gt.is_empty() {
        return Err(Error::Contract(
            "frame_accuracy of an empty sequence".into(),
        ));
    }
    let hits = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}
