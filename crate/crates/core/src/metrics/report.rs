use std::fmt;

use super::{edit_from_parts, edit_parts, f1_counts, same_len, F1Counts};
use crate::error::Result;

/// F1 thresholds reported for every split.
pub const F1_THRESHOLDS: [f64; 3] = [10.0, 25.0, 50.0];

/// Split-level scores, all percentages.
///
/// F1 pools segment counts over videos and `acc` pools frames. `edit` is the
/// mean of per-video edit scores; `edit_pooled` divides the summed distances
/// by the summed normalizers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub f1_10: f64,
    pub f1_25: f64,
    pub f1_50: f64,
    pub edit: f64,
    pub edit_pooled: f64,
    pub acc: f64,
    pub videos: usize,
    pub frames: usize,
}

impl MetricsReport {
    /// `name=value` lines, two decimals, with averaging modes spelled out.
    pub fn to_record(&self) -> String {
        format!(
            "f1_10={:.2}\nf1_25={:.2}\nf1_50={:.2}\nedit={:.2}\nedit_pooled={:.2}\nacc={:.2}\n\
             videos={}\nframes={}\nedit_averaging=per_video\nacc_averaging=pooled_frames\n",
            self.f1_10,
            self.f1_25,
            self.f1_50,
            self.edit,
            self.edit_pooled,
            self.acc,
            self.videos,
            self.frames
        )
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_record())
    }
}

/// Collects per-video results into a [`MetricsReport`].
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    ignore: Option<usize>,
    f1: [F1Counts; 3],
    edit_sum: f64,
    edit_dist: usize,
    edit_norm: usize,
    hits: usize,
    frames: usize,
    videos: usize,
}

impl MetricsAccumulator {
    pub fn new(ignore: Option<usize>) -> Self {
        Self {
            ignore,
            ..Self::default()
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        same_len("metrics", pred, gt)?;
        for (acc, k) in self.f1.iter_mut().zip(F1_THRESHOLDS) {
            acc.add(f1_counts(pred, gt, k, self.ignore)?);
        }
        let (d, n) = edit_parts(pred, gt, self.ignore);
        self.edit_sum += edit_from_parts(d, n);
        self.edit_dist += d;
        self.edit_norm += n;
        for (p, g) in pred.iter().zip(gt) {
            if Some(*g) == self.ignore {
                continue;
            }
            self.frames += 1;
            self.hits += usize::from(p == g);
        }
        self.videos += 1;
        Ok(())
    }

    pub fn finish(&self) -> MetricsReport {
        let f1 = |i: usize| self.f1[i].scores().2;
        let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
        MetricsReport {
            f1_10: f1(0),
            f1_25: f1(1),
            f1_50: f1(2),
            edit: mean(self.edit_sum, self.videos),
            edit_pooled: edit_from_parts(self.edit_dist, self.edit_norm),
            acc: 100.0 * mean(self.hits as f64, self.frames),
            videos: self.videos,
            frames: self.frames,
        }
    }
}
