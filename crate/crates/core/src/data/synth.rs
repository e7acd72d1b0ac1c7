//! Seeded synthetic segmentation data.
//!
//! Each class gets a Gaussian centroid of scale `signal`. A video is a chain
//! of segments whose classes never repeat back to back and whose lengths are
//! `1 + Geometric(1 / mean_duration)`; every frame is its segment's centroid
//! plus Gaussian noise of scale `noise`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};

use super::{ClassMapping, Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub num_videos: usize,
    pub num_classes: usize,
    pub input_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub mean_duration: f64,
    /// Scale of the class centroids.
    pub signal: f64,
    /// Scale of the per-frame noise.
    pub noise: f64,
    pub folds: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_videos: 25,
            num_classes: 4,
            input_dim: 32,
            min_frames: 100,
            max_frames: 300,
            mean_duration: 20.0,
            signal: 1.0,
            noise: 0.25,
            folds: 4,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_videos == 0 || self.input_dim == 0 {
            return fail("num_videos and input_dim must be positive");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be at least 2");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return fail("need 0 < min_frames <= max_frames");
        }
        if self.mean_duration.is_nan() || self.mean_duration < 1.0 {
            return fail("mean_duration must be at least 1");
        }
        if !(self.signal > 0.0 && self.signal.is_finite()) {
            return fail("signal must be positive");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail("noise must be non-negative");
        }
        if self.folds == 0 || self.folds > self.num_videos {
            return fail("folds must be in 1..=num_videos");
        }
        Ok(())
    }
}

/// Output of [`synth_generate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub dataset: Dataset,
    /// Held-out ids of each fold; the folds partition the videos.
    pub folds: Vec<Vec<String>>,
    /// Class centroids, `[C × D]`.
    pub centroids: Tensor<f32>,
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, d) = (spec.num_classes, spec.input_dim);
    let centroid = Normal::new(0.0, spec.signal).map_err(|e| Error::Config(e.to_string()))?;
    let noise = Normal::new(0.0, spec.noise).map_err(|e| Error::Config(e.to_string()))?;
    let duration =
        Geometric::new(1.0 / spec.mean_duration).map_err(|e| Error::Config(e.to_string()))?;

    let centroids: Vec<f64> = (0..c * d).map(|_| centroid.sample(&mut rng)).collect();
    let width = (spec.num_videos - 1).to_string().len().max(3);
    let mut samples = Vec::with_capacity(spec.num_videos);
    for v in 0..spec.num_videos {
        let t = rng.random_range(spec.min_frames..=spec.max_frames);
        let mut labels = Vec::with_capacity(t);
        let mut class = rng.random_range(0..c);
        while labels.len() < t {
            let len = 1 + duration.sample(&mut rng) as usize;
            let len = len.min(t - labels.len());
            labels.extend(std::iter::repeat_n(class, len));
            let step = rng.random_range(1..c);
            class = (class + step) % c;
        }
        let mut data = vec![0f32; d * t];
        for (f, &y) in labels.iter().enumerate() {
            for k in 0..d {
                data[k * t + f] = (centroids[y * d + k] + noise.sample(&mut rng)) as f32;
            }
        }
        let features = Tensor::new(vec![d, t], data)?;
        samples.push(Sample::new(format!("vid{v:0width$}"), features, labels)?);
    }
    let names = (0..c).map(|k| format!("action{k}")).collect();
    let dataset = Dataset::new(ClassMapping::new(names)?, samples)?;

    let mut order = dataset.ids();
    order.shuffle(&mut rng);
    let mut folds = vec![Vec::new(); spec.folds];
    for (i, id) in order.into_iter().enumerate() {
        folds[i % spec.folds].push(id);
    }
    for f in &mut folds {
        f.sort();
    }
    let centroids = Tensor::new(
        vec![c, d],
        centroids.into_iter().map(|x| x as f32).collect(),
    )?;
    Ok(SynthData {
        dataset,
        folds,
        centroids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthSpec {
        SynthSpec {
            num_videos: 6,
            min_frames: 20,
            max_frames: 40,
            mean_duration: 5.0,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn deterministic_and_no_immediate_repeats() {
        let a = synth_generate(&small()).unwrap();
        assert_eq!(a, synth_generate(&small()).unwrap());
        for s in &a.dataset.samples {
            assert!((20..=40).contains(&s.frames()));
            let segs = crate::metrics::labels_to_segments(&s.labels);
            assert!(segs.windows(2).all(|w| w[0].label != w[1].label));
        }
    }

    #[test]
    fn folds_partition_ids() {
        let a = synth_generate(&small()).unwrap();
        let mut all: Vec<String> = a.folds.concat();
        all.sort();
        assert_eq!(all, a.dataset.ids());
    }

    #[test]
    fn rejects_bad_specs() {
        let bad = SynthSpec {
            num_classes: 1,
            ..small()
        };
        assert!(synth_generate(&bad).is_err());
        let bad = SynthSpec {
            min_frames: 50,
            ..small()
        };
        assert!(synth_generate(&bad).is_err());
    }
}
