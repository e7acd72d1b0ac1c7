//! File formats, the in-memory dataset and the synthetic generator.
//!
//! On disk a dataset is a directory:
//!
//! ```text
//! mapping.txt              "<id> <name>" per line, ids dense from 0
//! features/<video>.bin     DXFT binary features (or <video>.csv)
//! groundTruth/<video>.txt  one class name per frame
//! splits/fold<k>.txt       held-out video ids of fold k
//! ```

mod bytes;
pub mod checkpoint;
pub mod features;
pub mod labels;
mod layout;
pub mod synth;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use features::{read_feature_file, write_feature_file};
pub use labels::{read_labels, read_mapping, write_labels, write_mapping, ClassMapping};
pub use layout::{
    feature_ids, feature_path, fold_ids, load_dataset, load_dataset_from, read_split, split_path,
    write_dataset, DataPaths, FoldSubset, FEATURES_DIR, LABELS_DIR, MAPPING_FILE, SPLITS_DIR,
};
pub use synth::{synth_generate, SynthData, SynthSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One video: `[D × T]` features and `T` frame labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl Sample {
    pub fn new(id: impl Into<String>, features: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let id = id.into();
        if features.rank() != 2 {
            return Err(Error::Data(format!(
                "{id}: features must be [D × T], got {:?}",
                features.shape()
            )));
        }
        if features.shape()[1] != labels.len() {
            return Err(Error::Data(format!(
                "{id}: features have {} frames but labels have {}",
                features.shape()[1],
                labels.len()
            )));
        }
        Ok(Self {
            id,
            features,
            labels,
        })
    }

    pub fn frames(&self) -> usize {
        self.labels.len()
    }

    pub fn input_dim(&self) -> usize {
        self.features.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub mapping: ClassMapping,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Builds a dataset and checks that every sample agrees on `D` and uses
    /// only mapped labels.
    pub fn new(mapping: ClassMapping, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self { mapping, samples };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(first) = self.samples.first() {
            let d = first.input_dim();
            let offenders: Vec<String> = self
                .samples
                .iter()
                .filter(|s| s.input_dim() != d)
                .map(|s| format!("{} (D={})", s.id, s.input_dim()))
                .collect();
            if !offenders.is_empty() {
                return Err(Error::Data(format!(
                    "inconsistent feature dims, expected D={d} from {}: {}",
                    first.id,
                    offenders.join(", ")
                )));
            }
        }
        let c = self.mapping.len();
        for s in &self.samples {
            if let Some(f) = s.labels.iter().position(|l| *l >= c) {
                return Err(Error::Data(format!(
                    "{}: label {} at frame {f} is outside the {c}-class mapping",
                    s.id, s.labels[f]
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.mapping.len()
    }

    /// Feature width, if there is at least one sample.
    pub fn input_dim(&self) -> Option<usize> {
        self.samples.first().map(Sample::input_dim)
    }

    pub fn ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    /// The samples whose ids are listed, in the listed order.
    pub fn subset(&self, ids: &[String]) -> Result<Dataset> {
        let samples = ids
            .iter()
            .map(|id| {
                self.samples
                    .iter()
                    .find(|s| &s.id == id)
                    .cloned()
                    .ok_or_else(|| Error::Data(format!("unknown video id {id}")))
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            mapping: self.mapping.clone(),
            samples,
        })
    }
}
