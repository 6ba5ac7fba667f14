//! Dataset types, on-disk ingestion and the procedural synthetic face set.

mod fmri;
mod manifest;
mod preprocess;
mod synthetic;

pub use fmri::{pad_fmri, pad_fmri_to, read_fmri_file, write_fmri_binary, FmriRecord};
pub use manifest::{
    load_dataset, load_image_dataset, read_manifest, write_dataset, DatasetManifest,
    ManifestEntry, MANIFEST_HEADER,
};
pub use preprocess::{grid_to_luma8, preprocess_image, u8_to_unit};
pub use synthetic::{generate_synthetic_dataset, SyntheticData, SyntheticSpec, EXPRESSION_NAMES};

use crate::error::{Error, Result};
use std::ops::Range;

pub const N_EXPRESSIONS: usize = 7;
pub const N_GENDERS: usize = 2;

/// Where each attribute group sits inside the concatenated target vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AttrLayout {
    pub n_identities: usize,
}

impl AttrLayout {
    pub fn new(n_identities: usize) -> Self {
        Self { n_identities }
    }

    pub fn len(&self) -> usize {
        N_EXPRESSIONS + self.n_identities + N_GENDERS
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn expression(&self) -> Range<usize> {
        0..N_EXPRESSIONS
    }

    pub fn identity(&self) -> Range<usize> {
        N_EXPRESSIONS..N_EXPRESSIONS + self.n_identities
    }

    pub fn gender(&self) -> Range<usize> {
        let start = N_EXPRESSIONS + self.n_identities;
        start..start + N_GENDERS
    }

    /// Group ranges in concatenation order (expression, identity, gender).
    pub fn groups(&self) -> [Range<usize>; 3] {
        [self.expression(), self.identity(), self.gender()]
    }

    pub fn group_sizes(&self) -> [usize; 3] {
        [N_EXPRESSIONS, self.n_identities, N_GENDERS]
    }
}

/// Expression, identity and gender labels; encodes as the concatenated
/// one-hot vector t_attr.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct AttributeTarget {
    pub expression: usize,
    pub identity: usize,
    pub gender: usize,
    pub n_identities: usize,
}

impl AttributeTarget {
    pub fn new(expression: usize, identity: usize, gender: usize, n_identities: usize) -> Result<Self> {
        if expression >= N_EXPRESSIONS {
            return Err(Error::InvalidInput(format!(
                "expression label {expression} outside 0..{N_EXPRESSIONS}"
            )));
        }
        if identity >= n_identities {
            return Err(Error::InvalidInput(format!(
                "identity label {identity} outside 0..{n_identities}"
            )));
        }
        if gender >= N_GENDERS {
            return Err(Error::InvalidInput(format!(
                "gender label {gender} outside 0..{N_GENDERS}"
            )));
        }
        Ok(Self {
            expression,
            identity,
            gender,
            n_identities,
        })
    }

    pub fn layout(&self) -> AttrLayout {
        AttrLayout::new(self.n_identities)
    }

    pub fn labels(&self) -> [usize; 3] {
        [self.expression, self.identity, self.gender]
    }

    pub fn to_vector(&self) -> Vec<f32> {
        let layout = self.layout();
        let mut v = vec![0f32; layout.len()];
        for (range, label) in layout.groups().into_iter().zip(self.labels()) {
            v[range.start + label] = 1.0;
        }
        v
    }

    /// Decodes a concatenated one-hot vector, rejecting anything that is not
    /// exactly one-hot in every group.
    pub fn from_vector(v: &[f32], n_identities: usize) -> Result<Self> {
        let layout = AttrLayout::new(n_identities);
        if v.len() != layout.len() {
            return Err(Error::Shape(format!(
                "attribute vector has length {}, expected {}",
                v.len(),
                layout.len()
            )));
        }
        let mut labels = [0usize; 3];
        for (slot, range) in layout.groups().into_iter().enumerate() {
            let group = &v[range];
            let ones: Vec<usize> = group
                .iter()
                .enumerate()
                .filter(|(_, &x)| x == 1.0)
                .map(|(i, _)| i)
                .collect();
            let zeros = group.iter().filter(|&&x| x == 0.0).count();
            if ones.len() != 1 || zeros != group.len() - 1 {
                return Err(Error::InvalidInput(format!(
                    "attribute group {slot} is not one-hot"
                )));
            }
            labels[slot] = ones[0];
        }
        Self::new(labels[0], labels[1], labels[2], n_identities)
    }
}

/// A normalized image in row-major (channel, row, column) order with values in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || !height.is_power_of_two() || !width.is_power_of_two() {
            return Err(Error::Shape(format!(
                "image must have power-of-two sides and at least one channel, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "pixel buffer has {} values, expected {}",
                data.len(),
                channels * height * width
            )));
        }
        if let Some(bad) = data.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("pixel value {bad} outside [-1, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: ImageGrid,
    pub attributes: AttributeTarget,
    pub source_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            other => Err(Error::InvalidInput(format!(
                "split must be `train` or `eval`, got `{other}`"
            ))),
        }
    }
}

/// Unique stimulus images plus the fMRI records that point at them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageSample>,
    pub splits: Vec<Split>,
    pub records: Vec<FmriRecord>,
    pub n_identities: usize,
}

impl Dataset {
    pub fn layout(&self) -> AttrLayout {
        AttrLayout::new(self.n_identities)
    }

    pub fn image_size(&self) -> Option<usize> {
        self.images.first().map(|s| s.pixels.height)
    }

    pub fn image_index(&self, stimulus_id: &str) -> Option<usize> {
        self.images.iter().position(|s| s.source_id == stimulus_id)
    }

    pub fn images_in(&self, split: Split) -> Vec<usize> {
        (0..self.images.len()).filter(|&i| self.splits[i] == split).collect()
    }

    /// (record index, image index) pairs whose image lies in `split`,
    /// optionally restricted to a set of subjects.
    pub fn pairs(&self, split: Split, subjects: Option<&[u32]>) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::new();
        for (r, rec) in self.records.iter().enumerate() {
            if let Some(keep) = subjects {
                if !keep.contains(&rec.subject_id) {
                    continue;
                }
            }
            let img = self.image_index(&rec.stimulus_id).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "fMRI record stimulus `{}` does not resolve to an image",
                    rec.stimulus_id
                ))
            })?;
            if self.splits[img] == split {
                out.push((r, img));
            }
        }
        Ok(out)
    }

    pub fn subjects(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.records.iter().map(|r| r.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Longest voxel vector across every record; the dataset-wide padding length.
    pub fn fmri_len(&self) -> usize {
        self.records.iter().map(|r| r.voxels.len()).max().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attribute_vector_is_concatenated_one_hot() {
        let t = AttributeTarget::new(3, 1, 0, 4).unwrap();
        let v = t.to_vector();
        assert_eq!(v.len(), 13);
        assert_eq!(v.iter().filter(|&&x| x == 1.0).count(), 3);
        assert_eq!(v[3], 1.0);
        assert_eq!(v[7 + 1], 1.0);
        assert_eq!(v[7 + 4], 1.0);
        assert_eq!(AttributeTarget::from_vector(&v, 4).unwrap(), t);
    }

    #[test]
    fn attribute_labels_are_range_checked() {
        assert!(AttributeTarget::new(7, 0, 0, 4).is_err());
        assert!(AttributeTarget::new(0, 4, 0, 4).is_err());
        assert!(AttributeTarget::new(0, 0, 2, 4).is_err());
        let mut v = AttributeTarget::new(0, 0, 0, 2).unwrap().to_vector();
        v[1] = 1.0;
        assert!(AttributeTarget::from_vector(&v, 2).is_err());
    }

    #[test]
    fn image_grid_rejects_out_of_range_and_odd_sizes() {
        assert!(ImageGrid::new(1, 4, 4, vec![0.0; 16]).is_ok());
        assert!(ImageGrid::new(1, 3, 4, vec![0.0; 12]).is_err());
        assert!(ImageGrid::new(1, 2, 2, vec![0.0, 1.5, 0.0, 0.0]).is_err());
        assert!(ImageGrid::new(1, 2, 2, vec![0.0; 3]).is_err());
    }
}
