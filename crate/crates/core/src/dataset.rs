//! In-memory paired cross-modal data.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fusion::PatchGroup;
use crate::numeric::FeatureMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Image,
    Text,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Text => "text",
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::Image => Modality::Text,
            Modality::Text => Modality::Image,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Usage(format!("unknown modality `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

/// Paired image/text instances. Row `i` of `image` and row `i` of `text`
/// describe the same instance.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossModalDataset {
    pub name: String,
    pub image: FeatureMatrix,
    pub text: FeatureMatrix,
    /// One group per instance, or `None` when the dataset has no patches.
    pub image_patches: Option<Vec<PatchGroup>>,
    pub text_patches: Option<Vec<PatchGroup>>,
    pub labels: Option<Vec<usize>>,
    pub splits: Vec<Split>,
}

impl CrossModalDataset {
    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.image.rows();
        if self.text.rows() != n {
            return Err(Error::Pairing {
                image_rows: n,
                text_rows: self.text.rows(),
            });
        }
        if self.splits.len() != n {
            return Err(Error::Validation(format!(
                "{} split tags for {n} instances",
                self.splits.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != n {
                return Err(Error::Validation(format!(
                    "{} labels for {n} instances",
                    labels.len()
                )));
            }
        }
        for (modality, groups) in [
            (Modality::Image, &self.image_patches),
            (Modality::Text, &self.text_patches),
        ] {
            if let Some(groups) = groups {
                if groups.len() != n {
                    return Err(Error::Validation(format!(
                        "{} {modality} patch groups for {n} instances",
                        groups.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn features(&self, modality: Modality) -> &FeatureMatrix {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn patches(&self, modality: Modality) -> Option<&[PatchGroup]> {
        match modality {
            Modality::Image => self.image_patches.as_deref(),
            Modality::Text => self.text_patches.as_deref(),
        }
    }

    pub fn labels_for(&self, indices: &[usize]) -> Option<Vec<usize>> {
        self.labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect())
    }
}
