//! Samples, image I/O, the synthetic generator and breast-level splitting.

mod image;
mod manifest;
mod split;
mod synth;

pub use image::{read_image, read_pgm, read_png, write_pgm, write_png, GrayImage};
pub use manifest::{load_manifest, write_dataset, MANIFEST_COLUMNS};
pub use split::{split_by_breast, SplitSpec};
pub use synth::{generate_dataset, generate_with, SynthParams};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::View;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::Label(other)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malignant => "malignant",
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Label::Benign),
            "malignant" => Ok(Label::Malignant),
            other => Err(Error::Schema(format!("unknown label {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Laterality {
    Left,
    Right,
}

impl Laterality {
    pub fn name(self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
        }
    }
}

impl FromStr for Laterality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "left" | "l" => Ok(Laterality::Left),
            "right" | "r" => Ok(Laterality::Right),
            other => Err(Error::Schema(format!("unknown laterality {other:?}"))),
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One examined breast: four grayscale views in `[0, 1]`, all in left
/// orientation (right-breast images are mirrored when loaded).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Ordered as [`View::ALL`].
    pub views: [GrayImage; 4],
    pub label: Label,
    pub breast_id: String,
    pub laterality: Laterality,
}

impl Sample {
    pub fn view(&self, v: View) -> &GrayImage {
        &self.views[v.index()]
    }

    /// Views as `[H × W × 1]` tensors, ordered as [`View::ALL`].
    pub fn tensors<T: Real>(&self) -> Vec<Tensor<T>> {
        self.views.iter().map(GrayImage::to_tensor).collect()
    }
}
