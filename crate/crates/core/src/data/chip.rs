use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Side length of every chip after ingest.
pub const CHIP_SIZE: usize = 84;
pub const CHIP_PIXELS: usize = CHIP_SIZE * CHIP_SIZE;

/// One 84x84 magnitude image, min-max normalized to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageChip {
    pixels: Vec<f32>,
    pub class_id: usize,
    pub source_id: String,
    pub depression_deg: Option<f64>,
    /// Set when the source raster had zero dynamic range and the chip was
    /// normalized to all zeros.
    pub degenerate_range: bool,
}

impl ImageChip {
    pub fn new(pixels: Vec<f32>, class_id: usize, source_id: impl Into<String>) -> Result<Self> {
        if pixels.len() != CHIP_PIXELS {
            return Err(Error::Shape(format!(
                "chip needs {CHIP_SIZE}x{CHIP_SIZE} = {CHIP_PIXELS} pixels, got {}",
                pixels.len()
            )));
        }
        if let Some(i) = pixels.iter().position(|p| !(p.is_finite() && (0.0..=1.0).contains(p))) {
            return Err(Error::Decode(format!(
                "pixel {i} = {} outside [0, 1]",
                pixels[i]
            )));
        }
        Ok(ImageChip {
            pixels,
            class_id,
            source_id: source_id.into(),
            depression_deg: None,
            degenerate_range: false,
        })
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * CHIP_SIZE + col]
    }
}

/// Chips grouped by class id, in deterministic class order.
pub type ClassChips = BTreeMap<usize, Vec<Arc<ImageChip>>>;

/// A labelled collection of chips. `classes[i]` names class id `i`.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub chips: ClassChips,
}

impl Dataset {
    pub fn new(classes: Vec<String>) -> Self {
        Dataset {
            classes,
            chips: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, chip: ImageChip) -> Result<()> {
        if chip.class_id >= self.classes.len() {
            return Err(Error::InsufficientData(format!(
                "chip {} has class id {} but the dataset has {} classes",
                chip.source_id,
                chip.class_id,
                self.classes.len()
            )));
        }
        self.chips.entry(chip.class_id).or_default().push(Arc::new(chip));
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == name)
    }

    pub fn class_ids(&self) -> Vec<usize> {
        (0..self.classes.len()).collect()
    }

    pub fn len(&self) -> usize {
        self.chips.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), self.chips.get(&i).map_or(0, Vec::len)))
            .collect()
    }

    /// The chips of the given classes only.
    pub fn part(&self, class_ids: impl IntoIterator<Item = usize>) -> ClassChips {
        class_ids
            .into_iter()
            .map(|c| (c, self.chips.get(&c).cloned().unwrap_or_default()))
            .collect()
    }
}
