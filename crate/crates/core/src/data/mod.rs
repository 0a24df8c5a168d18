//! Synthetic street-like scenes with per-pixel class labels and depth, a fog
//! renderer, and on-disk dataset storage.

mod fog;
mod scene;
mod store;

use crate::error::{Error, Result};

pub use fog::{apply_fog, apply_fog_to, transmittance, FogParams, Severity, DEFAULT_AIRLIGHT};
pub use scene::{class_names, generate_scene, generate_scene_with, SceneOptions, SceneSample, MAX_OBJECTS, MIN_OBJECTS};
pub use store::{read_dataset, write_dataset, DatasetItem, DatasetReader, Manifest, SampleEntry, MANIFEST_FILE};

/// Row-major `h x w` map.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    data: Vec<T>,
}

pub type LabelMap = Grid<u16>;
pub type DepthMap = Grid<f64>;

impl<T: Copy> Grid<T> {
    pub fn new(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "Grid::new",
                expected: format!("{} elements for {height}x{width}", height * width),
                found: format!("{} elements", data.len()),
            });
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: T) {
        self.data[y * self.width + x] = v;
    }
}

impl LabelMap {
    /// Sorted list of the classes that occur.
    pub fn classes_present(&self) -> Vec<u16> {
        let mut seen: Vec<u16> = self.data.clone();
        seen.sort_unstable();
        seen.dedup();
        seen
    }
}

/// Stacks label maps of equal size into one batch-major buffer.
pub fn stack_labels(maps: &[&LabelMap]) -> Result<Vec<u16>> {
    let Some(first) = maps.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(maps.len() * first.data.len());
    for m in maps {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(Error::ShapeMismatch {
                op: "stack_labels",
                expected: format!("{}x{}", first.height, first.width),
                found: format!("{}x{}", m.height, m.width),
            });
        }
        out.extend_from_slice(&m.data);
    }
    Ok(out)
}
