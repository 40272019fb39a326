use thiserror::Error;

use crate::attention::RegionGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeatureError {
    #[error("image {0:?} has no regions")]
    NoRegions(String),
    #[error("image {image:?}: region {region} is {actual} wide, global vector is {expected}")]
    Width {
        image: String,
        region: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image {image:?}: region {region} is {n1}x{n2}, region 0 is {e1}x{e2}")]
    GridShape {
        image: String,
        region: usize,
        n1: usize,
        n2: usize,
        e1: usize,
        e2: usize,
    },
    #[error("image {0:?} contains a non-finite feature value")]
    NonFinite(String),
}

/// Bottom-up output for one image: `N` RoI grids plus the globally
/// average-pooled backbone vector.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    image_id: String,
    global: Vec<f64>,
    grids: Vec<RegionGrid>,
}

impl FeatureRecord {
    pub fn new(
        image_id: impl Into<String>,
        global: Vec<f64>,
        grids: Vec<RegionGrid>,
    ) -> Result<Self, FeatureError> {
        let image_id = image_id.into();
        let first = grids
            .first()
            .ok_or_else(|| FeatureError::NoRegions(image_id.clone()))?;
        let (e1, e2) = (first.n1(), first.n2());
        for (i, g) in grids.iter().enumerate() {
            if g.dim() != global.len() {
                return Err(FeatureError::Width {
                    image: image_id,
                    region: i,
                    expected: global.len(),
                    actual: g.dim(),
                });
            }
            if (g.n1(), g.n2()) != (e1, e2) {
                return Err(FeatureError::GridShape {
                    image: image_id,
                    region: i,
                    n1: g.n1(),
                    n2: g.n2(),
                    e1,
                    e2,
                });
            }
        }
        let finite = global.iter().all(|v| v.is_finite())
            && grids.iter().all(|g| g.data().iter().all(|v| v.is_finite()));
        if !finite {
            return Err(FeatureError::NonFinite(image_id));
        }
        Ok(Self {
            image_id,
            global,
            grids,
        })
    }

    pub fn image_id(&self) -> &str {
        &self.image_id
    }

    pub fn global(&self) -> &[f64] {
        &self.global
    }

    pub fn grids(&self) -> &[RegionGrid] {
        &self.grids
    }

    pub fn region_count(&self) -> usize {
        self.grids.len()
    }

    pub fn dim(&self) -> usize {
        self.global.len()
    }

    pub fn grid_shape(&self) -> (usize, usize) {
        (self.grids[0].n1(), self.grids[0].n2())
    }

    /// Same record with its regions reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self {
            image_id: self.image_id.clone(),
            global: self.global.clone(),
            grids: order.iter().map(|&i| self.grids[i].clone()).collect(),
        }
    }

    pub fn with_global(&self, global: Vec<f64>) -> Result<Self, FeatureError> {
        Self::new(self.image_id.clone(), global, self.grids.clone())
    }
}
