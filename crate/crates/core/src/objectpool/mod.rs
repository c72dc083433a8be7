//! Candidate object crops drawn from the source image.
//!
//! Pools come from a precomputed manifest or from an external segmentation
//! service; either way they can be thinned with [`filter_candidates`] before
//! relevance scoring.

mod imagery;
mod manifest;
mod segmentation;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use imagery::{image_dimensions, load_image, EncodedImage};
pub use manifest::{
    load_manifest, parse_manifest, ManifestCandidate, ManifestFile, ManifestImage, MANIFEST_SCHEMA_VERSION,
};
pub use segmentation::{
    request_segmentation, HttpSegmentationProvider, SegmentationProvider, SegmentedRegion, SourceImage,
};

pub const DEFAULT_MIN_AREA_FRACTION: f64 = 0.01;
pub const DEFAULT_MAX_CANDIDATES: usize = 16;
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.9;

/// Axis-aligned pixel rectangle, origin at the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
}

impl BoundingBox {
    pub fn new(x: u32, y: u32, width: u32, height: u32) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }

    fn right(&self) -> u64 {
        u64::from(self.x) + u64::from(self.width)
    }

    fn bottom(&self) -> u64 {
        u64::from(self.y) + u64::from(self.height)
    }

    pub fn fits_within(&self, dims: ImageDimensions) -> bool {
        self.right() <= u64::from(dims.width) && self.bottom() <= u64::from(dims.height)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let left = u64::from(self.x.max(other.x));
        let top = u64::from(self.y.max(other.y));
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        right.saturating_sub(left) * bottom.saturating_sub(top)
    }

    /// Intersection over union. Two empty boxes have IoU 0.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return 0.0;
        }
        inter as f64 / union as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDimensions {
    pub width: u32,
    pub height: u32,
}

impl ImageDimensions {
    pub fn area(&self) -> u64 {
        u64::from(self.width) * u64::from(self.height)
    }
}

/// Where a crop's pixels live.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum CropLocation {
    /// A pre-cut crop file.
    File { path: PathBuf },
    /// A rectangle of the source image, cut on demand.
    Region { source: PathBuf, bbox: BoundingBox },
}

/// Content-addressed handle to crop bytes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRef {
    pub location: CropLocation,
    /// `sha256:<hex>` over the crop file bytes, or over the source digest and
    /// rectangle for on-demand regions.
    pub digest: String,
}

impl CropRef {
    pub fn for_file(path: PathBuf, bytes: &[u8]) -> Self {
        Self {
            location: CropLocation::File { path },
            digest: sha256_tagged(bytes),
        }
    }

    pub fn for_region(source: PathBuf, source_bytes: &[u8], bbox: BoundingBox) -> Self {
        let descriptor = format!(
            "region:{}:{},{},{},{}",
            sha256_tagged(source_bytes),
            bbox.x,
            bbox.y,
            bbox.width,
            bbox.height
        );
        Self {
            location: CropLocation::Region { source, bbox },
            digest: sha256_tagged(descriptor.as_bytes()),
        }
    }
}

pub(crate) fn sha256_tagged(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Manifest,
    SegmentationService,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectCandidate {
    pub candidate_id: String,
    pub source_image_id: String,
    pub bounding_box: BoundingBox,
    pub crop_ref: CropRef,
    pub area_fraction: f64,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
}

impl ObjectCandidate {
    /// Validates geometry and derives `area_fraction` from the box.
    pub fn new(
        candidate_id: impl Into<String>,
        source_image_id: impl Into<String>,
        bounding_box: BoundingBox,
        source_dimensions: ImageDimensions,
        crop_ref: CropRef,
        provenance: Provenance,
    ) -> Result<Self, PoolError> {
        let candidate_id = candidate_id.into();
        if bounding_box.area() == 0 || source_dimensions.area() == 0 {
            return Err(PoolError::Geometry {
                candidate_id,
                detail: "box has zero area".to_string(),
            });
        }
        if !bounding_box.fits_within(source_dimensions) {
            return Err(PoolError::Geometry {
                detail: format!(
                    "box {:?} extends outside the {}x{} image",
                    bounding_box, source_dimensions.width, source_dimensions.height
                ),
                candidate_id,
            });
        }
        Ok(Self {
            candidate_id,
            source_image_id: source_image_id.into(),
            area_fraction: bounding_box.area() as f64 / source_dimensions.area() as f64,
            bounding_box,
            crop_ref,
            provenance,
            mask_ref: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPool {
    pub source_image_id: String,
    pub source_dimensions: ImageDimensions,
    pub candidates: Vec<ObjectCandidate>,
    /// Non-fatal problems met while building the pool (e.g. dropped regions).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl ObjectPool {
    pub fn empty(source_image_id: impl Into<String>, source_dimensions: ImageDimensions) -> Self {
        Self {
            source_image_id: source_image_id.into(),
            source_dimensions,
            candidates: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn get(&self, candidate_id: &str) -> Option<&ObjectCandidate> {
        self.candidates.iter().find(|c| c.candidate_id == candidate_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterParams {
    pub min_area_fraction: f64,
    pub max_candidates: usize,
    pub overlap_threshold: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self {
            min_area_fraction: DEFAULT_MIN_AREA_FRACTION,
            max_candidates: DEFAULT_MAX_CANDIDATES,
            overlap_threshold: DEFAULT_OVERLAP_THRESHOLD,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_candidates == 0 {
            return Err("max_candidates must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.min_area_fraction) {
            return Err(format!(
                "min_area_fraction must lie in [0, 1], got {}",
                self.min_area_fraction
            ));
        }
        if !(self.overlap_threshold > 0.0 && self.overlap_threshold <= 1.0) {
            return Err(format!(
                "overlap_threshold must lie in (0, 1], got {}",
                self.overlap_threshold
            ));
        }
        Ok(())
    }
}

/// Drops small candidates, then near-duplicates (keeping the earlier one),
/// then truncates. Survivors keep their relative order.
pub fn filter_candidates(pool: &ObjectPool, params: &FilterParams) -> ObjectPool {
    let mut kept: Vec<ObjectCandidate> = Vec::new();
    for candidate in &pool.candidates {
        if candidate.area_fraction < params.min_area_fraction {
            continue;
        }
        let duplicate = kept
            .iter()
            .any(|k| k.bounding_box.iou(&candidate.bounding_box) > params.overlap_threshold);
        if !duplicate {
            kept.push(candidate.clone());
        }
    }
    kept.truncate(params.max_candidates);
    ObjectPool {
        candidates: kept,
        ..pool.clone()
    }
}

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("manifest {path}: {message}")]
    ManifestParse { path: String, message: String },
    #[error("candidate {candidate_id}: {detail}")]
    Geometry { candidate_id: String, detail: String },
    #[error("segmentation provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("segmentation provider rejected image {image_id}: {message}")]
    ProviderRejected { image_id: String, message: String },
    #[error("image {path}: {message}")]
    Image { path: String, message: String },
}
