use std::path::PathBuf;
use std::sync::Arc;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::imagery::image_dimensions;
use super::{BoundingBox, CropRef, ObjectCandidate, ObjectPool, PoolError, Provenance};
use crate::transport::{ConcurrencyLimit, HttpRequest, RetryPolicy, Transport, TransportError};

/// A source image on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceImage {
    pub image_id: String,
    pub path: PathBuf,
}

/// One region as returned by a segmenter: `[x, y, width, height]` in
/// (possibly fractional) source pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentedRegion {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
}

impl SegmentedRegion {
    pub fn new(x: f64, y: f64, width: f64, height: f64) -> Self {
        Self {
            bbox: [x, y, width, height],
            mask_ref: None,
        }
    }
}

pub trait SegmentationProvider: Send + Sync {
    /// Regions for one image, in the provider's order.
    fn segment(&self, image_id: &str, image_bytes: &[u8]) -> Result<Vec<SegmentedRegion>, PoolError>;
}

impl<P: SegmentationProvider + ?Sized> SegmentationProvider for Arc<P> {
    fn segment(&self, image_id: &str, image_bytes: &[u8]) -> Result<Vec<SegmentedRegion>, PoolError> {
        (**self).segment(image_id, image_bytes)
    }
}

/// Snaps a fractional region outward to whole pixels and clips it to the
/// image. `None` when nothing with positive area remains.
fn snap_region(region: &SegmentedRegion, width: u32, height: u32) -> Option<BoundingBox> {
    let [x, y, w, h] = region.bbox;
    if !(x.is_finite() && y.is_finite() && w.is_finite() && h.is_finite()) || w <= 0.0 || h <= 0.0 {
        return None;
    }
    let x0 = x.max(0.0).floor();
    let y0 = y.max(0.0).floor();
    let x1 = (x + w).ceil().min(f64::from(width));
    let y1 = (y + h).ceil().min(f64::from(height));
    if x1 <= x0 || y1 <= y0 {
        return None;
    }
    Some(BoundingBox::new(
        x0 as u32,
        y0 as u32,
        (x1 - x0) as u32,
        (y1 - y0) as u32,
    ))
}

/// Segments `source` through `provider` and converts the regions into a pool.
///
/// Degenerate regions (zero or negative area, non-finite, or entirely outside
/// the image) are dropped and noted in `pool.warnings`.
pub fn request_segmentation(
    source: &SourceImage,
    provider: &dyn SegmentationProvider,
) -> Result<ObjectPool, PoolError> {
    let bytes = std::fs::read(&source.path).map_err(|e| PoolError::Image {
        path: source.path.display().to_string(),
        message: e.to_string(),
    })?;
    let dims = image_dimensions(&bytes, &source.path)?;
    let regions = provider.segment(&source.image_id, &bytes)?;
    let mut pool = ObjectPool::empty(source.image_id.clone(), dims);
    for (index, region) in regions.iter().enumerate() {
        let Some(bbox) = snap_region(region, dims.width, dims.height) else {
            let warning = format!("dropped degenerate region #{index} {:?}", region.bbox);
            log::warn!("{}: {warning}", source.image_id);
            pool.warnings.push(warning);
            continue;
        };
        let mut candidate = ObjectCandidate::new(
            format!("{}/r{index}", source.image_id),
            source.image_id.clone(),
            bbox,
            dims,
            CropRef::for_region(source.path.clone(), &bytes, bbox),
            Provenance::SegmentationService,
        )?;
        candidate.mask_ref = region.mask_ref.clone();
        pool.candidates.push(candidate);
    }
    Ok(pool)
}

#[derive(Deserialize)]
struct SegmentationResponse {
    regions: Vec<SegmentedRegion>,
}

/// Segmentation service client.
///
/// Request: `{"image_id": ..., "image": <base64 bytes>}`. Response:
/// `{"regions": [{"box": [x, y, w, h], "mask_ref": ...}, ...]}`.
pub struct HttpSegmentationProvider<T> {
    pub url: String,
    pub transport: T,
    pub retry: RetryPolicy,
    pub headers: Vec<(String, String)>,
    limit: ConcurrencyLimit,
}

impl<T: Transport> HttpSegmentationProvider<T> {
    pub fn new(url: impl Into<String>, transport: T, retry: RetryPolicy, max_in_flight: usize) -> Self {
        Self {
            url: url.into(),
            transport,
            retry,
            headers: Vec::new(),
            limit: ConcurrencyLimit::new(max_in_flight),
        }
    }
}

enum Attempt {
    Transient(String),
    Permanent(String),
}

impl<T: Transport> SegmentationProvider for HttpSegmentationProvider<T> {
    fn segment(&self, image_id: &str, image_bytes: &[u8]) -> Result<Vec<SegmentedRegion>, PoolError> {
        let request = HttpRequest {
            url: self.url.clone(),
            body: json!({
                "image_id": image_id,
                "image": base64::engine::general_purpose::STANDARD.encode(image_bytes),
            }),
        };
        let _permit = self.limit.acquire();
        let result = self.retry.run(
            || match self.transport.post_json(&request, &self.headers, self.retry.timeout) {
                Err(e @ TransportError::Cassette(_)) => Err(Attempt::Permanent(e.to_string())),
                Err(e) => Err(Attempt::Transient(e.to_string())),
                Ok(resp) if resp.is_transient() => {
                    Err(Attempt::Transient(format!("HTTP {}: {}", resp.status, resp.body)))
                }
                Ok(resp) if !resp.is_success() => {
                    Err(Attempt::Permanent(format!("HTTP {}: {}", resp.status, resp.body)))
                }
                Ok(resp) => serde_json::from_str::<SegmentationResponse>(&resp.body)
                    .map(|r| r.regions)
                    .map_err(|e| Attempt::Permanent(format!("malformed response: {e}"))),
            },
            |e| matches!(e, Attempt::Transient(_)),
        );
        result.map_err(|e| match e {
            Attempt::Transient(m) => PoolError::ProviderUnavailable(m),
            Attempt::Permanent(message) => PoolError::ProviderRejected {
                image_id: image_id.to_string(),
                message,
            },
        })
    }
}
