use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BoundingBox, CropRef, ImageDimensions, ObjectCandidate, ObjectPool, PoolError, Provenance};
use crate::tracestore::{self, DocumentKind};

pub const MANIFEST_SCHEMA_VERSION: &str = "icot-manifest/1";

/// On-disk manifest: precomputed segmentation output for a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub schema_version: String,
    pub images: Vec<ManifestImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestImage {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    /// Source image; needed when a candidate has no `crop_path`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<PathBuf>,
    pub candidates: Vec<ManifestCandidate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestCandidate {
    pub candidate_id: String,
    /// `[x, y, width, height]` in source pixels.
    #[serde(rename = "box")]
    pub bbox: [u32; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_ref: Option<String>,
}

/// Loads a manifest file into pools keyed by image id.
///
/// Accepts either a bare manifest or one wrapped in a hashed store document.
/// Relative paths resolve against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<BTreeMap<String, ObjectPool>, PoolError> {
    let parse_err = |message: String| PoolError::ManifestParse {
        path: path.display().to_string(),
        message,
    };
    let text = std::fs::read_to_string(path).map_err(|e| parse_err(e.to_string()))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?;
    let manifest: ManifestFile = if value.get("content_hash").is_some() {
        let doc = tracestore::read_document(path).map_err(|e| parse_err(e.to_string()))?;
        if doc.kind != DocumentKind::Manifest {
            return Err(parse_err(format!(
                "stored document is a {:?}, not a manifest",
                doc.kind
            )));
        }
        doc.decode().map_err(|e| parse_err(e.to_string()))?
    } else {
        serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?
    };
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&manifest, base, &path.display().to_string())
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Validates a parsed manifest and builds its pools.
pub fn parse_manifest(
    manifest: &ManifestFile,
    base_dir: &Path,
    label: &str,
) -> Result<BTreeMap<String, ObjectPool>, PoolError> {
    let parse_err = |message: String| PoolError::ManifestParse {
        path: label.to_string(),
        message,
    };
    if manifest.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(parse_err(format!(
            "unsupported schema_version {:?} (expected {MANIFEST_SCHEMA_VERSION:?})",
            manifest.schema_version
        )));
    }
    let mut pools = BTreeMap::new();
    for image in &manifest.images {
        if pools.contains_key(&image.image_id) {
            return Err(parse_err(format!("duplicate image_id {:?}", image.image_id)));
        }
        let dims = ImageDimensions {
            width: image.width,
            height: image.height,
        };
        if dims.area() == 0 {
            return Err(parse_err(format!("image {:?} has zero area", image.image_id)));
        }
        let source = image.image_path.as_ref().map(|p| resolve(base_dir, p));
        let mut source_bytes: Option<Vec<u8>> = None;
        let mut pool = ObjectPool::empty(image.image_id.clone(), dims);
        for entry in &image.candidates {
            if pool.get(&entry.candidate_id).is_some() {
                return Err(parse_err(format!(
                    "duplicate candidate_id {:?} in image {:?}",
                    entry.candidate_id, image.image_id
                )));
            }
            let [x, y, w, h] = entry.bbox;
            let bbox = BoundingBox::new(x, y, w, h);
            let crop_ref = match (&entry.crop_path, &source) {
                (Some(crop), _) => {
                    let crop = resolve(base_dir, crop);
                    let bytes = std::fs::read(&crop).map_err(|e| {
                        parse_err(format!(
                            "candidate {:?}: crop {}: {e}",
                            entry.candidate_id,
                            crop.display()
                        ))
                    })?;
                    CropRef::for_file(crop, &bytes)
                }
                (None, Some(src)) => {
                    if source_bytes.is_none() {
                        source_bytes =
                            Some(std::fs::read(src).map_err(|e| {
                                parse_err(format!("image {:?}: {}: {e}", image.image_id, src.display()))
                            })?);
                    }
                    CropRef::for_region(src.clone(), source_bytes.as_deref().unwrap_or_default(), bbox)
                }
                (None, None) => {
                    return Err(parse_err(format!(
                        "candidate {:?} has no crop_path and image {:?} has no image_path",
                        entry.candidate_id, image.image_id
                    )))
                }
            };
            let mut candidate = ObjectCandidate::new(
                entry.candidate_id.clone(),
                image.image_id.clone(),
                bbox,
                dims,
                crop_ref,
                Provenance::Manifest,
            )?;
            candidate.mask_ref = entry.mask_ref.clone();
            pool.candidates.push(candidate);
        }
        pools.insert(image.image_id.clone(), pool);
    }
    Ok(pools)
}
