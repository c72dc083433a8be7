use std::io::Cursor;
use std::path::Path;

use image::{ImageFormat, ImageReader};

use super::{CropLocation, CropRef, ImageDimensions, PoolError};

/// Image bytes ready to attach to a request.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedImage {
    pub bytes: Vec<u8>,
    pub mime: &'static str,
}

fn image_error(path: &Path, message: impl ToString) -> PoolError {
    PoolError::Image {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

/// Reads only the header to get pixel dimensions.
pub fn image_dimensions(bytes: &[u8], path: &Path) -> Result<ImageDimensions, PoolError> {
    let (width, height) = ImageReader::new(Cursor::new(bytes))
        .with_guessed_format()
        .map_err(|e| image_error(path, e))?
        .into_dimensions()
        .map_err(|e| image_error(path, e))?;
    Ok(ImageDimensions { width, height })
}

fn mime_for(bytes: &[u8]) -> &'static str {
    match image::guess_format(bytes) {
        Ok(ImageFormat::Jpeg) => "image/jpeg",
        Ok(ImageFormat::Png) => "image/png",
        Ok(ImageFormat::Gif) => "image/gif",
        Ok(ImageFormat::WebP) => "image/webp",
        _ => "application/octet-stream",
    }
}

/// Loads a whole image file as-is.
pub fn load_image(path: &Path) -> Result<EncodedImage, PoolError> {
    let bytes = std::fs::read(path).map_err(|e| image_error(path, e))?;
    Ok(EncodedImage {
        mime: mime_for(&bytes),
        bytes,
    })
}

impl CropRef {
    /// Materializes the crop. Region crops are cut from the source and
    /// re-encoded as PNG.
    pub fn load(&self) -> Result<EncodedImage, PoolError> {
        match &self.location {
            CropLocation::File { path } => load_image(path),
            CropLocation::Region { source, bbox } => {
                let decoded = ImageReader::open(source)
                    .map_err(|e| image_error(source, e))?
                    .with_guessed_format()
                    .map_err(|e| image_error(source, e))?
                    .decode()
                    .map_err(|e| image_error(source, e))?;
                let cropped = decoded.crop_imm(bbox.x, bbox.y, bbox.width, bbox.height);
                let mut out = Cursor::new(Vec::new());
                cropped
                    .write_to(&mut out, ImageFormat::Png)
                    .map_err(|e| image_error(source, e))?;
                Ok(EncodedImage {
                    bytes: out.into_inner(),
                    mime: "image/png",
                })
            }
        }
    }
}
