use std::fs;
use std::path::Path;

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Scales 8-bit RGB rows (`H·W·3` bytes) to an `H×W×3` tensor in `[0, 1]`.
pub fn rgb_to_tensor(width: usize, height: usize, bytes: &[u8]) -> Result<Tensor> {
    let data = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    let mut t = Tensor::new([height, width, 3], data)?;
    t.round_to_f32();
    Ok(t)
}

/// Decodes PNG, JPEG or PNM, converts to RGB and resizes bilinearly to
/// `size×size` when needed.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .to_rgb8();
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle)
    };
    rgb_to_tensor(size, size, img.as_raw())
}

/// Writes 8-bit RGB rows as a binary PPM (P6).
pub fn write_ppm(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    debug_assert_eq!(bytes.len(), width * height * 3);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(bytes);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
