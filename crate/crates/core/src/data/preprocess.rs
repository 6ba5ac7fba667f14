use super::ImageGrid;
use crate::error::{Error, Result};
use image::imageops::FilterType;
use image::{DynamicImage, GrayImage};

/// Maps an 8-bit intensity linearly onto [-1, 1]; 0 and 255 land exactly on the endpoints.
pub fn u8_to_unit(v: u8) -> f32 {
    v as f32 / 255.0 * 2.0 - 1.0
}

fn unit_to_u8(x: f32) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

/// Resizes to `target_size` × `target_size` (bicubic), optionally converts to
/// grayscale, and normalizes to [-1, 1]. Inputs already at the target size are
/// not resampled.
pub fn preprocess_image(raw: &DynamicImage, target_size: usize, to_gray: bool) -> Result<ImageGrid> {
    if raw.width() == 0 || raw.height() == 0 {
        return Err(Error::InvalidInput("image has a zero-sized dimension".into()));
    }
    if target_size == 0 || !target_size.is_power_of_two() {
        return Err(Error::InvalidInput(format!(
            "target size {target_size} is not a power of two"
        )));
    }
    let t = target_size as u32;
    let resized = if raw.width() == t && raw.height() == t {
        raw.clone()
    } else {
        raw.resize_exact(t, t, FilterType::CatmullRom)
    };
    if to_gray {
        let gray = resized.to_luma8();
        let data = gray.pixels().map(|p| u8_to_unit(p.0[0])).collect();
        ImageGrid::new(1, target_size, target_size, data)
    } else {
        let rgb = resized.to_rgb8();
        let plane = target_size * target_size;
        let mut data = vec![0f32; 3 * plane];
        for (i, p) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * plane + i] = u8_to_unit(p.0[c]);
            }
        }
        ImageGrid::new(3, target_size, target_size, data)
    }
}

/// Quantizes the first channel of a grid back to an 8-bit grayscale image.
pub fn grid_to_luma8(grid: &ImageGrid) -> GrayImage {
    let plane = grid.height * grid.width;
    let bytes = grid.data[..plane].iter().map(|&x| unit_to_u8(x)).collect();
    GrayImage::from_raw(grid.width as u32, grid.height as u32, bytes)
        .expect("buffer length matches dimensions")
}
