use std::path::Path;

use image::{ImageBuffer, ImageReader, Luma, RgbImage};

use crate::error::{Error, Result};
use crate::pipeline::{quantize16, GrayImage, Mask};

/// Groundtruth and mask files are binarized at this 8-bit level.
pub const MASK_THRESHOLD: u8 = 128;

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    })
}

/// 8-bit RGB image (PNG or binary PPM/PGM; grayscale is replicated).
pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    Ok(decode(path)?.to_rgb8())
}

pub fn read_gray8(path: &Path) -> Result<image::GrayImage> {
    Ok(decode(path)?.to_luma8())
}

/// Binary mask: pixel luma >= 128.
pub fn read_mask(path: &Path) -> Result<Mask> {
    let g = read_gray8(path)?;
    let (w, h) = g.dimensions();
    Mask::new(w as usize, h as usize, g.pixels().map(|p| p.0[0] >= MASK_THRESHOLD).collect())
}

fn save<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Decode { path: path.to_path_buf(), message: other.to_string() },
    })
}

pub fn write_gray8(path: &Path, img: &image::GrayImage) -> Result<()> {
    save(path, img)
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    save(path, img)
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    let img = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        Luma([if mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    save(path, &img)
}

/// 16-bit grayscale PNG of a [0, 1] image.
pub fn write_gray16(path: &Path, img: &GrayImage) -> Result<()> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(w, h, |x, y| Luma([quantize16(img.get(x as usize, y as usize))]));
    save(path, &buf)
}

pub fn read_gray16(path: &Path) -> Result<GrayImage> {
    let img = decode(path)?.to_luma16();
    let (w, h) = img.dimensions();
    GrayImage::new(w as usize, h as usize, img.pixels().map(|p| f32::from(p.0[0]) / 65535.0).collect())
}

/// 8-bit probability map: `round(255 p)`, halves rounded up.
pub fn probability_to_u8(p: f32) -> u8 {
    (p.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Vessel iff `p >= threshold`.
pub fn binarize(map: &GrayImage, threshold: f32) -> Mask {
    Mask::threshold(map, threshold)
}

pub fn write_probability_map(map: &GrayImage, path: &Path) -> Result<()> {
    let img = image::GrayImage::from_fn(map.width() as u32, map.height() as u32, |x, y| {
        Luma([probability_to_u8(map.get(x as usize, y as usize))])
    });
    save(path, &img)
}

pub fn write_binary_map(map: &GrayImage, threshold: f32, path: &Path) -> Result<()> {
    write_mask(path, &binarize(map, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(probability_to_u8(0.5), 128);
        assert_eq!(probability_to_u8(0.0), 0);
        assert_eq!(probability_to_u8(1.0), 255);
        assert_eq!(probability_to_u8(1.0 / 255.0), 1);
        assert_eq!(probability_to_u8(1.49 / 255.0), 1);
    }

    #[test]
    fn half_is_vessel() {
        let m = GrayImage::new(3, 1, vec![0.49, 0.5, 0.51]).unwrap();
        assert_eq!(binarize(&m, 0.5).data(), &[false, true, true]);
    }

    #[test]
    fn gray16_round_trip_is_the_quantization() {
        use crate::pipeline::quantize_gray16;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        let img = GrayImage::from_fn(7, 5, |x, y| (x * 5 + y) as f32 / 40.0);
        write_gray16(&p, &img).unwrap();
        assert_eq!(read_gray16(&p).unwrap(), quantize_gray16(&img));
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = read_rgb(Path::new("/definitely/not/here.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn garbage_is_a_decode_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        std::fs::write(&p, b"\x89PNG\r\n\x1a\nnot really").unwrap();
        assert!(matches!(read_rgb(&p), Err(Error::Decode { .. })));
    }
}
