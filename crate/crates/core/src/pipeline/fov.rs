use std::collections::VecDeque;

use image::RgbImage;

use super::image::Mask;
use crate::error::{Error, Result};

/// Field-of-view mask: channel mean above `threshold` (a fraction of 255),
/// holes filled, largest 4-connected component kept.
pub fn generate_fov_mask(rgb: &RgbImage, threshold: f32) -> Result<Mask> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let cut = threshold * 255.0;
    let data = rgb.pixels().map(|p| p.0.iter().map(|&c| f32::from(c)).sum::<f32>() / 3.0 > cut).collect();
    let mut mask = Mask::new(w, h, data)?;
    if mask.count() == 0 {
        return Err(Error::Degenerate(format!(
            "no pixel brighter than the FOV threshold {threshold:.4} ({cut:.1}/255)"
        )));
    }
    fill_holes(&mut mask);
    Ok(largest_component(&mask))
}

fn neighbours(i: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (i % w, i / w);
    [
        (x > 0).then(|| i - 1),
        (x + 1 < w).then(|| i + 1),
        (y > 0).then(|| i - w),
        (y + 1 < h).then(|| i + w),
    ]
    .into_iter()
    .flatten()
}

/// Set every unset pixel that cannot reach the border through unset pixels.
pub fn fill_holes(mask: &mut Mask) {
    let (w, h) = (mask.width(), mask.height());
    let mut outside = vec![false; w * h];
    let mut queue = VecDeque::new();
    for i in 0..w * h {
        let (x, y) = (i % w, i / w);
        let border = x == 0 || y == 0 || x + 1 == w || y + 1 == h;
        if border && !mask.data()[i] {
            outside[i] = true;
            queue.push_back(i);
        }
    }
    while let Some(i) = queue.pop_front() {
        for j in neighbours(i, w, h) {
            if !outside[j] && !mask.data()[j] {
                outside[j] = true;
                queue.push_back(j);
            }
        }
    }
    for (i, out) in outside.into_iter().enumerate() {
        if !out {
            mask.set(i % w, i / w, true);
        }
    }
}

/// Largest 4-connected set component; the first in row-major order wins ties.
pub fn largest_component(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut label = vec![0u32; w * h];
    let mut best = (0u32, 0usize);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data()[start] || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            for j in neighbours(i, w, h) {
                if mask.data()[j] && label[j] == 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        if size > best.1 {
            best = (next, size);
        }
    }
    Mask::new(w, h, label.into_iter().map(|l| l != 0 && l == best.0).collect()).expect("same dimensions")
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn disk(w: u32, h: u32, cx: f32, cy: f32, r: f32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let d = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt();
            if d <= r {
                Rgb([180, 90, 40])
            } else {
                Rgb([3, 2, 1])
            }
        })
    }

    #[test]
    fn black_image_is_degenerate() {
        let img = RgbImage::new(10, 10);
        assert!(matches!(generate_fov_mask(&img, 30.0 / 255.0), Err(Error::Degenerate(_))));
    }

    #[test]
    fn disk_with_dark_hole_and_speck() {
        let mut img = disk(40, 30, 20.0, 15.0, 10.0);
        // A dark vessel-like hole inside and a bright speck outside.
        img.put_pixel(20, 15, Rgb([0, 0, 0]));
        img.put_pixel(21, 15, Rgb([0, 0, 0]));
        img.put_pixel(1, 1, Rgb([255, 255, 255]));
        let mask = generate_fov_mask(&img, 30.0 / 255.0).unwrap();
        for y in 0..30 {
            for x in 0..40 {
                let inside = ((x as f32 - 20.0).powi(2) + (y as f32 - 15.0).powi(2)).sqrt() <= 10.0;
                assert_eq!(mask.get(x, y), inside, "pixel ({x}, {y})");
            }
        }
    }

    #[test]
    fn ties_keep_the_first_component() {
        let m = Mask::from_fn(5, 1, |x, _| x == 0 || x == 4);
        let l = largest_component(&m);
        assert!(l.get(0, 0) && !l.get(4, 0));
    }
}
