use std::path::Path;

use image::{Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::imgproc::resize_bilinear;
use crate::tensor::Tensor;

/// Frame size fed to the network, `(rows, columns)`.
pub const TARGET_SIZE: (usize, usize) = (240, 320);

pub fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })?;
    Ok(img.to_rgb8())
}

/// 8-bit image → `H x W x 3` tensor in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Tensor::from_parts(vec![h as usize, w as usize, 3], data)
}

/// Bilinear resample to `height x width` with values in `[0, 1]`.
pub fn resize_frame(img: &RgbImage, height: usize, width: usize) -> Result<Tensor<f32>> {
    let t = image_to_tensor(img);
    if t.is_empty() {
        return Err(Error::invalid("cannot resize an empty image"));
    }
    resize_tensor(&t, height, width)
}

pub fn resize_tensor(t: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let &[h, w, c] = t.shape() else {
        return Err(Error::shape(format!("expected HxWxC image, got {:?}", t.shape())));
    };
    if height == 0 || width == 0 {
        return Err(Error::invalid("target size must be positive"));
    }
    let out = resize_bilinear(t.data(), h, w, c, height, width);
    Tensor::new(vec![height, width, c], out)
}

pub fn load_frame(path: &Path, size: (usize, usize)) -> Result<Tensor<f32>> {
    resize_frame(&load_rgb(path)?, size.0, size.1)
}

pub fn tensor_to_image(t: &Tensor<f32>) -> Result<RgbImage> {
    let &[h, w, 3] = t.shape() else {
        return Err(Error::shape(format!("expected HxWx3 image, got {:?}", t.shape())));
    };
    let mut img = RgbImage::new(w as u32, h as u32);
    for (i, px) in t.data().chunks(3).enumerate() {
        let q = |v: f32| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        img.put_pixel((i % w) as u32, (i / w) as u32, Rgb([q(px[0]), q(px[1]), q(px[2])]));
    }
    Ok(img)
}

pub fn save_png(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    tensor_to_image(t)?.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_480x640() {
        let img = RgbImage::from_fn(640, 480, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, 7]));
        let t = resize_frame(&img, 240, 320).unwrap();
        assert_eq!(t.shape(), &[240, 320, 3]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = RgbImage::from_pixel(97, 61, Rgb([200, 10, 128]));
        let t = resize_frame(&img, 240, 320).unwrap();
        for px in t.data().chunks(3) {
            assert!((px[0] - 200.0 / 255.0).abs() < 1e-6);
            assert!((px[1] - 10.0 / 255.0).abs() < 1e-6);
            assert!((px[2] - 128.0 / 255.0).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_size_is_unchanged() {
        let img =
            RgbImage::from_fn(320, 240, |x, y| Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, ((x + y) % 256) as u8]));
        let t = resize_frame(&img, 240, 320).unwrap();
        assert!(t.max_abs_diff(&image_to_tensor(&img)) < 1e-6);
    }

    #[test]
    fn png_roundtrip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::from_fn(vec![4, 5, 3], |i| (i % 11) as f32 / 10.0);
        let p = dir.path().join("x.png");
        save_png(&p, &t).unwrap();
        let back = image_to_tensor(&load_rgb(&p).unwrap());
        assert!(back.max_abs_diff(&t) <= 0.5 / 255.0 + 1e-6);
    }
}
