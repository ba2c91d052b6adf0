use std::path::Path;

use image::{ImageError, ImageReader, RgbImage};

use super::{ImageTensor, CHANNELS};
use crate::error::{Error, Result};

/// Round-half-up 8-bit quantization.
#[inline]
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Decodes a PNG or JPEG into `[0, 1]` samples. Grayscale is expanded to three
/// channels and alpha is dropped.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let decoded = reader.decode().map_err(|e| match e {
        ImageError::IoError(source) => Error::io(path, source),
        other => Error::Format {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&b| f32::from(b) / 255.0).collect();
    ImageTensor::new(h as usize, w as usize, data)
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(image: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    debug_assert_eq!(bytes.len(), image.height() * image.width() * CHANNELS);
    let buf = RgbImage::from_raw(image.width() as u32, image.height() as u32, bytes)
        .ok_or_else(|| Error::arg("image buffer size mismatch"))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            ImageError::IoError(source) => Error::io(path, source),
            other => Error::Format {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Rng64;

    fn write_png(path: &Path, w: u32, h: u32, bytes: Vec<u8>) {
        RgbImage::from_raw(w, h, bytes).unwrap().save(path).unwrap();
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.7), 179);
    }

    #[test]
    fn load_extremes_and_levels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        write_png(&p, 1, 1, vec![255, 255, 255]);
        assert_eq!(load_image(&p).unwrap().data(), &[1.0, 1.0, 1.0]);

        let p = dir.path().join("black.png");
        write_png(&p, 1, 1, vec![0, 0, 0]);
        assert_eq!(load_image(&p).unwrap().data(), &[0.0, 0.0, 0.0]);

        let p = dir.path().join("levels.png");
        let levels = [0u8, 85, 170, 255];
        let bytes = levels.iter().flat_map(|&v| [v, v, v]).collect();
        write_png(&p, 2, 2, bytes);
        let img = load_image(&p).unwrap();
        for (i, &l) in levels.iter().enumerate() {
            assert_eq!(img.pixel(i / 2, i % 2), [f32::from(l) / 255.0; 3]);
        }
    }

    #[test]
    fn grayscale_and_alpha_are_normalized_to_rgb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("gray.png");
        image::GrayImage::from_raw(1, 1, vec![51]).unwrap().save(&p).unwrap();
        assert_eq!(load_image(&p).unwrap().pixel(0, 0), [0.2; 3]);

        let p = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![255, 0, 0, 7])
            .unwrap()
            .save(&p)
            .unwrap();
        assert_eq!(load_image(&p).unwrap().pixel(0, 0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn jpeg_is_readable() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jpg");
        RgbImage::from_pixel(8, 8, image::Rgb([200, 100, 50])).save(&p).unwrap();
        let img = load_image(&p).unwrap();
        assert_eq!((img.height(), img.width()), (8, 8));
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let p = dir.path().join("junk.png");
        std::fs::write(&p, b"definitely not an image").unwrap();
        assert!(matches!(load_image(&p), Err(Error::Format { .. })));

        let img = ImageTensor::filled(1, 1, 0.5).unwrap();
        assert!(save_image(&img, dir.path().join("no/such/dir/x.png")).is_err());
    }

    #[test]
    fn save_bytes_and_round_trip_bound() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.png");
        save_image(&ImageTensor::filled(1, 1, 0.5).unwrap(), &p).unwrap();
        let raw = image::open(&p).unwrap().to_rgb8();
        assert_eq!(raw.as_raw(), &vec![128, 128, 128]);

        let mut rng = Rng64::new(3);
        let img = ImageTensor::from_fn(17, 13, |_, _, _| rng.next_f64() as f32);
        let p = dir.path().join("rand.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-7);

        // save . load . save is byte-idempotent
        let p2 = dir.path().join("rand2.png");
        save_image(&back, &p2).unwrap();
        assert_eq!(
            image::open(&p).unwrap().to_rgb8().as_raw(),
            image::open(&p2).unwrap().to_rgb8().as_raw()
        );
    }
}
