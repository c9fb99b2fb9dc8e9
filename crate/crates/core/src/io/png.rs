//! PNG reading and writing for images (8-bit RGB) and label maps (16-bit or
//! 8-bit single channel).

use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::types::{ImageTensor, LabelRaster};

fn image_err(path: &Path, source: image::ImageError) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        source,
    }
}

pub fn read_rgb(path: &Path) -> Result<ImageTensor> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    ImageTensor::new(1, h, w, data)
}

/// Writes one image of the batch, rounding to the nearest 8-bit level.
pub fn write_rgb(path: &Path, img: &ImageTensor, b: usize) -> Result<()> {
    let (h, w) = (img.height(), img.width());
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Rgb(std::array::from_fn(|c| (img.get(b, c, y as usize, x as usize) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| image_err(path, e))
}

/// Reads a single-channel label PNG of any bit depth up to 16.
pub fn read_labels(path: &Path) -> Result<LabelRaster> {
    let (h, w, labels): (u32, u32, Vec<u32>) = match image::open(path).map_err(|e| image_err(path, e))? {
        DynamicImage::ImageLuma8(b) => (b.height(), b.width(), b.pixels().map(|p| p[0] as u32).collect()),
        DynamicImage::ImageLuma16(b) => (b.height(), b.width(), b.pixels().map(|p| p[0] as u32).collect()),
        _ => return Err(Error::load(path, "label maps must be single-channel 8- or 16-bit")),
    };
    LabelRaster::new(h as usize, w as usize, labels)
}

pub fn write_labels16(path: &Path, labels: &LabelRaster) -> Result<()> {
    if labels.max_label() > u16::MAX as u32 {
        return Err(Error::invalid("label exceeds the 16-bit range"));
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_fn(labels.width() as u32, labels.height() as u32, |x, y| Luma([labels.get(y as usize, x as usize) as u16]));
    buf.save(path).map_err(|e| image_err(path, e))
}

pub fn write_labels8(path: &Path, labels: &LabelRaster) -> Result<()> {
    if labels.max_label() > u8::MAX as u32 {
        return Err(Error::invalid("label exceeds the 8-bit range"));
    }
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_fn(labels.width() as u32, labels.height() as u32, |x, y| Luma([labels.get(y as usize, x as usize) as u8]));
    buf.save(path).map_err(|e| image_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(3, 5, |y, x| [y as f64 / 2.0, x as f64 / 4.0, 1.0]).unwrap();
        let p = dir.path().join("a.png");
        write_rgb(&p, &img, 0).unwrap();
        let back = read_rgb(&p).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let labels = LabelRaster::new(2, 3, vec![0, 1, 300, 65535, 2, 2]).unwrap();
        write_labels16(&p, &labels).unwrap();
        assert_eq!(read_labels(&p).unwrap(), labels);
        let small = LabelRaster::new(1, 2, vec![4, 0]).unwrap();
        write_labels8(&p, &small).unwrap();
        assert_eq!(read_labels(&p).unwrap(), small);
        assert!(write_labels8(&p, &labels).is_err());
        write_rgb(&p, &img, 0).unwrap();
        assert!(read_labels(&p).is_err());
    }
}
