use std::path::Path;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb, RgbImage};

use crate::error::{Error, Result};
use crate::io::{read_file, write_file};
use crate::tensor::Tensor;

/// Loads an image as `3×H×W` in `[0, 1]`. PNG files are resized to `hw`
/// when needed; `.tensor` files hold a raw `3×H×W` float dump of exactly
/// that size.
pub fn load_image(path: &Path, hw: [usize; 2]) -> Result<Tensor> {
    let img_err = |msg: String| Error::Image { path: path.into(), msg };
    if path.extension().is_some_and(|e| e == "tensor") {
        let bytes = read_file(path)?;
        let t = Tensor::read_from(&mut bytes.as_slice()).map_err(|e| img_err(e.to_string()))?;
        if t.shape() != [3, hw[0], hw[1]] {
            return Err(img_err(format!(
                "raw tensor is {:?}, expected [3, {}, {}]",
                t.shape(),
                hw[0],
                hw[1]
            )));
        }
        return Ok(t);
    }
    let decoded = image::open(path).map_err(|e| img_err(e.to_string()))?.to_rgb8();
    let (h, w) = (hw[0] as u32, hw[1] as u32);
    let rgb = if decoded.dimensions() == (w, h) {
        decoded
    } else {
        image::imageops::resize(&decoded, w, h, FilterType::Triangle)
    };
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor(rgb: &RgbImage) -> Tensor {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data).expect("sizes agree")
}

/// Quantizes a `3×H×W` tensor in `[0, 1]` to 8 bits per channel.
pub fn tensor_to_rgb(t: &Tensor) -> Result<RgbImage> {
    if t.rank() != 3 || t.shape()[0] != 3 {
        return Err(Error::invalid(
            "tensor_to_rgb",
            format!("expected 3×H×W, got {:?}", t.shape()),
        ));
    }
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let d = t.data();
    Ok(ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (d[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

pub fn save_png(path: &Path, t: &Tensor) -> Result<()> {
    let rgb = tensor_to_rgb(t)?;
    let mut bytes = Vec::new();
    rgb.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|e| Error::Image {
            path: path.into(),
            msg: e.to_string(),
        })?;
    write_file(path, &bytes)
}
