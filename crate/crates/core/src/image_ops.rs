//! Image tensors (`[height x width x channels]`, values in `[0, 1]`) and
//! the resampling helpers shared by tiling and saliency resizing.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Corner-aligned bilinear resampling of an `h x w x c` raster.
///
/// Output corners coincide with input corners, so resampling to the same
/// size is the identity.
pub fn resize_bilinear(src: &[Float], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<Float> {
    let coord = |i: usize, n_out: usize, n_in: usize| -> Float {
        if n_out == 1 {
            (n_in - 1) as Float / 2.0
        } else {
            i as Float * (n_in - 1) as Float / (n_out - 1) as Float
        }
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for i in 0..out_h {
        let y = coord(i, out_h, h);
        let y0 = (y.floor() as usize).min(h - 1);
        let y1 = (y0 + 1).min(h - 1);
        let fy = y - y0 as Float;
        for j in 0..out_w {
            let x = coord(j, out_w, w);
            let x0 = (x.floor() as usize).min(w - 1);
            let x1 = (x0 + 1).min(w - 1);
            let fx = x - x0 as Float;
            for ch in 0..c {
                let at = |yy: usize, xx: usize| src[(yy * w + xx) * c + ch];
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    out
}

pub fn resize_image(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    img.expect_rank(3, "resize_image")?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(img.clone());
    }
    Tensor::new(vec![out_h, out_w, c], resize_bilinear(img.data(), h, w, c, out_h, out_w))
}

/// Copies the `rows x cols` window starting at `(top, left)`.
pub fn crop(img: &Tensor, top: usize, left: usize, rows: usize, cols: usize) -> Result<Tensor> {
    img.expect_rank(3, "crop")?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if top + rows > h || left + cols > w {
        return Err(Error::shape(
            "crop",
            format!("window {rows}x{cols}@({top},{left}) exceeds {h}x{w}"),
        ));
    }
    let mut data = Vec::with_capacity(rows * cols * c);
    for y in top..top + rows {
        data.extend_from_slice(&img.data()[(y * w + left) * c..(y * w + left + cols) * c]);
    }
    Tensor::new(vec![rows, cols, c], data)
}

pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&b| b as Float / 255.0).collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Binary PPM (P6) bytes for an RGB image tensor.
pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    img.expect_rank(3, "encode_ppm")?;
    let (h, w, c) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    if c != 3 {
        return Err(Error::shape("encode_ppm", format!("{c} channels")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub(crate) fn to_byte(v: Float) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
