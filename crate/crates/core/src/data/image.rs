//! Binary PPM (P6) I/O, bilinear resizing and box drawing on `[3, H, W]` images.

use std::path::Path;

use crate::anchors::BoxCorner;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_image(img: &Tensor) -> Result<(usize, usize)> {
    if img.rank() != 3 || img.dim(0) != 3 {
        return Err(Error::Shape(format!("expected image (3, H, W), got {:?}", img.shape())));
    }
    Ok((img.dim(1), img.dim(2)))
}

/// Decodes a P6 file with maxval 255 into a `[3, H, W]` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8], origin: &str) -> Result<Tensor> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(origin, "truncated PPM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(Error::parse(origin, format!("unsupported magic `{}` (expected P6)", fields[0])));
    }
    let num = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::parse(origin, format!("bad {what} `{s}` in PPM header")))
    };
    let (w, h, maxval) = (num(&fields[1], "width")?, num(&fields[2], "height")?, num(&fields[3], "maxval")?);
    if maxval != 255 {
        return Err(Error::parse(origin, format!("unsupported maxval {maxval} (expected 255)")));
    }
    if w == 0 || h == 0 {
        return Err(Error::parse(origin, "zero image dimension"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(origin, "missing raster after PPM header"));
    }
    pos += 1;
    let raster = &bytes[pos..];
    if raster.len() != w * h * 3 {
        return Err(Error::parse(
            origin,
            format!("raster holds {} bytes, expected {}", raster.len(), w * h * 3),
        ));
    }
    let mut data = vec![0.0f32; 3 * h * w];
    for (p, px) in raster.chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = check_image(img)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for p in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn load_ppm(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ppm(&bytes, &path.display().to_string())
}

pub fn save_ppm(img: &Tensor, path: &Path) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| Error::io(path, e))
}

/// Loads a PPM and optionally resizes it to `size x size`.
pub fn load_image(path: &Path, size: Option<usize>) -> Result<Tensor> {
    let img = load_ppm(path)?;
    match size {
        Some(s) => resize_bilinear(&img, s, s),
        None => Ok(img),
    }
}

/// Half-pixel-centered bilinear resampling.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::Shape("resize to an empty image".into()));
    }
    if (h, w) == (out_h, out_w) {
        return Ok(img.detach());
    }
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f32)> {
        let s = n_in as f32 / n_out as f32;
        (0..n_out)
            .map(|o| {
                let x = ((o as f32 + 0.5) * s - 0.5).clamp(0.0, (n_in - 1) as f32);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, x - i0 as f32)
            })
            .collect()
    };
    let (ys, xs) = (axis(out_h, h), axis(out_w, w));
    let src = img.data();
    let mut data = Vec::with_capacity(3 * out_h * out_w);
    for c in 0..3 {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(&[3, out_h, out_w], data)
}

/// Crops the pixel rectangle `[x0, x1) x [y0, y1)`.
pub fn crop(img: &Tensor, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if !(x0 < x1 && y0 < y1 && x1 <= w && y1 <= h) {
        return Err(Error::Shape(format!("crop [{x0},{x1})x[{y0},{y1}) outside {w}x{h} image")));
    }
    let src = img.data();
    let mut data = Vec::with_capacity(3 * (x1 - x0) * (y1 - y0));
    for c in 0..3 {
        for y in y0..y1 {
            let row = c * h * w + y * w;
            data.extend_from_slice(&src[row + x0..row + x1]);
        }
    }
    Tensor::new(&[3, y1 - y0, x1 - x0], data)
}

/// Pixel rectangle covered by a normalized box on a `w x h` image, inclusive bounds.
pub fn box_to_pixels(b: &BoxCorner, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let px = |v: f32, n: usize| ((v * n as f32).round() as isize).clamp(0, n as isize) as usize;
    let (x0, y0) = (px(b.xmin, w).min(w - 1), px(b.ymin, h).min(h - 1));
    let (x1, y1) = (px(b.xmax, w).saturating_sub(1).max(x0), px(b.ymax, h).saturating_sub(1).max(y0));
    (x0, y0, x1.min(w - 1), y1.min(h - 1))
}

/// Burns a one-pixel rectangle outline into a copy of `img`.
pub fn draw_box(img: &Tensor, b: &BoxCorner, color: [f32; 3]) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    let (x0, y0, x1, y1) = box_to_pixels(b, w, h);
    let mut data = img.to_vec();
    let mut put = |x: usize, y: usize| {
        for (c, v) in color.iter().enumerate() {
            data[c * h * w + y * w + x] = *v;
        }
    };
    for x in x0..=x1 {
        put(x, y0);
        put(x, y1);
    }
    for y in y0..=y1 {
        put(x0, y);
        put(x1, y);
    }
    Tensor::new(&[3, h, w], data)
}

/// Deterministic distinct-ish color for a class id.
pub fn class_color(class_id: usize) -> [f32; 3] {
    const PALETTE: [[f32; 3]; 8] = [
        [1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, 0.4, 1.0],
        [1.0, 1.0, 0.0],
        [1.0, 0.0, 1.0],
        [0.0, 1.0, 1.0],
        [1.0, 0.5, 0.0],
        [1.0, 1.0, 1.0],
    ];
    PALETTE[class_id % PALETTE.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn white_2x2() {
        let mut bytes = b"P6\n2 2\n255\n".to_vec();
        bytes.extend(std::iter::repeat(255u8).take(12));
        let t = decode_ppm(&bytes, "mem").unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn red_pixel_and_comments() {
        let mut bytes = b"P6 # comment\n1 1\n# more\n255\n".to_vec();
        bytes.extend([255u8, 0, 0]);
        assert_eq!(decode_ppm(&bytes, "mem").unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn malformed_headers() {
        for bad in [&b"P3\n1 1\n255\n\0\0\0"[..], b"P6\n1\n", b"P6\n1 1\n65535\n\0\0\0", b"P6\n2 2\n255\n\0"] {
            assert!(matches!(decode_ppm(bad, "mem"), Err(Error::Parse { .. })));
        }
    }

    #[test]
    fn ppm_roundtrip_is_exact_for_8bit() {
        let data: Vec<f32> = (0..3 * 4 * 5).map(|i| ((i * 17) % 256) as f32 / 255.0).collect();
        let img = Tensor::new(&[3, 4, 5], data).unwrap();
        let back = decode_ppm(&encode_ppm(&img).unwrap(), "mem").unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn resize_constant_is_constant() {
        let img = Tensor::full(&[3, 7, 5], 0.25);
        let r = resize_bilinear(&img, 13, 3).unwrap();
        assert_eq!(r.shape(), &[3, 13, 3]);
        assert!(r.data().iter().all(|&v| (v - 0.25).abs() < 1e-7));
    }

    #[test]
    fn draw_box_outline() {
        let img = Tensor::zeros(&[3, 10, 10]);
        let out = draw_box(&img, &BoxCorner::new(0.2, 0.2, 0.6, 0.8), [1.0, 0.0, 0.0]).unwrap();
        let red = &out.data()[..100];
        assert_eq!(red[2 * 10 + 2], 1.0);
        assert_eq!(red[7 * 10 + 5], 1.0);
        assert_eq!(red[5 * 10 + 4], 0.0);
    }
}
