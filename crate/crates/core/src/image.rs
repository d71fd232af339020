//! Frames, square crops and PPM/PGM files.
//!
//! A frame is an `[H, W, 3]` tensor with values in `[0, 1]`. Box coordinates
//! are continuous: pixel `(x, y)` covers `[x, x+1) × [y, y+1)`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A square region of a frame resampled to `out_res × out_res`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CropGeometry {
    pub cx: f64,
    pub cy: f64,
    /// Side length in frame pixels.
    pub side: f64,
    pub out_res: usize,
}

impl CropGeometry {
    /// Square context of side `context·√(w·h)` centered on `bbox`.
    pub fn around(bbox: &BBox, context: f64, out_res: usize) -> Result<Self> {
        bbox.validate()?;
        Ok(CropGeometry {
            cx: bbox.cx,
            cy: bbox.cy,
            side: context * (bbox.w * bbox.h).sqrt(),
            out_res,
        })
    }

    /// Frame pixels per crop pixel.
    pub fn scale(&self) -> f64 {
        self.side / self.out_res as f64
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.cx - self.side / 2.0, self.cy - self.side / 2.0)
    }

    pub fn to_frame(&self, u: f64, v: f64) -> (f64, f64) {
        let (x0, y0) = self.origin();
        (x0 + u * self.scale(), y0 + v * self.scale())
    }

    pub fn to_crop(&self, x: f64, y: f64) -> (f64, f64) {
        let (x0, y0) = self.origin();
        ((x - x0) / self.scale(), (y - y0) / self.scale())
    }

    pub fn box_to_frame(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_frame(b.cx, b.cy);
        BBox::new(cx, cy, b.w * self.scale(), b.h * self.scale())
    }

    pub fn box_to_crop(&self, b: &BBox) -> BBox {
        let (cx, cy) = self.to_crop(b.cx, b.cy);
        BBox::new(cx, cy, b.w / self.scale(), b.h / self.scale())
    }
}

pub fn frame_dims(frame: &Tensor) -> Result<(usize, usize)> {
    match frame.shape() {
        &[h, w, 3] if h > 0 && w > 0 => Ok((h, w)),
        s => Err(Error::Image(format!(
            "expected a non-empty [H, W, 3] frame, got {s:?}"
        ))),
    }
}

pub fn channel_mean(frame: &Tensor) -> Result<[f64; 3]> {
    let (h, w) = frame_dims(frame)?;
    let mut m = [0.0; 3];
    for px in frame.data().chunks(3) {
        for k in 0..3 {
            m[k] += px[k];
        }
    }
    Ok(m.map(|v| v / (h * w) as f64))
}

/// Bilinear resample of the crop region. Taps outside the frame read the
/// frame's per-channel mean.
pub fn crop_and_resize(frame: &Tensor, geom: &CropGeometry) -> Result<Tensor> {
    let (h, w) = frame_dims(frame)?;
    if !(geom.side > 0.0 && geom.side.is_finite()) || geom.out_res == 0 {
        return Err(Error::InvalidArgument(format!("invalid crop {geom:?}")));
    }
    let mean = channel_mean(frame)?;
    let data = frame.data();
    let n = geom.out_res;
    let s = geom.scale();
    let (x0, y0) = geom.origin();
    let tap = |y: i64, x: i64, k: usize| -> f64 {
        if y < 0 || x < 0 || y >= h as i64 || x >= w as i64 {
            mean[k]
        } else {
            data[(y as usize * w + x as usize) * 3 + k]
        }
    };
    let mut out = vec![0.0; n * n * 3];
    for v in 0..n {
        let y = y0 + (v as f64 + 0.5) * s - 0.5;
        let yf = y.floor();
        let ty = y - yf;
        for u in 0..n {
            let x = x0 + (u as f64 + 0.5) * s - 0.5;
            let xf = x.floor();
            let tx = x - xf;
            let (yi, xi) = (yf as i64, xf as i64);
            for k in 0..3 {
                let top = tap(yi, xi, k) * (1.0 - tx) + tap(yi, xi + 1, k) * tx;
                let bot = tap(yi + 1, xi, k) * (1.0 - tx) + tap(yi + 1, xi + 1, k) * tx;
                out[(v * n + u) * 3 + k] = top * (1.0 - ty) + bot * ty;
            }
        }
    }
    Tensor::new([n, n, 3], out)
}

fn read_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Image("malformed PPM header".into()))
}

/// Decodes a binary (P6) PPM with maxval ≤ 255.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if !bytes.starts_with(b"P6") {
        return Err(Error::Image("not a binary PPM (P6)".into()));
    }
    let mut pos = 2;
    let w = read_token(bytes, &mut pos)?;
    let h = read_token(bytes, &mut pos)?;
    let maxval = read_token(bytes, &mut pos)?;
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(Error::Image(format!(
            "unsupported PPM {w}x{h} maxval {maxval}"
        )));
    }
    pos += 1;
    let need = w * h * 3;
    let payload = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::Image(format!("PPM payload truncated: need {need} bytes")))?;
    let data = payload.iter().map(|&b| b as f64 / maxval as f64).collect();
    Tensor::new([h, w, 3], data)
}

pub fn encode_ppm(frame: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = frame_dims(frame)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(
        frame
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    Ok(out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(frame)?)?;
    Ok(())
}

/// Writes an `[H, W]` map with values in `[0, 1]` as a binary (P5) PGM.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let (h, w) = map.dims2("write_pgm")?;
    let mut f = fs::File::create(path)?;
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    f.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn([h, w, 3], |i| (i % 251) as f64 / 250.0)
    }

    #[test]
    fn inside_crop_at_native_scale_is_identity() {
        let f = ramp(20, 30);
        let g = CropGeometry {
            cx: 15.0,
            cy: 10.0,
            side: 8.0,
            out_res: 8,
        };
        let c = crop_and_resize(&f, &g).unwrap();
        for v in 0..8 {
            for u in 0..8 {
                for k in 0..3 {
                    assert_eq!(c.get(&[v, u, k]), f.get(&[6 + v, 11 + u, k]));
                }
            }
        }
    }

    #[test]
    fn crop_outside_frame_is_mean_colored() {
        let f = ramp(10, 10);
        let mean = channel_mean(&f).unwrap();
        let g = CropGeometry {
            cx: -100.0,
            cy: 50.0,
            side: 12.0,
            out_res: 6,
        };
        let c = crop_and_resize(&f, &g).unwrap();
        for px in c.data().chunks(3) {
            for k in 0..3 {
                assert!((px[k] - mean[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkerboard_upsample_matches_direct_bilinear() {
        let f = Tensor::from_fn([4, 4, 3], |i| {
            let (y, x) = (i / 12, (i / 3) % 4);
            ((x + y) % 2) as f64
        });
        let mean = 0.5;
        let g = CropGeometry {
            cx: 2.0,
            cy: 2.0,
            side: 4.0,
            out_res: 8,
        };
        let c = crop_and_resize(&f, &g).unwrap();
        let px = |y: i64, x: i64| {
            if (0..4).contains(&y) && (0..4).contains(&x) {
                ((x + y) % 2) as f64
            } else {
                mean
            }
        };
        for v in 0..8 {
            for u in 0..8 {
                let (x, y) = (u as f64 / 2.0 - 0.25, v as f64 / 2.0 - 0.25);
                let (xi, yi) = (x.floor() as i64, y.floor() as i64);
                let (tx, ty) = (x - x.floor(), y - y.floor());
                let want = px(yi, xi) * (1.0 - tx) * (1.0 - ty)
                    + px(yi, xi + 1) * tx * (1.0 - ty)
                    + px(yi + 1, xi) * (1.0 - tx) * ty
                    + px(yi + 1, xi + 1) * tx * ty;
                assert!((c.get(&[v, u, 1]) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ppm_round_trip() {
        let f = Tensor::from_fn([5, 7, 3], |i| (i * 37 % 256) as f64 / 255.0);
        let back = decode_ppm(&encode_ppm(&f).unwrap()).unwrap();
        assert!(back.max_abs_diff(&f) < 1e-12);
        assert!(decode_ppm(b"P6\n2 2\n255\n\x00").is_err());
        assert!(decode_ppm(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn geometry_round_trip() {
        let g = CropGeometry::around(&BBox::new(50.0, 40.0, 20.0, 5.0), 4.0, 256).unwrap();
        assert_eq!(g.side, 40.0);
        let (x, y) = g.to_frame(128.0, 128.0);
        assert_eq!((x, y), (50.0, 40.0));
        let b = BBox::new(3.0, 4.0, 5.0, 6.0);
        let r = g.box_to_crop(&g.box_to_frame(&b));
        assert!((r.cx - b.cx).abs() < 1e-12 && (r.h - b.h).abs() < 1e-12);
    }
}
