//! Reading and writing 8-bit images.
//!
//! Binary PGM (`P5`) is parsed here so malformed headers can be reported
//! with a byte offset. PNG goes through the `image` crate. Colour inputs are
//! split into a luma working plane plus Cb/Cr planes (full-range BT.601).

use std::path::Path;

use image::{ColorType, DynamicImage, GrayImage, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::metrics::Gray8;
use crate::tensor::Tensor;

/// Chroma planes kept from a colour source, values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Chroma {
    pub h: usize,
    pub w: usize,
    pub cb: Vec<f64>,
    pub cr: Vec<f64>,
}

impl Chroma {
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Chroma {
        let pick = |p: &[f64]| {
            (0..h)
                .flat_map(|r| p[(top + r) * self.w + left..][..w].to_vec())
                .collect()
        };
        Chroma {
            h,
            w,
            cb: pick(&self.cb),
            cr: pick(&self.cr),
        }
    }
}

/// A decoded image: luma as a `1×H×W` tensor in `[0, 1]` and, for colour
/// sources, the chroma planes.
#[derive(Clone, Debug)]
pub struct Decoded {
    pub luma: Tensor,
    pub chroma: Option<Chroma>,
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

pub fn read_image(path: &Path) -> Result<Decoded> {
    let bytes = std::fs::read(path)?;
    decode_image(&bytes)
}

/// Dispatches on the leading magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<Decoded> {
    if bytes.starts_with(b"P5") {
        let g = parse_pgm(bytes)?;
        return Ok(Decoded {
            luma: g.to_tensor(),
            chroma: None,
        });
    }
    if bytes.starts_with(PNG_SIGNATURE) {
        return decode_png(bytes);
    }
    Err(Error::Parse {
        offset: 0,
        msg: "unrecognised image format (expected binary PGM or PNG)".into(),
    })
}

fn decode_png(bytes: &[u8]) -> Result<Decoded> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img.color() {
        ColorType::L8 | ColorType::La8 => {
            let g = img.to_luma8();
            Ok(Decoded {
                luma: Tensor::from_fn(&[1, h, w], |i| g.as_raw()[i] as f64 / 255.0),
                chroma: None,
            })
        }
        ColorType::L16 | ColorType::La16 => {
            let g = img.to_luma16();
            Ok(Decoded {
                luma: Tensor::from_fn(&[1, h, w], |i| g.as_raw()[i] as f64 / 65535.0),
                chroma: None,
            })
        }
        _ => {
            let rgb = img.to_rgb8();
            let (luma, chroma) = rgb_to_ycbcr(h, w, rgb.as_raw());
            Ok(Decoded {
                luma,
                chroma: Some(chroma),
            })
        }
    }
}

pub fn rgb_to_ycbcr(h: usize, w: usize, rgb: &[u8]) -> (Tensor, Chroma) {
    let n = h * w;
    let (mut y, mut cb, mut cr) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for px in rgb.chunks_exact(3) {
        let (r, g, b) = (px[0] as f64, px[1] as f64, px[2] as f64);
        y.push((0.299 * r + 0.587 * g + 0.114 * b) / 255.0);
        cb.push(128.0 - 0.168_736 * r - 0.331_264 * g + 0.5 * b);
        cr.push(128.0 + 0.5 * r - 0.418_688 * g - 0.081_312 * b);
    }
    let luma = Tensor::new(&[1, h, w], y).expect("plane size");
    (luma, Chroma { h, w, cb, cr })
}

/// Inverse of [`rgb_to_ycbcr`] with `y` already in 8-bit units.
pub fn ycbcr_to_rgb(y: &Gray8, c: &Chroma) -> Result<Vec<u8>> {
    if (y.height(), y.width()) != (c.h, c.w) {
        return Err(Error::dim(
            "ycbcr_to_rgb",
            format!("luma {}x{} vs chroma {}x{}", y.height(), y.width(), c.h, c.w),
        ));
    }
    let q = |v: f64| v.round().clamp(0.0, 255.0) as u8;
    let mut out = Vec::with_capacity(3 * y.len());
    for ((&l, &cb), &cr) in y.data().iter().zip(&c.cb).zip(&c.cr) {
        let (l, cb, cr) = (l as f64, cb - 128.0, cr - 128.0);
        out.push(q(l + 1.402 * cr));
        out.push(q(l - 0.344_136 * cb - 0.714_136 * cr));
        out.push(q(l + 1.772 * cb));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    /// Skips whitespace and `#` comments between header tokens.
    fn skip_blank(&mut self) {
        while let Some(&c) = self.bytes.get(self.pos) {
            if c == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_blank();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

/// Parses a binary PGM. Samples with `maxval != 255` are rescaled to 8 bits.
pub fn parse_pgm(bytes: &[u8]) -> Result<Gray8> {
    let mut cur = Cursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P5") {
        return Err(cur.err("missing P5 magic"));
    }
    cur.pos = 2;
    if !bytes.get(2).is_some_and(|c| c.is_ascii_whitespace() || *c == b'#') {
        return Err(cur.err("expected whitespace after magic"));
    }
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    cur.skip_blank();
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("empty image {w}x{h}"),
        });
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Parse {
            offset: maxval_at,
            msg: format!("maxval {maxval} outside 1..=65535"),
        });
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected a single whitespace byte before raster"));
    }
    cur.pos += 1;
    let per = if maxval > 255 { 2 } else { 1 };
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(per))
        .ok_or_else(|| cur.err("image dimensions overflow"))?;
    let raster = &bytes[cur.pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("truncated raster: need {need} bytes, found {}", raster.len()),
        });
    }
    let data = if per == 1 && maxval == 255 {
        raster[..need].to_vec()
    } else {
        let scale = 255.0 / maxval as f64;
        raster[..need]
            .chunks_exact(per)
            .enumerate()
            .map(|(i, s)| {
                let v = if per == 2 { u16::from_be_bytes([s[0], s[1]]) as usize } else { s[0] as usize };
                if v > maxval {
                    return Err(Error::Parse {
                        offset: cur.pos + i * per,
                        msg: format!("sample {v} exceeds maxval {maxval}"),
                    });
                }
                Ok((v as f64 * scale).round() as u8)
            })
            .collect::<Result<Vec<u8>>>()?
    };
    Gray8::new(h, w, data)
}

pub fn encode_pgm(img: &Gray8) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

/// Writes by extension: `.pgm` stores luma only; `.png` stores RGB when
/// chroma is given and grayscale otherwise.
pub fn write_image(path: &Path, luma: &Gray8, chroma: Option<&Chroma>) -> Result<()> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let (w, h) = (luma.width() as u32, luma.height() as u32);
    match ext.as_str() {
        "pgm" => std::fs::write(path, encode_pgm(luma))?,
        "png" => {
            let img = match chroma {
                Some(c) => DynamicImage::ImageRgb8(
                    RgbImage::from_raw(w, h, ycbcr_to_rgb(luma, c)?).expect("rgb buffer size"),
                ),
                None => DynamicImage::ImageLuma8(
                    GrayImage::from_raw(w, h, luma.data().to_vec()).expect("gray buffer size"),
                ),
            };
            img.save_with_format(path, ImageFormat::Png)?;
        }
        other => {
            return Err(Error::contract(format!(
                "unsupported output extension `{other}` (use .png or .pgm)"
            )))
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Gray8 {
        Gray8::new(h, w, (0..h * w).map(|i| (i * 7 % 256) as u8).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let g = ramp(5, 9);
        assert_eq!(parse_pgm(&encode_pgm(&g)).unwrap(), g);
    }

    #[test]
    fn pgm_header_comments_and_maxval() {
        let mut b = b"P5 # made by hand\n2 # width\n1\n15\n".to_vec();
        b.extend_from_slice(&[0, 15]);
        let g = parse_pgm(&b).unwrap();
        assert_eq!(g.data(), &[0, 255]);
        let mut b16 = b"P5\n1 1\n65535\n".to_vec();
        b16.extend_from_slice(&[0x80, 0x00]);
        assert_eq!(parse_pgm(&b16).unwrap().data(), &[128]);
    }

    #[test]
    fn pgm_errors_carry_offsets() {
        let offset = |b: &[u8]| match parse_pgm(b) {
            Err(Error::Parse { offset, .. }) => offset,
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(offset(b"P6\n1 1\n255\n\0"), 0);
        assert_eq!(offset(b"P5\nx 1\n255\n\0"), 3);
        assert_eq!(offset(b"P5\n1 1\n0\n\0"), 7);
        assert_eq!(offset(b"P5\n2 2\n255\n\0\0"), 13);
        assert_eq!(offset(b"P5\n1 1\n9\n\x0a"), 9);
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::Parse { offset: 0, .. })));
    }

    #[test]
    fn ycbcr_round_trip_is_close() {
        let rgb: Vec<u8> = (0..3 * 16).map(|i| ((i * 53) % 256) as u8).collect();
        let (y, c) = rgb_to_ycbcr(4, 4, &rgb);
        let y8 = Gray8::quantize(&y).unwrap();
        let back = ycbcr_to_rgb(&y8, &c).unwrap();
        for (a, b) in rgb.iter().zip(&back) {
            assert!((*a as i32 - *b as i32).abs() <= 2, "{a} vs {b}");
        }
        // gray pixels carry neutral chroma
        let (_, c) = rgb_to_ycbcr(1, 1, &[90, 90, 90]);
        assert!((c.cb[0] - 128.0).abs() < 1e-9 && (c.cr[0] - 128.0).abs() < 1e-9);
    }

    #[test]
    fn png_gray_and_colour() {
        let dir = tempfile::tempdir().unwrap();
        let g = ramp(6, 4);
        let p = dir.path().join("g.png");
        write_image(&p, &g, None).unwrap();
        let d = read_image(&p).unwrap();
        assert!(d.chroma.is_none());
        assert_eq!(Gray8::quantize(&d.luma).unwrap(), g);

        let (_, c) = rgb_to_ycbcr(6, 4, &(0..72).map(|i| (i * 3) as u8).collect::<Vec<_>>());
        let q = dir.path().join("c.png");
        write_image(&q, &g, Some(&c)).unwrap();
        let d = read_image(&q).unwrap();
        let chroma = d.chroma.unwrap();
        assert_eq!((chroma.h, chroma.w), (6, 4));
        assert_eq!(d.luma.shape(), &[1, 6, 4]);
        assert!(write_image(&dir.path().join("x.bmp"), &g, None).is_err());
    }

    #[test]
    fn chroma_crop_picks_window() {
        let c = Chroma {
            h: 3,
            w: 3,
            cb: (0..9).map(f64::from).collect(),
            cr: (10..19).map(f64::from).collect(),
        };
        let s = c.crop(1, 1, 2, 2);
        assert_eq!(s.cb, vec![4.0, 5.0, 7.0, 8.0]);
        assert_eq!(s.cr, vec![14.0, 15.0, 17.0, 18.0]);
    }
}
