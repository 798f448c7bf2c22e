//! Dense images, bilinear sampling with derivatives, pyramids, and file I/O.
//!
//! Coordinate convention, pinned here and inherited by every other module:
//! `(u, v) = (0, 0)` is the **center** of the top-left pixel, so the valid
//! sampling domain is `[0, W-1] x [0, H-1]`. All in-memory computation is
//! f64; only the PFM container stores f32.

use crate::error::{Error, Result};
use crate::synthesis::DepthMap;

/// Row-major, channel-interleaved grid of intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Zero-filled image. `channels` must be 1 or 3.
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    /// Constant-valued image.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.fill(value);
        img
    }

    /// Wraps an existing buffer, validating length and the `[0, 1]` range.
    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Domain(format!(
                "channel count {channels} not supported (1 or 3)"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::ShapeMismatch(format!(
                "buffer length {} != {}x{}x{}",
                data.len(),
                width,
                height,
                channels
            )));
        }
        if let Some(bad) = data.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Domain(format!(
                "intensity {} at index {bad} outside [0, 1]",
                data[bad]
            )));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Intensity at integer pixel `(x, y)`, channel `c`.
    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub(crate) fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }
}

/// Multi-resolution stack; level 0 is full resolution, each deeper level
/// halves both dimensions (ceiling).
#[derive(Debug, Clone)]
pub struct Pyramid {
    pub levels: Vec<Image>,
}

/// Result of sampling an image at a continuous coordinate. Only the first
/// `channels` entries of each array are meaningful.
#[derive(Debug, Clone, Copy)]
pub struct Sample {
    pub color: [f64; 3],
    pub d_du: [f64; 3],
    pub d_dv: [f64; 3],
    pub valid: bool,
}

impl Sample {
    fn invalid() -> Self {
        Sample {
            color: [0.0; 3],
            d_du: [0.0; 3],
            d_dv: [0.0; 3],
            valid: false,
        }
    }
}

/// Bilinear sample with exact derivatives of the blend w.r.t. `(u, v)`.
///
/// Valid iff `0 <= u <= W-1` and `0 <= v <= H-1`; outside that range the
/// sample is zero with `valid = false` (total function, never an error).
/// Neighbor fetches are edge-clamped, so the last row/column cell blends
/// against itself. Exactly-integer coordinates reproduce the stored pixel
/// bit for bit.
pub fn sample_bilinear(img: &Image, u: f64, v: f64) -> Sample {
    let w = img.width;
    let h = img.height;
    if !(u >= 0.0 && u <= (w - 1) as f64 && v >= 0.0 && v <= (h - 1) as f64) {
        return Sample::invalid();
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fu = u - x0 as f64;
    let fv = v - y0 as f64;

    let mut out = Sample {
        color: [0.0; 3],
        d_du: [0.0; 3],
        d_dv: [0.0; 3],
        valid: true,
    };
    for c in 0..img.channels {
        let c00 = img.at(x0, y0, c);
        let c01 = img.at(x1, y0, c);
        let c10 = img.at(x0, y1, c);
        let c11 = img.at(x1, y1, c);
        // lerp form keeps integer coordinates exact
        let top = c00 + fu * (c01 - c00);
        let bot = c10 + fu * (c11 - c10);
        out.color[c] = top + fv * (bot - top);
        out.d_du[c] = (1.0 - fv) * (c01 - c00) + fv * (c11 - c10);
        out.d_dv[c] = bot - top;
    }
    out
}

/// Halves both dimensions (ceiling); each output pixel is the mean of its
/// 2x2 source block, edge blocks averaging only the pixels that exist.
pub fn downsample(img: &Image) -> Result<Image> {
    if img.width < 2 && img.height < 2 {
        return Err(Error::DegenerateSize(format!(
            "cannot downsample a {}x{} image",
            img.width, img.height
        )));
    }
    let ow = img.width.div_ceil(2);
    let oh = img.height.div_ceil(2);
    let mut out = Image::new(ow, oh, img.channels);
    for oy in 0..oh {
        for ox in 0..ow {
            let x0 = 2 * ox;
            let y0 = 2 * oy;
            let x1 = (x0 + 1).min(img.width - 1);
            let y1 = (y0 + 1).min(img.height - 1);
            let xs: &[usize] = if x1 > x0 { &[x0, x1] } else { &[x0] };
            let ys: &[usize] = if y1 > y0 { &[y0, y1] } else { &[y0] };
            for c in 0..img.channels {
                let mut acc = 0.0;
                for &y in ys {
                    for &x in xs {
                        acc += img.at(x, y, c);
                    }
                }
                out.set(ox, oy, c, acc / (xs.len() * ys.len()) as f64);
            }
        }
    }
    Ok(out)
}

/// Builds `levels` pyramid levels by repeated [`downsample`]. The deepest
/// level must keep both dimensions at least 2.
pub fn build_pyramid(img: &Image, levels: usize) -> Result<Pyramid> {
    if levels == 0 {
        return Err(Error::DegenerateSize("pyramid needs at least 1 level".into()));
    }
    let (mut w, mut h) = (img.width, img.height);
    for _ in 1..levels {
        w = w.div_ceil(2);
        h = h.div_ceil(2);
    }
    if w < 2 || h < 2 {
        return Err(Error::DegenerateSize(format!(
            "{} levels reduce a {}x{} image below 2x2",
            levels, img.width, img.height
        )));
    }
    let mut lv = Vec::with_capacity(levels);
    lv.push(img.clone());
    for _ in 1..levels {
        let next = downsample(lv.last().unwrap())?;
        lv.push(next);
    }
    Ok(Pyramid { levels: lv })
}

// ---------------------------------------------------------------------------
// PNM (binary PPM/PGM) and PFM containers
// ---------------------------------------------------------------------------

struct Scanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Scanner<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Scanner { bytes, pos: 0 }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(Error::ImageParse {
            offset: self.pos,
            reason: reason.into(),
        })
    }

    /// Skips whitespace and `#` comment lines.
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if self.pos == start {
            return self.fail("expected a header token, found end of input");
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn unsigned(&mut self, what: &str) -> Result<usize> {
        let start_err = |s: &Self, t: &[u8]| Error::ImageParse {
            offset: s.pos - t.len(),
            reason: format!("{} is not an unsigned integer: {:?}", what, String::from_utf8_lossy(t)),
        };
        let t = self.token()?;
        std::str::from_utf8(t)
            .ok()
            .and_then(|s| s.parse::<usize>().ok())
            .ok_or_else(|| start_err(self, t))
    }

    /// Consumes exactly one whitespace byte (the separator before payload).
    fn single_space(&mut self) -> Result<()> {
        if self.pos >= self.bytes.len() || !self.bytes[self.pos].is_ascii_whitespace() {
            return self.fail("expected a single whitespace byte before payload");
        }
        self.pos += 1;
        Ok(())
    }

    fn payload(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < len {
            return self.fail(format!(
                "{} payload truncated: need {} bytes, have {}",
                what,
                len,
                self.bytes.len() - self.pos
            ));
        }
        let s = &self.bytes[self.pos..self.pos + len];
        self.pos += len;
        Ok(s)
    }
}

/// Decodes a binary PPM (`P6`, 3-channel) or PGM (`P5`, 1-channel) with
/// maxval 255. 8-bit samples map to intensities as `v / 255` exactly.
pub fn load_image(bytes: &[u8]) -> Result<Image> {
    let mut sc = Scanner::new(bytes);
    let magic = sc.token()?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::ImageParse {
                offset: 0,
                reason: format!(
                    "unsupported magic {:?} (binary P5/P6 only)",
                    String::from_utf8_lossy(other)
                ),
            })
        }
    };
    let width = sc.unsigned("width")?;
    let height = sc.unsigned("height")?;
    if width == 0 || height == 0 {
        return sc.fail(format!("degenerate dimensions {width}x{height}"));
    }
    let maxval_at = {
        sc.skip_space();
        sc.pos
    };
    let maxval = sc.unsigned("maxval")?;
    if maxval != 255 {
        return Err(Error::ImageParse {
            offset: maxval_at,
            reason: format!("unsupported maxval {maxval} (only 255)"),
        });
    }
    sc.single_space()?;
    let raw = sc.payload(width * height * channels, "pixel")?;
    let data = raw.iter().map(|&b| f64::from(b) / 255.0).collect();
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

/// Encodes as binary PPM (3-channel) or PGM (1-channel), maxval 255, with a
/// single newline after the maxval. Intensities are rounded to the nearest
/// 8-bit level, so `load_image(save_image(img))` is the identity on images
/// that came from 8-bit files.
pub fn save_image(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{}\n{} {}\n255\n", magic, img.width, img.height).into_bytes();
    out.extend(
        img.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    out
}

/// Encodes a depth map as grayscale PFM: magic `Pf`, scale line `-1.0`
/// (little-endian), rows bottom to top, f32 samples. Every value must be
/// finite and positive.
pub fn save_depth_pfm(depth: &DepthMap) -> Result<Vec<u8>> {
    for (i, &v) in depth.data().iter().enumerate() {
        if !v.is_finite() || v <= 0.0 {
            return Err(Error::BadDepthValue { index: i, value: v });
        }
    }
    let (w, h) = (depth.width(), depth.height());
    let mut out = format!("Pf\n{} {}\n-1.0\n", w, h).into_bytes();
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(depth.at(x, y) as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a grayscale PFM written by [`save_depth_pfm`]. Any negative
/// scale is accepted (its magnitude multiplies the samples); positive
/// scales (big-endian files) are rejected.
pub fn load_depth_pfm(bytes: &[u8]) -> Result<DepthMap> {
    let mut sc = Scanner::new(bytes);
    let magic = sc.token()?;
    if magic != b"Pf" {
        return Err(Error::ImageParse {
            offset: 0,
            reason: format!(
                "unsupported magic {:?} (grayscale Pf only)",
                String::from_utf8_lossy(magic)
            ),
        });
    }
    let width = sc.unsigned("width")?;
    let height = sc.unsigned("height")?;
    let scale_at = {
        sc.skip_space();
        sc.pos
    };
    let scale_tok = sc.token()?;
    let scale: f64 = std::str::from_utf8(scale_tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageParse {
            offset: scale_at,
            reason: "scale line is not a number".into(),
        })?;
    if scale >= 0.0 {
        return Err(Error::ImageParse {
            offset: scale_at,
            reason: format!("non-negative scale {scale}: big-endian PFM unsupported"),
        });
    }
    sc.single_space()?;
    let raw = sc.payload(width * height * 4, "sample")?;
    let mut data = vec![0.0f64; width * height];
    for y in 0..height {
        let src_row = height - 1 - y;
        for x in 0..width {
            let o = (src_row * width + x) * 4;
            let bits = [raw[o], raw[o + 1], raw[o + 2], raw[o + 3]];
            data[y * width + x] = f64::from(f32::from_le_bytes(bits)) * scale.abs();
        }
    }
    DepthMap::from_data(width, height, data)
}
