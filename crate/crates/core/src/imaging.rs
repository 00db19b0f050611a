//! 8-bit image I/O, preprocessing and rendering of maps and attributions.

use std::fs;
use std::io::Cursor;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::explain::PixelAttribution;
use crate::grid::Grid;
use crate::faithfulness::Fill;
use crate::model_io::Preprocess;
use crate::tensor::{Scalar, Tensor};

/// Interleaved 8-bit image with 1 (gray) or 3 (RGB) channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if !(channels == 1 || channels == 3) {
            return Err(Error::ImageFormat(format!("{channels} channels, expected 1 or 3")));
        }
        if width == 0 || height == 0 || width * height * channels != data.len() {
            return Err(Error::ImageFormat(format!(
                "{width}x{height}x{channels} image with {} samples",
                data.len()
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            channels: 3,
            data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            ..*self
        }
    }

    /// Planar `[1, C, H, W]` tensor of `(sample / 255 - mean_c) / std_c`.
    pub fn to_tensor<T: Scalar>(&self, pre: &Preprocess) -> Result<Tensor<T>> {
        let c = self.channels;
        if pre.mean.len() != c || pre.std.len() != c {
            return Err(Error::ImageFormat(format!(
                "image has {c} channels but preprocessing expects {}",
                pre.mean.len()
            )));
        }
        let (h, w) = (self.height, self.width);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let p = i % (h * w);
            let v = self.data[p * c + ch] as f64 / 255.0;
            T::from_f64((v - pre.mean[ch]) / pre.std[ch])
        })
    }
}

fn round_u8(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

fn pnm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(b'#') => {
                while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                    *pos += 1;
                }
            }
            Some(_) => break,
            None => return Err(Error::ImageFormat("truncated PNM header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn pnm_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = pnm_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::ImageFormat(format!("bad PNM {what}")))
}

/// Decodes binary PPM (P6) or PGM (P5) with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let channels = match bytes.get(..2) {
        Some(b"P6") => 3,
        Some(b"P5") => 1,
        _ => return Err(Error::ImageFormat("not a binary PPM/PGM file".into())),
    };
    let mut pos = 2;
    let width = pnm_number(bytes, &mut pos, "width")?;
    let height = pnm_number(bytes, &mut pos, "height")?;
    let maxval = pnm_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::ImageFormat(format!("unsupported maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(Error::ImageFormat("truncated PNM header".into()));
    }
    pos += 1;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::ImageFormat("image dimensions overflow".into()))?;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() >= len)
        .ok_or_else(|| Error::ImageFormat(format!("truncated raster, expected {len} bytes")))?;
    Image::new(width, height, channels, raster[..len].to_vec())
}

/// Encodes as P6 (RGB) or P5 (gray) with a canonical header.
pub fn encode_pnm(image: &Image) -> Vec<u8> {
    let magic = if image.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::ImageFormat(format!("png: {e}")))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::ImageFormat(format!("png: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let (channels, data) = match info.color_type {
        png::ColorType::Grayscale => (1, buf.to_vec()),
        png::ColorType::Rgb => (3, buf.to_vec()),
        png::ColorType::GrayscaleAlpha => (1, buf.chunks_exact(2).map(|p| p[0]).collect()),
        png::ColorType::Rgba => (3, buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect()),
        png::ColorType::Indexed => {
            return Err(Error::ImageFormat("png: unexpanded palette".into()))
        }
    };
    Image::new(w, h, channels, data)
}

pub fn encode_png(image: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, image.width as u32, image.height as u32);
        enc.set_color(if image.channels == 3 {
            png::ColorType::Rgb
        } else {
            png::ColorType::Grayscale
        });
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::ImageFormat(format!("png: {e}")))?;
        writer
            .write_image_data(&image.data)
            .map_err(|e| Error::ImageFormat(format!("png: {e}")))?;
    }
    Ok(out)
}

/// Reads a PPM/PGM or PNG file, sniffing the format from its first bytes.
pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"\x89PNG") {
        decode_png(&bytes)
    } else if bytes.starts_with(b"P6") || bytes.starts_with(b"P5") {
        decode_pnm(&bytes)
    } else {
        Err(Error::ImageFormat("unsupported image format".into()))
    }
}

/// Writes PNG when the extension is `.png`, binary PNM otherwise.
pub fn write_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("png") => encode_png(image)?,
        _ => encode_pnm(image),
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Bilinear resize with half-pixel centres, so shrinking by two averages
/// 2x2 blocks.
pub fn resize_bilinear(image: &Image, width: usize, height: usize) -> Result<Image> {
    if width == 0 || height == 0 {
        return Err(Error::Geometry(format!("cannot resize to {width}x{height}")));
    }
    let c = image.channels;
    let src = |i: usize, out: usize, len: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = s.floor() as usize;
        (lo, (lo + 1).min(len - 1), s - lo as f64)
    };
    let mut data = Vec::with_capacity(width * height * c);
    for y in 0..height {
        let (y0, y1, fy) = src(y, height, image.height);
        for x in 0..width {
            let (x0, x1, fx) = src(x, width, image.width);
            for ch in 0..c {
                let at = |xx: usize, yy: usize| image.pixel(xx, yy)[ch] as f64;
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                data.push(round_u8(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Image::new(width, height, c, data)
}

const RAMP: [(f64, [f64; 3]); 5] = [
    (0.0, [0.0, 0.0, 255.0]),
    (0.25, [0.0, 255.0, 255.0]),
    (0.5, [0.0, 255.0, 0.0]),
    (0.75, [255.0, 255.0, 0.0]),
    (1.0, [255.0, 0.0, 0.0]),
];

/// Blue-cyan-green-yellow-red ramp; `v` is clamped to `[0, 1]`.
pub fn colormap(v: f64) -> [f64; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    for pair in RAMP.windows(2) {
        let (a, ca) = pair[0];
        let (b, cb) = pair[1];
        if v <= b {
            let t = (v - a) / (b - a);
            return [0, 1, 2].map(|i| ca[i] + t * (cb[i] - ca[i]));
        }
    }
    RAMP[4].1
}

/// `(1 - alpha) · image + alpha · colormap(map)`, always RGB.
pub fn render_overlay(image: &Image, map: &Grid, alpha: f64) -> Result<Image> {
    let [h, w] = map.shape();
    if (h, w) != (image.height, image.width) {
        return Err(Error::Geometry(format!(
            "map {h}x{w} does not match image {}x{}",
            image.height, image.width
        )));
    }
    let alpha = alpha.clamp(0.0, 1.0);
    let rgb = image.to_rgb();
    let mut data = Vec::with_capacity(rgb.data.len());
    for (px, &v) in rgb.data.chunks_exact(3).zip(map.data()) {
        let col = colormap(v);
        for i in 0..3 {
            data.push(round_u8((1.0 - alpha) * px[i] as f64 + alpha * col[i]));
        }
    }
    Image::new(w, h, 3, data)
}

/// Maps `[-m, m]` to `[0, 255]` with zero at mid-gray, where `m` is the
/// largest magnitude over the whole attribution. Three channels render as
/// RGB, one as gray; other channel counts are averaged to gray.
pub fn render_attribution(attr: &PixelAttribution) -> Image {
    let [c, h, w] = attr.shape();
    let v = attr.values().data();
    let m = v.iter().fold(0.0f64, |acc, x| acc.max(x.abs()));
    let level = |x: f64| {
        if m > 0.0 {
            round_u8(127.5 * (x / m + 1.0))
        } else {
            round_u8(127.5)
        }
    };
    let (channels, data) = match c {
        3 => (
            3,
            (0..h * w)
                .flat_map(|p| (0..3).map(move |ch| v[ch * h * w + p]))
                .map(level)
                .collect(),
        ),
        1 => (1, v.iter().map(|&x| level(x)).collect()),
        _ => (
            1,
            (0..h * w)
                .map(|p| level((0..c).map(|ch| v[ch * h * w + p]).sum::<f64>() / c as f64))
                .collect(),
        ),
    };
    Image::new(w, h, channels, data).expect("dimensions come from a valid attribution")
}

/// How occluded pixels are filled, before preprocessing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FillMode {
    /// Per-channel dataset mean, i.e. 0 after normalisation.
    Mean,
    /// Raw mid-gray (0.5).
    Gray,
    /// Raw black.
    Zero,
    /// A value already in model-input units.
    Value(f64),
}

impl FillMode {
    pub fn resolve(self, pre: &Preprocess) -> Fill {
        let raw = |r: f64| {
            Fill::PerChannel(pre.mean.iter().zip(&pre.std).map(|(m, s)| (r - m) / s).collect())
        };
        match self {
            FillMode::Mean => Fill::Uniform(0.0),
            FillMode::Gray => raw(0.5),
            FillMode::Zero => raw(0.0),
            FillMode::Value(v) => Fill::Uniform(v),
        }
    }
}

impl FromStr for FillMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mean" => Ok(FillMode::Mean),
            "gray" | "grey" => Ok(FillMode::Gray),
            "zero" => Ok(FillMode::Zero),
            other => other
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .map(FillMode::Value)
                .ok_or_else(|| format!("bad fill `{other}` (mean, gray, zero or a number)")),
        }
    }
}
