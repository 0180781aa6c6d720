//! Raster decoding, resampling and the portable chip array file.
//!
//! Supported sample layouts, selected by the `DataType` header key or, when
//! it is absent, inferred from the payload length:
//!
//! | `DataType`            | payload                                  |
//! |-----------------------|------------------------------------------|
//! | `float32_mag_be`      | rows*cols big-endian f32 magnitudes      |
//! | `float32_magphase_be` | magnitudes then phases (MSTAR layout)    |
//! | `float32_iq_be`       | interleaved big-endian I, Q pairs        |
//! | `float32_le`          | rows*cols little-endian f32 (array file) |
//!
//! An MSTAR `native_header_length` key is honoured by skipping that many
//! bytes after the textual header.

use std::path::Path;

use super::chip::{ImageChip, CHIP_SIZE};
use super::header::{parse_header, write_header, Header};
use crate::error::{Error, Result};

pub const ARRAY_BEGIN_TAG: &str = "[FewShotSarArrayV1]";
pub const ARRAY_EXTENSION: &str = "fsa";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleLayout {
    MagnitudeBe,
    MagnitudePhaseBe,
    ComplexIqBe,
    MagnitudeLe,
}

impl SampleLayout {
    fn parse(s: &str) -> Result<Self> {
        match s {
            "float32_mag_be" => Ok(Self::MagnitudeBe),
            "float32_magphase_be" => Ok(Self::MagnitudePhaseBe),
            "float32_iq_be" => Ok(Self::ComplexIqBe),
            "float32_le" => Ok(Self::MagnitudeLe),
            other => Err(Error::Decode(format!("unsupported DataType {other:?}"))),
        }
    }

    fn bytes_per_pixel(self) -> usize {
        match self {
            Self::MagnitudeBe | Self::MagnitudeLe => 4,
            Self::MagnitudePhaseBe | Self::ComplexIqBe => 8,
        }
    }
}

/// A decoded magnitude raster at source resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn decode_raster(raw: &[u8], header: &Header) -> Result<Raster> {
    let rows = header
        .get_usize("NumberOfRows")?
        .ok_or_else(|| Error::MalformedHeader("missing NumberOfRows".into()))?;
    let cols = header
        .get_usize("NumberOfColumns")?
        .ok_or_else(|| Error::MalformedHeader("missing NumberOfColumns".into()))?;
    if rows == 0 || cols == 0 {
        return Err(Error::Decode(format!("raster dimensions {rows}x{cols} are empty")));
    }
    let skip = header.get_usize("native_header_length")?.unwrap_or(0);
    let start = header.data_offset + skip;
    let payload = raw.get(start..).unwrap_or(&[]);
    let n = rows * cols;
    let layout = match header.get("DataType") {
        Some(s) => SampleLayout::parse(s)?,
        None if payload.len() >= 8 * n => SampleLayout::MagnitudePhaseBe,
        None => SampleLayout::MagnitudeBe,
    };
    if payload.len() < n * layout.bytes_per_pixel() {
        return Err(Error::Decode(format!(
            "{rows}x{cols} {layout:?} raster needs {} bytes, found {}",
            n * layout.bytes_per_pixel(),
            payload.len()
        )));
    }
    let be = |i: usize| f32::from_be_bytes(payload[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    let le = |i: usize| f32::from_le_bytes(payload[4 * i..4 * i + 4].try_into().unwrap()) as f64;
    let values: Vec<f64> = match layout {
        SampleLayout::MagnitudeBe | SampleLayout::MagnitudePhaseBe => (0..n).map(be).collect(),
        SampleLayout::MagnitudeLe => (0..n).map(le).collect(),
        SampleLayout::ComplexIqBe => (0..n).map(|i| be(2 * i).hypot(be(2 * i + 1))).collect(),
    };
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Decode(format!("sample {i} is not finite")));
    }
    Ok(Raster { rows, cols, values })
}

/// Bilinear resampling with half-pixel centres and edge clamping.
pub fn resize_bilinear(src: &[f64], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    assert_eq!(src.len(), rows * cols);
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = taps(out_rows, rows);
    let xs = taps(out_cols, cols);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            let top = src[y0 * cols + x0] * (1.0 - wx) + src[y0 * cols + x1] * wx;
            let bottom = src[y1 * cols + x0] * (1.0 - wx) + src[y1 * cols + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Min-max normalization to `[0, 1]`. Returns `None` for zero dynamic range.
pub fn min_max_normalize(values: &[f64]) -> Option<Vec<f32>> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return None;
    }
    Some(
        values
            .iter()
            .map(|&v| (((v - lo) / range) as f32).clamp(0.0, 1.0))
            .collect(),
    )
}

/// Turn decoded raster bytes into a normalized 84x84 chip.
pub fn chip_from_bytes(raw: &[u8], class_id: usize, source_id: &str) -> Result<ImageChip> {
    let header = parse_header(raw)?;
    let raster = decode_raster(raw, &header)?;
    let resized = resize_bilinear(&raster.values, raster.rows, raster.cols, CHIP_SIZE, CHIP_SIZE);
    let (pixels, degenerate) = match min_max_normalize(&resized) {
        Some(p) => (p, false),
        None => (vec![0.0; CHIP_SIZE * CHIP_SIZE], true),
    };
    let mut chip = ImageChip::new(pixels, class_id, source_id)?;
    chip.degenerate_range = degenerate;
    chip.depression_deg = ["DesiredDepression", "MeasuredDepression", "DepressionDeg"]
        .iter()
        .find_map(|k| header.get(k).and_then(|v| v.parse::<f64>().ok()));
    Ok(chip)
}

/// Read a chip file (raw MSTAR or portable array), resize to 84x84 and
/// normalize. Raw files are identified by their path; array files keep the
/// source id stored in their header.
pub fn load_chip(path: &Path, class_id: usize) -> Result<ImageChip> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == ARRAY_EXTENSION) {
        return decode_array(&raw, class_id);
    }
    chip_from_bytes(&raw, class_id, &path.to_string_lossy())
}

/// Serialize a chip as a portable array file: a textual header followed by
/// row-major little-endian f32 pixels.
pub fn encode_array(chip: &ImageChip, class_name: &str) -> Vec<u8> {
    let mut fields = vec![
        ("NumberOfRows".to_string(), CHIP_SIZE.to_string()),
        ("NumberOfColumns".to_string(), CHIP_SIZE.to_string()),
        ("DataType".to_string(), "float32_le".to_string()),
        ("ClassName".to_string(), header_safe(class_name)),
        ("SourceId".to_string(), header_safe(&chip.source_id)),
        ("DegenerateRange".to_string(), chip.degenerate_range.to_string()),
    ];
    if let Some(d) = chip.depression_deg {
        fields.push(("DepressionDeg".to_string(), d.to_string()));
    }
    let mut out = write_header(ARRAY_BEGIN_TAG, &fields);
    for &p in chip.pixels() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn header_safe(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii() && !c.is_ascii_control() { c } else { '_' })
        .collect()
}

/// Decode a portable array file, preserving the stored source id and flags.
pub fn decode_array(raw: &[u8], class_id: usize) -> Result<ImageChip> {
    let header = parse_header(raw)?;
    let source = header.get("SourceId").unwrap_or("").to_string();
    let mut chip = chip_from_bytes(raw, class_id, &source)?;
    if header.get("DegenerateRange") == Some("true") {
        chip.degenerate_range = true;
    }
    Ok(chip)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mstar_bytes(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f32) -> Vec<u8> {
        let fields = vec![
            ("NumberOfColumns".to_string(), cols.to_string()),
            ("NumberOfRows".to_string(), rows.to_string()),
            ("DesiredDepression".to_string(), "17".to_string()),
        ];
        let mut raw = write_header("[PhoenixHeaderVer01.04]", &fields);
        for r in 0..rows {
            for c in 0..cols {
                raw.extend_from_slice(&f(r, c).to_be_bytes());
            }
        }
        for _ in 0..rows * cols {
            raw.extend_from_slice(&0.5f32.to_be_bytes());
        }
        raw
    }

    #[test]
    fn mstar_128_chip_becomes_84() {
        let raw = mstar_bytes(128, 128, |r, c| ((r * 7 + c * 3) % 50) as f32);
        let chip = chip_from_bytes(&raw, 2, "hb03333.015").unwrap();
        assert_eq!(chip.pixels().len(), CHIP_SIZE * CHIP_SIZE);
        assert!(chip.pixels().iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(chip.depression_deg, Some(17.0));
        assert!(!chip.degenerate_range);
    }

    #[test]
    fn constant_source_is_flagged_not_rejected() {
        let raw = mstar_bytes(32, 32, |_, _| 3.25);
        let chip = chip_from_bytes(&raw, 0, "flat").unwrap();
        assert!(chip.degenerate_range);
        assert!(chip.pixels().iter().all(|&p| p == 0.0));
    }

    #[test]
    fn complex_samples_use_magnitude() {
        let fields = vec![
            ("NumberOfColumns".to_string(), "2".to_string()),
            ("NumberOfRows".to_string(), "1".to_string()),
            ("DataType".to_string(), "float32_iq_be".to_string()),
        ];
        let mut raw = write_header("[X]", &fields);
        for v in [3.0f32, 4.0, 0.0, 1.0] {
            raw.extend_from_slice(&v.to_be_bytes());
        }
        let h = parse_header(&raw).unwrap();
        let r = decode_raster(&raw, &h).unwrap();
        assert_eq!(r.values, vec![5.0, 1.0]);
    }

    #[test]
    fn truncated_raster_is_a_decode_error() {
        let mut raw = mstar_bytes(8, 8, |_, _| 1.0);
        let h = parse_header(&raw).unwrap();
        raw.truncate(h.data_offset + 10);
        assert!(matches!(chip_from_bytes(&raw, 0, "x"), Err(Error::Decode(_))));
    }

    #[test]
    fn array_file_round_trips() {
        let pixels: Vec<f32> = (0..CHIP_SIZE * CHIP_SIZE).map(|i| (i % 97) as f32 / 96.0).collect();
        let mut chip = ImageChip::new(pixels, 4, "synth/c4/0007").unwrap();
        chip.depression_deg = Some(15.0);
        let back = decode_array(&encode_array(&chip, "c4"), 4).unwrap();
        assert_eq!(back, chip);
    }
}
