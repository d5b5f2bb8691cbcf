//! Relative attribution: the share of total absolute attribution mass that
//! falls inside a region mask, averaged over samples.
//!
//! Maps must already be absolute values; this module never takes `|x|`.
//!
//! File formats:
//! - attribution map: a JSON header line
//!   `{"format":"caia-grid/1","height":H,"width":W,"dtype":"f32le"}` followed by
//!   one line of base64 little-endian `f32`s in row-major order;
//! - region mask: 8-bit grayscale PNG, 0 outside and 255 inside.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const GRID_FORMAT: &str = "caia-grid/1";

/// Non-negative attribution values on an `height x width` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatGrid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FloatGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("grid dimensions must be at least 1".into()));
        }
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "{} entries for a {height}x{width} grid",
                data.len()
            )));
        }
        if let Some(x) = data.iter().find(|x| !x.is_finite() || **x < 0.0) {
            return Err(Error::Shape(format!(
                "attribution entries must be finite and non-negative, found {x}"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.height,
            self.width,
            self.data.iter().map(|x| x * c).collect(),
        )
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let header: GridHeader = lines
            .next()
            .ok_or_else(|| Error::malformed_file(path, "empty grid file"))
            .and_then(|l| serde_json::from_str(l).map_err(|e| Error::malformed_file(path, e)))?;
        if header.format != GRID_FORMAT || header.dtype != "f32le" {
            return Err(Error::malformed_file(
                path,
                format!("unsupported grid `{}` / `{}`", header.format, header.dtype),
            ));
        }
        let payload = lines.next().unwrap_or("").trim();
        let bytes = BASE64
            .decode(payload)
            .map_err(|e| Error::malformed_file(path, format!("grid payload: {e}")))?;
        if bytes.len() != header.height * header.width * 4 {
            return Err(Error::Shape(format!(
                "{}: {} payload bytes for a {}x{} f32 grid",
                path.display(),
                bytes.len(),
                header.height,
                header.width
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        Self::new(header.height, header.width, data)
    }

    /// Write as `f32le`; values are narrowed to single precision.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let header = GridHeader {
            format: GRID_FORMAT.into(),
            height: self.height,
            width: self.width,
            dtype: "f32le".into(),
        };
        let bytes: Vec<u8> = self
            .data
            .iter()
            .flat_map(|&x| (x as f32).to_le_bytes())
            .collect();
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        out.push_str(&BASE64.encode(bytes));
        out.push('\n');
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Serialize, Deserialize)]
struct GridHeader {
    format: String,
    height: usize,
    width: usize,
    dtype: String,
}

/// Binary region mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskGrid {
    height: usize,
    width: usize,
    inside: Vec<bool>,
}

impl MaskGrid {
    pub fn new(height: usize, width: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != height * width {
            return Err(Error::Shape(format!(
                "{} mask entries for a {height}x{width} grid",
                inside.len()
            )));
        }
        Ok(Self {
            height,
            width,
            inside,
        })
    }

    pub fn from_bits(height: usize, width: usize, bits: &[u8]) -> Result<Self> {
        Self::new(height, width, bits.iter().map(|&b| b != 0).collect())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn inside(&self) -> &[bool] {
        &self.inside
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| Error::MalformedMask(format!("{}: {e}", path.display())))?;
        let gray = match img {
            image::DynamicImage::ImageLuma8(g) => g,
            other => {
                return Err(Error::MalformedMask(format!(
                    "{}: expected 8-bit grayscale, got {:?}",
                    path.display(),
                    other.color()
                )))
            }
        };
        let (w, h) = gray.dimensions();
        let mut inside = Vec::with_capacity((w * h) as usize);
        for p in gray.pixels() {
            match p.0[0] {
                0 => inside.push(false),
                255 => inside.push(true),
                v => {
                    return Err(Error::MalformedMask(format!(
                        "{}: pixel value {v}, only 0 and 255 are allowed",
                        path.display()
                    )))
                }
            }
        }
        Self::new(h as usize, w as usize, inside)
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let pixels = self
            .inside
            .iter()
            .map(|&b| if b { 255 } else { 0 })
            .collect();
        let img = image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer matches dimensions");
        img.save(path)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))
    }
}

/// One attribution map with the masks of the regions found in its image.
#[derive(Debug, Clone)]
pub struct AttributionSample {
    pub map: FloatGrid,
    pub masks: BTreeMap<String, MaskGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionShare {
    pub mean_share: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelativeAttributionReport {
    pub regions: BTreeMap<String, RegionShare>,
}

/// Share of one map's mass inside one mask.
pub fn region_share(map: &FloatGrid, mask: &MaskGrid) -> Result<f64> {
    if map.dims() != mask.dims() {
        return Err(Error::Shape(format!(
            "mask is {:?}, attribution map is {:?}",
            mask.dims(),
            map.dims()
        )));
    }
    let total = map.total();
    let inside: f64 = map
        .data
        .iter()
        .zip(&mask.inside)
        .filter(|(_, &m)| m)
        .map(|(x, _)| x)
        .sum();
    Ok(inside / total)
}

/// Mean share per region. A region is averaged over the samples that have
/// a mask for it.
pub fn relative_attribution(samples: &[AttributionSample]) -> Result<RelativeAttributionReport> {
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for (i, sample) in samples.iter().enumerate() {
        if sample.map.total().partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::DegenerateSample { sample: i });
        }
        for (region, mask) in &sample.masks {
            let share = region_share(&sample.map, mask)
                .map_err(|e| Error::Shape(format!("sample {i}, region `{region}`: {e}")))?;
            let entry = sums.entry(region.clone()).or_insert((0.0, 0));
            entry.0 += share;
            entry.1 += 1;
        }
    }
    Ok(RelativeAttributionReport {
        regions: sums
            .into_iter()
            .map(|(region, (sum, n))| {
                (
                    region,
                    RegionShare {
                        mean_share: sum / n as f64,
                        samples: n,
                    },
                )
            })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(map: FloatGrid, masks: &[(&str, MaskGrid)]) -> AttributionSample {
        AttributionSample {
            map,
            masks: masks
                .iter()
                .map(|(n, m)| (n.to_string(), m.clone()))
                .collect(),
        }
    }

    #[test]
    fn full_empty_and_diagonal_masks() {
        let map = FloatGrid::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let full = MaskGrid::from_bits(2, 2, &[1, 1, 1, 1]).unwrap();
        let empty = MaskGrid::from_bits(2, 2, &[0, 0, 0, 0]).unwrap();
        let diag = MaskGrid::from_bits(2, 2, &[1, 0, 0, 1]).unwrap();
        let r = relative_attribution(&[sample(
            map,
            &[("full", full), ("empty", empty), ("diag", diag)],
        )])
        .unwrap();
        assert_eq!(r.regions["full"].mean_share, 1.0);
        assert_eq!(r.regions["empty"].mean_share, 0.0);
        assert!((r.regions["diag"].mean_share - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_map_names_the_sample() {
        let ok = FloatGrid::new(1, 2, vec![1.0, 0.0]).unwrap();
        let zero = FloatGrid::new(1, 2, vec![0.0, 0.0]).unwrap();
        let m = MaskGrid::from_bits(1, 2, &[1, 0]).unwrap();
        let err =
            relative_attribution(&[sample(ok, &[("a", m.clone())]), sample(zero, &[("a", m)])])
                .unwrap_err();
        assert!(matches!(err, Error::DegenerateSample { sample: 1 }));
    }

    #[test]
    fn mismatched_mask_is_a_shape_error() {
        let map = FloatGrid::new(2, 2, vec![1.0; 4]).unwrap();
        let m = MaskGrid::from_bits(1, 4, &[1, 0, 0, 1]).unwrap();
        assert!(matches!(
            relative_attribution(&[sample(map, &[("a", m)])]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn region_mean_uses_only_samples_that_have_it() {
        let a = FloatGrid::new(1, 2, vec![1.0, 1.0]).unwrap();
        let left = MaskGrid::from_bits(1, 2, &[1, 0]).unwrap();
        let all = MaskGrid::from_bits(1, 2, &[1, 1]).unwrap();
        let r = relative_attribution(&[
            sample(a.clone(), &[("hair", left.clone())]),
            sample(a, &[("hair", all), ("eyes", left)]),
        ])
        .unwrap();
        assert_eq!(
            r.regions["hair"],
            RegionShare {
                mean_share: 0.75,
                samples: 2
            }
        );
        assert_eq!(
            r.regions["eyes"],
            RegionShare {
                mean_share: 0.5,
                samples: 1
            }
        );
    }

    #[test]
    fn negative_entries_are_rejected() {
        assert!(FloatGrid::new(1, 2, vec![1.0, -0.5]).is_err());
        assert!(FloatGrid::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let gp = dir.path().join("m.grid");
        let g = FloatGrid::new(2, 3, vec![0.5, 1.0, 2.0, 0.0, 0.25, 8.0]).unwrap();
        g.write(&gp).unwrap();
        assert_eq!(FloatGrid::read(&gp).unwrap(), g);

        let mp = dir.path().join("m.png");
        let m = MaskGrid::from_bits(2, 3, &[1, 0, 1, 0, 0, 1]).unwrap();
        m.write_png(&mp).unwrap();
        assert_eq!(MaskGrid::read_png(&mp).unwrap(), m);
    }

    #[test]
    fn grey_pixels_are_malformed() {
        let dir = tempfile::tempdir().unwrap();
        let mp = dir.path().join("bad.png");
        image::GrayImage::from_raw(2, 1, vec![0, 128])
            .unwrap()
            .save(&mp)
            .unwrap();
        assert!(matches!(
            MaskGrid::read_png(&mp),
            Err(Error::MalformedMask(_))
        ));
        let rgb = dir.path().join("rgb.png");
        image::RgbImage::from_raw(1, 1, vec![255, 255, 255])
            .unwrap()
            .save(&rgb)
            .unwrap();
        assert!(matches!(
            MaskGrid::read_png(&rgb),
            Err(Error::MalformedMask(_))
        ));
    }
}
