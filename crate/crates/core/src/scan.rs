//! Pixel grids and the scan file format.

use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::io::{self, ByteReader, ByteWriter};
use crate::shape::{BoundaryField, ShapeGeometry};

pub const SCAN_MAGIC: [u8; 8] = *b"LSEGSCAN";
pub const SCAN_VERSION: u32 = 1;
const FLAG_TRUTH: u32 = 1;

/// One B-scan, or a stack of B-scans flattened to columns (B-scan-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Scan {
    rows: usize,
    columns: usize,
    boundaries: usize,
    bscans: usize,
    pixel_pitch_um: f64,
    /// Row-major, `pixels[i * columns + j]`.
    pixels: Vec<f32>,
}

impl Scan {
    pub fn new(
        rows: usize,
        columns: usize,
        boundaries: usize,
        bscans: usize,
        pixel_pitch_um: f64,
        pixels: Vec<f32>,
    ) -> Result<Self> {
        ShapeGeometry::new(boundaries, columns, bscans)?;
        if rows < boundaries {
            return Err(Error::InvalidParameter(format!(
                "{rows} rows cannot hold {boundaries} strictly ordered boundaries"
            )));
        }
        if pixels.len() != rows * columns {
            return Err(Error::DimensionMismatch {
                what: "pixel buffer",
                expected: rows * columns,
                found: pixels.len(),
            });
        }
        if !(pixel_pitch_um > 0.0) {
            return Err(Error::InvalidParameter(format!("pixel pitch must be positive, got {pixel_pitch_um}")));
        }
        Ok(Self {
            rows,
            columns,
            boundaries,
            bscans,
            pixel_pitch_um,
            pixels,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn boundaries(&self) -> usize {
        self.boundaries
    }

    pub fn bscans(&self) -> usize {
        self.bscans
    }

    pub fn columns_per_bscan(&self) -> usize {
        self.columns / self.bscans
    }

    pub fn pixel_pitch_um(&self) -> f64 {
        self.pixel_pitch_um
    }

    pub fn shape_geometry(&self) -> ShapeGeometry {
        ShapeGeometry {
            boundaries: self.boundaries,
            columns: self.columns,
            bscans: self.bscans,
        }
    }

    pub fn pixel(&self, row: usize, column: usize) -> f64 {
        self.pixels[row * self.columns + column] as f64
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
}

/// A scan with optional ground-truth boundaries, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanFile {
    pub scan: Scan,
    pub truth: Option<BoundaryField>,
}

impl ScanFile {
    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.scan;
        let mut w = ByteWriter::new();
        w.bytes(&SCAN_MAGIC);
        w.u32(SCAN_VERSION);
        w.usize_u32(s.rows);
        w.usize_u32(s.columns);
        w.usize_u32(s.boundaries);
        w.usize_u32(s.bscans);
        w.f64(s.pixel_pitch_um);
        w.u32(if self.truth.is_some() { FLAG_TRUTH } else { 0 });
        for &p in &s.pixels {
            w.f32(p);
        }
        if let Some(t) = &self.truth {
            for k in 0..t.geometry().boundaries {
                w.f64s(t.values().row(k).iter());
            }
        }
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(data, "scan file");
        r.expect(&SCAN_MAGIC, "magic")?;
        let version = r.u32()?;
        if version != SCAN_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: SCAN_VERSION,
            });
        }
        let rows = r.usize()?;
        let columns = r.usize()?;
        let boundaries = r.usize()?;
        let bscans = r.usize()?;
        let pitch = r.f64()?;
        let flags = r.u32()?;
        if flags & !FLAG_TRUTH != 0 {
            return Err(Error::Format(format!("unknown scan flags {flags:#x}")));
        }
        let n = rows
            .checked_mul(columns)
            .ok_or_else(|| Error::Format("pixel count overflow".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("pixel count overflow".into()))?)?;
        let pixels = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let scan = Scan::new(rows, columns, boundaries, bscans, pitch, pixels).map_err(|e| Error::Format(e.to_string()))?;
        let truth = if flags & FLAG_TRUTH != 0 {
            let vals = r.f64s(boundaries * columns)?;
            let m = DMatrix::from_row_slice(boundaries, columns, &vals);
            Some(BoundaryField::new(m, bscans).map_err(|e| Error::Format(e.to_string()))?)
        } else {
            None
        };
        r.finish()?;
        Ok(Self { scan, truth })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&io::read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ScanFile {
        let scan = Scan::new(4, 2, 2, 1, 3.87, (0..8).map(|v| v as f32 * 0.5).collect()).unwrap();
        let truth = BoundaryField::new(DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 2.25, 3.0]), 1).unwrap();
        ScanFile { scan, truth: Some(truth) }
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 8 + 4 * 5 + 8 + 4 + 8 * 4 + 4 * 8);
        let back = ScanFile::from_bytes(&bytes).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back.scan.pixel(3, 1), 3.5);
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let bytes = sample().to_bytes();
        assert!(matches!(ScanFile::from_bytes(&bytes[..40]), Err(Error::Format(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(ScanFile::from_bytes(&v), Err(Error::VersionMismatch { found: 9, .. })));
        let mut m = bytes;
        m[0] = b'X';
        assert!(matches!(ScanFile::from_bytes(&m), Err(Error::Format(_))));
    }
}
