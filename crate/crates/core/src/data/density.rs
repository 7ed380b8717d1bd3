//! Stride-4 maps: network output, Gaussian training targets and their
//! on-disk form.
//!
//! A `.gmnd` file is a 16-byte header (`GMND`, u32 height, u32 width,
//! u32 reserved, little endian) followed by `height·width` little-endian
//! `f32` values in row-major order. The grid geometry lives in a JSON
//! sidecar next to it.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::geometry::Point;
use crate::error::{Error, Result};

/// Output stride of the network relative to its (padded) input.
pub const OUTPUT_STRIDE: usize = 4;
/// Peak mass of one annotated instance in a density target.
pub const DENSITY_SCALE: f64 = 100.0;
pub const DEFAULT_SIGMA: f64 = 2.0;

const MAGIC: &[u8; 4] = b"GMND";

/// Placement of map cells in input-pixel coordinates:
/// cell `(i, j)` sits at `(offset_x + stride·j, offset_y + stride·i)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub stride: f64,
    pub offset_x: f64,
    pub offset_y: f64,
}

impl GridGeometry {
    /// The network's own grid on an unpadded, unscaled input.
    pub const fn stride4() -> Self {
        Self {
            stride: OUTPUT_STRIDE as f64,
            offset_x: 2.0,
            offset_y: 2.0,
        }
    }

    pub fn cell_to_pixel(&self, row: f64, col: f64) -> Point {
        Point::new(self.offset_x + self.stride * col, self.offset_y + self.stride * row)
    }

    /// Continuous `(row, col)` of an input pixel position.
    pub fn pixel_to_cell(&self, p: Point) -> (f64, f64) {
        ((p.y - self.offset_y) / self.stride, (p.x - self.offset_x) / self.stride)
    }
}

impl Default for GridGeometry {
    fn default() -> Self {
        Self::stride4()
    }
}

/// Single-channel map on a stride grid: the similarity output of the network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub grid: GridGeometry,
}

impl SimilarityMap {
    pub fn zeros(height: usize, width: usize, grid: GridGeometry) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
            grid,
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().map(|v| *v as f64).sum()
    }

    pub fn byte_size(&self) -> usize {
        self.values.len() * std::mem::size_of::<f32>() + std::mem::size_of::<Self>()
    }

    /// Index of the largest value as `(row, col)`; first occurrence wins.
    pub fn argmax(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, v) in self.values.iter().enumerate() {
            if *v > self.values[best] {
                best = i;
            }
        }
        (best / self.width, best % self.width)
    }

    pub fn write_gmnd(&self, mut out: impl Write) -> Result<()> {
        let mut header = [0u8; 16];
        header[..4].copy_from_slice(MAGIC);
        header[4..8].copy_from_slice(&(self.height as u32).to_le_bytes());
        header[8..12].copy_from_slice(&(self.width as u32).to_le_bytes());
        out.write_all(&header)?;
        let mut body = Vec::with_capacity(self.values.len() * 4);
        for v in &self.values {
            body.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&body)?;
        Ok(())
    }

    pub fn to_gmnd_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_gmnd(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Reads the binary grid; the geometry is taken from `grid`.
    pub fn read_gmnd(mut input: impl Read, grid: GridGeometry) -> Result<Self> {
        let mut header = [0u8; 16];
        input.read_exact(&mut header)?;
        if &header[..4] != MAGIC {
            return Err(Error::InvalidArgument("missing GMND magic".into()));
        }
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
        let mut body = vec![0u8; height * width * 4];
        input.read_exact(&mut body)?;
        let values = body
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        Ok(Self {
            height,
            width,
            values,
            grid,
        })
    }

    /// Writes `path` and its `.json` sidecar.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.write_gmnd(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        let sidecar = MapSidecar {
            height: self.height,
            width: self.width,
            stride: self.grid.stride,
            offset_x: self.grid.offset_x,
            offset_y: self.grid.offset_y,
        };
        std::fs::write(sidecar_path(path), serde_json::to_vec_pretty(&sidecar)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar: MapSidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let grid = GridGeometry {
            stride: sidecar.stride,
            offset_x: sidecar.offset_x,
            offset_y: sidecar.offset_y,
        };
        let map = Self::read_gmnd(std::io::BufReader::new(std::fs::File::open(path)?), grid)?;
        if (map.height, map.width) != (sidecar.height, sidecar.width) {
            return Err(Error::InvalidArgument("sidecar extent disagrees with map header".into()));
        }
        Ok(map)
    }

    /// 8-bit grayscale PNG, min→0 and max→255.
    pub fn heatmap_png(&self) -> Result<Vec<u8>> {
        let lo = self.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = self.values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = if hi > lo { hi - lo } else { 1.0 };
        let bytes: Vec<u8> = self
            .values
            .iter()
            .map(|v| (((v - lo) / span) * 255.0).round() as u8)
            .collect();
        let mut out = std::io::Cursor::new(Vec::new());
        image::write_buffer_with_format(
            &mut out,
            &bytes,
            self.width as u32,
            self.height as u32,
            image::ExtendedColorType::L8,
            image::ImageFormat::Png,
        )
        .map_err(|e| Error::Decode(e.to_string()))?;
        Ok(out.into_inner())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MapSidecar {
    height: usize,
    width: usize,
    stride: f64,
    offset_x: f64,
    offset_y: f64,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Gaussian regression target on the output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTarget {
    pub map: SimilarityMap,
    /// Standard deviation in output cells.
    pub sigma: f64,
    pub density_scale: f64,
}

impl DensityTarget {
    pub fn zeros(height: usize, width: usize, grid: GridGeometry, sigma: f64) -> Self {
        Self {
            map: SimilarityMap::zeros(height, width, grid),
            sigma,
            density_scale: DENSITY_SCALE,
        }
    }
}

/// Places an isotropic Gaussian of unit mass (times [`DENSITY_SCALE`]) at
/// every dot. Dots are in input-pixel coordinates; `grid` maps them onto the
/// `height × width` output grid. Contributions are accumulated additively.
pub fn render_gaussian_target(
    dots: &[Point],
    height: usize,
    width: usize,
    grid: GridGeometry,
    sigma: f64,
) -> Result<DensityTarget> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma must be positive, got {sigma}")));
    }
    let mut target = DensityTarget::zeros(height, width, grid, sigma);
    let norm = DENSITY_SCALE / (2.0 * std::f64::consts::PI * sigma * sigma);
    let reach = (5.0 * sigma).ceil() as isize;
    let inv2s2 = 1.0 / (2.0 * sigma * sigma);
    for dot in dots {
        let (cr, cc) = grid.pixel_to_cell(*dot);
        let r0 = (cr.round() as isize - reach).max(0);
        let r1 = (cr.round() as isize + reach).min(height as isize - 1);
        let c0 = (cc.round() as isize - reach).max(0);
        let c1 = (cc.round() as isize + reach).min(width as isize - 1);
        for r in r0..=r1 {
            let dr = r as f64 - cr;
            for c in c0..=c1 {
                let dc = c as f64 - cc;
                let v = norm * (-(dr * dr + dc * dc) * inv2s2).exp();
                target.map.values[r as usize * width + c as usize] += v as f32;
            }
        }
    }
    Ok(target)
}
