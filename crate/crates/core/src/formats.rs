//! On-disk formats: little-endian binary grids, depth maps, and
//! scene-coordinate maps, plus PNG dumps for inspection.
//!
//! - `SDFG`: magic, u32 resolution, 3x f64 origin, f64 voxel size, then
//!   resolution^3 f32 values in x-fastest order.
//! - `DPTH`: magic, u32 height, u32 width, then h*w f32 depths row-major
//!   (+inf marks a miss).
//! - `SCRD`: magic, u32 height, u32 width, then per pixel 3x f32 scene
//!   coordinate and a u8 validity weight.

use crate::image::Image;
use crate::pose_init::SceneCoordMap;
use crate::sdf::{GridSpec, SdfGrid};
use nalgebra::Vector3;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}: expected magic {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("{path}: {reason}")]
    Malformed { path: String, reason: String },
}

fn io_err(path: &Path, source: io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn read_exact(path: &Path, r: &mut impl Read, buf: &mut [u8]) -> Result<(), FormatError> {
    r.read_exact(buf).map_err(|e| io_err(path, e))
}

fn check_magic(path: &Path, r: &mut impl Read, expected: [u8; 4]) -> Result<(), FormatError> {
    let mut found = [0u8; 4];
    read_exact(path, r, &mut found)?;
    if found != expected {
        return Err(FormatError::BadMagic {
            path: path.display().to_string(),
            expected,
            found,
        });
    }
    Ok(())
}

fn read_u32(path: &Path, r: &mut impl Read) -> Result<u32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(path, r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f32(path: &Path, r: &mut impl Read) -> Result<f32, FormatError> {
    let mut b = [0u8; 4];
    read_exact(path, r, &mut b)?;
    Ok(f32::from_le_bytes(b))
}

fn read_f64(path: &Path, r: &mut impl Read) -> Result<f64, FormatError> {
    let mut b = [0u8; 8];
    read_exact(path, r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Writes a grid in SDFG format. Values are stored as f32.
pub fn write_sdf_grid(grid: &SdfGrid, path: &Path) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut inner = || -> io::Result<()> {
        w.write_all(b"SDFG")?;
        w.write_all(&(grid.resolution() as u32).to_le_bytes())?;
        for i in 0..3 {
            w.write_all(&grid.origin()[i].to_le_bytes())?;
        }
        w.write_all(&grid.voxel_size().to_le_bytes())?;
        for &v in grid.values() {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
        w.flush()
    };
    inner().map_err(|e| io_err(path, e))
}

pub fn read_sdf_grid(path: &Path) -> Result<SdfGrid, FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    check_magic(path, &mut r, *b"SDFG")?;
    let resolution = read_u32(path, &mut r)? as usize;
    if resolution < 2 || resolution > 4096 {
        return Err(FormatError::Malformed {
            path: path.display().to_string(),
            reason: format!("implausible resolution {resolution}"),
        });
    }
    let origin = [
        read_f64(path, &mut r)?,
        read_f64(path, &mut r)?,
        read_f64(path, &mut r)?,
    ];
    let voxel_size = read_f64(path, &mut r)?;
    let n = resolution * resolution * resolution;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(read_f32(path, &mut r)? as f64);
    }
    SdfGrid::from_values(&GridSpec { resolution, origin, voxel_size }, values).map_err(|e| {
        FormatError::Malformed {
            path: path.display().to_string(),
            reason: e.to_string(),
        }
    })
}

/// Writes a depth image in DPTH format (f32, +inf for misses).
pub fn write_depth_image(depth: &Image<f64>, path: &Path) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut inner = || -> io::Result<()> {
        w.write_all(b"DPTH")?;
        w.write_all(&(depth.height() as u32).to_le_bytes())?;
        w.write_all(&(depth.width() as u32).to_le_bytes())?;
        for &d in depth.data() {
            w.write_all(&(d as f32).to_le_bytes())?;
        }
        w.flush()
    };
    inner().map_err(|e| io_err(path, e))
}

pub fn read_depth_image(path: &Path) -> Result<Image<f64>, FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    check_magic(path, &mut r, *b"DPTH")?;
    let height = read_u32(path, &mut r)? as usize;
    let width = read_u32(path, &mut r)? as usize;
    let mut data = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        data.push(read_f32(path, &mut r)? as f64);
    }
    Ok(Image::from_vec(width, height, data))
}

/// Writes a scene-coordinate map in SCRD format.
pub fn write_scene_coord_map(map: &SceneCoordMap, path: &Path) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    let mut inner = || -> io::Result<()> {
        w.write_all(b"SCRD")?;
        w.write_all(&(map.height() as u32).to_le_bytes())?;
        w.write_all(&(map.width() as u32).to_le_bytes())?;
        for y in 0..map.height() {
            for x in 0..map.width() {
                let c = map.coord(x, y);
                w.write_all(&(c.x as f32).to_le_bytes())?;
                w.write_all(&(c.y as f32).to_le_bytes())?;
                w.write_all(&(c.z as f32).to_le_bytes())?;
                w.write_all(&[u8::from(map.weight(x, y))])?;
            }
        }
        w.flush()
    };
    inner().map_err(|e| io_err(path, e))
}

pub fn read_scene_coord_map(path: &Path) -> Result<SceneCoordMap, FormatError> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    check_magic(path, &mut r, *b"SCRD")?;
    let height = read_u32(path, &mut r)? as usize;
    let width = read_u32(path, &mut r)? as usize;
    let mut coords = Vec::with_capacity(width * height);
    let mut weights = Vec::with_capacity(width * height);
    for _ in 0..width * height {
        let x = read_f32(path, &mut r)? as f64;
        let y = read_f32(path, &mut r)? as f64;
        let z = read_f32(path, &mut r)? as f64;
        let mut wb = [0u8; 1];
        read_exact(path, &mut r, &mut wb)?;
        coords.push(Vector3::new(x, y, z));
        weights.push(wb[0] != 0);
    }
    Ok(SceneCoordMap::from_parts(width, height, coords, weights))
}

/// 8-bit grayscale PNG of values clamped to [0, 1].
pub fn write_png_gray8(img: &Image<f64>, path: &Path) -> Result<(), FormatError> {
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(path, img.width(), img.height(), png::BitDepth::Eight, &bytes)
}

pub fn read_png_gray8(path: &Path) -> Result<Image<f64>, FormatError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| FormatError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| FormatError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(FormatError::Malformed {
            path: path.display().to_string(),
            reason: format!("expected 8-bit grayscale, got {:?}/{:?}", info.color_type, info.bit_depth),
        });
    }
    let data = buf[..info.buffer_size()]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    Ok(Image::from_vec(info.width as usize, info.height as usize, data))
}

/// 16-bit grayscale PNG of depth normalized by the largest finite value;
/// misses map to 0.
pub fn write_png_depth16(depth: &Image<f64>, path: &Path) -> Result<(), FormatError> {
    let dmax = depth
        .data()
        .iter()
        .copied()
        .filter(|d| d.is_finite())
        .fold(0.0f64, f64::max);
    let mut bytes = Vec::with_capacity(depth.data().len() * 2);
    for &d in depth.data() {
        let q = if d.is_finite() && dmax > 0.0 {
            ((d / dmax).clamp(0.0, 1.0) * 65535.0).round() as u16
        } else {
            0
        };
        bytes.extend_from_slice(&q.to_be_bytes());
    }
    write_png(path, depth.width(), depth.height(), png::BitDepth::Sixteen, &bytes)
}

/// 8-bit mask PNG: 255 where true.
pub fn write_png_mask(mask: &Image<bool>, path: &Path) -> Result<(), FormatError> {
    let bytes: Vec<u8> = mask.data().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path, mask.width(), mask.height(), png::BitDepth::Eight, &bytes)
}

pub fn read_png_mask(path: &Path) -> Result<Image<bool>, FormatError> {
    let img = read_png_gray8(path)?;
    Ok(img.map(|&v| v > 0.5))
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<(), FormatError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(depth);
    let inner = || -> Result<(), png::EncodingError> {
        let mut writer = encoder.write_header()?;
        writer.write_image_data(bytes)?;
        Ok(())
    };
    inner().map_err(|e| FormatError::Malformed {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}
