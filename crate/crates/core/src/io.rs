//! On-disk formats: raw little-endian arrays with a JSON sidecar, and 8-bit
//! binary PGM images.
//!
//! An array named `foo` lives in `foo.raw` (payload, C order) and
//! `foo.json` (header).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ProjectionGeometry, VoxelGrid};
use crate::projector::{ConsistencyVolume, Stack, VisitorVolume, Volume};
use crate::segsim::SoftMaskStack;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    U8,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// What the numbers mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Attenuation,
    LineIntegral,
    SoftMask,
    Mask,
    Consistency,
    Visits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayHeader {
    pub dtype: Dtype,
    /// Slowest axis first.
    pub shape: Vec<usize>,
    /// Voxel size or detector pixel pitch, mm.
    pub spacing: f64,
    pub endianness: String,
    pub tag: Tag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<ProjectionGeometry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<VoxelGrid>,
}

impl ArrayHeader {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn for_volume<T: Element>(grid: &VoxelGrid, tag: Tag) -> Self {
        Self {
            dtype: T::DTYPE,
            shape: vec![grid.nz, grid.ny, grid.nx],
            spacing: grid.voxel_size,
            endianness: "little".into(),
            tag,
            geometry: None,
            grid: Some(*grid),
        }
    }

    pub fn for_stack<T: Element>(geom: &ProjectionGeometry, tag: Tag) -> Self {
        Self {
            dtype: T::DTYPE,
            shape: vec![geom.n_views, geom.detector_rows, geom.detector_cols],
            spacing: geom.pixel_pitch,
            endianness: "little".into(),
            tag,
            geometry: Some(*geom),
            grid: None,
        }
    }
}

/// Scalar types that can be stored in an array file.
pub trait Element: Copy + Sized {
    const DTYPE: Dtype;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;

    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Element for u8 {
    const DTYPE: Dtype = Dtype::U8;

    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }

    fn take(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// `(foo.json, foo.raw)` for `foo`, `foo.json` or `foo.raw`.
pub fn array_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("json" | "raw") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    let mut json = stem.clone().into_os_string();
    json.push(".json");
    let mut raw = stem.into_os_string();
    raw.push(".raw");
    (json.into(), raw.into())
}

pub fn write_array<T: Element>(path: &Path, header: &ArrayHeader, data: &[T]) -> Result<()> {
    let (json, raw) = array_paths(path);
    if header.dtype != T::DTYPE {
        return Err(format_err(
            &json,
            format!("header dtype {:?} but data is {:?}", header.dtype, T::DTYPE),
        ));
    }
    if header.len() != data.len() {
        return Err(format_err(
            &json,
            format!(
                "header shape {:?} holds {} values, data has {}",
                header.shape,
                header.len(),
                data.len()
            ),
        ));
    }
    if let Some(dir) = json.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut bytes = Vec::with_capacity(data.len() * T::DTYPE.size());
    for &x in data {
        x.put(&mut bytes);
    }
    fs::write(&raw, bytes).map_err(|e| Error::io(&raw, e))?;
    let mut text = serde_json::to_string_pretty(header)?;
    text.push('\n');
    fs::write(&json, text).map_err(|e| Error::io(&json, e))
}

pub fn read_header(path: &Path) -> Result<ArrayHeader> {
    let (json, _) = array_paths(path);
    let text = fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let header: ArrayHeader = serde_json::from_str(&text).map_err(|e| format_err(&json, e.to_string()))?;
    if header.endianness != "little" {
        return Err(format_err(
            &json,
            format!("unsupported endianness `{}`", header.endianness),
        ));
    }
    Ok(header)
}

pub fn read_array<T: Element>(path: &Path) -> Result<(ArrayHeader, Vec<T>)> {
    let header = read_header(path)?;
    let (json, raw) = array_paths(path);
    if header.dtype != T::DTYPE {
        return Err(format_err(
            &json,
            format!("stored dtype {:?}, requested {:?}", header.dtype, T::DTYPE),
        ));
    }
    let bytes = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = (header.len() * T::DTYPE.size()) as u64;
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated {
            path: raw,
            offset: bytes.len() as u64,
            expected,
        });
    }
    if bytes.len() as u64 > expected {
        return Err(format_err(
            &raw,
            format!("payload has {} bytes, header implies {expected}", bytes.len()),
        ));
    }
    let data = bytes.chunks_exact(T::DTYPE.size()).map(T::take).collect();
    Ok((header, data))
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::ArrayFormat {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn expect_tag(path: &Path, header: &ArrayHeader, tag: Tag) -> Result<()> {
    if header.tag != tag {
        return Err(format_err(path, format!("tag {:?}, expected {tag:?}", header.tag)));
    }
    Ok(())
}

pub fn write_volume<T: Element>(path: &Path, vol: &Volume<T>, tag: Tag) -> Result<()> {
    write_array(path, &ArrayHeader::for_volume::<T>(&vol.grid, tag), &vol.data)
}

pub fn read_volume<T: Element>(path: &Path, tag: Tag) -> Result<Volume<T>> {
    let (h, data) = read_array::<T>(path)?;
    expect_tag(path, &h, tag)?;
    let grid = h.grid.ok_or_else(|| format_err(path, "volume header has no grid"))?;
    grid.validate()?;
    if h.shape != [grid.nz, grid.ny, grid.nx] {
        return Err(format_err(path, format!("shape {:?} does not match grid", h.shape)));
    }
    Volume::new(grid, data)
}

pub fn write_stack<T: Element>(path: &Path, stack: &Stack<T>, tag: Tag) -> Result<()> {
    write_array(path, &ArrayHeader::for_stack::<T>(&stack.geom, tag), &stack.data)
}

pub fn read_stack<T: Element>(path: &Path, tag: Tag) -> Result<Stack<T>> {
    let (h, data) = read_array::<T>(path)?;
    expect_tag(path, &h, tag)?;
    let geom = h
        .geometry
        .ok_or_else(|| format_err(path, "stack header has no geometry"))?;
    geom.validate()?;
    if h.shape != [geom.n_views, geom.detector_rows, geom.detector_cols] {
        return Err(format_err(path, format!("shape {:?} does not match geometry", h.shape)));
    }
    Stack::new(geom, data)
}

pub fn write_soft_masks(path: &Path, soft: &SoftMaskStack) -> Result<()> {
    write_stack(path, soft, Tag::SoftMask)
}

pub fn read_soft_masks(path: &Path) -> Result<SoftMaskStack> {
    SoftMaskStack::new(read_stack(path, Tag::SoftMask)?)
}

/// Binary mask stacks are validated on read.
pub fn read_mask_stack(path: &Path) -> Result<Stack<u8>> {
    let s = read_stack::<u8>(path, Tag::Mask)?;
    s.ensure_binary()?;
    Ok(s)
}

/// Stored as f32; exact for counts below 2^24.
pub fn write_visits(path: &Path, vv: &VisitorVolume) -> Result<()> {
    let data: Vec<f32> = vv.visits.iter().map(|&v| v as f32).collect();
    write_volume(path, &Volume { grid: vv.grid, data }, Tag::Visits)
}

/// Stored as f32 for inspection; rounds the f64 values.
pub fn write_consistency(path: &Path, c: &ConsistencyVolume) -> Result<()> {
    let data: Vec<f32> = c.value.iter().map(|&v| v as f32).collect();
    write_volume(path, &Volume { grid: c.grid, data }, Tag::Consistency)
}

/// Min-max scales to 0..=255 with rounding; a constant image maps to 0.
pub fn scale_to_u8<T: Copy + Into<f64>>(data: &[T]) -> Result<Vec<u8>> {
    if data.is_empty() {
        return Err(Error::invalid("image", "zero-sized"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in data {
        let x: f64 = x.into();
        if !x.is_finite() {
            return Err(Error::invalid("image", "non-finite pixel value"));
        }
        lo = lo.min(x);
        hi = hi.max(x);
    }
    if hi == lo {
        return Ok(vec![0; data.len()]);
    }
    let scale = 255.0 / (hi - lo);
    Ok(data.iter().map(|&x| ((x.into() - lo) * scale).round() as u8).collect())
}

/// P5 file bytes for already quantized pixels.
pub fn pgm_from_u8(cols: usize, rows: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if cols == 0 || rows == 0 {
        return Err(Error::invalid("image", "zero-sized"));
    }
    if pixels.len() != rows * cols {
        return Err(Error::ShapeMismatch(format!(
            "{} pixels for a {cols}x{rows} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

/// Row-major image of `rows x cols` values as P5 bytes.
pub fn pgm_bytes<T: Copy + Into<f64>>(rows: usize, cols: usize, data: &[T]) -> Result<Vec<u8>> {
    if rows * cols != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values for a {cols}x{rows} image",
            data.len()
        )));
    }
    pgm_from_u8(cols, rows, &scale_to_u8(data)?)
}

pub fn export_pgm<T: Copy + Into<f64>>(path: &Path, rows: usize, cols: usize, data: &[T]) -> Result<()> {
    let bytes = pgm_bytes(rows, cols, data)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tiles equally sized 8-bit images into a grid of `grid_cols` columns
/// separated by `gap` black pixels. Returns `(rows, cols, pixels)`.
pub fn compose_panel(
    tiles: &[Vec<u8>],
    tile_rows: usize,
    tile_cols: usize,
    grid_cols: usize,
    gap: usize,
) -> Result<(usize, usize, Vec<u8>)> {
    if tiles.is_empty() || grid_cols == 0 {
        return Err(Error::invalid("panel", "no tiles"));
    }
    if let Some(t) = tiles.iter().find(|t| t.len() != tile_rows * tile_cols) {
        return Err(Error::ShapeMismatch(format!(
            "panel tile has {} pixels, expected {}",
            t.len(),
            tile_rows * tile_cols
        )));
    }
    let grid_rows = tiles.len().div_ceil(grid_cols);
    let rows = grid_rows * tile_rows + (grid_rows - 1) * gap;
    let cols = grid_cols * tile_cols + (grid_cols - 1) * gap;
    let mut out = vec![0u8; rows * cols];
    for (k, tile) in tiles.iter().enumerate() {
        let r0 = (k / grid_cols) * (tile_rows + gap);
        let c0 = (k % grid_cols) * (tile_cols + gap);
        for r in 0..tile_rows {
            let dst = (r0 + r) * cols + c0;
            out[dst..dst + tile_cols].copy_from_slice(&tile[r * tile_cols..(r + 1) * tile_cols]);
        }
    }
    Ok((rows, cols, out))
}
