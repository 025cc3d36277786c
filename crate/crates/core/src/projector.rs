//! Ray-driven forward projection and voxel-driven visitor back-projection.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{ProjectionGeometry, ViewFrame, VoxelGrid};

/// Scalar field on a [`VoxelGrid`], x fastest, z slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    pub grid: VoxelGrid,
    pub data: Vec<T>,
}

impl<T: Copy + Default> Volume<T> {
    pub fn zeros(grid: VoxelGrid) -> Self {
        Self {
            grid,
            data: vec![T::default(); grid.len()],
        }
    }
}

impl<T> Volume<T> {
    pub fn new(grid: VoxelGrid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, grid needs {}",
                data.len(),
                grid.len()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn get(&self, ix: usize, iy: usize, iz: usize) -> &T {
        &self.data[self.grid.index(ix, iy, iz)]
    }
}

/// Binary 3D mask.
pub type MaskVolume = Volume<u8>;

/// Per-view detector images, view slowest, then row, then column.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    pub geom: ProjectionGeometry,
    pub data: Vec<T>,
}

/// Line integrals (dimensionless), or raw intensities before conversion.
pub type ProjectionStack = Stack<f32>;
/// Binary masks, values in {0, 1}.
pub type MaskStack = Stack<u8>;

impl<T: Copy + Default> Stack<T> {
    pub fn zeros(geom: ProjectionGeometry) -> Self {
        Self {
            geom,
            data: vec![T::default(); geom.n_views * geom.view_len()],
        }
    }
}

impl<T> Stack<T> {
    pub fn new(geom: ProjectionGeometry, data: Vec<T>) -> Result<Self> {
        let want = geom.n_views * geom.view_len();
        if data.len() != want {
            return Err(Error::ShapeMismatch(format!(
                "stack data has {} values, geometry needs {want}",
                data.len()
            )));
        }
        Ok(Self { geom, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.geom.n_views, self.geom.detector_rows, self.geom.detector_cols]
    }

    pub fn view(&self, i: usize) -> &[T] {
        let n = self.geom.view_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn view_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.geom.view_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn views(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.geom.view_len())
    }

    #[inline]
    pub fn get(&self, view: usize, row: usize, col: usize) -> &T {
        &self.data[(view * self.geom.detector_rows + row) * self.geom.detector_cols + col]
    }

    pub(crate) fn check_same_shape<U>(&self, other: &Stack<U>, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

impl MaskStack {
    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&m| m != 0).count()
    }

    pub fn ensure_binary(&self) -> Result<()> {
        match self.data.iter().position(|&m| m > 1) {
            None => Ok(()),
            Some(i) => Err(Error::invalid(
                "mask stack",
                format!("value {} at flat index {i} is not binary", self.data[i]),
            )),
        }
    }
}

/// Visitor counts of a back-projected mask stack.
#[derive(Debug, Clone, PartialEq)]
pub struct VisitorVolume {
    pub grid: VoxelGrid,
    /// Views whose mask covers the voxel.
    pub visits: Vec<u32>,
    /// Views in which the voxel is visible at all.
    pub max_visits: Vec<u32>,
}

/// Normalized visitor counts, each in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyVolume {
    pub grid: VoxelGrid,
    pub value: Vec<f64>,
}

/// Walks the segment `a -> b` through `grid`, calling `visit(voxel, length)`
/// for every voxel crossed with positive length, in traversal order.
pub fn trace_segment(grid: &VoxelGrid, a: [f64; 3], b: [f64; 3], mut visit: impl FnMut(usize, f64)) {
    let d = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let length = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if length == 0.0 {
        return;
    }
    let lo = grid.min_corner();
    let hi = grid.max_corner();
    let dims = grid.dims();
    let vs = grid.voxel_size;

    let (mut t0, mut t1) = (0.0f64, 1.0f64);
    for ax in 0..3 {
        if d[ax] == 0.0 {
            if a[ax] < lo[ax] || a[ax] > hi[ax] {
                return;
            }
        } else {
            let ta = (lo[ax] - a[ax]) / d[ax];
            let tb = (hi[ax] - a[ax]) / d[ax];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 {
        return;
    }

    let mut idx = [0i64; 3];
    let mut step = [0i64; 3];
    let mut t_next = [f64::INFINITY; 3];
    for ax in 0..3 {
        let p = a[ax] + d[ax] * t0;
        let c = (p - lo[ax]) / vs;
        let i = if d[ax] >= 0.0 { c.floor() } else { c.ceil() - 1.0 } as i64;
        idx[ax] = i.clamp(0, dims[ax] as i64 - 1);
        if d[ax] > 0.0 {
            step[ax] = 1;
        } else if d[ax] < 0.0 {
            step[ax] = -1;
        }
    }
    let boundary = |ax: usize, i: i64, s: i64| -> f64 {
        match s {
            0 => f64::INFINITY,
            1 => (lo[ax] + (i + 1) as f64 * vs - a[ax]) / d[ax],
            _ => (lo[ax] + i as f64 * vs - a[ax]) / d[ax],
        }
    };
    for ax in 0..3 {
        t_next[ax] = boundary(ax, idx[ax], step[ax]);
    }

    let mut t = t0;
    loop {
        let mut ax = 0;
        if t_next[1] < t_next[ax] {
            ax = 1;
        }
        if t_next[2] < t_next[ax] {
            ax = 2;
        }
        let tn = t_next[ax].min(t1);
        let seg = (tn - t) * length;
        if seg > 0.0 {
            visit(grid.index(idx[0] as usize, idx[1] as usize, idx[2] as usize), seg);
        }
        if tn >= t1 {
            break;
        }
        t = tn.max(t);
        idx[ax] += step[ax];
        if idx[ax] < 0 || idx[ax] >= dims[ax] as i64 {
            break;
        }
        t_next[ax] = boundary(ax, idx[ax], step[ax]);
    }
}

/// Line integral of `weight(value)` along the ray from the source through
/// detector coordinate `(u, v)`.
pub fn ray_sum<T: Copy>(vol: &Volume<T>, frame: &ViewFrame, u: f64, v: f64, weight: impl Fn(T) -> f64) -> f64 {
    let mut acc = 0.0f64;
    trace_segment(&vol.grid, frame.source(), frame.detector_point(u, v), |i, len| {
        acc += weight(vol.data[i]) * len;
    });
    acc
}

fn project_with<T, O>(
    vol: &Volume<T>,
    geom: &ProjectionGeometry,
    weight: impl Fn(T) -> f64 + Sync,
    emit: impl Fn(f64) -> O + Sync,
) -> Vec<O>
where
    T: Copy + Sync,
    O: Copy + Default + Send,
{
    let frames = geom.frames();
    let (rows, cols) = (geom.detector_rows, geom.detector_cols);
    let mut out = vec![O::default(); geom.n_views * rows * cols];
    out.par_chunks_mut(cols).enumerate().for_each(|(line, buf)| {
        let (view, row) = (line / rows, line % rows);
        let frame = &frames[view];
        let v = row as f64 + 0.5;
        for (col, o) in buf.iter_mut().enumerate() {
            *o = emit(ray_sum(vol, frame, col as f64 + 0.5, v, &weight));
        }
    });
    out
}

/// Line integrals through every pixel center of every view.
pub fn forward_project(vol: &Volume<f32>, geom: &ProjectionGeometry) -> ProjectionStack {
    let data = project_with(vol, geom, |x| x as f64, |s| s as f32);
    Stack { geom: *geom, data }
}

/// Counts, per voxel, the views whose mask covers the projected voxel center
/// (`visits`) and the views that see the voxel at all (`max_visits`).
pub fn backproject_visitors(masks: &MaskStack, grid: &VoxelGrid) -> Result<VisitorVolume> {
    masks.ensure_binary()?;
    grid.validate()?;
    let geom = &masks.geom;
    let frames = geom.frames();
    let plane = grid.nx * grid.ny;
    let mut visits = vec![0u32; grid.len()];
    let mut max_visits = vec![0u32; grid.len()];
    visits
        .par_chunks_mut(plane)
        .zip(max_visits.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(iz, (vis, maxv))| {
            for iy in 0..grid.ny {
                for ix in 0..grid.nx {
                    let c = grid.voxel_center(ix, iy, iz);
                    let (mut hit, mut seen) = (0u32, 0u32);
                    for (view, f) in frames.iter().enumerate() {
                        if let Some((col, row)) = f.project(c).pixel() {
                            seen += 1;
                            hit += *masks.get(view, row, col) as u32;
                        }
                    }
                    vis[iy * grid.nx + ix] = hit;
                    maxv[iy * grid.nx + ix] = seen;
                }
            }
        });
    Ok(VisitorVolume {
        grid: *grid,
        visits,
        max_visits,
    })
}

/// `visits / max_visits`, with unseen voxels mapped to 0.
pub fn normalize_visitors(vv: &VisitorVolume) -> ConsistencyVolume {
    let value = vv
        .visits
        .iter()
        .zip(&vv.max_visits)
        .map(|(&v, &m)| if m == 0 { 0.0 } else { v as f64 / m as f64 })
        .collect();
    ConsistencyVolume { grid: vv.grid, value }
}

/// Re-projects a binary volume: a pixel is set when its ray runs more than
/// `eps` mm through set voxels.
pub fn reproject_mask(mask3d: &MaskVolume, geom: &ProjectionGeometry, eps: f64) -> Result<MaskStack> {
    if !(eps >= 0.0) {
        return Err(Error::invalid("reprojection eps", format!("{eps} must be >= 0")));
    }
    let data = project_with(mask3d, geom, |m| (m != 0) as u8 as f64, |len| (len > eps) as u8);
    Ok(Stack { geom: *geom, data })
}
