//! Video ⇄ non-overlapping cube vectors, plus per-cube target normalization.

use crate::error::{Error, Result};
use crate::video::VideoTensor;

/// Cube extents in frames, rows and columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CubeSpec {
    pub p_t: usize,
    pub p_h: usize,
    pub p_w: usize,
}

impl CubeSpec {
    pub fn new(p_t: usize, p_h: usize, p_w: usize) -> Self {
        Self { p_t, p_h, p_w }
    }

    /// Token-grid extents for a `t × h × w` video.
    pub fn grid_for(&self, t: usize, h: usize, w: usize) -> Result<GridDims> {
        for (axis, size, p) in [("p_t", t, self.p_t), ("p_h", h, self.p_h), ("p_w", w, self.p_w)] {
            if p == 0 || size % p != 0 {
                return Err(Error::config(axis, format!("cube extent {p} does not divide {size}")));
            }
        }
        Ok(GridDims::new(t / self.p_t, h / self.p_h, w / self.p_w))
    }
}

/// Extents of a 3-D token grid; token ids are (t, h, w) row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub n_t: usize,
    pub n_h: usize,
    pub n_w: usize,
}

impl GridDims {
    pub fn new(n_t: usize, n_h: usize, n_w: usize) -> Self {
        Self { n_t, n_h, n_w }
    }

    pub fn len(&self) -> usize {
        self.n_t * self.n_h * self.n_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn id(&self, t: usize, h: usize, w: usize) -> usize {
        (t * self.n_h + h) * self.n_w + w
    }

    #[inline]
    pub fn coords(&self, id: usize) -> (usize, usize, usize) {
        (id / (self.n_h * self.n_w), (id / self.n_w) % self.n_h, id % self.n_w)
    }
}

/// Cube vectors of one video, flattened in (frame, row, col, channel) order.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenGrid {
    pub dims: GridDims,
    pub cube_dim: usize,
    pub channels: usize,
    pub cubes: Vec<f32>,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dims.is_empty()
    }

    pub fn cube(&self, id: usize) -> &[f32] {
        &self.cubes[id * self.cube_dim..(id + 1) * self.cube_dim]
    }
}

pub fn cubify(v: &VideoTensor, spec: CubeSpec) -> Result<TokenGrid> {
    let dims = spec.grid_for(v.t_frames, v.height, v.width)?;
    let c = v.channels;
    let cube_dim = spec.p_t * spec.p_h * spec.p_w * c;
    let mut cubes = Vec::with_capacity(dims.len() * cube_dim);
    for gt in 0..dims.n_t {
        for gh in 0..dims.n_h {
            for gw in 0..dims.n_w {
                for dt in 0..spec.p_t {
                    for dh in 0..spec.p_h {
                        let start = v.index(gt * spec.p_t + dt, gh * spec.p_h + dh, gw * spec.p_w, 0);
                        cubes.extend_from_slice(&v.data[start..start + spec.p_w * c]);
                    }
                }
            }
        }
    }
    Ok(TokenGrid {
        dims,
        cube_dim,
        channels: c,
        cubes,
    })
}

pub fn uncubify(g: &TokenGrid, spec: CubeSpec) -> Result<VideoTensor> {
    let c = g.channels;
    if c == 0 || g.cube_dim != spec.p_t * spec.p_h * spec.p_w * c {
        return Err(Error::config(
            "cube_dim",
            format!("{} does not match cube spec {spec:?} with {c} channels", g.cube_dim),
        ));
    }
    if g.cubes.len() != g.dims.len() * g.cube_dim {
        return Err(Error::config("cubes", "payload length does not match grid"));
    }
    let mut v = VideoTensor::zeros(g.dims.n_t * spec.p_t, g.dims.n_h * spec.p_h, g.dims.n_w * spec.p_w, c);
    let mut src = 0;
    for gt in 0..g.dims.n_t {
        for gh in 0..g.dims.n_h {
            for gw in 0..g.dims.n_w {
                for dt in 0..spec.p_t {
                    for dh in 0..spec.p_h {
                        let start = v.index(gt * spec.p_t + dt, gh * spec.p_h + dh, gw * spec.p_w, 0);
                        let len = spec.p_w * c;
                        v.data[start..start + len].copy_from_slice(&g.cubes[src..src + len]);
                        src += len;
                    }
                }
            }
        }
    }
    Ok(v)
}

/// Per-cube regression targets.
#[derive(Clone, Debug, PartialEq)]
pub struct CubeTargets {
    pub cube_dim: usize,
    pub values: Vec<f64>,
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl CubeTargets {
    pub fn cube(&self, id: usize) -> &[f64] {
        &self.values[id * self.cube_dim..(id + 1) * self.cube_dim]
    }

    /// Raw cube values as targets (normalization switched off).
    pub fn raw(g: &TokenGrid) -> Self {
        Self {
            cube_dim: g.cube_dim,
            values: g.cubes.iter().map(|&v| v as f64).collect(),
            means: vec![0.0; g.len()],
            stds: vec![1.0; g.len()],
        }
    }

    /// Per-cube means and standard deviations as CSV (`token,mean,std`).
    pub fn stats_csv(&self) -> String {
        let mut s = String::from("token,mean,std\n");
        for (i, (m, sd)) in self.means.iter().zip(&self.stds).enumerate() {
            s.push_str(&format!("{i},{m},{sd}\n"));
        }
        s
    }
}

/// Standardizes each cube: `(y - mean) / sqrt(var + eps)` with population variance.
pub fn normalize_targets(g: &TokenGrid, eps: f64) -> CubeTargets {
    let d = g.cube_dim;
    let mut values = Vec::with_capacity(g.cubes.len());
    let mut means = Vec::with_capacity(g.len());
    let mut stds = Vec::with_capacity(g.len());
    for id in 0..g.len() {
        let y = g.cube(id);
        let mean = y.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = y.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let std = (var + eps).sqrt();
        values.extend(y.iter().map(|&v| (v as f64 - mean) / std));
        means.push(mean);
        stds.push(std);
    }
    CubeTargets {
        cube_dim: d,
        values,
        means,
        stds,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, h: usize, w: usize, c: usize) -> VideoTensor {
        let n = t * h * w * c;
        VideoTensor::new(t, h, w, c, (0..n).map(|i| (i % 251) as f32 / 250.0).collect()).unwrap()
    }

    #[test]
    fn full_scale_grid() {
        let spec = CubeSpec::new(2, 16, 16);
        let dims = spec.grid_for(16, 224, 224).unwrap();
        assert_eq!((dims.n_t, dims.n_h, dims.n_w, dims.len()), (8, 14, 14, 1568));
        assert_eq!(2 * 16 * 16 * 3, 1536);
    }

    #[test]
    fn desk_grid() {
        let g = cubify(&ramp(8, 32, 32, 1), CubeSpec::new(2, 8, 8)).unwrap();
        assert_eq!((g.dims, g.len(), g.cube_dim), (GridDims::new(4, 4, 4), 64, 128));
    }

    #[test]
    fn constant_video_gives_constant_cubes() {
        let v = VideoTensor::new(4, 8, 8, 2, vec![0.25; 4 * 8 * 8 * 2]).unwrap();
        let g = cubify(&v, CubeSpec::new(2, 4, 4)).unwrap();
        assert!(g.cubes.iter().all(|&x| x == 0.25));
    }

    #[test]
    fn cube_contents_follow_flatten_order() {
        let v = ramp(4, 8, 8, 2);
        let spec = CubeSpec::new(2, 4, 4);
        let g = cubify(&v, spec).unwrap();
        let id = g.dims.id(1, 0, 1);
        let cube = g.cube(id);
        let mut k = 0;
        for dt in 0..2 {
            for dh in 0..4 {
                for dw in 0..4 {
                    for c in 0..2 {
                        assert_eq!(cube[k], v.get(2 + dt, dh, 4 + dw, c));
                        k += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn non_divisible_axis_is_reported() {
        let err = cubify(&ramp(8, 30, 32, 1), CubeSpec::new(2, 8, 8)).unwrap_err();
        assert!(matches!(err, Error::Config { field, .. } if field == "p_h"));
    }

    #[test]
    fn zeroing_one_cube_is_local() {
        let v = ramp(4, 8, 8, 1);
        let spec = CubeSpec::new(2, 4, 4);
        let mut g = cubify(&v, spec).unwrap();
        let id = g.dims.id(1, 1, 0);
        let d = g.cube_dim;
        g.cubes[id * d..(id + 1) * d].fill(0.0);
        let back = uncubify(&g, spec).unwrap();
        for t in 0..4 {
            for h in 0..8 {
                for w in 0..8 {
                    let inside = t >= 2 && h >= 4 && w < 4;
                    let expect = if inside { 0.0 } else { v.get(t, h, w, 0) };
                    assert_eq!(back.get(t, h, w, 0), expect);
                }
            }
        }
    }

    #[test]
    fn normalization_edge_cases() {
        let g = TokenGrid {
            dims: GridDims::new(1, 1, 2),
            cube_dim: 2,
            channels: 1,
            cubes: vec![0.5, 0.5, 0.0, 1.0],
        };
        let tg = normalize_targets(&g, 1e-6);
        assert_eq!(tg.cube(0), &[0.0, 0.0]);
        assert_eq!(tg.stds[0], 1e-6f64.sqrt());
        let tg = normalize_targets(&g, 1e-12);
        assert!((tg.cube(1)[0] + 1.0).abs() < 1e-9 && (tg.cube(1)[1] - 1.0).abs() < 1e-9);
    }
}
