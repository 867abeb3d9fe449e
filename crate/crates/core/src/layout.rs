//! Cluster elements, prediction orders, per-cluster visible-token sampling and
//! the attention masks that make one parallel pass autoregressive.
//!
//! Positions below are 0-based order positions in the permuted cluster
//! sequence. The final cluster of the permutation is dropped; the remaining
//! `M - 1` clusters feed the encoder, and clusters at positions `1..M-1` are
//! the prediction targets (position 0 is pure context).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tokenizer::GridDims;

/// Tokens per cluster along (t, h, w).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterScheme {
    pub k_t: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ClusterScheme {
    pub fn new(k_t: usize, k_h: usize, k_w: usize) -> Self {
        Self { k_t, k_h, k_w }
    }

    pub fn cluster_size(&self) -> usize {
        self.k_t * self.k_h * self.k_w
    }
}

/// Coordinates of a cluster in the cluster grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClusterCoord {
    pub t: usize,
    pub h: usize,
    pub w: usize,
}

impl ClusterCoord {
    pub fn new(t: usize, h: usize, w: usize) -> Self {
        Self { t, h, w }
    }
}

/// A token grid partitioned by a [`ClusterScheme`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterGrid {
    pub dims: GridDims,
    pub scheme: ClusterScheme,
    pub c_t: usize,
    pub c_h: usize,
    pub c_w: usize,
}

impl ClusterGrid {
    pub fn new(dims: GridDims, scheme: ClusterScheme) -> Result<Self> {
        for (axis, n, k) in [("k_t", dims.n_t, scheme.k_t), ("k_h", dims.n_h, scheme.k_h), ("k_w", dims.n_w, scheme.k_w)] {
            if k == 0 || n % k != 0 {
                return Err(Error::config(axis, format!("cluster extent {k} does not divide token extent {n}")));
            }
        }
        Ok(Self {
            dims,
            scheme,
            c_t: dims.n_t / scheme.k_t,
            c_h: dims.n_h / scheme.k_h,
            c_w: dims.n_w / scheme.k_w,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.c_t * self.c_h * self.c_w
    }

    pub fn cluster_size(&self) -> usize {
        self.scheme.cluster_size()
    }

    pub fn flat(&self, c: ClusterCoord) -> usize {
        (c.t * self.c_h + c.h) * self.c_w + c.w
    }

    pub fn coord(&self, flat: usize) -> ClusterCoord {
        ClusterCoord::new(flat / (self.c_h * self.c_w), (flat / self.c_w) % self.c_h, flat % self.c_w)
    }

    pub fn cluster_of_token(&self, token: usize) -> ClusterCoord {
        let (t, h, w) = self.dims.coords(token);
        ClusterCoord::new(t / self.scheme.k_t, h / self.scheme.k_h, w / self.scheme.k_w)
    }

    /// Token ids of a cluster in (t, h, w) row-major order.
    pub fn tokens_of(&self, c: ClusterCoord) -> Vec<usize> {
        let s = self.scheme;
        let mut out = Vec::with_capacity(s.cluster_size());
        for t in c.t * s.k_t..(c.t + 1) * s.k_t {
            for h in c.h * s.k_h..(c.h + 1) * s.k_h {
                for w in c.w * s.k_w..(c.w + 1) * s.k_w {
                    out.push(self.dims.id(t, h, w));
                }
            }
        }
        out
    }
}

/// Token-id lists of all clusters, indexed by flat cluster id.
pub fn build_cluster_partition(dims: GridDims, scheme: ClusterScheme) -> Result<Vec<Vec<usize>>> {
    let grid = ClusterGrid::new(dims, scheme)?;
    Ok((0..grid.num_clusters()).map(|f| grid.tokens_of(grid.coord(f))).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderPolicy {
    SpatialFirst,
    TemporalFirst,
    RandomRaster { seed: u64 },
}

impl OrderPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            OrderPolicy::SpatialFirst => "spatial-first",
            OrderPolicy::TemporalFirst => "temporal-first",
            OrderPolicy::RandomRaster { .. } => "random",
        }
    }
}

/// A permutation of all clusters; index = order position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderPlan {
    pub permutation: Vec<ClusterCoord>,
}

pub fn make_order(grid: &ClusterGrid, policy: OrderPolicy) -> OrderPlan {
    let mut permutation = Vec::with_capacity(grid.num_clusters());
    match policy {
        OrderPolicy::SpatialFirst => {
            for t in 0..grid.c_t {
                for h in 0..grid.c_h {
                    for w in 0..grid.c_w {
                        permutation.push(ClusterCoord::new(t, h, w));
                    }
                }
            }
        }
        OrderPolicy::TemporalFirst => {
            for h in 0..grid.c_h {
                for w in 0..grid.c_w {
                    for t in 0..grid.c_t {
                        permutation.push(ClusterCoord::new(t, h, w));
                    }
                }
            }
        }
        OrderPolicy::RandomRaster { seed } => {
            permutation.extend((0..grid.num_clusters()).map(|f| grid.coord(f)));
            Rng::new(seed).shuffle(&mut permutation);
        }
    }
    OrderPlan { permutation }
}

pub fn validate_mask_ratio(mask_ratio: f64) -> Result<()> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::config("mask_ratio", format!("{mask_ratio} is outside [0, 1)")));
    }
    Ok(())
}

/// `floor(x)`, except that values within 1e-9 of an integer snap to it, so
/// decimal ratios such as 0.95 × 20 count as the exact product.
pub(crate) fn snapped_floor(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.floor() as usize
    }
}

/// Tokens kept per cluster: `ceil((1 - mask_ratio) · size)`.
pub fn visible_count(cluster_size: usize, mask_ratio: f64) -> usize {
    cluster_size - snapped_floor(mask_ratio * cluster_size as f64)
}

/// Uniform sample without replacement (partial Fisher-Yates), sorted by id.
pub fn subsample_visible(tokens: &[usize], mask_ratio: f64, rng: &mut Rng) -> Vec<usize> {
    let k = visible_count(tokens.len(), mask_ratio);
    let mut pool = tokens.to_vec();
    let n = pool.len();
    for i in 0..k.min(n) {
        let j = i + rng.below((n - i) as u64) as usize;
        pool.swap(i, j);
    }
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Which tokens of a target cluster are predicted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TargetMode {
    /// Every token of the cluster, masked or not.
    Full,
    /// Only the tokens sampled as visible for that cluster.
    VisibleOnly,
}

/// Dense row-major boolean matrix, shareable with the autodiff tape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Arc<[bool]>,
}

impl BoolMatrix {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self {
            rows,
            cols,
            data: data.into(),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.rows * self.cols * 2);
        for i in 0..self.rows {
            let row: Vec<&str> = self.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
            s.push_str(&row.join(","));
            s.push('\n');
        }
        s
    }

    /// Binary PGM (P5); admissible entries are white.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rows).into_bytes();
        out.extend(self.data.iter().map(|&b| if b { 255u8 } else { 0 }));
        out
    }
}

/// A cluster together with its order position and the tokens it contributes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClusterGroup {
    pub position: usize,
    pub cluster: ClusterCoord,
    pub tokens: Vec<usize>,
}

/// Per-sample materialization of sequences and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct LayoutPlan {
    pub dims: GridDims,
    /// Encoded clusters in storage order (normally ascending position).
    pub encoder_groups: Vec<ClusterGroup>,
    pub target_groups: Vec<ClusterGroup>,
    pub encoder_tokens: Vec<usize>,
    pub encoder_positions: Vec<usize>,
    pub target_tokens: Vec<usize>,
    pub target_positions: Vec<usize>,
    /// `enc_mask[i][j]` iff position(i) ≥ position(j).
    pub enc_mask: BoolMatrix,
    /// `cross_mask[q][j]` iff target position(q) > position(j).
    pub cross_mask: BoolMatrix,
    /// Query-query mask for the optional decoder self-attention:
    /// target position(q) ≥ target position(q').
    pub dec_self_mask: BoolMatrix,
}

impl LayoutPlan {
    /// Builds the flat sequences and all masks from explicit groups. Masks
    /// depend only on order positions, never on storage order.
    pub fn from_groups(dims: GridDims, encoder_groups: Vec<ClusterGroup>, target_groups: Vec<ClusterGroup>) -> Result<Self> {
        let flatten = |groups: &[ClusterGroup]| {
            let mut toks = Vec::new();
            let mut pos = Vec::new();
            for g in groups {
                toks.extend_from_slice(&g.tokens);
                pos.extend(std::iter::repeat(g.position).take(g.tokens.len()));
            }
            (toks, pos)
        };
        let (encoder_tokens, encoder_positions) = flatten(&encoder_groups);
        let (target_tokens, target_positions) = flatten(&target_groups);
        if let Some(&t) = encoder_tokens.iter().chain(&target_tokens).find(|&&t| t >= dims.len()) {
            return Err(Error::config("tokens", format!("token id {t} outside grid of {}", dims.len())));
        }
        let (ep, tp) = (&encoder_positions, &target_positions);
        let enc_mask = BoolMatrix::from_fn(ep.len(), ep.len(), |i, j| ep[i] >= ep[j]);
        let cross_mask = BoolMatrix::from_fn(tp.len(), ep.len(), |q, j| tp[q] > ep[j]);
        let dec_self_mask = BoolMatrix::from_fn(tp.len(), tp.len(), |q, r| tp[q] >= tp[r]);
        if let Some(q) = (0..cross_mask.rows).find(|&q| !cross_mask.row(q).iter().any(|&b| b)) {
            return Err(Error::config(
                "layout",
                format!("target row {q} (position {}) has no earlier context", tp[q]),
            ));
        }
        Ok(Self {
            dims,
            encoder_groups,
            target_groups,
            encoder_tokens,
            encoder_positions,
            target_tokens,
            target_positions,
            enc_mask,
            cross_mask,
            dec_self_mask,
        })
    }

    pub fn enc_len(&self) -> usize {
        self.encoder_tokens.len()
    }

    pub fn dec_len(&self) -> usize {
        self.target_tokens.len()
    }

    /// Encoded clusters in order-position order.
    pub fn kept_clusters(&self) -> Vec<ClusterCoord> {
        let mut g: Vec<&ClusterGroup> = self.encoder_groups.iter().collect();
        g.sort_by_key(|g| g.position);
        g.into_iter().map(|g| g.cluster).collect()
    }

    /// Row ranges of each target group within the decoder sequence.
    pub fn target_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.target_groups
            .iter()
            .map(|g| {
                let r = start..start + g.tokens.len();
                start = r.end;
                r
            })
            .collect()
    }
}

/// Drops the permutation's last cluster, samples visible tokens for each kept
/// cluster (in order), and targets the kept clusters at positions `1..M-1`.
pub fn assemble_layout(
    grid: &ClusterGrid,
    order: &OrderPlan,
    mask_ratio: f64,
    targets: TargetMode,
    rng: &mut Rng,
) -> Result<LayoutPlan> {
    validate_mask_ratio(mask_ratio)?;
    let m = grid.num_clusters();
    if m < 3 {
        return Err(Error::config(
            "cluster scheme",
            format!("need at least one context and one target cluster (M = {m} < 3)"),
        ));
    }
    if order.permutation.len() != m {
        return Err(Error::config("order", format!("permutation has {} of {m} clusters", order.permutation.len())));
    }
    let kept = &order.permutation[..m - 1];
    let mut encoder_groups = Vec::with_capacity(m - 1);
    let mut target_groups = Vec::with_capacity(m - 2);
    for (position, &cluster) in kept.iter().enumerate() {
        let all = grid.tokens_of(cluster);
        let visible = subsample_visible(&all, mask_ratio, rng);
        if position >= 1 {
            let tokens = match targets {
                TargetMode::Full => all,
                TargetMode::VisibleOnly => visible.clone(),
            };
            target_groups.push(ClusterGroup {
                position,
                cluster,
                tokens,
            });
        }
        encoder_groups.push(ClusterGroup {
            position,
            cluster,
            tokens: visible,
        });
    }
    LayoutPlan::from_groups(grid.dims, encoder_groups, target_groups)
}
