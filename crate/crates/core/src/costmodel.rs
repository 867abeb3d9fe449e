//! Analytical sequence lengths, attention FLOPs and attention-map sizes.
//!
//! Costs are counted in multiply-adds times two (one FLOP each). For a block
//! of width `d`, `h` heads, `Q` queries and `KV` keys:
//!
//! * self-attention: `8·Q·d²` for the q, k, v, o projections, plus
//!   `2·Q·KV·d` for the scores and `2·Q·KV·d` for the weighted sum
//! * cross-attention: `4·Q·d²` for the q and o projections and `4·KV·d²` for
//!   k and v, plus the same `4·Q·KV·d`
//! * MLP with ratio `r`: `4·r·Q·d²`
//! * attention map: `Q·KV·h` entries per layer
//!
//! Wall-clock time and resident memory are not modeled. The published
//! figures disagree with each other (14% faster and 58% less memory in the
//! abstract, -12.4% time and -36.8% memory in the cost table) and both
//! depend on hardware; neither is reproduced here.

use crate::config::{CostMode, RunConfig};
use crate::error::{Error, Result};
use crate::layout::{visible_count, ClusterGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct CostConfig {
    pub name: String,
    pub mode: CostMode,
    pub num_tokens: usize,
    pub num_clusters: usize,
    pub cluster_size: usize,
    pub mask_ratio: f64,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub enc_depth: usize,
    pub dec_width: usize,
    pub dec_heads: usize,
    pub dec_depth: usize,
    pub mlp_ratio: usize,
    pub decoder_self_attention: bool,
}

impl CostConfig {
    pub fn from_run(name: impl Into<String>, cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dims = cfg.cube_spec().grid_for(cfg.frames, cfg.height, cfg.width)?;
        let grid = ClusterGrid::new(dims, cfg.cluster_scheme())?;
        Ok(Self {
            name: name.into(),
            mode: cfg.mode,
            num_tokens: dims.len(),
            num_clusters: grid.num_clusters(),
            cluster_size: grid.cluster_size(),
            mask_ratio: cfg.mask_ratio,
            embed_dim: cfg.embed_dim,
            num_heads: cfg.num_heads,
            enc_depth: cfg.enc_depth,
            dec_width: cfg.dec_width,
            dec_heads: cfg.dec_heads,
            dec_depth: cfg.dec_depth,
            mlp_ratio: cfg.mlp_ratio,
            decoder_self_attention: cfg.decoder_self_attention,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SequenceLengths {
    pub enc_q: u64,
    pub enc_kv: u64,
    pub dec_q: u64,
    pub dec_kv: u64,
}

/// ArVideo: `(M−1)·ceil((1−ρ)·S)` encoder tokens, `(M−2)·S` decoder queries
/// attending to the encoder output. Mae: `round((1−ρ)·N)` encoder tokens and
/// a decoder over all `N` tokens.
pub fn sequence_lengths(cfg: &CostConfig) -> Result<SequenceLengths> {
    match cfg.mode {
        CostMode::ArVideo => {
            if cfg.num_clusters < 3 {
                return Err(Error::config("cluster scheme", format!("M = {} < 3", cfg.num_clusters)));
            }
            let vis = visible_count(cfg.cluster_size, cfg.mask_ratio) as u64;
            let m = cfg.num_clusters as u64;
            let enc = (m - 1) * vis;
            Ok(SequenceLengths {
                enc_q: enc,
                enc_kv: enc,
                dec_q: (m - 2) * cfg.cluster_size as u64,
                dec_kv: enc,
            })
        }
        CostMode::Mae => {
            let n = cfg.num_tokens as u64;
            let vis = ((1.0 - cfg.mask_ratio) * n as f64).round() as u64;
            Ok(SequenceLengths {
                enc_q: vis,
                enc_kv: vis,
                dec_q: n,
                dec_kv: n,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct LayerCost {
    pub flops: u64,
    pub map_entries: u64,
}

pub fn self_attention_cost(q: u64, d: u64, heads: u64) -> LayerCost {
    LayerCost {
        flops: 8 * q * d * d + 4 * q * q * d,
        map_entries: q * q * heads,
    }
}

pub fn cross_attention_cost(q: u64, kv: u64, d: u64, heads: u64) -> LayerCost {
    LayerCost {
        flops: (4 * q + 4 * kv) * d * d + 4 * q * kv * d,
        map_entries: q * kv * heads,
    }
}

pub fn mlp_flops(q: u64, d: u64, ratio: u64) -> u64 {
    4 * ratio * q * d * d
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostReport {
    pub name: String,
    pub lengths: SequenceLengths,
    pub enc_layer: LayerCost,
    /// All attention in one decoder block (self plus cross when both exist).
    pub dec_layer: LayerCost,
    pub attention_flops: u64,
    pub attention_map_entries: u64,
    pub mlp_flops: u64,
}

pub fn attention_cost(cfg: &CostConfig) -> Result<CostReport> {
    let l = sequence_lengths(cfg)?;
    let (d, w) = (cfg.embed_dim as u64, cfg.dec_width as u64);
    let r = cfg.mlp_ratio as u64;
    let enc_layer = self_attention_cost(l.enc_q, d, cfg.num_heads as u64);
    let dh = cfg.dec_heads as u64;
    let dec_layer = match cfg.mode {
        CostMode::Mae => self_attention_cost(l.dec_q, w, dh),
        CostMode::ArVideo => {
            let cross = cross_attention_cost(l.dec_q, l.dec_kv, w, dh);
            if cfg.decoder_self_attention {
                let s = self_attention_cost(l.dec_q, w, dh);
                LayerCost {
                    flops: cross.flops + s.flops,
                    map_entries: cross.map_entries + s.map_entries,
                }
            } else {
                cross
            }
        }
    };
    let (ne, nd) = (cfg.enc_depth as u64, cfg.dec_depth as u64);
    Ok(CostReport {
        name: cfg.name.clone(),
        lengths: l,
        enc_layer,
        dec_layer,
        attention_flops: ne * enc_layer.flops + nd * dec_layer.flops,
        attention_map_entries: ne * enc_layer.map_entries + nd * dec_layer.map_entries,
        mlp_flops: ne * mlp_flops(l.enc_q, d, r) + nd * mlp_flops(l.dec_q, w, r),
    })
}

/// Side-by-side CSV: one row per quantity, one column per report.
pub fn cost_report_csv(reports: &[CostReport]) -> String {
    let mut s = String::from("metric");
    for r in reports {
        s.push(',');
        s.push_str(&r.name);
    }
    s.push('\n');
    let rows: [(&str, fn(&CostReport) -> u64); 12] = [
        ("enc_q", |r| r.lengths.enc_q),
        ("enc_kv", |r| r.lengths.enc_kv),
        ("dec_q", |r| r.lengths.dec_q),
        ("dec_kv", |r| r.lengths.dec_kv),
        ("enc_attn_flops_per_layer", |r| r.enc_layer.flops),
        ("dec_attn_flops_per_layer", |r| r.dec_layer.flops),
        ("enc_map_entries_per_layer", |r| r.enc_layer.map_entries),
        ("dec_map_entries_per_layer", |r| r.dec_layer.map_entries),
        ("attention_flops", |r| r.attention_flops),
        ("attention_map_entries", |r| r.attention_map_entries),
        ("mlp_flops", |r| r.mlp_flops),
        ("total_flops", |r| r.attention_flops + r.mlp_flops),
    ];
    for (name, get) in rows {
        s.push_str(name);
        for r in reports {
            s.push_str(&format!(",{}", get(r)));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arvideo_full() -> CostConfig {
        CostConfig::from_run("arvideo", &RunConfig::full_scale()).unwrap()
    }

    fn mae_full() -> CostConfig {
        let mut cfg = RunConfig::full_scale();
        cfg.mode = CostMode::Mae;
        cfg.mask_ratio = 1.0 - 160.0 / 1568.0;
        CostConfig::from_run("videomae", &cfg).unwrap()
    }

    #[test]
    fn desk_lengths() {
        let c = CostConfig::from_run("desk", &RunConfig::desk()).unwrap();
        let l = sequence_lengths(&c).unwrap();
        assert_eq!((l.enc_q, l.enc_kv, l.dec_q, l.dec_kv), (14, 14, 48, 14));
    }

    #[test]
    fn mae_rounds_visible_count() {
        let mut c = mae_full();
        assert_eq!(sequence_lengths(&c).unwrap().enc_q, 160);
        c.mask_ratio = 0.9;
        assert_eq!(sequence_lengths(&c).unwrap().enc_q, 157);
    }

    #[test]
    fn map_entries_per_layer() {
        let a = attention_cost(&arvideo_full()).unwrap();
        let m = attention_cost(&mae_full()).unwrap();
        assert_eq!(a.dec_layer.map_entries / 16, 1372 * 300);
        assert_eq!(m.dec_layer.map_entries / 16, 1568 * 1568);
        assert_eq!(a.enc_layer.map_entries / 12, 90_000);
        assert_eq!(m.enc_layer.map_entries / 12, 25_600);
    }

    #[test]
    fn doubling_queries_doubles_score_terms() {
        let one = cross_attention_cost(100, 50, 64, 4);
        let two = cross_attention_cost(200, 50, 64, 4);
        assert_eq!(two.map_entries, 2 * one.map_entries);
        let scores = |q: u64| 4 * q * 50 * 64;
        assert_eq!(scores(200), 2 * scores(100));
        assert_eq!(two.flops - one.flops, 4 * 100 * 64 * 64 + scores(100));
    }

    #[test]
    fn csv_has_one_column_per_report() {
        let csv = cost_report_csv(&[attention_cost(&arvideo_full()).unwrap(), attention_cost(&mae_full()).unwrap()]);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("metric,arvideo,videomae"));
        assert_eq!(lines.next(), Some("enc_q,300,160"));
        assert_eq!(lines.next(), Some("enc_kv,300,160"));
        assert_eq!(lines.next(), Some("dec_q,1372,1568"));
        assert_eq!(lines.next(), Some("dec_kv,300,1568"));
    }
}
