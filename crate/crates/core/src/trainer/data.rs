//! Tokenized, target-normalized videos with a fixed train/test split.

use std::path::Path;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tokenizer::{cubify, normalize_targets, CubeTargets, TokenGrid};
use crate::video::{generate_corpus, read_dataset, LabeledVideo};

#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub grid: TokenGrid,
    pub targets: CubeTargets,
    pub label: usize,
}

impl PreparedVideo {
    /// Tokenizes one clip and builds its targets, checking it against `cfg`.
    pub fn new(cfg: &RunConfig, lv: &LabeledVideo) -> Result<Self> {
        let v = &lv.video;
        if (v.t_frames, v.height, v.width, v.channels) != (cfg.frames, cfg.height, cfg.width, cfg.channels) {
            return Err(Error::Dataset(format!(
                "video is {}x{}x{}x{}, config expects {}x{}x{}x{}",
                v.t_frames, v.height, v.width, v.channels, cfg.frames, cfg.height, cfg.width, cfg.channels
            )));
        }
        if lv.label >= cfg.num_directions {
            return Err(Error::Dataset(format!("label {} out of {} classes", lv.label, cfg.num_directions)));
        }
        let grid = cubify(v, cfg.cube_spec())?;
        let targets = if cfg.normalize_targets {
            normalize_targets(&grid, cfg.norm_eps)
        } else {
            CubeTargets::raw(&grid)
        };
        Ok(Self {
            grid,
            targets,
            label: lv.label,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub videos: Vec<PreparedVideo>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub num_classes: usize,
}

/// Held-out rule: every tenth round of labels. Labels cycle through the
/// directions, so whole rounds keep the test split class-balanced.
pub fn is_held_out(index: usize, num_classes: usize) -> bool {
    (index / num_classes.max(1)) % 10 == 0
}

impl Dataset {
    pub fn from_videos(cfg: &RunConfig, videos: &[LabeledVideo]) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Dataset("no videos".into()));
        }
        let prepared: Vec<PreparedVideo> = videos.par_iter().map(|lv| PreparedVideo::new(cfg, lv)).collect::<Result<_>>()?;
        let nc = cfg.num_directions;
        let (test, train): (Vec<usize>, Vec<usize>) = (0..prepared.len()).partition(|&i| is_held_out(i, nc));
        if train.is_empty() {
            return Err(Error::Dataset("training split is empty".into()));
        }
        Ok(Self {
            videos: prepared,
            train,
            test,
            num_classes: nc,
        })
    }

    /// Synthesizes `cfg.num_videos` clips from the configured motion task.
    pub fn generate(cfg: &RunConfig) -> Result<Self> {
        let videos = generate_corpus(&cfg.task_spec(), cfg.num_videos)?;
        Self::from_videos(cfg, &videos)
    }

    pub fn load(cfg: &RunConfig, dir: impl AsRef<Path>) -> Result<Self> {
        Self::from_videos(cfg, &read_dataset(dir)?)
    }
}
