//! Autoregressive cluster-prediction pretraining loop.

use std::time::Instant;

use rayon::prelude::*;
use tensorad::{Real, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::layout::{assemble_layout, make_order, ClusterGrid, LayoutPlan};
use crate::model::{ArVideoModel, Forward, ModelParams};
use crate::rng::{derive_seed, Rng, STREAM_BATCH};
use crate::trainer::checkpoint::{Checkpoint, RngState};
use crate::trainer::data::Dataset;
use crate::trainer::optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};

pub const METRICS_HEADER: &str = "step,loss,lr,seconds";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!("{},{},{},{:.3}", self.step, self.loss, self.lr, self.seconds)
    }
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

/// Training sample `b` of `step`: its substream seed, the video it uses (an
/// index into `train`) and its layout.
pub fn sample_layout(
    cfg: &RunConfig,
    grid: &ClusterGrid,
    train: &[usize],
    seed: u64,
    step: usize,
    b: usize,
) -> Result<(u64, usize, LayoutPlan)> {
    let batch_seed = derive_seed(seed, &[STREAM_BATCH, step as u64, b as u64]);
    let mut rng = Rng::new(batch_seed);
    if train.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    let video = train[rng.below(train.len() as u64) as usize];
    let order_seed = rng.next_u64();
    let order = make_order(grid, cfg.order_policy(order_seed));
    let plan = assemble_layout(grid, &order, cfg.mask_ratio, cfg.targets, &mut rng)?;
    Ok((batch_seed, video, plan))
}

pub struct Trainer<F: Real> {
    pub config: RunConfig,
    pub model: ArVideoModel,
    pub params: ModelParams<F>,
    pub optimizer: OptimizerState<F>,
    pub step: usize,
    cluster_grid: ClusterGrid,
    hp: AdamWConfig,
    started: Instant,
}

impl<F: Real> Trainer<F> {
    /// Fresh parameters initialized from `config.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = ArVideoModel::new(config.model_config())?;
        let params = model.init_params::<F>(config.seed);
        let optimizer = OptimizerState::new(&params);
        Self::assemble(config, model, params, optimizer, 0)
    }

    pub fn from_checkpoint(ckpt: Checkpoint<F>) -> Result<Self> {
        if ckpt.rng.seed != ckpt.config.seed {
            return Err(Error::config("seed", "checkpoint stream seed differs from its config seed"));
        }
        let model = ArVideoModel::new(ckpt.config.model_config())?;
        Self::assemble(ckpt.config, model, ckpt.params, ckpt.optimizer, ckpt.step as usize)
    }

    fn assemble(
        config: RunConfig,
        model: ArVideoModel,
        params: ModelParams<F>,
        optimizer: OptimizerState<F>,
        step: usize,
    ) -> Result<Self> {
        let dims = config.cube_spec().grid_for(config.frames, config.height, config.width)?;
        let cluster_grid = ClusterGrid::new(dims, config.cluster_scheme())?;
        let hp = AdamWConfig::from_run(&config);
        Ok(Self {
            config,
            model,
            params,
            optimizer,
            step,
            cluster_grid,
            hp,
            started: Instant::now(),
        })
    }

    pub fn cluster_grid(&self) -> &ClusterGrid {
        &self.cluster_grid
    }

    pub fn checkpoint(&self) -> Checkpoint<F> {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState {
                seed: self.config.seed,
                next_step: self.step as u64,
            },
            step: self.step as u64,
        }
    }

    /// Loss and per-parameter gradients of one sample.
    fn sample_grads(&self, data: &Dataset, b: usize) -> Result<(f64, Vec<Option<Tensor<F>>>)> {
        let step = self.step;
        let (batch_seed, video, plan) = sample_layout(&self.config, &self.cluster_grid, &data.train, self.config.seed, step, b)?;
        let wrap = |source: tensorad::Error| Error::NonFiniteLoss {
            step,
            batch_seed,
            source,
        };
        let v = &data.videos[video];
        let mut f = Forward::new(&self.params);
        let run = |f: &mut Forward<F>| -> Result<_> {
            let g = f.grid(&v.grid, false);
            let enc = self.model.encode(f, &plan, g)?;
            let pred = self.model.decode_predict(f, enc, &plan)?;
            self.model.pretrain_loss(f, pred, &v.targets, &plan)
        };
        let loss = run(&mut f).map_err(|e| match e {
            Error::Tensor(t @ tensorad::Error::NonFinite { .. }) => wrap(t),
            e => e,
        })?;
        let mut grads = f.tape.backward(loss).map_err(|e| match e {
            t @ tensorad::Error::NonFinite { .. } => wrap(t),
            e => e.into(),
        })?;
        let value = f.tape.value(loss).item().to_f64().unwrap();
        if !value.is_finite() {
            return Err(wrap(tensorad::Error::NonFinite { op: "loss" }));
        }
        Ok((value, f.param_grads(&mut grads)))
    }

    /// One optimizer step on a batch of `batch_size` samples. Samples run in
    /// parallel; gradients are summed in sample order so the result does not
    /// depend on the thread count.
    pub fn step_once(&mut self, data: &Dataset) -> Result<MetricRow> {
        let bsz = self.config.batch_size;
        let results: Vec<_> = (0..bsz).into_par_iter().map(|b| self.sample_grads(data, b)).collect();
        let mut loss = 0.0;
        let mut sum: Vec<Option<Tensor<F>>> = vec![None; self.params.len()];
        for r in results {
            let (l, grads) = r?;
            loss += l;
            for (acc, g) in sum.iter_mut().zip(grads) {
                match (acc.as_mut(), g) {
                    (Some(a), Some(g)) => a.add_assign(&g),
                    (None, Some(g)) => *acc = Some(g),
                    _ => {}
                }
            }
        }
        let inv = F::from_f64(1.0 / bsz as f64).unwrap();
        for g in sum.iter_mut().flatten() {
            g.scale_in_place(inv);
        }
        let lr = lr_at(&self.config, self.step);
        adamw_step(&mut self.params, &sum, &mut self.optimizer, &self.hp, lr);
        let row = MetricRow {
            step: self.step,
            loss: loss / bsz as f64,
            lr,
            seconds: self.started.elapsed().as_secs_f64(),
        };
        self.step += 1;
        Ok(row)
    }

    /// Steps until `stop_at` (exclusive), calling `on_row` after each step.
    pub fn run_until(&mut self, data: &Dataset, stop_at: usize, mut on_row: impl FnMut(&MetricRow)) -> Result<Vec<MetricRow>> {
        let mut rows = Vec::new();
        while self.step < stop_at {
            let row = self.step_once(data)?;
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }
}
