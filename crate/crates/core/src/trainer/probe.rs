//! Downstream evaluation: linear probe on frozen features, or full fine-tuning.

use rayon::prelude::*;
use tensorad::{Real, Tape, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{ArVideoModel, Forward, Init, ModelParams, ParamSpec};
use crate::rng::{derive_seed, Rng, STREAM_PROBE};
use crate::trainer::data::Dataset;
use crate::trainer::optim::{adamw_step, AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProbeMode {
    Linear,
    Full,
}

impl ProbeMode {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeMode::Linear => "linear",
            ProbeMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub mode: ProbeMode,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
}

fn accuracy(pred: &[usize], data: &Dataset, split: &[usize]) -> f64 {
    if split.is_empty() {
        return 0.0;
    }
    let hits = split.iter().filter(|&&i| pred[i] == data.videos[i].label).count();
    100.0 * hits as f64 / split.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Classification accuracy (percent) on `data.test` after training a head.
///
/// `Linear` freezes the encoder, standardizes its mean-pooled features with
/// training-split statistics and fits a softmax regression full-batch.
/// `Full` fine-tunes encoder, feature norm and classifier with minibatches.
pub fn probe<F: Real>(
    cfg: &RunConfig,
    model: &ArVideoModel,
    params: &ModelParams<F>,
    data: &Dataset,
    mode: ProbeMode,
) -> Result<ProbeReport> {
    match mode {
        ProbeMode::Linear => linear_probe(cfg, model, params, data),
        ProbeMode::Full => finetune(cfg, model, params, data),
    }
}

fn features<F: Real>(model: &ArVideoModel, params: &ModelParams<F>, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    data.videos
        .par_iter()
        .map(|v| {
            let mut f = Forward::inference(params);
            let g = f.grid(&v.grid, false);
            let pooled = model.pooled_features(&mut f, g, v.grid.dims)?;
            Ok(f.tape.value(pooled).data().iter().map(|x| x.to_f64().unwrap()).collect())
        })
        .collect()
}

fn linear_probe<F: Real>(cfg: &RunConfig, model: &ArVideoModel, params: &ModelParams<F>, data: &Dataset) -> Result<ProbeReport> {
    let feats = features(model, params, data)?;
    let d = feats[0].len();
    let k = data.num_classes;
    let n_train = data.train.len() as f64;
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    for &i in &data.train {
        for (m, x) in mean.iter_mut().zip(&feats[i]) {
            *m += x / n_train;
        }
    }
    for &i in &data.train {
        for j in 0..d {
            var[j] += (feats[i][j] - mean[j]).powi(2) / n_train;
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v + 1e-6).sqrt()).collect();
    let standardized = |i: usize| -> Vec<f64> { (0..d).map(|j| (feats[i][j] - mean[j]) / std[j]).collect() };
    let x_train = Tensor::new(&[data.train.len(), d], data.train.iter().flat_map(|&i| standardized(i)).collect())?;
    let y_train: Vec<usize> = data.train.iter().map(|&i| data.videos[i].label).collect();

    let specs = [
        ParamSpec {
            name: "probe.w".into(),
            shape: vec![d, k],
            init: Init::Zeros,
            decay: true,
        },
        ParamSpec {
            name: "probe.b".into(),
            shape: vec![k],
            init: Init::Zeros,
            decay: false,
        },
    ];
    let mut head = ModelParams::<f64>::init(&specs, 0);
    let mut opt = OptimizerState::new(&head);
    let hp = AdamWConfig {
        weight_decay: 0.0,
        ..AdamWConfig::from_run(cfg)
    };
    let mut final_loss = f64::NAN;
    for _ in 0..cfg.probe_steps {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(x_train.clone());
        let w = tape.leaf(head.tensors[0].clone());
        let b = tape.leaf(head.tensors[1].clone());
        let z = tape.matmul(x, w)?;
        let z = tape.add(z, b)?;
        let loss = tape.cross_entropy(z, &y_train)?;
        final_loss = tape.value(loss).item();
        let mut g = tape.backward(loss)?;
        let grads = vec![g.take(w), g.take(b)];
        adamw_step(&mut head, &grads, &mut opt, &hp, cfg.probe_lr);
    }
    let pred: Vec<usize> = (0..data.videos.len())
        .map(|i| {
            let x = standardized(i);
            let logits: Vec<f64> = (0..k)
                .map(|c| head.tensors[1].data()[c] + (0..d).map(|j| x[j] * head.tensors[0].data()[j * k + c]).sum::<f64>())
                .collect();
            argmax(&logits)
        })
        .collect();
    Ok(ProbeReport {
        mode: ProbeMode::Linear,
        train_accuracy: accuracy(&pred, data, &data.train),
        test_accuracy: accuracy(&pred, data, &data.test),
        final_loss,
    })
}

fn finetune<F: Real>(cfg: &RunConfig, model: &ArVideoModel, params: &ModelParams<F>, data: &Dataset) -> Result<ProbeReport> {
    if cfg.finetune_batch == 0 {
        return Err(Error::config("finetune_batch", "must be positive"));
    }
    let mut params = params.clone();
    let mut opt = OptimizerState::new(&params);
    let hp = AdamWConfig::from_run(cfg);
    let mut final_loss = f64::NAN;
    for step in 0..cfg.finetune_steps {
        let results: Vec<Result<(f64, Vec<Option<Tensor<F>>>)>> = (0..cfg.finetune_batch)
            .into_par_iter()
            .map(|b| {
                let mut rng = Rng::new(derive_seed(cfg.seed, &[STREAM_PROBE, step as u64, b as u64]));
                let v = &data.videos[data.train[rng.below(data.train.len() as u64) as usize]];
                let mut f = Forward::new(&params);
                let g = f.grid(&v.grid, false);
                let logits = model.downstream_logits(&mut f, g, v.grid.dims)?;
                let loss = f.tape.cross_entropy(logits, &[v.label])?;
                let mut grads = f.tape.backward(loss)?;
                Ok((f.tape.value(loss).item().to_f64().unwrap(), f.param_grads(&mut grads)))
            })
            .collect();
        let mut sum: Vec<Option<Tensor<F>>> = vec![None; params.len()];
        let mut loss = 0.0;
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
        let inv = F::from_f64(1.0 / cfg.finetune_batch as f64).unwrap();
        for g in sum.iter_mut().flatten() {
            g.scale_in_place(inv);
        }
        adamw_step(&mut params, &sum, &mut opt, &hp, cfg.finetune_lr);
        final_loss = loss / cfg.finetune_batch as f64;
    }
    let pred: Vec<usize> = data
        .videos
        .par_iter()
        .map(|v| {
            let logits = crate::model::downstream_forward(model, &params, &v.grid)?;
            Ok(argmax(&logits.iter().map(|x| x.to_f64().unwrap()).collect::<Vec<_>>()))
        })
        .collect::<Result<_>>()?;
    Ok(ProbeReport {
        mode: ProbeMode::Full,
        train_accuracy: accuracy(&pred, data, &data.train),
        test_accuracy: accuracy(&pred, data, &data.test),
        final_loss,
    })
}
