//! Finite-difference check of the full pretraining loss.

use tensorad::{finite_diff_check, GradCheckReport, Tensor};

use crate::config::RunConfig;
use crate::error::Result;
use crate::layout::ClusterGrid;
use crate::model::{ArVideoModel, Forward, ModelParams};
use crate::rng::{Rng, STREAM_GRADCHECK};
use crate::trainer::data::PreparedVideo;
use crate::trainer::pretrain::sample_layout;

/// Checks `count` randomly chosen scalar parameters of the loss of training
/// sample 0 at step 0, in 64-bit, using central differences with step `h`.
///
/// Probes are drawn uniformly over the parameters that receive a gradient,
/// then uniformly over the elements of the chosen parameter, so small tensors
/// (biases, norms, the decoder query) are covered as well as matrices.
pub fn check_pretrain_gradients(
    cfg: &RunConfig,
    video: &PreparedVideo,
    seed: u64,
    count: usize,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport<f64>> {
    let model = ArVideoModel::new(cfg.model_config())?;
    let mut params = model.init_params::<f64>(seed);
    let dims = cfg.cube_spec().grid_for(cfg.frames, cfg.height, cfg.width)?;
    let grid = ClusterGrid::new(dims, cfg.cluster_scheme())?;
    let (_, _, plan) = sample_layout(cfg, &grid, &[0], seed, 0, 0)?;

    let loss_of = |p: &ModelParams<f64>, grads: bool| -> Result<(f64, Vec<Option<Tensor<f64>>>)> {
        let mut f = Forward::new(p);
        let g = f.grid(&video.grid, false);
        let enc = model.encode(&mut f, &plan, g)?;
        let pred = model.decode_predict(&mut f, enc, &plan)?;
        let loss = model.pretrain_loss(&mut f, pred, &video.targets, &plan)?;
        let value = f.tape.value(loss).item();
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut gr = f.tape.backward(loss)?;
        Ok((value, f.param_grads(&mut gr)))
    };

    let (_, grads) = loss_of(&params, true)?;
    let live: Vec<usize> = (0..grads.len()).filter(|&i| grads[i].is_some()).collect();
    let analytic: Vec<Tensor<f64>> = grads
        .into_iter()
        .zip(&params.tensors)
        .map(|(g, p)| g.unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let mut rng = Rng::substream(seed, &[STREAM_GRADCHECK]);
    let probes: Vec<(usize, usize)> = (0..count)
        .map(|_| {
            let pi = live[rng.below(live.len() as u64) as usize];
            (pi, rng.below(params.tensors[pi].len() as u64) as usize)
        })
        .collect();

    let specs = params.specs.clone();
    let mut tensors = std::mem::take(&mut params.tensors);
    let report = finite_diff_check(
        |ts: &[Tensor<f64>]| {
            let p = ModelParams::from_tensors(&specs, ts.to_vec()).map_err(|_| tensorad::Error::Contract("parameter layout".into()))?;
            loss_of(&p, false)
                .map(|(v, _)| v)
                .map_err(|e| match e {
                    crate::Error::Tensor(t) => t,
                    other => tensorad::Error::Contract(other.to_string()),
                })
        },
        &mut tensors,
        &analytic,
        Some(&probes),
        h,
        tol,
    )?;
    Ok(report)
}
