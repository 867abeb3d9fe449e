use arvideo::config::RunConfig;
use arvideo::costmodel::{sequence_lengths, CostConfig};
use arvideo::error::{Error, FormatError};
use arvideo::layout::{assemble_layout, make_order, ClusterGrid, OrderPolicy};
use arvideo::model::downstream_forward;
use arvideo::rng::Rng;
use arvideo::trainer::{
    check_pretrain_gradients, load_checkpoint, sample_layout, save_checkpoint, Checkpoint, Dataset, Trainer,
};

fn small() -> (RunConfig, Dataset) {
    let mut cfg = RunConfig::desk();
    cfg.set("num_videos", "80").unwrap();
    cfg.set("batch_size", "2").unwrap();
    let data = Dataset::generate(&cfg).unwrap();
    (cfg, data)
}

fn trained(cfg: &RunConfig, data: &Dataset, steps: usize) -> Trainer<f32> {
    let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    tr.run_until(data, steps, |_| {}).unwrap();
    tr
}

#[test]
fn checkpoint_bytes_survive_a_file_roundtrip() {
    let (cfg, data) = small();
    let tr = trained(&cfg, &data, 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let ckpt = tr.checkpoint();
    save_checkpoint(&path, &ckpt).unwrap();
    let back: Checkpoint<f32> = load_checkpoint(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(back.to_bytes(), ckpt.to_bytes());
    assert_eq!(back.step, 2);
    assert!(load_checkpoint::<f64>(&path).is_err());
}

#[test]
fn checkpoint_rejects_damaged_input() {
    let (cfg, _) = small();
    let bytes = Trainer::<f32>::new(cfg).unwrap().checkpoint().to_bytes();

    let mut v = bytes.clone();
    v[4..6].copy_from_slice(&2u16.to_le_bytes());
    let err = Checkpoint::<f32>::from_bytes(&v).unwrap_err();
    assert!(matches!(err, Error::CheckpointVersion(2)));
    assert!(err.to_string().contains("unsupported checkpoint version"));

    let mut v = bytes.clone();
    v[0] = b'X';
    assert!(matches!(Checkpoint::<f32>::from_bytes(&v), Err(Error::Format(FormatError::BadMagic))));

    let v = &bytes[..bytes.len() - 3];
    assert!(matches!(
        Checkpoint::<f32>::from_bytes(v),
        Err(Error::Format(FormatError::TruncatedPayload { .. }))
    ));

    let mut v = bytes.clone();
    v.push(0);
    assert!(matches!(Checkpoint::<f32>::from_bytes(&v), Err(Error::Format(FormatError::TrailingBytes))));
}

#[test]
fn resumed_run_matches_straight_run() {
    let (cfg, data) = small();
    let mut straight = Trainer::<f32>::new(cfg.clone()).unwrap();
    let a = straight.run_until(&data, 4, |_| {}).unwrap();
    let half = trained(&cfg, &data, 2);
    let mut resumed = Trainer::from_checkpoint(Checkpoint::<f32>::from_bytes(&half.checkpoint().to_bytes()).unwrap()).unwrap();
    let b = resumed.run_until(&data, 4, |_| {}).unwrap();
    let bits = |r: &[arvideo::trainer::MetricRow]| r.iter().map(|r| (r.step, r.loss.to_bits(), r.lr.to_bits())).collect::<Vec<_>>();
    assert_eq!(bits(&a[2..]), bits(&b));
    assert_eq!(straight.checkpoint().to_bytes(), resumed.checkpoint().to_bytes());
}

#[test]
fn overflow_reports_the_batch_seed() {
    let (cfg, data) = small();
    let mut tr = Trainer::<f32>::new(cfg.clone()).unwrap();
    let id = tr.params.find("embed.weight").unwrap().0;
    tr.params.tensors[id].data_mut().iter_mut().for_each(|v| *v = f32::MAX);
    match tr.step_once(&data) {
        Err(Error::NonFiniteLoss { step, batch_seed, .. }) => {
            assert_eq!(step, 0);
            let grid = tr.cluster_grid().clone();
            let seeds: Vec<u64> = (0..cfg.batch_size)
                .map(|b| sample_layout(&cfg, &grid, &data.train, cfg.seed, 0, b).unwrap().0)
                .collect();
            assert!(seeds.contains(&batch_seed));
        }
        other => panic!("expected a non-finite loss, got {:?}", other.map(|r| r.loss)),
    }
}

#[test]
fn untrained_classifier_is_near_chance() {
    let (cfg, data) = small();
    let tr = Trainer::<f64>::new(cfg).unwrap();
    let correct = data
        .test
        .iter()
        .filter(|&&i| {
            let v = &data.videos[i];
            let logits = downstream_forward(&tr.model, &tr.params, &v.grid).unwrap();
            let best = (0..logits.len()).max_by(|&a, &b| logits[a].total_cmp(&logits[b])).unwrap();
            best == v.label
        })
        .count();
    let n = data.test.len() as f64;
    let p = 1.0 / data.num_classes as f64;
    let sigma = (p * (1.0 - p) / n).sqrt();
    assert!((correct as f64 / n - p).abs() <= 3.0 * sigma, "{correct} of {n}");
}

#[test]
fn pretrain_gradients_match_finite_differences_within_roundoff() {
    let (cfg, data) = small();
    let report = check_pretrain_gradients(&cfg, &data.videos[0], 3, 6, 1e-4, 1e-5).unwrap();
    assert_eq!(report.results.len(), 6);
    // Loss round-off is about 1e-15, so the difference quotient resolves
    // gradients only to about 1e-11 in absolute terms.
    for p in &report.results {
        let err = (p.analytic - p.numeric).abs();
        assert!(err <= 1e-5 * p.analytic.abs().max(p.numeric.abs()) + 1e-10, "{p:?}");
    }
}

#[test]
fn cost_lengths_agree_with_layouts() {
    for ratio in ["0", "0.5", "0.75", "0.8", "0.9"] {
        let mut cfg = RunConfig::desk();
        cfg.set("mask_ratio", ratio).unwrap();
        let dims = cfg.cube_spec().grid_for(cfg.frames, cfg.height, cfg.width).unwrap();
        let grid = ClusterGrid::new(dims, cfg.cluster_scheme()).unwrap();
        let order = make_order(&grid, OrderPolicy::SpatialFirst);
        let plan = assemble_layout(&grid, &order, cfg.mask_ratio, cfg.targets, &mut Rng::new(0)).unwrap();
        let l = sequence_lengths(&CostConfig::from_run("desk", &cfg).unwrap()).unwrap();
        assert_eq!((l.enc_q, l.enc_kv), (plan.enc_len() as u64, plan.enc_len() as u64), "ratio {ratio}");
        assert_eq!((l.dec_q, l.dec_kv), (plan.dec_len() as u64, plan.enc_len() as u64), "ratio {ratio}");
    }
}
