use super::*;
use crate::dataset::{prepare_sample, synthesize, Mode, NormScheme, SynthConfig};
use crate::evaluation::r2;
use crate::hinting::{HeuristicProvider, HintParams, NoHint, Provenance};
use crate::model::ModelConfig;
use crate::attribution::insight_from_maps;
use rand::{Rng, SeedableRng};

fn tiny() -> ModelConfig {
    ModelConfig {
        n_channels: 3,
        seq_len: 32,
        patch_len: 8,
        stride: 8,
        d_model: 8,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 16,
        head_dims: vec![8],
        ..Default::default()
    }
}

fn samples(n: usize, seed: u64, target: impl Fn(&[f64]) -> f64) -> Vec<SampleTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let values: Vec<f64> = (0..3 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
            SampleTensor {
                run_id: format!("s{i:03}"),
                mode: if i % 4 == 0 { Mode::HighSpeed } else { Mode::LowSpeed },
                channels: 3,
                length: 32,
                target: target(&values),
                values,
                norm_stats: Vec::new(),
            }
        })
        .collect()
}

fn linear_target(v: &[f64]) -> f64 {
    let m0 = v[..32].iter().sum::<f64>() / 32.0;
    let m1 = v[32..64].iter().sum::<f64>() / 32.0;
    100.0 + 40.0 * m0 - 25.0 * m1
}

fn pretrained(n: usize) -> (Model<f64>, Vec<SampleTensor>) {
    let set = samples(n, 11, linear_target);
    let mut m = Model::<f64>::new(tiny()).unwrap();
    pretrain(&mut m, &set, &TrainConfig { max_epochs: 5, ..Default::default() }).unwrap();
    (m, set)
}

#[test]
fn adam_matches_scalar_reference() {
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let mut opt = Adam::<f64>::new(lr, b1, b2, eps);
    let mut w = Tensor::scalar(-2.0);
    let (mut rw, mut m, mut v) = (-2.0f64, 0.0f64, 0.0f64);
    for t in 1..=100 {
        let g = Tensor::scalar(2.0 * (w.data()[0] - 3.0));
        opt.step(vec![&mut w], &[g]).unwrap();
        let rg = 2.0 * (rw - 3.0);
        m = b1 * m + (1.0 - b1) * rg;
        v = b2 * v + (1.0 - b2) * rg * rg;
        let mh = m / (1.0 - b1.powf(t as f64));
        let vh = v / (1.0 - b2.powf(t as f64));
        rw -= lr * mh / (vh.sqrt() + eps);
        assert!((w.data()[0] - rw).abs() < 1e-12, "step {t}: {} vs {rw}", w.data()[0]);
    }
    assert_eq!(opt.steps(), 100);
}

#[test]
fn adam_shape_checks() {
    let mut opt = Adam::<f64>::new(0.1, 0.9, 0.999, 1e-8);
    let mut w = Tensor::zeros(&[2]);
    assert!(opt.step(vec![&mut w], &[Tensor::zeros(&[3])]).is_err());
    assert!(opt.step(vec![&mut w], &[]).is_err());
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    assert!(TrainConfig { lr_finetune: 1e-2, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { lr_pretrain: 0.0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    assert!(TrainConfig { val_fraction: 1.0, ..Default::default() }.validate().is_err());
    let t: TrainConfig = toml::from_str("lr_pretrain = 0.002\nshot_selection = \"random\"").unwrap();
    assert_eq!(t.lr_pretrain, 0.002);
    assert_eq!(t.shot_selection, ShotSelection::Random);
    assert_eq!(t.batch_size, 16);
}

#[test]
fn learns_a_constant_target() {
    let set = samples(160, 1, |_| 87.5);
    let mut m = Model::<f64>::new(tiny()).unwrap();
    let report = pretrain(&mut m, &set, &TrainConfig { max_epochs: 50, ..Default::default() }).unwrap();
    assert!(report.history.len() <= 50);
    let mse = evaluate_loss(&m, &set, None).unwrap();
    assert!(mse < 1e-3, "mse {mse}");
    let pred = m.predict(&set, None).unwrap();
    let mean = pred.iter().sum::<f64>() / pred.len() as f64;
    assert!((mean - 87.5).abs() < 0.01, "mean prediction {mean}");
}

#[test]
fn pretraining_is_deterministic() {
    let set = samples(30, 2, linear_target);
    let run = || {
        let mut m = Model::<f64>::new(tiny()).unwrap();
        let r = pretrain(&mut m, &set, &TrainConfig { max_epochs: 4, seed: 9, ..Default::default() }).unwrap();
        (r, m)
    };
    let (ra, ma) = run();
    let (rb, mb) = run();
    assert_eq!(ra, rb);
    assert_eq!(ma.named_params(), mb.named_params());
    assert_eq!(ra.val_ids.len(), 6);
    let other = {
        let mut m = Model::<f64>::new(tiny()).unwrap();
        pretrain(&mut m, &set, &TrainConfig { max_epochs: 4, seed: 10, ..Default::default() }).unwrap()
    };
    assert_ne!(other.history, ra.history);
}

#[test]
fn pretrain_keeps_best_held_out_epoch() {
    let set = samples(30, 3, linear_target);
    let mut m = Model::<f64>::new(tiny()).unwrap();
    let r = pretrain(&mut m, &set, &TrainConfig { max_epochs: 12, early_stop_patience: 2, ..Default::default() }).unwrap();
    let best = r.history.iter().filter_map(|e| e.val).fold(f64::INFINITY, f64::min);
    assert_eq!(r.history[r.best_epoch].val, Some(best));
    let val: Vec<SampleTensor> = set.iter().filter(|s| r.val_ids.contains(&s.run_id)).cloned().collect();
    assert!((evaluate_loss(&m, &val, None).unwrap() - best).abs() < 1e-12);
    if r.stopped_early {
        assert_eq!(r.history.len(), r.best_epoch + 3);
    }
}

#[test]
fn pretrain_rejects_empty_set() {
    let mut m = Model::<f64>::new(tiny()).unwrap();
    assert!(matches!(pretrain(&mut m, &[], &TrainConfig::default()), Err(Error::Data(_))));
}

#[test]
fn fits_noiseless_synthetic_runs() {
    let runs = synthesize(&SynthConfig { n_low: 167, n_high: 33, seed: 3, ..Default::default() }).unwrap();
    let cfg = ModelConfig {
        seq_len: 64,
        d_model: 16,
        n_heads: 2,
        n_layers: 1,
        ffn_dim: 32,
        head_dims: vec![64, 32],
        ..Default::default()
    };
    let scheme = NormScheme::fit_global(&runs, cfg.seq_len).unwrap();
    let set: Vec<SampleTensor> = runs.iter().map(|r| prepare_sample(r, cfg.seq_len, &scheme).unwrap()).collect();
    let mut m = Model::<f64>::new(cfg).unwrap();
    pretrain(&mut m, &set, &TrainConfig { max_epochs: 30, ..Default::default() }).unwrap();
    let y: Vec<f64> = set.iter().map(|s| s.target).collect();
    let score = r2(&y, &m.predict(&set, None).unwrap()).unwrap();
    assert!(score >= 0.99, "train r2 {score}");
}

#[test]
fn zero_learning_rate_leaves_loss_unchanged() {
    let (mut m, set) = pretrained(20);
    let before = m.clone();
    let cfg = TrainConfig { lr_finetune: 0.0, ..Default::default() };
    let out = finetune_step(&mut m, &set[0], None, &cfg).unwrap();
    assert_eq!(out.loss_after, out.loss_before);
    assert_eq!(m.named_params(), before.named_params());
}

#[test]
fn finetune_reduces_sample_loss() {
    let (mut m, set) = pretrained(20);
    let mut shifted = set[3].clone();
    shifted.target += 30.0;
    let cfg = TrainConfig { lr_finetune: 1e-3, lr_pretrain: 1e-2, ..Default::default() };
    let out = finetune_step(&mut m, &shifted, None, &cfg).unwrap();
    assert!(out.loss_after < out.loss_before, "{out:?}");
}

#[test]
fn inert_hint_gives_identical_trajectory() {
    let (m, set) = pretrained(20);
    let n = m.config.n_patches();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = Tensor::new(&[n, n], (0..n * n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let hint = AttentionHint::new(h, 0.0).unwrap();
    let cfg = TrainConfig::default();
    let (mut a, mut b) = (m.clone(), m);
    let oa = finetune_step(&mut a, &set[1], None, &cfg).unwrap();
    let ob = finetune_step(&mut b, &set[1], Some(&hint), &cfg).unwrap();
    assert_eq!(oa, ob);
    assert_eq!(a.named_params(), b.named_params());
}

#[test]
fn active_hint_changes_the_update() {
    let (m, set) = pretrained(20);
    let hint = AttentionHint::new(Tensor::eye(m.config.n_patches()), 0.5).unwrap();
    let cfg = TrainConfig::default();
    let (mut a, mut b) = (m.clone(), m);
    finetune_step(&mut a, &set[1], None, &cfg).unwrap();
    finetune_step(&mut b, &set[1], Some(&hint), &cfg).unwrap();
    assert_ne!(a.named_params(), b.named_params());
}

#[test]
fn zero_shots_is_the_pretrained_row() {
    let (m, set) = pretrained(30);
    let (pool, test) = set.split_at(10);
    let run = run_few_shot(&m, pool, test, 0, &mut NoHint, &TrainConfig::default()).unwrap();
    assert_eq!(run.records.len(), 1);
    let r = &run.records[0];
    assert_eq!((r.shot_index, r.sample_id.as_ref(), r.provenance), (0, None, Provenance::None));
    let y: Vec<f64> = test.iter().map(|s| s.target).collect();
    let p = m.predict(test, None).unwrap();
    assert_eq!(r.test_rmse, crate::evaluation::rmse(&y, &p).unwrap());
    assert_eq!(run.model.named_params(), m.named_params());
}

#[test]
fn few_shot_errors() {
    let (m, set) = pretrained(12);
    let cfg = TrainConfig::default();
    assert!(matches!(run_few_shot(&m, &[], &set, 0, &mut NoHint, &cfg), Err(Error::Data(_))));
    assert!(run_few_shot(&m, &set[..2], &set, 3, &mut NoHint, &cfg).is_err());
    assert!(run_few_shot(&m, &set[..2], &[], 1, &mut NoHint, &cfg).is_err());
}

#[test]
fn unhinted_shots_are_sequential_finetuning() {
    let (m, set) = pretrained(30);
    let (pool, test) = set.split_at(10);
    let cfg = TrainConfig::default();
    let run = run_few_shot(&m, pool, test, 3, &mut NoHint, &cfg).unwrap();
    let order = select_shots(&m, pool, cfg.shot_selection, cfg.seed).unwrap();
    let mut manual = m.clone();
    for (i, &idx) in order.iter().take(3).enumerate() {
        let out = finetune_step(&mut manual, &pool[idx], None, &cfg).unwrap();
        let rec = &run.records[i + 1];
        assert_eq!(rec.sample_id.as_deref(), Some(pool[idx].run_id.as_str()));
        assert_eq!((rec.loss_before, rec.loss_after), (Some(out.loss_before), Some(out.loss_after)));
        assert_eq!(rec.provenance, Provenance::None);
        assert!(rec.hint_sha256.is_none());
    }
    assert_eq!(manual.named_params(), run.model.named_params());
}

#[test]
fn max_error_selection_orders_by_error() {
    let (m, set) = pretrained(20);
    let order = select_shots(&m, &set, ShotSelection::MaxError, 0).unwrap();
    let pred = m.predict(&set, None).unwrap();
    let err: Vec<f64> = order.iter().map(|&i| (pred[i] - set[i].target).abs()).collect();
    assert!(err.windows(2).all(|w| w[0] >= w[1]));
    let a = select_shots(&m, &set, ShotSelection::Random, 5).unwrap();
    assert_eq!(a, select_shots(&m, &set, ShotSelection::Random, 5).unwrap());
    assert_ne!(a, select_shots(&m, &set, ShotSelection::Random, 6).unwrap());
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..20).collect::<Vec<_>>());
}

fn heuristic(m: &Model<f64>) -> HeuristicProvider {
    let n = m.config.n_patches();
    let att = Tensor::from_f64(&[n, n], &(0..n * n).map(|i| (i % 5) as f64 / 4.0).collect::<Vec<_>>()).unwrap();
    let sal = Tensor::zeros(&[3, 32]);
    let ins = insight_from_maps(vec!["s000".into()], 0, &[att], &[sal]).unwrap();
    HeuristicProvider::new(&ins, &HintParams::default()).unwrap()
}

#[test]
fn hinted_few_shot_is_deterministic_and_leaves_input_untouched() {
    let (m, set) = pretrained(30);
    let (pool, test) = set.split_at(10);
    let cfg = TrainConfig { shot_selection: ShotSelection::Random, seed: 3, ..Default::default() };
    let snapshot = m.clone();
    let a = run_few_shot(&m, pool, test, 2, &mut heuristic(&m), &cfg).unwrap();
    let b = run_few_shot(&m, pool, test, 2, &mut heuristic(&m), &cfg).unwrap();
    assert_eq!(a.records, b.records);
    assert_eq!(m.named_params(), snapshot.named_params());
    let rec = &a.records[1];
    assert_eq!(rec.provenance, Provenance::Heuristic);
    assert_eq!(rec.hint_lambda, Some(0.1));
    assert_eq!(rec.hint_sha256.as_deref(), Some(rec.hint.as_ref().unwrap().sha256().as_str()));
    assert!(a.records.iter().all(|r| r.loss_before.is_none_or(|l| l >= 0.0)));
}

#[test]
fn shots_csv_round_trip() {
    let (m, set) = pretrained(30);
    let (pool, test) = set.split_at(10);
    let run = run_few_shot(&m, pool, test, 2, &mut heuristic(&m), &TrainConfig::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("shots.csv");
    write_shots_csv(&path, &run.records).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert!(text.starts_with("shot_index,sample_id,loss_before,loss_after,test_rmse,test_r2,provenance,hint_lambda,hint_sha256\n"));
    let back = read_shots_csv(&path).unwrap();
    let stripped: Vec<ShotRecord> = run.records.iter().map(|r| ShotRecord { hint: None, ..r.clone() }).collect();
    assert_eq!(back, stripped);
}
