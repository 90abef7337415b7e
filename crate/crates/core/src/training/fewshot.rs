use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{finetune_step, TrainConfig};
use crate::dataset::SampleTensor;
use crate::error::{Error, Result};
use crate::evaluation::{r2, rmse};
use crate::hinting::{HintProvider, HintRequest, Provenance, SampleMeta};
use crate::model::{AttentionHint, Model};

/// How shot samples are drawn from the pool (without replacement).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShotSelection {
    /// Largest absolute error under the pretrained model first; ties by id.
    #[default]
    MaxError,
    /// Seeded shuffle of the pool.
    Random,
}

/// One row of `shots.csv`. Row 0 is the pretrained model and has no sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotRecord {
    pub shot_index: usize,
    pub sample_id: Option<String>,
    pub loss_before: Option<f64>,
    pub loss_after: Option<f64>,
    pub test_rmse: f64,
    pub test_r2: f64,
    pub provenance: Provenance,
    pub hint_lambda: Option<f64>,
    pub hint_sha256: Option<String>,
    #[serde(skip)]
    pub hint: Option<AttentionHint>,
}

pub struct FewShotRun {
    pub records: Vec<ShotRecord>,
    /// Weights after the last shot.
    pub model: Model<f64>,
}

/// Orders `pool` for the shot protocol.
pub fn select_shots(model: &Model<f64>, pool: &[SampleTensor], strategy: ShotSelection, seed: u64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    match strategy {
        ShotSelection::MaxError => {
            let pred = model.predict(pool, None)?;
            let err: Vec<f64> = pred.iter().zip(pool).map(|(p, s)| (p - s.target).abs()).collect();
            order.sort_by(|&a, &b| err[b].total_cmp(&err[a]).then_with(|| pool[a].run_id.cmp(&pool[b].run_id)));
        }
        ShotSelection::Random => {
            order.sort_by(|&a, &b| pool[a].run_id.cmp(&pool[b].run_id));
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        }
    }
    Ok(order)
}

fn test_metrics(model: &Model<f64>, test: &[SampleTensor]) -> Result<(f64, f64)> {
    let pred = model.predict(test, None)?;
    let y: Vec<f64> = test.iter().map(|s| s.target).collect();
    Ok((rmse(&y, &pred)?, r2(&y, &pred)?))
}

/// Records 0-shot test metrics, then fine-tunes one sample at a time on a
/// copy of `model`, asking `provider` for a hint before each shot. Shots are
/// cumulative; hints are used only inside fine-tuning.
pub fn run_few_shot(
    model: &Model<f64>,
    shot_pool: &[SampleTensor],
    test_set: &[SampleTensor],
    n_shots: usize,
    provider: &mut dyn HintProvider,
    cfg: &TrainConfig,
) -> Result<FewShotRun> {
    cfg.validate()?;
    if shot_pool.is_empty() {
        return Err(Error::Data("shot pool is empty".into()));
    }
    if n_shots > shot_pool.len() {
        return Err(Error::InvalidArgument(format!(
            "{n_shots} shots requested but the pool holds {}",
            shot_pool.len()
        )));
    }
    if test_set.is_empty() {
        return Err(Error::Data("test set is empty".into()));
    }
    let mut current = model.clone();
    let (test_rmse, test_r2) = test_metrics(&current, test_set)?;
    let mut records = vec![ShotRecord {
        shot_index: 0,
        sample_id: None,
        loss_before: None,
        loss_after: None,
        test_rmse,
        test_r2,
        provenance: Provenance::None,
        hint_lambda: None,
        hint_sha256: None,
        hint: None,
    }];
    if n_shots == 0 {
        return Ok(FewShotRun { records, model: current });
    }
    let order = select_shots(&current, shot_pool, cfg.shot_selection, cfg.seed)?;
    for (i, &idx) in order.iter().take(n_shots).enumerate() {
        let sample = &shot_pool[idx];
        let prediction = current.forward(sample, None)?.prediction;
        let meta = SampleMeta { run_id: sample.run_id.clone(), mode: sample.mode, prediction, target: sample.target };
        let provided = provider.provide(&HintRequest { shot_index: i + 1, sample: &meta });
        let outcome = finetune_step(&mut current, sample, provided.hint.as_ref(), cfg)?;
        let (test_rmse, test_r2) = test_metrics(&current, test_set)?;
        records.push(ShotRecord {
            shot_index: i + 1,
            sample_id: Some(sample.run_id.clone()),
            loss_before: Some(outcome.loss_before),
            loss_after: Some(outcome.loss_after),
            test_rmse,
            test_r2,
            provenance: provided.provenance,
            hint_lambda: provided.hint.as_ref().map(|h| h.lambda),
            hint_sha256: provided.hint.as_ref().map(|h| h.sha256()),
            hint: provided.hint,
        });
    }
    Ok(FewShotRun { records, model: current })
}

const SHOT_COLUMNS: [&str; 9] = [
    "shot_index",
    "sample_id",
    "loss_before",
    "loss_after",
    "test_rmse",
    "test_r2",
    "provenance",
    "hint_lambda",
    "hint_sha256",
];

pub fn write_shots_csv(path: &Path, records: &[ShotRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SHOT_COLUMNS)?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in records {
        w.write_record([
            r.shot_index.to_string(),
            r.sample_id.clone().unwrap_or_default(),
            opt(r.loss_before),
            opt(r.loss_after),
            r.test_rmse.to_string(),
            r.test_r2.to_string(),
            r.provenance.as_str().to_string(),
            opt(r.hint_lambda),
            r.hint_sha256.clone().unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a `shots.csv` back; hint matrices are not stored in it.
pub fn read_shots_csv(path: &Path) -> Result<Vec<ShotRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != SHOT_COLUMNS {
        return Err(Error::Data(format!("{}: unexpected shots.csv header {header:?}", path.display())));
    }
    let num = |s: &str, what: &str| -> Result<f64> {
        s.parse().map_err(|_| Error::Data(format!("{}: bad {what} {s:?}", path.display())))
    };
    let opt_num = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() { Ok(None) } else { num(s, what).map(Some) }
    };
    let opt_str = |s: &str| (!s.is_empty()).then(|| s.to_string());
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        out.push(ShotRecord {
            shot_index: row[0].parse().map_err(|_| Error::Data(format!("bad shot_index {:?}", &row[0])))?,
            sample_id: opt_str(&row[1]),
            loss_before: opt_num(&row[2], "loss_before")?,
            loss_after: opt_num(&row[3], "loss_after")?,
            test_rmse: num(&row[4], "test_rmse")?,
            test_r2: num(&row[5], "test_r2")?,
            provenance: Provenance::parse(&row[6])
                .ok_or_else(|| Error::Data(format!("unknown provenance {:?}", &row[6])))?,
            hint_lambda: opt_num(&row[7], "hint_lambda")?,
            hint_sha256: opt_str(&row[8]),
            hint: None,
        });
    }
    Ok(out)
}
