//! Command-line surface. Every command writes its outputs and a
//! `manifest_<command>.json` under `--out`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::attribution::{diff_maps, insight, last_layer_attention, saliency, write_heatmap_png, write_matrix_csv, InsightBundle};
use crate::dataset::{load_runs, split, synthesize, write_runs, NormScheme, Partitions, SynthConfig, CHANNEL_NAMES};
use crate::error::{Error, Result};
use crate::evaluation::{bench, preston_fit, EvalReport, MeanPredictor, ModelPredictor, Predictor};
use crate::hinting::{
    ChatBackend, EndpointConfig, HeuristicProvider, HintParams, HintProvider, HttpChat, LlmProvider, NoHint,
    ProviderKind, Transcript,
};
use crate::manifest::{file_sha256, RunManifest};
use crate::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::training::{finetune_step, pretrain, run_few_shot, select_shots, write_shots_csv, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Per-channel statistics fitted on the pretraining runs.
    #[default]
    Global,
    PerSample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Share of runs used for training; the rest is the test set.
    pub train_frac: f64,
    /// Share of the training runs used for pretraining; the rest is the shot pool.
    pub pretrain_frac: f64,
    pub split_seed: u64,
    pub norm: NormKind,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_frac: 1000.0 / 1200.0, pretrain_frac: 0.15, split_seed: 0, norm: NormKind::Global }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InsightConfig {
    /// Best samples averaged into the insight.
    pub k: usize,
}

impl Default for InsightConfig {
    fn default() -> Self {
        Self { k: 5 }
    }
}

/// The `--config` file. Every section and key is optional.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub hint: HintParams,
    pub insight: InsightConfig,
    pub llm: EndpointConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?
            }
            None => RunConfig::default(),
        };
        Ok(RunConfig { llm: cfg.llm.clone().with_env_overrides(), ..cfg })
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.hint.validate()?;
        self.llm.validate()?;
        if self.insight.k == 0 {
            return Err(Error::Config("insight.k must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "patchhint", version, about = "Patch transformer regression with attention hints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed(s) the command consumes.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct HintArgs {
    /// none | heuristic | llm | replay:<dir>
    #[arg(long, default_value = "heuristic")]
    pub provider: String,
    /// Hint weight λ.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Comma-separated encoder layers receiving the hint, or `all`.
    #[arg(long)]
    pub hint_layers: Option<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic runs into `<out>/runs.csv`.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain on the pretraining split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Few-shot fine-tuning from a checkpoint.
    Fewshot {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 5)]
        shots: usize,
        #[command(flatten)]
        hint: HintArgs,
    },
    /// Test-set metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Insight maps, saliency and before/after diffs of a one-shot update.
    Explain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Overrides `insight.k`.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        hint_layers: Option<String>,
    },
    /// Checkpoints against the Preston and mean baselines on the test split.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Repeatable.
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
}

/// One-line JSON error for stderr.
pub fn error_line(kind: &str, message: &str) -> String {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({"error": {"kind": kind, "message": one_line}}).to_string()
}

fn parse_hint_layers(spec: &str) -> Result<Option<Vec<usize>>> {
    if spec.trim() == "all" {
        return Ok(None);
    }
    spec.split(',')
        .map(|s| {
            s.trim().parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad --hint-layers entry {s:?}")))
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

struct Session {
    out: PathBuf,
    manifest: RunManifest,
    written: Vec<String>,
    start: Instant,
}

impl Session {
    fn new(command: &str, common: &Common, cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        let mut manifest = RunManifest::new(command, serde_json::to_value(cfg)?);
        if let Some(p) = &common.config {
            manifest.add_input(p)?;
        }
        Ok(Self { out: common.out.clone(), manifest, written: Vec::new(), start: Instant::now() })
    }

    fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.out.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.written.push(rel.to_string());
        Ok(p)
    }

    fn matrix(&mut self, stem: &str, m: &Tensor<f64>) -> Result<()> {
        write_matrix_csv(&self.path(&format!("{stem}.csv"))?, m)?;
        write_heatmap_png(&self.path(&format!("{stem}.png"))?, m)
    }

    fn option(&mut self, key: &str, value: impl ToString) {
        self.manifest.options.insert(key.into(), value.to_string());
    }

    fn finish(mut self) -> Result<RunManifest> {
        self.written.sort();
        self.written.dedup();
        for rel in std::mem::take(&mut self.written) {
            self.manifest.add_output(&self.out, &rel)?;
        }
        self.manifest.wall_time_secs = self.start.elapsed().as_secs_f64();
        self.manifest.write(&self.out)?;
        Ok(self.manifest)
    }
}

fn load_split(path: &Path, cfg: &DataConfig, session: &mut Session) -> Result<Partitions> {
    session.manifest.add_input(path)?;
    session.manifest.seeds.insert("data.split_seed".into(), cfg.split_seed);
    let runs = load_runs(path)?;
    split(runs, cfg.train_frac, cfg.pretrain_frac, cfg.split_seed)
}

fn load_model(path: &Path, session: &mut Session) -> Result<(Model<f64>, String)> {
    session.manifest.add_input(path)?;
    let hash = file_sha256(path)?;
    Ok((load_checkpoint(path)?, hash))
}

fn apply_hint_overrides(model: &mut Model<f64>, params: &mut HintParams, lambda: Option<f64>, layers: Option<&str>) -> Result<()> {
    if let Some(l) = lambda {
        params.lambda = l;
    }
    params.validate()?;
    if let Some(spec) = layers {
        model.config.hint_layers = parse_hint_layers(spec)?;
        model.config.validate()?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> Result<RunManifest>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    execute(cli.command)
}

pub fn execute(command: Command) -> Result<RunManifest> {
    match command {
        Command::Synth { common } => cmd_synth(&common),
        Command::Pretrain { common, data } => cmd_pretrain(&common, &data),
        Command::Fewshot { common, data, checkpoint, shots, hint } => cmd_fewshot(&common, &data, &checkpoint, shots, &hint),
        Command::Eval { common, data, checkpoint } => cmd_eval(&common, &data, &checkpoint),
        Command::Explain { common, data, checkpoint, k, lambda, hint_layers } => {
            cmd_explain(&common, &data, &checkpoint, k, lambda, hint_layers.as_deref())
        }
        Command::Bench { common, data, checkpoint } => cmd_bench(&common, &data, &checkpoint),
    }
}

fn config(common: &Common) -> Result<RunConfig> {
    let cfg = RunConfig::load(common.config.as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn cmd_synth(common: &Common) -> Result<RunManifest> {
    let mut cfg = config(common)?;
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
    }
    let mut session = Session::new("synth", common, &cfg)?;
    session.manifest.seeds.insert("synth.seed".into(), cfg.synth.seed);
    let runs = synthesize(&cfg.synth)?;
    write_runs(&session.path("runs.csv")?, &runs, &CHANNEL_NAMES)?;
    session.manifest.metrics.insert("runs".into(), runs.len() as f64);
    session.finish()
}

pub fn cmd_pretrain(common: &Common, data: &Path) -> Result<RunManifest> {
    let mut cfg = config(common)?;
    if let Some(s) = common.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    let mut session = Session::new("pretrain", common, &cfg)?;
    session.manifest.seeds.insert("model.seed".into(), cfg.model.seed);
    session.manifest.seeds.insert("train.seed".into(), cfg.train.seed);
    let parts = load_split(data, &cfg.data, &mut session)?;
    let mut model = Model::<f64>::new(cfg.model.clone())?;
    model.standardization.input = match cfg.data.norm {
        NormKind::Global => NormScheme::fit_global(&parts.pretrain, cfg.model.seq_len)?,
        NormKind::PerSample => NormScheme::PerSample,
    };
    let set = model.prepare(&parts.pretrain)?;
    let report = pretrain(&mut model, &set, &cfg.train)?;
    save_checkpoint(&model, &session.path("model.ckpt")?)?;

    let mut w = csv::Writer::from_path(session.path("history.csv")?)?;
    w.write_record(["epoch", "train_loss", "val_loss"])?;
    for e in &report.history {
        w.write_record([e.epoch.to_string(), e.train.to_string(), e.val.map(|v| v.to_string()).unwrap_or_default()])?;
    }
    w.flush().map_err(|e| Error::io(&session.out, e))?;

    let m = &mut session.manifest.metrics;
    m.insert("pretrain_runs".into(), set.len() as f64);
    m.insert("epochs".into(), report.history.len() as f64);
    m.insert("best_epoch".into(), report.best_epoch as f64);
    if let Some(v) = report.history[report.best_epoch].val {
        m.insert("best_val_loss".into(), v);
    }
    m.insert("final_train_loss".into(), report.history.last().map_or(f64::NAN, |e| e.train));
    session.finish()
}

fn build_provider(
    kind: &ProviderKind,
    model: &Model<f64>,
    pretrain_runs: &[crate::dataset::WaferRun],
    cfg: &RunConfig,
    params: &HintParams,
    out: &Path,
) -> Result<Box<dyn HintProvider>> {
    if *kind == ProviderKind::None {
        return Ok(Box::new(NoHint));
    }
    let bundle = insight(model, &model.prepare(pretrain_runs)?, cfg.insight.k)?;
    Ok(match kind {
        ProviderKind::None => unreachable!(),
        ProviderKind::Heuristic => Box::new(HeuristicProvider::new(&bundle, params)?),
        ProviderKind::Llm => {
            let mut endpoint = cfg.llm.clone();
            endpoint.cache_dir = Some(match &endpoint.cache_dir {
                Some(d) if d.is_absolute() => d.clone(),
                Some(d) => out.join(d),
                None => out.join("transcripts"),
            });
            let backend = ChatBackend::Http(HttpChat::new(endpoint)?);
            Box::new(LlmProvider::new(bundle, params.clone(), model.config.clone(), backend)?)
        }
        ProviderKind::Replay(dir) => {
            let backend = ChatBackend::Replay { dir: dir.clone(), model_name: cfg.llm.model_name.clone() };
            Box::new(LlmProvider::new(bundle, params.clone(), model.config.clone(), backend)?)
        }
    })
}

pub fn cmd_fewshot(common: &Common, data: &Path, checkpoint: &Path, shots: usize, hint: &HintArgs) -> Result<RunManifest> {
    let mut cfg = config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    let kind: ProviderKind = hint.provider.parse()?;
    let mut session = Session::new("fewshot", common, &cfg)?;
    session.manifest.seeds.insert("train.seed".into(), cfg.train.seed);
    session.option("provider", &hint.provider);
    session.option("shots", shots);
    let parts = load_split(data, &cfg.data, &mut session)?;
    let (mut model, _) = load_model(checkpoint, &mut session)?;
    let mut params = cfg.hint.clone();
    apply_hint_overrides(&mut model, &mut params, hint.lambda, hint.hint_layers.as_deref())?;
    session.option("hint.lambda", params.lambda);
    session.option("hint_layers", format!("{:?}", model.config.hint_layers));

    let mut provider = build_provider(&kind, &model, &parts.pretrain, &cfg, &params, &session.out)?;
    let pool = model.prepare(&parts.shot_pool)?;
    let test = model.prepare(&parts.test)?;
    let run = run_few_shot(&model, &pool, &test, shots, provider.as_mut(), &cfg.train);
    // transcripts are worth keeping even if fine-tuning failed
    let transcripts = collect_transcripts(provider.as_ref());
    drop(provider);
    let run = run?;

    write_shots_csv(&session.path("shots.csv")?, &run.records)?;
    for r in &run.records {
        if let Some(h) = &r.hint {
            write_matrix_csv(&session.path(&format!("hints/shot_{}.csv", r.shot_index))?, &h.matrix)?;
        }
    }
    if !transcripts.is_empty() {
        let lines: Vec<String> = transcripts.iter().map(serde_json::to_string).collect::<std::result::Result<_, _>>()?;
        let path = session.path("transcripts.jsonl")?;
        std::fs::write(&path, lines.join("\n") + "\n").map_err(|e| Error::io(&path, e))?;
    }
    if matches!(kind, ProviderKind::Llm) {
        let dir = session.out.join("transcripts");
        if let Ok(entries) = std::fs::read_dir(&dir) {
            for e in entries.flatten() {
                let name = e.file_name().to_string_lossy().into_owned();
                if name.ends_with(".json") {
                    session.written.push(format!("transcripts/{name}"));
                }
            }
        }
    }
    save_checkpoint(&run.model, &session.path("finetuned.ckpt")?)?;
    let m = &mut session.manifest.metrics;
    let first = &run.records[0];
    let last = run.records.last().expect("record 0 always exists");
    m.insert("shots".into(), (run.records.len() - 1) as f64);
    m.insert("test_rmse_0shot".into(), first.test_rmse);
    m.insert("test_r2_0shot".into(), first.test_r2);
    m.insert("test_rmse_final".into(), last.test_rmse);
    m.insert("test_r2_final".into(), last.test_r2);
    session.finish()
}

/// `LlmProvider` keeps its transcripts; other providers have none.
fn collect_transcripts(provider: &dyn HintProvider) -> Vec<Transcript> {
    provider.transcripts().to_vec()
}

fn eval_report(predictors: &[&dyn Predictor], runs: &[crate::dataset::WaferRun], hashes: BTreeMap<String, String>) -> Result<EvalReport> {
    let mut report = bench(predictors, runs)?;
    report.config_hashes = hashes;
    Ok(report)
}

fn report_metrics(session: &mut Session, report: &EvalReport) {
    for row in report.rows.iter().filter(|r| r.mode == "all") {
        session.manifest.metrics.insert(format!("{}.rmse", row.model), row.rmse);
        if let Some(r2) = row.r2 {
            session.manifest.metrics.insert(format!("{}.r2", row.model), r2);
        }
    }
}

fn write_report(session: &mut Session, report: &EvalReport) -> Result<()> {
    session.path("report.json")?;
    session.path("report.csv")?;
    report.write(&session.out)
}

pub fn cmd_eval(common: &Common, data: &Path, checkpoint: &Path) -> Result<RunManifest> {
    let cfg = config(common)?;
    let mut session = Session::new("eval", common, &cfg)?;
    let parts = load_split(data, &cfg.data, &mut session)?;
    let (model, hash) = load_model(checkpoint, &mut session)?;
    let p = ModelPredictor { label: "model".into(), model: &model };
    let report = eval_report(&[&p], &parts.test, BTreeMap::from([("model".to_string(), hash)]))?;
    write_report(&mut session, &report)?;
    report_metrics(&mut session, &report);
    session.finish()
}

pub fn cmd_bench(common: &Common, data: &Path, checkpoints: &[PathBuf]) -> Result<RunManifest> {
    let cfg = config(common)?;
    let mut session = Session::new("bench", common, &cfg)?;
    let parts = load_split(data, &cfg.data, &mut session)?;
    let mut models = Vec::new();
    let mut hashes = BTreeMap::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let (model, hash) = load_model(path, &mut session)?;
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut label = format!("{}:{stem}", i);
        if checkpoints.len() == 1 {
            label = stem;
        }
        hashes.insert(label.clone(), hash);
        models.push((label, model));
    }
    let preston = preston_fit(&parts.pretrain)?;
    let mean = MeanPredictor::fit(&parts.pretrain)?;
    session.manifest.metrics.insert("preston.k".into(), preston.k);
    let wrapped: Vec<ModelPredictor<'_>> =
        models.iter().map(|(label, model)| ModelPredictor { label: label.clone(), model }).collect();
    let mut predictors: Vec<&dyn Predictor> = vec![&preston, &mean];
    predictors.extend(wrapped.iter().map(|p| p as &dyn Predictor));
    let report = eval_report(&predictors, &parts.test, hashes)?;
    write_report(&mut session, &report)?;
    report_metrics(&mut session, &report);
    session.finish()
}

fn write_insight(session: &mut Session, bundle: &InsightBundle, ckpt_hash: &str) -> Result<()> {
    session.matrix("insight/attention", &bundle.attention)?;
    session.matrix("insight/saliency", &bundle.saliency)?;
    let features: Vec<serde_json::Value> = bundle
        .top_features
        .iter()
        .map(|&c| {
            serde_json::json!({
                "channel": c,
                "name": CHANNEL_NAMES.get(c).copied().unwrap_or("unknown"),
                "mass": bundle.feature_mass[c],
            })
        })
        .collect();
    let doc = serde_json::json!({
        "checkpoint_sha256": ckpt_hash,
        "layer": bundle.layer,
        "aggregation": "mean over samples, heads and channels",
        "sample_ids": bundle.sample_ids,
        "top_patches": bundle.top_patches,
        "patch_mass": bundle.patch_mass,
        "top_features": features,
        "top_timesteps": bundle.top_timesteps.iter().take(20).collect::<Vec<_>>(),
    });
    let path = session.path("insight/insight.json")?;
    std::fs::write(&path, serde_json::to_string_pretty(&doc)? + "\n").map_err(|e| Error::io(&path, e))
}

pub fn cmd_explain(
    common: &Common,
    data: &Path,
    checkpoint: &Path,
    k: Option<usize>,
    lambda: Option<f64>,
    hint_layers: Option<&str>,
) -> Result<RunManifest> {
    let mut cfg = config(common)?;
    if let Some(s) = common.seed {
        cfg.train.seed = s;
    }
    if let Some(k) = k {
        cfg.insight.k = k;
    }
    cfg.validate()?;
    let mut session = Session::new("explain", common, &cfg)?;
    session.manifest.seeds.insert("train.seed".into(), cfg.train.seed);
    let parts = load_split(data, &cfg.data, &mut session)?;
    let (mut model, hash) = load_model(checkpoint, &mut session)?;
    let mut params = cfg.hint.clone();
    apply_hint_overrides(&mut model, &mut params, lambda, hint_layers)?;
    let tag = &hash[..12];

    let pretrain_set = model.prepare(&parts.pretrain)?;
    let bundle = insight(&model, &pretrain_set, cfg.insight.k)?;
    write_insight(&mut session, &bundle, &hash)?;

    // one heuristic-hinted shot, for the before/after comparison
    let pool = model.prepare(&parts.shot_pool)?;
    let order = select_shots(&model, &pool, cfg.train.shot_selection, cfg.train.seed)?;
    let shot = &pool[*order.first().ok_or_else(|| Error::Data("shot pool is empty".into()))?];
    let mut provider = HeuristicProvider::new(&bundle, &params)?;
    let mut after = model.clone();
    let meta = crate::hinting::SampleMeta {
        run_id: shot.run_id.clone(),
        mode: shot.mode,
        prediction: model.forward(shot, None)?.prediction,
        target: shot.target,
    };
    let hint = provider.provide(&crate::hinting::HintRequest { shot_index: 1, sample: &meta }).hint;
    let outcome = finetune_step(&mut after, shot, hint.as_ref(), &cfg.train)?;
    session.option("shot_sample", &shot.run_id);
    session.manifest.metrics.insert("shot.loss_before".into(), outcome.loss_before);
    session.manifest.metrics.insert("shot.loss_after".into(), outcome.loss_after);

    for id in &bundle.sample_ids {
        let sample = pretrain_set.iter().find(|s| &s.run_id == id).expect("insight ids come from the set");
        let name = format!("{tag}_{}", sanitize(id));
        let att_before = last_layer_attention(&model, sample)?;
        let sal_before = saliency(&model, sample)?.values;
        let att_after = last_layer_attention(&after, sample)?;
        let sal_after = saliency(&after, sample)?.values;
        session.matrix(&format!("samples/attention_{name}"), &att_before)?;
        session.matrix(&format!("samples/saliency_{name}"), &sal_before)?;
        session.matrix(&format!("diff/attention_{name}"), &diff_maps(&att_before, &att_after)?)?;
        session.matrix(&format!("diff/saliency_{name}"), &diff_maps(&sal_before, &sal_after)?)?;
    }
    session.manifest.metrics.insert("k".into(), bundle.sample_ids.len() as f64);
    session.finish()
}
