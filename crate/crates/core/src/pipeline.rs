//! End-to-end runs: configuration, seeds, artifact layout and report generation.
//!
//! Every stage writes its artifacts into one output directory and records their SHA-256
//! digests in `manifest.json`. Stages load earlier artifacts from disk when they are not
//! already in memory, so the CLI can run them one at a time.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{
    count_macs, load_model, save_model, train_backbone, train_exit_branch, AmcModel,
    ArchConfig, BackboneError, BackboneTrainConfig, CostProfile, ExitPoint, ExitTrainConfig,
    TrainLog,
};
use crate::criteria::{write_score_csv, CriteriaError, ScoreKind, ScoreRow};
use crate::evalrun::{
    criterion_scores, entropy_bin_table, evaluate_split, invocation_vs_recoverable,
    recovery_stats, snr_grouped_tradeoff, sweep_scores, write_bins_csv, write_budget_csv,
    write_calibration_csv, write_invocation_csv, write_min_cost_csv, write_snr_csv,
    write_summary_csv, write_tradeoff_csv, EvalError, EvalRecord, ReportHeader, SummaryRow,
    TradeoffCurve,
};
use crate::iqgen::{generate_dataset, load_dataset, save_dataset, Dataset, GenConfig, IqGenError, Split};
use crate::lbap::{
    calibration_report, lbap_overhead, lbap_samples, train_lbap, Calibration, LbapError,
    LbapModel, LbapSample, LbapTrainConfig, LbapTrainLog,
};
use crate::tensornet::{
    gradcheck, Checkpoint, ConvProbe, DenseProbe, GradCheckConfig, GradReport, Parameters,
    ResidualProbe, SoftmaxHeadProbe, TensorError,
};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("configuration parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("output directory was produced by config {found}, current config is {expected}; use a fresh --out")]
    ConfigMismatch { expected: String, found: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Data(#[from] IqGenError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Lbap(#[from] LbapError),
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl PipelineError {
    /// Process exit code for this error category.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_)
            | PipelineError::Toml(_)
            | PipelineError::ConfigMismatch { .. } => 2,
            PipelineError::Io { .. } => 3,
            PipelineError::Json(_) | PipelineError::Data(_) | PipelineError::Tensor(_) => 4,
            PipelineError::Backbone(_) | PipelineError::Lbap(_) => 5,
            PipelineError::Criteria(_) | PipelineError::Eval(_) => 6,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Budgets as fractions of the full final-exit path cost.
    pub budget_fractions: Vec<f64>,
    /// Accuracy targets as fractions of the final-exit accuracy.
    pub target_fractions: Vec<f64>,
    pub invocation_rates: Vec<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            budget_fractions: vec![0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0],
            target_fractions: vec![0.8, 0.85, 0.9, 0.95, 0.98, 1.0],
            invocation_rates: (1..=20).map(|i| i * 5).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; when set, every stage seed is derived from it.
    pub seed: Option<u64>,
    pub data: GenConfig,
    pub arch: ArchConfig,
    pub backbone: BackboneTrainConfig,
    pub exit: ExitTrainConfig,
    pub lbap: LbapTrainConfig,
    pub eval: EvalConfig,
}

fn merge_tables(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge_tables(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// First eight bytes of `SHA-256(seed_le || tag)`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunConfig {
    /// Parses a TOML config. Missing keys keep their defaults at every nesting level, so
    /// a partial `[backbone.hyper]` table keeps the backbone-specific batch size.
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let user: toml::Table = toml::from_str(text)?;
        let mut merged = toml::Table::try_from(RunConfig::default())
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        merge_tables(&mut merged, user);
        Ok(merged.try_into()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        let p = path.as_ref();
        Self::from_toml(&fs::read_to_string(p).map_err(io_err(p))?)
    }

    /// Applies the master seed to every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = self.seed {
            c.data.rng_seed = derive_seed(s, "data");
            c.backbone.hyper.rng_seed = derive_seed(s, "backbone");
            c.exit.hyper.rng_seed = derive_seed(s, "exit");
            c.lbap.hyper.rng_seed = derive_seed(s, "lbap");
        }
        c
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.data.validate()?;
        self.arch.validate()?;
        for h in [&self.backbone.hyper, &self.exit.hyper, &self.lbap.hyper] {
            h.validate()?;
        }
        if self.eval.invocation_rates.iter().any(|&r| r == 0 || r > 100) {
            return Err(PipelineError::Config("invocation rates must be in 1..=100".into()));
        }
        Ok(())
    }

    /// Hash of the resolved configuration. The exit point only selects which model a
    /// command reports on, so it is left out.
    pub fn hash(&self) -> String {
        let mut c = self.resolved();
        c.arch.exit_point = ExitPoint::Stage1;
        sha256_hex(serde_json::to_string(&c).expect("config serializes").as_bytes())
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let c = self.resolved();
        BTreeMap::from([
            ("data".to_string(), c.data.rng_seed),
            ("backbone".to_string(), c.backbone.hyper.rng_seed),
            ("exit".to_string(), c.exit.hyper.rng_seed),
            ("lbap".to_string(), c.lbap.hyper.rng_seed),
        ])
    }
}

/// File names inside the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn dataset(&self) -> PathBuf {
        self.path("dataset.bin")
    }

    pub fn manifest(&self) -> PathBuf {
        self.path("manifest.json")
    }

    pub fn model(&self, e: Option<ExitPoint>) -> (PathBuf, PathBuf) {
        let stem = match e {
            None => "backbone".to_string(),
            Some(e) => format!("model_rs{}", e.stage()),
        };
        (self.path(&format!("{stem}.ck")), self.path(&format!("{stem}.manifest")))
    }

    pub fn lbap(&self, e: ExitPoint) -> PathBuf {
        self.path(&format!("lbap_rs{}.ck", e.stage()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// File name to SHA-256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    /// Model name to parameter checksum.
    pub model_checksums: BTreeMap<String, String>,
}

pub struct Pipeline {
    cfg: RunConfig,
    layout: Layout,
    manifest: RunManifest,
    dataset: Option<Dataset>,
    backbone: Option<AmcModel>,
    models: BTreeMap<ExitPoint, AmcModel>,
    lbaps: BTreeMap<ExitPoint, LbapModel>,
    records: BTreeMap<(ExitPoint, u8), Vec<EvalRecord>>,
}

fn split_name(s: Split) -> &'static str {
    s.name()
}

impl Pipeline {
    pub fn open(cfg: &RunConfig, out: impl Into<PathBuf>) -> Result<Self, PipelineError> {
        cfg.validate()?;
        let layout = Layout::new(out);
        fs::create_dir_all(&layout.root).map_err(io_err(&layout.root))?;
        let hash = cfg.hash();
        let mpath = layout.manifest();
        let manifest = if mpath.exists() {
            let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
            let m: RunManifest = serde_json::from_str(&text)?;
            if m.config_hash != hash {
                return Err(PipelineError::ConfigMismatch {
                    expected: hash,
                    found: m.config_hash,
                });
            }
            m
        } else {
            RunManifest {
                tool: format!("beacon {}", env!("CARGO_PKG_VERSION")),
                config_hash: hash,
                seeds: cfg.seeds(),
                ..RunManifest::default()
            }
        };
        let p = Self {
            cfg: cfg.resolved(),
            layout,
            manifest,
            dataset: None,
            backbone: None,
            models: BTreeMap::new(),
            lbaps: BTreeMap::new(),
            records: BTreeMap::new(),
        };
        p.save_manifest()?;
        Ok(p)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn save_manifest(&self) -> Result<(), PipelineError> {
        let p = self.layout.manifest();
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        fs::write(&p, text).map_err(io_err(&p))
    }

    fn record_artifact(&mut self, path: &Path) -> Result<(), PipelineError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        self.manifest.artifacts.insert(name, sha256_hex(&bytes));
        self.save_manifest()
    }

    fn create(&self, name: &str) -> Result<(PathBuf, BufWriter<File>), PipelineError> {
        let p = self.layout.path(name);
        let f = File::create(&p).map_err(io_err(&p))?;
        Ok((p, BufWriter::new(f)))
    }

    /// Runs `write` into a new report file and records its digest.
    fn write_report(
        &mut self,
        name: &str,
        write: impl FnOnce(&mut BufWriter<File>) -> Result<(), PipelineError>,
    ) -> Result<PathBuf, PipelineError> {
        let (p, mut w) = self.create(name)?;
        write(&mut w)?;
        w.flush().map_err(io_err(&p))?;
        drop(w);
        self.record_artifact(&p)?;
        Ok(p)
    }

    fn header(&self, model: &str) -> ReportHeader {
        ReportHeader::new()
            .with("config_hash", &self.manifest.config_hash)
            .with(
                "seeds",
                self.manifest
                    .seeds
                    .iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(" "),
            )
            .with("model", model)
            .with(
                "protocol",
                "thresholds calibrated on the validation split, metrics on the test split",
            )
    }

    pub fn gen_data(&mut self) -> Result<&Dataset, PipelineError> {
        let d = generate_dataset(&self.cfg.data)?;
        let p = self.layout.dataset();
        save_dataset(&d, &p)?;
        self.record_artifact(&p)?;
        info!("dataset: {} frames written to {}", d.len(), p.display());
        self.records.clear();
        Ok(self.dataset.insert(d))
    }

    pub fn dataset(&mut self) -> Result<&Dataset, PipelineError> {
        if self.dataset.is_none() {
            let p = self.layout.dataset();
            if p.exists() {
                self.dataset = Some(load_dataset(&p)?);
            } else {
                self.gen_data()?;
            }
        }
        Ok(self.dataset.as_ref().expect("dataset loaded"))
    }

    fn save_model_files(&mut self, model: &AmcModel, e: Option<ExitPoint>) -> Result<(), PipelineError> {
        let (ck, mf) = self.layout.model(e);
        save_model(model, &ck, &mf)?;
        let name = match e {
            None => "backbone".to_string(),
            Some(e) => e.label().to_string(),
        };
        self.manifest.model_checksums.insert(name, model.checksum());
        self.record_artifact(&ck)?;
        self.record_artifact(&mf)
    }

    fn write_log(&mut self, name: &str, log: &TrainLog) -> Result<(), PipelineError> {
        let header = ReportHeader::new()
            .with("config_hash", &self.manifest.config_hash)
            .with("best_epoch", log.best_epoch);
        self.write_report(name, |w| {
            let mut text = String::new();
            for (k, v) in &header.entries {
                text.push_str(&format!("# {k}: {v}\n"));
            }
            text.push_str("epoch,train_loss,val_accuracy\n");
            for e in &log.epochs {
                text.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.val_accuracy));
            }
            w.write_all(text.as_bytes()).map_err(|source| PipelineError::Io {
                path: PathBuf::from(name),
                source,
            })
        })?;
        Ok(())
    }

    pub fn train_backbone(&mut self) -> Result<TrainLog, PipelineError> {
        let arch = self.cfg.arch.clone();
        let cfg = self.cfg.backbone.clone();
        let (model, log) = train_backbone(self.dataset()?, &arch, &cfg)?;
        self.save_model_files(&model, None)?;
        self.write_log("backbone_log.csv", &log)?;
        self.backbone = Some(model);
        self.models.clear();
        self.lbaps.clear();
        self.records.clear();
        Ok(log)
    }

    pub fn backbone(&mut self) -> Result<&AmcModel, PipelineError> {
        if self.backbone.is_none() {
            let (ck, mf) = self.layout.model(None);
            if ck.exists() && mf.exists() {
                self.backbone = Some(load_model(&ck, &mf)?);
            } else {
                self.train_backbone()?;
            }
        }
        Ok(self.backbone.as_ref().expect("backbone loaded"))
    }

    pub fn train_exit(&mut self, e: ExitPoint) -> Result<TrainLog, PipelineError> {
        let seed = derive_seed(self.cfg.exit.hyper.rng_seed, &format!("rs{}", e.stage()));
        let mut cfg = self.cfg.exit.clone();
        cfg.hyper.rng_seed = seed;
        let attached = self
            .backbone()?
            .with_exit_point(e, &mut ChaCha8Rng::seed_from_u64(seed));
        let (model, log) = train_exit_branch(&attached, self.dataset()?, &cfg)?;
        self.save_model_files(&model, Some(e))?;
        self.write_log(&format!("exit_log_rs{}.csv", e.stage()), &log)?;
        self.models.insert(e, model);
        self.lbaps.remove(&e);
        self.records.retain(|(k, _), _| *k != e);
        Ok(log)
    }

    pub fn model(&mut self, e: ExitPoint) -> Result<&AmcModel, PipelineError> {
        if !self.models.contains_key(&e) {
            let (ck, mf) = self.layout.model(Some(e));
            if ck.exists() && mf.exists() {
                self.models.insert(e, load_model(&ck, &mf)?);
            } else {
                self.train_exit(e)?;
            }
        }
        Ok(&self.models[&e])
    }

    /// Early-exit probabilities and recoverability labels for LBAP training.
    pub fn lbap_data(&mut self, e: ExitPoint, split: Split) -> Result<Vec<LbapSample>, PipelineError> {
        self.dataset()?;
        self.model(e)?;
        let data = lbap_samples(&self.models[&e], self.dataset.as_ref().expect("dataset"), split)?;
        Ok(data)
    }

    pub fn train_lbap(&mut self, e: ExitPoint) -> Result<LbapTrainLog, PipelineError> {
        let frozen = self.model(e)?.checksum();
        let train = self.lbap_data(e, Split::Train)?;
        let val = self.lbap_data(e, Split::Val)?;
        let mut cfg = self.cfg.lbap.clone();
        cfg.hyper.rng_seed = derive_seed(cfg.hyper.rng_seed, &format!("rs{}", e.stage()));
        let (lbap, log) = train_lbap(&train, &val, &cfg)?;
        if self.models[&e].checksum() != frozen {
            return Err(LbapError::FrozenDrift("LBAP training").into());
        }
        let p = self.layout.lbap(e);
        lbap.to_checkpoint().save(&p)?;
        self.manifest
            .model_checksums
            .insert(format!("lbap_rs{}", e.stage()), lbap.checksum());
        self.record_artifact(&p)?;
        let name = format!("lbap_log_rs{}.csv", e.stage());
        let header = self.header(e.label()).with("base_rate_val_bce", log.base_rate_val_bce);
        let log_rows = log.epochs.clone();
        self.write_report(&name, move |w| {
            let mut text = String::new();
            for (k, v) in &header.entries {
                text.push_str(&format!("# {k}: {v}\n"));
            }
            text.push_str("epoch,train_bce,val_bce\n");
            for r in &log_rows {
                text.push_str(&format!("{},{},{}\n", r.epoch, r.train_bce, r.val_bce));
            }
            w.write_all(text.as_bytes()).map_err(|source| PipelineError::Io {
                path: PathBuf::from("lbap log"),
                source,
            })
        })?;
        self.lbaps.insert(e, lbap);
        Ok(log)
    }

    pub fn lbap(&mut self, e: ExitPoint) -> Result<&LbapModel, PipelineError> {
        if !self.lbaps.contains_key(&e) {
            let p = self.layout.lbap(e);
            if p.exists() {
                self.lbaps.insert(e, LbapModel::from_checkpoint(&Checkpoint::load(&p)?)?);
            } else {
                self.train_lbap(e)?;
            }
        }
        Ok(&self.lbaps[&e])
    }

    pub fn records(&mut self, e: ExitPoint, split: Split) -> Result<&[EvalRecord], PipelineError> {
        let key = (e, split.tag());
        if !self.records.contains_key(&key) {
            self.dataset()?;
            self.model(e)?;
            let recs = evaluate_split(&self.models[&e], self.dataset.as_ref().expect("dataset"), split)?;
            self.records.insert(key, recs);
        }
        Ok(&self.records[&key])
    }

    /// Cost profile of the exit-point model, LBAP included.
    pub fn cost_profile(&mut self, e: ExitPoint) -> Result<CostProfile, PipelineError> {
        let macs = lbap_overhead(&LbapModel::zeros()).macs;
        Ok(count_macs(self.model(e)?)?.with_lbap(macs))
    }

    /// Validation and test scores of one criterion.
    pub fn scores(&mut self, e: ExitPoint, kind: ScoreKind) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
        if kind.uses_lbap() {
            self.lbap(e)?;
        }
        self.records(e, Split::Val)?;
        self.records(e, Split::Test)?;
        let lbap = self.lbaps.get(&e);
        let val = criterion_scores(kind, &self.records[&(e, Split::Val.tag())], lbap)?;
        let test = criterion_scores(kind, &self.records[&(e, Split::Test.tag())], lbap)?;
        Ok((val, test))
    }

    pub fn curves(&mut self, e: ExitPoint, kinds: &[ScoreKind]) -> Result<Vec<TradeoffCurve>, PipelineError> {
        let profile = self.cost_profile(e)?;
        let mut out = Vec::new();
        for &k in kinds {
            let (val, test) = self.scores(e, k)?;
            let recs = &self.records[&(e, Split::Test.tag())];
            out.push(sweep_scores(k, &val, &test, recs, &profile)?);
        }
        Ok(out)
    }

    pub fn report_sweep(&mut self, e: ExitPoint, kinds: &[ScoreKind]) -> Result<Vec<TradeoffCurve>, PipelineError> {
        let curves = self.curves(e, kinds)?;
        let header = self.header(e.label());
        let label = e.label();
        self.write_report(&format!("tradeoff_rs{}.csv", e.stage()), |w| {
            Ok(write_tradeoff_csv(w, &header, label, &curves)?)
        })?;
        Ok(curves)
    }

    pub fn report_bins(&mut self, e: ExitPoint) -> Result<PathBuf, PipelineError> {
        let rows = entropy_bin_table(self.records(e, Split::Test)?)?;
        let header = self.header(e.label());
        self.write_report(&format!("bins_rs{}.csv", e.stage()), |w| {
            Ok(write_bins_csv(w, &header, &rows)?)
        })
    }

    fn full_path_macs(&mut self, e: ExitPoint) -> Result<f64, PipelineError> {
        let p = self.cost_profile(e)?;
        Ok((p.exit_cost(false) + p.continuation_cost()) as f64)
    }

    pub fn report_budget(&mut self, e: ExitPoint, kinds: &[ScoreKind]) -> Result<PathBuf, PipelineError> {
        let curves = self.curves(e, kinds)?;
        let full = self.full_path_macs(e)?;
        let budgets: Vec<f64> = self.cfg.eval.budget_fractions.iter().map(|f| (f * full).round()).collect();
        let header = self.header(e.label()).with("full_path_macs", full);
        self.write_report(&format!("budget_rs{}.csv", e.stage()), |w| {
            Ok(write_budget_csv(w, &header, &budgets, &curves)?)
        })
    }

    pub fn report_min_cost(&mut self, e: ExitPoint, kinds: &[ScoreKind]) -> Result<PathBuf, PipelineError> {
        let curves = self.curves(e, kinds)?;
        let fe = recovery_stats(self.records(e, Split::Test)?)?.fe_accuracy;
        let targets: Vec<f64> = self.cfg.eval.target_fractions.iter().map(|f| f * fe).collect();
        let header = self.header(e.label()).with("fe_accuracy", fe);
        self.write_report(&format!("min_cost_rs{}.csv", e.stage()), |w| {
            Ok(write_min_cost_csv(w, &header, &targets, &curves)?)
        })
    }

    pub fn report_invocation(&mut self, e: ExitPoint, kinds: &[ScoreKind]) -> Result<PathBuf, PipelineError> {
        let rates = self.cfg.eval.invocation_rates.clone();
        let mut rows = Vec::new();
        for &k in kinds {
            let (_, test) = self.scores(e, k)?;
            let recs = &self.records[&(e, Split::Test.tag())];
            rows.push((k.name().to_string(), invocation_vs_recoverable(&test, recs, &rates)?));
        }
        let header = self.header(e.label());
        self.write_report(&format!("invocation_rs{}.csv", e.stage()), |w| {
            Ok(write_invocation_csv(w, &header, &rows)?)
        })
    }

    pub fn report_snr(&mut self, e: ExitPoint, kinds: &[ScoreKind]) -> Result<PathBuf, PipelineError> {
        let profile = self.cost_profile(e)?;
        let mut rows = Vec::new();
        for &k in kinds {
            let (val, test) = self.scores(e, k)?;
            let recs = &self.records[&(e, Split::Test.tag())];
            rows.extend(snr_grouped_tradeoff(k, &val, &test, recs, &profile)?);
        }
        let header = self.header(e.label());
        self.write_report(&format!("snr_rs{}.csv", e.stage()), |w| {
            Ok(write_snr_csv(w, &header, &rows)?)
        })
    }

    pub fn calibration(&mut self, e: ExitPoint) -> Result<Calibration, PipelineError> {
        let (_, test) = self.scores(e, ScoreKind::Beacon)?;
        let labels: Vec<_> = self.records[&(e, Split::Test.tag())]
            .iter()
            .map(EvalRecord::recov_label)
            .collect();
        Ok(calibration_report(&test, &labels)?)
    }

    pub fn report_calibration(&mut self, exits: &[ExitPoint]) -> Result<PathBuf, PipelineError> {
        let mut rows = Vec::new();
        for &e in exits {
            rows.push((e.label().to_string(), self.calibration(e)?));
        }
        let header = self.header("all");
        self.write_report("calibration.csv", |w| Ok(write_calibration_csv(w, &header, &rows)?))
    }

    pub fn report_summary(&mut self, exits: &[ExitPoint]) -> Result<PathBuf, PipelineError> {
        let mut rows = Vec::new();
        for &e in exits {
            let params = self.model(e)?.num_params();
            let s = recovery_stats(self.records(e, Split::Test)?)?;
            rows.push(SummaryRow {
                model: e.label().to_string(),
                exit_point: e.stage() as u8,
                params,
                ee_accuracy_pct: 100.0 * s.ee_accuracy,
                fe_accuracy_pct: 100.0 * s.fe_accuracy,
                p_recov_pct: 100.0 * s.p_recov,
                cond_recov_pct: s.cond_recov.map(|c| 100.0 * c),
            });
        }
        let header = self.header("all");
        self.write_report("summary.csv", |w| Ok(write_summary_csv(w, &header, &rows)?))
    }

    pub fn report_scores(&mut self, e: ExitPoint, kind: ScoreKind) -> Result<PathBuf, PipelineError> {
        let (val, test) = self.scores(e, kind)?;
        let mut rows = Vec::new();
        for (split, scores) in [(Split::Val, val), (Split::Test, test)] {
            for (r, s) in self.records[&(e, split.tag())].iter().zip(scores) {
                rows.push(ScoreRow {
                    sample_id: r.sample_id,
                    split: split_name(split).to_string(),
                    snr_db: r.snr_db,
                    label: r.label,
                    yhat_e: r.yhat_e,
                    yhat_f: r.yhat_f,
                    score_kind: kind,
                    score: s,
                });
            }
        }
        self.write_report(&format!("scores_rs{}_{}.csv", e.stage(), kind.name()), |w| {
            Ok(write_score_csv(w, &rows)?)
        })
    }

    /// Every training stage and report for the given exit points.
    pub fn run_all(&mut self, exits: &[ExitPoint]) -> Result<(), PipelineError> {
        self.gen_data()?;
        self.train_backbone()?;
        for &e in exits {
            self.train_exit(e)?;
            self.train_lbap(e)?;
        }
        self.report_summary(exits)?;
        self.report_calibration(exits)?;
        for &e in exits {
            self.report_sweep(e, &ScoreKind::ALL)?;
            self.report_bins(e)?;
            self.report_budget(e, &ScoreKind::ALL)?;
            self.report_min_cost(e, &ScoreKind::ALL)?;
            self.report_invocation(e, &ScoreKind::ALL)?;
            self.report_snr(e, &ScoreKind::ALL)?;
            for k in ScoreKind::ALL {
                self.report_scores(e, k)?;
            }
        }
        Ok(())
    }
}

/// Finite-difference checks of every layer type, the full LBAP and a small trunk.
pub fn run_gradchecks(seed: u64, instances: usize) -> Result<Vec<(String, GradReport)>, PipelineError> {
    use crate::backbone::BackboneProbe;
    use crate::lbap::LbapProbe;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GradCheckConfig {
        seed,
        ..GradCheckConfig::default()
    };
    // smaller step on the trunk: fewer ReLU kinks crossed by the perturbation
    let sampled = GradCheckConfig {
        max_params: Some(200),
        step: 1e-5,
        ..cfg.clone()
    };
    let mut out = Vec::new();
    for i in 0..instances {
        out.push((format!("dense[{i}]"), gradcheck(&DenseProbe::random(4, 3, &mut rng), &cfg)));
        let stride = 1 + i % 2;
        out.push((
            format!("conv[{i}]"),
            gradcheck(&ConvProbe::random(2, 4, 7, stride, 24, &mut rng), &cfg),
        ));
        out.push((
            format!("residual[{i}]"),
            gradcheck(&ResidualProbe::random(3, 4, 5, stride, 16, &mut rng), &cfg),
        ));
        out.push((
            format!("softmax_head[{i}]"),
            gradcheck(&SoftmaxHeadProbe::random(8, 6, 10, &mut rng), &cfg),
        ));
        out.push((format!("lbap[{i}]"), gradcheck(&LbapProbe::random(&mut rng), &cfg)));
    }
    let small = ArchConfig {
        stem_channels: 3,
        stage_widths: [3, 4, 5],
        blocks_per_stage: 1,
        stem_kernel: 7,
        block_kernel: 3,
        exit_point: ExitPoint::Stage1,
    };
    let probe = BackboneProbe::random(&small, &mut rng)?;
    out.push(("trunk".to_string(), gradcheck(&probe, &sampled)));
    Ok(out)
}
