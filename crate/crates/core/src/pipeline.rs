//! End-to-end orchestration: configuration, persisted stages and the manifest.
//!
//! Stage order: sparse fit on `R`, sparse-to-dense augmentation, dense training
//! on `R^`, dense-to-sparse augmentation and sparse refit on `R'`, then weight
//! search, fused evaluation and margin SNR. Every stage writes its artifacts
//! under the output directory and records their SHA-256 in `manifest.json`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{augment_dense_input, d2s_augment, realign_sparse, s2d_with_config, AlignConfig};
use crate::data::{degrees, load_dataset, load_with_holdout, popularity_buckets, Dataset, Format, LoadOptions, PopularityBuckets};
use crate::dense::{train_mf_monitored, MfConfig};
use crate::error::{Error, Result};
use crate::eval::{beta_search, evaluate, fused, margin_moments, BetaSearch, FusionConfig, MetricsReport, SnrReport};
use crate::matrix::{EmbeddingTable, InteractionMatrix, Provenance, SimilarityMatrix};
use crate::scoring::{DenseScorer, SparseScorer};
use crate::sparse::{fit_slim, SlimConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train: PathBuf,
    pub test: PathBuf,
    pub validation: Option<PathBuf>,
    pub format: Format,
    pub rating_threshold: Option<f64>,
    /// When set, `train` holds every interaction and this share of each
    /// user's row is held out as the test split; `test` is ignored.
    pub holdout: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: PathBuf::from("train.txt"),
            test: PathBuf::from("test.txt"),
            validation: None,
            format: Format::Adjacency,
            rating_threshold: None,
            holdout: None,
        }
    }
}

/// Alignment switches; both off gives the unaligned fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageToggles {
    pub s2d: bool,
    pub d2s: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        StageToggles { s2d: true, d2s: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    /// Cutoff of the recall used for weight search and early stopping.
    pub tune_k: usize,
    /// Negatives drawn per test positive for SNR estimation.
    pub k_neg: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            ks: vec![20],
            tune_k: 20,
            k_neg: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Seeds dense initialization, negative sampling and SNR sampling.
    /// Overwrites `dense.seed`.
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub sparse: SlimConfig,
    pub dense: MfConfig,
    pub align: AlignConfig,
    pub stages: StageToggles,
    pub fusion: FusionConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 2024,
            threads: 0,
            out_dir: PathBuf::from("run"),
            data: DataConfig::default(),
            sparse: SlimConfig::default(),
            dense: MfConfig::default(),
            align: AlignConfig::default(),
            stages: StageToggles::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `a.b.c=value`; the value is read as a TOML literal, falling back to a string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match slot {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{key}`: `{p}` is not a section"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl PipelineConfig {
    /// Parses TOML text, applies overrides, and resolves relative paths against `base`.
    pub fn from_toml_str(text: &str, base: &Path, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.data.train);
        resolve(&mut cfg.data.test);
        if let Some(v) = cfg.data.validation.as_mut() {
            resolve(v);
        }
        resolve(&mut cfg.out_dir);
        cfg.dense.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&text, base, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.sparse.validate()?;
        self.dense.validate()?;
        self.align.validate()?;
        self.fusion.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) || self.eval.tune_k == 0 {
            return Err(Error::Config("eval.ks and eval.tune_k must be positive".into()));
        }
        if self.eval.k_neg < 2 {
            return Err(Error::Config("eval.k_neg must be at least 2".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// SHA-256 of the canonical JSON encoding, ignoring the output directory
    /// and thread count, which do not affect results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.threads = 0;
        sha256_hex(serde_json::to_string(&c).expect("configuration serializes").as_bytes())
    }

    pub fn weights(&self) -> Vec<f64> {
        if self.fusion.beta_search.is_empty() {
            vec![self.fusion.beta]
        } else {
            self.fusion.beta_search.clone()
        }
    }
}

/// Sets the global worker pool size once per process; 0 keeps the default.
pub fn configure_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let mut h = Sha256::new();
    let mut f = File::open(path)?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Sparse,
    S2d,
    Dense,
    D2s,
    Fuse,
    Snr,
}

impl Stage {
    pub const ALL: [Stage; 6] = [Stage::Sparse, Stage::S2d, Stage::Dense, Stage::D2s, Stage::Fuse, Stage::Snr];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Sparse => "sparse",
            Stage::S2d => "s2d",
            Stage::Dense => "dense",
            Stage::D2s => "d2s",
            Stage::Fuse => "fuse",
            Stage::Snr => "snr",
        }
    }

    /// Subcommand that produces this stage's artifacts.
    pub fn producer(self) -> &'static str {
        match self {
            Stage::Sparse => "train-sparse",
            Stage::S2d => "align-s2d",
            Stage::Dense => "train-dense",
            Stage::D2s => "align-d2s",
            Stage::Fuse => "fuse-eval",
            Stage::Snr => "snr-report",
        }
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s || st.producer() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}` (expected sparse|s2d|dense|d2s|fuse|snr)")))
    }
}

pub const PIPELINE_STAGES: usize = Stage::ALL.len();

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Artifact path relative to the output directory -> SHA-256.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

/// Output directory layout.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn create(root: &Path) -> Result<Self> {
        for sub in ["data", "sparse", "s2d", "dense", "d2s", "eval"] {
            fs::create_dir_all(root.join(sub))?;
        }
        let probe = root.join(".write-probe");
        File::create(&probe).map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", root.display())))?;
        fs::remove_file(probe)?;
        Ok(Workspace { root: root.to_path_buf() })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.json")
    }

    pub fn read_manifest(&self) -> Result<Manifest> {
        let p = self.manifest_path();
        if !p.exists() {
            return Ok(Manifest::default());
        }
        let text = fs::read_to_string(&p)?;
        serde_json::from_str(&text).map_err(|e| Error::Artifact { path: p, msg: e.to_string() })
    }

    fn record(&self, cfg: &PipelineConfig, stage: Stage, files: &[&str]) -> Result<()> {
        let mut m = self.read_manifest()?;
        let hash = cfg.hash();
        if !m.config_hash.is_empty() && m.config_hash != hash {
            warn!("configuration changed since the last recorded stage; manifest hash updated");
        }
        m.config_hash = hash.clone();
        m.seed = cfg.seed;
        let mut rec = StageRecord {
            config_hash: hash,
            files: BTreeMap::new(),
        };
        for f in files {
            rec.files.insert(f.to_string(), file_sha256(&self.path(f))?);
        }
        m.stages.insert(stage.name().to_string(), rec);
        let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
        fs::write(self.manifest_path(), text + "\n")?;
        fs::write(self.path("config.toml"), cfg.to_toml())?;
        Ok(())
    }

    fn require(&self, rel: &str, stage: Stage) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact {
                path: p,
                producer: stage.producer(),
            })
        }
    }

    pub fn write_matrix(&self, rel: &str, r: &InteractionMatrix) -> Result<()> {
        r.write_triplets(BufWriter::new(File::create(self.path(rel))?))
    }

    pub fn read_matrix(&self, rel: &str, stage: Stage) -> Result<InteractionMatrix> {
        let p = self.require(rel, stage)?;
        InteractionMatrix::read_triplets(BufReader::new(File::open(&p)?), &p)
    }

    pub fn write_similarity(&self, rel: &str, s: &SimilarityMatrix) -> Result<()> {
        s.write_binary(BufWriter::new(File::create(self.path(rel))?))
    }

    pub fn read_similarity(&self, rel: &str, stage: Stage) -> Result<SimilarityMatrix> {
        let p = self.require(rel, stage)?;
        SimilarityMatrix::read_binary(BufReader::new(File::open(&p)?), &p)
    }

    pub fn write_embeddings(&self, rel: &str, e: &EmbeddingTable) -> Result<()> {
        e.write_binary(BufWriter::new(File::create(self.path(rel))?))
    }

    pub fn read_embeddings(&self, rel: &str, stage: Stage) -> Result<EmbeddingTable> {
        let p = self.require(rel, stage)?;
        EmbeddingTable::read_binary(BufReader::new(File::open(&p)?), &p)
    }
}

pub const TRAIN: &str = "data/train.tsv";
pub const SIMILARITY: &str = "sparse/similarity.bin";
pub const PSEUDO: &str = "s2d/pseudo.tsv";
pub const R_HAT: &str = "s2d/r_hat.tsv";
pub const EMBEDDINGS: &str = "dense/embeddings.bin";
pub const LOSSES: &str = "dense/losses.tsv";
pub const R_PRIME: &str = "d2s/r_prime.tsv";
pub const SIMILARITY_PRIME: &str = "d2s/similarity.bin";
pub const BETA_CURVE: &str = "eval/beta_curve.tsv";
pub const METRICS_KV: &str = "eval/metrics.txt";
pub const METRICS_TSV: &str = "eval/metrics.tsv";
pub const REPORT: &str = "eval/report.json";
pub const SNR_KV: &str = "eval/snr.txt";
pub const SNR_TSV: &str = "eval/snr.tsv";

fn stage_err<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage.name()))
}

pub fn load_data(cfg: &PipelineConfig) -> Result<Dataset> {
    let opts = LoadOptions {
        format: cfg.data.format,
        rating_threshold: cfg.data.rating_threshold,
    };
    match cfg.data.holdout {
        Some(frac) => load_with_holdout(&cfg.data.train, &opts, frac, cfg.seed),
        None => load_dataset(&cfg.data.train, &cfg.data.test, cfg.data.validation.as_deref(), &opts),
    }
}

/// Items hidden from test-time ranking: training items, plus validation items when present.
pub fn test_mask(ds: &Dataset) -> Result<InteractionMatrix> {
    match &ds.validation {
        Some(v) => ds.train.or_merge(v),
        None => Ok(ds.train.clone()),
    }
}

/// Trains the dense view on `r_hat`, early-stopping on validation recall when a
/// validation split exists. Parameters are rounded to the stored precision.
pub fn train_dense_view(cfg: &PipelineConfig, ds: &Dataset, r_hat: &InteractionMatrix) -> Result<(EmbeddingTable, Vec<f64>)> {
    let d = degrees(&drop_zero_weights(r_hat)?);
    let buckets = popularity_buckets(&ds.train);
    let k = cfg.eval.tune_k;
    let outcome = match &ds.validation {
        Some(valid) => train_mf_monitored(r_hat, &cfg.dense, &d, |_, table| {
            let scorer = DenseScorer { table };
            evaluate("validation", &scorer, &ds.train, valid, &buckets, &[k])
                .ok()
                .and_then(|r| r.recall_at(k))
        })?,
        None => train_mf_monitored(r_hat, &cfg.dense, &d, |_, _| None)?,
    };
    if let Some(e) = outcome.best_epoch {
        info!("dense view: kept epoch {e} (validation recall@{k} {:.5})", outcome.best_metric.unwrap_or(0.0));
    }
    let mut table = outcome.table;
    table.round_to_f32();
    Ok((table, outcome.epoch_losses))
}

fn drop_zero_weights(r: &InteractionMatrix) -> Result<InteractionMatrix> {
    let kept: Vec<_> = r.entries().filter(|e| e.weight > 0.0).collect();
    InteractionMatrix::from_entries(r.n_users(), r.n_items(), kept)
}

/// Persisted summary of the fusion stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuseReport {
    pub beta: f64,
    /// `(beta, tuning recall)` pairs in search order.
    pub curve: Vec<(f64, f64)>,
    /// Fused, dense-only and sparse-only metrics on the test split.
    pub views: Vec<MetricsReport>,
}

/// Expands `key=v1,v2,...` axes into the cartesian product of `key=value` overrides.
pub fn grid_assignments(axes: &[String]) -> Result<Vec<Vec<String>>> {
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        let (key, values) = axis
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis `{axis}` is not key=v1,v2,...")))?;
        let values: Vec<&str> = values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("grid axis `{key}` has no values")));
        }
        combos = combos
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(format!("{}={v}", key.trim()));
                    c
                })
            })
            .collect();
    }
    Ok(combos)
}

/// Outputs held in memory between stages.
#[derive(Clone, Debug, Default)]
pub struct RunState {
    pub similarity: Option<SimilarityMatrix>,
    pub r_hat: Option<InteractionMatrix>,
    pub embeddings: Option<EmbeddingTable>,
    pub r_prime: Option<InteractionMatrix>,
    pub similarity_prime: Option<SimilarityMatrix>,
    pub search: Option<BetaSearch>,
    pub metrics: Vec<MetricsReport>,
    pub snr: Option<SnrReport>,
}

/// Runs stages `from..=to`; earlier outputs are loaded from the workspace.
pub struct Pipeline<'a> {
    pub cfg: &'a PipelineConfig,
    pub ds: &'a Dataset,
    pub ws: Workspace,
    pub buckets: PopularityBuckets,
    pub state: RunState,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a PipelineConfig, ds: &'a Dataset) -> Result<Self> {
        let ws = Workspace::create(&cfg.out_dir)?;
        ds.write_id_maps(&ws.path("data"))?;
        ws.write_matrix(TRAIN, &ds.train)?;
        Ok(Pipeline {
            cfg,
            ds,
            ws,
            buckets: popularity_buckets(&ds.train),
            state: RunState::default(),
        })
    }

    pub fn run(&mut self, from: Stage, to: Stage) -> Result<()> {
        for st in Stage::ALL.into_iter().filter(|s| *s >= from && *s <= to) {
            let start = Instant::now();
            stage_err(st, self.run_stage(st))?;
            info!("stage {} finished in {:.1}s", st.name(), start.elapsed().as_secs_f64());
        }
        Ok(())
    }

    fn similarity(&mut self) -> Result<SimilarityMatrix> {
        match &self.state.similarity {
            Some(s) => Ok(s.clone()),
            None => self.ws.read_similarity(SIMILARITY, Stage::Sparse),
        }
    }

    fn r_hat(&mut self) -> Result<InteractionMatrix> {
        match &self.state.r_hat {
            Some(r) => Ok(r.clone()),
            None => self.ws.read_matrix(R_HAT, Stage::S2d),
        }
    }

    fn embeddings(&mut self) -> Result<EmbeddingTable> {
        match &self.state.embeddings {
            Some(e) => Ok(e.clone()),
            None => self.ws.read_embeddings(EMBEDDINGS, Stage::Dense),
        }
    }

    fn sparse_final(&mut self) -> Result<(InteractionMatrix, SimilarityMatrix)> {
        let r = match &self.state.r_prime {
            Some(r) => r.clone(),
            None => self.ws.read_matrix(R_PRIME, Stage::D2s)?,
        };
        let s = match &self.state.similarity_prime {
            Some(s) => s.clone(),
            None => self.ws.read_similarity(SIMILARITY_PRIME, Stage::D2s)?,
        };
        Ok((r, s))
    }

    fn beta(&mut self) -> Result<f64> {
        if let Some(s) = &self.state.search {
            return Ok(s.best_beta);
        }
        let p = self.ws.require(BETA_CURVE, Stage::Fuse)?;
        let text = fs::read_to_string(&p)?;
        text.lines()
            .find_map(|l| l.strip_prefix("# best_beta="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or(Error::Artifact {
                path: p,
                msg: "no best_beta line".into(),
            })
    }

    fn run_stage(&mut self, st: Stage) -> Result<()> {
        let (cfg, ds) = (self.cfg, self.ds);
        match st {
            Stage::Sparse => {
                let s = fit_slim(&ds.train, &cfg.sparse)?;
                info!("sparse view: {} nonzeros over {} items", s.nnz(), s.n_items());
                self.ws.write_similarity(SIMILARITY, &s)?;
                self.ws.record(cfg, st, &[SIMILARITY])?;
                self.state.similarity = Some(s);
            }
            Stage::S2d => {
                let r_star = if cfg.stages.s2d {
                    let s = self.similarity()?;
                    let scorer = SparseScorer { input: &ds.train, sim: &s };
                    let (r_star, (ku, ki)) = s2d_with_config(&scorer, &ds.train, &cfg.align)?;
                    info!("sparse-to-dense: {} pseudo-positives (k_user={ku}, k_item={ki})", r_star.nnz());
                    r_star
                } else {
                    InteractionMatrix::empty(ds.n_users(), ds.n_items())
                };
                let r_hat = augment_dense_input(&ds.train, &r_star, cfg.align.lambda_conf)?;
                self.ws.write_matrix(PSEUDO, &r_star)?;
                self.ws.write_matrix(R_HAT, &r_hat)?;
                self.ws.record(cfg, st, &[PSEUDO, R_HAT])?;
                self.state.r_hat = Some(r_hat);
            }
            Stage::Dense => {
                let r_hat = self.r_hat()?;
                let (table, losses) = train_dense_view(cfg, ds, &r_hat)?;
                self.ws.write_embeddings(EMBEDDINGS, &table)?;
                let mut text = String::from("epoch\tloss\n");
                for (e, l) in losses.iter().enumerate() {
                    let _ = writeln!(text, "{}\t{l:.6}", e + 1);
                }
                fs::write(self.ws.path(LOSSES), text)?;
                self.ws.record(cfg, st, &[EMBEDDINGS, LOSSES])?;
                self.state.embeddings = Some(table);
            }
            Stage::D2s => {
                let (r_prime, s_prime) = if cfg.stages.d2s && cfg.align.k_d2s > 0 {
                    let table = self.embeddings()?;
                    let r_prime = d2s_augment(&DenseScorer { table: &table }, &ds.train, cfg.align.k_d2s)?;
                    info!(
                        "dense-to-sparse: {} merged entries",
                        r_prime.count_provenance(Provenance::PseudoD2s)
                    );
                    let s_prime = realign_sparse(&r_prime, &cfg.sparse)?;
                    (r_prime, s_prime)
                } else {
                    (ds.train.clone(), self.similarity()?)
                };
                self.ws.write_matrix(R_PRIME, &r_prime)?;
                self.ws.write_similarity(SIMILARITY_PRIME, &s_prime)?;
                self.ws.record(cfg, st, &[R_PRIME, SIMILARITY_PRIME])?;
                self.state.r_prime = Some(r_prime);
                self.state.similarity_prime = Some(s_prime);
            }
            Stage::Fuse => {
                let table = self.embeddings()?;
                let (r_prime, s_prime) = self.sparse_final()?;
                let dense = DenseScorer { table: &table };
                let sparse = SparseScorer {
                    input: &r_prime,
                    sim: &s_prime,
                };
                let (tuning, blind) = ds.tuning_split();
                if !blind {
                    warn!("fusion weight is selected on the test split");
                }
                let search = beta_search(&dense, &sparse, &ds.train, tuning, &cfg.weights(), cfg.eval.tune_k)?;
                info!("fusion weight {} selected", search.best_beta);
                let mask = test_mask(ds)?;
                let ks = &cfg.eval.ks;
                let fused_report = evaluate("fused", &fused(&dense, &sparse, search.best_beta), &mask, &ds.test, &self.buckets, ks)?;
                let dense_report = evaluate("dense", &dense, &mask, &ds.test, &self.buckets, ks)?;
                let sparse_report = evaluate("sparse", &sparse, &mask, &ds.test, &self.buckets, ks)?;

                let mut curve = format!("# best_beta={}\nbeta\trecall@{}\n", search.best_beta, cfg.eval.tune_k);
                for (b, r) in &search.curve {
                    let _ = writeln!(curve, "{b}\t{r:.6}");
                }
                fs::write(self.ws.path(BETA_CURVE), curve)?;
                let mut kv = String::new();
                let mut tsv = String::new();
                for (i, rep) in [&fused_report, &dense_report, &sparse_report].into_iter().enumerate() {
                    for line in rep.to_kv().lines() {
                        let _ = writeln!(kv, "{}.{line}", rep.label);
                    }
                    for (j, line) in rep.to_tsv().lines().enumerate() {
                        if j == 0 && i == 0 {
                            let _ = writeln!(tsv, "view\t{line}");
                        } else if j > 0 {
                            let _ = writeln!(tsv, "{}\t{line}", rep.label);
                        }
                    }
                }
                let _ = writeln!(kv, "fused.beta={}", search.best_beta);
                fs::write(self.ws.path(METRICS_KV), kv)?;
                fs::write(self.ws.path(METRICS_TSV), tsv)?;
                let report = FuseReport {
                    beta: search.best_beta,
                    curve: search.curve.clone(),
                    views: vec![fused_report.clone(), dense_report.clone(), sparse_report.clone()],
                };
                fs::write(self.ws.path(REPORT), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
                self.ws.record(cfg, st, &[BETA_CURVE, METRICS_KV, METRICS_TSV, REPORT])?;
                self.state.search = Some(search);
                self.state.metrics = vec![fused_report, dense_report, sparse_report];
            }
            Stage::Snr => {
                let table = self.embeddings()?;
                let (r_prime, s_prime) = self.sparse_final()?;
                let beta = self.beta()?;
                let dense = DenseScorer { table: &table };
                let sparse = SparseScorer {
                    input: &r_prime,
                    sim: &s_prime,
                };
                let m = margin_moments(&dense, &sparse, &ds.train, &ds.test, &self.buckets, cfg.eval.k_neg, cfg.seed)?;
                let rep = SnrReport::from_moments("fused", &m, beta);
                fs::write(self.ws.path(SNR_KV), rep.to_kv())?;
                fs::write(self.ws.path(SNR_TSV), rep.to_tsv())?;
                self.ws.record(cfg, st, &[SNR_KV, SNR_TSV])?;
                self.state.snr = Some(rep);
            }
        }
        Ok(())
    }
}

/// Loads the data and runs every stage.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunState> {
    let ds = load_data(cfg)?;
    let mut p = Pipeline::new(cfg, &ds)?;
    p.run(Stage::Sparse, Stage::Snr)?;
    Ok(p.state)
}

/// One row of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantResult {
    pub name: String,
    pub beta: Option<f64>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Ablation {
    pub variants: Vec<VariantResult>,
    /// Margin SNR of the unaligned and fully aligned fusions.
    pub snr_unaligned: SnrReport,
    pub snr_aligned: SnrReport,
}

impl Ablation {
    pub fn get(&self, name: &str) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Writes `ablation.tsv`, `ablation.json` and both SNR tables into `dir`.
    pub fn write(&self, dir: &Path, k: usize) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("ablation.tsv"), self.to_tsv(k))?;
        fs::write(dir.join("ablation.json"), serde_json::to_string_pretty(self).expect("ablation serializes") + "\n")?;
        fs::write(dir.join("snr_sad_wo_align.tsv"), self.snr_unaligned.to_tsv())?;
        fs::write(dir.join("snr_sad.tsv"), self.snr_aligned.to_tsv())?;
        Ok(())
    }

    pub fn to_tsv(&self, k: usize) -> String {
        let mut out = format!("variant\tbeta\trecall@{k}\tndcg@{k}\tunpopular_recall@{k}\tnormal_recall@{k}\tpopular_recall@{k}\n");
        for v in &self.variants {
            let r = &v.report;
            let b = |bk| r.bucket_recall_at(bk, k).unwrap_or(f64::NAN);
            let _ = writeln!(
                out,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                v.name,
                v.beta.map_or("-".to_string(), |x| x.to_string()),
                r.recall_at(k).unwrap_or(f64::NAN),
                r.ndcg_at(k).unwrap_or(f64::NAN),
                b(crate::data::Bucket::Unpopular),
                b(crate::data::Bucket::Normal),
                b(crate::data::Bucket::Popular),
            );
        }
        out
    }
}

/// Trains every ablation setting in memory: the standalone views, their
/// plain sum, the weight-searched fusion without alignment, each single
/// alignment direction, and the full method.
pub fn run_ablation(cfg: &PipelineConfig, ds: &Dataset) -> Result<Ablation> {
    let buckets = popularity_buckets(&ds.train);
    let mask = test_mask(ds)?;
    let (tuning, blind) = ds.tuning_split();
    if !blind {
        warn!("fusion weights are selected on the test split");
    }
    let ks = &cfg.eval.ks;
    let betas = cfg.weights();
    let timer = Instant::now();
    let lap = |what: &str| info!("ablation: {what} done at {:.1}s", timer.elapsed().as_secs_f64());

    let s = stage_err(Stage::Sparse, fit_slim(&ds.train, &cfg.sparse))?;
    lap("sparse fit");
    let sparse = SparseScorer { input: &ds.train, sim: &s };
    let (e0, _) = stage_err(Stage::Dense, train_dense_view(cfg, ds, &ds.train))?;
    lap("dense fit on R");
    let (r_star, _) = stage_err(Stage::S2d, s2d_with_config(&sparse, &ds.train, &cfg.align))?;
    let r_hat = stage_err(Stage::S2d, augment_dense_input(&ds.train, &r_star, cfg.align.lambda_conf))?;
    info!("ablation: {} pseudo-positives", r_star.nnz());
    let (e1, _) = stage_err(Stage::Dense, train_dense_view(cfg, ds, &r_hat))?;
    lap("dense fit on augmented input");
    let d0 = DenseScorer { table: &e0 };
    let d1 = DenseScorer { table: &e1 };
    let realign = |d: &DenseScorer| -> Result<(InteractionMatrix, SimilarityMatrix)> {
        let rp = d2s_augment(d, &ds.train, cfg.align.k_d2s)?;
        let sp = realign_sparse(&rp, &cfg.sparse)?;
        Ok((rp, sp))
    };
    let (rp0, sp0) = stage_err(Stage::D2s, realign(&d0))?;
    lap("sparse refit from plain dense view");
    let (rp1, sp1) = stage_err(Stage::D2s, realign(&d1))?;
    lap("sparse refit from augmented dense view");
    let s0 = SparseScorer { input: &rp0, sim: &sp0 };
    let s1 = SparseScorer { input: &rp1, sim: &sp1 };

    let mut variants = Vec::new();
    let mut single = |name: &str, rep: MetricsReport| {
        variants.push(VariantResult {
            name: name.to_string(),
            beta: None,
            report: rep,
        })
    };
    single("dense", evaluate("dense", &d0, &mask, &ds.test, &buckets, ks)?);
    single("sparse", evaluate("sparse", &sparse, &mask, &ds.test, &buckets, ks)?);
    single("dense_r", evaluate("dense_r", &d1, &mask, &ds.test, &buckets, ks)?);
    single("sparse_r", evaluate("sparse_r", &s1, &mask, &ds.test, &buckets, ks)?);
    variants.push(VariantResult {
        name: "ensemble".into(),
        beta: Some(1.0),
        report: evaluate("ensemble", &fused(&d0, &sparse, 1.0), &mask, &ds.test, &buckets, ks)?,
    });
    let mut searched = |name: &str, d: &DenseScorer, sv: &SparseScorer| -> Result<f64> {
        let search = beta_search(d, sv, &ds.train, tuning, &betas, cfg.eval.tune_k)?;
        let rep = evaluate(name, &fused(d, sv, search.best_beta), &mask, &ds.test, &buckets, ks)?;
        variants.push(VariantResult {
            name: name.to_string(),
            beta: Some(search.best_beta),
            report: rep,
        });
        Ok(search.best_beta)
    };
    let beta_unaligned = searched("sad_wo_align", &d0, &sparse)?;
    searched("sad_wo_s2d", &d0, &s0)?;
    searched("sad_wo_d2s", &d1, &sparse)?;
    let beta_aligned = searched("sad", &d1, &s1)?;
    lap("evaluation");

    let m0 = margin_moments(&d0, &sparse, &ds.train, &ds.test, &buckets, cfg.eval.k_neg, cfg.seed)?;
    let m1 = margin_moments(&d1, &s1, &ds.train, &ds.test, &buckets, cfg.eval.k_neg, cfg.seed)?;
    lap("margin statistics");
    Ok(Ablation {
        variants,
        snr_unaligned: SnrReport::from_moments("sad_wo_align", &m0, beta_unaligned),
        snr_aligned: SnrReport::from_moments("sad", &m1, beta_aligned),
    })
}

/// Human-readable summary of an artifact, chosen by its leading bytes.
pub fn inspect_artifact(path: &Path) -> Result<String> {
    let mut head = [0u8; 8];
    let n = File::open(path)?.read(&mut head)?;
    let head = &head[..n];
    let mut out = String::new();
    let origin = path.display();
    if head.starts_with(b"DCFSIM01") {
        let s = SimilarityMatrix::read_binary(BufReader::new(File::open(path)?), path)?;
        let _ = writeln!(out, "{origin}: similarity matrix");
        let _ = writeln!(out, "items={}", s.n_items());
        let _ = writeln!(out, "nnz={}", s.nnz());
        let _ = writeln!(out, "max_column_nnz={}", s.max_column_nnz());
        let neg = s.triplets().filter(|t| t.2 < 0.0).count();
        let _ = writeln!(out, "negative_entries={neg}");
    } else if head.starts_with(b"DCFE") {
        let e = EmbeddingTable::read_binary(BufReader::new(File::open(path)?), path)?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mean_user = (0..e.n_users()).map(|u| norm(e.user(u))).sum::<f64>() / e.n_users().max(1) as f64;
        let mean_item = (0..e.n_items()).map(|i| norm(e.item(i))).sum::<f64>() / e.n_items().max(1) as f64;
        let _ = writeln!(out, "{origin}: embedding table");
        let _ = writeln!(out, "users={}", e.n_users());
        let _ = writeln!(out, "items={}", e.n_items());
        let _ = writeln!(out, "dim={}", e.dim());
        let _ = writeln!(out, "mean_user_norm={mean_user:.6}");
        let _ = writeln!(out, "mean_item_norm={mean_item:.6}");
    } else if head.starts_with(b"#") {
        let r = InteractionMatrix::read_triplets(BufReader::new(File::open(path)?), path)?;
        let _ = writeln!(out, "{origin}: interaction matrix");
        let _ = writeln!(out, "users={}", r.n_users());
        let _ = writeln!(out, "items={}", r.n_items());
        let _ = writeln!(out, "nnz={}", r.nnz());
        for p in [Provenance::Observed, Provenance::PseudoS2d, Provenance::PseudoD2s] {
            let _ = writeln!(out, "{p}={}", r.count_provenance(p));
        }
    } else if head.starts_with(b"{") {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })?;
        let _ = writeln!(out, "{origin}: manifest");
        let _ = writeln!(out, "config_hash={}", m.config_hash);
        let _ = writeln!(out, "seed={}", m.seed);
        for (name, rec) in &m.stages {
            for (f, h) in &rec.files {
                let _ = writeln!(out, "{name}.{f}={h}");
            }
        }
    } else {
        return Err(Error::Artifact {
            path: path.to_path_buf(),
            msg: "unrecognized artifact".into(),
        });
    }
    Ok(out)
}
