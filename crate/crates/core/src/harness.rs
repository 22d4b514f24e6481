//! Experiment orchestration: the settings × methods grid, on-disk artifacts,
//! cross-method comparison and chart output.
//!
//! Layout of a run:
//!
//! ```text
//! output_dir/
//!   manifest.json
//!   {setting-slug}/{method}/
//!     world_bank.json          (personaweaver only)
//!     populations.jsonl
//!     moral_records.jsonl  moral_dist.csv
//!     reaction_records.jsonl  reaction_dist.csv
//!     style.csv  style.json
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Utc};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{info, warn};

use crate::banks::{self, BankError, ProbeCorpus, SettingSpec};
use crate::canonical::digest_of;
use crate::distribution::CategoricalDistribution;
use crate::gateway::{parallel_map, BackendConfig, Gateway, GatewayError, GatewayStats, GENERATION_TEMPERATURE, PROBE_TEMPERATURE};
use crate::generator::{self, BehaviorBanks, GenerationOptions, Method, Population};
use crate::probes::{self, ClassifierMode, ProbeRun};
use crate::stylometry::{
    self, FillerLexicon, StyleAggregates, StyleLexicons, SummaryStats, ValenceLexicon,
};
use crate::worldgen::{self, BehavioralLexicon, WorldBank, WorldgenOptions};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {reason}")]
    Artifact { path: PathBuf, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("comparison needs at least two series, got {0}")]
    TooFewSeries(usize),
    #[error("the manifests share no setting")]
    NoOverlap,
    #[error("report is empty")]
    EmptyReport,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.to_path_buf(), source }
}

fn write_file(path: &Path, contents: &str) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, contents).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// A bank setting by name, or a custom one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SettingChoice {
    Named(String),
    Custom(SettingSpec),
}

impl SettingChoice {
    pub fn resolve(&self) -> Result<SettingSpec, HarnessError> {
        match self {
            SettingChoice::Named(name) => Ok(banks::find_setting(name)?),
            SettingChoice::Custom(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeToggles {
    pub moral: bool,
    pub reaction: bool,
    pub style: bool,
    /// Classify into the eight reaction styles and fold to three labels.
    pub eight_way: bool,
}

impl Default for ProbeToggles {
    fn default() -> Self {
        Self { moral: true, reaction: true, style: true, eight_way: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// World axes per setting.
    pub k: usize,
    /// Options per axis.
    pub m: usize,
    pub temperature: f64,
    pub judge_temperature: f64,
    pub revise: bool,
    pub with_replacement: bool,
    /// Second behavioral screen of world labels through the backend.
    pub llm_screen: bool,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            k: worldgen::DEFAULT_AXES,
            m: worldgen::DEFAULT_OPTIONS,
            temperature: GENERATION_TEMPERATURE,
            judge_temperature: PROBE_TEMPERATURE,
            revise: true,
            with_replacement: false,
            llm_screen: false,
        }
    }
}

fn default_settings() -> Vec<SettingChoice> {
    banks::load_settings().into_iter().map(|s| SettingChoice::Named(s.name)).collect()
}

fn default_methods() -> Vec<Method> {
    vec![Method::PersonaWeaver, Method::WorldWeaver]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_settings")]
    pub settings: Vec<SettingChoice>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "RunConfig::default_n")]
    pub n_per_setting: usize,
    #[serde(default = "BackendConfig::mock")]
    pub backend: BackendConfig,
    /// Classifier backend; the main backend when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_backend: Option<BackendConfig>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "RunConfig::default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub probes: ProbeToggles,
    #[serde(default)]
    pub generation: GenerationParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filler_lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valence_lexicon: Option<PathBuf>,
    #[serde(default = "RunConfig::default_cells")]
    pub max_concurrent_cells: usize,
    /// RFC 3339 time written as both manifest timestamps, for reproducible
    /// artifact trees.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_timestamp: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    fn default_n() -> usize {
        100
    }

    fn default_output() -> PathBuf {
        PathBuf::from("runs")
    }

    fn default_cells() -> usize {
        2
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = read_file(path)?;
        serde_json::from_str(&text).map_err(|e| HarnessError::InvalidConfig(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Digest over the canonical form of every field.
    pub fn digest(&self) -> String {
        digest_of(self)
    }

    pub fn validate(&self) -> Result<Vec<SettingSpec>, HarnessError> {
        let bad = |m: &str| Err(HarnessError::InvalidConfig(m.to_string()));
        if self.n_per_setting < 1 {
            return bad("n_per_setting must be at least 1");
        }
        if self.settings.is_empty() {
            return bad("no settings selected");
        }
        if self.methods.is_empty() {
            return bad("no methods selected");
        }
        if self.methods.contains(&Method::PersonaHub) && self.persona_file.is_none() {
            return bad("personahub requires persona_file");
        }
        if self.methods.contains(&Method::PersonaWeaver) && (self.generation.k < 2 || self.generation.m < 2) {
            return bad("generation.k and generation.m must be at least 2");
        }
        if self.max_concurrent_cells < 1 {
            return bad("max_concurrent_cells must be at least 1");
        }
        if let Some(ts) = &self.fixed_timestamp {
            DateTime::parse_from_rfc3339(ts)
                .map_err(|e| HarnessError::InvalidConfig(format!("fixed_timestamp `{ts}`: {e}")))?;
        }
        self.backend.validate()?;
        if let Some(aux) = &self.aux_backend {
            aux.validate()?;
        }
        let settings = self.settings.iter().map(SettingChoice::resolve).collect::<Result<Vec<_>, _>>()?;
        let mut slugs: Vec<String> = settings.iter().map(SettingSpec::slug).collect();
        slugs.sort();
        slugs.dedup();
        if slugs.len() != settings.len() {
            return bad("settings must be distinct");
        }
        let mut methods = self.methods.clone();
        methods.sort();
        methods.dedup();
        if methods.len() != self.methods.len() {
            return bad("methods must be distinct");
        }
        Ok(settings)
    }

    fn generation_options(&self) -> GenerationOptions {
        GenerationOptions {
            temperature: self.generation.temperature,
            judge_temperature: self.generation.judge_temperature,
            revise: self.generation.revise,
            with_replacement: self.generation.with_replacement,
            ..GenerationOptions::default()
        }
    }

    fn lexicons(&self) -> Result<StyleLexicons, HarnessError> {
        let invalid = |p: &Path, e: stylometry::LexiconError| HarnessError::InvalidConfig(format!("{}: {e}", p.display()));
        Ok(StyleLexicons {
            fillers: match &self.filler_lexicon {
                Some(p) => Some(FillerLexicon::load(p).map_err(|e| invalid(p, e))?),
                None => None,
            },
            valence: match &self.valence_lexicon {
                Some(p) => Some(ValenceLexicon::load(p).map_err(|e| invalid(p, e))?),
                None => None,
            },
        })
    }

    fn classifier_mode(&self) -> ClassifierMode {
        if self.probes.eight_way {
            ClassifierMode::EightWay { styles: banks::load_reaction_bank() }
        } else {
            ClassifierMode::ThreeWay
        }
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    WorldBank,
    Population,
    Records,
    Distribution,
    StyleCsv,
    StyleJson,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub kind: ArtifactKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellManifest {
    pub setting: String,
    pub setting_slug: String,
    pub method: Method,
    pub profiles: usize,
    pub artifacts: IndexMap<String, Artifact>,
    /// Error count per stage. Zero entries are kept so every stage that ran
    /// is listed.
    pub stage_errors: IndexMap<String, usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub messages: Vec<String>,
    /// Classifier granularity, when the reaction probe ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<String>,
}

impl CellManifest {
    pub fn error_count(&self) -> usize {
        self.stage_errors.values().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendInfo {
    pub id: String,
    pub model: String,
    pub stats: GatewayStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_digest: String,
    pub seed: u64,
    pub n_per_setting: usize,
    pub started_at: String,
    pub finished_at: String,
    pub backend: BackendInfo,
    pub aux_backend: BackendInfo,
    pub cells: Vec<CellManifest>,
    /// Directory the manifest lives in; artifact paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl RunManifest {
    pub fn error_count(&self) -> usize {
        self.cells.iter().map(CellManifest::error_count).sum()
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut out: Vec<Method> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.method) {
                out.push(c.method);
            }
        }
        out
    }

    pub fn resolve(&self, artifact: &Artifact) -> PathBuf {
        self.root.join(&artifact.path)
    }

    /// Reads `manifest.json` from a run directory, or a manifest file path.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = read_file(&file)?;
        let mut m: RunManifest = serde_json::from_str(&text)
            .map_err(|e| HarnessError::Artifact { path: file.clone(), reason: e.to_string() })?;
        m.root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    /// Checks that every listed artifact exists and parses as its kind.
    pub fn verify(&self) -> Result<(), HarnessError> {
        for cell in &self.cells {
            for artifact in cell.artifacts.values() {
                let path = self.resolve(artifact);
                let text = read_file(&path)?;
                let bad = |reason: String| HarnessError::Artifact { path: path.clone(), reason };
                match artifact.kind {
                    ArtifactKind::WorldBank => {
                        serde_json::from_str::<WorldBank>(&text).map_err(|e| bad(e.to_string()))?;
                    }
                    ArtifactKind::Population => {
                        Population::from_jsonl(&text).map_err(|e| bad(e.to_string()))?;
                    }
                    ArtifactKind::Records => {
                        probes::records_from_jsonl(&text).map_err(|e| bad(e.to_string()))?;
                    }
                    ArtifactKind::Distribution => {
                        CategoricalDistribution::from_csv(&text).map_err(bad)?;
                    }
                    ArtifactKind::StyleCsv => {
                        let mut r = csv::Reader::from_reader(text.as_bytes());
                        for row in r.records() {
                            row.map_err(|e| bad(e.to_string()))?;
                        }
                    }
                    ArtifactKind::StyleJson => {
                        stylometry::StyleReport::from_json(&text).map_err(|e| bad(e.to_string()))?;
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Running
// ---------------------------------------------------------------------------

fn timestamp(config: &RunConfig) -> String {
    if let Some(ts) = &config.fixed_timestamp {
        return ts.clone();
    }
    Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true)
}

struct CellWriter<'a> {
    root: &'a Path,
    dir: String,
    cell: CellManifest,
}

impl CellWriter<'_> {
    fn put(&mut self, name: &str, file: &str, kind: ArtifactKind, contents: &str) -> Result<(), HarnessError> {
        let rel = format!("{}/{file}", self.dir);
        write_file(&self.root.join(&rel), contents)?;
        self.cell.artifacts.insert(name.into(), Artifact { path: rel, kind });
        Ok(())
    }

    fn stage(&mut self, stage: &str, errors: usize) {
        *self.cell.stage_errors.entry(stage.into()).or_insert(0) += errors;
    }

    fn fail(&mut self, stage: &str, err: impl std::fmt::Display) {
        warn!(setting = %self.cell.setting, method = %self.cell.method, stage, "{err}");
        self.stage(stage, 1);
        self.cell.messages.push(format!("{stage}: {err}"));
    }
}

struct Shared<'a> {
    config: &'a RunConfig,
    gateway: &'a Gateway,
    aux: &'a Gateway,
    banks: BehaviorBanks,
    corpus: ProbeCorpus,
    lexicons: StyleLexicons,
    personas: Option<Vec<String>>,
    root: &'a Path,
}

fn generate(shared: &Shared, setting: &SettingSpec, method: Method, w: &mut CellWriter) -> Result<Population, String> {
    let c = shared.config;
    let opts = c.generation_options();
    match method {
        Method::PersonaWeaver => {
            let wopts = WorldgenOptions {
                temperature: c.generation.temperature,
                llm_screen: c.generation.llm_screen,
                lexicon: Arc::new(BehavioralLexicon::default()),
                ..WorldgenOptions::default()
            };
            let world = worldgen::build_world_bank(setting, c.generation.k, c.generation.m, shared.gateway, &wopts)
                .map_err(|e| format!("worldgen: {e}"))?;
            w.stage("worldgen", 0);
            w.put("world_bank", "world_bank.json", ArtifactKind::WorldBank, &world.to_json()).map_err(|e| e.to_string())?;
            generator::generate_personaweaver(setting, c.n_per_setting, &world, &shared.banks, shared.gateway, c.seed, &opts)
        }
        Method::WorldWeaver => generator::generate_worldweaver(setting, c.n_per_setting, shared.gateway, &opts),
        Method::PersonaHub => {
            let personas = shared.personas.as_deref().unwrap_or_default();
            generator::generate_personahub_from(setting, personas, c.n_per_setting, shared.gateway, c.seed, &opts)
        }
    }
    .map_err(|e| format!("generate: {e}"))
}

fn run_cell(shared: &Shared, setting: &SettingSpec, method: Method) -> CellManifest {
    let slug = setting.slug();
    let mut w = CellWriter {
        root: shared.root,
        dir: format!("{slug}/{method}"),
        cell: CellManifest {
            setting: setting.name.clone(),
            setting_slug: slug,
            method,
            profiles: 0,
            artifacts: IndexMap::new(),
            stage_errors: IndexMap::new(),
            messages: Vec::new(),
            classifier: None,
        },
    };
    info!(setting = %setting.name, %method, "cell started");

    let pop = match generate(shared, setting, method, &mut w) {
        Ok(p) => p,
        Err(e) => {
            let stage = if e.starts_with("worldgen") { "worldgen" } else { "generate" };
            w.fail(stage, e);
            return w.cell;
        }
    };
    w.stage("generate", pop.error_count());
    for issue in pop.issues.iter().filter(|i| !i.warning) {
        w.cell.messages.push(format!("generate: {}", issue.message));
    }
    w.cell.profiles = pop.profiles.len();
    if let Err(e) = w.put("population", "populations.jsonl", ArtifactKind::Population, &pop.to_jsonl()) {
        w.fail("generate", e);
        return w.cell;
    }

    let mut style_source: Option<ProbeRun> = None;
    let mut moral_run: Option<ProbeRun> = None;
    if shared.config.probes.moral {
        match probes::run_moral_probe(&pop, setting, &shared.corpus.moral_items(), shared.gateway) {
            Ok(run) => {
                w.stage("moral", run.error_count());
                let res = w
                    .put("moral_records", "moral_records.jsonl", ArtifactKind::Records, &probes::records_to_jsonl(&run.records))
                    .and_then(|_| w.put("moral_dist", "moral_dist.csv", ArtifactKind::Distribution, &run.distribution.to_csv()));
                if let Err(e) = res {
                    w.fail("moral", e);
                }
                moral_run = Some(run);
            }
            Err(e) => w.fail("moral", e),
        }
    }
    if shared.config.probes.reaction {
        let mode = shared.config.classifier_mode();
        w.cell.classifier = Some(match mode {
            ClassifierMode::ThreeWay => "three_way".into(),
            ClassifierMode::EightWay { .. } => "eight_way_folded".into(),
        });
        match probes::run_reaction_probe(&pop, setting, &shared.corpus.question_items(), shared.gateway, shared.aux, &mode) {
            Ok(run) => {
                w.stage("reaction", run.error_count());
                let res = w
                    .put("reaction_records", "reaction_records.jsonl", ArtifactKind::Records, &probes::records_to_jsonl(&run.records))
                    .and_then(|_| w.put("reaction_dist", "reaction_dist.csv", ArtifactKind::Distribution, &run.distribution.to_csv()));
                if let Err(e) = res {
                    w.fail("reaction", e);
                }
                style_source = Some(run);
            }
            Err(e) => w.fail("reaction", e),
        }
    }
    if shared.config.probes.style {
        match style_source.as_ref().or(moral_run.as_ref()) {
            Some(run) => {
                let report = stylometry::build_style_report(&run.records, &shared.lexicons);
                let res = w
                    .put("style_csv", "style.csv", ArtifactKind::StyleCsv, &report.to_csv())
                    .and_then(|_| w.put("style_json", "style.json", ArtifactKind::StyleJson, &report.to_json()));
                match res {
                    Ok(()) => w.stage("style", 0),
                    Err(e) => w.fail("style", e),
                }
            }
            None => w.cell.messages.push("style: skipped, no probe records".into()),
        }
    }
    info!(setting = %setting.name, %method, errors = w.cell.error_count(), "cell finished");
    w.cell
}

/// Runs every (setting, method) cell and writes the manifest last. Stage
/// failures are recorded in the manifest and do not stop other cells.
pub fn run_experiment(config: &RunConfig) -> Result<RunManifest, HarnessError> {
    let settings = config.validate()?;
    let gateway = Gateway::from_config(&config.backend)?;
    let aux = match &config.aux_backend {
        Some(cfg) => Gateway::from_config(cfg)?,
        None => Gateway::from_config(&config.backend)?,
    };
    let personas = match (&config.persona_file, config.methods.contains(&Method::PersonaHub)) {
        (Some(p), true) => Some(banks::parse_persona_file(p)?),
        _ => None,
    };
    let root = config.output_dir.as_path();
    std::fs::create_dir_all(root).map_err(io_err(root))?;
    let started_at = timestamp(config);

    let shared = Shared {
        config,
        gateway: &gateway,
        aux: &aux,
        banks: BehaviorBanks::builtin(),
        corpus: banks::load_probe_corpus(),
        lexicons: config.lexicons()?,
        personas,
        root,
    };
    let grid: Vec<(&SettingSpec, Method)> =
        settings.iter().flat_map(|s| config.methods.iter().map(move |m| (s, *m))).collect();
    let cells = parallel_map(&grid, config.max_concurrent_cells, |(s, m)| run_cell(&shared, s, *m));

    let info = |g: &Gateway| BackendInfo { id: g.backend_id().to_string(), model: g.model().to_string(), stats: g.stats() };
    let manifest = RunManifest {
        config_digest: config.digest(),
        seed: config.seed,
        n_per_setting: config.n_per_setting,
        started_at,
        finished_at: timestamp(config),
        backend: info(&gateway),
        aux_backend: info(&aux),
        cells,
        root: root.to_path_buf(),
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&root.join(MANIFEST_FILE), &text)?;
    Ok(manifest)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CellData {
    pub moral: Option<CategoricalDistribution>,
    pub reaction: Option<CategoricalDistribution>,
    pub style: Option<StyleAggregates>,
}

fn merge_opt(into: &mut Option<CategoricalDistribution>, from: &Option<CategoricalDistribution>) {
    match (into.as_mut(), from) {
        (Some(a), Some(b)) => {
            a.merge(b);
        }
        (None, Some(b)) => *into = Some(b.clone()),
        _ => {}
    }
}

fn pool_stats(parts: &[(usize, SummaryStats)]) -> Option<SummaryStats> {
    let n: usize = parts.iter().map(|(n, _)| n).sum();
    if n == 0 {
        return None;
    }
    let nf = n as f64;
    let mean = parts.iter().map(|(k, s)| *k as f64 * s.mean).sum::<f64>() / nf;
    let second = parts.iter().map(|(k, s)| *k as f64 * (s.stddev.powi(2) + s.mean.powi(2))).sum::<f64>() / nf;
    Some(SummaryStats {
        mean,
        stddev: (second - mean * mean).max(0.0).sqrt(),
        min: parts.iter().map(|(_, s)| s.min).fold(f64::INFINITY, f64::min),
        max: parts.iter().map(|(_, s)| s.max).fold(f64::NEG_INFINITY, f64::max),
    })
}

fn pool_style(parts: &[&StyleAggregates]) -> Option<StyleAggregates> {
    if parts.is_empty() {
        return None;
    }
    let mut out = StyleAggregates {
        responses: 0,
        length: None,
        length_histogram: stylometry::length_support(),
        filler: None,
        filler_histogram: stylometry::filler_support(),
        punctuation: stylometry::punctuation_support(),
        sentiment: stylometry::sentiment_support(),
    };
    for p in parts {
        out.responses += p.responses;
        out.length_histogram.merge(&p.length_histogram);
        out.filler_histogram.merge(&p.filler_histogram);
        out.punctuation.merge(&p.punctuation);
        out.sentiment.merge(&p.sentiment);
    }
    let lengths: Vec<_> = parts.iter().filter_map(|p| p.length.map(|s| (p.responses, s))).collect();
    let fillers: Vec<_> = parts.iter().filter_map(|p| p.filler.map(|s| (p.responses, s))).collect();
    out.length = pool_stats(&lengths);
    out.filler = pool_stats(&fillers);
    Some(out)
}

impl CellData {
    fn pooled(cells: &[&CellData]) -> CellData {
        let mut out = CellData::default();
        for c in cells {
            merge_opt(&mut out.moral, &c.moral);
            merge_opt(&mut out.reaction, &c.reaction);
        }
        let styles: Vec<&StyleAggregates> = cells.iter().filter_map(|c| c.style.as_ref()).collect();
        out.style = pool_style(&styles);
        out
    }

    pub fn load(manifest: &RunManifest, cell: &CellManifest) -> Result<Self, HarnessError> {
        let dist = |name: &str| -> Result<Option<CategoricalDistribution>, HarnessError> {
            match cell.artifacts.get(name) {
                Some(a) => {
                    let path = manifest.resolve(a);
                    let text = read_file(&path)?;
                    CategoricalDistribution::from_csv(&text)
                        .map(Some)
                        .map_err(|reason| HarnessError::Artifact { path, reason })
                }
                None => Ok(None),
            }
        };
        let style = match cell.artifacts.get("style_json") {
            Some(a) => {
                let path = manifest.resolve(a);
                let (agg, _) = stylometry::StyleReport::from_json(&read_file(&path)?)
                    .map_err(|e| HarnessError::Artifact { path, reason: e.to_string() })?;
                Some(agg)
            }
            None => None,
        };
        Ok(CellData { moral: dist("moral_dist")?, reaction: dist("reaction_dist")?, style })
    }
}

/// One method's results, possibly from one of several manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub name: String,
    pub method: Method,
    pub per_setting: IndexMap<String, CellData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesSummary {
    pub name: String,
    pub method: Method,
    pub pooled: CellData,
    /// Normalized entropy per feature; absent when the feature is missing
    /// or empty.
    pub entropy: IndexMap<String, Option<f64>>,
    pub per_setting: IndexMap<String, CellData>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub settings: Vec<String>,
    pub series: Vec<SeriesSummary>,
    /// Feature → (series, series) → Jensen–Shannon divergence of the pooled
    /// distributions.
    pub jsd: IndexMap<String, IndexMap<String, IndexMap<String, Option<f64>>>>,
}

pub const FEATURES: [&str; 6] = ["moral", "reaction", "sentiment", "length", "filler", "punctuation"];

fn feature<'a>(data: &'a CellData, name: &str) -> Option<&'a CategoricalDistribution> {
    match name {
        "moral" => data.moral.as_ref(),
        "reaction" => data.reaction.as_ref(),
        "sentiment" => data.style.as_ref().map(|s| &s.sentiment),
        "length" => data.style.as_ref().map(|s| &s.length_histogram),
        "filler" => data.style.as_ref().map(|s| &s.filler_histogram),
        "punctuation" => data.style.as_ref().map(|s| &s.punctuation),
        _ => None,
    }
}

/// Builds the comparison over the settings every series covers.
pub fn compare_series(series: Vec<Series>) -> Result<ComparisonReport, HarnessError> {
    if series.len() < 2 {
        return Err(HarnessError::TooFewSeries(series.len()));
    }
    let settings: Vec<String> = series[0]
        .per_setting
        .keys()
        .filter(|s| series.iter().all(|x| x.per_setting.contains_key(*s)))
        .cloned()
        .collect();
    if settings.is_empty() {
        return Err(HarnessError::NoOverlap);
    }
    let summaries: Vec<SeriesSummary> = series
        .into_iter()
        .map(|s| {
            let per_setting: IndexMap<String, CellData> =
                settings.iter().map(|name| (name.clone(), s.per_setting[name].clone())).collect();
            let cells: Vec<&CellData> = per_setting.values().collect();
            let pooled = CellData::pooled(&cells);
            let entropy = FEATURES
                .iter()
                .map(|f| (f.to_string(), feature(&pooled, f).and_then(|d| stylometry::normalized_entropy(d).ok())))
                .collect();
            SeriesSummary { name: s.name, method: s.method, pooled, entropy, per_setting }
        })
        .collect();
    let mut jsd = IndexMap::new();
    for f in FEATURES {
        let mut table = IndexMap::new();
        for a in &summaries {
            let mut row = IndexMap::new();
            for b in &summaries {
                let value = match (feature(&a.pooled, f), feature(&b.pooled, f)) {
                    (Some(p), Some(q)) => stylometry::jensen_shannon(p, q).ok(),
                    _ => None,
                };
                row.insert(b.name.clone(), value);
            }
            table.insert(a.name.clone(), row);
        }
        jsd.insert(f.to_string(), table);
    }
    Ok(ComparisonReport { settings, series: summaries, jsd })
}

/// Aligns the manifests' cells by method and setting. A method that appears
/// in several manifests gets one series per manifest, suffixed `#2`, `#3`...
pub fn compare_methods(manifests: &[RunManifest]) -> Result<ComparisonReport, HarnessError> {
    let mut series: Vec<Series> = Vec::new();
    for manifest in manifests {
        for method in manifest.methods() {
            let seen = series.iter().filter(|s| s.method == method).count();
            let name = if seen == 0 { method.to_string() } else { format!("{method}#{}", seen + 1) };
            let mut per_setting = IndexMap::new();
            for cell in manifest.cells.iter().filter(|c| c.method == method) {
                per_setting.insert(cell.setting.clone(), CellData::load(manifest, cell)?);
            }
            series.push(Series { name, method, per_setting });
        }
    }
    compare_series(series)
}

impl ComparisonReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Plain-text summary: entropy per series and the pairwise divergence
    /// tables.
    pub fn summary(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        let mut out = format!("settings: {}\n\nnormalized entropy\n", self.settings.join(", "));
        let _ = writeln!(out, "{:<20}{}", "series", FEATURES.iter().map(|f| format!("{f:>13}")).collect::<String>());
        for s in &self.series {
            let cols: String = FEATURES.iter().map(|f| format!("{:>13}", fmt(s.entropy[*f]))).collect();
            let _ = writeln!(out, "{:<20}{cols}", s.name);
        }
        for (f, table) in &self.jsd {
            let _ = writeln!(out, "\njensen-shannon ({f})");
            let names: Vec<&String> = table.keys().collect();
            let _ = writeln!(out, "{:<20}{}", "", names.iter().map(|n| format!("{n:>20}")).collect::<String>());
            for (a, row) in table {
                let _ = writeln!(out, "{a:<20}{}", row.values().map(|v| format!("{:>20}", fmt(*v))).collect::<String>());
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Charts
// ---------------------------------------------------------------------------

const PALETTE: [&str; 6] = ["#4e79a7", "#f28e2b", "#59a14f", "#e15759", "#76b7b2", "#b07aa1"];

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Grouped bar chart of shares: one group per category, one bar per series.
/// Zero shares still get a (zero-height) bar.
pub fn grouped_bar_svg(title: &str, categories: &[String], series: &[(String, Vec<f64>)]) -> String {
    let bar_w = 18.0;
    let gap = 16.0;
    let group_w = bar_w * series.len() as f64 + gap;
    let (left, top, plot_h) = (50.0, 40.0, 220.0);
    let legend_h = 18.0 * series.len() as f64;
    let width = left + group_w * categories.len() as f64 + 20.0;
    let height = top + plot_h + 40.0 + legend_h;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left:.0}" y="20" font-size="14">{}</text>"#, xml_escape(title));
    let base = top + plot_h;
    let _ = writeln!(s, r#"<line x1="{left:.0}" y1="{base:.1}" x2="{:.1}" y2="{base:.1}" stroke="black"/>"#, width - 20.0);
    for tick in 0..=4 {
        let v = tick as f64 * 0.25;
        let y = base - v * plot_h;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.2}</text>"#, left - 6.0, y + 4.0);
    }
    for (ci, cat) in categories.iter().enumerate() {
        let gx = left + gap / 2.0 + ci as f64 * group_w;
        for (si, (name, values)) in series.iter().enumerate() {
            let v = values.get(ci).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            let h = v * plot_h;
            let _ = writeln!(
                s,
                r#"<rect class="bar" data-series="{}" data-category="{}" x="{:.1}" y="{:.1}" width="{bar_w:.1}" height="{h:.1}" fill="{}"><title>{}: {v:.4}</title></rect>"#,
                xml_escape(name),
                xml_escape(cat),
                gx + si as f64 * bar_w,
                base - h,
                PALETTE[si % PALETTE.len()],
                xml_escape(name),
            );
        }
        let cx = gx + bar_w * series.len() as f64 / 2.0;
        let _ = writeln!(s, r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, base + 16.0, xml_escape(cat));
    }
    for (si, (name, _)) in series.iter().enumerate() {
        let y = base + 34.0 + si as f64 * 18.0;
        let _ = writeln!(
            s,
            r#"<rect x="{left:.0}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            y - 10.0,
            PALETTE[si % PALETTE.len()],
            left + 18.0,
            y,
            xml_escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

const PANELS: [(&str, &str, &str); 6] = [
    ("moral", "moral.svg", "Moral positions"),
    ("reaction", "reaction.svg", "Reactions to questions"),
    ("filler", "filler.svg", "Filler words per 100 words"),
    ("punctuation", "punctuation.svg", "Punctuation"),
    ("length", "length.svg", "Answer length (words)"),
    ("sentiment", "sentiment.svg", "Sentiment"),
];

/// Writes one SVG per panel that at least one series has data for.
pub fn emit_charts(report: &ComparisonReport, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    if report.series.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut written = Vec::new();
    for (key, file, title) in PANELS {
        let Some(support) = report.series.iter().find_map(|s| feature(&s.pooled, key)) else {
            continue;
        };
        let categories: Vec<String> = support.categories().map(str::to_string).collect();
        let series: Vec<(String, Vec<f64>)> = report
            .series
            .iter()
            .map(|s| {
                let values = match feature(&s.pooled, key) {
                    Some(d) => categories.iter().map(|c| d.share(c)).collect(),
                    None => vec![0.0; categories.len()],
                };
                (s.name.clone(), values)
            })
            .collect();
        let path = out_dir.join(file);
        write_file(&path, &grouped_bar_svg(title, &categories, &series))?;
        written.push(path);
    }
    if written.is_empty() {
        return Err(HarnessError::EmptyReport);
    }
    Ok(written)
}
