//! Stage runner for the pipeline: configuration loading, artifact wiring and
//! report emission.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use digzsl_core::cdm::{extract_features, train_cdm, Backbone, CdmModel, ToyBackbone};
use digzsl_core::classifier::{assemble_training_set, train_classifier, ZslClassifier, ZslMode};
use digzsl_core::config::{Backend, RunConfig};
use digzsl_core::data::{toy_shapes, ClassId, Dataset, LabeledImage, Partition};
use digzsl_core::dct::{init_dct, optimize_dct, synthesize_class_set, DctContext, GeneratedSampleSet, TokenEmbeddingState};
use digzsl_core::diffusion::{train_toy_generator, SampleOptions, ToyGenerator};
use digzsl_core::evaluator::{
    evaluate_czsl, evaluate_gzsl, export_embeddings, fid_report, FeatureSetSummary, LambdaSource, MetricsReport,
};
use digzsl_core::nn::stack_rows;
use digzsl_core::prototypes::{build_prototypes, PrototypeBank, ToyTextEncoder};
use digzsl_core::store::{ArtifactHandle, ArtifactStore, Stage};
use digzsl_core::tape::Matrix;
use digzsl_core::{Error, Result};

/// Environment variable overriding the artifact root.
pub const ARTIFACT_ROOT_ENV: &str = "DIGZSL_ARTIFACT_ROOT";
pub const METRICS_FILE: &str = "metrics.json";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StageName {
    Prototypes,
    TrainCdm,
    LearnDct,
    Generate,
    TrainClassifier,
    Evaluate,
    Export,
}

impl StageName {
    pub const ALL: [StageName; 7] = [
        StageName::Prototypes,
        StageName::TrainCdm,
        StageName::LearnDct,
        StageName::Generate,
        StageName::TrainClassifier,
        StageName::Evaluate,
        StageName::Export,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Prototypes => "prototypes",
            StageName::TrainCdm => "train-cdm",
            StageName::LearnDct => "learn-dct",
            StageName::Generate => "generate",
            StageName::TrainClassifier => "train-classifier",
            StageName::Evaluate => "evaluate",
            StageName::Export => "export",
        }
    }

    /// Stages whose outputs this stage reads.
    pub fn dependencies(self) -> &'static [StageName] {
        match self {
            StageName::Prototypes => &[],
            StageName::TrainCdm => &[StageName::Prototypes],
            StageName::LearnDct => &[StageName::Prototypes, StageName::TrainCdm],
            StageName::Generate => &[StageName::LearnDct],
            StageName::TrainClassifier => &[StageName::TrainCdm, StageName::Generate],
            StageName::Evaluate => &[StageName::TrainCdm, StageName::Generate, StageName::TrainClassifier],
            StageName::Export => &[StageName::LearnDct],
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StagePlan {
    pub stages: Vec<StageName>,
    /// First stage to execute; earlier stages of the list are expected on disk.
    pub resume_from: Option<StageName>,
    pub config_path: Option<PathBuf>,
}

impl StagePlan {
    pub fn all(config_path: Option<PathBuf>) -> Self {
        StagePlan { stages: StageName::ALL.to_vec(), resume_from: None, config_path }
    }

    pub fn single(stage: StageName, config_path: Option<PathBuf>) -> Self {
        StagePlan { stages: vec![stage], resume_from: None, config_path }
    }

    /// Stage lists must be strictly increasing in pipeline order.
    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("stage plan is empty".into()));
        }
        if let Some(w) = self.stages.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stage {} cannot run after {}", w[1], w[0])));
        }
        if let Some(r) = self.resume_from {
            if !self.stages.contains(&r) {
                return Err(Error::Config(format!("resume point {r} is not part of the plan")));
            }
        }
        Ok(())
    }

    pub fn to_execute(&self) -> Vec<StageName> {
        match self.resume_from {
            Some(r) => self.stages.iter().copied().filter(|s| *s >= r).collect(),
            None => self.stages.clone(),
        }
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub lambda: Option<f64>,
    pub gamma: Option<f64>,
    pub backend: Option<Backend>,
    pub out: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Structural(_) | Error::Protocol(_) | Error::Serialization(_) => 1,
        Error::Dependency(_) | Error::Version { .. } | Error::Io { .. } => 2,
        Error::Numerical { .. } | Error::Degenerate(_) => 3,
    }
}

/// Resolve the artifact root: `--out`, then the environment, then the
/// configuration, then `./artifacts`.
pub fn artifact_root(cfg: &RunConfig, out: Option<&Path>, env: Option<&str>) -> PathBuf {
    out.map(Path::to_path_buf)
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.artifact_root.clone())
        .unwrap_or_else(|| PathBuf::from("artifacts"))
}

fn artifact_key(id: &ClassId) -> String {
    id.as_str().chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

pub struct Runner {
    pub cfg: RunConfig,
    pub store: ArtifactStore,
    lambda_override: Option<f64>,
    dataset: Option<Dataset>,
}

impl Runner {
    pub fn new(mut cfg: RunConfig, overrides: &Overrides) -> Result<Self> {
        if let Some(s) = overrides.seed {
            cfg.seed = s;
        }
        if let Some(g) = overrides.gamma {
            cfg.dataset.gamma = g;
        }
        if let Some(b) = overrides.backend {
            cfg.backend = b;
        }
        if let Some(l) = overrides.lambda {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Config(format!("--lambda {l} must lie in [0, 1]")));
            }
        }
        cfg.validate()?;
        let env = std::env::var(ARTIFACT_ROOT_ENV).ok();
        let root = artifact_root(&cfg, overrides.out.as_deref(), env.as_deref());
        Ok(Runner { cfg, store: ArtifactStore::new(root), lambda_override: overrides.lambda, dataset: None })
    }

    /// The toy dataset for the configured seed, generated on first use.
    pub fn dataset(&mut self) -> Result<&Dataset> {
        if self.cfg.backend == Backend::External {
            return Err(Error::Dependency(
                "the external backend needs pretrained encoder, backbone and generator adapters, which are not bundled; use --backend toy".into(),
            ));
        }
        if self.cfg.dataset.name != "toy" {
            return Err(Error::Dependency(format!(
                "dataset {} needs benchmark images through the external backend; only the toy dataset runs locally",
                self.cfg.dataset.name
            )));
        }
        if self.dataset.is_none() {
            self.dataset = Some(toy_shapes(&self.cfg.toy, self.cfg.seed)?);
        }
        Ok(self.dataset.as_ref().expect("loaded"))
    }

    fn hash(&self, stage: Stage) -> String {
        self.cfg.stage_hash(stage)
    }

    /// Load an upstream artifact, turning a missing file into a dependency
    /// error that names the producing stage.
    fn need<T: digzsl_core::store::Artifact>(&self, stage: Stage, name: &str, producer: StageName, consumer: StageName) -> Result<T> {
        if !self.store.exists(stage, name) {
            return Err(Error::Dependency(format!(
                "{consumer} needs {}/{name} at {}; run the {producer} stage first",
                stage.dir_name(),
                self.store.path_of(stage, name).display()
            )));
        }
        self.store.load(stage, name, Some(&self.hash(stage)))
    }

    fn encoder(&self, consumer: StageName) -> Result<ToyTextEncoder> {
        self.need(Stage::Prototypes, "encoder", StageName::Prototypes, consumer)
    }

    fn cdm(&self, consumer: StageName) -> Result<CdmModel> {
        self.need(Stage::Cdm, "cdm", StageName::TrainCdm, consumer)
    }

    fn tokens(&mut self, consumer: StageName) -> Result<Vec<TokenEmbeddingState>> {
        let unseen = self.dataset()?.space.unseen_ids();
        unseen
            .iter()
            .map(|id| self.need(Stage::Dct, &format!("token-{}", artifact_key(id)), StageName::LearnDct, consumer))
            .collect()
    }

    fn generated(&mut self, consumer: StageName) -> Result<Vec<GeneratedSampleSet>> {
        let unseen = self.dataset()?.space.unseen_ids();
        unseen
            .iter()
            .map(|id| self.need(Stage::Generated, &format!("set-{}", artifact_key(id)), StageName::Generate, consumer))
            .collect()
    }

    fn modes(&self) -> Vec<ZslMode> {
        let mut m = Vec::new();
        if self.cfg.mode.czsl() {
            m.push(ZslMode::Czsl);
        }
        if self.cfg.mode.gzsl() {
            m.push(ZslMode::Gzsl);
        }
        m
    }

    /// The trained toy generator, loaded from the store or trained and saved.
    pub fn generator(&mut self) -> Result<ToyGenerator> {
        let hash = self.hash(Stage::Generator);
        if self.store.exists(Stage::Generator, "generator") {
            if let Ok(g) = self.store.load(Stage::Generator, "generator", Some(&hash)) {
                return Ok(g);
            }
        }
        let encoder = self.encoder(StageName::LearnDct)?;
        let seed = self.cfg.seed;
        let cfg = self.cfg.generator.clone();
        let ds = self.dataset()?;
        let train = ds.samples(Partition::TrainSeen);
        let space = ds.space.clone();
        info!("training the toy generator ({} steps)", cfg.train_steps);
        let g = train_toy_generator(&train, &space, encoder, &cfg, seed)?;
        self.store.save(Stage::Generator, "generator", &hash, seed, &g)?;
        Ok(g)
    }

    pub fn run_plan(&mut self, plan: &StagePlan) -> Result<Vec<ArtifactHandle>> {
        plan.validate()?;
        let mut handles = Vec::new();
        for stage in plan.to_execute() {
            info!("stage {stage}");
            handles.extend(self.run_stage(stage)?);
        }
        Ok(handles)
    }

    pub fn run_stage(&mut self, stage: StageName) -> Result<Vec<ArtifactHandle>> {
        match stage {
            StageName::Prototypes => self.stage_prototypes(),
            StageName::TrainCdm => self.stage_cdm(),
            StageName::LearnDct => self.stage_dct(),
            StageName::Generate => self.stage_generate(),
            StageName::TrainClassifier => self.stage_classifier(),
            StageName::Evaluate => self.stage_evaluate(),
            StageName::Export => self.stage_export(),
        }
    }

    fn stage_prototypes(&mut self) -> Result<Vec<ArtifactHandle>> {
        let p = self.cfg.prototypes.clone();
        let mut templates: Vec<String> = vec![p.template.clone()];
        templates.extend(self.cfg.dct.templates.iter().cloned());
        templates.extend(self.cfg.generator.caption_templates.iter().cloned());
        let seed = self.cfg.seed;
        let space = self.dataset()?.space.clone();
        let refs: Vec<&str> = templates.iter().map(String::as_str).collect();
        let encoder = ToyTextEncoder::for_classes(seed, p.embedding_dim, p.semantic_dim, p.embedding_scale, &space, &refs)?;
        let bank = build_prototypes(&space, &encoder, &p.template)?;
        let hash = self.hash(Stage::Prototypes);
        Ok(vec![
            self.store.save(Stage::Prototypes, "encoder", &hash, seed, &encoder)?,
            self.store.save(Stage::Prototypes, "bank", &hash, seed, &bank)?,
        ])
    }

    fn stage_cdm(&mut self) -> Result<Vec<ArtifactHandle>> {
        let bank: PrototypeBank = self.need(Stage::Prototypes, "bank", StageName::Prototypes, StageName::TrainCdm)?;
        let seed = self.cfg.seed;
        let cfg = self.cfg.cdm.clone();
        let ds = self.dataset()?;
        let train = ds.samples(Partition::TrainSeen);
        let input_dim = train.first().map_or(0, |s| s.image.len());
        let space = ds.space.clone();
        let backbone = ToyBackbone::new(input_dim, cfg.feature_dim, seed);
        let model = train_cdm(&train, backbone, &bank, &space, &cfg, seed)?;
        info!("cdm seen accuracy {:.3}", model.meta.final_seen_accuracy);
        Ok(vec![self.store.save(Stage::Cdm, "cdm", &self.hash(Stage::Cdm), seed, &model)?])
    }

    fn stage_dct(&mut self) -> Result<Vec<ArtifactHandle>> {
        let bank: PrototypeBank = self.need(Stage::Prototypes, "bank", StageName::Prototypes, StageName::LearnDct)?;
        let cdm = self.cdm(StageName::LearnDct)?;
        let generator = self.generator()?;
        let space = self.dataset()?.space.clone();
        let cfg = self.cfg.clone();
        let ctx = DctContext {
            generator: &generator,
            cdm: &cdm,
            bank: &bank,
            space: &space,
            gamma: cfg.dataset.gamma,
            sample: SampleOptions::from_config(&cfg.generator),
        };
        let unseen = space.unseen_ids();
        let states: Vec<TokenEmbeddingState> = unseen
            .par_iter()
            .enumerate()
            .map(|(slot, id)| {
                let name = space.name(id).expect("class name");
                let state = init_dct(id, name, &generator.encoder, slot)?;
                let class_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(slot as u64);
                optimize_dct(state, &ctx, &cfg.dct, class_seed)
            })
            .collect::<Result<_>>()?;
        let hash = self.hash(Stage::Dct);
        let mut handles = Vec::new();
        for s in &states {
            info!("token for {}: {} updates, stop {:?}", s.class_id, s.updates(), s.stop_reason);
            handles.push(self.store.save(Stage::Dct, &format!("token-{}", artifact_key(&s.class_id)), &hash, cfg.seed, s)?);
        }
        Ok(handles)
    }

    fn stage_generate(&mut self) -> Result<Vec<ArtifactHandle>> {
        let states = self.tokens(StageName::Generate)?;
        if !self.store.exists(Stage::Generator, "generator") {
            return Err(Error::Dependency("generate needs the trained generator; run the learn-dct stage first".into()));
        }
        let generator: ToyGenerator = self.store.load(Stage::Generator, "generator", Some(&self.hash(Stage::Generator)))?;
        let cfg = self.cfg.clone();
        let opts = SampleOptions::from_config(&cfg.generator);
        let sets: Vec<GeneratedSampleSet> = states
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let base = cfg.seed.wrapping_mul(1_000_003).wrapping_add((i * cfg.n_gen) as u64);
                synthesize_class_set(s, &generator, &cfg.dct.templates, cfg.n_gen, base, &opts)
            })
            .collect::<Result<_>>()?;
        let hash = self.hash(Stage::Generated);
        sets.iter()
            .map(|s| self.store.save(Stage::Generated, &format!("set-{}", artifact_key(&s.class_id)), &hash, cfg.seed, s))
            .collect()
    }

    fn stage_classifier(&mut self) -> Result<Vec<ArtifactHandle>> {
        let cdm = self.cdm(StageName::TrainClassifier)?;
        let sets = self.generated(StageName::TrainClassifier)?;
        let cfg = self.cfg.clone();
        let modes = self.modes();
        let ds = self.dataset()?;
        let seen = ds.samples(Partition::TrainSeen);
        let space = ds.space.clone();
        let hidden = 2 * cfg.prototypes.semantic_dim;
        let hash = cfg.stage_hash(Stage::Classifier);
        let mut handles = Vec::new();
        for mode in modes {
            let assembly = assemble_training_set(mode, &seen, &sets, &cdm.backbone, &space, cfg.classifier.seen_cap_per_class)?;
            let clf = train_classifier(&assembly, &space, &cfg.classifier, hidden, cfg.seed)?;
            info!("{mode} classifier train accuracy {:.3}", clf.meta.train_accuracy);
            handles.push(self.store.save(Stage::Classifier, mode_name(mode), &hash, cfg.seed, &clf)?);
        }
        Ok(handles)
    }

    /// Evaluate every configured mode and write the metrics file.
    pub fn evaluate(&mut self) -> Result<Vec<MetricsReport>> {
        let cdm = self.cdm(StageName::Evaluate)?;
        let sets = self.generated(StageName::Evaluate)?;
        let cfg = self.cfg.clone();
        let modes = self.modes();
        let lambda = match self.lambda_override {
            Some(l) => (l, LambdaSource::Override),
            None => (cfg.dataset.lambda, LambdaSource::Config),
        };
        let classifiers: Vec<ZslClassifier> = modes
            .iter()
            .map(|m| self.need(Stage::Classifier, mode_name(*m), StageName::TrainClassifier, StageName::Evaluate))
            .collect::<Result<_>>()?;
        let ds = self.dataset()?;
        let space = ds.space.clone();
        let test_unseen = ds.samples(Partition::TestUnseen);
        let test_seen = ds.samples(Partition::TestSeen);
        let backbone = &cdm.backbone;
        let fid = {
            let generated: Vec<&[f64]> = sets.iter().flat_map(|s| s.records.iter().map(|r| r.image.data.as_slice())).collect();
            let gen_feats = backbone.extract(&stack_rows(&generated));
            let real_feats = features_of(backbone, &test_unseen);
            fid_report(&FeatureSetSummary::from_features(&gen_feats)?, &FeatureSetSummary::from_features(&real_feats)?, &backbone.tag())?
        };
        let hash = cfg.stage_hash(Stage::Metrics);
        let mut reports = Vec::new();
        for clf in &classifiers {
            let mut report = match clf.mode {
                ZslMode::Czsl => {
                    let labels: Vec<ClassId> = test_unseen.iter().map(|s| s.class_id.clone()).collect();
                    evaluate_czsl(clf, &features_of(backbone, &test_unseen), &labels, &space, &hash)?
                }
                ZslMode::Gzsl => {
                    let all: Vec<LabeledImage> = test_seen.iter().chain(&test_unseen).cloned().collect();
                    let labels: Vec<ClassId> = all.iter().map(|s| s.class_id.clone()).collect();
                    let feats = features_of(backbone, &all);
                    let mut r = evaluate_gzsl(clf, &feats, &labels, &space, lambda, None, &hash)?;
                    let curve = digzsl_core::evaluator::calibration_sweep(clf, &feats, &labels, &space, &cfg.classifier.lambda_grid)?;
                    r.calibration = Some(curve);
                    r
                }
            };
            report.fid = Some(fid.clone());
            reports.push(report);
        }
        Ok(reports)
    }

    fn stage_evaluate(&mut self) -> Result<Vec<ArtifactHandle>> {
        let reports = self.evaluate()?;
        let path = self.store.root().join(METRICS_FILE);
        let summary = emit_report(&reports, &path)?;
        for line in summary.lines() {
            println!("{line}");
        }
        Ok(Vec::new())
    }

    fn stage_export(&mut self) -> Result<Vec<ArtifactHandle>> {
        let states = self.tokens(StageName::Export)?;
        let table = export_embeddings(&states)?;
        let path = self.store.root().join(EMBEDDINGS_FILE);
        fs::create_dir_all(self.store.root()).map_err(|e| Error::io(self.store.root(), e))?;
        fs::write(&path, table).map_err(|e| Error::io(&path, e))?;
        println!("exported {} token embeddings to {}", states.len(), path.display());
        Ok(Vec::new())
    }
}

fn mode_name(m: ZslMode) -> &'static str {
    match m {
        ZslMode::Czsl => "czsl",
        ZslMode::Gzsl => "gzsl",
    }
}

fn features_of(backbone: &dyn Backbone, samples: &[LabeledImage]) -> Matrix {
    let recs = extract_features(backbone, samples);
    let rows: Vec<&[f64]> = recs.iter().map(|r| r.features.as_slice()).collect();
    stack_rows(&rows)
}

/// Write the machine-readable metrics file and return the human summary.
pub fn emit_report(reports: &[MetricsReport], path: &Path) -> Result<String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(reports)?;
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    let mut out = String::new();
    for r in reports {
        for line in r.summary_lines() {
            out.push_str(&line);
            out.push('\n');
        }
    }
    out.push_str(&format!("metrics written to {}\n", path.display()));
    Ok(out)
}

pub fn read_report(path: &Path) -> Result<Vec<MetricsReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
