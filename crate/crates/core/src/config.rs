//! Run configuration, loaded from a TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::data::ToyShapesConfig;
use crate::error::{Error, Result};
use crate::store::Stage;

pub const PROTOTYPE_TEMPLATE: &str = "A photo of a [name]";
pub const NAME_PLACEHOLDER: &str = "[name]";
pub const TOKEN_PLACEHOLDER: &str = "S_*";

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl OptimizerConfig {
    /// Category-discrimination / classifier defaults.
    pub fn classifier_default() -> Self {
        OptimizerConfig { lr: 1e-3, beta1: 0.5, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, batch_size: 64 }
    }

    /// Class-token learning defaults.
    pub fn token_default() -> Self {
        OptimizerConfig { lr: 1.25e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, batch_size: 5 }
    }

    fn validate(&self, section: &str) -> Result<()> {
        let bad = |k: &str| Err(Error::Config(format!("[{section}] {k} out of range")));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr");
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1");
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2");
        }
        if !(self.eps > 0.0) {
            return bad("eps");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        Ok(())
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self::classifier_default()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    Czsl,
    Gzsl,
    Both,
}

impl EvalMode {
    pub fn czsl(self) -> bool {
        matches!(self, EvalMode::Czsl | EvalMode::Both)
    }

    pub fn gzsl(self) -> bool {
        matches!(self, EvalMode::Gzsl | EvalMode::Both)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Toy,
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// `toy` or one of the benchmark names.
    pub name: String,
    pub gamma: f64,
    pub lambda: f64,
    /// Split CSV for benchmark datasets (`image_id,class_id,partition`).
    pub split: Option<PathBuf>,
    /// Class CSV for benchmark datasets (`class_id,name,unseen`).
    pub classes: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { name: "toy".into(), gamma: 0.6, lambda: 0.8, split: None, classes: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrototypeConfig {
    pub template: String,
    /// Token embedding width of the toy text encoder.
    pub embedding_dim: usize,
    /// Output width of the toy text encoder (semantic space).
    pub semantic_dim: usize,
    /// Standard deviation of toy token embeddings.
    pub embedding_scale: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig {
            template: PROTOTYPE_TEMPLATE.into(),
            embedding_dim: 32,
            semantic_dim: 32,
            embedding_scale: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdmConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Cosine-logit temperature.
    pub tau: f64,
    /// Feature width of the toy backbone.
    pub feature_dim: usize,
    /// Fraction of seen training records held out for checkpoint selection.
    pub holdout_fraction: f64,
    /// Train the backbone together with the projector.
    pub fine_tune: bool,
    pub fine_tune_lr: f64,
}

impl Default for CdmConfig {
    fn default() -> Self {
        CdmConfig {
            optimizer: OptimizerConfig::classifier_default(),
            epochs: 60,
            tau: 0.05,
            feature_dim: 128,
            holdout_fraction: 0.1,
            fine_tune: false,
            fine_tune_lr: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sampling_steps: usize,
    pub guidance_scale: f64,
    /// Reverse steps the token gradient flows through; `None` means all.
    pub grad_depth: Option<usize>,
    pub hidden_dim: usize,
    pub cond_dim: usize,
    pub train_steps: usize,
    pub train_batch: usize,
    pub lr: f64,
    /// Probability of replacing the prompt by the empty prompt during training.
    pub cond_dropout: f64,
    /// Assumed per-entry variance of the denoiser's clean-image error; sets
    /// how much of the noisy input is passed straight through.
    pub residual_var: f64,
    /// Prompt templates used to caption seen-class training images.
    pub caption_templates: Vec<String>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            train_timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sampling_steps: 50,
            guidance_scale: 7.0,
            grad_depth: None,
            hidden_dim: 128,
            cond_dim: 64,
            train_steps: 2000,
            train_batch: 32,
            lr: 2e-3,
            cond_dropout: 0.1,
            residual_var: 0.01,
            caption_templates: vec![PROTOTYPE_TEMPLATE.into()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DctConfig {
    pub optimizer: OptimizerConfig,
    /// Early-stop budget in optimization steps.
    pub max_steps: usize,
    pub templates: Vec<String>,
    /// Draw fresh starting noise at every step instead of reusing one batch.
    pub resample_noise: bool,
}

impl Default for DctConfig {
    fn default() -> Self {
        DctConfig {
            optimizer: OptimizerConfig::token_default(),
            max_steps: 15,
            templates: vec![
                "A photo of S_* [name]".into(),
                "A photo of a S_* [name]".into(),
                "A cropped photo of S_* [name]".into(),
            ],
            resample_noise: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifierConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    /// Optional cap on real seen records per class in the generalized setting.
    pub seen_cap_per_class: Option<usize>,
    pub lambda_grid: Vec<f64>,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            optimizer: OptimizerConfig::classifier_default(),
            epochs: 60,
            seen_cap_per_class: None,
            lambda_grid: (0..=20).map(|i| i as f64 * 0.05).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub n_gen: usize,
    pub mode: EvalMode,
    pub backend: Backend,
    pub artifact_root: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub toy: ToyShapesConfig,
    pub prototypes: PrototypeConfig,
    pub cdm: CdmConfig,
    pub generator: GeneratorConfig,
    pub dct: DctConfig,
    pub classifier: ClassifierConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_gen: 100,
            mode: EvalMode::Both,
            backend: Backend::Toy,
            artifact_root: None,
            dataset: DatasetConfig::default(),
            toy: ToyShapesConfig::default(),
            prototypes: PrototypeConfig::default(),
            cdm: CdmConfig::default(),
            generator: GeneratorConfig::default(),
            dct: DctConfig::default(),
            classifier: ClassifierConfig::default(),
        }
    }
}

fn check_template(t: &str, with_token: bool, what: &str) -> Result<()> {
    if t.matches(NAME_PLACEHOLDER).count() != 1 {
        return Err(Error::Config(format!("{what} {t:?} must contain exactly one {NAME_PLACEHOLDER}")));
    }
    let tokens = t.matches(TOKEN_PLACEHOLDER).count();
    if with_token && tokens != 1 {
        return Err(Error::Config(format!("{what} {t:?} must contain exactly one {TOKEN_PLACEHOLDER}")));
    }
    if !with_token && tokens != 0 {
        return Err(Error::Config(format!("{what} {t:?} must not contain {TOKEN_PLACEHOLDER}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialization(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, k: &str| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} = {v} must lie in [0, 1]")))
            }
        };
        unit(self.dataset.gamma, "dataset.gamma")?;
        unit(self.dataset.lambda, "dataset.lambda")?;
        unit(self.generator.cond_dropout, "generator.cond_dropout")?;
        unit(self.cdm.holdout_fraction, "cdm.holdout_fraction")?;
        for l in &self.classifier.lambda_grid {
            unit(*l, "classifier.lambda_grid entry")?;
        }
        let positive = |v: usize, k: &str| {
            if v >= 1 {
                Ok(())
            } else {
                Err(Error::Config(format!("{k} must be at least 1")))
            }
        };
        positive(self.n_gen, "n_gen")?;
        positive(self.cdm.epochs, "cdm.epochs")?;
        positive(self.classifier.epochs, "classifier.epochs")?;
        positive(self.dct.max_steps, "dct.max_steps")?;
        positive(self.generator.sampling_steps, "generator.sampling_steps")?;
        positive(self.generator.train_timesteps, "generator.train_timesteps")?;
        positive(self.generator.train_steps, "generator.train_steps")?;
        positive(self.generator.train_batch, "generator.train_batch")?;
        positive(self.cdm.feature_dim, "cdm.feature_dim")?;
        positive(self.prototypes.embedding_dim, "prototypes.embedding_dim")?;
        positive(self.prototypes.semantic_dim, "prototypes.semantic_dim")?;
        if let Some(k) = self.generator.grad_depth {
            positive(k, "generator.grad_depth")?;
        }
        if self.generator.sampling_steps > self.generator.train_timesteps {
            return Err(Error::Config("generator.sampling_steps exceeds train_timesteps".into()));
        }
        if !(self.generator.residual_var > 0.0) {
            return Err(Error::Config("generator.residual_var must be strictly positive".into()));
        }
        if !(self.cdm.tau > 0.0) {
            return Err(Error::Config("cdm.tau must be strictly positive".into()));
        }
        if !(self.generator.beta_start > 0.0 && self.generator.beta_end < 1.0 && self.generator.beta_start <= self.generator.beta_end) {
            return Err(Error::Config("generator beta range must satisfy 0 < beta_start <= beta_end < 1".into()));
        }
        self.cdm.optimizer.validate("cdm.optimizer")?;
        self.dct.optimizer.validate("dct.optimizer")?;
        self.classifier.optimizer.validate("classifier.optimizer")?;
        check_template(&self.prototypes.template, false, "prototype template")?;
        if self.dct.templates.is_empty() {
            return Err(Error::Config("dct.templates must not be empty".into()));
        }
        for t in &self.dct.templates {
            check_template(t, true, "dct template")?;
        }
        for t in &self.generator.caption_templates {
            check_template(t, false, "caption template")?;
        }
        Ok(())
    }

    fn dataset_identity(&self) -> serde_json::Value {
        json!({
            "seed": self.seed,
            "backend": self.backend,
            "dataset": { "name": self.dataset.name, "split": self.dataset.split, "classes": self.dataset.classes },
            "toy": self.toy,
            "prototypes": self.prototypes,
        })
    }

    /// Hash of the configuration subset that determines the output of `stage`
    /// (its own settings plus everything upstream of it).
    pub fn stage_hash(&self, stage: Stage) -> String {
        let mut v = self.dataset_identity();
        let obj = v.as_object_mut().expect("object");
        let with_cdm = |o: &mut serde_json::Map<String, serde_json::Value>| {
            o.insert("cdm".into(), json!(self.cdm));
        };
        let with_gen = |o: &mut serde_json::Map<String, serde_json::Value>| {
            o.insert("generator".into(), json!(self.generator));
        };
        match stage {
            Stage::Prototypes => {}
            Stage::Cdm => with_cdm(obj),
            Stage::Generator => with_gen(obj),
            Stage::Dct | Stage::Generated | Stage::Classifier | Stage::Metrics => {
                with_cdm(obj);
                with_gen(obj);
                obj.insert("dct".into(), json!(self.dct));
                obj.insert("gamma".into(), json!(self.dataset.gamma));
                if stage >= Stage::Generated {
                    obj.insert("n_gen".into(), json!(self.n_gen));
                }
                if stage >= Stage::Classifier {
                    obj.insert("classifier".into(), json!(self.classifier));
                    obj.insert("mode".into(), json!(self.mode));
                }
                if stage >= Stage::Metrics {
                    obj.insert("lambda".into(), json!(self.dataset.lambda));
                }
            }
        }
        obj.insert("stage".into(), json!(stage.dir_name()));
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_published_settings() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let c = &cfg.cdm.optimizer;
        assert_eq!((c.lr, c.beta1, c.beta2, c.batch_size), (1e-3, 0.5, 0.999, 64));
        let d = &cfg.dct.optimizer;
        assert_eq!((d.lr, d.weight_decay, d.beta1, d.beta2, d.eps, d.batch_size), (1.25e-3, 0.01, 0.9, 0.999, 1e-8, 5));
        assert_eq!(cfg.dct.max_steps, 15);
        assert_eq!(cfg.dct.templates.len(), 3);
        assert_eq!(cfg.generator.guidance_scale, 7.0);
        assert_eq!(cfg.generator.sampling_steps, 50);
        assert_eq!(cfg.n_gen, 100);
        assert_eq!(cfg.prototypes.template, "A photo of a [name]");
        assert_eq!(cfg.classifier.optimizer, cfg.cdm.optimizer);
    }

    #[test]
    fn unknown_keys_are_rejected_with_location() {
        let err = RunConfig::from_toml_str("seed = 1\n[cdm]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert!(msg.contains("line 3") || msg.contains("3:"), "{msg}");
    }

    #[test]
    fn out_of_range_values_rejected() {
        assert!(RunConfig::from_toml_str("[dataset]\ngamma = 1.5\n").is_err());
        assert!(RunConfig::from_toml_str("n_gen = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[dct]\nmax_steps = 0\n").is_err());
        assert!(RunConfig::from_toml_str("[dct]\ntemplates = [\"A photo of [name]\"]\n").is_err());
        assert!(RunConfig::from_toml_str("[cdm]\ntau = 0.0\n").is_err());
    }

    #[test]
    fn partial_file_fills_defaults_and_round_trips() {
        let cfg = RunConfig::from_toml_str("seed = 9\n[dataset]\nname = \"CUB\"\ngamma = 0.4\nlambda = 0.95\n").unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.dataset.lambda, 0.95);
        assert_eq!(cfg.dct, DctConfig::default());
        let again = RunConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn stage_hash_only_depends_on_upstream_settings() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.dataset.lambda = 0.1;
        assert_eq!(a.stage_hash(Stage::Cdm), b.stage_hash(Stage::Cdm));
        assert_eq!(a.stage_hash(Stage::Classifier), b.stage_hash(Stage::Classifier));
        assert_ne!(a.stage_hash(Stage::Metrics), b.stage_hash(Stage::Metrics));
        b.dataset.gamma = 0.1;
        assert_eq!(a.stage_hash(Stage::Prototypes), b.stage_hash(Stage::Prototypes));
        assert_ne!(a.stage_hash(Stage::Dct), b.stage_hash(Stage::Dct));
        assert_ne!(a.stage_hash(Stage::Cdm), a.stage_hash(Stage::Prototypes));
    }
}
