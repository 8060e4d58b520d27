//! Final zero-shot classifier trained on generated unseen-class images (plus
//! real seen-class images in the generalized setting) with calibrated
//! inference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cdm::{argmax_first, extract_features, Backbone, FeatureRecord};
use crate::config::ClassifierConfig;
use crate::data::{ClassId, ClassSpace, LabeledImage};
use crate::dct::GeneratedSampleSet;
use crate::error::{Error, Result};
use crate::nn::{stack_rows, Activation, Mlp};
use crate::optim::AdamW;
use crate::store::Artifact;
use crate::tape::{softmax_rows, Matrix, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZslMode {
    /// Unseen classes only.
    Czsl,
    /// Seen and unseen classes.
    Gzsl,
}

impl fmt::Display for ZslMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ZslMode::Czsl => "czsl",
            ZslMode::Gzsl => "gzsl",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceTag {
    RealSeen,
    GeneratedUnseen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssemblyRecord {
    pub class_id: ClassId,
    pub source: SourceTag,
    pub features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingAssembly {
    pub mode: ZslMode,
    pub label_space: Vec<ClassId>,
    pub records: Vec<AssemblyRecord>,
}

impl TrainingAssembly {
    pub fn count(&self, source: SourceTag) -> usize {
        self.records.iter().filter(|r| r.source == source).count()
    }

    /// Check the mode invariants against `space`.
    pub fn validate(&self, space: &ClassSpace) -> Result<()> {
        for r in &self.records {
            match r.source {
                SourceTag::RealSeen if !space.is_seen(&r.class_id) => {
                    return Err(Error::Protocol(format!(
                        "real record of class {} in the classifier training data; only seen classes may contribute real images",
                        r.class_id
                    )));
                }
                SourceTag::RealSeen if self.mode == ZslMode::Czsl => {
                    return Err(Error::structural("conventional-setting assembly contains real seen records"));
                }
                SourceTag::GeneratedUnseen if !space.is_unseen(&r.class_id) => {
                    return Err(Error::structural(format!("generated record labeled with non-unseen class {}", r.class_id)));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Build the classifier training set. Generated images go through the same
/// backbone as the CDM; `seen_cap` limits real records per seen class.
pub fn assemble_training_set(
    mode: ZslMode,
    seen: &[LabeledImage],
    generated: &[GeneratedSampleSet],
    backbone: &dyn Backbone,
    space: &ClassSpace,
    seen_cap: Option<usize>,
) -> Result<TrainingAssembly> {
    for s in seen {
        if !space.is_seen(&s.class_id) {
            return Err(Error::Protocol(format!(
                "real image {} of class {} offered as seen training data",
                s.image_id, s.class_id
            )));
        }
    }
    let by_class: BTreeMap<&ClassId, &GeneratedSampleSet> = generated.iter().map(|g| (&g.class_id, g)).collect();
    for g in generated {
        if !space.is_unseen(&g.class_id) {
            return Err(Error::structural(format!("generated set for class {} which is not unseen", g.class_id)));
        }
    }
    let mut records = Vec::new();
    for id in space.unseen_ids() {
        let set = by_class
            .get(&id)
            .ok_or_else(|| Error::structural(format!("no generated images for unseen class {id}")))?;
        let rows: Vec<&[f64]> = set.records.iter().map(|r| r.image.data.as_slice()).collect();
        if rows.is_empty() {
            return Err(Error::structural(format!("generated set for unseen class {id} is empty")));
        }
        let feats = backbone.extract(&stack_rows(&rows));
        for f in feats.rows() {
            records.push(AssemblyRecord { class_id: id.clone(), source: SourceTag::GeneratedUnseen, features: f.to_vec() });
        }
    }
    let label_space = match mode {
        ZslMode::Czsl => space.unseen_ids(),
        ZslMode::Gzsl => {
            let mut kept: Vec<&LabeledImage> = Vec::new();
            let mut per_class: BTreeMap<&ClassId, usize> = BTreeMap::new();
            for s in seen {
                let n = per_class.entry(&s.class_id).or_default();
                if seen_cap.is_none_or(|cap| *n < cap) {
                    *n += 1;
                    kept.push(s);
                }
            }
            let owned: Vec<LabeledImage> = kept.into_iter().cloned().collect();
            for FeatureRecord { class_id, features } in extract_features(backbone, &owned) {
                records.push(AssemblyRecord { class_id, source: SourceTag::RealSeen, features });
            }
            space.all_ids()
        }
    };
    let assembly = TrainingAssembly { mode, label_space, records };
    assembly.validate(space)?;
    Ok(assembly)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub epochs: usize,
    pub steps: usize,
    pub train_accuracy: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

/// MLP over backbone features with a softmax over `label_space`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZslClassifier {
    pub mode: ZslMode,
    pub label_space: Vec<ClassId>,
    pub seen_mask: Vec<bool>,
    pub mlp: Mlp,
    pub meta: ClassifierMeta,
}

impl Artifact for ZslClassifier {
    const KIND: &'static str = "zsl-classifier";

    fn dims(&self) -> Vec<usize> {
        vec![self.mlp.input_dim(), self.label_space.len()]
    }
}

impl ZslClassifier {
    /// Softmax outputs, one row per feature row, columns in label-space order.
    pub fn probabilities(&self, features: &Matrix) -> Result<Matrix> {
        if features.ncols() != self.mlp.input_dim() {
            return Err(Error::structural(format!(
                "features have width {}, classifier expects {}",
                features.ncols(),
                self.mlp.input_dim()
            )));
        }
        Ok(softmax_rows(&self.mlp.eval(features)))
    }

    pub fn index_of(&self, id: &ClassId) -> Option<usize> {
        self.label_space.binary_search(id).ok()
    }
}

/// `argmax_c (o_c − λ·1[c seen])`, ties to the lowest index.
pub fn calibrated_argmax(probs: &[f64], seen_mask: &[bool], lambda: f64) -> usize {
    argmax_first(probs.iter().zip(seen_mask).map(|(p, s)| if *s { p - lambda } else { *p }))
}

/// Calibrated prediction for one feature vector.
pub fn predict_calibrated(clf: &ZslClassifier, feature: &[f64], lambda: f64) -> Result<ClassId> {
    let probs = clf.probabilities(&stack_rows(&[feature]))?;
    Ok(clf.label_space[calibrated_argmax(probs.row(0).as_slice().expect("row"), &clf.seen_mask, lambda)].clone())
}

/// Calibrated predictions for every row of `features`.
pub fn predict_calibrated_batch(clf: &ZslClassifier, features: &Matrix, lambda: f64) -> Result<Vec<ClassId>> {
    let probs = clf.probabilities(features)?;
    Ok(probs
        .rows()
        .into_iter()
        .map(|r| clf.label_space[calibrated_argmax(r.as_slice().expect("row"), &clf.seen_mask, lambda)].clone())
        .collect())
}

/// Train the classifier on `assembly` with minibatch cross-entropy.
pub fn train_classifier(
    assembly: &TrainingAssembly,
    space: &ClassSpace,
    cfg: &ClassifierConfig,
    hidden_dim: usize,
    seed: u64,
) -> Result<ZslClassifier> {
    assembly.validate(space)?;
    if assembly.records.is_empty() {
        return Err(Error::structural("classifier training set is empty"));
    }
    let present: BTreeSet<&ClassId> = assembly.records.iter().map(|r| &r.class_id).collect();
    if assembly.mode == ZslMode::Gzsl && present.len() < 2 {
        return Err(Error::structural("generalized-setting classifier needs at least two classes"));
    }
    let mut label_space = assembly.label_space.clone();
    label_space.sort();
    label_space.dedup();
    let labels: Vec<usize> = assembly
        .records
        .iter()
        .map(|r| {
            label_space
                .binary_search(&r.class_id)
                .map_err(|_| Error::structural(format!("record class {} outside the label space", r.class_id)))
        })
        .collect::<Result<_>>()?;
    let rows: Vec<&[f64]> = assembly.records.iter().map(|r| r.features.as_slice()).collect();
    let x = stack_rows(&rows);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636c_6173);
    let mut mlp = Mlp::new(&[x.ncols(), hidden_dim, label_space.len()], Activation::Relu, &mut rng);
    let mut opt = AdamW::new(&cfg.optimizer);
    let mut order: Vec<usize> = (0..x.nrows()).collect();
    let mut steps = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.optimizer.batch_size.max(1)) {
            let xb = x.select(ndarray::Axis(0), batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(xb);
            let vars = mlp.bind(&mut tape, true);
            let logits = mlp.forward(&mut tape, &vars, xv);
            let loss = tape.softmax_cross_entropy(logits, &yb);
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Numerical { step: steps, detail: "non-finite classifier loss".into() });
            }
            let grads = tape.backward(loss);
            let g: Vec<Matrix> = Mlp::param_vars(&vars).iter().zip(mlp.params()).map(|(v, p)| grads.get_or_zeros(*v, p)).collect();
            opt.step(&mut mlp.params_mut(), &g);
            steps += 1;
        }
    }
    let seen_mask = label_space.iter().map(|c| space.is_seen(c)).collect();
    let mut clf = ZslClassifier {
        mode: assembly.mode,
        label_space,
        seen_mask,
        mlp,
        meta: ClassifierMeta {
            epochs: cfg.epochs,
            steps,
            train_accuracy: 0.0,
            lr: cfg.optimizer.lr,
            beta1: cfg.optimizer.beta1,
            beta2: cfg.optimizer.beta2,
            weight_decay: cfg.optimizer.weight_decay,
            batch_size: cfg.optimizer.batch_size,
        },
    };
    let pred = predict_calibrated_batch(&clf, &x, 0.0)?;
    let correct = pred.iter().zip(&assembly.records).filter(|(p, r)| **p == r.class_id).count();
    clf.meta.train_accuracy = correct as f64 / x.nrows() as f64;
    Ok(clf)
}
