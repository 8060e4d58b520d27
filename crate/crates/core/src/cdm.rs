//! Category discrimination model: frozen backbone features projected into the
//! prototype space and scored by cosine similarity.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::CdmConfig;
use crate::data::{ClassId, ClassSpace, LabeledImage};
use crate::error::{Error, Result};
use crate::nn::{stack_rows, Activation, Mlp};
use crate::optim::AdamW;
use crate::prototypes::{cosine, PrototypeBank};
use crate::store::Artifact;
use crate::tape::{Matrix, Tape, Var};

/// Image feature extractor.
pub trait Backbone {
    fn tag(&self) -> String;
    fn input_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Features for a batch of flattened images (one per row).
    fn extract(&self, images: &Matrix) -> Matrix;
    /// Record the extraction on `tape` with the backbone weights as constants.
    fn forward_on_tape(&self, tape: &mut Tape, images: Var) -> Var;
}

/// Fixed random projection of centred pixels followed by `tanh`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyBackbone {
    pub seed: u64,
    pub projection: Matrix,
}

impl ToyBackbone {
    pub fn new(input_dim: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6261_636b_626f_6e65);
        // Pixels are centred at 0.5; the gain keeps pre-activations near unit scale.
        let normal = Normal::new(0.0, 3.0 / (input_dim as f64).sqrt()).expect("std");
        ToyBackbone { seed, projection: Matrix::from_shape_simple_fn((input_dim, feature_dim), || normal.sample(&mut rng)) }
    }

    fn forward_with(tape: &mut Tape, projection: Var, images: Var) -> Var {
        let centred = {
            let n = tape.value(images).ncols();
            let shift = tape.row(&vec![-0.5; n]);
            tape.add_row(images, shift)
        };
        let h = tape.matmul(centred, projection);
        tape.tanh(h)
    }
}

impl Backbone for ToyBackbone {
    fn tag(&self) -> String {
        format!("toy-random-projection(seed={},d_v={})", self.seed, self.feature_dim())
    }

    fn input_dim(&self) -> usize {
        self.projection.nrows()
    }

    fn feature_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn extract(&self, images: &Matrix) -> Matrix {
        let mut h = (images - 0.5).dot(&self.projection);
        h.mapv_inplace(f64::tanh);
        h
    }

    fn forward_on_tape(&self, tape: &mut Tape, images: Var) -> Var {
        let p = tape.constant(self.projection.clone());
        Self::forward_with(tape, p, images)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub class_id: ClassId,
    pub features: Vec<f64>,
}

/// Backbone features for a set of labeled images.
pub fn extract_features(backbone: &dyn Backbone, images: &[LabeledImage]) -> Vec<FeatureRecord> {
    const CHUNK: usize = 256;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(CHUNK) {
        let rows: Vec<&[f64]> = chunk.iter().map(|s| s.image.data.as_slice()).collect();
        let feats = backbone.extract(&stack_rows(&rows));
        for (s, f) in chunk.iter().zip(feats.rows()) {
            out.push(FeatureRecord { class_id: s.class_id.clone(), features: f.to_vec() });
        }
    }
    out
}

/// Cosine scores of one projected vector against a class subset, kept in the
/// fixed class order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassScores {
    scores: BTreeMap<ClassId, f64>,
}

impl ClassScores {
    pub fn from_map(scores: BTreeMap<ClassId, f64>) -> Self {
        ClassScores { scores }
    }

    pub fn get(&self, id: &ClassId) -> Option<f64> {
        self.scores.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ClassId, f64)> {
        self.scores.iter().map(|(k, v)| (k, *v))
    }

    /// Highest score; ties go to the lowest class id.
    pub fn argmax(&self) -> Option<&ClassId> {
        let mut best: Option<(&ClassId, f64)> = None;
        for (id, s) in self.iter() {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((id, s));
            }
        }
        best.map(|(id, _)| id)
    }

    /// `softmax(s / tau)` in class order.
    pub fn probabilities(&self, tau: f64) -> BTreeMap<ClassId, f64> {
        let max = self.scores.values().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let exps: Vec<f64> = self.scores.values().map(|s| ((s - max) / tau).exp()).collect();
        let z: f64 = exps.iter().sum();
        self.scores.keys().cloned().zip(exps.into_iter().map(|e| e / z)).collect()
    }
}

/// Cosine score of `projected` against each class of `subset`.
pub fn class_scores(projected: &[f64], bank: &PrototypeBank, subset: &[ClassId]) -> Result<ClassScores> {
    if subset.is_empty() {
        return Err(Error::structural("class subset is empty"));
    }
    let mut scores = BTreeMap::new();
    for id in subset {
        let proto = bank.get(id).ok_or_else(|| Error::structural(format!("class {id} has no prototype")))?;
        scores.insert(id.clone(), cosine(projected, proto)?);
    }
    Ok(ClassScores { scores })
}

/// `-log(exp(s_target/τ) / Σ exp(s_c/τ))`.
pub fn ce_loss(scores: &ClassScores, target: &ClassId, tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    let st = scores
        .get(target)
        .ok_or_else(|| Error::structural(format!("target class {target} has no score")))?;
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, (_, v)| m.max(v / tau));
    let lse = max + scores.iter().map(|(_, v)| (v / tau - max).exp()).sum::<f64>().ln();
    Ok(lse - st / tau)
}

/// Mean of [`ce_loss`] over a batch.
pub fn ce_loss_batch(batch: &[(ClassScores, ClassId)], tau: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::structural("empty batch"));
    }
    let mut total = 0.0;
    for (s, t) in batch {
        total += ce_loss(s, t, tau)?;
    }
    Ok(total / batch.len() as f64)
}

/// Trainable head mapping backbone features to the prototype space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Projector {
    pub mlp: Mlp,
    pub tau: f64,
}

impl Projector {
    /// One hidden layer of width `2·d_t` with ReLU.
    pub fn new(feature_dim: usize, semantic_dim: usize, tau: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6a);
        Projector { mlp: Mlp::new(&[feature_dim, 2 * semantic_dim, semantic_dim], Activation::Relu, &mut rng), tau }
    }

    pub fn from_mlp(mlp: Mlp, tau: f64) -> Result<Self> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {tau}")));
        }
        Ok(Projector { mlp, tau })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CdmMeta {
    pub epochs: usize,
    pub steps: usize,
    pub train_accuracy: f64,
    /// Macro accuracy on held-out seen records (or training records when
    /// nothing was held out) of the selected checkpoint.
    pub final_seen_accuracy: f64,
    pub selected_epoch: usize,
    pub fine_tuned: bool,
    /// Number of records per label that training read.
    pub touched_labels: BTreeMap<ClassId, usize>,
    pub seen_classes: Vec<ClassId>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CdmModel {
    pub backbone: ToyBackbone,
    pub backbone_tag: String,
    pub projector: Projector,
    pub meta: CdmMeta,
}

impl Artifact for CdmModel {
    const KIND: &'static str = "cdm-model";

    fn dims(&self) -> Vec<usize> {
        vec![self.backbone.feature_dim(), self.projector.mlp.output_dim()]
    }
}

impl CdmModel {
    pub fn new(backbone: ToyBackbone, projector: Projector) -> Result<Self> {
        if projector.mlp.input_dim() != backbone.feature_dim() {
            return Err(Error::structural(format!(
                "projector expects {} features, backbone yields {}",
                projector.mlp.input_dim(),
                backbone.feature_dim()
            )));
        }
        Ok(CdmModel { backbone_tag: backbone.tag(), backbone, projector, meta: CdmMeta::default() })
    }

    pub fn tau(&self) -> f64 {
        self.projector.tau
    }

    pub fn semantic_dim(&self) -> usize {
        self.projector.mlp.output_dim()
    }

    /// Projected feature `a = projector(f)`.
    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let d = self.projector.mlp.input_dim();
        if feature.len() != d {
            return Err(Error::structural(format!("feature has dimension {}, projector expects {d}", feature.len())));
        }
        Ok(self.projector.mlp.eval(&stack_rows(&[feature])).row(0).to_vec())
    }

    pub fn project_batch(&self, features: &Matrix) -> Matrix {
        self.projector.mlp.eval(features)
    }

    /// Record image → projected feature on `tape`; every CDM weight is constant.
    pub fn project_images_on_tape(&self, tape: &mut Tape, images: Var) -> Var {
        let f = self.backbone.forward_on_tape(tape, images);
        let vars = self.projector.mlp.bind(tape, false);
        self.projector.mlp.forward(tape, &vars, f)
    }

    /// Predicted class index into `subset` for every feature row.
    pub fn predict(&self, features: &Matrix, bank: &PrototypeBank, subset: &[ClassId]) -> Result<Vec<usize>> {
        let protos = bank.unit_matrix(subset)?;
        let projected = self.project_batch(features);
        let mut out = Vec::with_capacity(projected.nrows());
        for (i, row) in projected.rows().into_iter().enumerate() {
            let n = row.dot(&row).sqrt();
            if !(n > 0.0) {
                return Err(Error::Degenerate(format!("projected feature {i} has zero norm")));
            }
            let scores = row.dot(&protos) / n;
            out.push(argmax_first(scores.iter().copied()));
        }
        Ok(out)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax_first(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Macro-averaged Top-1 accuracy of predicted vs true indices into `n_classes`
/// classes; classes without records are skipped.
pub(crate) fn macro_accuracy(pred: &[usize], truth: &[usize], n_classes: usize) -> f64 {
    let mut correct = vec![0usize; n_classes];
    let mut total = vec![0usize; n_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        total[t] += 1;
        if p == t {
            correct[t] += 1;
        }
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&correct)
        .filter(|(t, _)| **t > 0)
        .map(|(t, c)| *c as f64 / *t as f64)
        .collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

fn label_indices(records: &[FeatureRecord], subset: &[ClassId]) -> Result<Vec<usize>> {
    records
        .iter()
        .map(|r| {
            subset
                .iter()
                .position(|c| *c == r.class_id)
                .ok_or_else(|| Error::structural(format!("record label {} is outside the evaluated subset", r.class_id)))
        })
        .collect()
}

/// Per-class Top-1 accuracy of the CDM over `subset`, macro-averaged.
pub fn cdm_accuracy(model: &CdmModel, bank: &PrototypeBank, records: &[FeatureRecord], subset: &[ClassId]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::structural("no records to evaluate"));
    }
    let mut subset = subset.to_vec();
    subset.sort();
    let truth = label_indices(records, &subset)?;
    let rows: Vec<&[f64]> = records.iter().map(|r| r.features.as_slice()).collect();
    let pred = model.predict(&stack_rows(&rows), bank, &subset)?;
    Ok(macro_accuracy(&pred, &truth, subset.len()))
}

/// Reject any record whose label is not a seen class.
pub(crate) fn check_seen_only<'a>(labels: impl Iterator<Item = &'a ClassId>, space: &ClassSpace, stage: &str) -> Result<()> {
    for id in labels {
        if space.is_unseen(id) {
            return Err(Error::Protocol(format!(
                "{stage} received a record of unseen class {id}; only seen-class data may be used"
            )));
        }
        if !space.is_seen(id) {
            return Err(Error::structural(format!("{stage} received a record of unknown class {id}")));
        }
    }
    Ok(())
}

fn split_holdout(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let held = ((n as f64) * fraction).floor() as usize;
    let held = held.min(n.saturating_sub(1));
    let holdout = idx[..held].to_vec();
    let train = idx[held..].to_vec();
    (train, holdout)
}

/// Train the projector on frozen features of seen-class images.
pub fn train_projector(
    features: &[FeatureRecord],
    backbone: ToyBackbone,
    bank: &PrototypeBank,
    space: &ClassSpace,
    cfg: &CdmConfig,
    seed: u64,
) -> Result<CdmModel> {
    check_seen_only(features.iter().map(|r| &r.class_id), space, "CDM training")?;
    if features.is_empty() {
        return Err(Error::structural("CDM training needs at least one record"));
    }
    let seen = space.seen_ids();
    let protos = bank.unit_matrix(&seen)?;
    let projector = Projector::new(backbone.feature_dim(), bank.dim, cfg.tau, seed);
    let mut model = CdmModel::new(backbone, projector)?;

    let mut touched = BTreeMap::new();
    for r in features {
        *touched.entry(r.class_id.clone()).or_insert(0usize) += 1;
    }
    let labels = label_indices(features, &seen)?;
    let rows: Vec<&[f64]> = features.iter().map(|r| r.features.as_slice()).collect();
    let all = stack_rows(&rows);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6364_6d74);
    let (train_idx, holdout_idx) = split_holdout(features.len(), cfg.holdout_fraction, &mut rng);
    let select_idx = if holdout_idx.is_empty() { train_idx.clone() } else { holdout_idx.clone() };
    let select_x = all.select(ndarray::Axis(0), &select_idx);
    let select_y: Vec<usize> = select_idx.iter().map(|&i| labels[i]).collect();

    let mut opt = AdamW::new(&cfg.optimizer);
    let mut order = train_idx.clone();
    let mut best = (f64::NEG_INFINITY, 0usize, model.projector.mlp.clone());
    let mut steps = 0;
    let inv_tau = 1.0 / cfg.tau;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let x = all.select(ndarray::Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let vars = model.projector.mlp.bind(&mut tape, true);
            let a = model.projector.mlp.forward(&mut tape, &vars, xv);
            let unit = tape.row_normalize(a)?;
            let pv = tape.constant(protos.clone());
            let s = tape.matmul(unit, pv);
            let logits = tape.scale(s, inv_tau);
            let loss = tape.softmax_cross_entropy(logits, &y);
            if !tape.scalar(loss).is_finite() {
                return Err(Error::Numerical { step: steps, detail: "non-finite CDM loss".into() });
            }
            let grads = tape.backward(loss);
            let pvars = Mlp::param_vars(&vars);
            let g: Vec<Matrix> = pvars
                .iter()
                .zip(model.projector.mlp.params())
                .map(|(v, p)| grads.get_or_zeros(*v, p))
                .collect();
            opt.step(&mut model.projector.mlp.params_mut(), &g);
            steps += 1;
        }
        let pred = model.predict(&select_x, bank, &seen)?;
        let acc = macro_accuracy(&pred, &select_y, seen.len());
        if acc > best.0 {
            best = (acc, epoch + 1, model.projector.mlp.clone());
        }
    }
    model.projector.mlp = best.2;
    let train_x = all.select(ndarray::Axis(0), &train_idx);
    let train_y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let train_acc = macro_accuracy(&model.predict(&train_x, bank, &seen)?, &train_y, seen.len());
    model.meta = CdmMeta {
        epochs: cfg.epochs,
        steps,
        train_accuracy: train_acc,
        final_seen_accuracy: best.0,
        selected_epoch: best.1,
        fine_tuned: false,
        touched_labels: touched,
        seen_classes: seen,
    };
    Ok(model)
}

/// Train the category discrimination model on seen-class images.
///
/// In the default mode the backbone stays frozen and only the projector is
/// trained. With `cfg.fine_tune` the backbone projection is trained jointly
/// (at `cfg.fine_tune_lr`) after the projector-only run.
pub fn train_cdm(
    images: &[LabeledImage],
    backbone: ToyBackbone,
    bank: &PrototypeBank,
    space: &ClassSpace,
    cfg: &CdmConfig,
    seed: u64,
) -> Result<CdmModel> {
    check_seen_only(images.iter().map(|s| &s.class_id), space, "CDM training")?;
    let features = extract_features(&backbone, images);
    let mut model = train_projector(&features, backbone, bank, space, cfg, seed)?;
    if cfg.fine_tune {
        fine_tune(&mut model, images, bank, space, cfg, seed)?;
    }
    Ok(model)
}

fn fine_tune(model: &mut CdmModel, images: &[LabeledImage], bank: &PrototypeBank, space: &ClassSpace, cfg: &CdmConfig, seed: u64) -> Result<()> {
    let seen = space.seen_ids();
    let protos = bank.unit_matrix(&seen)?;
    let records: Vec<FeatureRecord> =
        images.iter().map(|s| FeatureRecord { class_id: s.class_id.clone(), features: Vec::new() }).collect();
    let labels = label_indices(&records, &seen)?;
    let rows: Vec<&[f64]> = images.iter().map(|s| s.image.data.as_slice()).collect();
    let all = stack_rows(&rows);
    let mut opt_cfg = cfg.optimizer.clone();
    opt_cfg.lr = cfg.fine_tune_lr;
    let mut opt = AdamW::new(&opt_cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6674);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let epochs = (cfg.epochs / 4).max(1);
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.optimizer.batch_size) {
            let x = all.select(ndarray::Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let pvar = tape.param(model.backbone.projection.clone());
            let f = ToyBackbone::forward_with(&mut tape, pvar, xv);
            let vars = model.projector.mlp.bind(&mut tape, true);
            let a = model.projector.mlp.forward(&mut tape, &vars, f);
            let unit = tape.row_normalize(a)?;
            let pv = tape.constant(protos.clone());
            let s = tape.matmul(unit, pv);
            let logits = tape.scale(s, 1.0 / cfg.tau);
            let loss = tape.softmax_cross_entropy(logits, &y);
            let grads = tape.backward(loss);
            let mut g = vec![grads.get_or_zeros(pvar, &model.backbone.projection)];
            for (v, p) in Mlp::param_vars(&vars).iter().zip(model.projector.mlp.params()) {
                g.push(grads.get_or_zeros(*v, p));
            }
            let mut params: Vec<&mut Matrix> = vec![&mut model.backbone.projection];
            params.extend(model.projector.mlp.params_mut());
            opt.step(&mut params, &g);
        }
    }
    model.backbone_tag = format!("{}+fine-tuned", model.backbone.tag());
    model.meta.fine_tuned = true;
    let feats = extract_features(&model.backbone, images);
    model.meta.train_accuracy = cdm_accuracy(model, bank, &feats, &seen)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use rand::Rng;

    fn bank_of(vectors: &[(&str, Vec<f64>)]) -> PrototypeBank {
        let entries = vectors.iter().map(|(k, v)| (ClassId::from(*k), v.clone())).collect();
        PrototypeBank::from_entries("t", "test", entries).unwrap()
    }

    fn ids(v: &[&str]) -> Vec<ClassId> {
        v.iter().map(|s| ClassId::from(*s)).collect()
    }

    fn one_hot(d: usize, i: usize) -> Vec<f64> {
        (0..d).map(|j| if i == j { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identity_projector_and_zero_bias() {
        let bb = ToyBackbone::new(4, 3, 0);
        let proj = Projector::from_mlp(Mlp { layers: vec![Linear::identity(3)], activation: Activation::Relu }, 1.0).unwrap();
        let model = CdmModel::new(bb.clone(), proj).unwrap();
        assert_eq!(model.project(&[0.5, -1.0, 2.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        assert!(model.project(&[1.0]).is_err());

        let proj = Projector::new(3, 2, 0.05, 1);
        let model = CdmModel::new(bb, proj).unwrap();
        assert_eq!(model.project(&[0.0; 3]).unwrap(), vec![0.0; 2]);
    }

    #[test]
    fn projection_matches_dense_oracle() {
        let proj = Projector::new(5, 3, 0.05, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        // Oracle: explicit loops over the stored weights.
        let mut h = f.clone();
        for (li, layer) in proj.mlp.layers.iter().enumerate() {
            let mut next = vec![0.0; layer.output_dim()];
            for (j, n) in next.iter_mut().enumerate() {
                *n = layer.bias[[0, j]] + (0..h.len()).map(|i| h[i] * layer.weight[[i, j]]).sum::<f64>();
                if li + 1 < proj.mlp.layers.len() {
                    *n = n.max(0.0);
                }
            }
            h = next;
        }
        let model = CdmModel::new(ToyBackbone::new(2, 5, 0), proj).unwrap();
        let got = model.project(&f).unwrap();
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn scores_against_orthogonal_prototypes() {
        let bank = bank_of(&[("a", one_hot(3, 0)), ("b", one_hot(3, 1)), ("c", one_hot(3, 2))]);
        let s = class_scores(&one_hot(3, 1), &bank, &ids(&["a", "b", "c"])).unwrap();
        assert_eq!(s.get(&"b".into()), Some(1.0));
        assert_eq!(s.get(&"a".into()), Some(0.0));
        assert_eq!(s.argmax(), Some(&"b".into()));

        let single = class_scores(&one_hot(3, 1), &bank, &ids(&["c"])).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single.probabilities(1.0)[&ClassId::from("c")], 1.0);

        assert!(matches!(class_scores(&[0.0; 3], &bank, &ids(&["a"])), Err(Error::Degenerate(_))));
        assert!(class_scores(&one_hot(3, 0), &bank, &[]).is_err());
    }

    #[test]
    fn argmax_ties_go_to_lowest_id() {
        let bank = bank_of(&[("a", vec![1.0, 1.0]), ("b", vec![1.0, 1.0])]);
        let s = class_scores(&[1.0, 0.0], &bank, &ids(&["b", "a"])).unwrap();
        assert_eq!(s.argmax(), Some(&"a".into()));
    }

    #[test]
    fn scores_match_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let names = ["c0", "c1", "c2", "c3", "c4"];
        let vecs: Vec<(&str, Vec<f64>)> =
            names.iter().map(|n| (*n, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())).collect();
        let bank = bank_of(&vecs);
        for _ in 0..50 {
            let p: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = class_scores(&p, &bank, &ids(&names)).unwrap();
            let mut best = (0, f64::NEG_INFINITY);
            for (i, (_, v)) in vecs.iter().enumerate() {
                let dot: f64 = p.iter().zip(v).map(|(a, b)| a * b).sum();
                let c = dot / (p.iter().map(|a| a * a).sum::<f64>().sqrt() * v.iter().map(|a| a * a).sum::<f64>().sqrt());
                assert!((s.get(&names[i].into()).unwrap() - c).abs() < 1e-12);
                if c > best.1 {
                    best = (i, c);
                }
            }
            assert_eq!(s.argmax(), Some(&names[best.0].into()));
            let scaled: Vec<f64> = p.iter().map(|x| 7.5 * x).collect();
            assert_eq!(class_scores(&scaled, &bank, &ids(&names)).unwrap().argmax(), s.argmax());
        }
    }

    #[test]
    fn cross_entropy_cases() {
        let one = ClassScores::from_map([(ClassId::from("a"), 0.3)].into_iter().collect());
        assert_eq!(ce_loss(&one, &"a".into(), 1.0).unwrap(), 0.0);
        let two = ClassScores::from_map([("a", 0.4), ("b", 0.4)].map(|(k, v)| (ClassId::from(k), v)).into_iter().collect());
        assert!((ce_loss(&two, &"a".into(), 1.0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(ce_loss(&two, &"z".into(), 1.0).is_err());
        assert!(ce_loss(&two, &"a".into(), 0.0).is_err());
    }

    /// Oracle: log-sum-exp with compensated summation of the exponentials.
    fn ce_oracle(scores: &[f64], target: usize, tau: f64) -> f64 {
        let (mut s, mut c) = (0.0f64, 0.0f64);
        for v in scores {
            let y = (v / tau).exp() - c;
            let t = s + y;
            c = (t - s) - y;
            s = t;
        }
        s.ln() - scores[target] / tau
    }

    #[test]
    fn cross_entropy_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let v: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let target = rng.random_range(0..4);
            let map = ["a", "b", "c", "d"].iter().zip(&v).map(|(k, s)| (ClassId::from(*k), *s)).collect();
            let scores = ClassScores::from_map(map);
            let got = ce_loss(&scores, &["a", "b", "c", "d"][target].into(), 1.0).unwrap();
            assert!((got - ce_oracle(&v, target, 1.0)).abs() < 1e-10);
        }
    }

    fn separable_setup(n_per: usize) -> (Vec<FeatureRecord>, PrototypeBank, ClassSpace) {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let space = ClassSpace::new([("a", "A"), ("b", "B"), ("c", "C"), ("u", "U")].map(|(i, n)| (ClassId::from(i), n)), &ids(&["u"])).unwrap();
        let bank = bank_of(&[("a", one_hot(4, 0)), ("b", one_hot(4, 1)), ("c", one_hot(4, 2)), ("u", one_hot(4, 3))]);
        let mut recs = Vec::new();
        for (k, id) in ["a", "b", "c"].iter().enumerate() {
            for _ in 0..n_per {
                let mut f: Vec<f64> = (0..6).map(|_| rng.random_range(-0.1..0.1)).collect();
                f[k] += 1.0;
                recs.push(FeatureRecord { class_id: (*id).into(), features: f });
            }
        }
        (recs, bank, space)
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let (recs, bank, space) = separable_setup(40);
        // 120 records, batch 64 → 2 steps per epoch; 100 epochs = 200 steps.
        let cfg = CdmConfig { epochs: 100, holdout_fraction: 0.0, ..CdmConfig::default() };
        let model = train_projector(&recs, ToyBackbone::new(2, 6, 0), &bank, &space, &cfg, 1).unwrap();
        assert!(model.meta.steps <= 200);
        assert_eq!(model.meta.train_accuracy, 1.0);
        assert_eq!(cdm_accuracy(&model, &bank, &recs, &ids(&["a", "b", "c"])).unwrap(), 1.0);
        assert_eq!(model.meta.touched_labels.len(), 3);
        assert!(!model.meta.touched_labels.contains_key(&ClassId::from("u")));
    }

    #[test]
    fn unseen_label_is_a_protocol_violation() {
        let (mut recs, bank, space) = separable_setup(5);
        recs.push(FeatureRecord { class_id: "u".into(), features: vec![0.0; 6] });
        let err = train_projector(&recs, ToyBackbone::new(2, 6, 0), &bank, &space, &CdmConfig::default(), 0).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn single_seen_class_has_zero_gradients() {
        let space = ClassSpace::new([("a", "A"), ("u", "U")].map(|(i, n)| (ClassId::from(i), n)), &ids(&["u"])).unwrap();
        let bank = bank_of(&[("a", one_hot(2, 0)), ("u", one_hot(2, 1))]);
        let recs: Vec<FeatureRecord> = (0..10).map(|i| FeatureRecord { class_id: "a".into(), features: vec![i as f64 * 0.1 + 0.1, 1.0] }).collect();
        let mut cfg = CdmConfig { epochs: 1, holdout_fraction: 0.0, ..CdmConfig::default() };
        cfg.optimizer.weight_decay = 0.0;
        let initial = Projector::new(2, 2, cfg.tau, 4);
        let model = train_projector(&recs, ToyBackbone::new(1, 2, 0), &bank, &space, &cfg, 4).unwrap();
        assert_eq!(model.projector.mlp, initial.mlp);
    }

    #[test]
    fn macro_accuracy_ignores_class_sizes() {
        let truth: Vec<usize> = [vec![0; 10], vec![1; 1000]].concat();
        let pred: Vec<usize> = [vec![0; 10], vec![0; 1000]].concat();
        assert_eq!(macro_accuracy(&pred, &truth, 2), 0.5);
    }

    #[test]
    fn cdm_accuracy_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let names = ["a", "b", "c"];
        let bank = bank_of(&names.map(|n| (n, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())));
        let model = CdmModel::new(ToyBackbone::new(2, 5, 0), Projector::new(5, 16, 0.05, 3)).unwrap();
        let recs: Vec<FeatureRecord> = (0..60)
            .map(|i| FeatureRecord { class_id: names[i % 3].into(), features: (0..5).map(|_| rng.random_range(-1.0..1.0)).collect() })
            .collect();
        let mut per_class: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
        for r in &recs {
            let a = model.project(&r.features).unwrap();
            let s = class_scores(&a, &bank, &ids(&names)).unwrap();
            let e = per_class.entry(r.class_id.as_str()).or_default();
            e.1 += 1;
            if s.argmax() == Some(&r.class_id) {
                e.0 += 1;
            }
        }
        let oracle = per_class.values().map(|(c, t)| *c as f64 / *t as f64).sum::<f64>() / per_class.len() as f64;
        assert_eq!(cdm_accuracy(&model, &bank, &recs, &ids(&names)).unwrap(), oracle);
        assert!(cdm_accuracy(&model, &bank, &[], &ids(&names)).is_err());
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let names = ["a", "b", "c"];
        let bank = bank_of(&names.map(|n| (n, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>())));
        let protos = bank.unit_matrix(&ids(&names)).unwrap();
        let x = Matrix::from_shape_simple_fn((4, 8), || rng.random_range(-1.0..1.0));
        let y = vec![0, 2, 1, 2];
        let tau = 0.5;
        let proj = Projector::new(8, 8, tau, 2);

        let loss_of = |mlp: &Mlp| -> f64 {
            let a = mlp.eval(&x);
            let mut total = 0.0;
            for (b, row) in a.rows().into_iter().enumerate() {
                let scores = class_scores(row.as_slice().unwrap(), &bank, &ids(&names)).unwrap();
                total += ce_loss(&scores, &names[y[b]].into(), tau).unwrap();
            }
            total / 4.0
        };

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = proj.mlp.bind(&mut tape, true);
        let a = proj.mlp.forward(&mut tape, &vars, xv);
        let unit = tape.row_normalize(a).unwrap();
        let pv = tape.constant(protos);
        let s = tape.matmul(unit, pv);
        let logits = tape.scale(s, 1.0 / tau);
        let loss = tape.softmax_cross_entropy(logits, &y);
        assert!((tape.scalar(loss) - loss_of(&proj.mlp)).abs() < 1e-12);
        let grads = tape.backward(loss);

        let h = 1e-6;
        let (mut num, mut den) = (0.0, 0.0);
        for (li, v) in vars.iter().enumerate() {
            let g = grads.get(v.weight).unwrap();
            for (i, j) in [(0, 0), (3, 5), (7, 2), (5, 1)] {
                if li == 1 && j >= proj.mlp.layers[1].output_dim() {
                    continue;
                }
                let mut plus = proj.mlp.clone();
                plus.layers[li].weight[[i, j]] += h;
                let mut minus = proj.mlp.clone();
                minus.layers[li].weight[[i, j]] -= h;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                num += (fd - g[[i, j]]).powi(2);
                den += g[[i, j]].powi(2);
            }
        }
        assert!(den > 0.0);
        assert!((num / den).sqrt() < 1e-4, "relative error {}", (num / den).sqrt());
    }
}
