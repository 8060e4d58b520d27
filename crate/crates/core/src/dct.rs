//! Discriminative class tokens: one new prompt token per unseen class whose
//! embedding is optimized so that generated images are recognized as that
//! class by the category discrimination model.

use std::collections::BTreeMap;
use std::fmt;

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::cdm::CdmModel;
use crate::config::{DctConfig, NAME_PLACEHOLDER, TOKEN_PLACEHOLDER};
use crate::data::{ClassId, ClassSpace, Image};
use crate::diffusion::{initial_noise, GeneratorAdapter, SampleOptions};
use crate::error::{Error, Result};
use crate::nn::stack_rows;
use crate::optim::AdamW;
use crate::prototypes::{normalize_class_name, split_words, PrototypeBank, TextEncoder, TokenId};
use crate::store::Artifact;
use crate::tape::{softmax_rows, Matrix, Tape};

/// Word whose embedding initializes every new token.
pub const INIT_WORD: &str = "a";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    /// A generated batch reached the accuracy threshold.
    ThresholdMet,
    /// The step budget ran out first.
    EarlyStop,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::ThresholdMet => "threshold-met",
            StopReason::EarlyStop => "early-stop",
        })
    }
}

/// One evaluation of the current token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub loss: f64,
    pub batch_accuracy: f64,
    /// Mean CDM probability of the target class over the batch.
    pub target_probability: f64,
    /// Whether the embedding was updated after this evaluation.
    pub updated: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEmbeddingState {
    pub class_id: ClassId,
    pub class_name: String,
    pub token_symbol: String,
    pub token_id: TokenId,
    pub embedding: Vec<f64>,
    pub initial_embedding: Vec<f64>,
    pub history: Vec<StepRecord>,
    pub stop_reason: Option<StopReason>,
    /// Batch accuracy and target probability of the final embedding.
    pub final_accuracy: Option<f64>,
    pub final_target_probability: Option<f64>,
}

impl Artifact for TokenEmbeddingState {
    const KIND: &'static str = "token-embedding";

    fn dims(&self) -> Vec<usize> {
        vec![self.embedding.len()]
    }
}

impl TokenEmbeddingState {
    /// Number of embedding updates performed.
    pub fn updates(&self) -> usize {
        self.history.iter().filter(|r| r.updated).count()
    }

    pub fn is_trained(&self) -> bool {
        self.updates() > 0
    }
}

/// New token for `class_id`, allocated at `vocab_size + slot` and initialized
/// to the embedding of [`INIT_WORD`].
pub fn init_dct(class_id: &ClassId, class_name: &str, encoder: &dyn TextEncoder, slot: usize) -> Result<TokenEmbeddingState> {
    let init = encoder
        .token_id(INIT_WORD)
        .and_then(|id| encoder.embedding(id))
        .ok_or_else(|| Error::structural(format!("text encoder {} has no token {INIT_WORD:?}", encoder.tag())))?
        .to_vec();
    Ok(TokenEmbeddingState {
        class_id: class_id.clone(),
        class_name: class_name.to_string(),
        token_symbol: TOKEN_PLACEHOLDER.to_string(),
        token_id: encoder.vocab_size() + slot,
        embedding: init.clone(),
        initial_embedding: init,
        history: Vec::new(),
        stop_reason: None,
        final_accuracy: None,
        final_target_probability: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptAssembly {
    pub template: String,
    pub class_name: String,
    /// Readable prompt with the token symbol in place.
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Position of the new token in `tokens`.
    pub token_slot: usize,
}

/// Token sequence for `template` with the class token and class name filled in.
pub fn assemble_prompt(state: &TokenEmbeddingState, template: &str, class_name: &str, encoder: &dyn TextEncoder) -> Result<PromptAssembly> {
    let words: Vec<&str> = template.split_whitespace().collect();
    let n_token = words.iter().filter(|w| **w == TOKEN_PLACEHOLDER).count();
    let n_name = words.iter().filter(|w| **w == NAME_PLACEHOLDER).count();
    if n_token != 1 || n_name != 1 {
        return Err(Error::Config(format!(
            "template {template:?} needs exactly one {TOKEN_PLACEHOLDER} and one {NAME_PLACEHOLDER} word"
        )));
    }
    if state.token_id < encoder.vocab_size() {
        return Err(Error::structural(format!("token id {} collides with the encoder vocabulary", state.token_id)));
    }
    let name = normalize_class_name(class_name);
    let mut tokens = Vec::new();
    let mut slot = 0;
    for w in &words {
        match *w {
            TOKEN_PLACEHOLDER => {
                slot = tokens.len();
                tokens.push(state.token_id);
            }
            NAME_PLACEHOLDER => tokens.extend(encoder.tokenize(&name)?),
            other => {
                for part in split_words(other)? {
                    tokens.push(encoder.token_id(&part).ok_or_else(|| {
                        Error::structural(format!("word {part:?} is not in the vocabulary of {}", encoder.tag()))
                    })?);
                }
            }
        }
    }
    Ok(PromptAssembly {
        template: template.to_string(),
        class_name: class_name.to_string(),
        text: template.replace(NAME_PLACEHOLDER, &name),
        tokens,
        token_slot: slot,
    })
}

/// Seeds of the starting noise for one optimization batch.
fn batch_seeds(seed: u64, step: usize, batch: usize, resample: bool) -> Vec<u64> {
    let base = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(if resample { step as u64 * 1_000_003 } else { 0 });
    (0..batch as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Per-image prompts for a batch, cycling through the templates.
pub fn batch_prompts(state: &TokenEmbeddingState, templates: &[String], batch: usize, encoder: &dyn TextEncoder) -> Result<Vec<PromptAssembly>> {
    let assemblies: Vec<PromptAssembly> = templates
        .iter()
        .map(|t| assemble_prompt(state, t, &state.class_name, encoder))
        .collect::<Result<_>>()?;
    Ok((0..batch).map(|i| assemblies[i % assemblies.len()].clone()).collect())
}

/// Everything the optimization loop reads besides the token itself.
pub struct DctContext<'a> {
    pub generator: &'a dyn GeneratorAdapter,
    pub cdm: &'a CdmModel,
    pub bank: &'a PrototypeBank,
    pub space: &'a ClassSpace,
    pub gamma: f64,
    pub sample: SampleOptions,
}

struct Evaluation {
    loss: f64,
    accuracy: f64,
    target_probability: f64,
    gradient: Option<Matrix>,
}

/// Generate one batch with the current embedding, score it over the unseen
/// classes, and optionally back-propagate the loss to the embedding.
fn evaluate(
    ctx: &DctContext,
    state: &TokenEmbeddingState,
    prompts: &[PromptAssembly],
    seeds: &[u64],
    unseen: &[ClassId],
    target: usize,
    with_gradient: bool,
    step: usize,
) -> Result<Evaluation> {
    let protos = ctx.bank.unit_matrix(unseen)?;
    let mut tape = Tape::new();
    let e = stack_rows(&[&state.embedding]);
    let ev = if with_gradient { tape.param(e) } else { tape.constant(e) };
    let injected = BTreeMap::from([(state.token_id, ev)]);
    let tokens: Vec<Vec<TokenId>> = prompts.iter().map(|p| p.tokens.clone()).collect();
    let (w, h) = ctx.generator.image_size();
    let noise = initial_noise(seeds, w * h * Image::CHANNELS);
    let sample = ctx.generator.sample_on_tape(&mut tape, &tokens, &injected, &noise, &ctx.sample)?;
    let projected = ctx.cdm.project_images_on_tape(&mut tape, sample.images);
    let unit = tape.row_normalize(projected).map_err(|e| match e {
        Error::Degenerate(d) => Error::Numerical { step, detail: d },
        other => other,
    })?;
    let pv = tape.constant(protos);
    let scores = tape.matmul(unit, pv);
    debug_assert_eq!(tape.value(scores).ncols(), unseen.len());
    let logits = tape.scale(scores, 1.0 / ctx.cdm.tau());
    let targets = vec![target; prompts.len()];
    let loss = tape.softmax_cross_entropy(logits, &targets);
    let lv = tape.scalar(loss);
    if !lv.is_finite() {
        return Err(Error::Numerical { step, detail: format!("non-finite token loss for class {}", state.class_id) });
    }
    let probs = softmax_rows(tape.value(logits));
    let mut correct = 0;
    for row in tape.value(scores).rows() {
        if crate::cdm::argmax_first(row.iter().copied()) == target {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / prompts.len() as f64;
    let target_probability = probs.column(target).mean().unwrap_or(0.0);
    let gradient = if with_gradient {
        let tracked = tape.tracked_leaf_count();
        if tracked != 1 {
            return Err(Error::structural(format!("token optimization tracks {tracked} leaves; only the class token may be tracked")));
        }
        let grads = tape.backward(loss);
        Some(grads.get(ev).cloned().unwrap_or_else(|| Matrix::zeros((1, state.embedding.len()))))
    } else {
        None
    };
    Ok(Evaluation { loss: lv, accuracy, target_probability, gradient })
}

/// Token loss, batch accuracy, mean target probability and the gradient of
/// the loss with respect to the token embedding, for the batch used at `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenObjective {
    pub loss: f64,
    pub accuracy: f64,
    pub target_probability: f64,
    pub gradient: Vec<f64>,
}

pub fn token_objective(ctx: &DctContext, state: &TokenEmbeddingState, cfg: &DctConfig, seed: u64, step: usize) -> Result<TokenObjective> {
    let unseen = ctx.space.unseen_ids();
    let target = unseen
        .iter()
        .position(|c| *c == state.class_id)
        .ok_or_else(|| Error::Protocol(format!("{} is not an unseen class", state.class_id)))?;
    let batch = cfg.optimizer.batch_size.max(1);
    let prompts = batch_prompts(state, &cfg.templates, batch, ctx.generator.text_encoder())?;
    let seeds = batch_seeds(seed, step, batch, cfg.resample_noise);
    let eval = evaluate(ctx, state, &prompts, &seeds, &unseen, target, true, step)?;
    Ok(TokenObjective {
        loss: eval.loss,
        accuracy: eval.accuracy,
        target_probability: eval.target_probability,
        gradient: eval.gradient.expect("gradient requested").row(0).to_vec(),
    })
}

/// Optimize the class token of `state` until a generated batch reaches the
/// accuracy threshold `ctx.gamma` or the step budget runs out.
///
/// Only the token embedding is updated; the generator, the CDM and every other
/// embedding are read-only.
pub fn optimize_dct(mut state: TokenEmbeddingState, ctx: &DctContext, cfg: &DctConfig, seed: u64) -> Result<TokenEmbeddingState> {
    if !ctx.space.is_unseen(&state.class_id) {
        return Err(Error::Protocol(format!("class tokens are only learned for unseen classes; {} is not unseen", state.class_id)));
    }
    if !ctx.generator.differentiable() {
        return Err(Error::Dependency(format!("generator {} cannot back-propagate to prompt tokens", ctx.generator.tag())));
    }
    let unseen = ctx.space.unseen_ids();
    let target = unseen.iter().position(|c| *c == state.class_id).expect("unseen target");
    let batch = cfg.optimizer.batch_size.max(1);
    let prompts = batch_prompts(&state, &cfg.templates, batch, ctx.generator.text_encoder())?;
    let mut opt = AdamW::new(&cfg.optimizer);
    state.history.clear();
    state.stop_reason = None;

    let mut step = 0;
    loop {
        let seeds = batch_seeds(seed, step, batch, cfg.resample_noise);
        if step == cfg.max_steps {
            let eval = evaluate(ctx, &state, &prompts, &seeds, &unseen, target, false, step)?;
            state.final_accuracy = Some(eval.accuracy);
            state.final_target_probability = Some(eval.target_probability);
            state.stop_reason = Some(StopReason::EarlyStop);
            break;
        }
        let eval = evaluate(ctx, &state, &prompts, &seeds, &unseen, target, true, step)?;
        debug!(
            "class {} step {step}: loss {:.4} accuracy {:.2} p(target) {:.3}",
            state.class_id, eval.loss, eval.accuracy, eval.target_probability
        );
        if eval.accuracy >= ctx.gamma {
            state.history.push(StepRecord {
                loss: eval.loss,
                batch_accuracy: eval.accuracy,
                target_probability: eval.target_probability,
                updated: false,
            });
            state.final_accuracy = Some(eval.accuracy);
            state.final_target_probability = Some(eval.target_probability);
            state.stop_reason = Some(StopReason::ThresholdMet);
            break;
        }
        let grad = eval.gradient.expect("gradient requested");
        let mut e = stack_rows(&[&state.embedding]);
        opt.step(&mut [&mut e], &[grad]);
        state.embedding = e.row(0).to_vec();
        state.history.push(StepRecord {
            loss: eval.loss,
            batch_accuracy: eval.accuracy,
            target_probability: eval.target_probability,
            updated: true,
        });
        step += 1;
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedRecord {
    pub image_id: String,
    pub prompt: String,
    pub seed: u64,
    pub image: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedSample {
    pub seed: u64,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSampleSet {
    pub class_id: ClassId,
    pub token_stop_reason: Option<StopReason>,
    pub generator_tag: String,
    pub records: Vec<GeneratedRecord>,
    pub skipped: Vec<SkippedSample>,
}

impl Artifact for GeneratedSampleSet {
    const KIND: &'static str = "generated-sample-set";

    fn dims(&self) -> Vec<usize> {
        vec![self.records.len()]
    }
}

/// Largest fraction of requested images that may fail before synthesis aborts.
pub const MAX_SKIP_FRACTION: f64 = 0.05;

/// Sample `n_gen` images of the state's class; image `i` uses seed
/// `seed_base + i` and template `templates[i % templates.len()]`.
pub fn synthesize_class_set(
    state: &TokenEmbeddingState,
    generator: &dyn GeneratorAdapter,
    templates: &[String],
    n_gen: usize,
    seed_base: u64,
    opts: &SampleOptions,
) -> Result<GeneratedSampleSet> {
    if n_gen == 0 {
        return Err(Error::Config("n_gen must be at least 1".into()));
    }
    let prompts = batch_prompts(state, templates, templates.len(), generator.text_encoder())?;
    let injected = BTreeMap::from([(state.token_id, state.embedding.clone())]);
    let conds: Vec<Vec<f64>> = prompts.iter().map(|p| generator.encode_prompt(&p.tokens, &injected)).collect::<Result<_>>()?;
    let (w, h) = generator.image_size();
    let mut records = Vec::with_capacity(n_gen);
    let mut skipped = Vec::new();
    const CHUNK: usize = 25;
    let indices: Vec<usize> = (0..n_gen).collect();
    for chunk in indices.chunks(CHUNK) {
        let seeds: Vec<u64> = chunk.iter().map(|&i| seed_base.wrapping_add(i as u64)).collect();
        let rows: Vec<&[f64]> = chunk.iter().map(|&i| conds[i % conds.len()].as_slice()).collect();
        let outcome = generator.sample(&stack_rows(&rows), &seeds, opts);
        let per_image: Vec<(usize, Result<Vec<f64>>)> = match outcome {
            Ok(s) => chunk.iter().zip(s.images.rows()).map(|(&i, r)| (i, Ok(r.to_vec()))).collect(),
            Err(Error::Numerical { .. }) => chunk
                .iter()
                .map(|&i| {
                    let c = stack_rows(&[&conds[i % conds.len()]]);
                    let one = generator.sample(&c, &[seed_base.wrapping_add(i as u64)], opts);
                    (i, one.map(|s| s.images.row(0).to_vec()))
                })
                .collect(),
            Err(e) => return Err(e),
        };
        for (i, img) in per_image {
            let seed = seed_base.wrapping_add(i as u64);
            match img {
                Ok(data) => records.push(GeneratedRecord {
                    image_id: format!("{}_gen_{i:04}", state.class_id),
                    prompt: prompts[i % prompts.len()].text.clone(),
                    seed,
                    image: Image::from_flat(w, h, data)?,
                }),
                Err(Error::Numerical { step, detail }) => {
                    warn!("skipping generated image {i} of class {}: {detail} at step {step}", state.class_id);
                    skipped.push(SkippedSample { seed, reason: format!("{detail} at step {step}") });
                }
                Err(e) => return Err(e),
            }
        }
    }
    if skipped.len() as f64 > MAX_SKIP_FRACTION * n_gen as f64 {
        return Err(Error::Numerical {
            step: 0,
            detail: format!("{} of {n_gen} images of class {} failed, above the skip cap", skipped.len(), state.class_id),
        });
    }
    Ok(GeneratedSampleSet {
        class_id: state.class_id.clone(),
        token_stop_reason: state.stop_reason,
        generator_tag: generator.tag(),
        records,
        skipped,
    })
}
