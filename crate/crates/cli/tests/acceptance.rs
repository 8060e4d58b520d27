//! Acceptance suite: one PASS/FAIL line per criterion, each with its runtime
//! budget. Criteria that cannot be met are listed in `KNOWN_FAILURES` and
//! must fail for exactly the recorded reason.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use digzsl::{read_report, Overrides, Runner, StageName, METRICS_FILE};
use digzsl_core::cdm::{argmax_first, train_cdm, CdmModel, ToyBackbone};
use digzsl_core::classifier::{
    assemble_training_set, calibrated_argmax, predict_calibrated, train_classifier, AssemblyRecord, ClassifierMeta, SourceTag,
    TrainingAssembly, ZslClassifier, ZslMode,
};
use digzsl_core::config::{CdmConfig, DctConfig, GeneratorConfig, RunConfig};
use digzsl_core::data::{toy_shapes, ClassId, LabeledImage, Partition, ToyShapesConfig};
use digzsl_core::dct::{init_dct, optimize_dct, token_objective, DctContext, StopReason, TokenEmbeddingState};
use digzsl_core::diffusion::{cfg_combine, cfg_predict, forward_noise, Denoiser, NoiseSchedule, SampleOptions, ToyDenoiser, ToyGenerator};
use digzsl_core::error::Error;
use digzsl_core::evaluator::{fid, harmonic_mean, sweep_probabilities, FeatureSetSummary};
use digzsl_core::nn::{Activation, Mlp};
use digzsl_core::prototypes::{build_prototypes, PrototypeBank, TextEncoder, ToyTextEncoder};
use digzsl_core::store::Stage;
use digzsl_core::tape::{softmax_rows, Matrix};

type Outcome = std::result::Result<String, String>;

const KNOWN_FAILURES: &[(&str, &str)] = &[("harmonic-mean reproduction", "TF-VAEGAN+SHIP CUB")];

fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn toy_config() -> RunConfig {
    RunConfig::from_path(&workspace_root().join("configs/toy.toml")).expect("toy config")
}

/// CDM, prototypes and generator trained once on the shipped toy setup.
struct Fixture {
    cfg: RunConfig,
    space: digzsl_core::data::ClassSpace,
    bank: PrototypeBank,
    cdm: CdmModel,
    generator: ToyGenerator,
    _dir: tempfile::TempDir,
}

impl Fixture {
    fn build() -> Fixture {
        let dir = tempfile::tempdir().expect("tempdir");
        let overrides = Overrides { out: Some(dir.path().to_path_buf()), ..Overrides::default() };
        let mut runner = Runner::new(toy_config(), &overrides).expect("runner");
        runner.run_stage(StageName::Prototypes).expect("prototypes");
        runner.run_stage(StageName::TrainCdm).expect("cdm");
        let generator = runner.generator().expect("generator");
        let space = runner.dataset().expect("dataset").space.clone();
        let bank = runner.store.load(Stage::Prototypes, "bank", None).expect("bank");
        let cdm = runner.store.load(Stage::Cdm, "cdm", None).expect("cdm");
        Fixture { cfg: runner.cfg.clone(), space, bank, cdm, generator, _dir: dir }
    }

    fn ctx(&self, gamma: f64) -> DctContext<'_> {
        DctContext {
            generator: &self.generator,
            cdm: &self.cdm,
            bank: &self.bank,
            space: &self.space,
            gamma,
            sample: SampleOptions::from_config(&self.cfg.generator),
        }
    }

    fn token(&self, class: &str) -> TokenEmbeddingState {
        let id = ClassId::new(class);
        let slot = self.space.unseen_ids().iter().position(|c| *c == id).expect("unseen class");
        init_dct(&id, self.space.name(&id).unwrap(), &self.generator.encoder, slot).expect("token")
    }
}

fn harmonic_reproduction() -> Outcome {
    // (method, dataset, U, S, printed H) for every complete GZSL row.
    let rows: &[(&str, &str, f64, f64, f64)] = &[
        ("MPNet", "AWA2", 58.0, 76.4, 66.0),
        ("MPNet", "CUB", 20.6, 44.3, 28.2),
        ("MPNet", "FLO", 22.2, 96.7, 36.1),
        ("VGSE-APN", "AWA2", 51.2, 81.8, 63.0),
        ("VGSE-APN", "CUB", 21.9, 45.5, 29.5),
        ("VGSE-APN", "SUN", 24.1, 31.8, 27.4),
        ("I2DFormer", "AWA2", 66.8, 76.8, 71.5),
        ("I2DFormer", "CUB", 35.3, 57.6, 43.8),
        ("I2DFormer", "FLO", 35.8, 91.9, 51.5),
        ("I2MVFormer-Wiki", "AWA2", 66.6, 82.9, 73.8),
        ("I2MVFormer-Wiki", "CUB", 32.4, 63.1, 42.8),
        ("I2MVFormer-Wiki", "FLO", 34.9, 96.1, 51.2),
        ("I2MVFormer-LLM", "AWA2", 72.7, 81.3, 76.8),
        ("I2MVFormer-LLM", "CUB", 40.1, 58.0, 47.4),
        ("I2MVFormer-LLM", "FLO", 41.1, 91.1, 56.6),
        ("TF-VAEGAN+SHIP", "AWA2", 43.7, 96.3, 60.1),
        ("TF-VAEGAN+SHIP", "CUB", 21.1, 84.4, 34.0),
        ("TF-VAEGAN+SHIP", "FLO", 37.4, 97.2, 54.0),
        ("I2DFormer+", "AWA2", 69.8, 83.2, 75.9),
        ("I2DFormer+", "CUB", 38.3, 55.2, 45.3),
        ("I2DFormer+", "FLO", 36.9, 86.9, 51.8),
        ("CLIP", "CUB", 55.2, 54.8, 55.0),
        ("CLIP", "FLO", 65.6, 67.9, 66.7),
        ("CoOp", "AWA2", 72.7, 95.3, 82.5),
        ("CoOp", "CUB", 49.2, 63.8, 55.6),
        ("CoOp", "FLO", 52.2, 85.8, 64.9),
        ("DIG-ZSL", "AWA2", 83.9, 85.8, 84.9),
        ("DIG-ZSL", "CUB", 59.1, 68.3, 63.3),
        ("DIG-ZSL", "FLO", 70.8, 96.7, 81.7),
        ("DIG-ZSL", "SUN", 53.5, 44.4, 48.5),
    ];
    let mut bad = Vec::new();
    for &(m, d, u, s, h) in rows {
        let ours = (harmonic_mean(u, s) * 10.0).round() / 10.0;
        if (ours - h).abs() > 0.1 + 1e-9 {
            bad.push(format!("{m} {d}: U={u} S={s} gives H={ours:.1}, printed {h:.1}"));
        }
    }
    if bad.is_empty() {
        Ok(format!("{} rows within 0.1", rows.len()))
    } else {
        Err(format!("{}/{} rows reproduce; mismatched: {}", rows.len() - bad.len(), rows.len(), bad.join("; ")))
    }
}

fn forward_moments() -> Outcome {
    let schedule = NoiseSchedule::linear(1000, 1e-4, 0.02).map_err(|e| e.to_string())?;
    let z0 = Matrix::from_shape_vec((1, 4), vec![0.8, -0.4, 0.0, 1.5]).unwrap();
    let n = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: f64 = 0.0;
    for t in [1, 500, 1000] {
        let ab = schedule.alpha_bar(t).map_err(|e| e.to_string())?;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let eps = Matrix::from_shape_simple_fn((1, 4), || rng.sample(StandardNormal));
            let zt = forward_noise(&z0, t, &eps, &schedule).map_err(|e| e.to_string())?;
            for j in 0..4 {
                sum[j] += zt[[0, j]];
                sq[j] += zt[[0, j]] * zt[[0, j]];
            }
        }
        let var = 1.0 - ab;
        for j in 0..4 {
            let mean = sum[j] / n as f64;
            let sample_var = sq[j] / n as f64 - mean * mean;
            let mean_z = (mean - ab.sqrt() * z0[[0, j]]) / (var / n as f64).sqrt();
            // Standard error of the sample variance of a normal is var·√(2/(n−1)).
            let var_z = (sample_var - var) / (var * (2.0 / (n as f64 - 1.0)).sqrt());
            worst = worst.max(mean_z.abs()).max(var_z.abs());
        }
    }
    if worst < 5.0 {
        Ok(format!("max deviation {worst:.2} SE"))
    } else {
        Err(format!("deviation {worst:.2} SE exceeds 5"))
    }
}

fn guidance_affinity() -> Outcome {
    let cfg = GeneratorConfig { hidden_dim: 8, cond_dim: 4, train_timesteps: 100, ..GeneratorConfig::default() };
    let den = ToyDenoiser::new(6, 3, &cfg, 11).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let zt = Matrix::from_shape_simple_fn((4, 6), || rng.sample(StandardNormal));
    let cond = Matrix::from_shape_simple_fn((4, 3), || rng.sample(StandardNormal));
    let t = 37;
    let c = den.predict(&zt, t, Some(&cond)).map_err(|e| e.to_string())?;
    let u = den.predict(&zt, t, None).map_err(|e| e.to_string())?;
    let at = |w: f64| cfg_predict(&den, &zt, t, &cond, w).map_err(|e| e.to_string());
    if at(1.0)? != c || at(0.0)? != u {
        return Err("guidance endpoints are not exact".into());
    }
    let mut worst: f64 = 0.0;
    for w in [0.5, 2.0, 7.0, -1.5] {
        let g = at(w)?;
        let oracle = &u + &((&c - &u) * w);
        worst = worst.max(g.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
        for (w1, w2, a) in [(0.0, w, 0.3), (1.0, w, 0.75)] {
            let lhs = cfg_combine(&c, &u, a * w1 + (1.0 - a) * w2).unwrap();
            let rhs = cfg_combine(&c, &u, w1).unwrap() * a + cfg_combine(&c, &u, w2).unwrap() * (1.0 - a);
            worst = worst.max(lhs.iter().zip(&rhs).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max));
        }
    }
    if worst <= 1e-12 {
        Ok(format!("endpoints exact, affine error {worst:.1e} (w up to 7)"))
    } else {
        Err(format!("affine error {worst:.1e}"))
    }
}

fn gradient_isolation(fx: &Fixture) -> Outcome {
    let snapshot = || {
        (
            serde_json::to_vec(&fx.generator).unwrap(),
            serde_json::to_vec(&fx.cdm).unwrap(),
            serde_json::to_vec(&fx.bank).unwrap(),
        )
    };
    let before = snapshot();
    let table: Vec<Vec<u64>> = (0..fx.generator.encoder.vocab_size())
        .map(|id| fx.generator.encoder.embedding(id).unwrap().iter().map(|v| v.to_bits()).collect())
        .collect();
    let state = fx.token("green_square");
    let out = optimize_dct(state.clone(), &fx.ctx(1.0), &fx.cfg.dct, 5).map_err(|e| e.to_string())?;
    if snapshot() != before {
        return Err("generator, CDM or prototype bank changed".into());
    }
    for (id, bits) in table.iter().enumerate() {
        let now: Vec<u64> = fx.generator.encoder.embedding(id).unwrap().iter().map(|v| v.to_bits()).collect();
        if &now != bits {
            return Err(format!("vocabulary embedding {id} changed"));
        }
    }
    if out.updates() == 0 || out.embedding == state.embedding {
        return Err("the class token was never updated".into());
    }
    if out.initial_embedding != state.embedding || out.token_id != state.token_id {
        return Err("token bookkeeping changed".into());
    }
    Ok(format!("{} updates to e_*, every other parameter bitwise unchanged", out.updates()))
}

/// Two-unseen-class instance small enough for exhaustive finite differences.
fn small_instance() -> (ToyGenerator, CdmModel, PrototypeBank, digzsl_core::data::ClassSpace, DctConfig) {
    let toy = ToyShapesConfig { image_size: 6, train_per_class: 6, test_seen_per_class: 1, test_unseen_per_class: 1, position_jitter: 0.5, ..ToyShapesConfig::default() };
    let ds = toy_shapes(&toy, 3).unwrap();
    let dct = DctConfig::default();
    let mut templates: Vec<&str> = vec!["a photo of a [name]"];
    templates.extend(dct.templates.iter().map(String::as_str));
    let enc = ToyTextEncoder::for_classes(3, 6, 5, 0.3, &ds.space, &templates).unwrap();
    let bank = build_prototypes(&ds.space, &enc, "a photo of a [name]").unwrap();
    let cdm_cfg = CdmConfig { epochs: 20, feature_dim: 12, ..CdmConfig::default() };
    let train = ds.samples(Partition::TrainSeen);
    let cdm = train_cdm(&train, ToyBackbone::new(6 * 6 * 3, 12, 3), &bank, &ds.space, &cdm_cfg, 3).unwrap();
    let gcfg = GeneratorConfig { hidden_dim: 10, cond_dim: 5, train_steps: 40, train_batch: 8, ..GeneratorConfig::default() };
    let generator = digzsl_core::diffusion::train_toy_generator(&train, &ds.space, enc, &gcfg, 3).unwrap();
    (generator, cdm, bank, ds.space, DctConfig { optimizer: digzsl_core::config::OptimizerConfig { batch_size: 3, ..dct.optimizer }, ..dct })
}

fn gradient_correctness() -> Outcome {
    let (generator, cdm, bank, space, dct) = small_instance();
    let unseen = space.unseen_ids();
    if unseen.len() != 2 {
        return Err(format!("instance has {} unseen classes", unseen.len()));
    }
    let sample = SampleOptions::from_config(&GeneratorConfig::default());
    let ctx = DctContext { generator: &generator, cdm: &cdm, bank: &bank, space: &space, gamma: 1.0, sample };
    let mut worst: f64 = 0.0;
    for (slot, id) in unseen.iter().enumerate() {
        let mut state = init_dct(id, space.name(id).unwrap(), &generator.encoder, slot).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(slot as u64 + 40);
        for v in state.embedding.iter_mut() {
            *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
        }
        let obj = token_objective(&ctx, &state, &dct, 9, 0).map_err(|e| e.to_string())?;
        let loss_at = |e: Vec<f64>| {
            let mut s = state.clone();
            s.embedding = e;
            token_objective(&ctx, &s, &dct, 9, 0).map(|o| o.loss).unwrap()
        };
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for j in 0..state.embedding.len() {
            let mut p = state.embedding.clone();
            p[j] += h;
            let mut m = state.embedding.clone();
            m[j] -= h;
            let fd = (loss_at(p) - loss_at(m)) / (2.0 * h);
            num += (fd - obj.gradient[j]).powi(2);
            den += fd * fd;
        }
        if den == 0.0 {
            return Err(format!("zero finite-difference gradient for {id}"));
        }
        worst = worst.max((num / den).sqrt());
    }
    if worst < 1e-4 {
        Ok(format!("relative error {worst:.2e} over {} classes, {} DDIM steps", unseen.len(), sample.steps))
    } else {
        Err(format!("relative error {worst:.2e}"))
    }
}

fn stopping(fx: &Fixture) -> Outcome {
    let a = fx.generator.encoder.embedding(fx.generator.encoder.token_id("a").unwrap()).unwrap().to_vec();
    let zero = optimize_dct(fx.token("red_square"), &fx.ctx(0.0), &fx.cfg.dct, 1).map_err(|e| e.to_string())?;
    if zero.updates() != 0 || zero.embedding != a || zero.stop_reason != Some(StopReason::ThresholdMet) {
        return Err(format!("gamma 0: {} updates, stop {:?}", zero.updates(), zero.stop_reason));
    }
    let hard = optimize_dct(fx.token("green_square"), &fx.ctx(1.0), &fx.cfg.dct, 1).map_err(|e| e.to_string())?;
    let max = fx.cfg.dct.max_steps;
    if hard.history.len() != max || hard.updates() != max || hard.stop_reason != Some(StopReason::EarlyStop) {
        return Err(format!("gamma 1: {} history steps, stop {:?}", hard.history.len(), hard.stop_reason));
    }
    Ok(format!("gamma 0: 0 updates, e_* = e(a); gamma 1: {max} steps, {}", StopReason::EarlyStop))
}

fn guidance_efficacy(fx: &Fixture) -> Outcome {
    let seeds = [0u64, 1, 2, 3, 4];
    let (mut before, mut after) = (0.0, 0.0);
    let mut n = 0.0;
    for &seed in &seeds {
        for class in fx.space.unseen_ids() {
            let s = optimize_dct(fx.token(class.as_str()), &fx.ctx(1.0), &fx.cfg.dct, 100 + seed).map_err(|e| e.to_string())?;
            before += s.history[0].target_probability;
            after += s.final_target_probability.ok_or("no final evaluation")?;
            n += 1.0;
        }
    }
    let (before, after) = (before / n, after / n);
    if after >= before {
        Ok(format!("mean p(target) {before:.3} -> {after:.3} over {} seeds", seeds.len()))
    } else {
        Err(format!("mean p(target) fell {before:.3} -> {after:.3}"))
    }
}

fn random_classifier(label_space: &[ClassId], seen_mask: &[bool], dim: usize, rng: &mut ChaCha8Rng) -> ZslClassifier {
    ZslClassifier {
        mode: ZslMode::Gzsl,
        label_space: label_space.to_vec(),
        seen_mask: seen_mask.to_vec(),
        mlp: Mlp::new(&[dim, 8, label_space.len()], Activation::Relu, rng),
        meta: ClassifierMeta { epochs: 0, steps: 0, train_accuracy: 0.0, lr: 0.0, beta1: 0.9, beta2: 0.999, weight_decay: 0.0, batch_size: 1 },
    }
}

fn calibration() -> Outcome {
    let space = digzsl_core::data::ClassSpace::new(
        ["s0", "s1", "s2", "u0", "u1"].map(|i| (ClassId::new(i), i.to_uppercase())),
        &[ClassId::new("u0"), ClassId::new("u1")],
    )
    .map_err(|e| e.to_string())?;
    let label_space = space.all_ids();
    let mask: Vec<bool> = label_space.iter().map(|c| space.is_seen(c)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = 2000;
    let logits = Matrix::from_shape_fn((n, 5), |_| rng.random_range(-4.0..4.0));
    let probs = softmax_rows(&logits);
    let labels: Vec<ClassId> = (0..n).map(|_| label_space[rng.random_range(0..5)].clone()).collect();
    let grid: Vec<f64> = (0..=50).map(|i| i as f64 / 50.0).collect();
    let curve = sweep_probabilities(&probs, &label_space, &mask, &labels, &space, &grid).map_err(|e| e.to_string())?;
    for w in curve.points.windows(2) {
        if w[1].u < w[0].u || w[1].s > w[0].s {
            return Err(format!("not monotone between lambda {} and {}", w[0].lambda, w[1].lambda));
        }
    }
    let plain: Vec<usize> = probs.rows().into_iter().map(|r| argmax_first(r.iter().copied())).collect();
    let at_zero: Vec<usize> = probs.rows().into_iter().map(|r| calibrated_argmax(r.as_slice().unwrap(), &mask, 0.0)).collect();
    if plain != at_zero {
        return Err("lambda = 0 differs from plain argmax".into());
    }
    let dim = 6;
    let mut mismatches = 0;
    for i in 0..10_000 {
        let clf = if i % 100 == 0 { random_classifier(&label_space, &mask, dim, &mut rng) } else { random_classifier(&label_space, &mask, dim, &mut ChaCha8Rng::seed_from_u64(i as u64)) };
        let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
        let lambda = if i % 7 == 0 { [0.0, 0.5, 1.0][i % 3] } else { rng.random_range(0.0..1.0) };
        let p = clf.probabilities(&Matrix::from_shape_vec((1, dim), x.clone()).unwrap()).unwrap();
        let mut best = 0;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..label_space.len() {
            let v = p[[0, c]] - if mask[c] { lambda } else { 0.0 };
            if v > best_v {
                best_v = v;
                best = c;
            }
        }
        if predict_calibrated(&clf, &x, lambda).map_err(|e| e.to_string())? != label_space[best] {
            mismatches += 1;
        }
    }
    if mismatches > 0 {
        return Err(format!("{mismatches} of 10000 calibrated predictions differ from brute force"));
    }
    Ok(format!("U up, S down over {} lambdas; lambda 0 = argmax; 10000/10000 brute-force matches", grid.len()))
}

fn fid_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let x = Matrix::from_shape_simple_fn((40, 5), || rng.sample(StandardNormal));
    let y = Matrix::from_shape_simple_fn((30, 5), || rng.sample::<f64, _>(StandardNormal) * 1.7 + 0.4);
    let a = FeatureSetSummary::from_features(&x).map_err(|e| e.to_string())?;
    let b = FeatureSetSummary::from_features(&y).map_err(|e| e.to_string())?;
    let same = fid(&a, &a).map_err(|e| e.to_string())?.0;
    let d = 3.0;
    let eye = Matrix::eye(4);
    let p = FeatureSetSummary::new(vec![0.0; 4], eye.clone(), 10).unwrap();
    let q = FeatureSetSummary::new(vec![d, 0.0, 0.0, 0.0], eye, 10).unwrap();
    let shift = fid(&p, &q).map_err(|e| e.to_string())?.0;
    let ab = fid(&a, &b).map_err(|e| e.to_string())?.0;
    let ba = fid(&b, &a).map_err(|e| e.to_string())?.0;
    if same.abs() < 1e-8 && (shift - d * d).abs() < 1e-8 && (ab - ba).abs() < 1e-8 {
        Ok(format!("identity {same:.1e}, shift {shift:.10}, asymmetry {:.1e}", (ab - ba).abs()))
    } else {
        Err(format!("identity {same:e}, shift {shift} (want {}), asymmetry {:e}", d * d, (ab - ba).abs()))
    }
}

fn firewall() -> Outcome {
    let cfg = RunConfig::default();
    let ds = toy_shapes(&ToyShapesConfig { image_size: 8, train_per_class: 3, test_seen_per_class: 1, test_unseen_per_class: 2, ..cfg.toy.clone() }, 0).unwrap();
    let space = &ds.space;
    let enc = ToyTextEncoder::for_classes(0, 8, 6, 0.05, space, &["a photo of a [name]"]).unwrap();
    let bank = build_prototypes(space, &enc, "a photo of a [name]").unwrap();
    let backbone = ToyBackbone::new(8 * 8 * 3, 10, 0);
    let mut train: Vec<LabeledImage> = ds.samples(Partition::TrainSeen);
    train.push(ds.samples(Partition::TestUnseen).remove(0));
    let cdm = train_cdm(&train, backbone.clone(), &bank, space, &CdmConfig { epochs: 1, feature_dim: 10, ..cfg.cdm.clone() }, 0);
    if !matches!(cdm, Err(Error::Protocol(_))) {
        return Err(format!("CDM accepted an unseen record: {:?}", cdm.err()));
    }
    let asm = assemble_training_set(ZslMode::Gzsl, &train, &[], &backbone, space, None);
    if !matches!(asm, Err(Error::Protocol(_))) {
        return Err(format!("assembly accepted an unseen real record: {:?}", asm.err()));
    }
    let unseen = space.unseen_ids();
    let seen = space.seen_ids();
    let mut records = vec![
        AssemblyRecord { class_id: seen[0].clone(), source: SourceTag::RealSeen, features: vec![0.1; 10] },
        AssemblyRecord { class_id: unseen[0].clone(), source: SourceTag::GeneratedUnseen, features: vec![0.2; 10] },
    ];
    records.push(AssemblyRecord { class_id: unseen[1].clone(), source: SourceTag::RealSeen, features: vec![0.3; 10] });
    let tampered = TrainingAssembly { mode: ZslMode::Gzsl, label_space: space.all_ids(), records };
    let clf = train_classifier(&tampered, space, &cfg.classifier, 8, 0);
    if !matches!(clf, Err(Error::Protocol(_))) {
        return Err(format!("classifier accepted an unseen real record: {:?}", clf.err()));
    }
    Ok("CDM, assembly and classifier training all raise the protocol violation".into())
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = Command::new(env!("CARGO_BIN_EXE_digzsl"))
        .args(["run", "--all", "--config"])
        .arg(workspace_root().join("configs/toy.toml"))
        .arg("--out")
        .arg(dir.path())
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    let reports = read_report(&dir.path().join(METRICS_FILE)).map_err(|e| e.to_string())?;
    let czsl = reports.iter().find(|r| r.mode == ZslMode::Czsl).ok_or("no CZSL report")?;
    let acc = czsl.acc.ok_or("CZSL report without accuracy")?;
    let gzsl = reports
        .iter()
        .find(|r| r.mode == ZslMode::Gzsl)
        .map(|r| format!(", GZSL H={:.3}", r.h.unwrap_or(f64::NAN)))
        .unwrap_or_default();
    if acc > 0.5 {
        Ok(format!("exit 0, CZSL acc={acc:.3}{gzsl}"))
    } else {
        Err(format!("CZSL acc={acc:.3} does not exceed chance 0.5"))
    }
}

fn run(name: &str, budget: Duration, f: impl FnOnce() -> Outcome, results: &mut BTreeMap<String, Outcome>) {
    let t0 = Instant::now();
    let mut outcome = f();
    let took = t0.elapsed();
    if outcome.is_ok() && took > budget {
        outcome = Err(format!("took {took:.1?}, budget {budget:?}"));
    }
    match &outcome {
        Ok(d) => println!("PASS  {name}: {d} [{took:.1?} / {budget:?}]"),
        Err(d) => println!("FAIL  {name}: {d} [{took:.1?} / {budget:?}]"),
    }
    results.insert(name.to_string(), outcome);
}

fn main() {
    let s = Duration::from_secs;
    let mut results = BTreeMap::new();
    run("harmonic-mean reproduction", s(1), harmonic_reproduction, &mut results);
    run("forward-process moments", s(10), forward_moments, &mut results);
    run("guidance endpoints and affinity", s(1), guidance_affinity, &mut results);
    run("zsl firewall", s(1), firewall, &mut results);
    run("fid oracle", s(10), fid_oracle, &mut results);
    run("calibration properties", s(30), calibration, &mut results);
    run("gradient correctness", s(300), gradient_correctness, &mut results);

    let t0 = Instant::now();
    let fx = Fixture::build();
    println!("      shared toy fixture (prototypes, CDM, generator) built in {:.1?}", t0.elapsed());
    run("gradient isolation", s(120), || gradient_isolation(&fx), &mut results);
    run("stopping semantics", s(120), || stopping(&fx), &mut results);
    run("guidance efficacy", s(600), || guidance_efficacy(&fx), &mut results);
    drop(fx);
    run("end-to-end toy pipeline", s(900), end_to_end, &mut results);

    let failed: BTreeSet<&str> = results.iter().filter(|(_, o)| o.is_err()).map(|(k, _)| k.as_str()).collect();
    let known: BTreeSet<&str> = KNOWN_FAILURES.iter().map(|(k, _)| *k).collect();
    println!("{} passed, {} failed", results.len() - failed.len(), failed.len());
    assert_eq!(failed, known, "unexpected set of failing criteria");
    for (name, reason) in KNOWN_FAILURES {
        let detail = results[*name].as_ref().unwrap_err();
        assert!(detail.contains(reason), "{name} failed for an unrecorded reason: {detail}");
        assert_eq!(detail.matches(", printed ").count(), 1, "{name} has more than the recorded mismatch: {detail}");
    }
}
