mod common;

use common::*;
use pscbm::data::{generate_synthetic, Dataset, Split, SyntheticSpec};
use pscbm::gaussian::ConceptDistribution;
use pscbm::model::{decode_covariance, CovarianceHead, CovarianceKind};
use pscbm::nn::bce_with_logit;
use pscbm::rng::stream_rng;
use pscbm::training::*;
use pscbm::{Error, ModelBundle};

fn small_data(seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        n_train: 300,
        n_val: 100,
        n_test: 100,
        block_size: 8,
        shared_visibility: 0.0,
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn small_cbm(data: &Dataset, seed: u64) -> ModelBundle {
    let cfg = CbmTrainConfig {
        epochs: 15,
        samples: 20,
        seed,
        ..CbmTrainConfig::default()
    };
    train_cbm(data, &cfg).unwrap().bundle
}

fn quick_pscbm(paradigm: Paradigm, seed: u64) -> PscbmTrainConfig {
    let mut cfg = PscbmTrainConfig::defaults(CovarianceKind::Global, paradigm);
    cfg.epochs = 4;
    cfg.loss.samples = 20;
    cfg.optimizer.lr = 1e-2;
    cfg.seed = seed;
    cfg
}

fn strip_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
}

#[test]
fn adamw_converges_on_a_convex_quadratic() {
    // f(x) = ½ Σ aᵢ (xᵢ − bᵢ)², started at the origin
    let a = [0.1, 0.1, 0.1];
    let b = [0.1, -0.1, 0.05];
    let cfg = OptimizerConfig {
        lr: 0.1,
        weight_decay: 0.0,
        schedule: Schedule::Cosine,
    };
    let steps = 200;
    let mut state = OptimizerState::new(cfg, 3, steps);
    let mut x = vec![0.0; 3];
    let grad = |x: &[f64]| (0..3).map(|i| a[i] * (x[i] - b[i])).collect::<Vec<_>>();
    for step in 0..steps {
        state.epoch = step;
        let g = grad(&x);
        optimizer_step(&mut state, &mut x, &g).unwrap();
    }
    let norm = grad(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-6, "gradient norm {norm:e}");
}

#[test]
fn zero_epochs_is_a_no_op() {
    let data = small_data(0);
    let cbm = small_cbm(&data, 0);
    let wrapped = cbm.wrap_pretrained(CovarianceKind::Global).unwrap();
    let mut cfg = quick_pscbm(Paradigm::Plain, 0);
    cfg.epochs = 0;
    let out = train_pscbm(&wrapped, &data, &cfg).unwrap();
    assert_eq!(out.bundle, wrapped);
    assert!(out.log.validation.is_empty() && out.log.train.is_empty());
}

#[test]
fn plain_training_lowers_validation_concept_loss_and_freezes_backbone() {
    for seed in 0..3 {
        let data = small_data(seed);
        let cbm = small_cbm(&data, seed);
        let wrapped = cbm.wrap_pretrained(CovarianceKind::Global).unwrap();
        let out = train_pscbm(&wrapped, &data, &quick_pscbm(Paradigm::Plain, seed)).unwrap();
        let first = out.log.validation.first().unwrap();
        let last = out.log.validation.last().unwrap();
        assert_eq!(first.epoch, 0);
        assert_eq!(last.epoch, 4);
        assert!(
            last.loss.concept_loss < first.loss.concept_loss,
            "seed {seed}: {} !< {}",
            last.loss.concept_loss,
            first.loss.concept_loss
        );
        assert_eq!(out.bundle.backbone_checksum(), cbm.backbone_checksum());
        assert_eq!(out.log.train.len(), 4);
    }
}

#[test]
fn amortized_and_intervention_training_freeze_backbone() {
    let data = small_data(4);
    let cbm = small_cbm(&data, 4);
    let wrapped = cbm.wrap_pretrained(CovarianceKind::Amortized).unwrap();
    let mut cfg = quick_pscbm(Paradigm::WithInterventions, 4);
    cfg.epochs = 2;
    cfg.interventions.masks = 3;
    let out = train_pscbm(&wrapped, &data, &cfg).unwrap();
    assert_eq!(out.bundle.backbone_checksum(), cbm.backbone_checksum());
    assert_ne!(out.bundle.covariance_head(), wrapped.covariance_head());
}

#[test]
fn training_is_deterministic() {
    let data = small_data(1);
    let cbm_cfg = CbmTrainConfig {
        epochs: 3,
        samples: 10,
        seed: 9,
        ..CbmTrainConfig::default()
    };
    let a = train_cbm(&data, &cbm_cfg).unwrap();
    let b = train_cbm(&data, &cbm_cfg).unwrap();
    assert_eq!(a.bundle, b.bundle);
    let wrapped = a.bundle.wrap_pretrained(CovarianceKind::Global).unwrap();
    for paradigm in [Paradigm::Plain, Paradigm::WithInterventions] {
        let mut cfg = quick_pscbm(paradigm, 3);
        cfg.epochs = 2;
        cfg.interventions.masks = 2;
        let x = train_pscbm(&wrapped, &data, &cfg).unwrap();
        let y = train_pscbm(&wrapped, &data, &cfg).unwrap();
        assert_eq!(x.bundle, y.bundle);
        assert_eq!(strip_time(&x.log.validation_csv()), strip_time(&y.log.validation_csv()));
    }
}

#[test]
fn sparsity_pressure_shrinks_offdiagonal_precision() {
    let data = small_data(2);
    let cbm = small_cbm(&data, 2);
    let wrapped = cbm.wrap_pretrained(CovarianceKind::Global).unwrap();
    let mass = |lambda2: f64| {
        let mut cfg = quick_pscbm(Paradigm::Plain, 2);
        cfg.loss.lambda2 = lambda2;
        cfg.optimizer.weight_decay = 0.0;
        let out = train_pscbm(&wrapped, &data, &cfg).unwrap();
        let l = decode_covariance(out.bundle.covariance_head().unwrap(), None).unwrap();
        let dist = ConceptDistribution::new(nalgebra::DVector::zeros(l.nrows()), l).unwrap();
        dist.precision_offdiag_sum(true)
    };
    let free = mass(0.0);
    let pressed = mass(0.5);
    assert!(pressed <= free, "{pressed} > {free}");
}

#[test]
fn masks_have_fixed_cardinality() {
    let icfg = InterventionTrainingConfig::default();
    let mut rng = stream_rng(5, 0);
    for concepts in [5usize, 16, 112] {
        let size = icfg.mask_size_for(concepts);
        assert_eq!(size, (0.2 * concepts as f64).round() as usize);
        for _ in 0..10_000 / 3 + 1 {
            let draw = MaskDraw::draw(&mut rng, concepts, size, 2);
            assert_eq!(draw.subset.len(), size);
            assert!(draw.subset.windows(2).all(|w| w[0] < w[1]));
            assert!(draw.subset.iter().all(|&i| i < concepts));
        }
    }
    let draws = draw_masks(&mut rng, 16, &icfg, 4);
    assert_eq!(draws.len(), 20);
    assert!(draws.iter().all(|d| d.subset.len() == 3));
}

#[test]
fn more_masks_reduce_loss_variance() {
    let mut rng = common::rng(13);
    let bundle = random_pscbm(&mut rng, 6, 5, 10, 4, CovarianceKind::Global);
    let x = random_input(&mut rng, 6);
    let c = random_concepts(&mut rng, 10);
    let cfg = LossConfig {
        samples: 10,
        ..LossConfig::default()
    };
    let variance = |masks: usize| {
        let icfg = InterventionTrainingConfig {
            masks,
            ..InterventionTrainingConfig::default()
        };
        let values: Vec<f64> = (0..200)
            .map(|s| {
                let mut r = stream_rng(100 + s, masks as u64);
                intervention_training_loss(&bundle, &x, &c, 1, &icfg, &cfg, &mut r).unwrap().total
            })
            .collect();
        let mean = values.iter().sum::<f64>() / 200.0;
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0
    };
    let one = variance(1);
    let twenty = variance(20);
    assert!(twenty < one, "{twenty} !< {one}");
}

#[test]
fn single_sample_concept_term_is_plain_bce() {
    let mut rng = common::rng(31);
    let bundle = random_pscbm(&mut rng, 3, 4, 5, 3, CovarianceKind::Global);
    let x = random_input(&mut rng, 3);
    let c = random_concepts(&mut rng, 5);
    let cfg = LossConfig {
        samples: 1,
        ..LossConfig::default()
    };
    let noise = NoiseDraw::draw(&mut rng, 1, 5);
    let got = scbm_loss_with_noise(&bundle, &x, &c, 0, &cfg, &noise).unwrap();
    let dist = bundle.concept_distribution(&x).unwrap();
    let eta = dist.sample(&noise.normals).unwrap();
    let expect: f64 = (0..5).map(|i| bce_with_logit(f64::from(c[i]), eta[i])).sum();
    assert!((got.concept_loss - expect).abs() < 1e-12);
}

#[test]
fn identity_covariance_has_no_regularizer() {
    let mut rng = common::rng(32);
    let mut bundle = random_pscbm(&mut rng, 3, 4, 5, 3, CovarianceKind::Global);
    *bundle.covariance_head_mut().unwrap() = CovarianceHead::identity(CovarianceKind::Global, 5, 4);
    let cfg = LossConfig {
        lambda2: 7.0,
        ..LossConfig::default()
    };
    let b = scbm_loss(&bundle, &random_input(&mut rng, 3), &[1, 0, 1, 0, 1], 2, &cfg, &mut rng).unwrap();
    assert!(b.regularizer.abs() < 1e-12);
    assert!((b.total - (b.concept_loss + b.target_loss)).abs() < 1e-10);
}

#[test]
fn breakdown_identity_holds_everywhere() {
    let mut rng = common::rng(33);
    for _ in 0..50 {
        let bundle = random_pscbm(&mut rng, 3, 4, 6, 3, CovarianceKind::Amortized);
        let cfg = LossConfig {
            lambda1: rand::Rng::random_range(&mut rng, 0.0..3.0),
            lambda2: rand::Rng::random_range(&mut rng, 0.0..1.0),
            samples: 7,
            ..LossConfig::default()
        };
        let x = random_input(&mut rng, 3);
        let c = random_concepts(&mut rng, 6);
        let b = scbm_loss(&bundle, &x, &c, 1, &cfg, &mut rng).unwrap();
        let weighted = b.concept_loss + cfg.lambda1 * b.target_loss + cfg.lambda2 * b.regularizer;
        assert!((b.total - weighted).abs() < 1e-10);
        let icfg = InterventionTrainingConfig {
            masks: 2,
            ..InterventionTrainingConfig::default()
        };
        let b = intervention_training_loss(&bundle, &x, &c, 1, &icfg, &cfg, &mut rng).unwrap();
        let weighted = b.concept_loss + cfg.lambda1 * b.target_loss + cfg.lambda2 * b.regularizer;
        assert!((b.total - weighted).abs() < 1e-10);
    }
}

#[test]
fn hard_interventions_on_all_but_one_nearly_zero_their_concept_loss() {
    let mut rng = common::rng(34);
    let bundle = random_pscbm(&mut rng, 3, 4, 5, 3, CovarianceKind::Global);
    let x = random_input(&mut rng, 3);
    let c = [1u8, 0, 0, 1, 1];
    let icfg = InterventionTrainingConfig {
        masks: 1,
        mask_size: Some(4),
        strategy: pscbm::intervention::StrategyKind::Hard { epsilon: 1e-6 },
    };
    let cfg = LossConfig::default();
    let b = intervention_training_loss(&bundle, &x, &c, 0, &icfg, &cfg, &mut rng).unwrap();
    // four clamped concepts contribute 4·(−ln(1 − 1e−6)) and one free concept the rest
    let free_bound = 60.0;
    assert!(b.concept_loss < 4.0 * 1e-5 + free_bound);
    let clamped = -((1.0f64 - 1e-6).ln()) * 4.0;
    assert!(clamped < 1e-5);
}

#[test]
fn invalid_configs_name_their_field() {
    let bad = LossConfig {
        samples: 0,
        ..LossConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "samples"));
    let bad = LossConfig {
        lambda1: -1.0,
        ..LossConfig::default()
    };
    assert!(matches!(bad.validate(), Err(Error::InvalidConfig { field, .. }) if field == "lambda1"));
    let icfg = InterventionTrainingConfig {
        mask_size: Some(0),
        ..InterventionTrainingConfig::default()
    };
    assert!(matches!(icfg.validate(16), Err(Error::InvalidConfig { field, .. }) if field == "mask_size"));
    let icfg = InterventionTrainingConfig {
        mask_size: Some(16),
        ..InterventionTrainingConfig::default()
    };
    assert!(icfg.validate(16).is_err());
    let cfg = CbmTrainConfig {
        batch_size: 0,
        ..CbmTrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::InvalidConfig { field, .. }) if field == "batch_size"));
}

#[test]
fn training_rejects_wrong_modes_and_shapes() {
    let data = small_data(0);
    let cbm = small_cbm(&data, 0);
    let cfg = quick_pscbm(Paradigm::Plain, 0);
    assert!(matches!(train_pscbm(&cbm, &data, &cfg), Err(Error::WrongMode { .. })));
    let disabled = cbm.wrap_pretrained(CovarianceKind::Global).unwrap().disable_covariance().unwrap();
    assert!(train_pscbm(&disabled, &data, &cfg).is_err());
    let other = generate_synthetic(
        &SyntheticSpec {
            concepts: 8,
            block_size: 4,
            n_train: 20,
            n_val: 5,
            n_test: 5,
            ..SyntheticSpec::default()
        },
        0,
    )
    .unwrap();
    let wrapped = cbm.wrap_pretrained(CovarianceKind::Global).unwrap();
    assert!(matches!(train_pscbm(&wrapped, &other, &cfg), Err(Error::ShapeMismatch(_))));
}

#[test]
fn metrics_log_has_the_documented_columns() {
    let data = small_data(3);
    let cbm_cfg = CbmTrainConfig {
        epochs: 2,
        samples: 5,
        ..CbmTrainConfig::default()
    };
    let out = train_cbm(&data, &cbm_cfg).unwrap();
    let csv = out.log.validation_csv();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,concept_loss,target_loss,regularizer,total,concept_acc,target_acc,wall_time_s"
    );
    assert_eq!(lines.count(), 3);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    out.log.write(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
    assert!(dir.path().join("log.train.csv").exists());
}

#[test]
fn cbm_learns_the_synthetic_task() {
    let data = generate_synthetic(&SyntheticSpec::default(), 0).unwrap();
    let cfg = CbmTrainConfig {
        epochs: 20,
        samples: 30,
        ..CbmTrainConfig::default()
    };
    let out = train_cbm(&data, &cfg).unwrap();
    let (_, target) =
        pscbm::intervention::evaluate_plain(&out.bundle, &data, Split::Test, 100, 0).unwrap();
    assert!(target > 1.0 / 8.0 + 0.3, "test target accuracy {target}");
}
