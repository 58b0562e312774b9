use proptest::prelude::*;
use structmiss::bayes::{verify_pfn_risk_decomposition, DiscretePrior, ExactPredictor, TaskTable, UniformPredictor};
use structmiss::checkpoint::{self, CheckpointMeta};
use structmiss::episode::Episode;
use structmiss::eval::{ColumnMeta, FlowImputer, Imputer, MaskedDataset};
use structmiss::flow::FlowConfig;
use structmiss::missingness::mcar_mask;
use structmiss::pfn::{PfnConfig, PfnModel};
use structmiss::scm::{sample_task, MechanismConfig, TaskConfig};
use structmiss::train::{train, ScmPrior, TrainConfig};
use structmiss::{PfnModel32, PfnModel64, Scalar};

fn small_config(features: usize, classes: usize) -> PfnConfig {
    PfnConfig {
        width: 16,
        layers: 1,
        heads: 2,
        ffn: 16,
        max_classes: classes,
        max_features: features,
        ..PfnConfig::desk()
    }
}

fn task_config(features: usize) -> TaskConfig {
    let mut mechanism = MechanismConfig::desk(features);
    mechanism.class_range = (2, 3);
    mechanism.hidden = 32;
    TaskConfig {
        mechanism,
        ..TaskConfig::default()
    }
}

fn trained<T: Scalar>() -> PfnModel<T> {
    let prior = ScmPrior {
        task: task_config(4),
        rows: 40,
    };
    let cfg = TrainConfig {
        lr: 1e-3,
        batch_size: 2,
        steps: 4,
        steps_per_epoch: 2,
        warmup_epochs: 1,
        seed: 1,
        ..TrainConfig::default()
    };
    let model = PfnModel::<T>::new(small_config(4, 3), Some(FlowConfig::default()), 2).unwrap();
    train(model, &prior, &cfg).unwrap().model
}

fn check_round_trip<T: Scalar>(model: PfnModel<T>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    checkpoint::save(&model, &CheckpointMeta::untrained(&model, 2), &path).unwrap();
    let (back, meta) = checkpoint::load::<T>(&path).unwrap();
    assert_eq!(meta.precision, T::PRECISION);
    let ep = Episode::from_task(&sample_task(&task_config(4), 60, 9).unwrap()).unwrap();
    assert_eq!(model.predict(&ep).unwrap(), back.predict(&ep).unwrap());
}

#[test]
fn trained_checkpoint_reloads_with_identical_predictions() {
    check_round_trip::<f32>(trained::<f32>() as PfnModel32);
    check_round_trip::<f64>(trained::<f64>() as PfnModel64);
}

#[test]
fn synthetic_task_predictions_are_distributions() {
    let model = trained::<f64>();
    let task = sample_task(&task_config(4), 80, 3).unwrap();
    let ep = Episode::from_task(&task).unwrap();
    let p = model.predict(&ep).unwrap();
    assert_eq!(p.rows(), ep.n_queries());
    for i in 0..p.rows() {
        let s: f64 = p.row(i).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
    }
}

#[test]
fn flow_imputer_fills_only_missing_cells() {
    let model = trained::<f32>();
    let task = sample_task(&TaskConfig { gate: None, ..task_config(4) }, 50, 4).unwrap();
    let columns = (0..4).map(|j| ColumnMeta::numeric(format!("x{j}"))).collect();
    let full = MaskedDataset::from_values("t", task.x.clone(), columns).unwrap();
    let ds = full.with_mask(&mcar_mask(50, 4, 0.2, 6, &[]).unwrap()).unwrap();
    let imp = FlowImputer::new(model, 3);
    let (filled, spread) = imp.impute_with_spread(&ds, 1).unwrap();
    for i in 0..50 {
        for j in 0..4 {
            if ds.mask.is_missing(i, j) {
                assert!(filled.values.at(i, j).is_finite());
                assert!(spread.at(i, j) >= 0.0);
            } else {
                assert_eq!(filled.values.at(i, j).to_bits(), task.x.at(i, j).to_bits());
                assert_eq!(spread.at(i, j), 0.0);
            }
        }
    }
    assert_eq!(imp.impute(&ds, 1).unwrap().values, filled.values);
}

/// Random positive joint table over two binary features and two classes.
fn table(weights: Vec<f64>) -> TaskTable {
    TaskTable::from_fn(vec![2, 2], 2, |x, y, m| weights[((x[0] * 2 + x[1]) * 2 + y) * 4 + m]).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn risk_identity_holds_on_random_priors(
        w1 in prop::collection::vec(0.05f64..1.0, 32),
        w2 in prop::collection::vec(0.05f64..1.0, 32),
        mix in 0.1f64..0.9,
    ) {
        let prior = DiscretePrior::new(vec![table(w1), table(w2)], vec![mix, 1.0 - mix]).unwrap();
        for k in 0..=1 {
            let exact = verify_pfn_risk_decomposition(&prior, &ExactPredictor(&prior), k).unwrap();
            prop_assert!(exact.holds && exact.expected_kl.abs() < 1e-12);
            let uniform = verify_pfn_risk_decomposition(&prior, &UniformPredictor(2), k).unwrap();
            prop_assert!(uniform.holds);
            prop_assert!((uniform.cross_entropy - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
