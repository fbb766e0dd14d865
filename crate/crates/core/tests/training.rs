use softtree_lmc::data::{class_ratio_split_indices, subsample_protocol, synth_gaussian_blobs, synth_xor};
use softtree_lmc::experiment::{prepare_data, DataSource, ExperimentConfig};
use softtree_lmc::model::{accuracy, ArchitectureSpec, TreeKind};
use softtree_lmc::training::{select_learning_rate, train, TrainConfig};

fn config(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        batch_size: 64,
        seed,
        learning_rates: vec![0.05, 0.01],
        ..TrainConfig::default()
    }
}

#[test]
fn every_architecture_learns_separable_blobs() {
    let data = synth_gaussian_blobs(600, 4, 3, 4.0, 2).unwrap();
    for kind in TreeKind::ALL {
        let spec = ArchitectureSpec::new(kind, 2, 8, 4, 3).unwrap();
        let run = train(&spec, &data, &config(1), 0.05).unwrap();
        assert!(
            run.epoch_loss.last().unwrap() < &run.epoch_loss[0],
            "{kind}: loss did not drop"
        );
        assert!(
            accuracy(&run.params, &data).unwrap() > 90.0,
            "{kind}: {:?}",
            run.train_accuracy.last()
        );
        assert_eq!(run.train_accuracy.len(), 15);
    }
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let data = synth_xor(700, 4, 0.0, 5).unwrap();
    let spec = ArchitectureSpec::new(TreeKind::NonOblivious, 3, 6, 4, 2).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&spec, &data, &config(9), 0.01).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(3));
    assert_ne!(one.params, train(&spec, &data, &config(10), 0.01).unwrap().params);
}

#[test]
fn learning_rate_selection_picks_best_final_accuracy() {
    let data = synth_gaussian_blobs(400, 3, 2, 2.0, 8).unwrap();
    let spec = ArchitectureSpec::new(TreeKind::Oblivious, 2, 4, 3, 2).unwrap();
    let mut cfg = config(3);
    cfg.learning_rates = vec![0.1, 0.01, 0.0001];
    cfg.epochs = 3;
    let (best, scores) = select_learning_rate(&spec, &data, &cfg).unwrap();
    assert_eq!(scores.len(), 3);
    let top = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(best.final_accuracy(), top);
    let expected_lr = scores.iter().filter(|s| s.1 == top).map(|s| s.0).fold(0.0, f64::max);
    assert_eq!(best.lr, expected_lr);
    for &(lr, acc) in &scores {
        assert_eq!(train(&spec, &data, &cfg, lr).unwrap().final_accuracy(), acc);
    }
}

#[test]
fn split_protocols() {
    let big = synth_gaussian_blobs(20_500, 2, 2, 1.0, 0).unwrap();
    let (train_rows, test_rows) = subsample_protocol(&big, 3).unwrap();
    assert_eq!((train_rows.len(), test_rows.len()), (10_000, 10_000));

    let data = synth_xor(1000, 3, 0.0, 1).unwrap();
    let (a, b) = class_ratio_split_indices(&data, 4).unwrap();
    let mut all: Vec<usize> = a.iter().chain(&b).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..1000).collect::<Vec<_>>());
    let count = |idx: &[usize], class: usize| idx.iter().filter(|&&i| data.labels()[i] == class).count();
    let (neg, pos) = (count(&all, 0) as f64, count(&all, 1) as f64);
    assert!((count(&a, 0) as f64 - 0.8 * neg).abs() <= 0.5);
    assert!((count(&a, 1) as f64 - 0.2 * pos).abs() <= 0.5);
}

#[test]
fn prepared_data_is_quantile_normalized() {
    let cfg = ExperimentConfig {
        data: DataSource::Blobs {
            samples: 2000,
            features: 3,
            classes: 2,
            separation: 2.0,
            seed: 1,
        },
        ..ExperimentConfig::default()
    };
    let d = prepare_data(&cfg).unwrap();
    assert_eq!(d.train.len() + d.test.len(), 2000);
    for f in 0..3 {
        let col: Vec<f64> = d.train.rows().map(|r| r[f]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
    }
    assert!(d.source.starts_with("synth:blobs"));
}
