use std::sync::Arc;

use pyrapool::dataio::{generate_toy_dataset, subtract_mean, ToyConfig};
use pyrapool::geometry::resize_exact;
use pyrapool::netgraph::{shared, ParameterStore};
use pyrapool::training::{train, train_with, SizeSchedule, TrainConfig};
use pyrapool::{Mode, NetworkSpec};

#[test]
fn loss_falls_over_first_three_epochs() {
    let data = generate_toy_dataset(&ToyConfig::default()).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    assert_eq!(cfg.learning_rate, 0.01);
    let (_, reports) = train(Arc::new(NetworkSpec::toy(5)), &data.train, &data.test, &cfg).unwrap();
    let losses: Vec<f64> = reports.iter().map(|r| r.loss).collect();
    assert!(losses[1] < losses[0] && losses[2] < losses[1], "{losses:?}");
}

#[test]
fn learning_rate_decays_at_most_twice() {
    let data = generate_toy_dataset(&ToyConfig {
        train_per_class: 6,
        test_per_class: 2,
        ..ToyConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 16,
        batch_size: 8,
        plateau_gain: 1000.0,
        ..TrainConfig::default()
    };
    let (_, reports) = train(Arc::new(NetworkSpec::toy(5)), &data.train, &data.test, &cfg).unwrap();
    let lrs: Vec<f64> = reports.iter().map(|r| r.learning_rate).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]), "{lrs:?}");
    let distinct = lrs.windows(2).filter(|w| w[1] < w[0]).count();
    assert_eq!(distinct, 2, "{lrs:?}");
    assert!((lrs[15] - 1e-4).abs() < 1e-12);
}

#[test]
fn alternating_sizes_share_one_parameter_set() {
    let data = generate_toy_dataset(&ToyConfig {
        train_per_class: 10,
        test_per_class: 2,
        ..ToyConfig::default()
    })
    .unwrap();
    let spec = Arc::new(NetworkSpec::toy(5));
    let params = shared(ParameterStore::init(&spec, 0.01, 3));
    let cfg = TrainConfig {
        epochs: 4,
        batch_size: 10,
        learning_rate: 0.003,
        schedule: SizeSchedule::Alternate(vec![32, 24]),
        ..TrainConfig::default()
    };
    let probe = &data.test[0].image;
    let mut sizes = Vec::new();
    let mut snapshots = Vec::new();
    train_with(spec.clone(), &params, &data.train, &data.test, &cfg, |report, instances| {
        sizes.push(report.size);
        assert!(instances.len() >= 2);
        let mut lens = Vec::new();
        for inst in instances {
            assert!(inst.shares_parameters_with(&instances[0]));
            let (h, w) = inst.input_size();
            let x = subtract_mean(&resize_exact(probe, w, h)?, 128.0);
            lens.push(inst.forward(&x, Mode::Eval)?.0.len());
            let bits: Vec<u32> = inst.params().read().unwrap().slots().iter().flat_map(|s| s.value.data().iter().map(|v| v.to_bits())).collect();
            snapshots.push(bits);
        }
        assert!(lens.iter().all(|&l| l == lens[0]));
        let n = instances.len();
        let epoch = &snapshots[snapshots.len() - n..];
        assert!(epoch.iter().all(|s| *s == epoch[0]));
        Ok(())
    })
    .unwrap();
    assert_eq!(sizes, vec![32, 24, 32, 24]);
}
