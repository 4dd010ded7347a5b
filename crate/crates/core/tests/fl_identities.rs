//! Algebraic identities between federated and pooled training.

use tes_core::data::{partition, synth_dataset, PartitionMode, Split};
use tes_core::fl::{fedavg, local_update, run_centralized, CentralConfig, FlData};
use tes_core::nn::{init_model, train_epoch, SgdConfig};
use tes_core::rng::{derive_stream, StreamId};

#[test]
fn full_batch_fedavg_equals_pooled_step() {
    let ds = synth_dataset(600, 4).unwrap();
    for mode in [PartitionMode::Iid, PartitionMode::Shards(2)] {
        let part = partition(&ds, 6, mode, 4).unwrap();
        let global = init_model(4);
        let locals: Vec<_> = part
            .assignment
            .iter()
            .enumerate()
            .map(|(d, idx)| {
                let sgd = SgdConfig { lr: 0.1, batch: idx.len() };
                let mut rng = derive_stream(4, StreamId::new("fl-test", d as u64, "shuffle"));
                local_update(&global, &ds, idx, 1, sgd, &mut rng).unwrap()
            })
            .collect();
        let weights: Vec<usize> = part.assignment.iter().map(Vec::len).collect();
        let avg = fedavg(&locals.iter().collect::<Vec<_>>(), &weights).unwrap();

        let mut pooled = global.clone();
        let all: Vec<usize> = part.assignment.concat();
        let sgd = SgdConfig { lr: 0.1, batch: all.len() };
        let mut rng = derive_stream(4, StreamId::new("fl-test", 99, "shuffle"));
        train_epoch(&mut pooled, &ds, &all, sgd, &mut rng).unwrap();

        let diff = avg
            .flat()
            .iter()
            .zip(pooled.flat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(diff < 1e-10, "{mode:?}: max parameter difference {diff:e}");
    }
}

#[test]
fn fedavg_of_identical_models_is_identity() {
    let m = init_model(8);
    let out = fedavg(&[&m, &m, &m], &[3, 10, 1]).unwrap();
    let diff = out.flat().iter().zip(m.flat()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(diff < 1e-15);
}

#[test]
fn unlimited_uploads_reduce_to_plain_centralized_sgd() {
    let data = FlData {
        train: synth_dataset(400, 21).unwrap(),
        validation: synth_dataset(100, 22).unwrap(),
        test: synth_dataset(300, 23).unwrap(),
    };
    let config = CentralConfig {
        n_devices: 4,
        bandwidth_hz: 1e300,
        quota: 1.0,
        pool_size: 1000,
        filter: false,
        compress: false,
        server_epochs: 3,
        seed: 21,
        ..CentralConfig::default()
    };
    let run = run_centralized(&config, &data).unwrap();
    assert_eq!(run.received.len(), data.train.len());
    assert!(run.received.iter().all(|&(_, level)| level == 0));
    let mut seen: Vec<usize> = run.received.iter().map(|&(s, _)| s).collect();
    seen.sort_unstable();
    assert_eq!(seen, (0..data.train.len()).collect::<Vec<_>>());

    // The same epochs over the received samples, straight from the training set.
    let order: Vec<usize> = run.received.iter().map(|&(s, _)| s).collect();
    let pooled = data.train.subset(&order, Split::Train).unwrap();
    let idx: Vec<usize> = (0..pooled.len()).collect();
    let mut model = init_model(21);
    for e in 0..3u64 {
        let mut rng = derive_stream(21, StreamId::new("central", e, "train"));
        train_epoch(&mut model, &pooled, &idx, config.sgd, &mut rng).unwrap();
    }
    assert_eq!(model.evaluate(&data.test), run.final_accuracy);
}
