use std::fs;
use std::path::Path;

use shiftnet::nets::{arch_by_name, ReduceMode, ShiftNetVariant};
use shiftnet::pipeline::{load_cifar10, load_cifar100, predict};
use shiftnet::{
    build_resnet, build_shiftnet, build_shiftresnet, evaluate, load_checkpoint, reduce_resnet, save_checkpoint,
    synth_dataset, train, Error, Layer, Mode, Network, Shape, Tensor, TrainOptions, TrainSchedule,
};

const RECORD: usize = 3072;

fn write_records(path: &Path, label_bytes: usize, labels: &[u8], fill: u8) {
    let mut bytes = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        bytes.extend(std::iter::repeat(0u8).take(label_bytes - 1));
        bytes.push(l);
        bytes.extend((0..RECORD).map(|p| fill.wrapping_add((p % 97) as u8).wrapping_add(i as u8)));
    }
    fs::write(path, bytes).unwrap();
}

#[test]
fn cifar10_directory_loads_and_standardizes() {
    let dir = tempfile::tempdir().unwrap();
    let nested = dir.path().join("cifar-10-batches-bin");
    fs::create_dir(&nested).unwrap();
    for b in 1..=5u8 {
        write_records(&nested.join(format!("data_batch_{b}.bin")), 1, &[b, 0, 9], 10 * b);
    }
    write_records(&nested.join("test_batch.bin"), 1, &[3, 4], 7);
    let (tr, te) = load_cifar10(dir.path()).unwrap();
    assert_eq!((tr.len(), te.len()), (15, 2));
    assert_eq!(&tr.labels[..3], &[1, 0, 9]);
    assert_eq!(te.labels, vec![3, 4]);
    assert_eq!(tr.image_shape(), (3, 32, 32));
    let s = tr.images.shape();
    for c in 0..3 {
        let vals: Vec<f64> = (0..s.n).flat_map(|n| tr.images.plane(n, c).iter().map(|&v| v as f64).collect::<Vec<_>>()).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
    }
}

#[test]
fn cifar100_uses_fine_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_records(&dir.path().join("train.bin"), 2, &[42, 99], 1);
    write_records(&dir.path().join("test.bin"), 2, &[7], 2);
    let (tr, te) = load_cifar100(dir.path()).unwrap();
    assert_eq!(tr.labels, vec![42, 99]);
    assert_eq!((te.labels.clone(), te.num_classes), (vec![7], 100));
}

#[test]
fn malformed_cifar_files_are_rejected_with_their_path() {
    let dir = tempfile::tempdir().unwrap();
    for b in 1..=5 {
        write_records(&dir.path().join(format!("data_batch_{b}.bin")), 1, &[1], 0);
    }
    fs::write(dir.path().join("test_batch.bin"), [0u8; 100]).unwrap();
    match load_cifar10(dir.path()) {
        Err(Error::Dataset { path, .. }) => assert!(path.ends_with("test_batch.bin")),
        other => panic!("expected dataset error, got {:?}", other.map(|_| ())),
    }
    write_records(&dir.path().join("test_batch.bin"), 1, &[10], 0);
    assert!(matches!(load_cifar10(dir.path()), Err(Error::Dataset { .. })));
    assert!(matches!(load_cifar10(&dir.path().join("absent")), Err(Error::Dataset { .. })));
}

fn every_builder() -> Vec<Network<f32>> {
    let mut v = vec![
        build_resnet(20, 10, 1).unwrap(),
        build_resnet(56, 10, 2).unwrap(),
        build_shiftresnet(110, 1.0, 10, 3).unwrap(),
        reduce_resnet(20, 60_000, ReduceMode::ModuleWise, 10, 4).unwrap(),
        reduce_resnet(20, 60_000, ReduceMode::NetWise, 10, 5).unwrap(),
        build_shiftnet(ShiftNetVariant::A, 1000, 6).unwrap(),
        build_shiftnet(ShiftNetVariant::B, 1000, 7).unwrap(),
        build_shiftnet(ShiftNetVariant::C, 1000, 8).unwrap(),
    ];
    for eps in [1.0, 3.0, 6.0, 9.0] {
        v.push(build_shiftresnet(20, eps, 10, 9).unwrap());
    }
    v.push(Network::new(arch_by_name("shiftresnet56", 3.0, 100).unwrap(), 10).unwrap());
    v
}

#[test]
fn checkpoints_reproduce_logits_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let x = Tensor::<f32>::randn(Shape::new(2, 3, 32, 32), 11);
    for (i, mut net) in every_builder().into_iter().enumerate() {
        net.forward(&x, Mode::Train).unwrap();
        let path = dir.path().join(format!("net{i}.json"));
        save_checkpoint(&net, &path, i, None).unwrap();
        let (mut back, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest.name, net.name());
        assert_eq!(manifest.iteration, i);
        let a = net.forward(&x, Mode::Eval).unwrap();
        let b = back.forward(&x, Mode::Eval).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b), "{}", net.name());
    }
}

#[test]
fn training_reduces_loss_and_checkpoint_evaluates_identically() {
    let data = synth_dataset(64, 4, (3, 8, 8), 1).unwrap();
    let mut net = build_shiftresnet::<f32>(20, 1.0, 4, 2).unwrap();
    let schedule = TrainSchedule {
        batch_size: 16,
        max_iters: 60,
        lr_decay_points: vec![40],
        ..TrainSchedule::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let opts = TrainOptions {
        log_every: 1,
        checkpoint: Some(path.clone()),
        stop_at_accuracy: None,
        eval_every: 20,
    };
    let log = train(&mut net, &data, &schedule, &opts).unwrap();
    assert_eq!(log.records.len(), 60);
    assert_eq!(log.evals.iter().map(|e| e.iter).collect::<Vec<_>>(), vec![19, 39, 59]);
    let early = log.median_loss(0, 10).unwrap();
    let late = log.median_loss(50, 60).unwrap();
    assert!(late < early, "median loss {early} -> {late}");
    assert!((log.records[45].lr - 0.01).abs() < 1e-12);

    let before = evaluate(&mut net, &data, 10).unwrap();
    let (mut back, manifest) = load_checkpoint(&path).unwrap();
    assert_eq!(manifest.iteration, 60);
    assert_eq!(manifest.schedule.as_ref(), Some(&schedule));
    assert_eq!(evaluate(&mut back, &data, 10).unwrap(), before);
    let p1 = predict(&mut net, &data, 7).unwrap();
    let p2 = predict(&mut back, &data, 7).unwrap();
    assert_eq!(p1.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>(), p2.iter().map(|t| t.data().to_vec()).collect::<Vec<_>>());
}

#[test]
fn mismatched_heads_and_empty_sets_are_rejected() {
    let data = synth_dataset(20, 20, (3, 8, 8), 1).unwrap();
    let mut net = build_shiftresnet::<f32>(20, 1.0, 10, 0).unwrap();
    let schedule = TrainSchedule {
        max_iters: 1,
        lr_decay_points: vec![],
        ..TrainSchedule::default()
    };
    assert!(train(&mut net, &data, &schedule, &TrainOptions::default()).is_err());
    assert!(synth_dataset(3, 4, (3, 8, 8), 0).is_err());
}

#[test]
fn eval_leaves_parameters_untouched() {
    let data = synth_dataset(12, 3, (3, 8, 8), 4).unwrap();
    let mut net = build_shiftresnet::<f32>(20, 3.0, 3, 5).unwrap();
    let snapshot: Vec<Vec<f32>> = net.params().iter().chain(net.buffers().iter()).map(|p| p.value.data().to_vec()).collect();
    evaluate(&mut net, &data, 5).unwrap();
    let after: Vec<Vec<f32>> = net.params().iter().chain(net.buffers().iter()).map(|p| p.value.data().to_vec()).collect();
    assert_eq!(snapshot, after);
}
