use daq8::harness::data::{idx_images_bytes, idx_labels_bytes, synthetic};
use daq8::harness::{DatasetSource, LrSchedule, Mode, Seeds, TrainConfig, Trainer};
use daq8::Error;

fn small(mode: Mode, epochs: u64) -> TrainConfig {
    TrainConfig {
        mode,
        epochs,
        batch_size: 16,
        log_every: 5,
        dataset: DatasetSource::Synthetic {
            train: 200,
            val: 60,
            size: 16,
            classes: 10,
            noise: 0.1,
        },
        seeds: Seeds::default().for_run(3),
        ..TrainConfig::default()
    }
}

fn run(cfg: TrainConfig) -> Vec<daq8::harness::MetricsRecord> {
    Trainer::new(cfg).unwrap().run(&mut |_| Ok(())).unwrap().records
}

#[test]
fn zero_epochs_gives_initial_record_only() {
    let records = run(small(Mode::Int8Da, 0));
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].iteration, 0);
    assert!(records[0].layers.is_empty());
}

#[test]
fn fp32_learns_separable_blobs() {
    let mut cfg = small(Mode::Fp32, 10);
    cfg.dataset = DatasetSource::Synthetic {
        train: 200,
        val: 50,
        size: 16,
        classes: 10,
        noise: 0.0,
    };
    let records = run(cfg);
    let last = records.last().unwrap();
    assert!(last.train_acc >= 0.95, "train accuracy {}", last.train_acc);
}

#[test]
fn runs_are_bit_reproducible() {
    for mode in Mode::ALL {
        let a = run(small(mode, 1));
        let b = run(small(mode, 1));
        assert_eq!(a, b, "{mode}");
        assert!(a.iter().skip(1).all(|r| r.layers.len() == 4));
    }
}

#[test]
fn modes_share_schedule_and_differ_only_in_arithmetic() {
    let f = run(small(Mode::Fp32, 1));
    let d = run(small(Mode::Int8Da, 1));
    let g = run(small(Mode::Int8Gq, 1));
    let iters = |r: &[daq8::harness::MetricsRecord]| r.iter().map(|x| (x.iteration, x.epoch)).collect::<Vec<_>>();
    assert_eq!(iters(&f), iters(&d));
    assert_eq!(iters(&d), iters(&g));
    assert!(d.iter().skip(1).all(|r| r.layers.iter().all(|l| l.err_mcs.is_some())));
    assert!(g.iter().skip(1).all(|r| r.layers.iter().all(|l| l.err_mcs.is_none())));
    assert_ne!(d, g);
}

#[test]
fn resume_matches_straight_run() {
    for mode in [Mode::Int8Da, Mode::Int8Gq, Mode::Fp32] {
        let cfg = small(mode, 2);
        let straight = run(cfg.clone());

        let mut first = Trainer::new(cfg).unwrap();
        let mut before = vec![first.initial_record().unwrap()];
        // stop mid-epoch and between logging points
        for _ in 0..17 {
            before.extend(first.step().unwrap());
        }
        let mut buf = Vec::new();
        first.save_checkpoint(&mut buf).unwrap();
        drop(first);

        let mut resumed = Trainer::restore(&buf[..]).unwrap();
        assert_eq!(resumed.iteration(), 17);
        let after = resumed.run(&mut |_| Ok(())).unwrap().records;
        before.extend(after);
        assert_eq!(before, straight, "{mode}");
    }
}

#[test]
fn checkpoint_errors() {
    let t = Trainer::new(small(Mode::Int8Da, 1)).unwrap();
    let mut buf = Vec::new();
    t.save_checkpoint(&mut buf).unwrap();
    // rename the model section to an unknown version
    let pos = buf.windows(8).position(|w| w == b"model/v1").unwrap();
    let mut v2 = buf.clone();
    v2[pos + 7] = b'2';
    match Trainer::restore(&v2[..]) {
        Err(Error::Checkpoint(m)) => assert!(m.contains("model/v2"), "{m}"),
        other => panic!("{:?}", other.err()),
    }
    assert!(matches!(Trainer::restore(&buf[..buf.len() - 3]), Err(Error::Checkpoint(_))));
    let mut other_model = small(Mode::Int8Da, 1);
    other_model.model.layers[0] = daq8::harness::LayerSpec::conv(4);
    let (train, val) = daq8::harness::load_dataset(&other_model.dataset, other_model.seeds.data).unwrap();
    let cfg_json = other_model.to_json();
    // swapping in a different config makes the stored parameters mismatch
    let mut sections = daq8::harness::checkpoint::read_container(&buf[..]).unwrap();
    sections[0].1 = cfg_json.into_bytes();
    let named: Vec<(&str, Vec<u8>)> = sections.iter().map(|(n, p)| (n.as_str(), p.clone())).collect();
    let mut swapped = Vec::new();
    daq8::harness::checkpoint::write_container(&mut swapped, &named).unwrap();
    assert!(matches!(Trainer::restore_with_data(&swapped[..], train, val), Err(Error::Checkpoint(_))));
}

#[test]
fn idx_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    let (train, val) = synthetic(5, 64, 32, 16, 10, 0.1);
    let paths: Vec<_> = ["ti", "tl", "vi", "vl"].iter().map(|n| dir.path().join(n)).collect();
    std::fs::write(&paths[0], idx_images_bytes(train.images())).unwrap();
    std::fs::write(&paths[1], idx_labels_bytes(train.labels())).unwrap();
    std::fs::write(&paths[2], idx_images_bytes(val.images())).unwrap();
    std::fs::write(&paths[3], idx_labels_bytes(val.labels())).unwrap();
    let cfg = TrainConfig {
        dataset: DatasetSource::Idx {
            train_images: paths[0].clone(),
            train_labels: paths[1].clone(),
            val_images: paths[2].clone(),
            val_labels: paths[3].clone(),
            classes: 10,
        },
        ..small(Mode::Int8Da, 1)
    };
    let records = run(cfg.clone());
    assert_eq!(records.last().unwrap().iteration, 4);

    std::fs::write(&paths[1], idx_labels_bytes(&[0; 63])).unwrap();
    assert!(matches!(Trainer::new(cfg), Err(Error::Dimension(_))));
}

#[test]
fn divergence_is_reported() {
    let mut cfg = small(Mode::Fp32, 1);
    cfg.lr = LrSchedule::Constant { lr: 1e6 };
    cfg.weight_decay = 0.0;
    match Trainer::new(cfg).unwrap().run(&mut |_| Ok(())) {
        Err(Error::Diverged { diagnostic, .. }) => assert!(diagnostic.contains("conv0.weight"), "{diagnostic}"),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.final_val_acc)),
    }
}

#[test]
fn exempt_layers_run_in_float() {
    let mut cfg = small(Mode::Int8Da, 1);
    cfg.exempt_first = true;
    cfg.exempt_last = true;
    let t = Trainer::new(cfg).unwrap();
    let traces = t.peek_gradients().unwrap();
    assert!(traces[0].report.is_none());
    assert!(traces[1].report.is_some());
    assert!(traces[3].report.is_none());
}

#[test]
fn metrics_files_are_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = daq8::harness::train_to_dir(Trainer::new(small(Mode::Int8Da, 1)).unwrap(), dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let jsonl = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
    assert_eq!(csv.lines().count(), out.records.len() + 1);
    assert_eq!(jsonl.lines().count(), out.records.len());
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(&header[..5], &["iteration", "epoch", "loss", "train_acc", "val_acc"]);
    assert_eq!(header.len(), 5 + 4 * 9);
    let restored = Trainer::restore_file(&dir.path().join("checkpoint.daq8")).unwrap();
    assert!(restored.is_finished());
}
