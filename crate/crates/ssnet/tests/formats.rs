use std::fs;

use ssnet::checkpoint::Checkpoint;
use ssnet::config::RunConfig;
use ssnet::dataset::{read_dataset, write_dataset, Meta};
use ssnet::pnm::{read_pgm16, read_pgm8, read_ppm, rgb_to_tensor, tensor_to_rgb, write_pgm16, write_pgm8, write_ppm, Raster};
use ssnet::train::{csv_string, evaluate_checkpoint, split_validation, train, MetricRow};
use ssnet::Error;
use ssnet_core::net::init_params;
use ssnet_core::synth::{synth_generate, SynthConfig, NUM_CLASSES, THING_CLASSES};

fn gray<T: Clone>(w: usize, h: usize, samples: Vec<T>) -> Raster<T> {
    Raster {
        width: w,
        height: h,
        channels: 1,
        samples,
    }
}

#[test]
fn pnm_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let rgb = Raster {
        width: 3,
        height: 2,
        channels: 3,
        samples: (0..18).map(|v| (v * 14) as u8).collect(),
    };
    let p = dir.path().join("a.ppm");
    write_ppm(&p, &rgb).unwrap();
    assert_eq!(read_ppm(&p).unwrap(), rgb);

    let g8 = gray(4, 1, vec![0u8, 1, 254, 255]);
    let p = dir.path().join("b.pgm");
    write_pgm8(&p, &g8).unwrap();
    assert_eq!(read_pgm8(&p).unwrap(), g8);

    let g16 = gray(2, 2, vec![0u16, 300, 65535, 1]);
    let p = dir.path().join("c.pgm");
    write_pgm16(&p, &g16).unwrap();
    let back = read_pgm16(&p).unwrap();
    assert_eq!(back, g16);
    assert_eq!(back.samples[1], 300);
    // 16-bit samples are stored big-endian.
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[bytes.len() - 8..bytes.len() - 4], &[0, 0, 1, 44]);
}

#[test]
fn pnm_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.ppm");
    fs::write(&p, b"P6\n4 4\n255\n\x01\x02\x03").unwrap();
    assert!(matches!(read_ppm(&p), Err(Error::Format { .. })));

    // An 8-bit map is not silently widened to 16 bits, nor a graymap read as color.
    let q = dir.path().join("g.pgm");
    write_pgm8(&q, &gray(2, 1, vec![3, 4])).unwrap();
    assert!(matches!(read_pgm16(&q), Err(Error::Format { .. })));
    assert!(matches!(read_ppm(&q), Err(Error::Format { .. })));

    let missing = dir.path().join("nope.pgm");
    match read_pgm8(&missing) {
        Err(Error::Io { path, .. }) => assert_eq!(path, missing),
        other => panic!("{other:?}"),
    }
}

#[test]
fn image_tensor_round_trip() {
    let s = &synth_generate(1, 1, SynthConfig::new(32, 40, 2).unwrap()).unwrap()[0];
    let img = tensor_to_rgb(&s.image);
    assert_eq!((img.width, img.height), (40, 32));
    assert_eq!(rgb_to_tensor(&img), s.image);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let samples = synth_generate(3, 4, SynthConfig::new(32, 32, 3).unwrap()).unwrap();
    let meta = Meta {
        count: 4,
        classes: NUM_CLASSES,
        thing_classes: THING_CLASSES.to_vec(),
        seed: 3,
    };
    write_dataset(dir.path(), &samples, &meta).unwrap();
    assert!(dir.path().join("img_00003.ppm").exists());
    assert!(dir.path().join("inst_00000.pgm").exists());
    let (back, m) = read_dataset(dir.path()).unwrap();
    assert_eq!(m, meta);
    for (a, b) in samples.iter().zip(&back) {
        assert_eq!(a.image, b.image);
        assert_eq!(a.semantic, b.semantic);
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.centers.len(), b.centers.len());
    }

    // Labels that contradict the metadata are rejected with the file named.
    let narrow = Meta {
        classes: 2,
        ..meta.clone()
    };
    fs::write(dir.path().join("meta.txt"), narrow.to_text()).unwrap();
    let e = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(e.contains("sem_0000"), "{e}");
    fs::write(dir.path().join("meta.txt"), "count=1\nclasses=3\nseed=0\n").unwrap();
    assert!(read_dataset(dir.path()).is_err());
}

fn small_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.encoder.stages[1].dilations = vec![1];
    c.model.encoder.stages[2].dilations = vec![2];
    c.train.epochs = 2;
    c.train.batch = 4;
    c.eval_t = 5;
    c
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let ck = Checkpoint {
        config: cfg.clone(),
        epoch: 7,
        params: init_params(&cfg.model.encoder, 4).unwrap(),
    };
    let p = dir.path().join("m.wseg");
    ck.save(&p).unwrap();
    let back = Checkpoint::load(&p).unwrap();
    assert_eq!(back, ck);

    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..4], b"WSEG");
    for cut in [3, 20, bytes.len() - 1] {
        assert!(Checkpoint::from_bytes(&bytes[..cut], &p).is_err(), "cut at {cut}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, &p).is_err());

    // Parameters from a different architecture are a structural error.
    let mut other = ck.clone();
    other.config.model.encoder.stages[2].channels = 96;
    assert!(matches!(
        other.check_structure(),
        Err(Error::Core(ssnet_core::Error::Structural(_)))
    ));
    other.save(&p).unwrap();
    assert!(matches!(Checkpoint::load(&p), Err(Error::Core(ssnet_core::Error::Structural(_)))));
}

#[test]
fn training_is_deterministic_and_reloadable() {
    let samples = synth_generate(5, 12, SynthConfig::new(32, 32, 2).unwrap()).unwrap();
    let (tr, va) = split_validation(&samples, 0.25).unwrap();
    assert_eq!((tr.len(), va.len()), (9, 3));
    let cfg = small_config();
    let mut seen = Vec::new();
    let a = train(&cfg, tr, va, |st, row| seen.push((st.epoch, row.epoch))).unwrap();
    let b = train(&cfg, tr, va, |_, _| {}).unwrap();
    assert_eq!(seen, [(0, 0), (1, 1)]);
    let text = csv_string(&a.rows);
    assert_eq!(text, csv_string(&b.rows));
    assert!(text.starts_with("epoch,split,miou,class_avg,global_avg,ap,ap50\n0,val,"));
    assert_eq!(text.lines().count(), 3);
    assert_eq!(a.best, b.best);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("best.wseg");
    a.best.save(&p).unwrap();
    let loaded = Checkpoint::load(&p).unwrap();
    let rows: Vec<MetricRow> = evaluate_checkpoint(&loaded, va, &[0, 5], false).unwrap();
    assert_eq!(rows.iter().map(|r| r.split.as_str()).collect::<Vec<_>>(), ["t=0", "t=5"]);
    assert_eq!(rows[1].report.semantic.miou, a.best_miou);
    assert_eq!(rows, evaluate_checkpoint(&a.best, va, &[0, 5], false).unwrap());
    assert_eq!(rows[0].report.instance.ap, 0.0);
}

#[test]
fn split_needs_two_samples() {
    let one = synth_generate(0, 1, SynthConfig::new(32, 32, 1).unwrap()).unwrap();
    assert!(split_validation(&one, 0.2).is_err());
}
