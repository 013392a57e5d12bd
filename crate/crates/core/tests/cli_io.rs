//! Config files, checkpoints, the synthetic dataset and the toy trainer.

use piip::checkpoint::{self, Checkpoint, MAGIC, VERSION};
use piip::config::{preset, ConfigFile, TrainConfig, PRESETS};
use piip::data::{self, generate, toy_dataset, ToySplit, CLASSES, TEST_SAMPLES, TRAIN_SAMPLES};
use piip::model::synthetic_image;
use piip::numerics::{Real, Tensor};
use piip::train::{self, cosine_lr, EpochMetrics};
use piip::{Error, Model};

fn trained_like<T: Real>(name: &str) -> Model<T> {
    let mut m = Model::<T>::build(&preset(name).unwrap(), 3).unwrap();
    m.perturb_zero_init(4, 0.2).unwrap();
    m
}

fn bits<T: Real>(t: &Tensor<T>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_f64().expect("finite").to_bits()).collect()
}

fn assert_same_weights<T: Real>(a: &Model<T>, b: &Model<T>) {
    let (ta, tb) = (a.params().tensors().unwrap(), b.params().tensors().unwrap());
    assert_eq!(ta.len(), tb.len());
    for ((na, xa), (nb, xb)) in ta.iter().zip(&tb) {
        assert_eq!(na, nb);
        assert_eq!(xa.shape(), xb.shape(), "{na}");
        assert_eq!(bits(xa), bits(xb), "{na}");
    }
}

/// Byte offset of record 0's payload, recomputed from the layout.
fn first_payload_offset(bytes: &[u8]) -> usize {
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let config_len = u32_at(8);
    let rec = 12 + config_len + 4;
    let name_len = u32_at(rec);
    let rank = u32_at(rec + 4 + name_len + 1);
    rec + 4 + name_len + 1 + 4 + 8 * rank
}

fn integrity_message(r: Result<Checkpoint, Error>) -> String {
    match r {
        Err(Error::Integrity(msg)) => msg,
        other => panic!("expected an integrity error, got {other:?}"),
    }
}

// ---------------------------------------------------------------- checkpoint

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["piip-micro", "piip-micro-cls"] {
        let model = trained_like::<f32>(name);
        let path = dir.path().join(format!("{name}.ckpt"));
        checkpoint::save(&model, &path).unwrap();
        let back: Model<f32> = checkpoint::load(&path).unwrap();
        assert_eq!(back.config(), model.config());
        assert_same_weights(&model, &back);
        let x = synthetic_image::<f32>(model.input_shape(), 9);
        assert_eq!(bits(&model.infer(&x).unwrap()), bits(&back.infer(&x).unwrap()), "{name}");
    }
    let model = trained_like::<f64>("piip-micro");
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let back: Model<f64> = Checkpoint::from_bytes(bytes.clone()).unwrap().into_model().unwrap();
    assert_same_weights(&model, &back);
    assert_eq!(checkpoint::to_bytes(&back).unwrap(), bytes, "re-serialization is byte-identical");
}

#[test]
fn checkpoint_header_layout() {
    let model = trained_like::<f32>("piip-micro");
    let bytes = checkpoint::to_bytes(&model).unwrap();
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let config_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let snapshot = std::str::from_utf8(&bytes[12..12 + config_len]).unwrap();
    assert_eq!(ConfigFile::parse(snapshot).unwrap().model, *model.config());
    let count = u32::from_le_bytes(bytes[12 + config_len..16 + config_len].try_into().unwrap()) as usize;
    assert_eq!(count, model.params().len());
    // Record 0: name, dtype tag 0 (f32), rank and dims as laid out.
    let (first, t) = &model.params().tensors().unwrap()[0];
    let rec = 16 + config_len;
    let name_len = u32::from_le_bytes(bytes[rec..rec + 4].try_into().unwrap()) as usize;
    assert_eq!(&bytes[rec + 4..rec + 4 + name_len], first.as_bytes());
    assert_eq!(bytes[rec + 4 + name_len], 0);
    let payload = first_payload_offset(&bytes);
    let v0 = f32::from_le_bytes(bytes[payload..payload + 4].try_into().unwrap());
    assert_eq!(v0.to_bits(), t.data()[0].to_bits());
}

#[test]
fn flipped_payload_byte_names_the_record() {
    let model = trained_like::<f32>("piip-micro");
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let first = model.params().tensors().unwrap()[0].0.clone();
    let mut bad = bytes.clone();
    bad[first_payload_offset(&bytes) + 1] ^= 0x10;
    let msg = integrity_message(Checkpoint::from_bytes(bad));
    assert!(msg.contains(&format!("record 0 (`{first}`)")) && msg.contains("CRC"), "{msg}");

    // A flip anywhere inside the records is caught, whichever record it hits.
    let start = first_payload_offset(&bytes);
    for k in 0..40 {
        let mut bad = bytes.clone();
        let at = start + (bytes.len() - 4 - start) * k / 40;
        bad[at] ^= 0x01;
        let msg = integrity_message(Checkpoint::from_bytes(bad));
        assert!(msg.contains("record") || msg.contains("CRC"), "byte {at}: {msg}");
    }
}

#[test]
fn corrupted_config_snapshot_fails_the_trailing_crc() {
    let model = trained_like::<f32>("piip-micro");
    let mut bytes = checkpoint::to_bytes(&model).unwrap();
    // `dim = 16` → `dim = 17` keeps the TOML valid.
    let text = String::from_utf8_lossy(&bytes).into_owned();
    let at = text.find("dim = 16").unwrap() + 7;
    bytes[at] = b'7';
    let msg = integrity_message(Checkpoint::from_bytes(bytes));
    assert!(msg.contains("trailing CRC"), "{msg}");
}

#[test]
fn bad_magic_truncation_and_trailing_bytes_are_rejected() {
    let model = trained_like::<f32>("piip-micro");
    let bytes = checkpoint::to_bytes(&model).unwrap();

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(integrity_message(Checkpoint::from_bytes(bad)).contains("magic"));

    for k in 0..=50 {
        let len = bytes.len() * k / 51;
        let msg = integrity_message(Checkpoint::from_bytes(bytes[..len].to_vec()));
        assert!(msg.contains("truncated") || msg.contains("magic"), "length {len}: {msg}");
    }
    let msg = integrity_message(Checkpoint::from_bytes(bytes[..bytes.len() - 1].to_vec()));
    assert!(msg.contains("truncated"), "{msg}");

    let mut long = bytes.clone();
    long.push(0);
    assert!(integrity_message(Checkpoint::from_bytes(long)).contains("trailing bytes"));
}

#[test]
fn truncation_inside_a_record_names_it() {
    let model = trained_like::<f32>("piip-micro");
    let bytes = checkpoint::to_bytes(&model).unwrap();
    let first = model.params().tensors().unwrap()[0].0.clone();
    let msg = integrity_message(Checkpoint::from_bytes(bytes[..first_payload_offset(&bytes) + 2].to_vec()));
    assert!(msg.contains(&format!("record 0 (`{first}`)")) && msg.contains("truncated"), "{msg}");
}

#[test]
fn other_versions_are_unsupported() {
    let model = trained_like::<f32>("piip-micro");
    let mut bytes = checkpoint::to_bytes(&model).unwrap();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    match Checkpoint::from_bytes(bytes) {
        Err(Error::UnsupportedVersion { found: 2, supported: 1 }) => {}
        other => panic!("{other:?}"),
    }
}

#[test]
fn mismatched_model_is_a_shape_error_naming_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("micro.ckpt");
    checkpoint::save(&trained_like::<f32>("piip-micro"), &path).unwrap();

    // Same branch names, different widths.
    let mut wide = preset("piip-micro").unwrap();
    wide.branches[0].dim = 24;
    let mut target = Model::<f32>::build(&wide, 0).unwrap();
    let before = checkpoint::to_bytes(&target).unwrap();
    match checkpoint::load_into(&mut target, &path) {
        Err(Error::Shape(msg)) => assert!(msg.contains("tensor `branch1."), "{msg}"),
        other => panic!("{other:?}"),
    }
    assert_eq!(checkpoint::to_bytes(&target).unwrap(), before, "a failed restore writes nothing");

    // Different heads: tensors missing on one side.
    let mut cls = Model::<f32>::build(&preset("piip-micro-cls").unwrap(), 0).unwrap();
    match checkpoint::load_into(&mut cls, &path) {
        Err(Error::Shape(msg)) => assert!(msg.contains("tensor `"), "{msg}"),
        other => panic!("{other:?}"),
    }

    // Stored precision differs from the model's.
    let mut f64_model = Model::<f64>::build(&preset("piip-micro").unwrap(), 0).unwrap();
    match checkpoint::load_into(&mut f64_model, &path) {
        Err(Error::Shape(msg)) => assert!(msg.contains("stored as"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

// ---------------------------------------------------------------- config

#[test]
fn canonical_form_is_a_fixed_point() {
    for name in PRESETS {
        let file = ConfigFile::from_model(preset(name).unwrap());
        let once = file.to_canonical_string().unwrap();
        let parsed = ConfigFile::parse(&once).unwrap();
        assert_eq!(parsed, file, "{name}");
        assert_eq!(parsed.to_canonical_string().unwrap(), once, "{name}");
    }
}

const MINIMAL: &str = r#"
[model]
mode = "dense"

[[model.branches]]
depth = 2
dim = 16
heads = 2
patch = 4
resolution = 16

[[model.branches]]
depth = 2
dim = 8
heads = 2
patch = 4
resolution = 32

[model.interactions]
count = 2
"#;

#[test]
fn defaults_are_spelled_out_by_canonicalization() {
    let file = ConfigFile::parse(MINIMAL).unwrap();
    assert_eq!(file.model.merge_subset, vec![true, true]);
    assert_eq!(file.train, TrainConfig::default());
    let canon = file.to_canonical_string().unwrap();
    for key in ["mlp_ratio = 4.0", "merge_subset = [true, true]", "sample_points = 4", "epochs = 30"] {
        assert!(canon.contains(key), "missing `{key}` in\n{canon}");
    }
    assert_eq!(ConfigFile::parse(&canon).unwrap().to_canonical_string().unwrap(), canon);
}

#[test]
fn unknown_keys_and_out_of_range_values_are_rejected() {
    let unknown = MINIMAL.replace("count = 2", "count = 2\nwarp_factor = 9");
    assert!(matches!(ConfigFile::parse(&unknown), Err(Error::Parse(m)) if m.contains("warp_factor")));
    let cases = [
        (format!("{MINIMAL}\n[train]\nlr = -1.0\n"), "train.lr"),
        (format!("{MINIMAL}\n[train]\nepochs = 0\n"), "train.epochs"),
        (format!("{MINIMAL}\n[train]\nbatch = 0\n"), "train.batch"),
        (MINIMAL.replace("count = 2", "count = 2\nsample_points = 0"), "sample_points"),
        (MINIMAL.replacen("heads = 2", "heads = 3", 1), "not divisible by heads"),
    ];
    for (text, needle) in cases {
        match ConfigFile::parse(&text) {
            Err(Error::Config(m)) => assert!(m.contains(needle), "{needle}: {m}"),
            other => panic!("{needle}: {other:?}"),
        }
    }
    let inverted = MINIMAL.replacen("resolution = 16", "resolution = 64", 1);
    assert!(matches!(ConfigFile::parse(&inverted), Err(Error::Config(m)) if m.contains("parameter-inverted")));
    let tagged = inverted.replace("mode = \"dense\"", "mode = \"dense\"\nablation = true");
    ConfigFile::parse(&tagged).unwrap();
}

#[test]
fn config_files_load_from_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.toml");
    std::fs::write(&path, MINIMAL).unwrap();
    assert_eq!(ConfigFile::load(&path).unwrap(), ConfigFile::parse(MINIMAL).unwrap());
    assert!(matches!(ConfigFile::load(dir.path().join("absent.toml")), Err(Error::Io(_))));
}

// ---------------------------------------------------------------- data

#[test]
fn toy_dataset_is_balanced_and_deterministic() {
    let a = toy_dataset(32, 5);
    assert_eq!((a.train.len(), a.test.len()), (TRAIN_SAMPLES, TEST_SAMPLES));
    for split in [&a.train, &a.test] {
        let mut counts = [0usize; CLASSES];
        split.labels.iter().for_each(|&l| counts[l] += 1);
        assert!(counts.iter().all(|&c| c == split.len() / CLASSES), "{counts:?}");
        assert!(split.images.iter().all(|x| x.shape() == [3, 32, 32] && x.is_finite()));
    }
    let b = toy_dataset(32, 5);
    assert_eq!(a.train.labels, b.train.labels);
    assert!(a.train.images.iter().zip(&b.train.images).all(|(x, y)| bits(x) == bits(y)));
    let c = toy_dataset(32, 6);
    assert_ne!(bits(&a.train.images[0]), bits(&c.train.images[0]));
    assert_ne!(bits(&a.train.images[0]), bits(&a.test.images[0]));
}

#[test]
fn flat_class_has_no_structure_and_stripes_do() {
    let d = generate(64, 32, 1);
    let spread = |x: &Tensor<f32>| {
        let v = &x.data()[..32 * 32];
        let mean = v.iter().sum::<f32>() / v.len() as f32;
        (v.iter().map(|a| (a - mean).powi(2)).sum::<f32>() / v.len() as f32).sqrt()
    };
    for (x, &l) in d.images.iter().zip(&d.labels) {
        match l {
            7 => assert!(spread(x) < 0.1, "flat sample spread {}", spread(x)),
            0..=4 => assert!(spread(x) > 0.12, "class {l} spread {}", spread(x)),
            _ => {}
        }
    }
}

#[test]
fn raw_images_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.raw");
    let x = synthetic_image::<f32>([3, 16, 24], 2);
    data::write_raw_image(&x, &path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(bytes.len(), 12 + 4 * 3 * 16 * 24);
    assert_eq!(&bytes[..12], &[3, 0, 0, 0, 16, 0, 0, 0, 24, 0, 0, 0]);
    let back = data::read_raw_image(&path).unwrap();
    assert_eq!(back.shape(), x.shape());
    assert_eq!(bits(&back), bits(&x));

    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(data::read_raw_image(&path), Err(Error::Input(_))));
    std::fs::write(&path, [1u8, 0, 0]).unwrap();
    assert!(matches!(data::read_raw_image(&path), Err(Error::Input(_))));
}

// ---------------------------------------------------------------- training

fn small_split(seed: u64) -> ToySplit {
    ToySplit { train: generate(48, 64, seed), test: generate(16, 64, seed + 1) }
}

fn short(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig { epochs, batch: 16, lr, clip_norm: 1.0, seed: 11 }
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.8, 0, 100), 0.8);
    assert!((cosine_lr(0.8, 50, 100) - 0.4).abs() < 1e-12);
    assert!(cosine_lr(0.8, 100, 100).abs() < 1e-12);
    let lrs: Vec<f64> = (0..=100).map(|s| cosine_lr(1.0, s, 100)).collect();
    assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn same_seeds_give_identical_metric_csvs() {
    let cfg = preset("piip-micro-cls").unwrap();
    let data = small_split(2);
    let run = || {
        let mut w = csv::Writer::from_writer(Vec::new());
        let (model, report) = train::train_new(&cfg, &data, &short(2, 0.5), Some(&mut w)).unwrap();
        (w.into_inner().unwrap(), checkpoint::to_bytes(&model).unwrap(), report)
    };
    let (csv_a, weights_a, report) = run();
    let (csv_b, weights_b, _) = run();
    assert_eq!(csv_a, csv_b);
    assert_eq!(weights_a, weights_b);

    let mut rd = csv::Reader::from_reader(csv_a.as_slice());
    let header: Vec<String> = rd.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, ["epoch", "step", "lr", "train_loss", "train_acc", "test_acc"]);
    let rows: Vec<EpochMetrics> = rd.deserialize().collect::<Result<_, _>>().unwrap();
    assert_eq!(rows, report.epochs);
    assert_eq!(rows.iter().map(|r| (r.epoch, r.step)).collect::<Vec<_>>(), [(1, 3), (2, 6)]);
}

#[test]
fn thread_count_does_not_change_training() {
    let cfg = preset("piip-micro-cls").unwrap();
    let data = small_split(3);
    let run = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (model, report) = train::train_new::<Vec<u8>>(&cfg, &data, &short(1, 0.5), None).unwrap();
            (checkpoint::to_bytes(&model).unwrap(), report.epochs)
        })
    };
    assert_eq!(run(1), run(3));
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let cfg = preset("piip-micro-cls").unwrap();
    let data = small_split(4);
    let init = checkpoint::to_bytes(&Model::<f32>::build(&cfg, 11).unwrap()).unwrap();
    let (model, report) = train::train_new::<Vec<u8>>(&cfg, &data, &short(1, 0.0), None).unwrap();
    assert_eq!(checkpoint::to_bytes(&model).unwrap(), init);
    assert!(report.last().unwrap().train_loss.is_finite());
}

#[test]
fn divergence_is_a_numeric_error_naming_the_step() {
    let cfg = preset("piip-micro-cls").unwrap();
    let opts = TrainConfig { epochs: 10, batch: 16, lr: 100.0, clip_norm: 0.0, seed: 0 };
    match train::train_new::<Vec<u8>>(&cfg, &small_split(5), &opts, None) {
        Err(e @ Error::Numeric(_)) => {
            assert_eq!(e.exit_code(), 2);
            assert!(e.to_string().contains("diverged at step "), "{e}");
        }
        other => panic!("expected divergence, got {:?}", other.map(|r| r.1.last().cloned())),
    }
}

#[test]
fn trainer_rejects_non_classification_models() {
    let mut model = Model::<f32>::build(&preset("piip-micro").unwrap(), 0).unwrap();
    let r = train::train_toy::<Vec<u8>>(&mut model, &small_split(6), &short(1, 0.1), None);
    assert!(matches!(r, Err(Error::Config(_))));
}

#[test]
fn logistic_baseline_is_deterministic_and_learns() {
    let data = toy_dataset(16, 7);
    let a = train::logistic_baseline(&data, 20, 0.05, 1);
    let b = train::logistic_baseline(&data, 20, 0.05, 1);
    assert_eq!((a.train_acc, a.test_acc), (b.train_acc, b.test_acc));
    assert!(a.train_acc > 0.5, "{a:?}");
}
