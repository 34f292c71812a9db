use proptest::prelude::*;
use vistafuse::autodiff::{ParamStore, Tape, Tensor};
use vistafuse::dataset::{
    load_manifest, parse_ppm, parse_sweep_csv, save_manifest, split_train_test, window_sweep, write_ppm,
    write_sweep_csv, DatasetManifest, ManifestRecord, Role, TactileSweep, TextureImage, CHANNELS, NUM_CLASSES,
};
use vistafuse::fusion::{fuse_attention, AttentionBlock, AttentionConfig};
use vistafuse::nn::{checkpoint, lr_schedule};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        any::<f64>().prop_filter("finite", |v| v.is_finite()),
        -1e3..1e3f64,
        Just(0.0),
        Just(-0.0),
    ]
}

fn sweeps() -> impl Strategy<Value = TactileSweep> {
    prop::collection::vec((finite(), prop::array::uniform6(finite())), 0..40).prop_map(|rows| TactileSweep {
        times: rows.iter().map(|r| r.0).collect(),
        samples: rows.iter().map(|r| r.1).collect(),
    })
}

fn bits(v: impl IntoIterator<Item = f64>) -> Vec<u64> {
    v.into_iter().map(f64::to_bits).collect()
}

proptest! {
    #[test]
    fn sweep_csv_round_trips(sweep in sweeps()) {
        let back = parse_sweep_csv(&write_sweep_csv(&sweep), "mem").unwrap();
        prop_assert_eq!(bits(back.times.iter().copied()), bits(sweep.times.iter().copied()));
        prop_assert_eq!(
            bits(back.samples.iter().flatten().copied()),
            bits(sweep.samples.iter().flatten().copied())
        );
    }

    #[test]
    fn ppm_round_trips(
        (h, w, pixels) in (1usize..20, 1usize..20).prop_flat_map(|(h, w)| {
            (Just(h), Just(w), prop::collection::vec(any::<u8>(), h * w * 3))
        }),
        pitch in prop::option::of((0.0..1e4f64, 0.0..1e4f64)),
    ) {
        let mut img = TextureImage::new(h, w, pixels).unwrap();
        img.pixel_pitch = pitch.map(|(a, b)| [a, b]);
        prop_assert_eq!(parse_ppm(&write_ppm(&img), "mem").unwrap(), img);
    }

    #[test]
    fn checkpoints_round_trip(
        tensors in prop::collection::vec(
            prop::collection::vec(1usize..4, 0..3)
                .prop_flat_map(|shape| {
                    let n = shape.iter().product::<usize>();
                    (Just(shape), prop::collection::vec(finite(), n))
                }),
            1..5,
        )
    ) {
        let mut store = ParamStore::new();
        for (k, (shape, data)) in tensors.into_iter().enumerate() {
            store.add(format!("layer{k}.w"), Tensor::new(&shape, data).unwrap()).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        checkpoint::save(&store, &path).unwrap();
        let entries = checkpoint::load(&path).unwrap();
        prop_assert_eq!(entries.len(), store.len());
        for ((name, t), (n2, t2)) in entries.iter().zip(store.iter()) {
            prop_assert_eq!(name.as_str(), n2);
            prop_assert_eq!(t.shape(), t2.shape());
            prop_assert_eq!(bits(t.data().iter().copied()), bits(t2.data().iter().copied()));
        }
        let mut restored = store.clone();
        restored.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        checkpoint::restore(&mut restored, entries).unwrap();
        prop_assert_eq!(restored, store);
    }

    #[test]
    fn manifests_round_trip(
        records in prop::collection::vec(
            (0..NUM_CLASSES, "[a-z0-9 _\\-é\"]{0,12}", any::<u64>(), 0usize..3),
            0..12,
        )
    ) {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<ManifestRecord> = records
            .into_iter()
            .enumerate()
            .map(|(i, (class_id, spec, seed, files))| {
                let images: Vec<String> = (0..files).map(|k| format!("img/{i}-{k}.ppm")).collect();
                for f in &images {
                    let p = dir.path().join(f);
                    std::fs::create_dir_all(p.parent().unwrap()).unwrap();
                    std::fs::write(p, b"").unwrap();
                }
                ManifestRecord {
                    item_id: format!("item{i}"),
                    class_id,
                    class_name: format!("C{class_id}"),
                    specimen_id: spec,
                    images,
                    sweeps: vec![],
                    seed,
                }
            })
            .collect();
        let m = DatasetManifest { records };
        save_manifest(&m, dir.path()).unwrap();
        prop_assert_eq!(load_manifest(dir.path()).unwrap(), m);
    }

    #[test]
    fn windows_tile_the_sweep(t in 1usize..300, w in 1usize..60, stride in 1usize..60) {
        let sweep = TactileSweep {
            times: (0..t).map(|k| k as f64).collect(),
            samples: (0..t).map(|k| [k as f64; CHANNELS]).collect(),
        };
        match window_sweep(&sweep, w, stride) {
            Ok(windows) => {
                prop_assert!(t >= w && stride <= t);
                prop_assert_eq!(windows.len(), (t - w) / stride + 1);
                for (k, win) in windows.iter().enumerate() {
                    prop_assert_eq!(win.start, k * stride);
                    prop_assert_eq!(win.rows.len(), w);
                    prop_assert_eq!(win.rows[0][0], (k * stride) as f64);
                }
            }
            Err(_) => prop_assert!(t < w || stride > t),
        }
    }

    #[test]
    fn split_is_stratified(counts in prop::collection::vec(2usize..15, 1..NUM_CLASSES), ratio in 0.1..0.9f64, seed: u64) {
        let mut records = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for k in 0..n {
                records.push(ManifestRecord {
                    item_id: format!("{c}-{k}"),
                    class_id: c,
                    class_name: format!("C{c}"),
                    specimen_id: format!("{c}-{k}"),
                    images: vec![],
                    sweeps: vec![],
                    seed: 0,
                });
            }
        }
        let m = DatasetManifest { records };
        let split = split_train_test(&m, ratio, seed).unwrap();
        prop_assert_eq!(split.roles.len(), m.records.len());
        for (c, &n) in counts.iter().enumerate() {
            let train = split
                .indices(&m, Role::Train)
                .iter()
                .filter(|&&i| m.records[i].class_id == c)
                .count();
            prop_assert!((train as f64 - ratio * n as f64).abs() <= 1.0);
            prop_assert!(train >= 1 && train < n);
        }
        prop_assert_eq!(split_train_test(&m, ratio, seed).unwrap(), split);
    }

    #[test]
    fn attention_weights_are_convex(
        d in 1usize..6,
        scale in 0.0..4.0f64,
        init in any::<u64>(),
        xs in prop::collection::vec(-10.0..10.0f64, 20),
    ) {
        let mut store = ParamStore::new();
        let cfg = AttentionConfig { query_init_scale: scale, ..AttentionConfig::default() };
        let blk = AttentionBlock::new(&mut store, "a", d, &cfg, init).unwrap();
        let mut t = Tape::new();
        let xa = t.constant(Tensor::new(&[1, d], xs[..d].to_vec()).unwrap());
        let xb = t.constant(Tensor::new(&[1, d], xs[10..10 + d].to_vec()).unwrap());
        let r = fuse_attention(&mut t, &store, &blk, xa, xb).unwrap();
        let w = t.value(r.weights.unwrap()).to_vec();
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((w[0] + w[1] - 1.0).abs() <= 1e-9);
        for (k, &f) in t.value(r.fused).iter().enumerate() {
            let (a, b) = (xs[k], xs[10 + k]);
            prop_assert!(f >= a.min(b) - 1e-9 && f <= a.max(b) + 1e-9);
        }
    }

    #[test]
    fn learning_rate_steps_down(epoch in 0usize..400, period in 1usize..50) {
        let lr = lr_schedule(epoch, 1e-3, 0.1, period);
        prop_assert!(lr <= 1e-3);
        prop_assert!(lr_schedule(epoch + 1, 1e-3, 0.1, period) <= lr);
        let expect = 1e-3 * 0.1f64.powi((epoch / period) as i32);
        prop_assert!((lr - expect).abs() <= 1e-15 * expect.max(1e-300));
    }
}
