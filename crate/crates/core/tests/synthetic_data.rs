mod common;

use vistafuse::dataset::{rectify_image, window_sweep, Dataset, CHANNELS};
use vistafuse::synthgen::{generate, ClassTable, GenerateConfig, GRANULARITIES, PIXEL_PITCH_UM};

fn one_per_class(seed: u64) -> Dataset {
    generate(&GenerateConfig {
        specimens_per_class: 2,
        sweeps_per_specimen: 1,
        images_per_specimen: 1,
        seed,
        ..GenerateConfig::default()
    })
    .unwrap()
}

#[test]
fn spectral_oracle_reads_coarse_classes_and_misses_fine_ones() {
    let data = one_per_class(3);
    let table = ClassTable::default();
    let nyquist = 2.0 * PIXEL_PITCH_UM[0];
    let (mut coarse, mut coarse_n, mut fine) = (0, 0, 0);
    for (i, r) in data.manifest.records.iter().enumerate() {
        let hit = common::oracle_class(&data.images[i][0], &table) == r.class_id;
        if table.periods_um[r.class_id % GRANULARITIES] >= nyquist {
            coarse_n += 1;
            coarse += hit as usize;
        } else {
            fine += hit as usize;
        }
    }
    assert!(coarse as f64 / coarse_n as f64 > 0.9, "{coarse}/{coarse_n}");
    assert!(fine <= 2, "{fine} fine images classified correctly");
}

#[test]
fn fine_grooves_alias_to_a_longer_period() {
    let data = one_per_class(4);
    let table = ClassTable::default();
    // V classes: grooves vary along columns
    for g in GRANULARITIES - 2..GRANULARITIES {
        let i = data.manifest.records.iter().position(|r| r.class_id == GRANULARITIES + g).unwrap();
        let (fr, fc) = common::spectral_peak(&data.images[i][0]);
        let seen = 1.0 / fr.hypot(fc);
        assert!(seen > 2.0 * table.periods_um[g], "period {} seen as {seen}", table.periods_um[g]);
    }
}

#[test]
fn tactile_windows_match_the_model_input() {
    let data = one_per_class(5);
    for sweeps in &data.sweeps {
        let windows = window_sweep(&sweeps[0], 50, 50).unwrap();
        assert_eq!(windows.len(), 10);
        assert!(windows.iter().all(|w| w.rows.len() == 50 && w.rows[0].len() == CHANNELS));
        assert!(sweeps[0].samples.iter().flatten().all(|v| v.is_finite()));
    }
}

#[test]
fn generation_is_reproducible_and_seed_dependent() {
    let cfg = GenerateConfig {
        classes: vec![2, 13],
        specimens_per_class: 1,
        sweeps_per_specimen: 1,
        images_per_specimen: 1,
        seed: 9,
        ..GenerateConfig::default()
    };
    assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    let other = generate(&GenerateConfig { seed: 10, ..cfg.clone() }).unwrap();
    assert_ne!(generate(&cfg).unwrap().images, other.images);
}

#[test]
fn perspective_checkerboard_is_rectified() {
    let cells = (10, 5);
    let out = (610, 278);
    for quad in [
        [(70.0, 50.0), (400.0, 95.0), (455.0, 760.0), (35.0, 725.0)],
        [(20.0, 20.0), (300.0, 10.0), (330.0, 640.0), (40.0, 600.0)],
    ] {
        let photo = common::warped_checkerboard((800, 500), quad, cells);
        let flat = rectify_image(&photo, quad, out.0, out.1).unwrap();
        let found = common::detect_grid(&flat, cells);
        let rms = common::rms_distance(&found, &common::ideal_grid(out, cells));
        assert!(rms <= 1.0, "rms {rms}");
    }
}
