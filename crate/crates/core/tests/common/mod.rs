//! Shared fixtures: a small simulated dataset and the malformed-input table.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use dlcal::config::{GridSpec, Layout, SensorConfig};
use dlcal::detect::{DetectedCircle, PatchDetection};
use dlcal::histogram::{CubeKind, HistogramCube};
use dlcal::io::{self, GroundTruth};
use dlcal::response::{ResponseMap, SupportMask};
use dlcal::sim::{default_kernel_bank, simulate_scan, SceneSpec, SimConfig};
use dlcal::Error;

pub const FIXTURE_GRID: GridSpec = GridSpec::new(3, 2);

/// A 3x2 Poisson dataset, simulated once per test binary.
pub fn fixture() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SimConfig {
            grid: FIXTURE_GRID,
            seed: 5,
            ..SimConfig::default()
        };
        let bank = default_kernel_bank(Layout::Wide3x3, cfg.frame).unwrap();
        simulate_scan(&bank, &SceneSpec::default(), &cfg, dir.path(), None).unwrap();
        dir
    })
    .path()
}

pub fn copy_dir(src: &Path, dst: &Path) {
    fs::create_dir_all(dst).unwrap();
    for e in fs::read_dir(src).unwrap() {
        let path = e.unwrap().path();
        let target = dst.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &target);
        } else {
            fs::copy(&path, &target).unwrap();
        }
    }
}

/// Copy of the fixture, for tests that modify it.
pub fn fixture_copy() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("ds");
    copy_dir(fixture(), &root);
    (tmp, root)
}

pub fn edit_manifest(root: &Path, f: impl FnOnce(&mut Value)) {
    let path = root.join("manifest.json");
    let mut v: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    f(&mut v);
    fs::write(&path, serde_json::to_string_pretty(&v).unwrap()).unwrap();
}

/// Rewrites one field (`row`, `bin`) of a histogram CSV.
pub fn edit_histogram(path: &Path, row: usize, bin: usize, value: &str) {
    let text = fs::read_to_string(path).unwrap();
    let lines: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, line)| {
            if i != row {
                return line.to_string();
            }
            let mut fields: Vec<&str> = line.split(',').collect();
            fields[bin] = value;
            fields.join(",")
        })
        .collect();
    fs::write(path, lines.join("\n") + "\n").unwrap();
}

type Mutation = fn(&Path);
type Expect = fn(&Error) -> bool;

/// Every malformed-input class with the error it must produce.
pub fn malformed_cases() -> Vec<(&'static str, Mutation, Expect)> {
    vec![
        (
            "missing manifest",
            |r| fs::remove_file(r.join("manifest.json")).unwrap(),
            |e| matches!(e, Error::MissingFile { path } if path.ends_with("manifest.json")),
        ),
        (
            "manifest syntax",
            |r| fs::write(r.join("manifest.json"), "{ \"format_version\": 1,").unwrap(),
            |e| matches!(e, Error::Parse { .. }),
        ),
        (
            "format version",
            |r| edit_manifest(r, |v| v["format_version"] = 7.into()),
            |e| matches!(e, Error::Config(m) if m.contains("format_version")),
        ),
        (
            "window outside bins",
            |r| edit_manifest(r, |v| v["window"] = serde_json::json!({"lo": 120, "hi": 130})),
            |e| matches!(e, Error::Config(m) if m.contains("window")),
        ),
        (
            "scan index out of range",
            |r| edit_manifest(r, |v| v["scans"][2]["index"] = 99.into()),
            |e| matches!(e, Error::Range { index: 99, limit: 6, .. }),
        ),
        (
            "duplicate scan index",
            |r| edit_manifest(r, |v| v["scans"][2]["index"] = 1.into()),
            |e| matches!(e, Error::DuplicateIndex { index: 1, .. }),
        ),
        (
            "missing scan index",
            |r| {
                edit_manifest(r, |v| {
                    v["background"].as_array_mut().unwrap().remove(4);
                })
            },
            |e| matches!(e, Error::IncompleteDataset { what, missing } if what == "background" && missing == &[4]),
        ),
        (
            "missing histogram file",
            |r| fs::remove_file(r.join("hist/scan_00003.csv")).unwrap(),
            |e| matches!(e, Error::MissingFile { path } if path.ends_with("hist/scan_00003.csv")),
        ),
        (
            "missing frame file",
            |r| fs::remove_file(r.join("bg_frames/scan_00002.png")).unwrap(),
            |e| matches!(e, Error::MissingFile { path } if path.ends_with("bg_frames/scan_00002.png")),
        ),
        (
            "missing ground truth",
            |r| fs::remove_file(r.join("ground_truth.csv")).unwrap(),
            |e| matches!(e, Error::MissingFile { path } if path.ends_with("ground_truth.csv")),
        ),
        (
            "histogram row count",
            |r| {
                let p = r.join("hist/scan_00001.csv");
                let text = fs::read_to_string(&p).unwrap();
                let kept: Vec<&str> = text.lines().take(8).collect();
                fs::write(&p, kept.join("\n") + "\n").unwrap();
            },
            |e| matches!(e, Error::Shape { msg, .. } if msg.contains("8 histogram rows")),
        ),
        (
            "histogram bin count",
            |r| {
                let p = r.join("hist/scan_00001.csv");
                let text = fs::read_to_string(&p).unwrap();
                let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
                lines[3].push_str(",0");
                fs::write(&p, lines.join("\n") + "\n").unwrap();
            },
            |e| matches!(e, Error::Shape { msg, .. } if msg.contains("row 3 has 129 bins")),
        ),
        (
            "non-integer count",
            |r| edit_histogram(&r.join("bg_hist/scan_00000.csv"), 2, 10, "1.5"),
            |e| matches!(e, Error::Parse { msg, .. } if msg.contains("row 2 bin 10")),
        ),
        (
            "negative count",
            |r| edit_histogram(&r.join("hist/scan_00005.csv"), 4, 7, "-3"),
            |e| matches!(e, Error::NegativeCount { index: 5, row: 4, bin: 7, value: -3, .. }),
        ),
        (
            "count above max_count",
            |r| edit_histogram(&r.join("hist/scan_00000.csv"), 0, 40, "70000"),
            |e| matches!(e, Error::CountOverflow { index: 0, row: 0, bin: 40, value: 70000, max: 65535, .. }),
        ),
        (
            "frame size",
            |r| {
                let img = image::RgbImage::new(10, 10);
                io::write_png(&r.join("frames/scan_00004.png"), &img).unwrap();
            },
            |e| matches!(e, Error::Shape { msg, .. } if msg.contains("10x10")),
        ),
        (
            "corrupt frame",
            |r| fs::write(r.join("frames/scan_00001.png"), b"not a png").unwrap(),
            |e| matches!(e, Error::Image { .. }),
        ),
    ]
}

/// Applies each malformed case to a fresh copy of the fixture; returns
/// `(case, diagnostic, rejected with the expected error)`.
pub fn malformed_inputs() -> Vec<(String, String, bool)> {
    malformed_cases()
        .into_iter()
        .map(|(name, mutate, expect)| {
            let (_tmp, root) = fixture_copy();
            mutate(&root);
            match io::load_dataset(&root) {
                Ok(_) => (name.to_string(), "accepted".to_string(), false),
                Err(e) => (name.to_string(), e.to_string(), expect(&e)),
            }
        })
        .collect()
}

fn random_real(rng: &mut ChaCha8Rng) -> f64 {
    rng.random_range(0.0..1.0) * 10f64.powi(rng.random_range(-8..6))
}

/// Random normalized maps with matching detections and support masks.
pub fn random_maps(rng: &mut ChaCha8Rng, grid: GridSpec, pixels: usize) -> (Vec<ResponseMap>, Vec<SupportMask>, Vec<PatchDetection>) {
    let detections: Vec<PatchDetection> = (0..grid.len())
        .map(|k| PatchDetection {
            scan_index: k,
            circle: rng.random_bool(0.9).then(|| DetectedCircle {
                x: random_real(rng) + 20.0,
                y: random_real(rng) + 20.0,
                radius: rng.random_range(3.0..15.0),
                votes: rng.random_range(8..200),
            }),
        })
        .collect();
    let mut anchors = vec![None; grid.len()];
    for d in &detections {
        let (r, c) = grid.snake_index_to_cell(d.scan_index).unwrap();
        anchors[grid.flat(r, c)] = d.center();
    }
    let valid: Vec<bool> = anchors.iter().map(Option::is_some).collect();
    let mut maps = Vec::new();
    let mut masks = Vec::new();
    for p in 0..pixels {
        let values: Vec<f64> = valid.iter().map(|&ok| if ok { random_real(rng) + 1e-3 } else { 0.0 }).collect();
        let m = ResponseMap::from_parts(p, grid, values, valid.clone(), anchors.clone(), false)
            .unwrap()
            .normalize()
            .unwrap();
        masks.push(SupportMask::new(p, grid, (0..grid.len()).map(|_| rng.random_bool(0.3)).collect()).unwrap());
        maps.push(m);
    }
    (maps, masks, detections)
}

/// Save/load round trips of every file kind; returns `(ok, detail)`.
pub fn io_round_trips() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let dir = tempfile::tempdir().unwrap();
    let sensor = SensorConfig::default();

    let mut hist_ok = true;
    for k in 0..20 {
        let counts = (0..sensor.pixel_count * sensor.bin_count)
            .map(|_| rng.random_range(0..=sensor.max_count))
            .collect();
        let cube = HistogramCube::new(sensor.pixel_count, sensor.bin_count, counts, k, CubeKind::Background).unwrap();
        let path = dir.path().join(format!("h{k}.csv"));
        io::write_histogram(&path, &cube).unwrap();
        hist_ok &= io::read_histogram(&path, &sensor, k, CubeKind::Background).unwrap() == cube;
    }

    let grid = GridSpec::new(7, 5);
    let (maps, masks, detections) = random_maps(&mut rng, grid, 9);
    let mdir = dir.path().join("maps");
    io::save_response_maps(&mdir, &maps, &masks, &detections, 0.05, None).unwrap();
    let loaded = io::load_response_maps(&mdir).unwrap();
    let mut worst: f64 = 0.0;
    for (a, b) in maps.iter().zip(&loaded.maps) {
        for (x, y) in a.values().iter().zip(b.values()) {
            worst = worst.max((x - y).abs());
        }
        for (x, y) in a.anchors().iter().zip(b.anchors()) {
            match (x, y) {
                (Some(x), Some(y)) => worst = worst.max((x.0 - y.0).abs()).max((x.1 - y.1).abs()),
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
        hist_ok &= a.valid() == b.valid();
    }
    let masks_ok = masks.iter().zip(&loaded.masks).all(|(a, b)| a == b) && loaded.detections.len() == detections.len();

    let gt = GroundTruth {
        grid,
        positions: (0..grid.len()).map(|_| (random_real(&mut rng), random_real(&mut rng))).collect(),
        kernel_value: (0..3).map(|_| (0..grid.len()).map(|_| random_real(&mut rng)).collect()).collect(),
        disk_mass: (0..3).map(|_| (0..grid.len()).map(|_| random_real(&mut rng)).collect()).collect(),
    };
    let gpath = dir.path().join("gt.csv");
    io::write_ground_truth(&gpath, &gt).unwrap();
    let back = io::read_ground_truth(&gpath, grid, 3).unwrap();
    for (a, b) in gt
        .kernel_value
        .iter()
        .flatten()
        .chain(gt.disk_mass.iter().flatten())
        .zip(back.kernel_value.iter().flatten().chain(back.disk_mass.iter().flatten()))
    {
        worst = worst.max((a - b).abs());
    }

    let ok = hist_ok && masks_ok && worst <= 1e-9;
    (
        ok,
        format!("integers exact {hist_ok}, masks/detections exact {masks_ok}, worst real error {worst:.1e}"),
    )
}
