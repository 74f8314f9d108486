//! Acceptance suite. Each test checks one criterion and prints a single
//! `criterion N PASS|FAIL` line; run with `--nocapture` to see them.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dlcal::config::{GridSpec, Layout, RgbFrameSpec, SensorConfig};
use dlcal::detect::{detect_patch, HoughParams};
use dlcal::histogram::{patch_response, peak_normalize, BinWindow, CubeKind, HistogramCube};
use dlcal::io::{self, DatasetManifest, Provenance};
use dlcal::pipeline::{calibrate, CalibrateParams, CalibrationInput};
use dlcal::response::{compare_modes, ResponseMap};
use dlcal::sim::{
    default_kernel_bank, render_background_frame, render_frame_at, render_transient, simulate, simulate_scan,
    KernelBank, NoiseKind, RenderedFrames, SceneSpec, SimConfig,
};
use dlcal::Error;

fn report(n: u32, name: &str, ok: bool, detail: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {n} {verdict}  {name}: {detail}");
    assert!(ok, "criterion {n} ({name}) failed: {detail}");
}

fn run_calibration(bank: &KernelBank, scene: &SceneSpec, cfg: &SimConfig) -> dlcal::pipeline::Calibration {
    let scan = simulate(bank, scene, cfg).unwrap();
    let frames = RenderedFrames { scene, cfg };
    let input = CalibrationInput {
        sensor: &cfg.sensor,
        grid: cfg.grid,
        frame: cfg.frame,
        patch: &scan.patch,
        background: &scan.background,
        frames: &frames,
        manifest_window: None,
    };
    calibrate(&input, &CalibrateParams::default()).unwrap()
}

/// Kernel mass under a disk by polar midpoint quadrature, independent of the
/// simulator's Cartesian coverage scheme.
fn polar_disk_mass(bank: &KernelBank, p: usize, center: (f64, f64), radius: f64) -> f64 {
    const NR: usize = 96;
    const NA: usize = 192;
    let dr = radius / NR as f64;
    let da = std::f64::consts::TAU / NA as f64;
    let mut sum = 0.0;
    for i in 0..NR {
        let r = (i as f64 + 0.5) * dr;
        for j in 0..NA {
            let a = (j as f64 + 0.5) * da;
            let (x, y) = (center.0 + r * a.cos(), center.1 + r * a.sin());
            sum += bank.kernels[p].iter().map(|g| g.eval(x, y)).sum::<f64>() * r;
        }
    }
    sum * dr * da
}

#[test]
fn criterion_1_noiseless_round_trip() {
    let mut scene = SceneSpec::default();
    scene.background.ambient_floor = 0.0;
    let cfg = SimConfig {
        noise: NoiseKind::None,
        ..SimConfig::default()
    };
    assert_eq!((cfg.grid.cols, cfg.grid.rows), (40, 24));
    let bank = default_kernel_bank(Layout::Wide3x3, cfg.frame).unwrap();
    assert_eq!(bank.pixel_count(), 9);

    let start = Instant::now();
    let cal = run_calibration(&bank, &scene, &cfg);
    let elapsed = start.elapsed().as_secs_f64();

    let grid = cfg.grid;
    let mut min_cos = f64::INFINITY;
    let mut max_dev: f64 = 0.0;
    for (p, map) in cal.maps.iter().enumerate() {
        let mut oracle = vec![0.0; grid.len()];
        for row in 0..grid.rows {
            for col in 0..grid.cols {
                let k = grid.snake_cell_to_index(row, col).unwrap();
                let c = cfg.patch_center(k).unwrap();
                oracle[grid.flat(row, col)] = polar_disk_mass(&bank, p, c, scene.patch.radius);
            }
        }
        let peak = oracle.iter().copied().fold(0.0, f64::max);
        oracle.iter_mut().for_each(|v| *v /= peak);
        assert!(map.valid().iter().all(|&v| v), "pixel {p} has invalid cells");
        let v = map.values();
        let dot: f64 = v.iter().zip(&oracle).map(|(a, b)| a * b).sum();
        let na: f64 = v.iter().map(|a| a * a).sum();
        let nb: f64 = oracle.iter().map(|b| b * b).sum();
        min_cos = min_cos.min(dot / (na * nb).sqrt());
        for (a, b) in v.iter().zip(&oracle) {
            max_dev = max_dev.max((a - b).abs());
        }
    }
    let ok = min_cos >= 0.999 && max_dev <= 1e-3 && elapsed <= 60.0;
    report(
        1,
        "noiseless round trip",
        ok,
        &format!("min cosine {min_cos:.6}, max |deviation| {max_dev:.2e}, simulate+calibrate {elapsed:.1} s"),
    );
}

#[test]
fn criterion_2_noisy_repeatability() {
    let scene = SceneSpec::default();
    let cfg_a = SimConfig { seed: 11, ..SimConfig::default() };
    let cfg_b = SimConfig { seed: 12, ..SimConfig::default() };
    let bank = default_kernel_bank(Layout::Wide3x3, cfg_a.frame).unwrap();
    let a = run_calibration(&bank, &scene, &cfg_a);
    let b = run_calibration(&bank, &scene, &cfg_b);
    let r = compare_modes(&a.maps, &b.maps, 0.05).unwrap();
    let (sx, sy) = cfg_a.grid_step_px();
    let limit = 3.0 * sx.max(sy);
    let ok = r.iou.mean >= 0.90 && r.cosine.mean >= 0.97 && r.centroid_displacement.mean <= limit;
    report(
        2,
        "noisy repeatability",
        ok,
        &format!(
            "IoU {:.3}±{:.3}, cosine {:.4}±{:.4}, displacement {:.2}±{:.2} px (limit {limit:.1} px); \
             reference capture 0.915±0.029 / 0.984±0.008 / 2.94±0.67 px",
            r.iou.mean,
            r.iou.std,
            r.cosine.mean,
            r.cosine.std,
            r.centroid_displacement.mean,
            r.centroid_displacement.std
        ),
    );
}

#[test]
fn criterion_3_detection_accuracy() {
    let params = HoughParams::default();
    let spec = RgbFrameSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0xD37E_C7);
    let frames = 600;
    let mut good = 0;
    let mut worst: f64 = 0.0;
    for i in 0..frames {
        let cfg = SimConfig { seed: 1000 + i, ..SimConfig::default() };
        let mut scene = SceneSpec::default();
        scene.patch.radius = rng.random_range(4.0..12.0);
        let margin = 20.0;
        let c = (
            rng.random_range(margin..spec.width as f64 - 1.0 - margin),
            rng.random_range(margin..spec.height as f64 - 1.0 - margin),
        );
        let frame = render_frame_at(&scene, c, &cfg);
        let det = detect_patch(&frame, &params, &spec, i as usize).unwrap();
        if let Some(d) = det.circle {
            let err = (d.x - c.0).hypot(d.y - c.1);
            worst = worst.max(err);
            if err <= 1.0 && (d.radius - scene.patch.radius).abs() <= 1.0 {
                good += 1;
            }
        }
    }
    let mut false_valid = 0;
    for seed in 0..100 {
        let cfg = SimConfig { seed, ..SimConfig::default() };
        let blank = render_background_frame(&cfg);
        if detect_patch(&blank, &params, &spec, 0).unwrap().is_valid() {
            false_valid += 1;
        }
    }
    let rate = good as f64 / frames as f64;
    report(
        3,
        "detection accuracy",
        rate >= 0.95 && false_valid == 0,
        &format!(
            "{good}/{frames} frames within 1 px ({:.1}%), worst valid centre error {worst:.2} px, \
             {false_valid}/100 blank frames detected",
            100.0 * rate
        ),
    );
}

fn cube(pixels: usize, bins: usize, rows: &[(usize, &[u32])], kind: CubeKind) -> HistogramCube {
    let mut c = HistogramCube::zeros(pixels, bins, 0, kind);
    for &(p, vals) in rows {
        c.pixel_mut(p)[..vals.len()].copy_from_slice(vals);
    }
    c
}

#[test]
fn criterion_4_windowed_response() {
    let t = 128;
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    };
    let h = cube(2, t, &[(1, &[0, 5, 9, 2])], CubeKind::PatchPresent);
    let bg = cube(2, t, &[(1, &[0, 1, 4, 7])], CubeKind::Background);
    let w = |lo, hi| BinWindow::new(lo, hi, t).unwrap();
    check("prefix", patch_response(&h, &bg, w(0, 3), 1).unwrap(), 5.0);
    check("sub-window", patch_response(&h, &bg, w(1, 2), 1).unwrap(), 5.0);
    check("clipped negative", patch_response(&h, &bg, w(3, 3), 1).unwrap(), 0.0);
    check("other pixel", patch_response(&h, &bg, w(0, 3), 0).unwrap(), 0.0);
    let same = cube(2, t, &[(1, &[0, 5, 9, 2])], CubeKind::Background);
    check("identical", patch_response(&h, &same, w(0, 127), 1).unwrap(), 0.0);
    let zero = cube(2, t, &[], CubeKind::PatchPresent);
    check("all-zero patch", patch_response(&zero, &bg, w(0, 127), 1).unwrap(), 0.0);
    let big = cube(1, t, &[(0, &[0, 65535])], CubeKind::PatchPresent);
    let none = cube(1, t, &[], CubeKind::Background);
    check("max count", patch_response(&big, &none, w(0, 127), 0).unwrap(), 65535.0);
    let exact = failures.is_empty();

    // Outside-window values never matter, and the result matches a direct
    // signed-integer evaluation.
    let strategy = (
        prop::collection::vec(0u32..70_000, t),
        prop::collection::vec(0u32..70_000, t),
        prop::collection::vec(0u32..70_000, t),
        prop::collection::vec(0u32..70_000, t),
        0usize..t,
        0usize..t,
    );
    let mut runner = TestRunner::new(PtConfig {
        cases: 2000,
        ..PtConfig::default()
    });
    let prop = runner.run(&strategy, |(hv, bv, noise_h, noise_b, a, b)| {
        let (lo, hi) = (a.min(b), a.max(b));
        let win = BinWindow::new(lo, hi, t).unwrap();
        let mk = |v: &[u32], kind| HistogramCube::new(1, t, v.to_vec(), 0, kind).unwrap();
        let r = patch_response(&mk(&hv, CubeKind::PatchPresent), &mk(&bv, CubeKind::Background), win, 0).unwrap();
        let oracle = (lo..=hi)
            .map(|i| (hv[i] as i64 - bv[i] as i64).max(0))
            .max()
            .unwrap() as f64;
        prop_assert_eq!(r, oracle);
        let (mut hv2, mut bv2) = (noise_h, noise_b);
        hv2[lo..=hi].copy_from_slice(&hv[lo..=hi]);
        bv2[lo..=hi].copy_from_slice(&bv[lo..=hi]);
        let r2 = patch_response(&mk(&hv2, CubeKind::PatchPresent), &mk(&bv2, CubeKind::Background), win, 0).unwrap();
        prop_assert_eq!(r, r2);
        Ok(())
    });
    let detail = match (&prop, exact) {
        (Ok(()), true) => "7 hand cases exact, 2000 random windows match oracle and ignore outside bins".to_string(),
        (Err(e), _) => format!("property failed: {e}"),
        (_, false) => failures.join("; "),
    };
    report(4, "windowed background-subtracted response", exact && prop.is_ok(), &detail);
}

fn random_map(rng: &mut ChaCha8Rng) -> ResponseMap {
    let grid = GridSpec::new(rng.random_range(1..12), rng.random_range(1..12));
    let n = grid.len();
    let mut valid: Vec<bool> = (0..n).map(|_| rng.random_bool(0.9)).collect();
    let mut values: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..1e4) })
        .collect();
    let i = rng.random_range(0..n);
    valid[i] = true;
    values[i] = rng.random_range(1.0..1e4);
    let anchors = (0..n)
        .map(|j| valid[j].then_some(((j % grid.cols) as f64, (j / grid.cols) as f64)))
        .collect();
    let values = values.iter().zip(&valid).map(|(&v, &ok)| if ok { v } else { 0.0 }).collect();
    ResponseMap::from_parts(0, grid, values, valid, anchors, false).unwrap()
}

#[test]
fn criterion_5_peak_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let cases = 2000;
    let mut worst_scale: f64 = 0.0;
    let mut idempotent = true;
    let mut peak_one = true;
    for _ in 0..cases {
        let m = random_map(&mut rng);
        let n1 = m.normalize().unwrap();
        idempotent &= n1.normalize().unwrap().values() == n1.values();
        peak_one &= n1.peak() == 1.0;
        let alpha = 10f64.powf(rng.random_range(-6.0..6.0));
        let ns = m.scaled(alpha).normalize().unwrap();
        for (a, b) in ns.values().iter().zip(n1.values()) {
            worst_scale = worst_scale.max((a - b).abs());
        }
        // the ordered-map form agrees with the grid form
        let dict: BTreeMap<usize, f64> = m.values().iter().copied().enumerate().collect();
        let nd = peak_normalize(&dict).unwrap();
        for (i, v) in nd {
            worst_scale = worst_scale.max((v - n1.values()[i]).abs());
        }
    }
    let mut zero_rejected = 0;
    for _ in 0..cases {
        let m = random_map(&mut rng).scaled(0.0);
        if matches!(m.normalize(), Err(Error::DegenerateMap { .. })) {
            zero_rejected += 1;
        }
        let dict: BTreeMap<usize, f64> = (0..m.values().len()).map(|i| (i, 0.0)).collect();
        if !matches!(peak_normalize(&dict), Err(Error::DegenerateMap { .. })) {
            zero_rejected = 0;
        }
    }
    let ok = idempotent && peak_one && worst_scale <= 1e-12 && zero_rejected == cases;
    report(
        5,
        "peak normalization",
        ok,
        &format!(
            "{cases} random maps: idempotent {idempotent}, unit peak {peak_one}, \
             worst scale deviation {worst_scale:.1e}, all-zero rejected {zero_rejected}/{cases}"
        ),
    );
}

fn tree_bytes(root: &std::path::Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_6_linearity_and_determinism() {
    let cfg = SimConfig::default();
    let bank = default_kernel_bank(Layout::Wide3x3, cfg.frame).unwrap();
    let with = |intensity: f64| {
        let mut s = SceneSpec::default();
        s.patch.intensity = intensity;
        s
    };
    let (s1, s2, s12, s0) = (with(23.0), with(41.5), with(64.5), with(0.0));
    let mut worst_rel: f64 = 0.0;
    for k in [0, 37, 480, 801, 959] {
        let r = |s: &SceneSpec| render_transient(&bank, s, k, &cfg, true).unwrap();
        let (a, b, ab, z) = (r(&s1), r(&s2), r(&s12), r(&s0));
        for p in 0..a.pixels {
            for t in 0..a.bins {
                let lhs = ab.pixel(p)[t];
                let rhs = a.pixel(p)[t] + b.pixel(p)[t] - z.pixel(p)[t];
                worst_rel = worst_rel.max((lhs - rhs).abs() / lhs.abs().max(1e-300));
            }
        }
    }

    let small = SimConfig {
        grid: GridSpec::new(8, 5),
        seed: 77,
        ..SimConfig::default()
    };
    let scene = SceneSpec::default();
    let dirs = tempfile::tempdir().unwrap();
    let (d1, d4) = (dirs.path().join("t1"), dirs.path().join("t4"));
    simulate_scan(&bank, &scene, &small, &d1, Some(1)).unwrap();
    simulate_scan(&bank, &scene, &small, &d4, Some(4)).unwrap();
    let (b1, b4) = (tree_bytes(&d1), tree_bytes(&d4));
    let identical = b1 == b4 && b1.len() == 4 * small.grid.len() + 3;

    // calibration of the same dataset under two pool sizes
    let ds = io::load_dataset(&d1).unwrap();
    let cal = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
            .install(|| calibrate(&CalibrationInput::from_dataset(&ds), &CalibrateParams::default()).unwrap())
    };
    let (c1, c3) = (cal(1), cal(3));
    let cal_identical = c1.maps.iter().zip(&c3.maps).all(|(a, b)| a.values() == b.values())
        && c1.summary == c3.summary;

    report(
        6,
        "forward-model linearity and determinism",
        worst_rel <= 1e-9 && identical && cal_identical,
        &format!(
            "worst relative additivity error {worst_rel:.1e}; {} dataset files bit-identical across 1/4 threads: {identical}; \
             calibration identical across 1/3 threads: {cal_identical}",
            b1.len()
        ),
    );
}

#[test]
fn criterion_7_snake_order_and_defaults() {
    let grid = GridSpec::default();
    let mut seen = vec![false; grid.len()];
    let mut round_trip = grid.len() == 3600;
    let mut adjacent = true;
    let mut prev: Option<(usize, usize)> = None;
    for k in 0..grid.len() {
        let (r, c) = grid.snake_index_to_cell(k).unwrap();
        round_trip &= grid.snake_cell_to_index(r, c).unwrap() == k;
        round_trip &= !std::mem::replace(&mut seen[grid.flat(r, c)], true);
        if let Some((pr, pc)) = prev {
            adjacent &= pr.abs_diff(r) + pc.abs_diff(c) == 1;
        }
        prev = Some((r, c));
    }
    round_trip &= seen.iter().all(|&s| s);
    round_trip &= grid.snake_index_to_cell(3600).is_err();

    let sensor: SensorConfig = serde_json::from_str(&serde_json::to_string(&SensorConfig::default()).unwrap()).unwrap();
    let frame: RgbFrameSpec = serde_json::from_str(&serde_json::to_string(&RgbFrameSpec::default()).unwrap()).unwrap();
    let sim: SimConfig = serde_json::from_str("{}").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    io::write_json(
        &path,
        &DatasetManifest::standard(SensorConfig::default(), grid, RgbFrameSpec::default(), Provenance::default()),
    )
    .unwrap();
    let m: DatasetManifest = io::read_json(&path).unwrap();
    let defaults = sensor.bin_count == 128
        && sensor.pixel_count == 9
        && (frame.width, frame.height) == (848, 480)
        && sim.sensor == sensor
        && sim.frame == frame
        && m.sensor == sensor
        && m.frame == frame
        && (m.grid.cols, m.grid.rows) == (80, 45);
    report(
        7,
        "snake order and defaults",
        round_trip && adjacent && defaults,
        &format!(
            "80x45 (K=3600) round trip {round_trip}, consecutive cells adjacent {adjacent}, \
             T=128 P=9 848x480 preserved through JSON {defaults}"
        ),
    );
}

#[test]
fn criterion_8_io_golden() {
    let (round_trip, detail_rt) = common::io_round_trips();
    let rejected = common::malformed_inputs();
    let distinct: std::collections::BTreeSet<&String> = rejected.iter().map(|(_, msg, _)| msg).collect();
    let all_ok = rejected.iter().all(|(_, _, ok)| *ok);
    let failures: Vec<&str> = rejected
        .iter()
        .filter(|(_, _, ok)| !ok)
        .map(|(name, _, _)| name.as_str())
        .collect();
    report(
        8,
        "I/O golden",
        round_trip && all_ok && distinct.len() == rejected.len(),
        &format!(
            "{detail_rt}; {} malformed classes rejected with {} distinct diagnostics{}",
            rejected.len(),
            distinct.len(),
            if failures.is_empty() {
                String::new()
            } else {
                format!(" (wrong error for: {})", failures.join(", "))
            }
        ),
    );
}

#[test]
fn criterion_9_saturation_stress() {
    let cfg = SimConfig {
        grid: GridSpec::new(12, 8),
        ..SimConfig::default()
    };
    let bank = default_kernel_bank(Layout::Wide3x3, cfg.frame).unwrap();
    let mut details = Vec::new();
    let mut ok = true;
    for (label, intensity, max_count) in [("bright patch", 5.0e6, 65_535), ("low ceiling", 60.0, 400)] {
        let mut scene = SceneSpec::default();
        scene.patch.intensity = intensity;
        let mut cfg = cfg.clone();
        cfg.sensor.max_count = max_count;
        let result = std::panic::catch_unwind(|| {
            let scan = simulate(&bank, &scene, &cfg).unwrap();
            let clamped = scan.patch.iter().all(|c| c.counts().iter().all(|&v| v <= max_count));
            let at_ceiling: usize = scan
                .patch
                .iter()
                .map(|c| c.saturated_bins(max_count))
                .sum();
            let frames = RenderedFrames { scene: &scene, cfg: &cfg };
            let input = CalibrationInput {
                sensor: &cfg.sensor,
                grid: cfg.grid,
                frame: cfg.frame,
                patch: &scan.patch,
                background: &scan.background,
                frames: &frames,
                manifest_window: None,
            };
            let cal = calibrate(&input, &CalibrateParams::default()).unwrap();
            let warned = cal.summary.saturated_window_bins > 0
                && cal.summary.warnings.iter().any(|w| w.contains("saturated"));
            (clamped, at_ceiling, warned)
        });
        match result {
            Ok((clamped, at_ceiling, warned)) => {
                ok &= clamped && at_ceiling > 0 && warned;
                details.push(format!(
                    "{label}: clamped {clamped}, {at_ceiling} bins at ceiling, warning {warned}"
                ));
            }
            Err(_) => {
                ok = false;
                details.push(format!("{label}: panicked"));
            }
        }
    }
    report(9, "saturation stress", ok, &details.join("; "));
}
