//! End-to-end behaviour of each subcommand through the built binary.

mod common;

use std::fs;

use cloudfcn::raster::{decode_mask, decode_raster, read_raster, BandId};
use cloudfcn::synthetic::random_scene;
use cloudfcn::unet::CheckpointFile;
use common::{Workspace, TINY};

const TRAIN_2: &str = "\n[train]\nepochs = 2\nbatch_size = 2\nlr = 1e-3\ncheckpoint_every = 1\n";

/// Two 64x64 scenes with clouds and snow, ground truth corrected.
fn corrected_workspace(seed: u64, extra: &str) -> Workspace {
    let ws = Workspace::new();
    ws.add_scene("a", &random_scene(64, 64, 2, 2, 1));
    ws.add_scene("b", &random_scene(64, 64, 2, 1, 2));
    ws.config(seed, &format!("{TINY}{extra}"));
    ws.run_ok("correct-gt", &[]);
    ws
}

fn trained_workspace(seed: u64, extra: &str) -> Workspace {
    let ws = corrected_workspace(seed, extra);
    ws.run_ok("prepare", &[]);
    ws.run_ok("train", &[]);
    ws
}

#[test]
fn correct_gt_writes_masks_stats_and_report() {
    let ws = corrected_workspace(1, "");
    for id in ["a", "b"] {
        let default = decode_mask(&ws.read(&format!("gt/{id}/default_gt.pgm"))).unwrap();
        let snow = decode_mask(&ws.read(&format!("gt/{id}/snow.pgm"))).unwrap();
        let corrected = decode_mask(&ws.read(&format!("gt/{id}/corrected_gt.pgm"))).unwrap();
        for i in 0..default.bits().len() {
            assert_eq!(corrected.bits()[i], default.bits()[i] && !snow.bits()[i]);
        }
        let stats = ws.read_text(&format!("gt/{id}/stats.txt"));
        assert!(stats.contains(&format!("corrected_cloud_pixels {}\n", corrected.count())), "{stats}");
    }
    let report = ws.read_text("gt/report.csv");
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().skip(1).all(|l| l.contains(",ok,")));
}

#[test]
fn correct_gt_with_empty_snow_mask_keeps_default() {
    let ws = Workspace::new();
    ws.add_scene("a", &random_scene(48, 48, 1, 1, 4));
    ws.config(1, "[correction]\nrule = \"fixed\"\nthreshold = 100.0\n");
    ws.run_ok("correct-gt", &[]);
    assert_eq!(decode_mask(&ws.read("gt/a/snow.pgm")).unwrap().count(), 0);
    assert_eq!(ws.read("gt/a/corrected_gt.pgm"), ws.read("gt/a/default_gt.pgm"));
}

#[test]
fn correct_gt_isolates_a_scene_missing_its_blue_band() {
    let ws = Workspace::new();
    ws.add_scene("bad", &random_scene(32, 32, 1, 1, 5));
    ws.add_scene("good", &random_scene(32, 32, 1, 1, 6));
    fs::remove_file(ws.scene_dir("bad").join("B2.csr")).unwrap();
    ws.config(1, "");
    let out = ws.run("correct-gt", &[]);
    assert_eq!(out.status.code(), Some(2));
    let report = ws.read_text("gt/report.csv");
    let bad = report.lines().find(|l| l.starts_with("bad,")).unwrap();
    assert!(bad.starts_with("bad,error,") && bad.contains("B2.csr"), "{bad}");
    assert!(report.lines().any(|l| l.starts_with("good,ok,")));
    assert!(ws.work().join("gt/good/corrected_gt.pgm").is_file());
    assert!(!ws.work().join("gt/bad").exists());
}

#[test]
fn invalid_config_exits_1_without_writing() {
    let ws = Workspace::new();
    ws.add_scene("a", &random_scene(32, 32, 1, 1, 7));
    for extra in ["[train]\nepochs = 0\n", "[predict]\nthreshold = 1.5\n", "[network]\ninput_size = 20\n"] {
        ws.config(1, extra);
        for cmd in ["correct-gt", "prepare", "train", "predict", "evaluate"] {
            let out = ws.run(cmd, &[]);
            assert_eq!(out.status.code(), Some(1), "{cmd} with {extra:?}");
        }
    }
    fs::write(ws.path().join("config.toml"), "seed = 1\n").unwrap();
    assert_eq!(ws.run("correct-gt", &[]).status.code(), Some(1));
    ws.config(1, "");
    assert_eq!(ws.run("correct-gt", &["--threshold", "-0.5"]).status.code(), Some(1));
    assert_eq!(ws.run("no-such-command", &[]).status.code(), Some(1));
    assert!(!ws.work().exists());
}

#[test]
fn prepare_768_scene_gives_four_patches() {
    let ws = Workspace::new();
    ws.add_scene("big", &random_scene(768, 768, 2, 1, 8));
    ws.config(1, "");
    ws.run_ok("correct-gt", &[]);
    ws.run_ok("prepare", &[]);
    let manifest = ws.read_text("patches/manifest.csv");
    assert_eq!(manifest.lines().count(), 5);
    let r = read_raster(ws.work().join("patches/big_r001_c001/B5.csr")).unwrap();
    assert_eq!((r.width(), r.height(), r.band()), (384, 384, BandId::B5));
}

#[test]
fn prepare_manifest_maps_back_to_scene_pixels() {
    let ws = Workspace::new();
    let dims = [("p", 64, 64), ("q", 70, 40), ("r", 31, 33)];
    for (i, &(id, w, h)) in dims.iter().enumerate() {
        ws.add_scene(id, &random_scene(w, h, 1, 1, 10 + i as u64));
    }
    ws.config(1, TINY);
    ws.run_ok("correct-gt", &[]);
    ws.run_ok("prepare", &[]);
    let manifest = ws.read_text("patches/manifest.csv");
    let expected: usize = dims.iter().map(|&(_, w, h)| (w as usize).div_ceil(32) * (h as usize).div_ceil(32)).sum();
    assert_eq!(manifest.lines().count() - 1, expected);
    for line in manifest.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let (scene, row, col, x0, y0): (&str, usize, usize, usize, usize) =
            (f[1], f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap(), f[5].parse().unwrap());
        assert_eq!((x0, y0), (col * 32, row * 32));
        let src = read_raster(ws.scene_dir(scene).join("B2.csr")).unwrap();
        let patch = read_raster(ws.work().join("patches").join(f[0]).join("B2.csr")).unwrap();
        let truth = decode_mask(&ws.read(&format!("gt/{scene}/corrected_gt.pgm"))).unwrap();
        let gt = decode_mask(&ws.read(&format!("patches/{}/gt.pgm", f[0]))).unwrap();
        for y in 0..32 {
            for x in 0..32 {
                if x0 + x < src.width() && y0 + y < src.height() {
                    assert_eq!(patch.get(x, y), src.get(x0 + x, y0 + y), "{line} at ({x}, {y})");
                    assert_eq!(gt.get(x, y), truth.get(x0 + x, y0 + y), "{line} at ({x}, {y})");
                }
            }
        }
    }
}

#[test]
fn train_requires_prepared_patches() {
    let ws = corrected_workspace(1, TRAIN_2);
    let out = ws.run("train", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("prepare"));
}

#[test]
fn train_writes_one_log_line_per_epoch() {
    let ws = trained_workspace(3, "\n[train]\nepochs = 3\nbatch_size = 4\n");
    let log = ws.read_text("model/loss.csv");
    assert_eq!(log.lines().count(), 3);
    assert!(log.lines().enumerate().all(|(i, l)| l.starts_with(&format!("{},", i + 1)) && l.ends_with(",0.000")));
    let ckpt = CheckpointFile::decode(&ws.read("model/checkpoint.csck")).unwrap();
    assert_eq!((ckpt.epoch, ckpt.seed, ckpt.losses.len()), (3, 3, 3));
}

#[test]
fn resumed_training_matches_uninterrupted_run() {
    let full = trained_workspace(5, "\n[train]\nepochs = 4\nbatch_size = 2\nlr = 1e-3\n");

    let part = trained_workspace(5, TRAIN_2);
    fs::copy(part.work().join("model/checkpoint.csck"), part.path().join("epoch2.csck")).unwrap();
    part.config(5, &format!("{TINY}\n[train]\nepochs = 4\nbatch_size = 2\nlr = 1e-3\nresume_from = \"epoch2.csck\"\n"));
    part.run_ok("train", &[]);

    assert_eq!(part.read("model/checkpoint.csck"), full.read("model/checkpoint.csck"));
    assert_eq!(part.read_text("model/loss.csv"), full.read_text("model/loss.csv"));

    part.config(6, &format!("{TINY}\n[train]\nepochs = 4\nresume_from = \"epoch2.csck\"\n"));
    assert_eq!(part.run("train", &[]).status.code(), Some(1));
    part.config(5, &format!("{TINY}\n[train]\nepochs = 4\nresume_from = \"missing.csck\"\n"));
    assert_eq!(part.run("train", &[]).status.code(), Some(1));
}

#[test]
fn predict_needs_a_checkpoint() {
    let ws = corrected_workspace(1, "");
    let out = ws.run("predict", &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!ws.work().join("pred").exists());
}

#[test]
fn predict_matches_scene_dims_and_is_repeatable() {
    let ws = trained_workspace(2, TRAIN_2);
    ws.add_scene("odd", &random_scene(45, 70, 1, 1, 9));
    ws.run_ok("predict", &[]);
    for (id, w, h) in [("a", 64, 64), ("b", 64, 64), ("odd", 45, 70)] {
        let prob = decode_raster(&ws.read(&format!("pred/{id}.prob.csr"))).unwrap();
        let mask = decode_mask(&ws.read(&format!("pred/{id}.mask.pgm"))).unwrap();
        assert_eq!((prob.width(), prob.height(), prob.band()), (w, h, BandId::Prob));
        assert_eq!((mask.width(), mask.height()), (w, h));
        for (&m, &p) in mask.bits().iter().zip(prob.samples()) {
            let p = f64::from(p) / 65535.0;
            assert!(!(p > 0.5 + 1e-4 && !m) && !(p < 0.5 - 1e-4 && m), "mask {m} for probability {p}");
        }
    }
    let first = (ws.read("pred/a.prob.csr"), ws.read("pred/odd.mask.pgm"));
    ws.run_ok("predict", &[]);
    assert_eq!(first, (ws.read("pred/a.prob.csr"), ws.read("pred/odd.mask.pgm")));

    ws.run_ok("predict", &["--threshold", "0"]);
    assert!(decode_mask(&ws.read("pred/odd.mask.pgm")).unwrap().bits().iter().all(|&b| b));
}

#[test]
fn evaluate_perfect_predictions_gives_all_ones() {
    let ws = trained_workspace(2, TRAIN_2);
    ws.run_ok("predict", &["--threshold", "0"]);
    let truth = ws.path().join("truth");
    fs::create_dir(&truth).unwrap();
    for id in ["a", "b"] {
        fs::copy(ws.work().join(format!("pred/{id}.mask.pgm")), truth.join(format!("{id}.pgm"))).unwrap();
    }
    ws.config(2, &format!("{TINY}{TRAIN_2}\n[evaluate]\ntruth_dir = \"truth\"\n"));
    ws.run_ok("evaluate", &[]);
    let report = ws.read_text("eval/report.csv");
    for id in ["a", "b", "aggregate:pooled"] {
        let row = report.lines().find(|l| l.starts_with(&format!("{id},"))).unwrap();
        assert!(row.ends_with(",1.000000,1.000000,1.000000,1.000000"), "{row}");
    }
    assert!(report.contains("aggregate:mean,,,,,1.000000,1.000000,1.000000,1.000000\n"));
}

#[test]
fn evaluate_reports_dim_mismatch_per_scene() {
    let ws = trained_workspace(2, TRAIN_2);
    ws.run_ok("predict", &[]);
    let truth = decode_mask(&ws.read("gt/a/corrected_gt.pgm")).unwrap();
    let small = cloudfcn::raster::MaskGrid::from_fn(10, 10, |x, y| truth.get(x, y));
    cloudfcn::raster::write_mask(&small, ws.work().join("gt/a/corrected_gt.pgm")).unwrap();
    let out = ws.run("evaluate", &[]);
    assert_eq!(out.status.code(), Some(2));
    let report = ws.read_text("eval/report.csv");
    assert!(report.lines().any(|l| l.starts_with("a,error,")), "{report}");
    assert!(report.lines().any(|l| l.starts_with("b,") && !l.contains("error")));
    assert!(report.contains("aggregate:pooled,"));
}

#[test]
fn seed_flag_changes_training() {
    let a = trained_workspace(2, TRAIN_2);
    let b = corrected_workspace(2, TRAIN_2);
    b.run_ok("prepare", &[]);
    b.run_ok("train", &["--seed", "3"]);
    let ckpt = CheckpointFile::decode(&b.read("model/checkpoint.csck")).unwrap();
    assert_eq!(ckpt.seed, 3);
    assert_ne!(a.read("model/checkpoint.csck"), b.read("model/checkpoint.csck"));
}

#[test]
fn whole_pipeline_is_byte_identical_across_runs() {
    let runs: Vec<Workspace> = (0..2)
        .map(|_| {
            let ws = trained_workspace(7, TRAIN_2);
            ws.run_ok("predict", &[]);
            ws.run_ok("evaluate", &[]);
            ws
        })
        .collect();
    for rel in [
        "gt/a/corrected_gt.pgm",
        "gt/report.csv",
        "patches/manifest.csv",
        "patches/b_r001_c000/B4.csr",
        "model/checkpoint.csck",
        "model/loss.csv",
        "pred/a.prob.csr",
        "pred/b.mask.pgm",
        "eval/report.csv",
    ] {
        assert_eq!(runs[0].read(rel), runs[1].read(rel), "{rel}");
    }
}
