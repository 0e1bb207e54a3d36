//! End-to-end checks of the command-line binary: reproducibility, exit
//! codes, and the file formats the subcommands leave behind.

use mrsi_scrub::volume::read_volume;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mrsi-scrub"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("the binary runs")
}

fn run_ok(args: &[&str]) -> Output {
    let o = run(args);
    assert!(
        o.status.success(),
        "`{}` failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("read {}: {e}", p.display()))
}

fn stem(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Manifest lines that are data, not comments.
fn manifest_rows(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("manifest.txt"))
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn phantom_runs_are_reproducible_and_tiny_grids_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mrsx");
    let b = dir.path().join("b.mrsx");
    let args = ["phantom", "--seed", "5", "--nx", "16", "--ny", "16", "--n-points", "64"];
    run_ok(&[&args[..], &["--out", stem(&a)]].concat());
    run_ok(&[&args[..], &["--out", stem(&b)]].concat());
    assert_eq!(bytes(&a), bytes(&b), "same (config, seed) must give identical files");
    let at = dir.path().join("a-truth.mrsx");
    let bt = dir.path().join("b-truth.mrsx");
    assert_eq!(bytes(&at), bytes(&bt));
    assert_ne!(bytes(&a), bytes(&at), "the contaminated volume differs from its clean twin");

    let o = run(&["phantom", "--nx", "8", "--ny", "8", "--out", stem(&dir.path().join("c.mrsx"))]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("16x16"));
}

#[test]
fn remove_none_is_the_identity_and_l2_without_masks_fails_clearly() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.mrsx");
    run_ok(&["phantom", "--seed", "1", "--nx", "16", "--ny", "16", "--n-points", "64", "--out", stem(&p)]);

    let q = dir.path().join("q.mrsx");
    run_ok(&["remove", "--method", "none", "--input", stem(&p), "--out", stem(&q)]);
    assert_eq!(bytes(&p), bytes(&q), "method none must pass the volume through untouched");

    // the phantom carries masks, so l2 can build its own operator
    let r = dir.path().join("r.mrsx");
    run_ok(&["remove", "--method", "l2", "--input", stem(&p), "--out", stem(&r)]);
    assert_ne!(bytes(&p), bytes(&r));

    // a simulate sample file has no masks: l2 has nothing to calibrate on
    let sdir = dir.path().join("samples");
    run_ok(&["simulate", "--seed", "1", "--n", "1", "--n-points", "64", "--out", stem(&sdir)]);
    let sample = sdir.join("sample_00000.mrsx");
    let o = run(&["remove", "--method", "l2", "--input", stem(&sample), "--out", stem(&q)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("scalp mask"));
}

#[test]
fn exit_codes_separate_usage_data_and_config_problems() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.mrsx");

    // unknown flag: usage
    let o = run(&["remove", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));

    // missing input file: data
    let o = run(&["remove", "--method", "none", "--input", stem(&dir.path().join("gone.mrsx")), "--out", stem(&out)]);
    assert_eq!(o.status.code(), Some(2));

    // unknown key in the config file: config
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[remove]\nbogus = 1\n").unwrap();
    let o = run(&["remove", "--config", stem(&cfg), "--input", stem(&out), "--out", stem(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown key"));

    // a garbled volume: data
    let junk = dir.path().join("junk.mrsx");
    std::fs::write(&junk, b"not a volume at all").unwrap();
    let o = run(&["remove", "--method", "none", "--input", stem(&junk), "--out", stem(&out)]);
    assert_eq!(o.status.code(), Some(2));

    // a bad thread count from the environment: config
    let o = bin()
        .args(["remove", "--method", "none", "--input", stem(&junk), "--out", stem(&out)])
        .env("MRSI_SCRUB_THREADS", "lots")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn simulate_manifest_matches_the_samples_and_lipnet_targets_hold_no_water() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let args = ["simulate", "--seed", "3", "--n", "6", "--mode", "lipnet", "--n-points", "64"];
    run_ok(&[&args[..], &["--out", stem(&a)]].concat());
    run_ok(&[&args[..], &["--out", stem(&b)]].concat());

    let rows = manifest_rows(&a);
    assert_eq!(rows.len(), 6, "one manifest line per sample");
    for row in &rows {
        assert_eq!(row.split_whitespace().count(), 5, "file seed mode lipid water: {row}");
        assert_eq!(row.split_whitespace().nth(2), Some("lipnet"));
    }
    assert_eq!(bytes(&a.join("manifest.txt")), bytes(&b.join("manifest.txt")));
    assert_eq!(bytes(&a.join("sample_00003.mrsx")), bytes(&b.join("sample_00003.mrsx")));

    // the same seed with mode walinet adds a water draw on top of the same
    // metabolite and lipid draws, so subtracting the two targets isolates
    // exactly the water component: it must peak in the water band, and the
    // lipnet target itself must peak in the lipid band
    let w = dir.path().join("w");
    run_ok(&["simulate", "--seed", "3", "--n", "6", "--mode", "walinet", "--n-points", "64", "--out", stem(&w)]);
    let peak_ppm = |s: &mrsi_scrub::spectrum::Spectrum| {
        let k = (0..s.samples.len())
            .max_by(|&i, &j| s.samples[i].norm().total_cmp(&s.samples[j].norm()))
            .unwrap();
        s.axis.index_to_ppm(k)
    };
    for row in &rows {
        let name = row.split_whitespace().next().unwrap();
        let lip = read_volume(a.join(name)).unwrap().spectrum_at(2, 0).to_frequency();
        let wal = read_volume(w.join(name)).unwrap().spectrum_at(2, 0).to_frequency();
        let mut water = wal.clone();
        for (d, l) in water.samples.iter_mut().zip(&lip.samples) {
            *d -= l;
        }
        assert!(water.samples.iter().any(|z| z.norm() > 0.0), "walinet did draw water");
        let at = peak_ppm(&water);
        assert!((4.2..=5.2).contains(&at), "the water component peaks at {at:.2} ppm");
        let at = peak_ppm(&lip);
        assert!((0.7..=1.9).contains(&at), "the lipnet target peaks at {at:.2} ppm");
    }
}

#[test]
fn train_writes_one_history_row_per_epoch_and_resume_continues_the_count() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&["simulate", "--seed", "2", "--n", "8", "--n-points", "32", "--out", stem(&data)]);

    // a pocket architecture keeps this fast; the config file carries what
    // has no command-line flag
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "[train]\ndepth = 2\nbase_channels = 4\nkernel = 3\nbatch_size = 4\nval_fraction = 0.25\n",
    )
    .unwrap();

    let w2 = dir.path().join("w2.ynw");
    let o = run_ok(&["train", "--config", stem(&cfg), "--data", stem(&data), "--epochs", "2", "--out", stem(&w2)]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("final validation mse ="), "stdout was: {stdout}");
    let hist = std::fs::read_to_string(dir.path().join("w2.ynw.history.csv")).unwrap();
    let rows: Vec<&str> = hist.lines().collect();
    assert_eq!(rows[0], "epoch,lr,train_mse,val_mse");
    assert_eq!(rows.len() - 1, 2, "one row per trained epoch");
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("2,"));

    // resuming to a higher target trains only the missing epochs
    let w4 = dir.path().join("w4.ynw");
    run_ok(&["train", "--config", stem(&cfg), "--data", stem(&data), "--resume", stem(&w2), "--epochs", "4", "--out", stem(&w4)]);
    let hist = std::fs::read_to_string(dir.path().join("w4.ynw.history.csv")).unwrap();
    let rows: Vec<&str> = hist.lines().collect();
    assert_eq!(rows.len() - 1, 2);
    assert!(rows[1].starts_with("3,") && rows[2].starts_with("4,"));

    // a met target and a conflicting seed are both refused
    let o = run(&["train", "--config", stem(&cfg), "--data", stem(&data), "--resume", stem(&w2), "--epochs", "2", "--out", stem(&w4)]);
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["train", "--config", stem(&cfg), "--data", stem(&data), "--resume", stem(&w2), "--epochs", "4", "--seed", "99", "--out", stem(&w4)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));

    // network methods refuse to run without weights
    let p = dir.path().join("p.mrsx");
    run_ok(&["phantom", "--seed", "1", "--nx", "16", "--ny", "16", "--n-points", "64", "--out", stem(&p)]);
    let o = run(&["remove", "--method", "walinet", "--input", stem(&p), "--out", stem(&dir.path().join("q.mrsx"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--weights"));
}

#[test]
fn evaluate_and_compare_leave_reports_behind() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("p.mrsx");
    let t = dir.path().join("p-truth.mrsx");
    run_ok(&["phantom", "--seed", "4", "--nx", "16", "--ny", "16", "--n-points", "64", "--out", stem(&p)]);

    let ev = dir.path().join("eval");
    let o = run_ok(&["evaluate", "--input", stem(&p), "--truth", stem(&t), "--out", stem(&ev)]);
    assert!(ev.join("voxels.csv").is_file());
    assert!(ev.join("aggregate.csv").is_file());
    assert!(ev.join("config.txt").is_file());
    assert!(String::from_utf8_lossy(&o.stdout).contains("median"));

    let cm = dir.path().join("cmp");
    run_ok(&["compare", "--methods", "none,l2", "--water-rank", "8", "--input", stem(&p), "--truth", stem(&t), "--out", stem(&cm)]);
    let agg = std::fs::read_to_string(cm.join("aggregate.csv")).unwrap();
    assert!(agg.lines().any(|l| l.starts_with("l2,")), "aggregate.csv holds l2 rows:\n{agg}");
    assert!(cm.join("spectra.svg").is_file());
    assert!(cm.join("nrmse.svg").is_file());

    // the resolved config written next to the report reloads as a config file
    let o = run(&["compare", "--config", stem(&cm.join("config.txt")), "--out", stem(&dir.path().join("cmp2"))]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bench_reports_scaling_even_for_a_single_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    run_ok(&["bench", "--sizes", "16", "--n-points", "64", "--water-rank", "8", "--methods", "none", "--seed", "1", "--out", stem(&out)]);
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    assert!(summary.contains("hlsvd_scaling_r2 = 1.0000"), "one point lies on any line:\n{summary}");
    let bench = std::fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(bench.lines().count(), 2, "header plus one (method, threads) row:\n{bench}");
    assert!(out.join("scaling.csv").is_file());
    assert!(out.join("config.txt").is_file());
}
