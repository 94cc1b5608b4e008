use std::path::Path;

use r2u3d_core::data::{read_internal, read_metaimage, write_metaimage, MetaElementType, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn r2u3d(args: &[&str]) -> Run {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("r2u3d").chain(args.iter().copied());
    let code = r2u3d_cli::run(argv, &mut out, &mut err);
    Run { code, out: String::from_utf8(out).unwrap(), err: String::from_utf8(err).unwrap() }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn phantoms(dir: &Path, count: &str) {
    let r = r2u3d(&["--seed", "2", "phantoms", "--count", count, "--dims", "8", "8", "8", "--out", s(dir)]);
    assert_eq!(r.code, 0, "{}", r.err);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(r2u3d(&["frobnicate"]).code, 1);
    assert_eq!(r2u3d(&["summarize", "--preset", "huge"]).code, 1);
    assert_eq!(r2u3d(&["summarize", "--input", "60", "64", "64"]).code, 1);
    assert_eq!(r2u3d(&["eval", "--oracle"]).code, 1, "no data directory");
    assert_eq!(r2u3d(&["gradcheck", "--filter", "no-such-check"]).code, 1);
    assert_eq!(r2u3d(&["gradcheck", "--fault", "no-such-op"]).code, 1);
}

#[test]
fn help_exits_zero() {
    let r = r2u3d(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.out.contains("gradcheck"));
}

#[test]
fn missing_files_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let gone = dir.path().join("gone");
    assert_eq!(r2u3d(&["eval", "--oracle", "--data", s(&gone)]).code, 3);
    assert_eq!(r2u3d(&["--config", s(&gone.join("run.toml")), "summarize"]).code, 3);
    let r = r2u3d(&["segment", s(&gone.join("x.vhdr")), "--checkpoint", "nope.ckpt", "--out", s(&gone.join("m.vhdr"))]);
    assert_eq!(r.code, 3, "{}", r.err);
}

#[test]
fn bad_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[train]\nepochz = 3\n").unwrap();
    let r = r2u3d(&["--config", s(&cfg), "summarize"]);
    assert_eq!(r.code, 1);
    assert!(r.err.contains("epochz"), "{}", r.err);
}

#[test]
fn corrupted_backward_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("g.jsonl");
    let r = r2u3d(&["--no-timestamps", "gradcheck", "--filter", "sigmoid", "--fault", "sigmoid", "--out", s(&report)]);
    assert_eq!(r.code, 2, "{}", r.out);
    assert!(r.out.starts_with("FAIL sigmoid"), "{}", r.out);
    let line: serde_json::Value = serde_json::from_str(std::fs::read_to_string(&report).unwrap().trim()).unwrap();
    assert_eq!(line["passed"], false);
    assert!(line.get("seconds").is_none());
}

#[test]
fn timestamps_can_be_switched_off() {
    let with = r2u3d(&["gradcheck", "--filter", "loss/dice"]);
    let without = r2u3d(&["--no-timestamps", "gradcheck", "--filter", "loss/dice"]);
    assert_eq!((with.code, without.code), (0, 0));
    assert!(with.out.starts_with("# generated"));
    assert!(!without.out.contains("generated"));
    assert_eq!(without.out, r2u3d(&["--no-timestamps", "gradcheck", "--filter", "loss/dice"]).out);
}

#[test]
fn summary_json_agrees_with_text() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("s.json");
    let r = r2u3d(&["--preset", "dynamic", "summarize", "--input", "64", "128", "128", "--out", s(&json)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["total"], v["row_sum"]);
    assert_eq!(v["reference"], 12_953_330);
    let total = v["total"].as_u64().unwrap();
    let grouped = total.to_string().as_bytes().rchunks(3).rev().map(|c| std::str::from_utf8(c).unwrap()).collect::<Vec<_>>().join(",");
    assert!(r.out.contains(&grouped), "{grouped} missing from\n{}", r.out);
}

#[test]
fn eval_reports_rows_and_mean() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, "2");
    let report = dir.path().join("eval.jsonl");
    let r = r2u3d(&["--no-timestamps", "eval", "--oracle", "--data", s(&data), "--out", s(&report)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let lines: Vec<serde_json::Value> =
        std::fs::read_to_string(&report).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0]["scan"], "phantom-000");
    assert_eq!(lines[1]["dsc"], 1.0);
    assert_eq!(lines[2]["mean"]["soft_dsc"], 1.0);
    assert_eq!(lines[2]["scans"], 2);
    let table: Vec<&str> = r.out.lines().collect();
    assert_eq!(table.len(), 4);
    assert!(table[3].starts_with("mean") && table[3].ends_with("1.0000"), "{}", r.out);
}

#[test]
fn oracle_segmentation_returns_the_mask_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, "1");
    let mask = data.join("phantom-000.mask.vhdr");
    let out = dir.path().join("seg/m.vhdr");
    let probs = dir.path().join("seg/p.vhdr");
    let r = r2u3d(&[
        "segment",
        s(&data.join("phantom-000.image.vhdr")),
        "--oracle-mask",
        s(&mask),
        "--out",
        s(&out),
        "--probabilities",
        s(&probs),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let want = read_internal(&mask).unwrap();
    let got = read_internal(&out).unwrap();
    assert_eq!(got, want);
    assert!(read_internal(&probs).unwrap().is_binary());
}

#[test]
fn train_then_eval_and_segment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    phantoms(&data, "2");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "preset = \"dynamic\"\n[model]\nfilters = [2, 2, 2, 2]\nstem_stages = 0\nlayers_per_unit = 1\nse_reduction = 2\n\
         [train]\niterations = 2\nsample_size = 1\nepochs_per_iteration = 1\n[paths]\ndata = \"data\"\ncheckpoint = \"run/m.ckpt\"\n",
    )
    .unwrap();
    let c = s(&cfg);
    let r = r2u3d(&["--config", c, "train", "--checkpoint-every", "1"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("2 gradient steps"), "{}", r.out);
    let log = std::fs::read_to_string(dir.path().join("run/m.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.contains("wall_time_s"));

    let r = r2u3d(&["--config", c, "eval", "--threshold", "0.3"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("dsc@0.3"));

    let mask = dir.path().join("seg.vhdr");
    let r = r2u3d(&["--config", c, "segment", s(&data.join("phantom-001.image.vhdr")), "--out", s(&mask)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let m = read_internal(&mask).unwrap();
    assert_eq!(m.dims, [8, 8, 8]);
    assert!(m.is_binary());

    // Resume from the checkpoint for one more iteration.
    let r = r2u3d(&["--config", c, "train", "--init", s(&dir.path().join("run/m.ckpt")), "--iterations", "1", "--checkpoint", s(&dir.path().join("more.ckpt"))]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(r2u3d(&["--config", c, "eval", "--threshold", "1.5"]).code, 1);
}

#[test]
fn preprocess_reads_metaimage() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let ct: Vec<f32> = (0..4 * 6 * 6).map(|_| r.gen_range(-1000..2000) as f32).collect();
    let lungs: Vec<f32> = ct.iter().map(|&v| if v < 0.0 { 1.0 } else { 0.0 }).collect();
    let image = dir.path().join("case-7.mhd");
    let mask = dir.path().join("case-7-mask.mhd");
    write_metaimage(&image, &Volume::new([4, 6, 6], [2.0, 0.8, 0.8], ct).unwrap(), MetaElementType::Short).unwrap();
    write_metaimage(&mask, &Volume::new([4, 6, 6], [2.0, 0.8, 0.8], lungs).unwrap(), MetaElementType::UChar).unwrap();
    assert_eq!(read_metaimage(&image).unwrap().dims, [4, 6, 6]);

    let out = dir.path().join("ds");
    let r = r2u3d(&["preprocess", s(&image), "--mask", s(&mask), "--target-depth", "8", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let img = read_internal(out.join("case-7.image.vhdr")).unwrap();
    let msk = read_internal(out.join("case-7.mask.vhdr")).unwrap();
    assert_eq!(img.dims, [8, 6, 6]);
    assert_eq!(msk.dims, [8, 6, 6]);
    assert!(msk.is_binary());
    let (lo, hi) = img.voxels.iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
    assert_eq!((lo, hi), (0.0, 1.0));
    // Slices are duplicated in pairs when doubling depth.
    assert_eq!(img.slice(0), img.slice(1));

    let r = r2u3d(&["preprocess", s(&image), "--id", "solo", "--out", s(&out)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(read_internal(out.join("solo.image.vhdr")).unwrap().dims, [4, 6, 6]);
}
