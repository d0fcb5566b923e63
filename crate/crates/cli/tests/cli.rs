use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn hit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hit")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(dir: &TempDir) -> &str {
    dir.path().to_str().expect("utf-8 temp path")
}

fn generate(dir: &TempDir, extra: &[&str]) -> Output {
    let mut args = vec!["generate", "--seed", "7", "--count", "2", "--out", path(dir)];
    args.extend_from_slice(extra);
    let o = hit(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    o
}

fn read(dir: &Path, file: &str) -> Vec<u8> {
    fs::read(dir.join(file)).unwrap_or_else(|e| panic!("{file}: {e}"))
}

#[test]
fn generate_writes_deterministic_ppm_with_sidecars() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let listed = stdout(&generate(&a, &[]));
    generate(&b, &[]);
    assert_eq!(listed.lines().count(), 2);
    for file in ["seed_7.ppm", "seed_8.ppm"] {
        let bytes = read(a.path(), file);
        assert!(bytes.starts_with(b"P6\n32 32\n255\n"));
        assert_eq!(bytes.len(), 13 + 32 * 32 * 3);
        assert_eq!(bytes, read(b.path(), file), "{file}");
    }
    assert_ne!(read(a.path(), "seed_7.ppm"), read(a.path(), "seed_8.ppm"));
    let manifest = String::from_utf8(read(a.path(), "manifest.json")).unwrap();
    assert!(manifest.contains("\"seed\": 7"));
    assert!(read(a.path(), "resolved_config.toml").starts_with(b"seed = 7"));
}

#[test]
fn generate_is_independent_of_thread_count() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    generate(&a, &["--threads", "1"]);
    generate(&b, &["--threads", "4"]);
    for file in ["seed_7.ppm", "seed_8.ppm"] {
        assert_eq!(read(a.path(), file), read(b.path(), file), "{file}");
    }
}

#[test]
fn interpolation_endpoints_match_generated_images() {
    let (gen_dir, interp) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    generate(&gen_dir, &[]);
    let o = hit(&["interpolate", "--seed-a", "7", "--seed-b", "8", "--steps", "5", "--out", path(&interp)]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 5);
    assert_eq!(read(interp.path(), "frame_000.ppm"), read(gen_dir.path(), "seed_7.ppm"));
    assert_eq!(read(interp.path(), "frame_004.ppm"), read(gen_dir.path(), "seed_8.ppm"));
    assert_ne!(read(interp.path(), "frame_002.ppm"), read(gen_dir.path(), "seed_7.ppm"));
    let o = hit(&["interpolate", "--seed-a", "1", "--seed-b", "2", "--steps", "1", "--out", path(&interp)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn params_report_reference_sizes() {
    let b = stdout(&hit(&["params", "hit_b_256"]));
    assert!(b.contains("reference_millions,46.22"), "{b}");
    assert!(b.lines().any(|l| l.starts_with("stage1,")));
    let s = stdout(&hit(&["params", "hit_s_256"]));
    assert!(s.contains("reference_millions,38.01"));
    let toy = stdout(&hit(&["params"]));
    assert!(toy.contains("# parameters of toy"));
    assert!(!toy.contains("reference_millions"));
    assert_eq!(hit(&["params", "hit_xl"]).status.code(), Some(2));
}

#[test]
fn verify_suites_exit_zero_and_print_csv() {
    for suite in ["roundtrip", "equivalence"] {
        let o = hit(&["verify", "--suite", suite]);
        assert!(o.status.success(), "{suite}: {}", stdout(&o));
        let text = stdout(&o);
        let mut lines = text.lines();
        assert!(lines.next().unwrap().starts_with("# config: {"));
        assert_eq!(lines.next(), Some("property,max_error,threshold,verdict"));
        assert!(text.contains(", 0 failed"));
        assert!(!text.contains(",fail\n"));
    }
}

#[test]
fn injected_fault_is_caught_and_named() {
    let o = hit(&["verify", "--suite", "gradcheck", "--filter", "gradcheck/op/", "--inject-fault", "softplus"]);
    assert_eq!(o.status.code(), Some(1));
    let text = stdout(&o);
    assert!(text.contains("gradcheck/op/softplus,"));
    assert!(text.lines().any(|l| l == "# culprit: softplus"), "{text}");
    let o = hit(&["verify", "--inject-fault", "max_axis"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 3\n[train.hyper]\ngamma = 10.0\nlearning_rate = 0.1\n").unwrap();
    let o = hit(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
}

#[test]
fn short_training_writes_trace_and_usable_checkpoint() {
    let dir = TempDir::new().unwrap();
    let o = hit(&["train", "--steps", "2", "--seed", "5", "--out", path(&dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = String::from_utf8(read(dir.path(), "trace.csv")).unwrap();
    assert!(trace.starts_with("# config: {\"seed\":5,"));
    let rows: Vec<&str> = trace.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[3].starts_with("2,") && !rows[3].ends_with(','));
    let weights = dir.path().join("generator.json");
    let samples = TempDir::new().unwrap();
    let o = hit(&["generate", "--weights", weights.to_str().unwrap(), "--out", path(&samples)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(samples.path(), "seed_0.ppm").starts_with(b"P6\n8 8\n255\n"));
}

#[test]
fn bench_reports_each_cell() {
    let dir = TempDir::new().unwrap();
    let o =
        hit(&["bench", "--sizes", "16,64", "--modes", "full,multi_axis,axial", "--repeats", "1", "--out", path(&dir)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(read(dir.path(), "bench.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "N,mode,logit_count,wall_ns_median");
    assert_eq!(rows.len(), 7);
    assert!(rows[4].starts_with("64,full,8192,"));
    assert!(rows[5].starts_with("64,multi_axis,1024,"));
    assert_eq!(hit(&["bench", "--sizes", "15"]).status.code(), Some(2));
}
