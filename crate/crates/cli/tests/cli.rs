use std::fs;
use std::path::Path;
use std::process::{Command, Output};
use std::time::Instant;

use genni_cli::plots::PlotData;
use genni_cli::runner::{Manifest, NegativeLine};
use tempfile::TempDir;

fn genni(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genni"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMOKE: &str = r#"version = 1

[data.synthetic]
n_users = 2000
n_items = 200
mean_len = 20.0
seed = 3

[train]
max_epochs = 3
seed = 1

[train.sampler]
kind = "genni"
alpha = 2.0

[train.encoder]
max_len = 20
dim = 32
layers = 1
heads = 1
ff_dim = 64

[diagnostics]
probe_users = 2
top_n = 4
"#;

fn tiny(extra: &str) -> String {
    format!(
        "version = 1\n[data.synthetic]\nn_users = 300\nn_items = 40\nmean_len = 12.0\n\
         [train]\nmax_epochs = 2\n[train.sampler]\nkind = \"genni\"\n\
         [train.encoder]\nmax_len = 10\ndim = 8\nlayers = 1\nheads = 1\nff_dim = 16\n{extra}"
    )
}

fn write(dir: &Path, name: &str, text: &str) {
    fs::write(dir.join(name), text).unwrap();
}

#[test]
fn missing_required_field_exits_2_naming_it() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "bad.toml", "version = 1\n[data]\npath = \"x.tsv\"\n");
    let o = genni(&["run", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing field `train`"), "{}", stderr(&o));
}

#[test]
fn invalid_value_reports_its_line() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "bad.toml", &tiny("[sweep]\nalpha = [1.0, \"two\"]\n"));
    let o = genni(&["run", "bad.toml"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 17"), "{}", stderr(&o));
}

#[test]
fn oversized_sweep_refused_before_running() {
    let tmp = TempDir::new().unwrap();
    let alphas: Vec<String> = (0..101).map(|i| format!("{}.0", i % 7)).collect();
    let seeds: Vec<String> = (0..100).map(|i| i.to_string()).collect();
    let sweep = format!("[sweep]\nalpha = [{}]\nseed = [{}]\n", alphas.join(", "), seeds.join(", "));
    write(tmp.path(), "big.toml", &tiny(&sweep));
    let o = genni(&["run", "big.toml", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sweep: 10100 run(s)"), "{}", stderr(&o));
    assert!(stderr(&o).contains("--allow-large-sweep"));
    assert!(!tmp.path().join("o").exists());
}

#[test]
fn smoke_run_writes_manifest_and_reruns_identically() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "smoke.toml", SMOKE);
    let start = Instant::now();
    let o = genni(&["run", "smoke.toml", "--out", "a", "--threads", "1", "-q"], tmp.path());
    let elapsed = start.elapsed().as_secs_f64();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(elapsed < 60.0, "smoke run took {elapsed:.1}s");

    let a = tmp.path().join("a");
    let m = Manifest::load(&a.join("manifest.json")).unwrap();
    assert_eq!(m.config_sha256.len(), 64);
    assert!(m.code_version.starts_with("genni-cli "));
    assert_eq!(m.seeds, vec![1]);
    assert!(m.wall_clock_seconds > 0.0 && m.wall_clock_seconds < 60.0);
    assert_eq!(m.runs.len(), 1);
    assert_eq!(m.runs[0].epoch_seconds.len(), 3);
    let metrics = fs::read_to_string(a.join("runs/run-0000/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    assert_eq!(fs::read_to_string(a.join("runs/run-0000/negatives.jsonl")).unwrap().lines().count(), 6);

    let o = genni(&["run", "--manifest", "a/manifest.json", "--out", "b", "-q"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for file in ["metrics.csv", "test.csv", "best.ckpt", "cell.json", "negatives.jsonl"] {
        let x = fs::read(a.join("runs/run-0000").join(file)).unwrap();
        let y = fs::read(tmp.path().join("b/runs/run-0000").join(file)).unwrap();
        assert!(x == y, "{file} differs after rerun");
    }
    let again = Manifest::load(&tmp.path().join("b/manifest.json")).unwrap();
    assert_eq!(again.reproduces.as_deref(), Some(m.config_sha256.as_str()));

    let lines = genni(&["inspect-negatives", "--manifest", "a/manifest.json", "--count", "2", "--top-n", "3"], tmp.path());
    assert!(lines.status.success(), "{}", stderr(&lines));
    let parsed: Vec<NegativeLine> = String::from_utf8(lines.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(parsed.len(), 2);
    for l in &parsed {
        assert_eq!(l.topn.len(), 3);
        assert!(l.topn.iter().all(|(item, _)| *item != l.target));
        assert!(l.topn.windows(2).all(|w| w[0].1 >= w[1].1));
    }
}

#[test]
fn rerun_detects_tampered_manifest() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "t.toml", &tiny(""));
    assert!(genni(&["run", "t.toml", "--out", "a", "-q"], tmp.path()).status.success());
    let path = tmp.path().join("a/manifest.json");
    let mut m = Manifest::load(&path).unwrap();
    m.runs[0].metrics_sha256 = "0".repeat(64);
    fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
    let o = genni(&["run", "--manifest", "a/manifest.json", "--out", "b", "-q"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mismatch"), "{}", stderr(&o));
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "t.toml", &tiny("[sweep]\nalpha = [0.0, 2.0]\n"));
    assert!(genni(&["run", "t.toml", "--out", "one", "--threads", "1", "-q"], tmp.path()).status.success());
    assert!(genni(&["run", "t.toml", "--out", "four", "--threads", "4", "-q"], tmp.path()).status.success());
    let a = Manifest::load(&tmp.path().join("one/manifest.json")).unwrap();
    let b = Manifest::load(&tmp.path().join("four/manifest.json")).unwrap();
    for (x, y) in a.runs.iter().zip(&b.runs) {
        assert_eq!(x.metrics_sha256, y.metrics_sha256);
        assert_eq!(x.test, y.test);
    }
    let ckpt = |d: &str| fs::read(tmp.path().join(d).join("runs/run-0001/best.ckpt")).unwrap();
    assert!(ckpt("one") == ckpt("four"));
}

#[test]
fn gen_synthetic_is_seed_deterministic() {
    let tmp = TempDir::new().unwrap();
    let run = |seed: &str, out: &str| {
        let o = genni(
            &["gen-synthetic", "--users", "200", "--items", "30", "--seed", seed, "--out", out],
            tmp.path(),
        );
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(tmp.path().join(out)).unwrap()
    };
    let a = run("9", "a.tsv");
    assert!(a == run("9", "b.tsv"));
    assert!(a != run("10", "c.tsv"));
    let text = String::from_utf8(a).unwrap();
    assert!(text.lines().all(|l| l.split('\t').count() == 3));

    let o = genni(&["gen-synthetic", "--users", "200", "--items", "30", "--planted", "--out", "p.tsv"], tmp.path());
    assert!(o.status.success());
    let info: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("p.tsv.planted.json")).unwrap()).unwrap();
    assert_eq!(info["held_out"].as_array().unwrap().len(), 20);
}

#[test]
fn bench_counts_are_exact_and_linear() {
    let tmp = TempDir::new().unwrap();
    let o = genni(
        &["bench-sampler", "--items", "5000,10000", "--betas", "0.1,1.0", "--reps", "5", "--dim", "8"],
        tmp.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<Vec<String>> = text.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    let scored: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(scored, vec![500, 5000, 1000, 10000]);
    assert_eq!(scored[0] * 10, scored[1]);
    assert_eq!(scored[0] * 2, scored[2]);
    assert_eq!(scored[1] * 2, scored[3]);
}

#[test]
fn export_plots_series_sweeps_and_warnings() {
    let tmp = TempDir::new().unwrap();
    write(tmp.path(), "s.toml", &tiny("[sweep]\nalpha = [0.0, 1.0, 2.0]\n"));
    assert!(genni(&["run", "s.toml", "--out", "sweep", "-q"], tmp.path()).status.success());
    fs::create_dir_all(tmp.path().join("sweep/broken")).unwrap();
    write(&tmp.path().join("sweep/broken"), "metrics.csv", "epoch,loss\n1,nope\n");

    let o = genni(&["export-plots", "sweep", "--out", "plots.json"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let plots: PlotData = serde_json::from_str(&fs::read_to_string(tmp.path().join("plots.json")).unwrap()).unwrap();
    assert_eq!(plots.series.len(), 3);
    assert!(plots.series.iter().all(|s| s.points.len() == 2));
    let alpha = &plots.sweeps["alpha"];
    assert_eq!(alpha.iter().map(|g| g.value).collect::<Vec<_>>(), vec![0.0, 1.0, 2.0]);
    assert!(alpha.iter().all(|g| g.series.len() == 1));
    assert_eq!(plots.warnings.len(), 1);
    assert!(plots.warnings[0].contains("broken/metrics.csv"));
    assert_eq!(plots.time_vs_performance.len(), 6);

    let single = genni(&["export-plots", "sweep/runs/run-0002"], tmp.path());
    let plots: PlotData = serde_json::from_slice(&single.stdout).unwrap();
    assert_eq!(plots.series.len(), 1);
    assert_eq!(plots.series[0].points.iter().map(|p| p.metrics.epoch).collect::<Vec<_>>(), vec![0, 1]);
    assert!(plots.sweeps.is_empty());

    fs::create_dir_all(tmp.path().join("empty")).unwrap();
    let o = genni(&["export-plots", "empty"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
}
