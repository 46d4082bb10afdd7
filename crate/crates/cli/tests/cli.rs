use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn topocnn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_topocnn"))
        .args(args)
        .env_remove("TOPOCNN_DATA_ROOT")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path, name: &str, extra: &str) -> PathBuf {
    let text = format!(
        "dataset = \"synthetic\"\n\
         synthetic_dev_examples = 120\n\
         synthetic_test_examples = 40\n\
         synthetic_size = 8\n\
         val_cap = 20\n\
         widths = [4, 8]\n\
         epochs = 2\n\
         batch_size = 32\n\
         output_dir = \"{}\"\n{extra}",
        dir.join(name).display()
    );
    let path = dir.join(format!("{name}.toml"));
    fs::write(&path, text).unwrap();
    path
}

#[test]
fn export_circle_rows_are_on_the_unit_circle() {
    let o = topocnn(&["export-layout", "--scheme", "circle", "--channels", "256"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 256);
    for r in rows {
        let v: Vec<f64> = r.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!((v[0].hypot(v[1]) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn export_grid2d_and_files() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("g");
    let o = topocnn(&["export-layout", "--scheme", "grid2d", "--channels", "4", "--output", prefix.to_str().unwrap()]);
    assert!(o.status.success());
    let csv = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    assert_eq!(csv, "channel,x,y\n0,0,0\n1,0.5,0\n2,0,0.5\n3,0.5,0.5\n");
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(json["channels"], 4);
}

#[test]
fn export_nested2d_ring_count() {
    let o = topocnn(&["export-layout", "--scheme", "nested2d", "--channels", "256"]);
    let text = stdout(&o);
    let mut widths: Vec<f64> = text
        .lines()
        .skip(1)
        .map(|r| {
            let v: Vec<f64> = r.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
            (v[0] - 0.5).abs().max((v[1] - 0.5).abs())
        })
        .collect();
    widths.sort_by(f64::total_cmp);
    widths.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    assert_eq!(widths.len(), 32);
}

#[test]
fn unknown_scheme_is_a_usage_error() {
    let o = topocnn(&["export-layout", "--scheme", "torus", "--channels", "4"]);
    assert_eq!(o.status.code(), Some(2));
    let o = topocnn(&["export-layout", "--scheme", "circle", "--channels", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_help_lists_config_keys() {
    let o = topocnn(&["train", "--help"]);
    let text = stdout(&o);
    for key in ["dataset", "lambda", "scheme", "similarity", "warmup_fraction", "topo_layers", "output_dir"] {
        assert!(text.contains(key), "missing {key}");
    }
}

#[test]
fn config_and_data_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "lamda = 1.0\n").unwrap();
    let o = topocnn(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("lamda"));

    let cifar = dir.path().join("cifar.toml");
    fs::write(&cifar, format!("dataset = \"cifar10\"\ndata_root = \"{}\"\n", dir.path().join("nowhere").display())).unwrap();
    let o = topocnn(&["train", "--config", cifar.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn train_evaluate_and_sweep() {
    let dir = tempfile::tempdir().unwrap();
    let base_cfg = tiny_config(dir.path(), "base", "lambda = 0.0\n");
    let topo_cfg = tiny_config(dir.path(), "topo", "lambda = 1.0\nscheme = \"sphere\"\n");

    let o = topocnn(&["train", "--quiet", "--config", base_cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = fs::read_to_string(dir.path().join("base/metrics.jsonl")).unwrap();
    assert_eq!(first.lines().count(), 2);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("base/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(side["model_kind"], "baseline");

    let o = topocnn(&["train", "--quiet", "--config", base_cfg.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(fs::read_to_string(dir.path().join("base/metrics.jsonl")).unwrap(), first);

    let o = topocnn(&["train", "--quiet", "--config", topo_cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("topo/checkpoint.json")).unwrap()).unwrap();
    assert_eq!(side["model_kind"], "topographic");

    let base = dir.path().join("base/checkpoint.tpgr");
    let topo = dir.path().join("topo/checkpoint.tpgr");
    let o = topocnn(&["evaluate", "--checkpoint", topo.to_str().unwrap()]);
    assert!(o.status.success());
    let eval: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(eval["accuracy"], side["test_acc"]);

    let out = dir.path().join("sweep");
    let sweep = |fractions: &str, b: &Path| {
        topocnn(&[
            "prune-sweep",
            "--baseline",
            b.to_str().unwrap(),
            "--topographic",
            topo.to_str().unwrap(),
            "--fractions",
            fractions,
            "--output",
            out.to_str().unwrap(),
        ])
    };
    let o = sweep("0,0.25,0.5,0.75", &base);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4 * 2);
    let zero_topo = csv.lines().find(|l| l.starts_with("0,topographic")).unwrap();
    assert_eq!(zero_topo.rsplit(',').next().unwrap().parse::<f64>().unwrap(), side["test_acc"].as_f64().unwrap());
    assert!(out.join("sweep_summary.json").exists());

    assert_eq!(sweep("", &base).status.code(), Some(2));
    assert_eq!(sweep("0.5,1.0", &base).status.code(), Some(2));

    let other_cfg = tiny_config(dir.path(), "wide", "");
    let text = fs::read_to_string(&other_cfg).unwrap().replace("widths = [4, 8]", "widths = [8, 8]");
    fs::write(&other_cfg, text).unwrap();
    assert!(topocnn(&["train", "--quiet", "--config", other_cfg.to_str().unwrap()]).status.success());
    let o = sweep("0.5", &dir.path().join("wide/checkpoint.tpgr"));
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn gradcheck_passes() {
    let o = topocnn(&["gradcheck", "--samples", "2"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).contains("objective[sphere]"));
}
