use std::path::Path;
use std::process::{Command, Output};

use raap_core::lifting::DepthMap;
use raap_core::memory::{load_memory, save_memory, Memory};
use raap_core::synthgen::{load_scenes, save_scenes};

const TINY: &str = "\
[model]
d = 8
n_heads = 2
d_ff = 16
n_layers = 1
patch = 16
film_hidden = 8
gate_hidden = 8
head_hidden = 8
[train]
max_epochs = 2
candidate_pool = 10
episodes_per_query = 2
";

fn raap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_raap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, variant: &str, seed: &str) {
    let o = raap(&[
        "gen", "--variant", variant, "--seed", seed, "--n-train", "12", "--n-test", "3", "--out", s(dir),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p
}

fn train_k(dir: &Path, data: &Path, k: usize, seed: u64) -> Output {
    let cfg = tiny_config(dir);
    let ckpt = dir.join("m-{k}-{seed}.ckpt");
    let loss = dir.join(format!("loss-{k}-{seed}.csv"));
    raap(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(data),
        "--out-checkpoint",
        s(&ckpt),
        "--loss-history",
        s(&loss),
        "--k",
        &k.to_string(),
        "--seed",
        &seed.to_string(),
    ])
}

#[test]
fn gen_default_split_is_seventy_thirty() {
    let t = tempfile::tempdir().unwrap();
    let o = raap(&["gen", "--variant", "noiseless", "--tasks", "open", "--out", s(t.path())]);
    assert_eq!(code(&o), 0);
    let m = std::fs::read_to_string(t.path().join("manifest.tsv")).unwrap();
    assert_eq!(m.lines().filter(|l| l.starts_with("train\t")).count(), 70);
    assert_eq!(m.lines().filter(|l| l.starts_with("test\t")).count(), 30);
}

#[test]
fn gen_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    gen(&a, "noisy", "9");
    gen(&b, "noisy", "9");
    for f in ["memory.raap", "train.scenes", "test.scenes", "manifest.tsv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_inputs_exit_two() {
    let t = tempfile::tempdir().unwrap();
    assert_eq!(code(&raap(&["gen", "--variant", "foggy", "--out", s(t.path())])), 2);
    let blocker = t.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = raap(&["gen", "--out", s(&blocker.join("sub"))]);
    assert_eq!(code(&o), 2);
    // no memory file
    assert_eq!(code(&train_k(t.path(), &t.path().join("missing"), 1, 0)), 2);
    let bad = t.path().join("bad.toml");
    std::fs::write(&bad, "[train]\nnot_a_key = 1\n").unwrap();
    assert_eq!(code(&raap(&["train", "--config", s(&bad)])), 2);
}

#[test]
fn tiny_training_is_fast_and_bounded() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "noiseless", "1");
    let started = std::time::Instant::now();
    let o = train_k(t.path(), &data, 2, 0);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(started.elapsed().as_secs() < 60);
    let loss = std::fs::read_to_string(t.path().join("loss-2-0.csv")).unwrap();
    let rows = loss.lines().count() - 1;
    assert!((1..=50).contains(&rows));
    assert!(t.path().join("m-2-0.ckpt").exists());
}

#[test]
fn eval_reports_rule_aggregate_and_sweep() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "noiseless", "2");
    for k in 0..=4 {
        for seed in [0, 1] {
            assert_eq!(code(&train_k(t.path(), &data, k, seed)), 0);
        }
    }
    let cfg = tiny_config(t.path());
    let ckpt = t.path().join("m-{k}-{seed}.ckpt");
    let reports = t.path().join("r");
    let o = raap(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--k", "4",
        "--variant-rule", "uniform", "--seeds", "0,1", "--out", s(&reports),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = std::fs::read_to_string(reports.join("report-k4-seed0-uniform.txt")).unwrap();
    assert!(report.contains("rule: uniform"));
    let out = stdout(&o);
    let per_seed: Vec<f64> = out
        .lines()
        .filter(|l| !l.contains("aggregate"))
        .filter_map(|l| l.split("mae=").nth(1))
        .map(|v| v.trim().parse().unwrap())
        .collect();
    let agg: f64 = out
        .lines()
        .find_map(|l| l.split("aggregate_mae=").nth(1))
        .and_then(|v| v.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(per_seed.len(), 2);
    assert!((agg - (per_seed[0] + per_seed[1]) / 2.0).abs() < 1e-3);

    let o = raap(&[
        "eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ckpt), "--seeds", "0",
        "--k-sweep", "0..4", "--out", s(&reports),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let table = std::fs::read_to_string(reports.join("k_mae-full.csv")).unwrap();
    assert_eq!(table.lines().count(), 6);
}

#[test]
fn leakage_exits_four() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "noiseless", "3");
    assert_eq!(code(&train_k(t.path(), &data, 1, 0)), 0);
    std::fs::copy(data.join("train.scenes"), data.join("test.scenes")).unwrap();
    let o = raap(&[
        "eval", "--config", s(&tiny_config(t.path())), "--data", s(&data), "--checkpoint",
        s(&t.path().join("m-{k}-{seed}.ckpt")), "--k", "1", "--seeds", "0", "--out", s(&t.path().join("r")),
    ]);
    assert_eq!(code(&o), 4);
}

#[test]
fn non_finite_training_exits_three() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "noiseless", "4");
    let m = load_memory(data.join("memory.raap")).unwrap();
    let mut entries = m.entries().to_vec();
    for e in &mut entries {
        e.image.data_mut()[0] = f64::NAN;
    }
    save_memory(&Memory::from_entries(entries).unwrap(), data.join("memory.raap")).unwrap();
    assert_eq!(code(&train_k(t.path(), &data, 2, 0)), 3);
}

#[test]
fn predict_transfers_contact_and_lifts() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    gen(&data, "noiseless", "5");
    assert_eq!(code(&train_k(t.path(), &data, 0, 0)), 0);
    let ckpt = t.path().join("m-0-0.ckpt");

    let mut scenes = load_scenes(data.join("test.scenes")).unwrap();
    for sc in &mut scenes {
        let (h, w) = (sc.depth.height(), sc.depth.width());
        sc.depth = DepthMap::new(h, w, vec![1.5; h * w]).unwrap();
    }
    let flat = t.path().join("flat.scenes");
    save_scenes(&scenes, &flat).unwrap();
    for sc in &scenes {
        let o = raap(&[
            "predict", "--checkpoint", s(&ckpt), "--scene", s(&flat), "--id", &sc.id, "--memory",
            s(&data.join("memory.raap")), "--k", "0", "--lift",
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let line = stdout(&o).lines().next().unwrap().to_string();
        let contact = format!("contact={},{}", sc.gt.contact.x, sc.gt.contact.y);
        assert!(line.contains(&contact), "{line} vs {contact}");
        let d3 = line.split("direction3d=").nth(1).unwrap();
        let z: f64 = d3.split(',').nth(2).unwrap().trim().parse().unwrap();
        assert!(z.abs() < 1e-6, "{line}");
    }

    for sc in &mut scenes {
        let (h, w) = (sc.depth.height(), sc.depth.width());
        sc.depth = DepthMap::new(h, w, vec![0.0; h * w]).unwrap();
    }
    save_scenes(&scenes, &flat).unwrap();
    let o = raap(&[
        "predict", "--checkpoint", s(&ckpt), "--scene", s(&flat), "--memory", s(&data.join("memory.raap")), "--k",
        "0", "--lift",
    ]);
    assert_eq!(code(&o), 5);
}

#[test]
fn help_lists_config_keys() {
    let o = raap(&["--help"]);
    let text = stdout(&o);
    for key in ["n_layers", "candidate_pool", "flip_references", "attention", "synonyms", "loss_history"] {
        assert!(text.contains(key), "{key}");
    }
}
