use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn attrnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attrnet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

const SMALL: &str = r#"
batch_size = 8
max_epochs = 2
seed = 3

[model]
image_size = 16
grid = 2
stem_channels = [4, 4]
aap_width = 4

[model.fusion]
channels = 4
reduction = 4
"#;

const WIDER: &str = r#"
[model]
image_size = 16
grid = 2
stem_channels = [4, 4]
aap_width = 6

[model.fusion]
channels = 4
reduction = 4
"#;

#[test]
fn gen_data_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = attrnet(&["gen-data", "--n", "10", "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 11, "ten images plus the manifest");
    assert_eq!(ta, tb);
}

#[test]
fn usage_errors_exit_nonzero() {
    let o = attrnet(&["frobnicate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));
    let o = attrnet(&["gen-data", "--n", "3", "--out", "x", "--bogus"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("Usage"));
    let o = attrnet(&["eval", "--checkpoint", "c", "--manifest", "m", "--split", "holdout"]);
    assert!(!o.status.success());
}

#[test]
fn train_eval_and_shape_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let wider = dir.path().join("wider.toml");
    fs::write(&wider, WIDER).unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    let (cfg, wider, data_s, run_s) = (
        cfg.to_str().unwrap(),
        wider.to_str().unwrap(),
        data.to_str().unwrap(),
        run.to_str().unwrap(),
    );

    let o = attrnet(&["--config", cfg, "gen-data", "--n", "60", "--seed", "2", "--out", data_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    // a corrupt record is skipped with a warning, not fatal
    let manifest = data.join("manifest.jsonl");
    let mut text = fs::read_to_string(&manifest).unwrap();
    text.push_str("{not json\n");
    fs::write(&manifest, text).unwrap();

    let o = attrnet(&["--config", cfg, "train", "--manifest", data_s, "--out", run_s]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("skipped 1 manifest records"), "{}", stderr(&o));
    for f in ["train_log.csv", "checkpoint.json", "eval.json", "attention.csv", "config.toml"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    let log = fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_loss,lr,seconds"));
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("checkpoint.json");
    let ckpt = ckpt.to_str().unwrap();
    let o = attrnet(&["eval", "--checkpoint", ckpt, "--manifest", data_s, "--split", "val"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report = attrnet::metrics::EvalReport::from_json(&stdout(&o)).unwrap();
    assert!(report.n > 0);

    let o = attrnet(&["--config", wider, "eval", "--checkpoint", ckpt, "--manifest", data_s]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("dimension mismatch"), "{}", stderr(&o));
}

#[test]
fn colorfulness_on_file_and_directory() {
    let dir = tempfile::tempdir().unwrap();
    let gray = attrnet::attributes::Image::filled(4, 4, [128, 128, 128]).unwrap();
    let red = attrnet::attributes::Image::filled(4, 4, [255, 0, 0]).unwrap();
    gray.write_ppm(&dir.path().join("gray.ppm")).unwrap();
    red.write_ppm(&dir.path().join("red.ppm")).unwrap();

    let o = attrnet(&["colorfulness", dir.path().join("red.ppm").to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let line = out.lines().nth(1).unwrap();
    let fields: Vec<&str> = line.split(',').collect();
    assert!((fields[1].parse::<f64>().unwrap() - 85.53).abs() < 0.01, "{line}");

    let o = attrnet(&["colorfulness", dir.path().to_str().unwrap()]);
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().collect();
    assert_eq!(rows[0], "path,M,level");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].ends_with("gray.ppm,0.0000,0"), "{}", rows[1]);

    let o = attrnet(&["colorfulness", dir.path().join("missing.ppm").to_str().unwrap()]);
    assert!(!o.status.success());
}

#[test]
fn gradcheck_subset_and_unknown_block() {
    let o = attrnet(&["gradcheck", "--seeds", "3", "--block", "linear", "--block", "mse"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 3);
    assert!(out.lines().skip(1).all(|l| l.contains(",ok,")));

    let o = attrnet(&["gradcheck", "--block", "nonexistent"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("unknown block"));
}

#[test]
fn gradcheck_exit_code_follows_the_verdict() {
    let o = attrnet(&["gradcheck", "--seeds", "2"]);
    let out = stdout(&o);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), attrnet::gradsuite::block_names().len());
    let any_fail = rows.iter().any(|l| l.contains(",FAIL,"));
    assert_eq!(o.status.success(), !any_fail, "{out}");
}
