use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_equinas"))
}

/// 12×12 IDX pool: class `c` is a bright bar at row `c`, plus a little noise.
fn write_pool(dir: &Path, n: usize) -> (PathBuf, PathBuf) {
    let side = 12usize;
    let mut img = vec![0, 0, 8, 3];
    img.extend((n as u32).to_be_bytes());
    img.extend((side as u32).to_be_bytes());
    img.extend((side as u32).to_be_bytes());
    let mut lbl = vec![0, 0, 8, 1];
    lbl.extend((n as u32).to_be_bytes());
    for i in 0..n {
        let c = i % 10;
        lbl.push(c as u8);
        for p in 0..side * side {
            let bar = p / side == c + 1;
            img.push(if bar { 230 } else { ((i * 31 + p * 17) % 40) as u8 });
        }
    }
    let (a, b) = (dir.join("img.idx"), dir.join("lbl.idx"));
    std::fs::write(&a, img).unwrap();
    std::fs::write(&b, lbl).unwrap();
    (a, b)
}

fn data_section(a: &Path, b: &Path) -> String {
    format!(
        "[data]\nimages = {:?}\nlabels = {:?}\nn_train = 80\nn_val = 20\nn_test = 40\naugment = \"none\"\n",
        a, b
    )
}

const MODEL: &str = "n_conv_layers = 2\nbase_expanded_width = 8\nwiden_after = 0\npool_after = [1]\nhead_hidden_width = 8\n";

fn run(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout).to_string() + &String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "{text}");
    text
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<csv::StringRecord>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let h = r.headers().unwrap().iter().map(String::from).collect();
    (h, r.records().map(|x| x.unwrap()).collect())
}

#[test]
fn train_eval_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pool(dir.path(), 200);
    let out = dir.path().join("train");
    let cfg = dir.path().join("train.toml");
    let text = format!(
        "{}[model]\n{MODEL}mode = {{ kind = \"static\", groups = [\"C4\", \"C2\"] }}\n[train]\nepochs = 1.0\nbatch_size = 16\n",
        data_section(&a, &b)
    );
    std::fs::write(&cfg, text).unwrap();
    run(bin().args(["train", "--config"]).arg(&cfg).arg("--out").arg(&out).args(["--seed", "4"]));
    for f in ["steps.csv", "results.csv", "model.ckpt", "config.resolved.toml", "loss.svg"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("seed = 4"));
    let (h, rows) = csv_rows(&out.join("steps.csv"));
    assert_eq!(h, ["step", "split", "loss", "accuracy"]);
    assert_eq!(rows.len(), 5);
    let first = std::fs::read(out.join("results.csv")).unwrap();

    let resolved_path = out.join("config.resolved.toml");
    let text = run(bin().args(["train", "--eval-only", "--config"]).arg(&resolved_path));
    assert!(text.contains("C4-C2"));
    let (_, rows) = csv_rows(&out.join("results.csv"));
    assert_eq!(rows.len(), 1);
    // test-split row matches the one from the training run
    let before = String::from_utf8(first).unwrap();
    let test_line = before.lines().find(|l| l.contains(",test,")).unwrap().to_string();
    assert!(std::fs::read_to_string(out.join("results.csv")).unwrap().contains(&test_line));

    std::fs::remove_file(out.join("loss.svg")).unwrap();
    run(bin().args(["report", "--out"]).arg(&out));
    assert!(out.join("loss.svg").exists());
}

#[test]
fn diff_then_collapse() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pool(dir.path(), 200);
    let out = dir.path().join("diff");
    let cfg = dir.path().join("diff.toml");
    let text = format!(
        "retrain = true\n{}[model]\n{MODEL}mode = {{ kind = \"mixed\", groups = [\"C1\", \"D1\", \"C2\", \"D2\", \"C4\", \"D4\"] }}\n[diff]\nepochs = 2.0\nbatch_size = 16\n",
        data_section(&a, &b)
    );
    std::fs::write(&cfg, text).unwrap();
    run(bin().args(["diff", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let (h, rows) = csv_rows(&out.join("trajectory.csv"));
    assert_eq!(h, ["epoch", "layer", "group", "z"]);
    assert_eq!(rows.len(), 6 * 2 * 2);
    assert!(out.join("z_layer1.svg").exists() && out.join("z_layer2.svg").exists());
    let text = run(bin().arg("collapse").arg(out.join("mixed.ckpt")).arg("--out").arg(dir.path()).args(["--image-size", "12"]));
    let dev: f64 = text.split_whitespace().nth(3).unwrap().trim_end_matches(';').parse().unwrap();
    assert!(dev < 1e-9, "{text}");

    // a collapsed checkpoint evaluates through train --eval-only
    let eval_cfg = dir.path().join("eval.toml");
    let text = format!(
        "checkpoint = {:?}\nout = {:?}\n{}[model]\n{MODEL}mode = {{ kind = \"mixed\", groups = [\"C1\"] }}\n",
        dir.path().join("collapsed.ckpt"),
        dir.path().join("eval"),
        data_section(&a, &b)
    );
    std::fs::write(&eval_cfg, text).unwrap();
    let text = run(bin().args(["train", "--eval-only", "--config"]).arg(&eval_cfg));
    assert!(text.contains("plain"));

    // static checkpoints cannot be collapsed
    let tcfg = dir.path().join("t.toml");
    std::fs::write(
        &tcfg,
        format!("{}[model]\n{MODEL}mode = {{ kind = \"static\", groups = [\"C1\", \"C1\"] }}\n[train]\nepochs = 0.1\n", data_section(&a, &b)),
    )
    .unwrap();
    run(bin().args(["train", "--config"]).arg(&tcfg).arg("--out").arg(dir.path().join("t")));
    let st = bin().arg("collapse").arg(dir.path().join("t/model.ckpt")).output().unwrap();
    assert!(!st.status.success());
}

#[test]
fn evo_history_is_valid() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = write_pool(dir.path(), 200);
    let out = dir.path().join("evo");
    let cfg = dir.path().join("evo.toml");
    let text = format!(
        "{}[model]\n{MODEL}mode = {{ kind = \"static\", groups = [\"D4\", \"D4\"] }}\n[evo]\ngenerations = 2\nbatch_size = 16\nparent_size = 2\n",
        data_section(&a, &b)
    );
    std::fs::write(&cfg, text).unwrap();
    run(bin().args(["evo", "--workers", "2", "--config"]).arg(&cfg).arg("--out").arg(&out));
    let (h, rows) = csv_rows(&out.join("history.csv"));
    assert_eq!(h[..7], ["generation", "lineage_id", "parent_id", "genotype", "params", "val_acc", "selected"]);
    assert!(!rows.is_empty());
    for r in &rows {
        let g: Vec<&str> = r[3].split('-').collect();
        assert_eq!(g.len(), 2);
    }
    for f in ["pareto.svg", "lineage.svg", "accuracy.svg", "parent0.ckpt", "events.log"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let resolved = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(resolved.contains("workers = 2"));
}

#[test]
fn bad_configs_fail_with_messages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\nimages = \"nope\"\nlabels = \"nope\"\ncolour = 1\n[model]\nmode = { kind = \"rpp\" }\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    std::fs::write(&cfg, format!("out = {:?}\n[data]\nimages = \"nope\"\nlabels = \"nope\"\n[model]\nmode = {{ kind = \"rpp\" }}\n", dir.path().join("o"))).unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg).output().unwrap();
    assert!(String::from_utf8_lossy(&out.stderr).contains("loading dataset"));
}

#[test]
fn verify_passes() {
    let dir = tempfile::tempdir().unwrap();
    let text = run(bin().args(["verify", "--out"]).arg(dir.path()));
    assert!(text.contains("morphism"));
    let (h, rows) = csv_rows(&dir.path().join("verify.csv"));
    assert_eq!(h[0], "suite");
    assert!(rows.iter().all(|r| &r[1] == "1"));
}
