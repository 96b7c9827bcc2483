pub mod config;
pub mod plots;
pub mod svg;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use equinas::autodiff::Tensor;
use equinas::checkpoint;
use equinas::data::Dataset;
use equinas::model::{build, build_prior_baseline, check_genotype, genotype_string, ConvUnit, Mode, Network};
use equinas::nas_diff::{equinas_d, random_z_ablation, retrain};
use equinas::nas_evo::equinas_e;
use equinas::report::{history_csv, results_csv, steps_csv, trajectory_csv, ResultRow};
use equinas::seeds::sub_seed;
use equinas::train::{evaluate, train_steps, TrainConfig};
use equinas::verify;
use rand::SeedableRng;

use config::{resolve, Ablation, DiffFile, EvoFile, Overrides, TrainFile};

fn write(dir: &Path, name: &str, text: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}

fn extra(command: &str, seed: u64) -> BTreeMap<String, serde_json::Value> {
    BTreeMap::from([
        ("command".to_string(), serde_json::json!(command)),
        ("seed".to_string(), serde_json::json!(seed)),
    ])
}

fn model_name(net: &Network) -> String {
    if let Some(g) = net.genotype() {
        return genotype_string(&g);
    }
    match net.convs.first() {
        Some(ConvUnit::Mixed(_)) => "mixed".into(),
        Some(ConvUnit::Rpp { .. }) => "rpp".into(),
        _ => "plain".into(),
    }
}

fn result_rows(net: &Network, name: &str, seed: u64, splits: &[(&str, &Dataset)]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (split, data) in splits {
        if data.is_empty() {
            continue;
        }
        let ev = evaluate(net, data)?;
        rows.push(ResultRow {
            model: name.into(),
            seed,
            params: net.param_count(),
            split: split.to_string(),
            loss: ev.loss,
            accuracy: ev.accuracy,
        });
    }
    Ok(rows)
}

fn finish(out: &Path, start: Instant) -> Result<()> {
    plots::render_dir(out)?;
    if let Some(t) = plots::results_table(out)? {
        print!("{t}");
    }
    println!("outputs in {} ({:.1}s)", out.display(), start.elapsed().as_secs_f64());
    Ok(())
}

/// Runs every self-check suite; returns whether all passed.
pub fn cmd_verify(seed: u64, out: Option<&Path>) -> Result<bool> {
    let reports = verify::run_all(seed);
    println!("{:<16} {:>5} {:>12} {:>10} {:>8}  detail", "suite", "pass", "max resid", "tol", "secs");
    let mut csv = String::from("suite,pass,max_residual,tolerance,seconds\n");
    for r in &reports {
        println!(
            "{:<16} {:>5} {:>12.3e} {:>10.1e} {:>8.2}  {}",
            r.name, r.pass, r.max_residual, r.tolerance, r.seconds, r.detail
        );
        csv.push_str(&format!("{},{},{},{},{}\n", r.name, u8::from(r.pass), r.max_residual, r.tolerance, r.seconds));
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        write(dir, "verify.csv", &csv)?;
    }
    Ok(reports.iter().all(|r| r.pass))
}

pub fn cmd_train(path: &Path, o: &Overrides, eval_only: bool) -> Result<()> {
    let start = Instant::now();
    let c: TrainFile = resolve(path, o)?;
    let splits = c.data.load(c.seed)?;
    if eval_only {
        let ckpt = c.checkpoint.clone().unwrap_or_else(|| c.out.join("model.ckpt"));
        let (net, _) = checkpoint::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        let rows = result_rows(&net, &model_name(&net), c.seed, &[("test", &splits.test)])?;
        write(&c.out, "results.csv", &results_csv(&rows))?;
        return finish(&c.out, start);
    }
    let init = sub_seed(c.seed, "init", 0);
    let mut net = match &c.prior {
        Some(p) => build_prior_baseline(p.initial, p.relaxed_to, &c.model, init)?,
        None => build(&c.model, init)?,
    };
    let tc = TrainConfig {
        batch_size: c.train.batch_size,
        optimizer: c.train.optimizer,
        epochs: c.train.epochs,
        seed: sub_seed(c.seed, "order", 0),
        bn_recalibration: c.train.bn_recalibration,
    };
    let trace = train_steps(&mut net, &splits.train, &tc, tc.steps(splits.train.len()))?;
    write(&c.out, "steps.csv", &steps_csv("train", &trace))?;
    let rows = result_rows(&net, &model_name(&net), c.seed, &[("val", &splits.val), ("test", &splits.test)])?;
    write(&c.out, "results.csv", &results_csv(&rows))?;
    checkpoint::save(&c.out.join("model.ckpt"), &net, extra("train", c.seed))?;
    finish(&c.out, start)
}

pub fn cmd_evo(path: &Path, o: &Overrides) -> Result<()> {
    let start = Instant::now();
    let c: EvoFile = resolve(path, o)?;
    let splits = c.data.load(c.seed)?;
    config::require(!splits.val.is_empty(), "evolution selects on the validation split; set [data] n_val > 0")?;
    let r = equinas_e(&c.model, &c.evo, &splits.train, &splits.val)?;
    for row in &r.history {
        check_genotype(&row.genotype).with_context(|| format!("lineage {} has an invalid genotype", row.lineage))?;
    }
    write(&c.out, "history.csv", &history_csv(&r.history))?;
    let events: String = r.events.iter().map(|e| format!("{e}\n")).collect();
    write(&c.out, "events.log", &events)?;
    let mut rows = Vec::new();
    for (i, ind) in r.population.individuals.iter().enumerate() {
        checkpoint::save(&c.out.join(format!("parent{i}.ckpt")), &ind.network, extra("evo", c.seed))?;
        rows.extend(result_rows(&ind.network, &model_name(&ind.network), c.seed, &[("val", &splits.val), ("test", &splits.test)])?);
    }
    write(&c.out, "results.csv", &results_csv(&rows))?;
    println!(
        "{} history rows, max birth residual {:.3e}, {} dropped",
        r.history.len(),
        r.max_birth_residual(),
        r.events.len()
    );
    finish(&c.out, start)
}

pub fn cmd_diff(path: &Path, o: &Overrides) -> Result<()> {
    let start = Instant::now();
    let c: DiffFile = resolve(path, o)?;
    config::require(
        matches!(c.model.mode, Mode::Mixed(_)),
        "diff needs [model] mode = { kind = \"mixed\", groups = [...] }",
    )?;
    let splits = c.data.load(c.seed)?;
    let r = match c.ablation {
        Ablation::None => equinas_d(&c.model, &c.diff, &splits.train)?,
        Ablation::RandomZ => random_z_ablation(&c.model, &c.diff, &splits.train, false)?,
    };
    write(&c.out, "trajectory.csv", &trajectory_csv(&r.arch.trajectory))?;
    write(&c.out, "steps.csv", &steps_csv("train", &r.trace))?;
    checkpoint::save(&c.out.join("mixed.ckpt"), &r.network, extra("diff", c.seed))?;
    checkpoint::save(&c.out.join("collapsed.ckpt"), &r.network.collapsed()?, extra("diff", c.seed))?;
    let eval_splits = [("val", &splits.val), ("test", &splits.test)];
    let mut rows = result_rows(&r.network, "mixed", c.seed, &eval_splits)?;
    if c.retrain {
        let (net, trace) = retrain(&c.model, &r.arch, &c.diff, &splits.train)?;
        write(&c.out, "retrain_steps.csv", &steps_csv("retrain", &trace))?;
        checkpoint::save(&c.out.join("retrained.ckpt"), &net, extra("diff-retrain", c.seed))?;
        rows.extend(result_rows(&net, "mixed-retrained", c.seed, &eval_splits)?);
    }
    write(&c.out, "results.csv", &results_csv(&rows))?;
    for l in 0..r.arch.logits.len() {
        let z: Vec<String> = r.arch.groups[l]
            .iter()
            .zip(r.arch.z(l))
            .map(|(g, z)| format!("{g}={z:.3}"))
            .collect();
        println!("layer {}: {}", l + 1, z.join(" "));
    }
    finish(&c.out, start)
}

/// Replaces mixed or residual-prior units by plain filters and reports the
/// largest logit change on a seeded probe batch.
pub fn cmd_collapse(ckpt: &Path, out: Option<&Path>, seed: u64, image_size: usize) -> Result<f64> {
    let (net, manifest) = checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    if !net.convs.iter().any(|u| matches!(u, ConvUnit::Mixed(_) | ConvUnit::Rpp { .. })) {
        bail!("{} holds no mixed or residual-prior layers; nothing to collapse", ckpt.display());
    }
    let collapsed = net.collapsed()?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(sub_seed(seed, "probe", 0));
    let x = Tensor::uniform(&[8, net.spec.in_channels, image_size, image_size], -1.0, 1.0, &mut rng);
    let dev = collapsed.logits(&x)?.max_abs_diff(&net.logits(&x)?);
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    std::fs::create_dir_all(&dir)?;
    let target = dir.join("collapsed.ckpt");
    checkpoint::save(&target, &collapsed, manifest.extra)?;
    println!("max logit deviation {dev:.3e}; wrote {}", target.display());
    Ok(dev)
}

pub fn cmd_report(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        bail!("{} is not a run directory", dir.display());
    }
    let figs = plots::render_dir(dir)?;
    for f in &figs {
        println!("wrote {}", f.display());
    }
    match plots::results_table(dir)? {
        Some(t) => print!("{t}"),
        None if figs.is_empty() => bail!("no run outputs found in {}", dir.display()),
        None => {}
    }
    Ok(())
}
