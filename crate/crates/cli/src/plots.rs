//! SVG figures rebuilt from the CSV files of a run directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::svg::{Plot, Style};

fn read_csv(path: &Path) -> Result<Vec<BTreeMap<String, String>>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.with_context(|| format!("parsing {}", path.display()))?;
        rows.push(headers.iter().map(String::from).zip(rec.iter().map(String::from)).collect());
    }
    Ok(rows)
}

fn num(row: &BTreeMap<String, String>, key: &str) -> Result<f64> {
    row.get(key)
        .with_context(|| format!("missing column {key}"))?
        .parse()
        .with_context(|| format!("column {key} is not numeric"))
}

fn steps_plot(rows: &[BTreeMap<String, String>]) -> Result<String> {
    let mut by_split: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        by_split.entry(r["split"].clone()).or_default().push((num(r, "step")?, num(r, "loss")?));
    }
    let mut p = Plot::new("training loss", "step", "loss");
    for (split, pts) in by_split {
        p = p.with(&split, Style::Line, pts);
    }
    Ok(p.render())
}

fn evo_plots(rows: &[BTreeMap<String, String>]) -> Result<Vec<(String, String)>> {
    let last = rows.iter().map(|r| num(r, "generation")).collect::<Result<Vec<_>>>()?;
    let last = last.iter().cloned().fold(0.0, f64::max);
    let (mut sel, mut other) = (Vec::new(), Vec::new());
    let (mut lin_sel, mut lin_other) = (Vec::new(), Vec::new());
    let mut acc: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
    for r in rows {
        let (g, params, val) = (num(r, "generation")?, num(r, "params")?, num(r, "val_acc")?);
        let chosen = r["selected"] == "1";
        if g == last {
            if chosen { &mut sel } else { &mut other }.push((params, val));
        }
        if chosen { &mut lin_sel } else { &mut lin_other }.push((g, params));
        if chosen {
            let e = acc.entry(g as i64).or_insert((f64::NEG_INFINITY, 0.0, 0));
            e.0 = e.0.max(val);
            e.1 += val;
            e.2 += 1;
        }
    }
    let pareto = Plot::new("final generation", "parameters", "validation accuracy")
        .with("other", Style::Points, other)
        .with("selected", Style::Points, sel)
        .render();
    let lineage = Plot::new("parameter history", "generation", "parameters")
        .with("other", Style::Points, lin_other)
        .with("selected", Style::Points, lin_sel)
        .render();
    let best = acc.iter().map(|(&g, v)| (g as f64, v.0)).collect();
    let mean = acc.iter().map(|(&g, v)| (g as f64, v.1 / v.2 as f64)).collect();
    let accuracy = Plot::new("selected parents", "generation", "validation accuracy")
        .with("best", Style::Line, best)
        .with("mean", Style::Line, mean)
        .render();
    Ok(vec![
        ("pareto.svg".into(), pareto),
        ("lineage.svg".into(), lineage),
        ("accuracy.svg".into(), accuracy),
    ])
}

fn trajectory_plots(rows: &[BTreeMap<String, String>]) -> Result<Vec<(String, String)>> {
    let mut layers: BTreeMap<usize, BTreeMap<String, Vec<(f64, f64)>>> = BTreeMap::new();
    for r in rows {
        let l = num(r, "layer")? as usize;
        layers
            .entry(l)
            .or_default()
            .entry(r["group"].clone())
            .or_default()
            .push((num(r, "epoch")?, num(r, "z")?));
    }
    Ok(layers
        .into_iter()
        .map(|(l, groups)| {
            let mut p = Plot::new(&format!("layer {} mixture", l + 1), "epoch", "z");
            p.y_range = Some((0.0, 1.0));
            for (g, pts) in groups {
                p = p.with(&g, Style::Line, pts);
            }
            (format!("z_layer{}.svg", l + 1), p.render())
        })
        .collect())
}

/// Writes every figure derivable from the CSVs in `dir`; returns the files written.
pub fn render_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut figs = Vec::new();
    let steps = dir.join("steps.csv");
    if steps.exists() {
        figs.push(("loss.svg".to_string(), steps_plot(&read_csv(&steps)?)?));
    }
    let history = dir.join("history.csv");
    if history.exists() {
        figs.extend(evo_plots(&read_csv(&history)?)?);
    }
    let traj = dir.join("trajectory.csv");
    if traj.exists() {
        figs.extend(trajectory_plots(&read_csv(&traj)?)?);
    }
    let mut written = Vec::new();
    for (name, svg) in figs {
        let p = dir.join(name);
        std::fs::write(&p, svg)?;
        written.push(p);
    }
    Ok(written)
}

/// Rows of `results.csv` formatted as an aligned table.
pub fn results_table(dir: &Path) -> Result<Option<String>> {
    let p = dir.join("results.csv");
    if !p.exists() {
        return Ok(None);
    }
    let rows = read_csv(&p)?;
    let mut s = format!("{:<28} {:>6} {:>9} {:>6} {:>8} {:>8}\n", "model", "seed", "params", "split", "loss", "error");
    for r in rows {
        s.push_str(&format!(
            "{:<28} {:>6} {:>9} {:>6} {:>8.4} {:>8.4}\n",
            r["model"],
            r["seed"],
            r["params"],
            r["split"],
            num(&r, "loss")?,
            num(&r, "error")?
        ));
    }
    Ok(Some(s))
}
