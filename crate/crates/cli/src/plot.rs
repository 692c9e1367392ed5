//! Long-format (tidy) copies of the wide reports, one value per row.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::layout::{finish, Run};
use crate::{CliResult, Common, Failure};

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> CliResult<Table> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| piaug_core::Error::Data(format!("{} is empty", path.display())))?
        .split(',')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for l in lines {
        let row: Vec<String> = l.split(',').map(str::to_string).collect();
        if row.len() != header.len() {
            return Err(piaug_core::Error::Data(format!("{}: ragged row", path.display())).into());
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Files in `dir` named `prefix*suffix`, sorted, with the wildcard part.
fn matching(dir: &Path, prefix: &str, suffix: &str) -> CliResult<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for e in std::fs::read_dir(dir)? {
        let p = e?.path();
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if let Some(mid) = name.strip_prefix(prefix).and_then(|r| r.strip_suffix(suffix)) {
            out.push((mid.to_string(), p));
        }
    }
    out.sort();
    Ok(out)
}

/// Writes `source` (when given), the id columns, then `metric,value` for
/// every remaining column.
fn melt<W: Write>(w: &mut W, sources: &[(String, PathBuf)], source_col: Option<&str>, ids: &[&str]) -> CliResult<usize> {
    let mut n = 0;
    let mut head: Vec<&str> = source_col.into_iter().collect();
    head.extend_from_slice(ids);
    head.extend(["metric", "value"]);
    writeln!(w, "{}", head.join(","))?;
    for (source, path) in sources {
        let t = read_table(path)?;
        let idx: Vec<usize> = ids
            .iter()
            .map(|c| {
                t.header.iter().position(|h| h == c).ok_or_else(|| {
                    Failure::Core(piaug_core::Error::Data(format!("{}: missing column {c}", path.display())))
                })
            })
            .collect::<CliResult<_>>()?;
        for row in &t.rows {
            for (j, metric) in t.header.iter().enumerate().filter(|(j, _)| !idx.contains(j)) {
                let mut f: Vec<&str> = source_col.map(|_| source.as_str()).into_iter().collect();
                f.extend(idx.iter().map(|&i| row[i].as_str()));
                f.push(metric);
                f.push(&row[j]);
                writeln!(w, "{}", f.join(","))?;
                n += 1;
            }
        }
    }
    Ok(n)
}

pub fn plot_data(c: &Common) -> CliResult<()> {
    let run = Run::open(c)?;
    let models = run.root.join("models");
    let eval = run.root.join("eval");
    let jobs: Vec<(&str, Vec<(String, PathBuf)>, Option<&str>, Vec<&str>)> = vec![
        ("loss_long.csv", matching(&models, "", "_loss.csv")?, Some("model"), vec!["epoch"]),
        ("speed_hist_long.csv", matching(&models, "piaug_speed_hist", ".csv")?, None, vec!["bin_lo", "bin_hi"]),
        ("heatmap_long.csv", matching(&eval, "heatmap_", ".csv")?, Some("model"), vec!["v_bin", "theta_bin", "psi_bin"]),
        ("domain_shift_long.csv", matching(&eval, "domain_shift", ".csv")?, None, vec!["model", "v_bin"]),
        ("nav_traces_long.csv", matching(&run.root.join("nav"), "", ".csv")?, Some("run"), vec!["tick"]),
        ("bench_long.csv", matching(&run.root.join("bench"), "bench", ".csv")?, None, vec!["method", "samples"]),
    ];
    if jobs.iter().all(|j| j.1.is_empty()) {
        return Err(piaug_core::Error::Data(format!("no reports under {}", run.root.display())).into());
    }
    let dir = run.dir("plots")?;
    for (file, sources, source_col, ids) in jobs {
        if sources.is_empty() {
            continue;
        }
        let mut w = run.report(&dir.join(file))?;
        let n = melt(&mut w, &sources, source_col, &ids)?;
        finish(w)?;
        log::info!("{file}: {n} rows");
    }
    Ok(())
}
