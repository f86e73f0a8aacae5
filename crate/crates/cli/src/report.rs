//! Aggregates the CSVs of an existing run directory into comparison tables.
//! Nothing is recomputed; only files listed in the run manifest are read.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::run::{f, median, read_manifest, scalar, RunManifest};
use crate::svg::{line_chart, Series};
use crate::CliError;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn read(path: &Path) -> Result<Self, CliError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let bad = |e: csv::Error| CliError::Config(format!("malformed {}: {e}", path.display()));
        let header = reader.headers().map_err(bad)?.iter().map(str::to_string).collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()).map_err(bad))
            .collect::<Result<_, _>>()?;
        Ok(Table { header, rows })
    }

    fn column(&self, name: &str) -> Result<Vec<f64>, CliError> {
        let i = self
            .header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Config(format!("missing column `{name}`")))?;
        self.rows
            .iter()
            .map(|r| {
                r[i].parse::<f64>()
                    .map_err(|e| CliError::Config(format!("column `{name}`: bad number `{}`: {e}", r[i])))
            })
            .collect()
    }
}

/// Files grouped by arm, in manifest order: `arm -> [paths]`.
fn group(manifest: &RunManifest, suffix: &str) -> Vec<(String, Vec<String>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for file in manifest.files.iter().filter(|f| f.ends_with(suffix)) {
        let arm = file.split('/').next().unwrap_or_default().to_string();
        if !groups.contains_key(&arm) {
            order.push(arm.clone());
        }
        groups.entry(arm).or_default().push(file.clone());
    }
    order
        .into_iter()
        .map(|arm| {
            let files = groups.remove(&arm).unwrap_or_default();
            (arm, files)
        })
        .collect()
}

/// Per-index median across equally indexed columns.
fn pointwise_median(columns: &[Vec<f64>]) -> Vec<f64> {
    let len = columns.iter().map(Vec::len).min().unwrap_or(0);
    (0..len)
        .map(|i| median(&columns.iter().map(|c| c[i]).collect::<Vec<_>>()))
        .collect()
}

struct Writer<'a> {
    dir: &'a Path,
    svg: bool,
    written: Vec<String>,
}

impl Writer<'_> {
    fn csv(&mut self, name: &str, header: &str, rows: &[String]) -> Result<(), CliError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(self.dir.join(name))?);
        writeln!(out, "{header}")?;
        for r in rows {
            writeln!(out, "{r}")?;
        }
        out.flush()?;
        self.written.push(name.to_string());
        Ok(())
    }

    /// Writes `index,<arm>...` with one median column per arm.
    fn curves(&mut self, name: &str, x_label: &str, y_label: &str, curves: &[(String, Vec<f64>)]) -> Result<(), CliError> {
        let len = curves.iter().map(|(_, c)| c.len()).max().unwrap_or(0);
        let header = std::iter::once(x_label.to_string())
            .chain(curves.iter().map(|(a, _)| a.clone()))
            .collect::<Vec<_>>()
            .join(",");
        let rows: Vec<String> = (0..len)
            .map(|i| {
                std::iter::once(i.to_string())
                    .chain(curves.iter().map(|(_, c)| c.get(i).map_or(String::new(), |v| f(*v))))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        self.csv(&format!("{name}.csv"), &header, &rows)?;
        if self.svg {
            let series: Vec<Series> = curves
                .iter()
                .map(|(arm, c)| Series {
                    name: arm.clone(),
                    points: c.iter().enumerate().map(|(i, &v)| (i as f64, v)).collect(),
                })
                .collect();
            std::fs::write(self.dir.join(format!("{name}.svg")), line_chart(name, x_label, y_label, &series))?;
            self.written.push(format!("{name}.svg"));
        }
        Ok(())
    }
}

fn report_gaussian(run: &Path, m: &RunManifest, w: &mut Writer) -> Result<(), CliError> {
    let trajectories = m
        .files
        .iter()
        .filter(|f| f.starts_with("trajectory_seed"))
        .map(|f| Table::read(&run.join(f))?.column("sigma_hat"))
        .collect::<Result<Vec<_>, _>>()?;
    let analytic = Table::read(&run.join("analytic.csv"))?.column("sigma")?;
    let len = trajectories.iter().map(Vec::len).max().unwrap_or(0);
    let mean: Vec<f64> = (0..len)
        .map(|i| {
            let vals: Vec<f64> = trajectories.iter().filter_map(|t| t.get(i).copied()).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    w.curves("sigma", "generation", "sigma", &[("mean".into(), mean.clone()), ("analytic".into(), analytic)])?;
    println!("final_mean_sigma\t{}", scalar(*mean.last().unwrap_or(&f64::NAN)));
    Ok(())
}

fn report_gmm(run: &Path, m: &RunManifest, w: &mut Writer) -> Result<(), CliError> {
    let mut traces = Vec::new();
    let mut kls = Vec::new();
    let mut summary = Vec::new();
    for (arm, files) in group_prefixed(m, "generations_seed") {
        let tables = files.iter().map(|f| Table::read(&run.join(f))).collect::<Result<Vec<_>, _>>()?;
        let trace = tables.iter().map(|t| t.column("trace")).collect::<Result<Vec<_>, _>>()?;
        let kl = tables.iter().map(|t| t.column("sym_kl")).collect::<Result<Vec<_>, _>>()?;
        let ratios: Vec<f64> = trace.iter().map(|t| t[t.len() - 1] / t[0]).collect();
        let below = ratios.iter().filter(|&&r| r < 0.2).count();
        summary.push(format!("{arm},{},{},{below}", ratios.len(), f(median(&ratios))));
        println!("{arm}\t{}", scalar(median(&ratios)));
        traces.push((arm.clone(), pointwise_median(&trace)));
        kls.push((arm, pointwise_median(&kl)));
    }
    w.curves("trace", "generation", "median total trace", &traces)?;
    w.curves("sym_kl", "generation", "median symmetric KL", &kls)?;
    w.csv("trace_summary.csv", "arm,seeds,median_trace_ratio,seeds_below_0.2", &summary)
}

/// Like [`group`], for files whose name (after the arm directory) starts with `prefix`.
fn group_prefixed(m: &RunManifest, prefix: &str) -> Vec<(String, Vec<String>)> {
    group(m, ".csv")
        .into_iter()
        .map(|(arm, files)| {
            let files = files
                .into_iter()
                .filter(|f| f.rsplit('/').next().is_some_and(|name| name.starts_with(prefix)))
                .collect::<Vec<_>>();
            (arm, files)
        })
        .filter(|(_, files)| !files.is_empty())
        .collect()
}

fn report_lm(run: &Path, m: &RunManifest, w: &mut Writer) -> Result<(), CliError> {
    let tau: f64 = m
        .config
        .get("lm.tau")
        .and_then(|t| t.parse().ok())
        .unwrap_or(collapse_core::metrics::DEFAULT_FAILURE_THRESHOLD);
    let mut kr0 = Vec::new();
    let mut krt = Vec::new();
    let mut kl = Vec::new();
    let mut conf = Vec::new();
    let mut rows = Vec::new();
    for (arm, files) in group(m, "/stages.csv") {
        let tables = files.iter().map(|f| Table::read(&run.join(f))).collect::<Result<Vec<_>, _>>()?;
        let scores = tables.iter().map(|t| t.column("kr_split0")).collect::<Result<Vec<_>, _>>()?;
        let totals = tables.iter().map(|t| t.column("kr_total")).collect::<Result<Vec<_>, _>>()?;
        let kls = tables.iter().map(|t| t.column("kl_unigram")).collect::<Result<Vec<_>, _>>()?;
        let selfc = tables.iter().map(|t| t.column("conf_self")).collect::<Result<Vec<_>, _>>()?;
        let held = tables.iter().map(|t| t.column("conf_heldout")).collect::<Result<Vec<_>, _>>()?;
        let ttf: Vec<f64> = scores
            .iter()
            .map(|s| collapse_core::metrics::time_to_failure(s, tau).map_or(s.len() as f64, |t| t as f64))
            .collect();
        let last = |cols: &[Vec<f64>]| median(&cols.iter().map(|c| c[c.len() - 1]).collect::<Vec<_>>());
        let first = |cols: &[Vec<f64>]| median(&cols.iter().map(|c| c[0]).collect::<Vec<_>>());
        rows.push(format!(
            "{arm},{},{},{},{},{},{}",
            files.len(),
            f(median(&ttf)),
            f(last(&kls)),
            f(last(&totals)),
            f(first(&selfc)),
            f(first(&held))
        ));
        println!("{arm}\t{}\t{}\t{}", scalar(median(&ttf)), scalar(last(&kls)), scalar(last(&totals)));
        kr0.push((arm.clone(), pointwise_median(&scores)));
        krt.push((arm.clone(), pointwise_median(&totals)));
        kl.push((arm.clone(), pointwise_median(&kls)));
        conf.push((format!("{arm} self"), pointwise_median(&selfc)));
        conf.push((format!("{arm} held-out"), pointwise_median(&held)));
    }
    w.curves("kr_split0", "stage", "median KR score, split 0", &kr0)?;
    w.curves("kr_total", "stage", "median KR score, all splits", &krt)?;
    w.curves("kl_unigram", "stage", "median unigram KL", &kl)?;
    w.curves("confidence", "stage", "median mean confidence", &conf)?;
    w.csv(
        "comparison.csv",
        "arm,seeds,median_time_to_failure,median_final_kl_unigram,median_final_kr_total,median_conf_self_stage0,median_conf_heldout_stage0",
        &rows,
    )
}

/// Writes the aggregated tables under `<run>/report/` and returns their names.
pub fn run(run: &Path, svg: bool) -> Result<Vec<String>, CliError> {
    let manifest = read_manifest(run)?;
    if manifest.status != "complete" {
        return Err(CliError::Config(format!("run {} did not complete", run.display())));
    }
    let dir = run.join("report");
    std::fs::create_dir_all(&dir)?;
    let mut w = Writer {
        dir: &dir,
        svg,
        written: Vec::new(),
    };
    match manifest.subcommand.as_str() {
        "gaussian" => report_gaussian(run, &manifest, &mut w)?,
        "gmm" => report_gmm(run, &manifest, &mut w)?,
        "lm" => report_lm(run, &manifest, &mut w)?,
        other => return Err(CliError::Config(format!("nothing to report for `{other}` runs"))),
    }
    Ok(w.written)
}
