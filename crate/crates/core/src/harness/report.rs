use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::adapters::{Family, Method};
use crate::error::{Error, Result};
use crate::harness::run::RunReport;
use crate::model::NormKind;

pub const CSV_COLUMNS: [&str; 12] = [
    "scenario",
    "method",
    "family",
    "seed",
    "norm",
    "accuracy",
    "accuracy_true",
    "mean_entropy",
    "similarity",
    "samples",
    "failed",
    "error",
];

fn norm_name(k: NormKind) -> &'static str {
    match k {
        NormKind::BatchNorm => "batchnorm",
        NormKind::LayerNorm => "layernorm",
        NormKind::Iabn => "iabn",
        NormKind::Rbn => "rbn",
    }
}

fn parse_norm(s: &str) -> Result<NormKind> {
    Ok(match s {
        "batchnorm" => NormKind::BatchNorm,
        "layernorm" => NormKind::LayerNorm,
        "iabn" => NormKind::Iabn,
        "rbn" => NormKind::Rbn,
        other => return Err(Error::invalid(format!("unknown norm {other:?}"))),
    })
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Baseline => "baseline",
        Family::EntropyMinimization => "entropy",
        Family::FeatureAlignment => "feature-alignment",
        Family::Prototype => "prototype",
        Family::Continual => "continual",
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per report in the order given, fixed columns. Timing is left
/// out so reruns produce identical bytes.
pub fn write_reports_csv<W: Write>(reports: &[RunReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS)?;
    for r in reports {
        w.write_record([
            r.scenario.clone(),
            r.method.to_string(),
            family_name(r.method.family()).to_owned(),
            r.seed.to_string(),
            norm_name(r.norm).to_owned(),
            opt(r.accuracy),
            opt(r.accuracy_true),
            opt(r.mean_entropy),
            r.similarity.to_string(),
            r.samples.to_string(),
            r.failed.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads reports back from [`write_reports_csv`] output. Fields the CSV
/// does not carry (timing, prediction histogram, batch count) are empty.
pub fn read_reports_csv<R: Read>(input: R) -> Result<Vec<RunReport>> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
    if header != CSV_COLUMNS {
        return Err(Error::invalid(format!(
            "report columns {header:?} do not match {CSV_COLUMNS:?}"
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::invalid(format!("row {}: bad {what}", line + 1));
        let float = |s: &str, what: &str| -> Result<Option<f64>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|_| bad(what))
            }
        };
        let method: Method = rec[1].parse()?;
        out.push(RunReport {
            scenario: rec[0].to_owned(),
            method,
            seed: rec[3].parse().map_err(|_| bad("seed"))?,
            norm: parse_norm(&rec[4])?,
            accuracy: float(&rec[5], "accuracy")?,
            accuracy_true: float(&rec[6], "accuracy_true")?,
            mean_entropy: float(&rec[7], "mean_entropy")?,
            similarity: float(&rec[8], "similarity")?.ok_or_else(|| bad("similarity"))?,
            samples: rec[9].parse().map_err(|_| bad("samples"))?,
            batches: 0,
            prediction_counts: Vec::new(),
            ms_per_batch: None,
            failed: rec[10].parse().map_err(|_| bad("failed"))?,
            error: (!rec[11].is_empty()).then(|| rec[11].to_owned()),
        });
    }
    Ok(out)
}

/// Mean and spread of one method on one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub method: Method,
    pub family: Family,
    pub runs: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation over seeds; 0 for a single seed.
    pub sd: Option<f64>,
    pub mean_true: Option<f64>,
    /// `mean − baseline mean`, when the row has a baseline.
    pub delta: Option<f64>,
    pub best: bool,
    pub ms_per_batch: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub similarity: f64,
    pub cells: Vec<Cell>,
}

impl SummaryRow {
    pub fn cell(&self, m: Method) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == m)
    }

    pub fn best(&self) -> Option<Method> {
        self.cells.iter().find(|c| c.best).map(|c| c.method)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// Per-method mean latency divided by the baseline's.
    pub latency_ratio: BTreeMap<Method, f64>,
    pub failed_runs: usize,
}

impl Summary {
    pub fn row(&self, scenario: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.scenario == scenario)
    }
}

fn mean_sd(mut values: Vec<f64>) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Some((mean, sd))
}

/// Per (scenario, method): mean and sd of accuracy over seeds, delta to the
/// baseline, the best method per scenario, and latency ratios. Insensitive
/// to the order of `reports`.
pub fn aggregate(reports: &[RunReport]) -> Result<Summary> {
    if reports.is_empty() {
        return Err(Error::invalid("nothing to aggregate"));
    }
    let mut groups: BTreeMap<&str, BTreeMap<Method, Vec<&RunReport>>> = BTreeMap::new();
    let mut keys = BTreeSet::new();
    for r in reports {
        if r.scenario.is_empty() {
            return Err(Error::invalid("report without a scenario id"));
        }
        if !keys.insert((r.scenario.as_str(), r.method, r.seed)) {
            return Err(Error::invalid(format!(
                "duplicate report for {} / {} / seed {}",
                r.scenario, r.method, r.seed
            )));
        }
        groups.entry(&r.scenario).or_default().entry(r.method).or_default().push(r);
    }

    let mut latency: BTreeMap<Method, Vec<f64>> = BTreeMap::new();
    let mut rows = Vec::with_capacity(groups.len());
    for (scenario, methods) in groups {
        let mut sims: BTreeMap<u64, f64> = BTreeMap::new();
        let mut cells = Vec::with_capacity(methods.len());
        for (method, runs) in methods {
            for r in &runs {
                sims.entry(r.seed).or_insert(r.similarity);
                if let Some(ms) = r.ms_per_batch {
                    latency.entry(method).or_default().push(ms);
                }
            }
            let ok: Vec<&&RunReport> = runs.iter().filter(|r| !r.failed).collect();
            let acc = mean_sd(ok.iter().filter_map(|r| r.accuracy).collect());
            let acc_true = mean_sd(ok.iter().filter_map(|r| r.accuracy_true).collect());
            let ms = mean_sd(ok.iter().filter_map(|r| r.ms_per_batch).collect());
            cells.push(Cell {
                method,
                family: method.family(),
                runs: runs.len(),
                failed: runs.len() - ok.len(),
                mean: acc.map(|a| a.0),
                sd: acc.map(|a| a.1),
                mean_true: acc_true.map(|a| a.0),
                delta: None,
                best: false,
                ms_per_batch: ms.map(|m| m.0),
            });
        }
        let base = cells
            .iter()
            .find(|c| c.method == Method::Baseline)
            .and_then(|c| c.mean);
        if let Some(b) = base {
            for c in &mut cells {
                c.delta = c.mean.map(|m| m - b);
            }
        }
        // ties go to the earlier method
        let best = cells
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.mean.map(|m| (i, m)))
            .fold(None, |acc: Option<(usize, f64)>, (i, m)| match acc {
                Some((_, bm)) if bm >= m => acc,
                _ => Some((i, m)),
            });
        if let Some((i, _)) = best {
            cells[i].best = true;
        }
        let similarity = sims.values().sum::<f64>() / sims.len() as f64;
        rows.push(SummaryRow {
            scenario: scenario.to_owned(),
            similarity,
            cells,
        });
    }

    let means: BTreeMap<Method, f64> = latency
        .into_iter()
        .filter_map(|(m, v)| mean_sd(v).map(|(mean, _)| (m, mean)))
        .collect();
    let latency_ratio = match means.get(&Method::Baseline) {
        Some(&b) if b > 0.0 => means.iter().map(|(&m, &v)| (m, v / b)).collect(),
        _ => BTreeMap::new(),
    };
    Ok(Summary {
        rows,
        latency_ratio,
        failed_runs: reports.iter().filter(|r| r.failed).count(),
    })
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum TableStyle {
    Markdown,
    Text,
}

fn methods_by_family(summary: &Summary) -> Vec<Method> {
    let mut seen: BTreeSet<Method> = BTreeSet::new();
    for r in &summary.rows {
        seen.extend(r.cells.iter().map(|c| c.method));
    }
    let mut v: Vec<Method> = seen.into_iter().collect();
    v.sort_by_key(|m| (m.family(), *m));
    v
}

/// Scenario rows × method columns (grouped by family) with accuracy in
/// percent, the baseline delta in parentheses and the best cell starred.
pub fn render_table(summary: &Summary, style: TableStyle) -> String {
    let methods = methods_by_family(summary);
    let mut header = vec!["scenario".to_owned(), "S".to_owned()];
    header.extend(methods.iter().map(|m| m.to_string()));
    let mut family_row = vec![String::new(), String::new()];
    family_row.extend(methods.iter().map(|m| family_name(m.family()).to_owned()));
    let mut body: Vec<Vec<String>> = Vec::new();
    for r in &summary.rows {
        let mut line = vec![r.scenario.clone(), format!("{:.4}", r.similarity)];
        for &m in &methods {
            line.push(match r.cell(m) {
                None => "-".to_owned(),
                Some(c) => match c.mean {
                    None => "failed".to_owned(),
                    Some(mean) => {
                        let mut s = format!("{:.2}", 100.0 * mean);
                        if let Some(d) = c.delta {
                            let _ = write!(s, " ({:+.2})", 100.0 * d);
                        }
                        if c.best {
                            s.push('*');
                        }
                        s
                    }
                },
            });
        }
        body.push(line);
    }

    let mut out = String::new();
    match style {
        TableStyle::Markdown => {
            let _ = writeln!(out, "| {} |", family_row.join(" | "));
            let _ = writeln!(out, "|{}", "---|".repeat(header.len()));
            let _ = writeln!(out, "| {} |", header.join(" | "));
            for line in &body {
                let _ = writeln!(out, "| {} |", line.join(" | "));
            }
        }
        TableStyle::Text => {
            let all: Vec<&Vec<String>> = std::iter::once(&family_row)
                .chain(std::iter::once(&header))
                .chain(body.iter())
                .collect();
            let widths: Vec<usize> = (0..header.len())
                .map(|j| all.iter().map(|l| l[j].chars().count()).max().unwrap_or(0))
                .collect();
            for line in all {
                let cells: Vec<String> = line
                    .iter()
                    .zip(&widths)
                    .map(|(c, w)| format!("{c:<w$}"))
                    .collect();
                let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            }
        }
    }
    if !summary.latency_ratio.is_empty() {
        let parts: Vec<String> = summary
            .latency_ratio
            .iter()
            .map(|(m, r)| format!("{m} {r:.2}x"))
            .collect();
        let _ = writeln!(out, "\nlatency vs baseline: {}", parts.join(", "));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(scenario: &str, method: Method, seed: u64, acc: f64) -> RunReport {
        RunReport {
            scenario: scenario.into(),
            method,
            seed,
            norm: NormKind::LayerNorm,
            accuracy: Some(acc),
            accuracy_true: Some(acc),
            mean_entropy: Some(0.5),
            similarity: 0.9,
            samples: 10,
            batches: 1,
            prediction_counts: vec![5, 5],
            ms_per_batch: None,
            failed: false,
            error: None,
        }
    }

    #[test]
    fn single_report_has_zero_spread() {
        let s = aggregate(&[report("a", Method::Tent, 0, 0.7)]).unwrap();
        let c = s.rows[0].cell(Method::Tent).unwrap();
        assert_eq!(c.mean, Some(0.7));
        assert_eq!(c.sd, Some(0.0));
        assert_eq!(c.delta, None);
    }

    #[test]
    fn mean_over_three_seeds_and_deltas() {
        let (a, b, c) = (0.61, 0.73, 0.58);
        let rs = vec![
            report("x", Method::Baseline, 0, a),
            report("x", Method::Baseline, 1, b),
            report("x", Method::Baseline, 2, c),
            report("x", Method::Shot, 0, 0.9),
        ];
        let s = aggregate(&rs).unwrap();
        let base = s.rows[0].cell(Method::Baseline).unwrap();
        let mut v = [a, b, c];
        v.sort_by(f64::total_cmp);
        assert_eq!(base.mean, Some((v[0] + v[1] + v[2]) / 3.0));
        assert_eq!(base.delta, Some(0.0));
        assert_eq!(s.rows[0].best(), Some(Method::Shot));
    }

    #[test]
    fn aggregate_ignores_input_order() {
        let mut rs = Vec::new();
        for (i, m) in Method::ALL.iter().enumerate() {
            for seed in 0..3 {
                rs.push(report("s1", *m, seed, 0.1 * i as f64 + 0.01 * seed as f64));
                rs.push(report("s2", *m, seed, 0.5 - 0.03 * i as f64 + 0.07 * seed as f64));
            }
        }
        let a = aggregate(&rs).unwrap();
        rs.reverse();
        rs.swap(3, 11);
        assert_eq!(aggregate(&rs).unwrap(), a);
    }

    #[test]
    fn duplicates_and_missing_ids_are_errors() {
        let r = report("a", Method::Tent, 0, 0.5);
        assert!(aggregate(&[r.clone(), r.clone()]).is_err());
        assert!(aggregate(&[report("", Method::Tent, 0, 0.5)]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn csv_round_trip_and_failed_runs() {
        let mut failed = report("a", Method::Cotta, 1, 0.0);
        failed.accuracy = None;
        failed.accuracy_true = None;
        failed.mean_entropy = None;
        failed.failed = true;
        failed.error = Some("diverged, at step 3".into());
        let rs = vec![report("a", Method::Baseline, 1, 0.25), failed];
        let mut buf = Vec::new();
        write_reports_csv(&rs, &mut buf).unwrap();
        let back = read_reports_csv(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].accuracy, Some(0.25));
        assert!(back[1].failed && back[1].accuracy.is_none());
        assert_eq!(back[1].error.as_deref(), Some("diverged, at step 3"));
        let s = aggregate(&back).unwrap();
        assert_eq!(s.failed_runs, 1);
        assert_eq!(s.rows[0].cell(Method::Cotta).unwrap().mean, None);
    }

    #[test]
    fn foreign_csv_is_rejected() {
        assert!(read_reports_csv("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn table_has_one_row_per_scenario() {
        let s = aggregate(&[report("only", Method::Baseline, 0, 0.5), report("only", Method::T3a, 0, 0.6)]).unwrap();
        for style in [TableStyle::Markdown, TableStyle::Text] {
            let t = render_table(&s, style);
            assert_eq!(t.lines().filter(|l| l.contains("only")).count(), 1);
            assert!(t.contains("+0.00"));
            assert!(t.contains("prototype"));
        }
    }
}
