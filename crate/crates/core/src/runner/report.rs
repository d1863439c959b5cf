use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dilation::StepGrowth;
use crate::error::{Error, Result};
use crate::eval::ApRow;

use super::train::RunRecord;

/// Mean and sample standard deviation of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, std, n })
    }

    fn cell(stat: Option<Stat>) -> String {
        match stat {
            Some(s) if s.n > 1 => format!("{:.4}±{:.4}", s.mean, s.std),
            Some(s) => format!("{:.4}", s.mean),
            None => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub step: usize,
    pub seeds: Vec<u64>,
    pub map50: Stat,
    pub map_range: Stat,
    pub map50_old: Option<Stat>,
    pub map50_new: Stat,
    pub forgetting: Option<Stat>,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrowthRow {
    pub method: String,
    pub step: usize,
    pub param_count: usize,
    pub added: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub step_sizes: Vec<usize>,
    pub methods: Vec<String>,
    pub summary: Vec<SummaryRow>,
    pub growth: Vec<GrowthRow>,
    /// Counted growth of the dilatable model.
    pub dilation_growth: Vec<StepGrowth>,
}

/// Aggregates runs of one protocol into per-method, per-step tables.
/// Methods keep their order of first appearance.
pub fn emit_report(records: &[RunRecord]) -> Result<Report> {
    let first = records.first().ok_or_else(|| Error::usage("no run records to report"))?;
    if records.iter().any(|r| r.step_sizes != first.step_sizes) {
        return Err(Error::usage("run records come from different protocols"));
    }
    let mut methods: Vec<String> = Vec::new();
    let mut by_method: BTreeMap<&str, Vec<&RunRecord>> = BTreeMap::new();
    for r in records {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        by_method.entry(&r.method).or_default().push(r);
    }
    let mut summary = Vec::new();
    let mut growth = Vec::new();
    for m in &methods {
        let runs = &by_method[m.as_str()];
        for step in 0..first.step_sizes.len() {
            let at: Vec<_> = runs.iter().filter_map(|r| r.steps.get(step)).collect();
            if at.is_empty() {
                continue;
            }
            let collect = |f: &dyn Fn(&super::StepRecord) -> Option<f64>| at.iter().filter_map(|s| f(s)).collect::<Vec<_>>();
            summary.push(SummaryRow {
                method: m.clone(),
                step,
                seeds: runs.iter().filter(|r| r.steps.len() > step).map(|r| r.seed).collect(),
                map50: Stat::of(&collect(&|s| Some(s.map50_seen))).expect("non-empty"),
                map_range: Stat::of(&collect(&|s| Some(s.eval.map_range))).expect("non-empty"),
                map50_old: Stat::of(&collect(&|s| s.map50_old)),
                map50_new: Stat::of(&collect(&|s| Some(s.map50_new))).expect("non-empty"),
                forgetting: Stat::of(&collect(&|s| s.forgetting)),
                param_count: at[0].param_count,
            });
            let prev = if step == 0 { at[0].param_count } else { runs[0].steps[step - 1].param_count };
            growth.push(GrowthRow {
                method: m.clone(),
                step,
                param_count: at[0].param_count,
                added: at[0].param_count - if step == 0 { at[0].param_count } else { prev },
            });
        }
    }
    Ok(Report {
        step_sizes: first.step_sizes.clone(),
        methods,
        summary,
        growth,
        dilation_growth: first.param_growth.clone(),
    })
}

fn pivot(report: &Report, f: impl Fn(&SummaryRow) -> Option<Stat>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["method".to_string()];
    header.extend((0..report.step_sizes.len()).map(|s| format!("step{s}")));
    w.write_record(&header).map_err(csv_err)?;
    for m in &report.methods {
        let mut row = vec![m.clone()];
        for s in 0..report.step_sizes.len() {
            let cell = report.summary.iter().find(|r| &r.method == m && r.step == s).and_then(&f);
            row.push(Stat::cell(cell));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

fn rows_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

#[derive(Serialize)]
struct FlatSummary<'a> {
    method: &'a str,
    step: usize,
    seeds: usize,
    map50_mean: f64,
    map50_std: f64,
    map_range_mean: f64,
    map_range_std: f64,
    map50_old_mean: Option<f64>,
    map50_new_mean: f64,
    forgetting_mean: Option<f64>,
    param_count: usize,
}

/// Writes `report.json`, the pivoted `map50.csv`, `map_range.csv` and
/// `forgetting.csv`, the long-form `summary.csv`, `growth.csv`, and
/// per-class AP rows of every record to `ap.csv`.
pub fn write_report(report: &Report, records: &[RunRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join("map50.csv"), pivot(report, |r| Some(r.map50))?)?;
    fs::write(dir.join("map_range.csv"), pivot(report, |r| Some(r.map_range))?)?;
    fs::write(dir.join("forgetting.csv"), pivot(report, |r| r.forgetting)?)?;
    let flat: Vec<FlatSummary> = report
        .summary
        .iter()
        .map(|r| FlatSummary {
            method: &r.method,
            step: r.step,
            seeds: r.seeds.len(),
            map50_mean: r.map50.mean,
            map50_std: r.map50.std,
            map_range_mean: r.map_range.mean,
            map_range_std: r.map_range.std,
            map50_old_mean: r.map50_old.map(|s| s.mean),
            map50_new_mean: r.map50_new.mean,
            forgetting_mean: r.forgetting.map(|s| s.mean),
            param_count: r.param_count,
        })
        .collect();
    fs::write(dir.join("summary.csv"), rows_csv(&flat)?)?;
    fs::write(dir.join("growth.csv"), rows_csv(&report.growth)?)?;
    let ap: Vec<ApRow> = records
        .iter()
        .flat_map(|r| r.steps.iter().flat_map(move |s| s.eval.rows(s.step, &format!("{}@seed{}", r.method, r.seed))))
        .collect();
    fs::write(dir.join("ap.csv"), rows_csv(&ap)?)?;
    Ok(())
}
