//! Routing records and their export as line-delimited JSON, a per-module
//! winner grid and winner fractions.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::ScoringMode;

pub const TRACE_FILE: &str = "traces.jsonl";
pub const GRID_FILE: &str = "winner_grid.csv";
pub const SUMMARY_FILE: &str = "winner_summary.csv";

/// What one module decided at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub step: usize,
    #[serde(rename = "module")]
    pub module_name: String,
    pub scores: Vec<f64>,
    /// Winning expert indices, best first.
    #[serde(rename = "winner")]
    pub winners: Vec<usize>,
    #[serde(rename = "mode")]
    pub scoring_mode: ScoringMode,
    #[serde(rename = "lr")]
    pub lr_used: Vec<f64>,
}

impl RoutingDecision {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("routing decisions always serialize")
    }
}

/// Winner counts for one module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleSelection {
    pub module: String,
    pub steps: usize,
    /// Fraction of steps each expert was among the winners.
    pub fractions: Vec<f64>,
    /// Fraction of steps the most frequent top winner held the top spot.
    pub commitment: f64,
}

/// Steps seen, wins per expert, top picks keyed by expert.
type Tally = (usize, Vec<usize>, BTreeMap<usize, usize>);

/// Per-module selection statistics, modules in first-seen order.
pub fn selection_stats<'a>(
    records: impl IntoIterator<Item = &'a RoutingDecision>,
) -> Vec<ModuleSelection> {
    let mut order: Vec<String> = Vec::new();
    let mut counts: BTreeMap<String, Tally> = BTreeMap::new();
    for r in records {
        let entry = counts.entry(r.module_name.clone()).or_insert_with(|| {
            order.push(r.module_name.clone());
            (0, Vec::new(), BTreeMap::new())
        });
        entry.0 += 1;
        if entry.1.len() < r.scores.len() {
            entry.1.resize(r.scores.len(), 0);
        }
        for &w in &r.winners {
            if w >= entry.1.len() {
                entry.1.resize(w + 1, 0);
            }
            entry.1[w] += 1;
        }
        if let Some(&top) = r.winners.first() {
            *entry.2.entry(top).or_default() += 1;
        }
    }
    order
        .into_iter()
        .map(|module| {
            let (steps, wins, tops) = &counts[&module];
            let denom = (*steps).max(1) as f64;
            ModuleSelection {
                steps: *steps,
                fractions: wins.iter().map(|&c| c as f64 / denom).collect(),
                commitment: tops.values().copied().max().unwrap_or(0) as f64 / denom,
                module,
            }
        })
        .collect()
}

pub fn read_traces(path: &Path) -> Result<Vec<RoutingDecision>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RoutingDecision = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceExport {
    pub records: usize,
    pub modules: Vec<String>,
    pub steps: Vec<usize>,
    pub selection: Vec<ModuleSelection>,
}

fn winner_cell(winners: &[usize]) -> String {
    winners
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("|")
}

/// Reads `traces.jsonl` from `run_dir` and writes `winner_grid.csv`
/// (modules x traced steps) and `winner_summary.csv`. A missing or empty
/// trace produces header-only files and a warning.
pub fn export_traces(run_dir: &Path) -> Result<TraceExport> {
    let trace_path = run_dir.join(TRACE_FILE);
    let records = if trace_path.exists() {
        read_traces(&trace_path)?
    } else {
        Vec::new()
    };
    if records.is_empty() {
        log::warn!("no routing records in {}", trace_path.display());
    }

    let mut modules: Vec<String> = Vec::new();
    let mut steps: Vec<usize> = Vec::new();
    let mut cells: BTreeMap<(String, usize), String> = BTreeMap::new();
    for r in &records {
        if !modules.contains(&r.module_name) {
            modules.push(r.module_name.clone());
        }
        if steps.last() != Some(&r.step) && !steps.contains(&r.step) {
            steps.push(r.step);
        }
        cells.insert((r.module_name.clone(), r.step), winner_cell(&r.winners));
    }
    steps.sort_unstable();

    let mut grid = String::from("module");
    for s in &steps {
        grid.push_str(&format!(",{s}"));
    }
    grid.push('\n');
    for m in &modules {
        grid.push_str(m);
        for s in &steps {
            grid.push(',');
            if let Some(c) = cells.get(&(m.clone(), *s)) {
                grid.push_str(c);
            }
        }
        grid.push('\n');
    }
    write_file(&run_dir.join(GRID_FILE), grid.as_bytes())?;

    let selection = selection_stats(&records);
    let mut summary = String::from("module,expert,fraction\n");
    for sel in &selection {
        for (e, f) in sel.fractions.iter().enumerate() {
            summary.push_str(&format!("{},{e},{f}\n", sel.module));
        }
    }
    write_file(&run_dir.join(SUMMARY_FILE), summary.as_bytes())?;

    Ok(TraceExport {
        records: records.len(),
        modules,
        steps,
        selection,
    })
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, module: &str, scores: Vec<f64>, winner: usize) -> RoutingDecision {
        RoutingDecision {
            step,
            module_name: module.into(),
            lr_used: vec![1e-3; scores.len()],
            scores,
            winners: vec![winner],
            scoring_mode: ScoringMode::Epd,
        }
    }

    #[test]
    fn json_line_has_expected_fields() {
        let line = rec(3, "layer0", vec![0.5, 0.25], 0).to_json_line();
        let v: serde_json::Value = serde_json::from_str(&line).unwrap();
        for key in ["step", "module", "scores", "winner", "mode"] {
            assert!(v.get(key).is_some(), "missing {key} in {line}");
        }
        assert_eq!(v["mode"], "EPD");
        let back: RoutingDecision = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec(3, "layer0", vec![0.5, 0.25], 0));
    }

    #[test]
    fn export_cardinality_and_grid_shape() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::new();
        for step in 0..10 {
            for (i, m) in ["a", "b", "c"].iter().enumerate() {
                text.push_str(&rec(step, m, vec![0.1, 0.2], (step + i) % 2).to_json_line());
                text.push('\n');
            }
        }
        fs::write(dir.path().join(TRACE_FILE), text).unwrap();
        let out = export_traces(dir.path()).unwrap();
        assert_eq!(out.records, 30);
        assert_eq!(out.modules, vec!["a", "b", "c"]);
        let grid = fs::read_to_string(dir.path().join(GRID_FILE)).unwrap();
        let lines: Vec<&str> = grid.lines().collect();
        assert_eq!(lines.len(), 1 + 3);
        for l in &lines {
            assert_eq!(l.split(',').count(), 1 + 10);
        }
        for sel in &out.selection {
            assert!((sel.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_trace_gives_empty_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = export_traces(dir.path()).unwrap();
        assert_eq!(out.records, 0);
        assert_eq!(
            fs::read_to_string(dir.path().join(GRID_FILE)).unwrap(),
            "module\n"
        );
    }

    #[test]
    fn commitment_counts_modal_winner() {
        let records: Vec<_> = (0..10)
            .map(|s| rec(s, "m", vec![0.0, 0.0], usize::from(s >= 8)))
            .collect();
        let stats = selection_stats(&records);
        assert!((stats[0].commitment - 0.8).abs() < 1e-12);
        assert_eq!(stats[0].fractions, vec![0.8, 0.2]);
    }
}
