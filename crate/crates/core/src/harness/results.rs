//! Result rows and their on-disk forms: a delimiter-separated table plus a
//! structured summary grouped the way the comparison grids are read.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategies::PoolSide;

/// One evaluation block's aggregate for a single pathway/pool/seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pathway: String,
    pub pool: PoolSide,
    pub mean_delta_r: f64,
    pub stderr: f64,
    pub games: usize,
    pub seed: u64,
}

/// Sample mean and standard error of per-game score differences.
pub fn summarize(deltas: &[f64]) -> (f64, f64) {
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let stderr = if deltas.len() > 1 {
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    (mean, stderr)
}

pub const CSV_HEADER: &str = "pathway,pool,mean_delta_r,stderr,games,seed";

pub fn to_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.pathway, r.pool, r.mean_delta_r, r.stderr, r.games, r.seed
        ));
    }
    out
}

pub fn from_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(Error::Parse(format!(
                "unexpected results header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(Error::Parse(format!("results line {}: expected 6 columns", i + 2)));
        }
        let pool = match f[1] {
            "old" => PoolSide::Old,
            "new" => PoolSide::New,
            other => return Err(Error::Parse(format!("results line {}: bad pool '{other}'", i + 2))),
        };
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Parse(format!("results line {}: bad number '{s}'", i + 2)))
        };
        rows.push(ResultRow {
            pathway: f[0].to_string(),
            pool,
            mean_delta_r: num(f[2])?,
            stderr: num(f[3])?,
            games: f[4]
                .parse()
                .map_err(|_| Error::Parse(format!("results line {}: bad games count", i + 2)))?,
            seed: f[5]
                .parse()
                .map_err(|_| Error::Parse(format!("results line {}: bad seed", i + 2)))?,
        });
    }
    Ok(rows)
}

pub fn write_csv(rows: &[ResultRow], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(rows))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<ResultRow>> {
    from_csv(&std::fs::read_to_string(path)?)
}

/// Pathway-by-pool summary: per cell, the per-seed means and their average.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SummaryCell {
    pub mean_delta_r: f64,
    pub per_seed: BTreeMap<u64, f64>,
}

pub type Summary = BTreeMap<String, BTreeMap<String, SummaryCell>>;

pub fn summarize_grid(rows: &[ResultRow]) -> Summary {
    let mut out: Summary = BTreeMap::new();
    for r in rows {
        let cell = out
            .entry(r.pathway.clone())
            .or_default()
            .entry(r.pool.to_string())
            .or_insert_with(|| SummaryCell {
                mean_delta_r: 0.0,
                per_seed: BTreeMap::new(),
            });
        cell.per_seed.insert(r.seed, r.mean_delta_r);
    }
    for pools in out.values_mut() {
        for cell in pools.values_mut() {
            cell.mean_delta_r =
                cell.per_seed.values().sum::<f64>() / cell.per_seed.len() as f64;
        }
    }
    out
}

pub fn write_summary_json(rows: &[ResultRow], path: &Path) -> Result<()> {
    let summary = summarize_grid(rows);
    let text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Parse(format!("summary serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Fixed-width text table of the summary, pathways down, pools across.
pub fn format_table(rows: &[ResultRow]) -> String {
    let summary = summarize_grid(rows);
    let mut out = String::new();
    out.push_str(&format!("{:<14} {:>12} {:>12}\n", "pathway", "old", "new"));
    for (pathway, pools) in &summary {
        let cell = |side: &str| {
            pools
                .get(side)
                .map(|c| format!("{:+.3}", c.mean_delta_r))
                .unwrap_or_else(|| "-".into())
        };
        out.push_str(&format!(
            "{:<14} {:>12} {:>12}\n",
            pathway,
            cell("old"),
            cell("new")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_rows() -> Vec<ResultRow> {
        vec![
            ResultRow {
                pathway: "he-ad-pg".into(),
                pool: PoolSide::Old,
                mean_delta_r: 1.199,
                stderr: 0.05,
                games: 200,
                seed: 1,
            },
            ResultRow {
                pathway: "he-ad-pg".into(),
                pool: PoolSide::New,
                mean_delta_r: -0.25,
                stderr: 0.125,
                games: 200,
                seed: 1,
            },
            ResultRow {
                pathway: "q-learning".into(),
                pool: PoolSide::Old,
                mean_delta_r: -1.0,
                stderr: 0.0125,
                games: 100,
                seed: 2,
            },
        ]
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let rows = sample_rows();
        let text = to_csv(&rows);
        let back = from_csv(&text).unwrap();
        assert_eq!(rows, back);
        // header carries the fixed column set
        assert!(text.starts_with("pathway,pool,mean_delta_r,stderr,games,seed\n"));
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(from_csv("nope\n").is_err());
        assert!(from_csv(&format!("{CSV_HEADER}\na,old,1,2\n")).is_err());
        assert!(from_csv(&format!("{CSV_HEADER}\na,mid,1,0,10,1\n")).is_err());
    }

    #[test]
    fn summary_averages_seeds() {
        let rows = vec![
            ResultRow {
                pathway: "pg".into(),
                pool: PoolSide::Old,
                mean_delta_r: 1.0,
                stderr: 0.0,
                games: 10,
                seed: 1,
            },
            ResultRow {
                pathway: "pg".into(),
                pool: PoolSide::Old,
                mean_delta_r: 2.0,
                stderr: 0.0,
                games: 10,
                seed: 2,
            },
        ];
        let s = summarize_grid(&rows);
        assert_eq!(s["pg"]["old"].mean_delta_r, 1.5);
        assert_eq!(s["pg"]["old"].per_seed.len(), 2);
    }

    #[test]
    fn mean_and_stderr() {
        let (m, se) = summarize(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((se - 1.0).abs() < 1e-12);
        let (m, se) = summarize(&[5.0]);
        assert_eq!((m, se), (5.0, 0.0));
    }
}
