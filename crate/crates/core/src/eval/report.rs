//! Benchmark report assembly and rendering (JSON, text table, SVG chart).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{avg_rank, mean_std, Direction, RankSummary};
use super::protocol::{ProtocolConfig, ProtocolResult};
use super::runtime::RuntimeRecord;
use crate::error::{Error, Result};

pub const MAE_NORMALIZATION: &str = "out-of-sample MAE on masked test entries; each column divided by its train-split standard deviation";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub scores: Vec<Option<f64>>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub failed_masks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub protocol: ProtocolConfig,
    pub metric: String,
    pub datasets: Vec<String>,
    pub methods: Vec<String>,
    /// `cells[method][dataset]`.
    pub cells: Vec<Vec<Cell>>,
    /// Mean and std over masks of the per-mask average across datasets.
    pub avg: Vec<Option<MeanStd>>,
    pub avg_rank: RankSummary,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub runtime: Vec<RuntimeRecord>,
    #[serde(default)]
    pub flags: Vec<String>,
}

impl BenchmarkReport {
    /// Arranges protocol results into a method × dataset table. Every
    /// (method, dataset) pair must appear exactly once.
    pub fn assemble(protocol: &ProtocolConfig, results: &[ProtocolResult]) -> Result<Self> {
        let mut methods: Vec<String> = Vec::new();
        let mut datasets: Vec<String> = Vec::new();
        for r in results {
            if !methods.contains(&r.method) {
                methods.push(r.method.clone());
            }
            if !datasets.contains(&r.dataset) {
                datasets.push(r.dataset.clone());
            }
        }
        let mut flags = Vec::new();
        let mut cells = Vec::with_capacity(methods.len());
        for m in &methods {
            let mut row = Vec::with_capacity(datasets.len());
            for d in &datasets {
                let found: Vec<&ProtocolResult> = results.iter().filter(|r| &r.method == m && &r.dataset == d).collect();
                if found.len() != 1 {
                    return Err(Error::Contract(format!("{} results for method `{m}` on `{d}`", found.len())));
                }
                let r = found[0];
                let scores = r.scores();
                let failed = scores.iter().filter(|s| s.is_none()).count();
                if failed > 0 {
                    flags.push(format!("{m} failed on {failed} mask(s) of {d}"));
                }
                for run in &r.runs {
                    flags.extend(run.flags.iter().map(|f| format!("{m} on {d}: {f}")));
                }
                let summary = r.summary();
                row.push(Cell {
                    scores,
                    mean: summary.map(|s| s.0),
                    std: summary.map(|s| s.1),
                    failed_masks: failed,
                });
            }
            cells.push(row);
        }
        let avg = cells
            .iter()
            .map(|row| {
                let k = row.iter().map(|c| c.scores.len()).min().unwrap_or(0);
                let per_mask: Vec<f64> = (0..k)
                    .filter_map(|i| {
                        let v: Option<Vec<f64>> = row.iter().map(|c| c.scores[i]).collect();
                        v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                    })
                    .collect();
                (!per_mask.is_empty()).then(|| {
                    let (mean, std) = mean_std(&per_mask);
                    MeanStd { mean, std }
                })
            })
            .collect();
        let table: Vec<Vec<Option<f64>>> = cells.iter().map(|r| r.iter().map(|c| c.mean).collect()).collect();
        let avg_rank = avg_rank(&table, Direction::LowerIsBetter)?;
        if avg_rank.incomplete {
            flags.push("some cells are empty and were left out of the rank computation".into());
        }
        Ok(Self {
            protocol: protocol.clone(),
            metric: MAE_NORMALIZATION.into(),
            datasets,
            methods,
            cells,
            avg,
            avg_rank,
            runtime: Vec::new(),
            flags,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn render_text(&self) -> String {
        let fmt = |m: Option<f64>, s: Option<f64>| match (m, s) {
            (Some(m), Some(s)) => format!("{m:.4}±{s:.4}"),
            _ => "—".to_string(),
        };
        let mut header = vec!["method".to_string()];
        header.extend(self.datasets.iter().cloned());
        header.push("AVG".into());
        header.push("Avg Rank".into());
        let mut rows = vec![header];
        for (mi, m) in self.methods.iter().enumerate() {
            let mut r = vec![m.clone()];
            r.extend(self.cells[mi].iter().map(|c| fmt(c.mean, c.std)));
            r.push(self.avg[mi].as_ref().map_or("—".into(), |a| fmt(Some(a.mean), Some(a.std))));
            r.push(format!("{:.2}", self.avg_rank.ranks[mi]));
            rows.push(r);
        }
        let ncol = rows[0].len();
        let widths: Vec<usize> = (0..ncol).map(|j| rows.iter().map(|r| r[j].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!(
            "MNAR protocol: K={} masks, p={}, seed={}\nmetric: {}\n\n",
            self.protocol.masks, self.protocol.rate, self.protocol.seed, self.metric
        );
        for (i, r) in rows.iter().enumerate() {
            let line: Vec<String> = r
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                out.push_str(&widths.iter().map(|&w| "-".repeat(w)).collect::<Vec<_>>().join("  "));
                out.push('\n');
            }
        }
        for f in &self.flags {
            let _ = writeln!(out, "note: {f}");
        }
        out
    }

    /// Grouped bar chart: one group per dataset plus AVG, one bar per
    /// method, with error bars and the average rank in the legend.
    pub fn render_svg(&self) -> String {
        const PALETTE: [&str; 6] = ["#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377"];
        let groups: Vec<(String, Vec<Option<(f64, f64)>>)> = self
            .datasets
            .iter()
            .enumerate()
            .map(|(di, d)| (d.clone(), self.cells.iter().map(|r| r[di].mean.zip(r[di].std)).collect()))
            .chain(std::iter::once((
                "AVG".to_string(),
                self.avg.iter().map(|a| a.as_ref().map(|a| (a.mean, a.std))).collect(),
            )))
            .collect();
        let ymax = groups
            .iter()
            .flat_map(|(_, v)| v.iter().flatten().map(|(m, s)| m + s))
            .fold(0.0f64, f64::max)
            .max(1e-9)
            * 1.1;
        let nm = self.methods.len().max(1);
        let bar = 14.0;
        let gap = 24.0;
        let group_w = bar * nm as f64 + gap;
        let (left, top, plot_h) = (50.0, 20.0, 220.0);
        let width = left + group_w * groups.len() as f64 + 180.0;
        let height = top + plot_h + 60.0;
        let y = |v: f64| top + plot_h * (1.0 - v / ymax);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.1}" stroke="black"/>"#, top + plot_h);
        for t in 0..=4 {
            let v = ymax * t as f64 / 4.0;
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.3}</text>"#, left - 4.0, y(v) + 4.0);
        }
        for (gi, (name, vals)) in groups.iter().enumerate() {
            let x0 = left + gap / 2.0 + group_w * gi as f64;
            for (mi, v) in vals.iter().enumerate() {
                if let Some((m, sd)) = v {
                    let x = x0 + bar * mi as f64;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{x:.1}" y="{:.1}" width="{bar}" height="{:.1}" fill="{}"/>"#,
                        y(*m),
                        y(0.0) - y(*m),
                        PALETTE[mi % PALETTE.len()]
                    );
                    let cx = x + bar / 2.0;
                    let _ = writeln!(
                        s,
                        r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="black"/>"#,
                        y(m + sd),
                        y((m - sd).max(0.0))
                    );
                }
            }
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
                x0 + bar * nm as f64 / 2.0,
                top + plot_h + 16.0,
                xml_escape(name)
            );
        }
        let lx = left + group_w * groups.len() as f64 + 10.0;
        for (mi, m) in self.methods.iter().enumerate() {
            let ly = top + 16.0 * mi as f64;
            let _ = writeln!(s, r#"<rect x="{lx:.1}" y="{ly:.1}" width="10" height="10" fill="{}"/>"#, PALETTE[mi % PALETTE.len()]);
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}">{} (rank {:.2})</text>"#,
                lx + 14.0,
                ly + 9.0,
                xml_escape(m),
                self.avg_rank.ranks[mi]
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::protocol::MaskRun;

    fn result(method: &str, dataset: &str, scores: &[Option<f64>]) -> ProtocolResult {
        ProtocolResult {
            dataset: dataset.into(),
            method: method.into(),
            runs: scores
                .iter()
                .enumerate()
                .map(|(k, &s)| MaskRun {
                    mask_seed: k as u64,
                    masked_entries: 1,
                    score: s,
                    error: s.is_none().then(|| "failed".into()),
                    flags: Vec::new(),
                })
                .collect(),
        }
    }

    #[test]
    fn avg_is_mean_of_per_mask_dataset_averages() {
        let results = vec![
            result("a", "d1", &[Some(1.0), Some(3.0)]),
            result("a", "d2", &[Some(2.0), Some(6.0)]),
            result("b", "d1", &[Some(0.5), Some(0.5)]),
            result("b", "d2", &[Some(4.0), Some(4.0)]),
        ];
        let r = BenchmarkReport::assemble(&ProtocolConfig::default(), &results).unwrap();
        // Per-mask averages for `a`: 1.5 and 4.5.
        let a = r.avg[0].as_ref().unwrap();
        assert_eq!((a.mean, a.std), (3.0, 1.5));
        // b wins d1, tie on d2.
        assert_eq!(r.avg_rank.ranks, vec![1.75, 1.25]);
        let text = r.render_text();
        assert!(text.contains("AVG") && text.contains("Avg Rank"));
        assert!(r.render_svg().starts_with("<svg"));
        let back: BenchmarkReport = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn failures_are_flagged() {
        let results = vec![result("a", "d1", &[None, Some(1.0)]), result("b", "d1", &[None, None])];
        let r = BenchmarkReport::assemble(&ProtocolConfig::default(), &results).unwrap();
        assert_eq!(r.cells[0][0].failed_masks, 1);
        assert!(r.avg_rank.incomplete);
        assert!(r.render_text().contains("—"));
        assert!(!r.flags.is_empty());
    }

    #[test]
    fn duplicate_results_are_rejected() {
        let results = vec![result("a", "d1", &[Some(1.0)]), result("a", "d1", &[Some(1.0)])];
        assert!(BenchmarkReport::assemble(&ProtocolConfig::default(), &results).is_err());
    }
}
