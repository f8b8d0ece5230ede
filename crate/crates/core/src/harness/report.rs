use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::{PipelineConfig, ReportFormat};
use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "case_id,warp_kind,rmsd_before,rmsd_after,shells,steps,wall_seconds";

/// Wall time at the resolution reported: 0.1 s.
pub fn round_wall_seconds(s: f64) -> f64 {
    (s * 10.0).round() / 10.0
}

/// rmsd_after / rmsd_before, 0 for a pair that was already identical.
pub fn rmsd_ratio(before: f64, after: f64) -> f64 {
    if before > 0.0 {
        after / before
    } else if after == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRow {
    pub case_id: String,
    pub subject: String,
    pub warp_kind: String,
    pub rmsd_before: f64,
    pub rmsd_after: f64,
    pub shells: usize,
    pub steps: usize,
    pub wall_seconds: f64,
}

impl CaseRow {
    pub fn ratio(&self) -> f64 {
        rmsd_ratio(self.rmsd_before, self.rmsd_after)
    }
}

/// Means over one group of case rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub group: String,
    pub cases: usize,
    pub rmsd_before: f64,
    pub rmsd_after: f64,
    pub ratio: f64,
    pub shells: f64,
    pub steps: f64,
    pub wall_seconds: f64,
}

impl Aggregate {
    fn of(group: &str, rows: &[&CaseRow]) -> Self {
        let n = rows.len() as f64;
        let mean = |f: &dyn Fn(&CaseRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
        Aggregate {
            group: group.to_string(),
            cases: rows.len(),
            rmsd_before: mean(&|r| r.rmsd_before),
            rmsd_after: mean(&|r| r.rmsd_after),
            ratio: mean(&|r| r.ratio()),
            shells: mean(&|r| r.shells as f64),
            steps: mean(&|r| r.steps as f64),
            wall_seconds: mean(&|r| r.wall_seconds),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCase {
    pub case_id: String,
    pub reason: String,
}

/// Per-case rows plus two-way means (by warp kind, by subject).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub cases: Vec<CaseRow>,
    pub by_warp_kind: Vec<Aggregate>,
    pub by_subject: Vec<Aggregate>,
    pub overall: Option<Aggregate>,
    /// Cases whose registration ended worse than it started.
    pub violations: Vec<String>,
    pub skipped: Vec<SkippedCase>,
    /// Fully resolved configuration of the run.
    pub config: Option<PipelineConfig>,
}

fn group_by<'a>(rows: &'a [CaseRow], key: impl Fn(&CaseRow) -> &str) -> Vec<Aggregate> {
    let mut groups: BTreeMap<&str, Vec<&CaseRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(k, v)| Aggregate::of(k, &v))
        .collect()
}

impl RunReport {
    /// Sorts rows by case id so the report does not depend on completion order.
    pub fn from_rows(
        mut cases: Vec<CaseRow>,
        mut skipped: Vec<SkippedCase>,
        config: Option<PipelineConfig>,
    ) -> Self {
        cases.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        skipped.sort_by(|a, b| a.case_id.cmp(&b.case_id));
        let by_warp_kind = group_by(&cases, |r| &r.warp_kind);
        let by_subject = group_by(&cases, |r| &r.subject);
        let overall =
            (!cases.is_empty()).then(|| Aggregate::of("all", &cases.iter().collect::<Vec<_>>()));
        let violations = cases
            .iter()
            .filter(|r| !(r.rmsd_after <= r.rmsd_before))
            .map(|r| r.case_id.clone())
            .collect();
        RunReport {
            cases,
            by_warp_kind,
            by_subject,
            overall,
            violations,
            skipped,
            config,
        }
    }

    pub fn mean_wall_seconds(&self) -> f64 {
        self.overall.as_ref().map_or(0.0, |a| a.wall_seconds)
    }

    /// Copy with every timing field zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.cases.iter_mut().for_each(|r| r.wall_seconds = 0.0);
        for a in out
            .by_warp_kind
            .iter_mut()
            .chain(out.by_subject.iter_mut())
            .chain(out.overall.iter_mut())
        {
            a.wall_seconds = 0.0;
        }
        out
    }

    /// Case table under the fixed header, followed by mean rows (`mean:<kind>`
    /// per warp kind, `mean@<subject>` per subject, `mean` overall) and
    /// `#`-prefixed warning lines.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        for r in &self.cases {
            writeln!(
                s,
                "{},{},{},{},{},{},{:.1}",
                r.case_id,
                r.warp_kind,
                r.rmsd_before,
                r.rmsd_after,
                r.shells,
                r.steps,
                r.wall_seconds
            )
            .unwrap();
        }
        let mut agg = |id: String, kind: &str, a: &Aggregate| {
            writeln!(
                s,
                "{id},{kind},{},{},{},{},{}",
                a.rmsd_before, a.rmsd_after, a.shells, a.steps, a.wall_seconds
            )
            .unwrap();
        };
        for a in &self.by_warp_kind {
            agg(format!("mean:{}", a.group), &a.group, a);
        }
        for a in &self.by_subject {
            agg(format!("mean@{}", a.group), "*", a);
        }
        if let Some(a) = &self.overall {
            agg("mean".into(), "*", a);
        }
        for line in self.warnings() {
            writeln!(s, "# {line}").unwrap();
        }
        out.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let mut w: Vec<String> = self
            .violations
            .iter()
            .map(|id| format!("violation {id}: rmsd_after exceeds rmsd_before"))
            .collect();
        w.extend(
            self.skipped
                .iter()
                .map(|s| format!("skipped {}: {}", s.case_id, s.reason)),
        );
        w
    }

    pub fn to_markdown(&self) -> Result<String> {
        let mut s = String::new();
        let w = &mut s;
        writeln!(w, "# Registration report\n").unwrap();
        writeln!(w, "## Cases\n").unwrap();
        writeln!(w, "| case_id | warp_kind | rmsd_before | rmsd_after | ratio | shells | steps | wall_seconds |").unwrap();
        writeln!(w, "|---|---|---:|---:|---:|---:|---:|---:|").unwrap();
        for r in &self.cases {
            writeln!(
                w,
                "| {} | {} | {:.6} | {:.6} | {:.4} | {} | {} | {:.1} |",
                r.case_id,
                r.warp_kind,
                r.rmsd_before,
                r.rmsd_after,
                r.ratio(),
                r.shells,
                r.steps,
                r.wall_seconds
            )
            .unwrap();
        }
        for (title, rows) in [
            ("Mean by warp kind", &self.by_warp_kind),
            ("Mean by subject", &self.by_subject),
        ] {
            writeln!(w, "\n## {title}\n").unwrap();
            writeln!(
                w,
                "| group | cases | rmsd_before | rmsd_after | ratio | wall_seconds |"
            )
            .unwrap();
            writeln!(w, "|---|---:|---:|---:|---:|---:|").unwrap();
            for a in rows.iter().chain(self.overall.iter()) {
                writeln!(
                    w,
                    "| {} | {} | {:.6} | {:.6} | {:.4} | {:.2} |",
                    a.group, a.cases, a.rmsd_before, a.rmsd_after, a.ratio, a.wall_seconds
                )
                .unwrap();
            }
        }
        let warnings = self.warnings();
        if !warnings.is_empty() {
            writeln!(w, "\n## Warnings\n").unwrap();
            for line in warnings {
                writeln!(w, "- {line}").unwrap();
            }
        }
        if let Some(cfg) = &self.config {
            writeln!(w, "\n## Configuration\n\n```toml\n{}```", cfg.to_toml()?).unwrap();
        }
        Ok(s)
    }

    pub fn render(&self, format: ReportFormat) -> Result<String> {
        match format {
            ReportFormat::Markdown => self.to_markdown(),
            ReportFormat::Csv => {
                let mut buf = Vec::new();
                self.write_csv(&mut buf)?;
                String::from_utf8(buf).map_err(|e| Error::Serde(e.to_string()))
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }
}
