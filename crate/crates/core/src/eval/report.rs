//! Evaluation report files and side-by-side comparison tables.
//!
//! A report is tab-separated: `#`-prefixed metadata lines, a column header,
//! one row per direction, then average rows whose `src` field is `avg`.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use super::{DirectionScore, EvalMode};
use crate::error::{Error, Result};
use crate::topology::lang_name;

pub const COLUMNS: &str = "src\ttgt\tzero_shot\tdistance\tbleu\ttoken_acc\texact";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReportMeta {
    pub label: String,
    pub config_digest: String,
    pub topology_digest: String,
    pub topology: String,
    pub mode: EvalMode,
    /// which sides receive a language embedding, e.g. `source+target`
    pub lang_embedding: String,
}

/// Mean scores over a group of directions.
#[derive(Clone, Debug, PartialEq)]
pub struct AverageRow {
    /// `supervised`, `zero_shot` or `distance_<d>`
    pub name: String,
    pub zero_shot: bool,
    pub distance: Option<usize>,
    pub bleu: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub n_directions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    pub scores: Vec<DirectionScore>,
}

fn mean_row(name: String, zero_shot: bool, distance: Option<usize>, members: &[&DirectionScore]) -> AverageRow {
    let n = members.len() as f64;
    AverageRow {
        name,
        zero_shot,
        distance,
        bleu: members.iter().map(|s| s.bleu).sum::<f64>() / n,
        token_accuracy: members.iter().map(|s| s.token_accuracy).sum::<f64>() / n,
        exact_match: members.iter().map(|s| s.exact_match).sum::<f64>() / n,
        n_directions: members.len(),
    }
}

fn parse_lang(s: &str) -> Option<usize> {
    s.strip_prefix('L')?.parse().ok()
}

impl EvalReport {
    /// Supervised mean, zero-shot mean, then one row per zero-shot distance.
    pub fn averages(&self) -> Vec<AverageRow> {
        let mut rows = Vec::new();
        let sup: Vec<&DirectionScore> = self.scores.iter().filter(|s| !s.zero_shot).collect();
        if !sup.is_empty() {
            rows.push(mean_row("supervised".into(), false, Some(1), &sup));
        }
        let zs: Vec<&DirectionScore> = self.scores.iter().filter(|s| s.zero_shot).collect();
        if !zs.is_empty() {
            rows.push(mean_row("zero_shot".into(), true, None, &zs));
        }
        let distances: BTreeSet<usize> = zs.iter().map(|s| s.distance).collect();
        for d in distances {
            let members: Vec<&DirectionScore> = zs.iter().copied().filter(|s| s.distance == d).collect();
            rows.push(mean_row(format!("distance_{d}"), true, Some(d), &members));
        }
        rows
    }

    pub fn average(&self, name: &str) -> Option<AverageRow> {
        self.averages().into_iter().find(|r| r.name == name)
    }

    pub fn to_tsv(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        for (k, v) in [
            ("label", m.label.as_str()),
            ("config_digest", &m.config_digest),
            ("topology_digest", &m.topology_digest),
            ("topology", &m.topology),
            ("mode", &m.mode.to_string()),
            ("lang_embedding", &m.lang_embedding),
        ] {
            writeln!(out, "# {k}\t{v}").unwrap();
        }
        writeln!(out, "{COLUMNS}").unwrap();
        for s in &self.scores {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                lang_name(s.src_lang),
                lang_name(s.tgt_lang),
                u8::from(s.zero_shot),
                s.distance,
                s.bleu,
                s.token_accuracy,
                s.exact_match
            )
            .unwrap();
        }
        for a in self.averages() {
            writeln!(
                out,
                "avg\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}",
                a.name,
                u8::from(a.zero_shot),
                a.distance.map_or("-".to_string(), |d| d.to_string()),
                a.bleu,
                a.token_accuracy,
                a.exact_match
            )
            .unwrap();
        }
        out
    }

    /// Parses a report written by [`EvalReport::to_tsv`]. Average rows are
    /// recomputed from the direction rows rather than read back.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let bad = |line: &str| Error::Eval(format!("malformed report line `{line}`"));
        let mut meta = ReportMeta {
            label: String::new(),
            config_digest: String::new(),
            topology_digest: String::new(),
            topology: String::new(),
            mode: EvalMode::Direct,
            lang_embedding: String::new(),
        };
        let mut scores = Vec::new();
        let mut seen_header = false;
        for line in text.lines().filter(|l| !l.is_empty()) {
            if let Some(rest) = line.strip_prefix("# ") {
                let (k, v) = rest.split_once('\t').ok_or_else(|| bad(line))?;
                match k {
                    "label" => meta.label = v.into(),
                    "config_digest" => meta.config_digest = v.into(),
                    "topology_digest" => meta.topology_digest = v.into(),
                    "topology" => meta.topology = v.into(),
                    "mode" => meta.mode = v.parse()?,
                    "lang_embedding" => meta.lang_embedding = v.into(),
                    _ => return Err(bad(line)),
                }
                continue;
            }
            if line == COLUMNS {
                seen_header = true;
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 7 || !seen_header {
                return Err(bad(line));
            }
            if f[0] == "avg" {
                continue;
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            scores.push(DirectionScore {
                src_lang: parse_lang(f[0]).ok_or_else(|| bad(line))?,
                tgt_lang: parse_lang(f[1]).ok_or_else(|| bad(line))?,
                zero_shot: f[2] == "1",
                distance: f[3].parse().map_err(|_| bad(line))?,
                bleu: num(f[4])?,
                token_accuracy: num(f[5])?,
                exact_match: num(f[6])?,
                hops: 0,
            });
        }
        if meta.topology_digest.is_empty() || scores.is_empty() {
            return Err(Error::Eval("report has no topology digest or no direction rows".into()));
        }
        Ok(Self { meta, scores })
    }

    /// Plain-text table: supervised directions above zero-shot ones.
    pub fn to_table(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        writeln!(out, "{} ({} decoding)", m.label, m.mode).unwrap();
        writeln!(out, "topology {}", m.topology).unwrap();
        writeln!(out, "config   {}", m.config_digest).unwrap();
        writeln!(out, "language embedding: {}", m.lang_embedding).unwrap();
        let header = format!(
            "{:<10}{:>6}{:>6}{:>9}{:>11}{:>9}",
            "direction", "dist", "hops", "BLEU", "token acc", "exact"
        );
        let row = |out: &mut String, name: &str, dist: &str, hops: &str, b: f64, a: f64, e: f64| {
            writeln!(
                out,
                "{name:<10}{dist:>6}{hops:>6}{:>9.2}{:>11.4}{:>9.4}",
                b * 100.0,
                a,
                e
            )
            .unwrap();
        };
        let averages = self.averages();
        for (title, zs) in [("Supervised", false), ("Zero-shot", true)] {
            writeln!(out, "\n{title}\n{header}").unwrap();
            for s in self.scores.iter().filter(|s| s.zero_shot == zs) {
                let name = format!("{}-{}", lang_name(s.src_lang), lang_name(s.tgt_lang));
                let hops = if s.hops == 0 { "-".to_string() } else { s.hops.to_string() };
                row(&mut out, &name, &s.distance.to_string(), &hops, s.bleu, s.token_accuracy, s.exact_match);
            }
            for a in averages.iter().filter(|a| a.zero_shot == zs) {
                let dist = match (a.zero_shot, a.distance) {
                    (true, Some(d)) => d.to_string(),
                    _ => "".into(),
                };
                let name = if a.name.starts_with("distance_") { "avg" } else { "avg all" };
                row(&mut out, name, &dist, "", a.bleu, a.token_accuracy, a.exact_match);
            }
        }
        out
    }
}

/// Side-by-side comparison of reports over the same topology, columns in
/// argument order. The last row gives each column's zero-shot average minus
/// the first column's. Returns `(tsv, table)`.
pub fn merge_reports(reports: &[EvalReport]) -> Result<(String, String)> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Eval("report needs at least one evaluation file".into()))?;
    if let Some(r) = reports
        .iter()
        .find(|r| r.meta.topology_digest != first.meta.topology_digest)
    {
        return Err(Error::Eval(format!(
            "topology digest of `{}` ({}) differs from `{}` ({}); refusing to merge",
            r.meta.label, r.meta.topology_digest, first.meta.label, first.meta.topology_digest
        )));
    }
    let dirs: Vec<(usize, usize)> = first.scores.iter().map(|s| (s.src_lang, s.tgt_lang)).collect();
    for r in reports {
        let other: Vec<(usize, usize)> = r.scores.iter().map(|s| (s.src_lang, s.tgt_lang)).collect();
        if other != dirs {
            return Err(Error::Eval(format!("`{}` covers different directions", r.meta.label)));
        }
    }
    let labels: Vec<String> = reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let dup = reports[..i].iter().any(|p| p.meta.label == r.meta.label);
            if dup {
                format!("{}#{}", r.meta.label, i + 1)
            } else {
                r.meta.label.clone()
            }
        })
        .collect();

    // (row name, distance, zero-shot flag, per-report (acc, bleu))
    let mut rows: Vec<(String, String, String, Vec<(f64, f64)>)> = Vec::new();
    let mut order: Vec<usize> = (0..first.scores.len()).collect();
    order.sort_by_key(|&i| first.scores[i].zero_shot);
    for i in order {
        let s = &first.scores[i];
        rows.push((
            format!("{}\t{}", lang_name(s.src_lang), lang_name(s.tgt_lang)),
            s.distance.to_string(),
            u8::from(s.zero_shot).to_string(),
            reports
                .iter()
                .map(|r| (r.scores[i].token_accuracy, r.scores[i].bleu))
                .collect(),
        ));
    }
    let avgs: Vec<Vec<AverageRow>> = reports.iter().map(|r| r.averages()).collect();
    for (j, a) in avgs[0].iter().enumerate() {
        rows.push((
            format!("avg\t{}", a.name),
            a.distance.map_or("-".into(), |d| d.to_string()),
            u8::from(a.zero_shot).to_string(),
            avgs.iter().map(|r| (r[j].token_accuracy, r[j].bleu)).collect(),
        ));
    }
    let zs_index = avgs[0].iter().position(|a| a.name == "zero_shot");

    let mut tsv = String::new();
    writeln!(tsv, "# topology_digest\t{}", first.meta.topology_digest).unwrap();
    writeln!(tsv, "# topology\t{}", first.meta.topology).unwrap();
    writeln!(tsv, "# columns\t{}", labels.join(",")).unwrap();
    for (l, r) in labels.iter().zip(reports) {
        writeln!(tsv, "# source\t{l}\t{}\t{}", r.meta.mode, r.meta.config_digest).unwrap();
    }
    let mut header = "src\ttgt\tzero_shot\tdistance".to_string();
    for l in &labels {
        write!(header, "\t{l}:token_acc\t{l}:bleu").unwrap();
    }
    writeln!(tsv, "{header}").unwrap();
    for (name, dist, zs, vals) in &rows {
        write!(tsv, "{name}\t{zs}\t{dist}").unwrap();
        for (a, b) in vals {
            write!(tsv, "\t{a:.6}\t{b:.6}").unwrap();
        }
        writeln!(tsv).unwrap();
    }
    let deltas: Option<Vec<(f64, f64)>> = zs_index.map(|j| {
        let base = &avgs[0][j];
        avgs.iter()
            .map(|r| (r[j].token_accuracy - base.token_accuracy, r[j].bleu - base.bleu))
            .collect()
    });
    if let Some(d) = &deltas {
        write!(tsv, "delta\tzero_shot\t1\t-").unwrap();
        for (a, b) in d {
            write!(tsv, "\t{a:+.6}\t{b:+.6}").unwrap();
        }
        writeln!(tsv).unwrap();
    }

    let width = labels.iter().map(|l| l.len()).max().unwrap_or(0).max(14) + 2;
    let mut table = String::new();
    writeln!(table, "topology {}", first.meta.topology).unwrap();
    writeln!(table, "cells: token accuracy / BLEU\n").unwrap();
    write!(table, "{:<22}", "direction").unwrap();
    for l in &labels {
        write!(table, "{l:>width$}").unwrap();
    }
    writeln!(table).unwrap();
    let mut last_zs = String::new();
    for (name, dist, zs, vals) in &rows {
        if *zs != last_zs && !name.starts_with("avg") {
            let title = if zs == "1" { "zero-shot" } else { "supervised" };
            writeln!(table, "-- {title}").unwrap();
            last_zs = zs.clone();
        }
        let shown = if name.starts_with("avg") {
            name.replace('\t', " ")
        } else {
            format!("{} (d={dist})", name.replace('\t', "-"))
        };
        write!(table, "{shown:<22}").unwrap();
        for (a, b) in vals {
            write!(table, "{:>width$}", format!("{a:.4} / {:.2}", b * 100.0)).unwrap();
        }
        writeln!(table).unwrap();
    }
    if let Some(d) = &deltas {
        write!(table, "{:<22}", "delta zero-shot").unwrap();
        for (a, b) in d {
            write!(table, "{:>width$}", format!("{a:+.4} / {:+.2}", b * 100.0)).unwrap();
        }
        writeln!(table).unwrap();
    }
    Ok((tsv, table))
}
