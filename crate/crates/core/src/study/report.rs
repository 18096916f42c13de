//! Aggregation of ratings into report tables and their CSV forms.
//!
//! | file | header |
//! |---|---|
//! | `ratings.csv` | `listener_id,comparison_id,kind,card,question,raw,numeric` |
//! | `report.csv` | `kind,question,n,mean,sd,t,p` |
//! | `by_card.csv` | `kind,card,question,n,mean` |
//! | `counts.csv` | `kind,comparisons,listeners,pair_ratings,question_ratings` |
//! | `composer_report.csv` | `kind,measure,n,mean_treatment,mean_baseline,mean_diff,sd,t,p` |
//!
//! Empty cells mean "undefined for this group" (no ratings, or too few for a
//! t statistic). Rows are ordered by kind, then card in deck order, then
//! question.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::path::Path;

use serde::Serialize;

use super::assign::ComparisonKind;
use super::ratings::{ComposerReport, Measure, Question, RatingRow, RatingStore};
use super::stats::{mean, paired_t, StatResult};
use super::StudyError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub kind: ComparisonKind,
    pub question: Question,
    pub n: usize,
    pub mean: Option<f64>,
    /// Present when `n ≥ 2`.
    pub stat: Option<StatResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ByCardRow {
    pub kind: ComparisonKind,
    pub card: String,
    pub question: Question,
    pub n: usize,
    pub mean: Option<f64>,
}

/// Both readings of "how many ratings": a pair rating is one listener
/// judging one pair; each pair rating answers every question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct CountRow {
    pub kind: ComparisonKind,
    pub comparisons: usize,
    pub listeners: usize,
    pub pair_ratings: usize,
    pub question_ratings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComposerRow {
    pub kind: ComparisonKind,
    pub measure: Measure,
    /// Composers who rated both systems.
    pub n: usize,
    pub mean_treatment: Option<f64>,
    pub mean_baseline: Option<f64>,
    pub stat: Option<StatResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub overall: Vec<ReportRow>,
    pub by_card: Vec<ByCardRow>,
    pub counts: Vec<CountRow>,
    pub composer: Vec<ComposerRow>,
}

/// Aggregates flat rating rows. `card_order` lists cards that get a row even
/// with no ratings; cards seen only in `rows` follow in name order.
pub fn aggregate_rows(rows: &[RatingRow], card_order: &[String], composer_reports: &[ComposerReport]) -> Report {
    let mut cards: Vec<String> = card_order.to_vec();
    let extra: BTreeSet<&String> = rows
        .iter()
        .map(|r| &r.card)
        .filter(|c| !card_order.contains(c))
        .collect();
    cards.extend(extra.into_iter().cloned());

    let mut overall = Vec::new();
    let mut by_card = Vec::new();
    let mut counts = Vec::new();
    for kind in ComparisonKind::ALL {
        let of_kind: Vec<&RatingRow> = rows.iter().filter(|r| r.kind == kind).collect();
        for question in Question::ALL {
            let xs: Vec<f64> = of_kind
                .iter()
                .filter(|r| r.question == question)
                .map(|r| f64::from(r.numeric))
                .collect();
            overall.push(ReportRow {
                kind,
                question,
                n: xs.len(),
                mean: (!xs.is_empty()).then(|| mean(&xs)),
                stat: paired_t(&xs).ok(),
            });
        }
        for card in &cards {
            for question in Question::ALL {
                let xs: Vec<f64> = of_kind
                    .iter()
                    .filter(|r| r.question == question && &r.card == card)
                    .map(|r| f64::from(r.numeric))
                    .collect();
                by_card.push(ByCardRow {
                    kind,
                    card: card.clone(),
                    question,
                    n: xs.len(),
                    mean: (!xs.is_empty()).then(|| mean(&xs)),
                });
            }
        }
        let pairs: BTreeSet<(&str, &str)> = of_kind
            .iter()
            .map(|r| (r.listener_id.as_str(), r.comparison_id.as_str()))
            .collect();
        counts.push(CountRow {
            kind,
            comparisons: of_kind.iter().map(|r| &r.comparison_id).collect::<BTreeSet<_>>().len(),
            listeners: of_kind.iter().map(|r| &r.listener_id).collect::<BTreeSet<_>>().len(),
            pair_ratings: pairs.len(),
            question_ratings: of_kind.len(),
        });
    }
    Report {
        overall,
        by_card,
        counts,
        composer: composer_rows(composer_reports),
    }
}

fn composer_rows(reports: &[ComposerReport]) -> Vec<ComposerRow> {
    let mut out = Vec::new();
    for kind in ComparisonKind::ALL {
        // composer -> (treatment, baseline)
        let mut by_composer: BTreeMap<&str, (Option<&ComposerReport>, Option<&ComposerReport>)> = BTreeMap::new();
        for r in reports.iter().filter(|r| r.kind == kind) {
            let slot = by_composer.entry(r.composer_id.as_str()).or_default();
            if r.system.is_treatment_in(kind) {
                slot.0 = Some(r);
            } else {
                slot.1 = Some(r);
            }
        }
        let complete: Vec<(&ComposerReport, &ComposerReport)> =
            by_composer.values().filter_map(|&(t, b)| Some((t?, b?))).collect();
        for measure in Measure::ALL {
            let t: Vec<f64> = complete
                .iter()
                .map(|(t, _)| f64::from(t.ratings.get(measure)))
                .collect();
            let b: Vec<f64> = complete
                .iter()
                .map(|(_, b)| f64::from(b.ratings.get(measure)))
                .collect();
            let d: Vec<f64> = t.iter().zip(&b).map(|(x, y)| x - y).collect();
            out.push(ComposerRow {
                kind,
                measure,
                n: complete.len(),
                mean_treatment: (!t.is_empty()).then(|| mean(&t)),
                mean_baseline: (!b.is_empty()).then(|| mean(&b)),
                stat: paired_t(&d).ok(),
            });
        }
    }
    out
}

pub fn aggregate_report(store: &RatingStore, card_order: &[String]) -> Report {
    let reports: Vec<ComposerReport> = store.composer_reports().cloned().collect();
    aggregate_rows(&store.rating_rows(), card_order, &reports)
}

fn num(x: Option<f64>) -> String {
    match x {
        None => String::new(),
        Some(v) if v == f64::INFINITY => "inf".into(),
        Some(v) if v == f64::NEG_INFINITY => "-inf".into(),
        Some(v) => format!("{v}"),
    }
}

fn csv_err(e: impl std::fmt::Display) -> StudyError {
    StudyError::Io(e.to_string())
}

impl Report {
    pub fn write_report_csv<W: Write>(&self, w: W) -> Result<(), StudyError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "question", "n", "mean", "sd", "t", "p"])
            .map_err(csv_err)?;
        for r in &self.overall {
            let s = r.stat;
            out.write_record([
                r.kind.name().to_string(),
                r.question.name().to_string(),
                r.n.to_string(),
                num(r.mean),
                num(s.map(|s| s.sd)),
                num(s.map(|s| s.t)),
                num(s.map(|s| s.p)),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(csv_err)
    }

    pub fn write_by_card_csv<W: Write>(&self, w: W) -> Result<(), StudyError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "card", "question", "n", "mean"])
            .map_err(csv_err)?;
        for r in &self.by_card {
            out.write_record([
                r.kind.name().to_string(),
                r.card.clone(),
                r.question.name().to_string(),
                r.n.to_string(),
                num(r.mean),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(csv_err)
    }

    pub fn write_counts_csv<W: Write>(&self, w: W) -> Result<(), StudyError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["kind", "comparisons", "listeners", "pair_ratings", "question_ratings"])
            .map_err(csv_err)?;
        for r in &self.counts {
            out.write_record([
                r.kind.name().to_string(),
                r.comparisons.to_string(),
                r.listeners.to_string(),
                r.pair_ratings.to_string(),
                r.question_ratings.to_string(),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(csv_err)
    }

    pub fn write_composer_csv<W: Write>(&self, w: W) -> Result<(), StudyError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "kind",
            "measure",
            "n",
            "mean_treatment",
            "mean_baseline",
            "mean_diff",
            "sd",
            "t",
            "p",
        ])
        .map_err(csv_err)?;
        for r in &self.composer {
            let s = r.stat;
            let diff = match (r.mean_treatment, r.mean_baseline) {
                (Some(a), Some(b)) => Some(a - b),
                _ => None,
            };
            out.write_record([
                r.kind.name().to_string(),
                r.measure.name().to_string(),
                r.n.to_string(),
                num(r.mean_treatment),
                num(r.mean_baseline),
                num(diff),
                num(s.map(|s| s.sd)),
                num(s.map(|s| s.t)),
                num(s.map(|s| s.p)),
            ])
            .map_err(csv_err)?;
        }
        out.flush().map_err(csv_err)
    }

    /// Writes `report.csv`, `by_card.csv`, `counts.csv` and
    /// `composer_report.csv` into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<(), StudyError> {
        std::fs::create_dir_all(dir).map_err(csv_err)?;
        let file = |name: &str| std::fs::File::create(dir.join(name)).map_err(csv_err);
        self.write_report_csv(file("report.csv")?)?;
        self.write_by_card_csv(file("by_card.csv")?)?;
        self.write_counts_csv(file("counts.csv")?)?;
        self.write_composer_csv(file("composer_report.csv")?)
    }

    pub fn to_csv_string(&self, which: ReportFile) -> String {
        let mut buf = Vec::new();
        let result = match which {
            ReportFile::Report => self.write_report_csv(&mut buf),
            ReportFile::ByCard => self.write_by_card_csv(&mut buf),
            ReportFile::Counts => self.write_counts_csv(&mut buf),
            ReportFile::Composer => self.write_composer_csv(&mut buf),
        };
        result.expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("csv output is utf-8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFile {
    Report,
    ByCard,
    Counts,
    Composer,
}

pub fn write_ratings_csv<W: Write>(rows: &[RatingRow], w: W) -> Result<(), StudyError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "listener_id",
        "comparison_id",
        "kind",
        "card",
        "question",
        "raw",
        "numeric",
    ])
    .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            r.listener_id.clone(),
            r.comparison_id.clone(),
            r.kind.name().to_string(),
            r.card.clone(),
            r.question.name().to_string(),
            r.raw.label().to_string(),
            r.numeric.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush().map_err(csv_err)
}

pub fn ratings_csv_string(rows: &[RatingRow]) -> String {
    let mut buf = Vec::new();
    write_ratings_csv(rows, &mut buf).expect("writing to memory cannot fail");
    String::from_utf8(buf).expect("csv output is utf-8")
}

/// Reads `ratings.csv`. Numeric values must lie in [−2, 2].
pub fn read_ratings_csv<R: Read>(r: R) -> Result<Vec<RatingRow>, StudyError> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<RatingRow>().enumerate() {
        let row = rec.map_err(|e| StudyError::Parse(format!("ratings row {}: {e}", i + 1)))?;
        if !(-2..=2).contains(&row.numeric) {
            return Err(StudyError::Parse(format!(
                "ratings row {}: numeric {} outside [-2, 2]",
                i + 1,
                row.numeric
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Reads composer questionnaires from CSV with header
/// `composer_id,kind,system,expressing,communicating,musical_coherence,ownership,control,efficacy`.
pub fn read_composer_csv<R: Read>(r: R) -> Result<Vec<ComposerReport>, StudyError> {
    #[derive(serde::Deserialize)]
    struct Row {
        composer_id: String,
        kind: ComparisonKind,
        system: super::ratings::System,
        expressing: u8,
        communicating: u8,
        musical_coherence: u8,
        ownership: u8,
        control: u8,
        efficacy: u8,
    }
    let mut rdr = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, rec) in rdr.deserialize::<Row>().enumerate() {
        let row = rec.map_err(|e| StudyError::Parse(format!("composer row {}: {e}", i + 1)))?;
        let report = ComposerReport {
            composer_id: row.composer_id,
            kind: row.kind,
            system: row.system,
            ratings: super::ratings::ComposerRatings {
                expressing: row.expressing,
                communicating: row.communicating,
                musical_coherence: row.musical_coherence,
                ownership: row.ownership,
                control: row.control,
                efficacy: row.efficacy,
            },
        };
        report.validate()?;
        out.push(report);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::study::ratings::{ComposerRatings, RawAnswer, System};

    fn row(listener: &str, comparison: &str, kind: ComparisonKind, card: &str, q: Question, numeric: i8) -> RatingRow {
        RatingRow {
            listener_id: listener.into(),
            comparison_id: comparison.into(),
            kind,
            card: card.into(),
            question: q,
            raw: RawAnswer::ALL[(numeric + 2) as usize],
            numeric,
        }
    }

    fn cards() -> Vec<String> {
        ["happy", "sad", "conflict", "curious", "fear"]
            .map(String::from)
            .to_vec()
    }

    #[test]
    fn all_plus_two() {
        let mut rows = Vec::new();
        for l in 0..4 {
            for q in Question::ALL {
                rows.push(row(
                    &format!("l{l}"),
                    "c1-interface",
                    ComparisonKind::Interface,
                    "sad",
                    q,
                    2,
                ));
                rows.push(row(&format!("l{l}"), "c1-model", ComparisonKind::Model, "fear", q, 2));
            }
        }
        let report = aggregate_rows(&rows, &cards(), &[]);
        for r in &report.overall {
            assert_eq!(r.mean, Some(2.0));
            assert_eq!(r.n, 4);
        }
        for r in report.by_card.iter().filter(|r| r.n > 0) {
            assert_eq!(r.mean, Some(2.0));
        }
    }

    /// 3 listeners × 2 comparisons, aggregated by hand:
    ///
    /// interface/evokes: 2, 1, -1 → mean 2/3, sd = sqrt(((4/3)² + (1/3)² + (5/3)²)/2) = sqrt(7/3)
    /// interface/musical: 0, 1, 2 → mean 1, sd 1, t = sqrt(3)
    /// model/evokes: -2, -2, 1 → mean -1; model/musical: 1, 1, 1 → sd 0, t = inf, p = 0
    #[test]
    fn hand_built_store() {
        let vals = [("l1", 2, 0, -2, 1), ("l2", 1, 1, -2, 1), ("l3", -1, 2, 1, 1)];
        let mut rows = Vec::new();
        for (l, ie, im, me, mm) in vals {
            rows.push(row(
                l,
                "a-interface",
                ComparisonKind::Interface,
                "happy",
                Question::Evokes,
                ie,
            ));
            rows.push(row(
                l,
                "a-interface",
                ComparisonKind::Interface,
                "happy",
                Question::Musical,
                im,
            ));
            rows.push(row(l, "b-model", ComparisonKind::Model, "fear", Question::Evokes, me));
            rows.push(row(l, "b-model", ComparisonKind::Model, "fear", Question::Musical, mm));
        }
        let report = aggregate_rows(&rows, &cards(), &[]);
        let get = |k, q| report.overall.iter().find(|r| r.kind == k && r.question == q).unwrap();
        let ie = get(ComparisonKind::Interface, Question::Evokes);
        assert!((ie.mean.unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((ie.stat.unwrap().sd - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let im = get(ComparisonKind::Interface, Question::Musical).stat.unwrap();
        assert_eq!((im.mean, im.sd), (1.0, 1.0));
        assert!((im.t - 3f64.sqrt()).abs() < 1e-12);
        let me = get(ComparisonKind::Model, Question::Evokes);
        assert_eq!(me.mean, Some(-1.0));
        let mm = get(ComparisonKind::Model, Question::Musical).stat.unwrap();
        assert_eq!((mm.t, mm.p), (f64::INFINITY, 0.0));

        let csv = report.to_csv_string(ReportFile::Report);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "kind,question,n,mean,sd,t,p");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("model,musical,3,1,0,inf,0"));

        let by_card = report.to_csv_string(ReportFile::ByCard);
        assert!(by_card.contains("interface,happy,evokes,3,0.6666666666666666"));
        assert!(by_card.contains("interface,sad,evokes,0,\n"));

        let counts = report.to_csv_string(ReportFile::Counts);
        assert!(counts.contains("interface,1,3,3,6"));
    }

    #[test]
    fn per_card_n_sums_to_total() {
        let mut rows = Vec::new();
        for (i, card) in ["happy", "sad", "fear", "mystery"].iter().enumerate() {
            for l in 0..=i {
                rows.push(row(
                    &format!("l{l}"),
                    &format!("c{i}-model"),
                    ComparisonKind::Model,
                    card,
                    Question::Evokes,
                    1,
                ));
            }
        }
        let report = aggregate_rows(&rows, &cards(), &[]);
        for kind in ComparisonKind::ALL {
            for q in Question::ALL {
                let total = report
                    .overall
                    .iter()
                    .find(|r| r.kind == kind && r.question == q)
                    .unwrap()
                    .n;
                let sum: usize = report
                    .by_card
                    .iter()
                    .filter(|r| r.kind == kind && r.question == q)
                    .map(|r| r.n)
                    .sum();
                assert_eq!(total, sum);
            }
        }
        // unknown card is appended after the deck
        assert_eq!(report.by_card.last().unwrap().card, "mystery");
    }

    #[test]
    fn ratings_csv_round_trip() {
        let rows = vec![
            row(
                "l1",
                "c1-interface",
                ComparisonKind::Interface,
                "fear",
                Question::Evokes,
                -1,
            ),
            row(
                "l1",
                "c1-interface",
                ComparisonKind::Interface,
                "fear",
                Question::Musical,
                2,
            ),
        ];
        let text = ratings_csv_string(&rows);
        assert!(text.starts_with("listener_id,comparison_id,kind,card,question,raw,numeric\n"));
        assert_eq!(read_ratings_csv(text.as_bytes()).unwrap(), rows);
        let bad = text.replace(",2\n", ",3\n");
        assert!(read_ratings_csv(bad.as_bytes()).is_err());
    }

    #[test]
    fn composer_rows_pair_by_composer() {
        let rep = |c: &str, system, v| ComposerReport {
            composer_id: c.into(),
            kind: ComparisonKind::Interface,
            system,
            ratings: ComposerRatings::uniform(v),
        };
        let reports = vec![
            rep("a", System::Steering, 6),
            rep("a", System::Radio, 3),
            rep("b", System::Steering, 5),
            rep("b", System::Radio, 4),
            rep("c", System::Steering, 7), // unpaired, ignored
        ];
        let report = aggregate_rows(&[], &cards(), &reports);
        let own = report
            .composer
            .iter()
            .find(|r| r.kind == ComparisonKind::Interface && r.measure == Measure::Ownership)
            .unwrap();
        assert_eq!(own.n, 2);
        assert_eq!(own.mean_treatment, Some(5.5));
        assert_eq!(own.mean_baseline, Some(3.5));
        assert_eq!(own.stat.unwrap().mean, 2.0);
        let csv = "composer_id,kind,system,expressing,communicating,musical_coherence,ownership,control,efficacy\n\
                   a,interface,steering,6,6,6,6,6,6\n";
        assert_eq!(
            read_composer_csv(csv.as_bytes()).unwrap()[0],
            rep("a", System::Steering, 6)
        );
        assert!(read_composer_csv(csv.replace(",6\n", ",9\n").as_bytes()).is_err());
    }
}
