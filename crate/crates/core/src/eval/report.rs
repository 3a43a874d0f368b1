//! Merged accuracy table over run directories.
//!
//! Every stage of a run writes `<run>/<stage>/summary.json`; the report
//! collects them with one row per stage, runs in the order given and stages
//! in pipeline order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

/// What a pipeline stage records about its final model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSummary {
    pub model: String,
    pub dataset: String,
    /// `adam`, `de` or `de_soup`.
    pub stage: String,
    pub params: usize,
    pub test_accuracy: f64,
    pub test_samples: usize,
    pub train_samples: usize,
    pub train_bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub model: String,
    pub dataset: String,
    pub stage: String,
    pub params: usize,
    pub accuracy: f64,
    pub test_samples: usize,
    pub train_samples: usize,
    pub train_bytes: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
    /// Unreadable or missing run metadata, one message per problem.
    pub problems: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

pub const STAGES: [&str; 3] = ["adam", "de", "de_soup"];

fn stage_rank(stage: &str) -> usize {
    STAGES.iter().position(|s| *s == stage).unwrap_or(STAGES.len())
}

fn run_rows(dir: &Path, report: &mut Report) {
    let run = dir.display().to_string();
    let entries = match std::fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) => {
            report.problems.push(format!("{run}: {e}"));
            return;
        }
    };
    let mut summaries: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path().join("summary.json"))
        .filter(|p| p.exists())
        .collect();
    summaries.sort();
    if summaries.is_empty() {
        report.problems.push(format!("{run}: no stage summaries found"));
        return;
    }
    let mut rows = Vec::new();
    for path in summaries {
        let parsed = std::fs::read_to_string(&path)
            .map_err(|e| e.to_string())
            .and_then(|t| serde_json::from_str::<RunSummary>(&t).map_err(|e| e.to_string()));
        match parsed {
            Ok(s) => rows.push(ReportRow {
                run: run.clone(),
                model: s.model,
                dataset: s.dataset,
                stage: s.stage,
                params: s.params,
                accuracy: s.test_accuracy,
                test_samples: s.test_samples,
                train_samples: s.train_samples,
                train_bytes: s.train_bytes,
            }),
            Err(e) => report.problems.push(format!("{}: {e}", path.display())),
        }
    }
    rows.sort_by(|a, b| stage_rank(&a.stage).cmp(&stage_rank(&b.stage)).then(a.stage.cmp(&b.stage)));
    report.rows.extend(rows);
}

pub fn collect(run_dirs: &[PathBuf]) -> Report {
    let mut report = Report::default();
    for dir in run_dirs {
        run_rows(dir, &mut report);
    }
    report
}

impl Report {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            ReportFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([
                    "run",
                    "model",
                    "dataset",
                    "stage",
                    "params",
                    "accuracy",
                    "test_samples",
                    "train_samples",
                    "train_bytes",
                ])
                .expect("in-memory write");
                for r in &self.rows {
                    w.serialize((
                        &r.run,
                        &r.model,
                        &r.dataset,
                        &r.stage,
                        r.params,
                        r.accuracy,
                        r.test_samples,
                        r.train_samples,
                        r.train_bytes,
                    ))
                    .expect("in-memory write");
                }
                String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
            }
        }
    }
}

/// Collects `run_dirs` and renders the table.
pub fn report(run_dirs: &[PathBuf], format: ReportFormat) -> (String, Vec<String>) {
    let r = collect(run_dirs);
    (r.render(format), r.problems)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(stage: &str, acc: f64) -> RunSummary {
        RunSummary {
            model: "lenet1".into(),
            dataset: "mnist".into(),
            stage: stage.into(),
            params: 3246,
            test_accuracy: acc,
            test_samples: 10_000,
            train_samples: 60_000,
            train_bytes: 47_040_000,
        }
    }

    fn write(dir: &Path, sub: &str, s: &RunSummary) {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
        std::fs::write(dir.join(sub).join("summary.json"), serde_json::to_string(s).unwrap()).unwrap();
    }

    #[test]
    fn empty_list_is_header_only() {
        let (csv, problems) = report(&[], ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("run,model,dataset,stage,params,accuracy"));
        assert!(problems.is_empty());
        let (json, _) = report(&[], ReportFormat::Json);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["rows"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn adam_and_de_rows_share_params() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "de", &summary("de", 0.9903));
        write(dir.path(), "bp", &summary("adam", 0.9878));
        let r = collect(&[dir.path().to_path_buf()]);
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].stage, "adam");
        assert_eq!(r.rows[1].stage, "de");
        assert_eq!(r.rows[0].params, r.rows[1].params);

        let csv = r.render(ReportFormat::Csv);
        let mut rd = csv::Reader::from_reader(csv.as_bytes());
        let from_csv: Vec<(String, String, String, String, usize, f64, usize, usize, u64)> =
            rd.deserialize().map(Result::unwrap).collect();
        let from_json: Report = serde_json::from_str(&r.render(ReportFormat::Json)).unwrap();
        for (c, j) in from_csv.iter().zip(&from_json.rows) {
            assert_eq!(c.3, j.stage);
            assert_eq!(c.4, j.params);
            assert_eq!(c.5, j.accuracy);
        }
    }

    #[test]
    fn missing_and_corrupt_runs_are_listed() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "bp", &summary("adam", 0.5));
        std::fs::create_dir_all(dir.path().join("de")).unwrap();
        std::fs::write(dir.path().join("de/summary.json"), "{not json").unwrap();
        let r = collect(&[dir.path().to_path_buf(), dir.path().join("nope")]);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.problems.len(), 2);
    }
}
