//! Historical-variance data selection.
//!
//! A full-dataset RLVR run records each example's mean group accuracy per
//! epoch. Examples whose accuracy moved the most across epochs rank first.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::Dataset;
use crate::loss::RolloutGroup;
use crate::{Error, Result};

/// Per-epoch training accuracy of each example.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AccuracyHistory {
    /// id -> epoch -> (sum of group accuracies, group count)
    records: HashMap<String, BTreeMap<usize, (f64, usize)>>,
}

/// One line of the history file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub id: String,
    pub epoch: usize,
    pub accuracy: f64,
}

impl AccuracyHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds every group of one step to `epoch`. An example seen several times
    /// in the epoch gets the mean of its group accuracies.
    pub fn record_groups(&mut self, epoch: usize, groups: &[RolloutGroup]) {
        for g in groups {
            self.record(&g.prompt_id, epoch, g.accuracy());
        }
    }

    pub fn record(&mut self, id: &str, epoch: usize, accuracy: f64) {
        let slot = self.records.entry(id.to_string()).or_default().entry(epoch).or_insert((0.0, 0));
        slot.0 += accuracy;
        slot.1 += 1;
    }

    pub fn epochs(&self, id: &str) -> Option<Vec<f64>> {
        self.records.get(id).map(|m| m.values().map(|&(s, n)| s / n as f64).collect())
    }

    pub fn num_examples(&self) -> usize {
        self.records.len()
    }

    /// The accuracy series of every dataset example, in dataset order.
    pub fn finalize(&self, dataset: &Dataset) -> Result<Vec<(String, Vec<f64>)>> {
        dataset
            .examples()
            .iter()
            .map(|ex| {
                self.epochs(&ex.id)
                    .map(|s| (ex.id.clone(), s))
                    .ok_or_else(|| Error::MissingEntry(format!("no accuracy history for example {:?}", ex.id)))
            })
            .collect()
    }

    pub fn to_records(&self) -> Vec<HistoryRecord> {
        let mut out: Vec<HistoryRecord> = self
            .records
            .iter()
            .flat_map(|(id, m)| {
                m.iter().map(move |(&epoch, &(s, n))| HistoryRecord { id: id.clone(), epoch, accuracy: s / n as f64 })
            })
            .collect();
        out.sort_by(|a, b| a.id.cmp(&b.id).then(a.epoch.cmp(&b.epoch)));
        out
    }
}

/// Writes one JSON object per line: `{"id", "epoch", "accuracy"}`.
pub fn save_history(history: &AccuracyHistory, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for r in history.to_records() {
        serde_json::to_writer(&mut f, &r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_history(path: &Path) -> Result<AccuracyHistory> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut h = AccuracyHistory::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
        let r: HistoryRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if !(0.0..=1.0).contains(&r.accuracy) {
            return Err(parse_err(format!("accuracy {} outside [0, 1]", r.accuracy)));
        }
        h.record(&r.id, r.epoch, r.accuracy);
    }
    Ok(h)
}

/// Population variance of an accuracy series. Needs at least two epochs.
pub fn variance_score(series: &[f64]) -> Result<f64> {
    if series.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "variance score needs at least 2 epochs, got {}",
            series.len()
        )));
    }
    if let Some(x) = series.iter().find(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("accuracy {x} in history")));
    }
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    Ok(series.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Sorts by descending score. Equal scores keep their input order.
pub fn rank_examples(scores: &[(String, f64)]) -> Vec<(String, f64)> {
    let mut ranked = scores.to_vec();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

/// Scores every dataset example and returns them ranked.
pub fn rank_dataset(history: &AccuracyHistory, dataset: &Dataset) -> Result<Vec<(String, f64)>> {
    let scores = history
        .finalize(dataset)?
        .into_iter()
        .map(|(id, s)| variance_score(&s).map(|v| (id, v)))
        .collect::<Result<Vec<_>>>()?;
    Ok(rank_examples(&scores))
}

/// The `k` top-ranked examples as a new dataset, in rank order.
pub fn select_top_k(ranked: &[(String, f64)], dataset: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 || k > ranked.len() {
        return Err(Error::InvalidInput(format!("top-k must lie in 1..={}, got {k}", ranked.len())));
    }
    let examples = ranked[..k]
        .iter()
        .map(|(id, _)| dataset.get(id).cloned().ok_or_else(|| Error::MissingEntry(id.clone())))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, format!("top-{k} by historical variance from {}", dataset.provenance()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{generate_tasks, Family};
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn flat_series_scores_zero() {
        assert_eq!(variance_score(&[0.5, 0.5, 0.5, 0.5]).unwrap(), 0.0);
    }

    #[test]
    fn alternating_series() {
        assert!(close(variance_score(&[0.0, 1.0, 0.0, 1.0]).unwrap(), 0.25));
        assert!(close(variance_score(&[0.0, 1.0]).unwrap(), 0.25));
    }

    #[test]
    fn short_series_is_an_error() {
        assert!(variance_score(&[0.3]).is_err());
        assert!(variance_score(&[]).is_err());
    }

    #[test]
    fn ranking_orders_by_score_with_stable_ties() {
        let scores = vec![("a".to_string(), 0.0), ("b".to_string(), 0.25), ("c".to_string(), 0.1)];
        let ids: Vec<_> = rank_examples(&scores).into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, ["b", "c", "a"]);

        let ties = vec![("x".to_string(), 0.1), ("y".to_string(), 0.1), ("z".to_string(), 0.1)];
        let ids: Vec<_> = rank_examples(&ties).into_iter().map(|(id, _)| id).collect();
        assert_eq!(ids, ["x", "y", "z"]);
    }

    #[test]
    fn select_top_k_on_dataset() {
        let d = generate_tasks(Family::ModAdd, 3, 0).unwrap();
        let ids: Vec<String> = d.examples().iter().map(|e| e.id.clone()).collect();
        let mut h = AccuracyHistory::new();
        for (i, series) in [[0.5, 0.5, 0.5, 0.5], [0.0, 1.0, 0.0, 1.0], [0.2, 0.4, 0.2, 0.4]].iter().enumerate() {
            for (e, &a) in series.iter().enumerate() {
                h.record(&ids[i], e, a);
            }
        }
        let ranked = rank_dataset(&h, &d).unwrap();
        assert_eq!(ranked[0].0, ids[1]);
        assert!(close(ranked[0].1, 0.25));
        assert_eq!(ranked[2].0, ids[0]);
        let top = select_top_k(&ranked, &d, 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top.examples()[0], d.examples()[1]);
        assert!(select_top_k(&ranked, &d, 4).is_err());
        assert!(select_top_k(&ranked, &d, 0).is_err());
    }

    #[test]
    fn missing_history_entry_is_reported() {
        let d = generate_tasks(Family::ModAdd, 2, 0).unwrap();
        let mut h = AccuracyHistory::new();
        h.record(&d.examples()[0].id, 0, 1.0);
        h.record(&d.examples()[0].id, 1, 0.0);
        match h.finalize(&d) {
            Err(Error::MissingEntry(msg)) => assert!(msg.contains(&d.examples()[1].id)),
            other => panic!("expected MissingEntry, got {other:?}"),
        }
    }

    #[test]
    fn repeated_visits_in_an_epoch_are_averaged() {
        let mut h = AccuracyHistory::new();
        h.record("a", 0, 0.25);
        h.record("a", 0, 0.75);
        h.record("a", 1, 1.0);
        assert_eq!(h.epochs("a").unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn history_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.jsonl");
        let mut h = AccuracyHistory::new();
        h.record("a", 0, 0.125);
        h.record("a", 1, 0.375);
        h.record("b", 0, 1.0);
        save_history(&h, &path).unwrap();
        assert_eq!(load_history(&path).unwrap(), h);

        fs::write(&path, "{\"id\":\"a\",\"epoch\":0,\"accuracy\":0.5}\nnot json\n").unwrap();
        match load_history(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn variance_is_bounded(series in prop::collection::vec(0.0f64..=1.0, 2..20)) {
            let v = variance_score(&series).unwrap();
            prop_assert!((0.0..=0.25 + 1e-12).contains(&v));
            let shifted: Vec<f64> = series.iter().map(|x| 1.0 - x).collect();
            prop_assert!((variance_score(&shifted).unwrap() - v).abs() < 1e-12);
        }

        #[test]
        fn ranking_is_sorted_permutation(scores in prop::collection::vec(0.0f64..0.25, 1..30)) {
            let input: Vec<(String, f64)> = scores.iter().enumerate().map(|(i, &s)| (i.to_string(), s)).collect();
            let ranked = rank_examples(&input);
            prop_assert_eq!(ranked.len(), input.len());
            for w in ranked.windows(2) {
                prop_assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0.parse::<usize>().unwrap() < w[1].0.parse::<usize>().unwrap()));
            }
        }
    }
}
