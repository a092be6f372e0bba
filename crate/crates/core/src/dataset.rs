//! Labeled payload tables: CSV / JSON-lines ingestion and the stratified
//! train/val/test split with whole classes held out as "unseen".

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SplitSection;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub payload: String,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Jsonl,
}

impl Format {
    /// Guesses from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl" | "json" | "ndjson") => Self::Jsonl,
            _ => Self::Csv,
        }
    }
}

/// Largest fraction of malformed lines tolerated before ingestion aborts.
pub const MAX_BAD_FRACTION: f64 = 0.01;

#[derive(Deserialize)]
struct LooseRecord {
    payload: Option<String>,
    label: Option<String>,
}

impl LooseRecord {
    fn complete(self) -> Option<DatasetRecord> {
        Some(DatasetRecord {
            payload: self.payload?,
            label: self.label?,
        })
    }
}

/// Reads records in file order. Lines missing a field are skipped with a
/// warning unless they exceed [`MAX_BAD_FRACTION`] of the file.
pub fn ingest(path: &Path, format: Format) -> Result<Vec<DatasetRecord>> {
    let dataset_err = |detail: String| Error::Dataset {
        path: path.to_path_buf(),
        detail,
    };
    let file = File::open(path).map_err(|e| dataset_err(e.to_string()))?;
    let mut records = Vec::new();
    let mut bad: Vec<(usize, String)> = Vec::new();
    let mut total = 0usize;
    match format {
        Format::Csv => {
            let mut reader = csv::ReaderBuilder::new()
                .flexible(true)
                .from_reader(BufReader::new(file));
            let headers = reader.headers().map_err(|e| dataset_err(e.to_string()))?.clone();
            let column = |field: &str| {
                headers
                    .iter()
                    .position(|h| h == field)
                    .ok_or_else(|| dataset_err(format!("header has no `{field}` column")))
            };
            let (pi, li) = (column("payload")?, column("label")?);
            for (i, row) in reader.records().enumerate() {
                total += 1;
                match row {
                    Ok(row) => match (row.get(pi), row.get(li)) {
                        (Some(p), Some(l)) => records.push(DatasetRecord {
                            payload: p.to_owned(),
                            label: l.to_owned(),
                        }),
                        _ => bad.push((i + 2, "missing payload or label".to_owned())),
                    },
                    Err(e) => bad.push((i + 2, e.to_string())),
                }
            }
        }
        Format::Jsonl => {
            for (i, line) in BufReader::new(file).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                total += 1;
                match serde_json::from_str::<LooseRecord>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.complete().ok_or_else(|| "missing payload or label".to_owned()))
                {
                    Ok(r) => records.push(r),
                    Err(e) => bad.push((i + 1, e)),
                }
            }
        }
    }
    for (line, e) in &bad {
        warn!("{}:{line}: {e}", path.display());
    }
    if !bad.is_empty() && bad.len() as f64 > MAX_BAD_FRACTION * total as f64 {
        return Err(dataset_err(format!(
            "{} of {total} lines malformed (first at line {}: {})",
            bad.len(),
            bad[0].0,
            bad[0].1
        )));
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[DatasetRecord], format: Format) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let out = BufWriter::new(File::create(&tmp)?);
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                for r in records {
                    w.serialize(r).map_err(|e| Error::Io(e.into()))?;
                }
                w.flush()?;
            }
            Format::Jsonl => {
                let mut out = out;
                for r in records {
                    serde_json::to_writer(&mut out, r)?;
                    out.write_all(b"\n")?;
                }
                out.flush()?;
            }
        }
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Sorted distinct labels.
pub fn label_table(records: &[DatasetRecord]) -> Vec<String> {
    let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
    labels.sort();
    labels.dedup();
    labels
}

/// A record with a stable identifier (its position in the ingested file).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub payload: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<Item>,
    pub val: Vec<Item>,
    pub test: Vec<Item>,
    pub unseen: Vec<Item>,
}

/// Moves every record of an unseen class into `unseen`, then splits each
/// remaining class by the configured ratios after a seeded shuffle.
pub fn split(records: &[DatasetRecord], ratios: &SplitSection, seed: u64) -> Result<Splits> {
    let mut by_class: BTreeMap<&str, Vec<Item>> = BTreeMap::new();
    for (id, r) in records.iter().enumerate() {
        by_class.entry(r.label.as_str()).or_default().push(Item {
            id,
            payload: r.payload.clone(),
            label: r.label.clone(),
        });
    }
    for name in &ratios.unseen {
        if !by_class.contains_key(name.as_str()) {
            return Err(Error::config(format!("unseen class `{name}` does not occur in the data")));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Splits {
        train: vec![],
        val: vec![],
        test: vec![],
        unseen: vec![],
    };
    for (label, mut items) in by_class {
        if ratios.unseen.iter().any(|u| u == label) {
            out.unseen.extend(items);
            continue;
        }
        if items.len() < ratios.min_per_class {
            return Err(Error::config(format!(
                "class `{label}` has {} records, need at least {}",
                items.len(),
                ratios.min_per_class
            )));
        }
        items.shuffle(&mut rng);
        let n = items.len();
        let n_train = (ratios.train * n as f64).round() as usize;
        let n_val = ((ratios.val * n as f64).round() as usize).min(n - n_train);
        let mut rest = items.split_off(n_train);
        out.train.extend(items);
        let test = rest.split_off(n_val);
        out.val.extend(rest);
        out.test.extend(test);
    }
    if out.train.is_empty() {
        return Err(Error::config("no trainable classes left after the unseen holdout"));
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        part.shuffle(&mut rng);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn rec(p: &str, l: &str) -> DatasetRecord {
        DatasetRecord {
            payload: p.into(),
            label: l.into(),
        }
    }

    #[test]
    fn csv_two_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "payload,label\na=1,Normal\n\"b=' or 1=1\",SQLi\n").unwrap();
        let r = ingest(&p, Format::Csv).unwrap();
        assert_eq!(r, vec![rec("a=1", "Normal"), rec("b=' or 1=1", "SQLi")]);
    }

    #[test]
    fn jsonl_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "{\"payload\":\"a=1\",\"label\":\"Normal\"}\n").unwrap();
        assert_eq!(ingest(&p, Format::Jsonl).unwrap(), vec![rec("a=1", "Normal")]);
    }

    #[test]
    fn quoted_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let records = vec![
            rec("q=a,b,c&x=%27%20or%201%3D1", "sqli"),
            rec("say \"hi\", then\nleave", "normal"),
            rec("", "empty"),
        ];
        write_records(&p, &records, Format::Csv).unwrap();
        assert_eq!(ingest(&p, Format::Csv).unwrap(), records);
        let q = dir.path().join("d.jsonl");
        write_records(&q, &records, Format::Jsonl).unwrap();
        assert_eq!(ingest(&q, Format::Jsonl).unwrap(), records);
    }

    #[test]
    fn malformed_lines_abort_above_threshold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut text = String::new();
        for i in 0..200 {
            text.push_str(&format!("{{\"payload\":\"x{i}\",\"label\":\"a\"}}\n"));
        }
        text.push_str("{\"payload\":\"only\"}\n");
        std::fs::write(&p, &text).unwrap();
        assert_eq!(ingest(&p, Format::Jsonl).unwrap().len(), 200);
        text.push_str("{\"label\":\"only\"}\n{\"label\":\"again\"}\n");
        std::fs::write(&p, &text).unwrap();
        let err = ingest(&p, Format::Jsonl).unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }), "{err}");
    }

    #[test]
    fn missing_csv_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "text,label\na,b\n").unwrap();
        assert!(matches!(ingest(&p, Format::Csv), Err(Error::Dataset { .. })));
    }

    fn corpus() -> Vec<DatasetRecord> {
        let mut out = Vec::new();
        for (label, n) in [("a", 30), ("b", 30), ("c", 30), ("held", 10)] {
            for i in 0..n {
                out.push(rec(&format!("{label}{i}"), label));
            }
        }
        out
    }

    #[test]
    fn stratified_split_sizes() {
        let ratios = SplitSection {
            unseen: vec!["held".into()],
            ..Default::default()
        };
        let s = split(&corpus(), &ratios, 3).unwrap();
        assert_eq!(
            (s.train.len(), s.val.len(), s.test.len(), s.unseen.len()),
            (72, 9, 9, 10)
        );
        for part in [&s.train, &s.val, &s.test] {
            for label in ["a", "b", "c"] {
                let k = part.iter().filter(|i| i.label == label).count();
                assert_eq!(k * 30, part.len() * 10);
            }
        }
    }

    #[test]
    fn split_is_a_seeded_partition() {
        let ratios = SplitSection {
            unseen: vec!["held".into()],
            ..Default::default()
        };
        let s = split(&corpus(), &ratios, 3).unwrap();
        assert_eq!(s, split(&corpus(), &ratios, 3).unwrap());
        assert_ne!(s.train, split(&corpus(), &ratios, 4).unwrap().train);
        let mut seen = HashSet::new();
        for part in [&s.train, &s.val, &s.test, &s.unseen] {
            for i in part.iter() {
                assert!(seen.insert(i.id));
            }
        }
        assert_eq!(seen.len(), 100);
        assert!(s.unseen.iter().all(|i| i.label == "held"));
    }

    #[test]
    fn small_class_is_a_config_error() {
        let mut c = corpus();
        c.truncate(95);
        assert!(matches!(split(&c, &SplitSection::default(), 0), Err(Error::Config(_))));
    }
}
