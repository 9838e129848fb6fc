use std::fs::File;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Frame};
use crate::error::{Error, Result};

/// Column mapping for CSV ingestion. Every field has the canonical default;
/// a sidecar JSON manifest can override any of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub user: String,
    pub stimulus: String,
    pub timestamp: String,
    pub label: String,
    /// Feature columns in order. `None` takes every column not named above, in header order.
    pub features: Option<Vec<String>>,
    /// Class names. `None` derives `class0..class{K-1}` from the largest label seen.
    pub class_names: Option<Vec<String>>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            stimulus: "stimulus_id".into(),
            timestamp: "timestamp_ms".into(),
            label: "label".into(),
            features: None,
            class_names: None,
        }
    }
}

impl CsvSchema {
    /// Reads a JSON manifest. Missing keys keep their defaults.
    pub fn from_manifest(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(path)?)?)
    }
}

fn column(header: &csv::StringRecord, name: &str) -> Result<usize> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn parse<T: std::str::FromStr>(record: &csv::StringRecord, idx: usize, row: usize, name: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    let cell = record.get(idx).unwrap_or("");
    cell.trim().parse::<T>().map_err(|e| Error::Parse {
        row,
        column: name.to_string(),
        message: format!("`{cell}`: {e}"),
    })
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)?;
    let header = reader.headers()?.clone();
    let user = column(&header, &schema.user)?;
    let stimulus = column(&header, &schema.stimulus)?;
    let timestamp = column(&header, &schema.timestamp)?;
    let label = column(&header, &schema.label)?;
    let feature_names: Vec<String> = match &schema.features {
        Some(names) => names.clone(),
        None => header
            .iter()
            .enumerate()
            .filter(|(i, _)| ![user, stimulus, timestamp, label].contains(i))
            .map(|(_, h)| h.to_string())
            .collect(),
    };
    let feature_idx = feature_names
        .iter()
        .map(|n| column(&header, n))
        .collect::<Result<Vec<_>>>()?;

    let mut frames = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // row numbers are 1-based data rows (header excluded)
        let row = i + 1;
        if record.len() != header.len() {
            return Err(Error::Format {
                row,
                expected: header.len(),
                found: record.len(),
            });
        }
        let features = feature_idx
            .iter()
            .zip(&feature_names)
            .map(|(&j, name)| parse::<f64>(&record, j, row, name))
            .collect::<Result<Vec<_>>>()?;
        frames.push(Frame {
            user_id: parse(&record, user, row, &schema.user)?,
            stimulus_id: parse(&record, stimulus, row, &schema.stimulus)?,
            timestamp_ms: parse(&record, timestamp, row, &schema.timestamp)?,
            features,
            label: parse(&record, label, row, &schema.label)?,
        });
    }

    let class_names = match &schema.class_names {
        Some(names) => names.clone(),
        None => {
            let k = frames.iter().map(|f| f.label + 1).max().unwrap_or(2).max(2);
            (0..k).map(|c| format!("class{c}")).collect()
        }
    };
    Dataset::new(feature_names, class_names, frames)
}

/// Writes the canonical layout: identity columns first, then features. Floats use
/// the shortest decimal that parses back to the same value.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(File::create(path)?);
    let mut header = vec![
        "user_id".to_string(),
        "stimulus_id".into(),
        "timestamp_ms".into(),
        "label".into(),
    ];
    header.extend(ds.feature_names().iter().cloned());
    writeln!(out, "{}", header.join(","))?;
    for f in ds.frames() {
        write!(out, "{},{},{},{}", f.user_id, f.stimulus_id, f.timestamp_ms, f.label)?;
        for x in &f.features {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};

    fn write(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_three_rows() {
        let f = write("user_id,stimulus_id,timestamp_ms,label,a,b\n0,0,0,1,0.5,1\n0,0,100,0,2,3\n1,1,0,1,-1,4e-3\n");
        let ds = load_csv(f.path(), &CsvSchema::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.feature_names(), ["a", "b"]);
        assert_eq!(ds.frames()[2].features, vec![-1.0, 0.004]);
    }

    #[test]
    fn missing_label_column() {
        let f = write("user_id,stimulus_id,timestamp_ms,a\n0,0,0,1\n");
        let err = load_csv(f.path(), &CsvSchema::default()).unwrap_err();
        assert!(matches!(&err, Error::MissingColumn(c) if c == "label"), "{err}");
    }

    #[test]
    fn bad_cell_reports_row() {
        let f = write("user_id,stimulus_id,timestamp_ms,label,a\n0,0,0,1,1\n0,0,0,1,oops\n");
        match load_csv(f.path(), &CsvSchema::default()).unwrap_err() {
            Error::Parse { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "a");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn ragged_row_is_format_error() {
        let f = write("user_id,stimulus_id,timestamp_ms,label,a\n0,0,0,1,1,9\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::default()).unwrap_err(),
            Error::Format { row: 1, expected: 5, found: 6 }
        ));
    }

    #[test]
    fn manifest_overrides_names() {
        let f = write("uid,scene,t,y,x0\n3,1,10,1,0.25\n");
        let m = write(r#"{"user":"uid","stimulus":"scene","timestamp":"t","label":"y"}"#);
        let ds = load_csv(f.path(), &CsvSchema::from_manifest(m.path()).unwrap()).unwrap();
        assert_eq!(ds.frames()[0].user_id, 3);
        assert_eq!(ds.feature_names(), ["x0"]);
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(16))]
        #[test]
        fn write_then_load_is_identity(seed in 0u64..1000, scale in 1e-6f64..1e6) {
            let cfg = SynthConfig { users: 3, stimuli: 2, frames_per_user_stimulus: 4, seed, ..SynthConfig::default() };
            let base = synth_generate(&cfg).unwrap();
            let scaled: Vec<f64> = base.feature_matrix().iter().map(|x| x * scale).collect();
            let ds = base.with_feature_matrix(&scaled).unwrap();
            let tmp = tempfile::NamedTempFile::new().unwrap();
            write_csv(&ds, tmp.path()).unwrap();
            let schema = CsvSchema { class_names: Some(ds.class_names().to_vec()), ..CsvSchema::default() };
            let back = load_csv(tmp.path(), &schema).unwrap();
            proptest::prop_assert_eq!(back, ds);
        }
    }
}
