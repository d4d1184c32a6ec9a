//! Line-delimited JSON files for datasets and ground truth, JSON files
//! for weights.
//!
//! Every line-delimited file starts with a header record carrying a
//! `format` tag and `format_version`, followed by one record per line.
//! Writing is canonical: fixed field order, shortest round-trip float
//! representation, `\n` line endings, so write-read-write is
//! byte-identical.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::truth::TruthTable;
use crate::types::{
    CandidateScores, LogprobDataset, MixtureWeights, RowLabel, ScoreMode, SubsetIndicator,
};

pub const DATASET_FORMAT: &str = "pepr-dataset";
pub const TRUTH_FORMAT: &str = "pepr-truth";
pub const WEIGHTS_FORMAT: &str = "pepr-weights";
pub const FORMAT_VERSION: u32 = 1;
/// Upper bound on candidate blocks per row.
pub const MAX_CANDIDATES: usize = 64;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    format: String,
    format_version: u32,
    mode: ScoreMode,
    k: usize,
    n: usize,
    per_token_normalized: bool,
    element_ids: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classes: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    candidates: Option<usize>,
}

#[derive(Debug, Serialize)]
struct RowOut<'a> {
    row: usize,
    delta: &'a [f64],
    full: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    label: Option<&'a RowLabel>,
    #[serde(skip_serializing_if = "Option::is_none")]
    candidates: Option<&'a [CandidateScores]>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowIn {
    row: usize,
    delta: Vec<Option<f64>>,
    full: Option<f64>,
    #[serde(default)]
    label: Option<RowLabel>,
    #[serde(default)]
    candidates: Option<Vec<CandidateIn>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CandidateIn {
    delta: Vec<Option<f64>>,
    full: Option<f64>,
}

fn json_line<T: Serialize>(out: &mut impl Write, value: &T) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(|e| Error::Io(e.to_string()))?;
    out.write_all(b"\n")?;
    Ok(())
}

fn check_tag(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::SchemaMismatch(format!(
            "expected a `{expected}` file, found `{format}`"
        )));
    }
    if version != FORMAT_VERSION {
        return Err(Error::SchemaMismatch(format!(
            "unsupported format_version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    Ok(())
}

fn finite(values: &[Option<f64>], line: usize) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|v| match v {
            Some(x) if x.is_finite() => Ok(*x),
            _ => Err(Error::NonFiniteValue { line }),
        })
        .collect()
}

/// Reads non-empty lines with their 1-based line numbers.
fn lines(reader: impl Read) -> impl Iterator<Item = Result<(usize, String)>> {
    BufReader::new(reader)
        .lines()
        .enumerate()
        .map(|(i, l)| l.map(|l| (i + 1, l)).map_err(Error::from))
        .filter(|r| !matches!(r, Ok((_, l)) if l.trim().is_empty()))
}

fn parse<'a, T: Deserialize<'a>>(line: usize, text: &'a str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line,
        message: e.to_string(),
    })
}

pub fn write_dataset(dataset: &LogprobDataset, out: &mut impl Write) -> Result<()> {
    let classes = dataset.labels().and_then(|labels| {
        let set: BTreeSet<&str> = labels.iter().filter_map(|l| l.class.as_deref()).collect();
        (!set.is_empty()).then(|| set.into_iter().map(str::to_owned).collect())
    });
    let header = DatasetHeader {
        format: DATASET_FORMAT.into(),
        format_version: FORMAT_VERSION,
        mode: dataset.mode(),
        k: dataset.k(),
        n: dataset.n(),
        per_token_normalized: dataset.per_token_normalized(),
        element_ids: (0..dataset.k()).collect(),
        classes,
        candidates: dataset.candidates().map(|_| dataset.candidate_count()),
    };
    json_line(out, &header)?;
    for i in 0..dataset.n() {
        json_line(
            out,
            &RowOut {
                row: i,
                delta: dataset.row(i),
                full: dataset.full_library()[i],
                label: dataset.labels().map(|l| &l[i]),
                candidates: dataset.candidates().map(|c| c[i].as_slice()),
            },
        )?;
    }
    Ok(())
}

pub fn dataset_to_string(dataset: &LogprobDataset) -> Result<String> {
    let mut buf = Vec::new();
    write_dataset(dataset, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

pub fn read_dataset(reader: impl Read) -> Result<LogprobDataset> {
    let mut it = lines(reader);
    let (hline, htext) = it
        .next()
        .ok_or_else(|| Error::SchemaMismatch("empty dataset file".into()))??;
    let header: DatasetHeader = parse(hline, &htext)?;
    check_tag(&header.format, header.format_version, DATASET_FORMAT)?;
    if header.k == 0 {
        return Err(Error::SchemaMismatch("header k must be >= 1".into()));
    }
    if header.element_ids != (0..header.k).collect::<Vec<_>>() {
        return Err(Error::SchemaMismatch(
            "element_ids must list 0..k-1 in order".into(),
        ));
    }
    if let Some(c) = header.candidates {
        if c == 0 || c > MAX_CANDIDATES {
            return Err(Error::SchemaMismatch(format!(
                "candidate count {c} outside 1..={MAX_CANDIDATES}"
            )));
        }
    }
    let classes: Option<BTreeSet<String>> =
        header.classes.as_ref().map(|c| c.iter().cloned().collect());

    let mut delta = Vec::with_capacity(header.n);
    let mut full = Vec::with_capacity(header.n);
    let mut labels = Vec::with_capacity(header.n);
    let mut any_label = false;
    let mut candidates = Vec::new();
    for item in it {
        let (line, text) = item?;
        let row: RowIn = parse(line, &text)?;
        let index = delta.len();
        if row.row != index {
            return Err(Error::Parse {
                line,
                message: format!("row {} out of order, expected row {index}", row.row),
            });
        }
        if row.delta.len() != header.k {
            return Err(Error::Parse {
                line,
                message: format!(
                    "row {index} has {} element scores, expected {}",
                    row.delta.len(),
                    header.k
                ),
            });
        }
        delta.push(finite(&row.delta, line)?);
        full.push(finite(&[row.full], line)?[0]);
        if let Some(label) = &row.label {
            if let (Some(set), Some(class)) = (&classes, &label.class) {
                if !set.contains(class) {
                    return Err(Error::SchemaMismatch(format!(
                        "line {line}: class `{class}` missing from the header"
                    )));
                }
            }
        }
        any_label |= row.label.is_some();
        labels.push(row.label.unwrap_or_default());
        match (header.candidates, row.candidates) {
            (None, None) => {}
            (Some(c), Some(group)) => {
                if group.len() != c {
                    return Err(Error::Parse {
                        line,
                        message: format!(
                            "row {index} has {} candidates, header declares {c}",
                            group.len()
                        ),
                    });
                }
                let mut blocks = Vec::with_capacity(c);
                for cand in group {
                    if cand.delta.len() != header.k {
                        return Err(Error::Parse {
                            line,
                            message: format!(
                                "row {index} candidate has {} element scores, expected {}",
                                cand.delta.len(),
                                header.k
                            ),
                        });
                    }
                    blocks.push(CandidateScores {
                        delta: finite(&cand.delta, line)?,
                        full: finite(&[cand.full], line)?[0],
                    });
                }
                candidates.push(blocks);
            }
            (Some(_), None) => {
                return Err(Error::Parse {
                    line,
                    message: format!("row {index} lacks the declared candidate blocks"),
                })
            }
            (None, Some(_)) => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "row {index} has candidate blocks the header does not declare"
                    ),
                })
            }
        }
    }
    if delta.len() != header.n {
        return Err(Error::SchemaMismatch(format!(
            "header declares n = {} but the body has {} rows",
            header.n,
            delta.len()
        )));
    }
    let mut ds = LogprobDataset::with_k(
        header.mode,
        header.k,
        delta,
        full,
        header.per_token_normalized,
    )?;
    if any_label {
        ds = ds.with_labels(labels)?;
    }
    if header.candidates.is_some() {
        ds = ds.with_candidates(candidates)?;
    }
    Ok(ds)
}

pub fn dataset_from_str(text: &str) -> Result<LogprobDataset> {
    read_dataset(text.as_bytes())
}

pub fn save_dataset(dataset: &LogprobDataset, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_dataset(dataset, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<LogprobDataset> {
    read_dataset(File::open(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthHeader {
    format: String,
    format_version: u32,
    mode: ScoreMode,
    k: usize,
    n: usize,
    columns: usize,
    subsets: usize,
}

#[derive(Debug, Serialize)]
struct TruthOut<'a> {
    subset: Vec<usize>,
    scores: &'a [Vec<f64>],
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TruthIn {
    subset: Vec<usize>,
    scores: Vec<Vec<Option<f64>>>,
}

/// Writes a truth table; an empty `subset` list is the base prompt.
pub fn write_truth(table: &TruthTable, out: &mut impl Write) -> Result<()> {
    use crate::truth::SubsetTruth;
    json_line(
        out,
        &TruthHeader {
            format: TRUTH_FORMAT.into(),
            format_version: FORMAT_VERSION,
            mode: table.mode(),
            k: table.k(),
            n: table.n(),
            columns: table.columns(),
            subsets: table.len(),
        },
    )?;
    for s in table.subsets() {
        json_line(
            out,
            &TruthOut {
                subset: s.to_indices(),
                scores: table.get(s).expect("listed subsets are present"),
            },
        )?;
    }
    Ok(())
}

pub fn read_truth(reader: impl Read) -> Result<TruthTable> {
    let mut it = lines(reader);
    let (hline, htext) = it
        .next()
        .ok_or_else(|| Error::SchemaMismatch("empty truth file".into()))??;
    let header: TruthHeader = parse(hline, &htext)?;
    check_tag(&header.format, header.format_version, TRUTH_FORMAT)?;
    let mut table = TruthTable::new(header.mode, header.k, header.n, header.columns)
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    for item in it {
        let (line, text) = item?;
        let rec: TruthIn = parse(line, &text)?;
        let subset =
            SubsetIndicator::from_indices(header.k, &rec.subset).map_err(|e| Error::Parse {
                line,
                message: e.to_string(),
            })?;
        let scores = rec
            .scores
            .iter()
            .map(|r| finite(r, line))
            .collect::<Result<Vec<_>>>()?;
        table.insert(subset, scores).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
    }
    if table.len() != header.subsets {
        return Err(Error::SchemaMismatch(format!(
            "header declares {} subsets but the body has {}",
            header.subsets,
            table.len()
        )));
    }
    Ok(table)
}

pub fn save_truth(table: &TruthTable, path: impl AsRef<Path>) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write_truth(table, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_truth(path: impl AsRef<Path>) -> Result<TruthTable> {
    read_truth(File::open(path)?)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WeightsFile {
    format: String,
    format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    lambda: Vec<f64>,
    diagnostics: crate::types::FitDiagnostics,
}

/// Pretty-printed weights with their fit diagnostics. `mode` records which
/// regression produced them.
pub fn weights_to_string(weights: &MixtureWeights, mode: Option<&str>) -> Result<String> {
    let file = WeightsFile {
        format: WEIGHTS_FORMAT.into(),
        format_version: FORMAT_VERSION,
        mode: mode.map(str::to_owned),
        lambda: weights.lambda().to_vec(),
        diagnostics: weights.diagnostics.clone(),
    };
    let mut s = serde_json::to_string_pretty(&file).map_err(|e| Error::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Returns the weights and the recorded regression mode, if any.
pub fn weights_from_str(text: &str) -> Result<(MixtureWeights, Option<String>)> {
    let file: WeightsFile = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    check_tag(&file.format, file.format_version, WEIGHTS_FORMAT)?;
    let w = MixtureWeights::with_diagnostics(file.lambda, file.diagnostics)
        .map_err(|e| Error::SchemaMismatch(e.to_string()))?;
    Ok((w, file.mode))
}

pub fn save_weights(
    weights: &MixtureWeights,
    mode: Option<&str>,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, weights_to_string(weights, mode)?)?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(MixtureWeights, Option<String>)> {
    weights_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};
    use crate::truth::SubsetTruth;

    fn sample() -> LogprobDataset {
        let mut cfg = SynthConfig::new(3, 5, ScoreMode::Reference, 1);
        cfg.candidate_classes = 2;
        generate(&cfg).unwrap().dataset
    }

    #[test]
    fn dataset_round_trip_is_byte_identical() {
        let ds = sample();
        let text = dataset_to_string(&ds).unwrap();
        let back = dataset_from_str(&text).unwrap();
        assert_eq!(back, ds);
        assert_eq!(dataset_to_string(&back).unwrap(), text);
    }

    #[test]
    fn preference_round_trip() {
        let ds = generate(&SynthConfig::new(4, 7, ScoreMode::Preference, 2))
            .unwrap()
            .dataset;
        assert_eq!(
            dataset_from_str(&dataset_to_string(&ds).unwrap()).unwrap(),
            ds
        );
    }

    #[test]
    fn short_row_names_its_line() {
        let text = "{\"format\":\"pepr-dataset\",\"format_version\":1,\"mode\":\"reference\",\"k\":3,\"n\":2,\"per_token_normalized\":false,\"element_ids\":[0,1,2]}\n\
                    {\"row\":0,\"delta\":[-1.0,-2.0,-3.0],\"full\":-2.0}\n\
                    {\"row\":1,\"delta\":[-1.0,-2.0],\"full\":-2.0}\n";
        match dataset_from_str(text) {
            Err(Error::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("row 1"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn row_count_mismatch_is_schema_error() {
        let text = dataset_to_string(&sample()).unwrap();
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(matches!(
            dataset_from_str(&truncated),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn null_value_is_non_finite() {
        let text = "{\"format\":\"pepr-dataset\",\"format_version\":1,\"mode\":\"preference\",\"k\":2,\"n\":1,\"per_token_normalized\":false,\"element_ids\":[0,1]}\n\
                    {\"row\":0,\"delta\":[1.0,null],\"full\":0.5}\n";
        assert!(matches!(
            dataset_from_str(text),
            Err(Error::NonFiniteValue { line: 2 })
        ));
    }

    #[test]
    fn unknown_version_rejected() {
        let text = dataset_to_string(&sample()).unwrap().replacen(
            "\"format_version\":1",
            "\"format_version\":9",
            1,
        );
        assert!(matches!(
            dataset_from_str(&text),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn truth_round_trip() {
        let inst = generate(&SynthConfig::new(3, 4, ScoreMode::Preference, 3)).unwrap();
        let subsets: Vec<_> = crate::subsets::enumerate_subsets(3, 2).unwrap().collect();
        let table = TruthTable::capture(&inst.truth, &subsets).unwrap();
        let mut buf = Vec::new();
        write_truth(&table, &mut buf).unwrap();
        let back = read_truth(buf.as_slice()).unwrap();
        assert_eq!(back, table);
        assert_eq!(back.base_scores(), inst.truth.base_scores());
    }

    #[test]
    fn weights_round_trip() {
        let w = MixtureWeights::new(vec![0.25, 0.75]).unwrap();
        let s = weights_to_string(&w, Some("PEPR-R")).unwrap();
        let (back, mode) = weights_from_str(&s).unwrap();
        assert_eq!(back, w);
        assert_eq!(mode.as_deref(), Some("PEPR-R"));
    }
    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.jsonl");
        let ds = sample();
        save_dataset(&ds, &path).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        let wpath = dir.path().join("weights.json");
        let w = MixtureWeights::new(vec![0.5, 0.5]).unwrap();
        save_weights(&w, None, &wpath).unwrap();
        assert_eq!(load_weights(&wpath).unwrap(), (w, None));
        assert!(matches!(
            load_dataset(dir.path().join("missing")),
            Err(Error::Io(_))
        ));
    }
}
