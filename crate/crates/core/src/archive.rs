//! Experiment records and the line-delimited archive format.
//!
//! One JSON object per line with keys `id`, `treatment`, `outcome`,
//! `context`, `effect_size` and optional `enriched_treatment`,
//! `enriched_outcome`, `source_ref`. Keys outside that set are kept on the
//! record in [`Experiment::extra`] and written back on save. An optional
//! first line of the form `{"_archive": {...}}` carries archive-level
//! metadata.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

const META_KEY: &str = "_archive";

/// Why a record was rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Violation {
    EmptyId,
    EmptyTreatment,
    EmptyOutcome,
    NonFiniteEffect,
    DuplicateId,
}

impl Violation {
    pub fn as_str(self) -> &'static str {
        match self {
            Violation::EmptyId => "empty-id",
            Violation::EmptyTreatment => "empty-treatment",
            Violation::EmptyOutcome => "empty-outcome",
            Violation::NonFiniteEffect => "non-finite-effect",
            Violation::DuplicateId => "duplicate-id",
        }
    }
}

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` has the wrong type (expected {expected})")]
    FieldType {
        line: usize,
        field: &'static str,
        expected: &'static str,
    },
    #[error("duplicate experiment id {id:?} (lines {first_line} and {line})")]
    DuplicateId {
        id: String,
        first_line: usize,
        line: usize,
    },
    #[error("line {line}: invalid record {id:?}: {}", reason.as_str())]
    Invalid {
        line: usize,
        id: String,
        reason: Violation,
    },
    #[error("unknown experiment id {0:?}")]
    UnknownId(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ArchiveError {
    /// Machine-readable reason for validation failures.
    pub fn violation(&self) -> Option<Violation> {
        match self {
            ArchiveError::Invalid { reason, .. } => Some(*reason),
            ArchiveError::DuplicateId { .. } => Some(Violation::DuplicateId),
            _ => None,
        }
    }
}

/// One archived study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Experiment {
    pub id: String,
    #[serde(rename = "treatment")]
    pub treatment_text: String,
    #[serde(rename = "outcome")]
    pub outcome_text: String,
    #[serde(rename = "context", default)]
    pub context_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enriched_treatment: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enriched_outcome: Option<String>,
    pub effect_size: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_ref: Option<String>,
    /// Keys not recognised by the format, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl Experiment {
    pub fn new(
        id: impl Into<String>,
        treatment: impl Into<String>,
        outcome: impl Into<String>,
        effect_size: f64,
    ) -> Self {
        Self {
            id: id.into(),
            treatment_text: treatment.into(),
            outcome_text: outcome.into(),
            context_text: String::new(),
            enriched_treatment: None,
            enriched_outcome: None,
            effect_size,
            source_ref: None,
            extra: BTreeMap::new(),
        }
    }

    pub fn with_context(mut self, context: impl Into<String>) -> Self {
        self.context_text = context.into();
        self
    }

    pub fn with_enrichment(mut self, treatment: impl Into<String>, outcome: impl Into<String>) -> Self {
        self.enriched_treatment = Some(treatment.into());
        self.enriched_outcome = Some(outcome.into());
        self
    }

    /// Checks the record-level invariants.
    pub fn validate(&self) -> Result<(), Violation> {
        if self.id.trim().is_empty() {
            return Err(Violation::EmptyId);
        }
        if self.treatment_text.trim().is_empty() {
            return Err(Violation::EmptyTreatment);
        }
        if self.outcome_text.trim().is_empty() {
            return Err(Violation::EmptyOutcome);
        }
        if !self.effect_size.is_finite() {
            return Err(Violation::NonFiniteEffect);
        }
        Ok(())
    }

    /// Treatment text used for embedding: enriched when available.
    pub fn embedding_treatment(&self) -> &str {
        non_blank(self.enriched_treatment.as_deref()).unwrap_or(&self.treatment_text)
    }

    pub fn embedding_outcome(&self) -> &str {
        non_blank(self.enriched_outcome.as_deref()).unwrap_or(&self.outcome_text)
    }

    /// True when both embedding texts come from the enriched fields.
    pub fn is_enriched(&self) -> bool {
        non_blank(self.enriched_treatment.as_deref()).is_some()
            && non_blank(self.enriched_outcome.as_deref()).is_some()
    }
}

fn non_blank(s: Option<&str>) -> Option<&str> {
    s.filter(|s| !s.trim().is_empty())
}

/// An ordered, id-unique collection of experiments.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    experiments: Vec<Experiment>,
    pub metadata: BTreeMap<String, Value>,
}

impl Archive {
    /// Builds an archive, rejecting invalid records and duplicate ids.
    /// Line numbers in errors are 1-based positions in `experiments`.
    pub fn new(experiments: Vec<Experiment>) -> Result<Self, ArchiveError> {
        let mut seen = BTreeMap::new();
        for (i, exp) in experiments.iter().enumerate() {
            let line = i + 1;
            exp.validate().map_err(|reason| ArchiveError::Invalid {
                line,
                id: exp.id.clone(),
                reason,
            })?;
            if let Some(first_line) = seen.insert(exp.id.as_str(), line) {
                return Err(ArchiveError::DuplicateId {
                    id: exp.id.clone(),
                    first_line,
                    line,
                });
            }
        }
        Ok(Self {
            experiments,
            metadata: BTreeMap::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.experiments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experiments.is_empty()
    }

    pub fn experiments(&self) -> &[Experiment] {
        &self.experiments
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Experiment> {
        self.experiments.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.experiments.iter().map(|e| e.id.as_str())
    }

    pub fn get(&self, id: &str) -> Option<&Experiment> {
        self.experiments.iter().find(|e| e.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    /// Removes one experiment, returning it and the remaining archive.
    /// `self` is left untouched.
    pub fn hold_out(&self, id: &str) -> Result<(Experiment, Archive), ArchiveError> {
        let pos = self
            .experiments
            .iter()
            .position(|e| e.id == id)
            .ok_or_else(|| ArchiveError::UnknownId(id.to_string()))?;
        let mut rest = self.experiments.clone();
        let target = rest.remove(pos);
        Ok((
            target,
            Archive {
                experiments: rest,
                metadata: self.metadata.clone(),
            },
        ))
    }
}

impl<'a> IntoIterator for &'a Archive {
    type Item = &'a Experiment;
    type IntoIter = std::slice::Iter<'a, Experiment>;

    fn into_iter(self) -> Self::IntoIter {
        self.experiments.iter()
    }
}

fn take_string(
    obj: &mut Map<String, Value>,
    field: &'static str,
    line: usize,
    required: bool,
) -> Result<Option<String>, ArchiveError> {
    match obj.remove(field) {
        None | Some(Value::Null) if !required => Ok(None),
        None | Some(Value::Null) => Err(ArchiveError::MissingField { line, field }),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(_) => Err(ArchiveError::FieldType {
            line,
            field,
            expected: "string",
        }),
    }
}

fn parse_record(text: &str, line: usize) -> Result<Experiment, ArchiveError> {
    let value: Value = serde_json::from_str(text).map_err(|e| ArchiveError::Parse {
        line,
        message: e.to_string(),
    })?;
    let Value::Object(mut obj) = value else {
        return Err(ArchiveError::Parse {
            line,
            message: "expected a JSON object".into(),
        });
    };
    let id = take_string(&mut obj, "id", line, true)?.unwrap_or_default();
    let treatment_text = take_string(&mut obj, "treatment", line, true)?.unwrap_or_default();
    let outcome_text = take_string(&mut obj, "outcome", line, true)?.unwrap_or_default();
    let context_text = take_string(&mut obj, "context", line, false)?.unwrap_or_default();
    let enriched_treatment = take_string(&mut obj, "enriched_treatment", line, false)?;
    let enriched_outcome = take_string(&mut obj, "enriched_outcome", line, false)?;
    let source_ref = take_string(&mut obj, "source_ref", line, false)?;
    let effect_size = match obj.remove("effect_size") {
        None | Some(Value::Null) => {
            return Err(ArchiveError::MissingField {
                line,
                field: "effect_size",
            })
        }
        Some(Value::Number(n)) => n.as_f64().ok_or(ArchiveError::Invalid {
            line,
            id: id.clone(),
            reason: Violation::NonFiniteEffect,
        })?,
        Some(_) => {
            return Err(ArchiveError::FieldType {
                line,
                field: "effect_size",
                expected: "number",
            })
        }
    };
    let exp = Experiment {
        id,
        treatment_text,
        outcome_text,
        context_text,
        enriched_treatment,
        enriched_outcome,
        effect_size,
        source_ref,
        extra: obj.into_iter().collect(),
    };
    exp.validate().map_err(|reason| ArchiveError::Invalid {
        line,
        id: exp.id.clone(),
        reason,
    })?;
    Ok(exp)
}

/// Parses archive text. Blank lines are skipped but still counted.
pub fn parse_archive(text: &str) -> Result<Archive, ArchiveError> {
    let mut experiments = Vec::new();
    let mut metadata = BTreeMap::new();
    let mut first_line_of: BTreeMap<String, usize> = BTreeMap::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        if experiments.is_empty() && metadata.is_empty() && raw.contains(META_KEY) {
            if let Ok(Value::Object(mut obj)) = serde_json::from_str::<Value>(raw) {
                if obj.len() == 1 {
                    if let Some(Value::Object(meta)) = obj.remove(META_KEY) {
                        metadata = meta.into_iter().collect();
                        continue;
                    }
                }
            }
        }
        let exp = parse_record(raw, line)?;
        if let Some(&first_line) = first_line_of.get(&exp.id) {
            return Err(ArchiveError::DuplicateId {
                id: exp.id,
                first_line,
                line,
            });
        }
        first_line_of.insert(exp.id.clone(), line);
        experiments.push(exp);
    }
    Ok(Archive {
        experiments,
        metadata,
    })
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive, ArchiveError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_archive(&text)
}

/// Renders the archive in its on-disk form.
pub fn render_archive(archive: &Archive) -> String {
    let mut out = String::new();
    if !archive.metadata.is_empty() {
        let mut header = Map::new();
        header.insert(
            META_KEY.to_string(),
            Value::Object(archive.metadata.clone().into_iter().collect()),
        );
        out.push_str(&Value::Object(header).to_string());
        out.push('\n');
    }
    for exp in archive {
        // Serialization of a plain struct of strings and a finite f64 cannot fail.
        out.push_str(&serde_json::to_string(exp).expect("experiment serializes"));
        out.push('\n');
    }
    out
}

pub fn save_archive(archive: &Archive, path: impl AsRef<Path>) -> Result<(), ArchiveError> {
    let path = path.as_ref();
    let io_err = |source| ArchiveError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(render_archive(archive).as_bytes()).map_err(io_err)?;
    w.flush().map_err(io_err)
}

/// Collects every invalid or duplicate record instead of stopping at the first.
/// Returns `(line, id, reason)` triples; lines that fail to parse are reported
/// through the error value of the `Result`.
pub fn validate_lines(text: &str) -> Vec<Result<(usize, String, Violation), ArchiveError>> {
    let mut seen = HashSet::new();
    let mut report = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let raw = raw.trim();
        if raw.is_empty() || (line == 1 && raw.starts_with(&format!("{{\"{META_KEY}\""))) {
            continue;
        }
        match parse_record(raw, line) {
            Ok(exp) => {
                if !seen.insert(exp.id.clone()) {
                    report.push(Ok((line, exp.id, Violation::DuplicateId)));
                }
            }
            Err(ArchiveError::Invalid { line, id, reason }) => {
                seen.insert(id.clone());
                report.push(Ok((line, id, reason)));
            }
            Err(e) => report.push(Err(e)),
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, effect: f64) -> String {
        format!(
            r#"{{"id":"{id}","treatment":"t {id}","outcome":"o {id}","context":"c","effect_size":{effect}}}"#
        )
    }

    #[test]
    fn loads_in_file_order() {
        let text = [rec("a", 1.0), rec("b", -0.5), rec("c", 0.0)].join("\n");
        let archive = parse_archive(&text).unwrap();
        assert_eq!(archive.ids().collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(archive.get("b").unwrap().effect_size, -0.5);
    }

    #[test]
    fn duplicate_id_names_the_id() {
        let mut lines: Vec<String> = (1..=9).map(|i| rec(&format!("x{i}"), 1.0)).collect();
        lines[3] = rec("exp-7", 1.0);
        lines[8] = rec("exp-7", 2.0);
        let err = parse_archive(&lines.join("\n")).unwrap_err();
        match &err {
            ArchiveError::DuplicateId { id, first_line, line } => {
                assert_eq!(id, "exp-7");
                assert_eq!((*first_line, *line), (4, 9));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("exp-7"));
        assert_eq!(err.violation(), Some(Violation::DuplicateId));
    }

    #[test]
    fn missing_field_reports_field_and_line() {
        let text = format!("{}\n{}", rec("a", 1.0), r#"{"id":"b","treatment":"t","effect_size":1}"#);
        match parse_archive(&text).unwrap_err() {
            ArchiveError::MissingField { line, field } => assert_eq!((line, field), (2, "outcome")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_has_line_number() {
        let text = format!("{}\n{{not json", rec("a", 1.0));
        assert!(matches!(parse_archive(&text), Err(ArchiveError::Parse { line: 2, .. })));
    }

    #[test]
    fn rejects_blank_treatment_with_reason() {
        let text = r#"{"id":"a","treatment":"  ","outcome":"o","effect_size":1}"#;
        let err = parse_archive(text).unwrap_err();
        assert_eq!(err.violation(), Some(Violation::EmptyTreatment));
    }

    #[test]
    fn zero_effect_is_admitted() {
        let archive = parse_archive(&rec("z", 0.0)).unwrap();
        assert_eq!(archive.len(), 1);
    }

    #[test]
    fn unknown_keys_survive_round_trip() {
        let text = r#"{"id":"a","treatment":"t","outcome":"o","context":"","effect_size":1.5,"journal_year":2019,"n":120}"#;
        let archive = parse_archive(text).unwrap();
        let exp = archive.get("a").unwrap();
        assert_eq!(exp.extra["journal_year"], Value::from(2019));
        let again = parse_archive(&render_archive(&archive)).unwrap();
        assert_eq!(again, archive);
    }

    #[test]
    fn metadata_header_round_trips() {
        let mut archive = parse_archive(&rec("a", 1.0)).unwrap();
        archive.metadata.insert("source".into(), Value::from("toy"));
        let text = render_archive(&archive);
        assert!(text.starts_with(r#"{"_archive":"#));
        assert_eq!(parse_archive(&text).unwrap(), archive);
    }

    #[test]
    fn save_load_round_trip_with_unicode() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let archive = Archive::new(vec![
            Experiment::new("ü-1", "Zielsetzung → Motivation", "創造性", 0.3)
                .with_context("Ärzte 👩‍⚕️")
                .with_enrichment("goal setting", "employee creativity in the organization"),
            Experiment::new("b", "t", "o", -2.0),
        ])
        .unwrap();
        save_archive(&archive, &path).unwrap();
        assert_eq!(load_archive(&path).unwrap(), archive);
    }

    #[test]
    fn empty_archive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        save_archive(&Archive::default(), &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "");
        assert_eq!(load_archive(&path).unwrap().len(), 0);
    }

    #[test]
    fn hold_out_leaves_input_untouched() {
        let archive = parse_archive(&[rec("a", 1.0), rec("b", 2.0), rec("c", 3.0)].join("\n")).unwrap();
        let before = archive.clone();
        let (target, rest) = archive.hold_out("b").unwrap();
        assert_eq!(target.id, "b");
        assert_eq!(rest.ids().collect::<Vec<_>>(), ["a", "c"]);
        assert_eq!(archive, before);
        assert!(matches!(archive.hold_out("zz"), Err(ArchiveError::UnknownId(id)) if id == "zz"));
    }

    #[test]
    fn enrichment_selection() {
        let raw = Experiment::new("a", "creativity", "performance", 1.0);
        assert_eq!(raw.embedding_treatment(), "creativity");
        assert!(!raw.is_enriched());
        let enriched = raw.clone().with_enrichment("employee creativity", "team performance");
        assert_eq!(enriched.embedding_treatment(), "employee creativity");
        assert_eq!(enriched.embedding_outcome(), "team performance");
        assert!(enriched.is_enriched());
    }

    #[test]
    fn validate_lines_reports_every_violation() {
        let text = [
            rec("a", 1.0),
            r#"{"id":"","treatment":"t","outcome":"o","effect_size":1}"#.to_string(),
            rec("a", 2.0),
            r#"{"id":"d","treatment":"t","outcome":"","effect_size":1}"#.to_string(),
        ]
        .join("\n");
        let reasons: Vec<_> = validate_lines(&text)
            .into_iter()
            .map(|r| r.unwrap())
            .map(|(line, _, v)| (line, v))
            .collect();
        assert_eq!(
            reasons,
            [
                (2, Violation::EmptyId),
                (3, Violation::DuplicateId),
                (4, Violation::EmptyOutcome)
            ]
        );
    }
}
