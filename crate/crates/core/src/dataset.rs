//! Task-file ingestion, split management, and deterministic minibatch
//! sampling.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::Serialize;
use thiserror::Error;

use crate::eval::Split;
use crate::model::{TaskInstance, TaskType};
use crate::rng::derive_rng;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("line {line}: missing field \"{field}\"")]
    MissingField { field: &'static str, line: usize },
    #[error("duplicate task id \"{id}\" (line {line})")]
    DuplicateId { id: String, line: usize },
    #[error("line {line}: task {id} needs non-empty references for reference-based scoring")]
    MissingReferences { id: String, line: usize },
    #[error("{0}")]
    DomainError(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// An in-memory dataset grouped by split. Tasks are immutable after load.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub train: Vec<TaskInstance>,
    pub val: Vec<TaskInstance>,
    pub test: Vec<TaskInstance>,
    pub source_path: String,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[TaskInstance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Serialize)]
struct TaskLine<'a> {
    id: &'a str,
    input: &'a str,
    references: &'a [String],
    task_type: TaskType,
    split: Split,
    metadata: &'a std::collections::BTreeMap<String, serde_json::Value>,
}

fn require_str<'v>(
    value: &'v serde_json::Value,
    field: &'static str,
    line: usize,
) -> Result<&'v str, DatasetError> {
    value
        .get(field)
        .ok_or(DatasetError::MissingField { field, line })?
        .as_str()
        .ok_or(DatasetError::ParseError {
            line,
            message: format!("field \"{field}\" must be a string"),
        })
}

fn parse_line(raw: &str, line: usize) -> Result<(TaskInstance, Split), DatasetError> {
    let value: serde_json::Value =
        serde_json::from_str(raw).map_err(|e| DatasetError::ParseError {
            line,
            message: e.to_string(),
        })?;
    let id = require_str(&value, "id", line)?.to_string();
    let input = require_str(&value, "input", line)?.to_string();
    let references: Vec<String> = value
        .get("references")
        .ok_or(DatasetError::MissingField {
            field: "references",
            line,
        })?
        .as_array()
        .ok_or(DatasetError::ParseError {
            line,
            message: "field \"references\" must be an array".into(),
        })?
        .iter()
        .map(|v| {
            v.as_str()
                .map(str::to_string)
                .ok_or(DatasetError::ParseError {
                    line,
                    message: "references must contain strings".into(),
                })
        })
        .collect::<Result<_, _>>()?;
    let task_type: TaskType = serde_json::from_value(
        value
            .get("task_type")
            .ok_or(DatasetError::MissingField {
                field: "task_type",
                line,
            })?
            .clone(),
    )
    .map_err(|e| DatasetError::ParseError {
        line,
        message: format!("bad task_type: {e}"),
    })?;
    let split: Split = serde_json::from_value(
        value
            .get("split")
            .ok_or(DatasetError::MissingField {
                field: "split",
                line,
            })?
            .clone(),
    )
    .map_err(|e| DatasetError::ParseError {
        line,
        message: format!("bad split: {e}"),
    })?;
    let metadata = match value.get("metadata") {
        None | Some(serde_json::Value::Null) => Default::default(),
        Some(serde_json::Value::Object(map)) => {
            map.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
        }
        Some(_) => {
            return Err(DatasetError::ParseError {
                line,
                message: "field \"metadata\" must be an object".into(),
            })
        }
    };
    if references.is_empty() && matches!(task_type, TaskType::Reasoning | TaskType::Style) {
        return Err(DatasetError::MissingReferences { id, line });
    }
    Ok((
        TaskInstance {
            id,
            input,
            references,
            task_type,
            metadata,
        },
        split,
    ))
}

/// Parses a JSONL task file (one object per line with id, input, references,
/// task_type, split, metadata) and groups tasks by split. Unknown metadata
/// keys are preserved verbatim. Task ids must be unique across all splits.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset, DatasetError> {
    let path = path.as_ref();
    let raw = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut dataset = Dataset {
        source_path: path.display().to_string(),
        ..Default::default()
    };
    let mut seen: std::collections::BTreeMap<String, usize> = Default::default();
    for (idx, raw_line) in raw.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let (task, split) = parse_line(raw_line, line)?;
        if seen.insert(task.id.clone(), line).is_some() {
            return Err(DatasetError::DuplicateId { id: task.id, line });
        }
        match split {
            Split::Train => dataset.train.push(task),
            Split::Val => dataset.val.push(task),
            Split::Test => dataset.test.push(task),
        }
    }
    Ok(dataset)
}

/// Serializes a dataset back to the JSONL schema. Composing with
/// `load_dataset` is the identity on the documented fields.
pub fn serialize_dataset(dataset: &Dataset) -> String {
    let mut out = String::new();
    for (split, tasks) in [
        (Split::Train, &dataset.train),
        (Split::Val, &dataset.val),
        (Split::Test, &dataset.test),
    ] {
        for task in tasks {
            let line = TaskLine {
                id: &task.id,
                input: &task.input,
                references: &task.references,
                task_type: task.task_type,
                split,
                metadata: &task.metadata,
            };
            out.push_str(&serde_json::to_string(&line).expect("task serialization"));
            out.push('\n');
        }
    }
    out
}

/// Deterministic minibatch: shuffles the split's indices with a generator
/// keyed by (seed, iteration) and takes the first `size` tasks. The same key
/// always yields the same batch.
pub fn sample_minibatch(
    tasks: &[TaskInstance],
    size: usize,
    seed: u64,
    iteration: u64,
) -> Result<Vec<TaskInstance>, DatasetError> {
    if size == 0 || size > tasks.len() {
        return Err(DatasetError::DomainError(format!(
            "minibatch size {size} outside 1..={}",
            tasks.len()
        )));
    }
    let mut indices: Vec<usize> = (0..tasks.len()).collect();
    let mut rng = derive_rng(seed, "minibatch", iteration);
    indices.shuffle(&mut rng);
    Ok(indices
        .into_iter()
        .take(size)
        .map(|i| tasks[i].clone())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;
    use std::io::Write;

    fn write_jsonl(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        file
    }

    const TRAIN: &str = r#"{"id":"a","input":"one","references":["1"],"task_type":"reasoning","split":"train","metadata":{"answer_pattern":"(\\d+)","custom_key":7}}"#;
    const VAL: &str =
        r#"{"id":"b","input":"two","references":["2"],"task_type":"reasoning","split":"val"}"#;
    const TEST: &str =
        r#"{"id":"c","input":"three","references":[],"task_type":"tool-use","split":"test"}"#;

    #[test]
    fn groups_tasks_by_split() {
        let file = write_jsonl(&[TRAIN, VAL, TEST]);
        let dataset = load_dataset(file.path()).unwrap();
        assert_eq!(dataset.train.len(), 1);
        assert_eq!(dataset.val.len(), 1);
        assert_eq!(dataset.test.len(), 1);
        // unknown metadata keys survive
        assert_eq!(
            dataset.train[0].metadata.get("custom_key"),
            Some(&serde_json::json!(7))
        );
    }

    #[test]
    fn missing_field_is_named_with_line() {
        let file = write_jsonl(&[
            TRAIN,
            r#"{"id":"x","references":[],"task_type":"generic","split":"train"}"#,
        ]);
        match load_dataset(file.path()).unwrap_err() {
            DatasetError::MissingField { field, line } => {
                assert_eq!(field, "input");
                assert_eq!(line, 2);
            }
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected_across_splits() {
        let dup = VAL.replace("\"b\"", "\"a\"");
        let file = write_jsonl(&[TRAIN, &dup]);
        assert!(matches!(
            load_dataset(file.path()).unwrap_err(),
            DatasetError::DuplicateId { .. }
        ));
    }

    #[test]
    fn reference_based_types_need_references() {
        let bad = r#"{"id":"x","input":"i","references":[],"task_type":"style","split":"train"}"#;
        let file = write_jsonl(&[bad]);
        assert!(matches!(
            load_dataset(file.path()).unwrap_err(),
            DatasetError::MissingReferences { .. }
        ));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let file = write_jsonl(&[TRAIN, "not json"]);
        match load_dataset(file.path()).unwrap_err() {
            DatasetError::ParseError { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected: {other}"),
        }
    }

    #[test]
    fn serialize_then_load_is_identity() {
        let file = write_jsonl(&[TRAIN, VAL, TEST]);
        let dataset = load_dataset(file.path()).unwrap();
        let serialized = serialize_dataset(&dataset);
        let mut round = tempfile::NamedTempFile::new().unwrap();
        round.write_all(serialized.as_bytes()).unwrap();
        let reloaded = load_dataset(round.path()).unwrap();
        assert_eq!(dataset.train, reloaded.train);
        assert_eq!(dataset.val, reloaded.val);
        assert_eq!(dataset.test, reloaded.test);
    }

    fn tasks(n: usize) -> Vec<TaskInstance> {
        (0..n)
            .map(|i| TaskInstance {
                id: format!("t{i}"),
                input: "x".into(),
                references: vec!["y".into()],
                task_type: TaskType::Reasoning,
                metadata: Default::default(),
            })
            .collect()
    }

    #[test]
    fn minibatch_is_deterministic_per_key() {
        let pool = tasks(10);
        let a = sample_minibatch(&pool, 4, 42, 3).unwrap();
        let b = sample_minibatch(&pool, 4, 42, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_size_minibatch_is_a_permutation() {
        let pool = tasks(6);
        let batch = sample_minibatch(&pool, 6, 7, 0).unwrap();
        let ids: BTreeSet<&str> = batch.iter().map(|t| t.id.as_str()).collect();
        assert_eq!(ids.len(), 6);
    }

    #[test]
    fn minibatch_has_no_duplicates() {
        let pool = tasks(8);
        for iteration in 0..20 {
            let batch = sample_minibatch(&pool, 5, 123, iteration).unwrap();
            let ids: BTreeSet<&str> = batch.iter().map(|t| t.id.as_str()).collect();
            assert_eq!(ids.len(), batch.len());
        }
    }

    #[test]
    fn oversized_minibatch_errors() {
        let pool = tasks(3);
        assert!(sample_minibatch(&pool, 4, 1, 0).is_err());
        assert!(sample_minibatch(&pool, 0, 1, 0).is_err());
    }
}
