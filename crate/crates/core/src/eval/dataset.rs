//! Dataset files.
//!
//! Game of 24: CSV rows of four numbers (optionally preceded by a rank, or
//! with the four numbers space-separated in one column), or JSONL objects with
//! `numbers` (array) or `puzzle` (string) and an optional `id`/`rank`.
//! VQA / free-form: JSONL objects `{id, question, image?, answer}`; `image` is
//! resolved relative to the dataset file.

use std::collections::HashSet;
use std::path::Path;

use serde_json::Value;
use thiserror::Error;

use crate::model::{parse_four_numbers, TaskExample, TaskKind};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}:{line}: {reason}")]
    Parse { path: String, line: usize, reason: String },
    #[error("cannot read dataset {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

pub fn load_dataset(path: &Path, kind: TaskKind) -> Result<Vec<TaskExample>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let is_jsonl = text.trim_start().starts_with('{');
    let err = |line: usize, reason: String| DatasetError::Parse { path: path.display().to_string(), line, reason };

    let mut out: Vec<TaskExample> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let example = match (kind, is_jsonl) {
            (TaskKind::Game24, false) => match game24_csv_row(raw, out.len() + 1) {
                Some(t) => t,
                // Header row.
                None if out.is_empty() && i == 0 => continue,
                None => return Err(err(line, format!("expected four positive integers, got `{raw}`"))),
            },
            (TaskKind::Game24, true) => game24_json(raw, out.len() + 1).map_err(|r| err(line, r))?,
            (_, _) => qa_json(raw, kind, base).map_err(|r| err(line, r))?,
        };
        example.check().map_err(|r| err(line, r))?;
        if out.iter().any(|t| t.id == example.id) {
            return Err(err(line, format!("duplicate task id `{}`", example.id)));
        }
        out.push(example);
    }
    Ok(out)
}

/// Guess the task kind from the first record.
pub fn infer_kind(path: &Path) -> Result<TaskKind, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let Some(first) = text.lines().find(|l| !l.trim().is_empty()) else {
        return Ok(TaskKind::Freeform);
    };
    if let Ok(Value::Object(obj)) = serde_json::from_str::<Value>(first) {
        if obj.contains_key("numbers") || obj.contains_key("puzzle") {
            return Ok(TaskKind::Game24);
        }
        if obj.contains_key("image") {
            return Ok(TaskKind::Vqa);
        }
        return Ok(TaskKind::Freeform);
    }
    Ok(TaskKind::Game24)
}

fn game24_task(id: String, numbers: [i64; 4]) -> TaskExample {
    let input_text = numbers.iter().map(i64::to_string).collect::<Vec<_>>().join(" ");
    TaskExample { id, input_text, image_ref: None, label: "24".into(), task_kind: TaskKind::Game24 }
}

fn game24_csv_row(raw: &str, ordinal: usize) -> Option<TaskExample> {
    let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
    let ints: Option<Vec<i64>> = fields.iter().map(|f| f.parse::<i64>().ok()).collect();
    if let Some(ints) = ints {
        return match ints.as_slice() {
            [a, b, c, d] => Some(game24_task(format!("g24-{ordinal:04}"), nums([*a, *b, *c, *d])?)),
            [rank, a, b, c, d] => Some(game24_task(format!("g24-rank-{rank}"), nums([*a, *b, *c, *d])?)),
            _ => None,
        };
    }
    // Hugging Face layout: Rank,Puzzles,... with "1 1 4 6" in one column.
    let rank = fields.first().and_then(|f| f.parse::<i64>().ok());
    let numbers = fields.iter().find_map(|f| parse_four_numbers(f).filter(|_| f.contains(' ')))?;
    let id = match rank {
        Some(r) => format!("g24-rank-{r}"),
        None => format!("g24-{ordinal:04}"),
    };
    Some(game24_task(id, numbers))
}

fn nums(n: [i64; 4]) -> Option<[i64; 4]> {
    n.iter().all(|x| *x > 0).then_some(n)
}

fn game24_json(raw: &str, ordinal: usize) -> Result<TaskExample, String> {
    let v: Value = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    let numbers = match (v.get("numbers"), v.get("puzzle")) {
        (Some(Value::Array(xs)), _) => {
            let ints: Option<Vec<i64>> = xs.iter().map(Value::as_i64).collect();
            ints.and_then(|v| <[i64; 4]>::try_from(v).ok()).and_then(nums)
        }
        (_, Some(Value::String(s))) => parse_four_numbers(s),
        _ => return Err("record needs `numbers` or `puzzle`".into()),
    }
    .ok_or("expected exactly four positive integers")?;
    let id = match (v.get("id"), v.get("rank")) {
        (Some(Value::String(s)), _) => s.clone(),
        (Some(Value::Number(n)), _) => n.to_string(),
        (_, Some(r)) => format!("g24-rank-{r}"),
        _ => format!("g24-{ordinal:04}"),
    };
    Ok(game24_task(id, numbers))
}

fn qa_json(raw: &str, kind: TaskKind, base: &Path) -> Result<TaskExample, String> {
    let v: Value = serde_json::from_str(raw).map_err(|e| e.to_string())?;
    let field = |name: &str| -> Result<String, String> {
        match v.get(name) {
            Some(Value::String(s)) => Ok(s.clone()),
            Some(Value::Number(n)) => Ok(n.to_string()),
            Some(Value::Bool(b)) => Ok(if *b { "yes" } else { "no" }.into()),
            _ => Err(format!("missing field `{name}`")),
        }
    };
    let image_ref = v
        .get("image")
        .and_then(Value::as_str)
        .map(|img| base.join(img).display().to_string());
    Ok(TaskExample {
        id: field("id")?,
        input_text: field("question")?,
        image_ref,
        label: field("answer")?,
        task_kind: kind,
    })
}

/// Ids must be unique; used by callers that assemble datasets in memory.
pub fn check_unique_ids(tasks: &[TaskExample]) -> Result<(), String> {
    let mut seen = HashSet::new();
    for t in tasks {
        if !seen.insert(t.id.as_str()) {
            return Err(format!("duplicate task id `{}`", t.id));
        }
    }
    Ok(())
}
