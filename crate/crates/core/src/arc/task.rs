//! ARC task JSON: `{"train": [{"input", "output"}...], "test": [{"input", "output"?}...]}`.

use serde_json::{json, Map, Value};

use super::grid::{Grid, MAX_GRID, NUM_COLORS};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub input: Grid,
    pub output: Grid,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Query {
    pub input: Grid,
    pub expected: Option<Grid>,
}

/// Few-shot demonstrations plus query inputs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskInstance {
    pub demos: Vec<Example>,
    pub queries: Vec<Query>,
}

impl TaskInstance {
    pub fn new(demos: Vec<Example>, queries: Vec<Query>) -> Result<Self> {
        if demos.is_empty() {
            return Err(Error::contract("task needs at least one demonstration"));
        }
        Ok(TaskInstance { demos, queries })
    }

    /// Every grid in the task, demos first.
    pub fn grids(&self) -> impl Iterator<Item = &Grid> {
        self.demos
            .iter()
            .flat_map(|d| [&d.input, &d.output])
            .chain(
                self.queries
                    .iter()
                    .flat_map(|q| std::iter::once(&q.input).chain(q.expected.as_ref())),
            )
    }

    pub fn to_json(&self) -> Value {
        let train: Vec<Value> = self
            .demos
            .iter()
            .map(|d| json!({"input": d.input.rows(), "output": d.output.rows()}))
            .collect();
        let test: Vec<Value> = self
            .queries
            .iter()
            .map(|q| {
                let mut m = Map::new();
                m.insert("input".into(), json!(q.input.rows()));
                if let Some(e) = &q.expected {
                    m.insert("output".into(), json!(e.rows()));
                }
                Value::Object(m)
            })
            .collect();
        json!({"train": train, "test": test})
    }

    pub fn to_json_string(&self) -> String {
        self.to_json().to_string()
    }
}

fn perr(path: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_string(),
        message: message.into(),
    }
}

fn parse_grid(v: &Value, path: &str) -> Result<Grid> {
    let rows = v.as_array().ok_or_else(|| perr(path, "expected an array of rows"))?;
    if rows.is_empty() || rows.len() > MAX_GRID {
        return Err(perr(path, format!("grid height {} outside 1..={MAX_GRID}", rows.len())));
    }
    let mut width = None;
    let mut cells = Vec::new();
    for (r, row) in rows.iter().enumerate() {
        let rpath = format!("{path}[{r}]");
        let row = row.as_array().ok_or_else(|| perr(&rpath, "expected an array of cells"))?;
        match width {
            None => {
                if row.is_empty() || row.len() > MAX_GRID {
                    return Err(perr(&rpath, format!("grid width {} outside 1..={MAX_GRID}", row.len())));
                }
                width = Some(row.len());
            }
            Some(w) if w != row.len() => {
                return Err(perr(&rpath, format!("ragged row: expected {w} cells, got {}", row.len())));
            }
            _ => {}
        }
        for (c, cell) in row.iter().enumerate() {
            let cpath = format!("{rpath}[{c}]");
            let x = cell.as_u64().ok_or_else(|| perr(&cpath, "expected a non-negative integer"))?;
            if x as usize >= NUM_COLORS {
                return Err(perr(&cpath, format!("color {x} out of range 0..{NUM_COLORS}")));
            }
            cells.push(x as u8);
        }
    }
    Grid::new(rows.len(), width.unwrap_or(0), cells).map_err(|e| perr(path, e.to_string()))
}

fn pairs<'a>(root: &'a Map<String, Value>, key: &str) -> Result<&'a Vec<Value>> {
    root.get(key)
        .ok_or_else(|| perr(key, "missing"))?
        .as_array()
        .ok_or_else(|| perr(key, "expected an array"))
}

/// Parse a task from an already-decoded JSON value. Unknown keys are ignored.
pub fn task_from_value(v: &Value) -> Result<TaskInstance> {
    let root = v.as_object().ok_or_else(|| perr("$", "expected an object"))?;
    let mut demos = Vec::new();
    for (i, p) in pairs(root, "train")?.iter().enumerate() {
        let path = format!("train[{i}]");
        let input = parse_grid(p.get("input").ok_or_else(|| perr(&path, "missing input"))?, &format!("{path}.input"))?;
        let output = parse_grid(p.get("output").ok_or_else(|| perr(&path, "missing output"))?, &format!("{path}.output"))?;
        demos.push(Example { input, output });
    }
    if demos.is_empty() {
        return Err(perr("train", "at least one demonstration required"));
    }
    let mut queries = Vec::new();
    for (i, p) in pairs(root, "test")?.iter().enumerate() {
        let path = format!("test[{i}]");
        let input = parse_grid(p.get("input").ok_or_else(|| perr(&path, "missing input"))?, &format!("{path}.input"))?;
        let expected = p
            .get("output")
            .map(|o| parse_grid(o, &format!("{path}.output")))
            .transpose()?;
        queries.push(Query { input, expected });
    }
    Ok(TaskInstance { demos, queries })
}

/// Parse an ARC task from UTF-8 JSON bytes.
pub fn parse_task(source: &[u8]) -> Result<TaskInstance> {
    let v: Value = serde_json::from_slice(source).map_err(|e| perr("$", e.to_string()))?;
    task_from_value(&v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_schema() {
        let t = parse_task(br#"{"train":[{"input":[[1]],"output":[[2]]}],"test":[{"input":[[1]]}]}"#).unwrap();
        assert_eq!(t.demos.len(), 1);
        assert_eq!(t.queries.len(), 1);
        assert_eq!(t.demos[0].output.get(0, 0), 2);
        assert!(t.queries[0].expected.is_none());
    }

    #[test]
    fn color_out_of_range_names_the_cell() {
        let err = parse_task(br#"{"train":[{"input":[[1,10]],"output":[[2]]}],"test":[]}"#).unwrap_err();
        match err {
            Error::Parse { path, .. } => assert_eq!(path, "train[0].input[0][1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ragged_and_malformed() {
        let ragged = parse_task(br#"{"train":[{"input":[[1,2],[3]],"output":[[2]]}],"test":[]}"#).unwrap_err();
        assert!(matches!(ragged, Error::Parse { ref path, .. } if path == "train[0].input[1]"));
        assert!(parse_task(b"{not json").is_err());
        assert!(parse_task(br#"{"train":[],"test":[]}"#).is_err());
        assert!(parse_task(br#"{"test":[]}"#).is_err());
        assert!(parse_task(br#"{"train":[{"input":[[-1]],"output":[[2]]}],"test":[]}"#).is_err());
    }

    #[test]
    fn extra_keys_ignored() {
        let t = parse_task(br#"{"family":"IDENTITY","seed":3,"train":[{"input":[[1]],"output":[[1]]}],"test":[]}"#).unwrap();
        assert_eq!(t.demos.len(), 1);
    }
}
