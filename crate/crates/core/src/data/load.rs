use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::{Dataset, Part, Splits, Task};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn load_err(file: &str, line: usize, msg: impl Into<String>) -> Error {
    Error::Load {
        file: file.to_string(),
        line,
        msg: msg.into(),
    }
}

fn read(dir: &Path, file: &str) -> Result<Option<String>> {
    let path = dir.join(file);
    match fs::read_to_string(&path) {
        Ok(s) => Ok(Some(s)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn require(dir: &Path, file: &str) -> Result<String> {
    read(dir, file)?.ok_or_else(|| load_err(&dir.join(file).display().to_string(), 0, "missing file"))
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

struct Meta {
    task: Task,
    n: usize,
}

fn parse_meta(text: &str) -> Result<Meta> {
    const FILE: &str = "meta.txt";
    let mut kv = HashMap::new();
    for (ln, l) in lines(text) {
        let (k, v) = l
            .split_once('=')
            .ok_or_else(|| load_err(FILE, ln, "expected key=value"))?;
        kv.insert(k.trim().to_string(), (ln, v.trim().to_string()));
    }
    let get_usize = |key: &str| -> Result<Option<usize>> {
        kv.get(key)
            .map(|(ln, v)| {
                v.parse()
                    .map_err(|_| load_err(FILE, *ln, format!("{key} must be a non-negative integer")))
            })
            .transpose()
    };
    let n = get_usize("n")?.ok_or_else(|| load_err(FILE, 0, "missing key n"))?;
    let (task_ln, task) = kv
        .get("task")
        .ok_or_else(|| load_err(FILE, 0, "missing key task"))?;
    let task = match task.as_str() {
        "regression" => Task::Regression,
        "binclass" => Task::Binclass,
        "multiclass" => {
            let c = get_usize("n_classes")?
                .ok_or_else(|| load_err(FILE, 0, "multiclass needs n_classes"))?;
            if c < 2 {
                return Err(load_err(FILE, 0, "n_classes must be at least 2"));
            }
            Task::Multiclass(c)
        }
        other => return Err(load_err(FILE, *task_ln, format!("unknown task {other:?}"))),
    };
    if let (Task::Binclass, Some(c)) = (task, get_usize("n_classes")?) {
        if c != 2 {
            return Err(load_err(FILE, 0, "binclass requires n_classes=2"));
        }
    }
    Ok(Meta { task, n })
}

fn parse_float_matrix(file: &str, text: Option<String>, n: usize) -> Result<Tensor> {
    let Some(text) = text else {
        return Ok(Tensor::zeros(&[n, 0]));
    };
    let mut data = Vec::new();
    let mut width = None;
    let mut rows = 0;
    for (ln, l) in lines(&text) {
        let mut count = 0;
        for cell in l.split(',') {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| load_err(file, ln, format!("not a number: {:?}", cell.trim())))?;
            if v.is_nan() {
                return Err(load_err(file, ln, "NaN values are not supported"));
            }
            data.push(v);
            count += 1;
        }
        if *width.get_or_insert(count) != count {
            return Err(load_err(file, ln, format!("ragged row: {count} values, expected {}", width.unwrap())));
        }
        rows += 1;
    }
    if rows != n {
        return Err(load_err(file, rows, format!("{rows} rows, meta.txt says {n}")));
    }
    Tensor::new(vec![n, width.unwrap_or(0)], data)
}

/// Category strings become dense codes in order of first appearance.
fn parse_cat_matrix(text: Option<String>, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    const FILE: &str = "X_cat.csv";
    let Some(text) = text else {
        return Ok((Vec::new(), Vec::new()));
    };
    let mut maps: Vec<HashMap<String, usize>> = Vec::new();
    let mut codes = Vec::new();
    let mut rows = 0;
    for (ln, l) in lines(&text) {
        let cells: Vec<&str> = l.split(',').map(str::trim).collect();
        if rows == 0 {
            maps.resize_with(cells.len(), HashMap::new);
        } else if cells.len() != maps.len() {
            return Err(load_err(FILE, ln, format!("ragged row: {} values, expected {}", cells.len(), maps.len())));
        }
        for (m, c) in maps.iter_mut().zip(cells) {
            let next = m.len();
            codes.push(*m.entry(c.to_string()).or_insert(next));
        }
        rows += 1;
    }
    if rows != n {
        return Err(load_err(FILE, rows, format!("{rows} rows, meta.txt says {n}")));
    }
    Ok((codes, maps.iter().map(HashMap::len).collect()))
}

fn parse_labels(text: &str, task: Task, n: usize) -> Result<Vec<f64>> {
    const FILE: &str = "Y.csv";
    let mut y = Vec::with_capacity(n);
    for (ln, l) in lines(text) {
        let v: f64 = l
            .parse()
            .map_err(|_| load_err(FILE, ln, format!("not a number: {l:?}")))?;
        if !v.is_finite() {
            return Err(load_err(FILE, ln, "non-finite label"));
        }
        if let Some(c) = task.n_classes() {
            if v.fract() != 0.0 || v < 0.0 || v >= c as f64 {
                return Err(load_err(FILE, ln, format!("label {v} is not a class in [0, {c})")));
            }
        }
        y.push(v);
    }
    if y.len() != n {
        return Err(load_err(FILE, y.len(), format!("{} labels, meta.txt says {n}", y.len())));
    }
    Ok(y)
}

fn parse_split(dir: &Path, part: Part, n: usize, owner: &mut [Option<Part>]) -> Result<Vec<usize>> {
    let file = format!("idx_{}.txt", part.name());
    let text = require(dir, &file)?;
    let mut idx = Vec::new();
    for (ln, l) in lines(&text) {
        let i: usize = l
            .parse()
            .map_err(|_| load_err(&file, ln, format!("not a row index: {l:?}")))?;
        if i >= n {
            return Err(load_err(&file, ln, format!("index {i} out of range for {n} rows")));
        }
        if let Some(prev) = owner[i].replace(part) {
            return Err(load_err(
                &file,
                ln,
                format!("overlap: row {i} is already in idx_{}.txt", prev.name()),
            ));
        }
        idx.push(i);
    }
    if idx.is_empty() {
        return Err(load_err(&file, 0, "empty split"));
    }
    Ok(idx)
}

/// Reads a dataset directory and validates it.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta = parse_meta(&require(dir, "meta.txt")?)?;
    let n = meta.n;
    let x_num = parse_float_matrix("X_num.csv", read(dir, "X_num.csv")?, n)?;
    let x_bin = parse_float_matrix("X_bin.csv", read(dir, "X_bin.csv")?, n)?;
    if let Some(k) = x_bin.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        let cols = x_bin.shape()[1];
        return Err(load_err("X_bin.csv", k / cols + 1, "binary features must be 0 or 1"));
    }
    let (x_cat, cards) = parse_cat_matrix(read(dir, "X_cat.csv")?, n)?;
    let y = parse_labels(&require(dir, "Y.csv")?, meta.task, n)?;

    let mut owner = vec![None; n];
    let train = parse_split(dir, Part::Train, n, &mut owner)?;
    let val = parse_split(dir, Part::Val, n, &mut owner)?;
    let test = parse_split(dir, Part::Test, n, &mut owner)?;
    if let Some(i) = owner.iter().position(Option::is_none) {
        return Err(load_err("idx_train.txt", 0, format!("row {i} belongs to no split")));
    }
    Dataset::new(
        meta.task,
        x_num,
        x_bin,
        x_cat,
        cards,
        y,
        Splits { train, val, test },
    )
}
