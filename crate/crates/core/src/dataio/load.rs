use std::collections::HashMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ColumnKind, ColumnSchema, TabularDataset};
use crate::error::{Error, Result};
use crate::ndmath::Tensor;

/// JSON sidecar describing a CSV file.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaFile {
    #[serde(default)]
    pub name: Option<String>,
    /// Feature columns in file order.
    pub columns: Vec<SchemaColumn>,
    pub target: String,
    #[serde(default = "default_delimiter")]
    pub delimiter: String,
    #[serde(default = "default_true")]
    pub has_header: bool,
    /// Position of the target among all file columns when there is no
    /// header. Defaults to the last column.
    #[serde(default)]
    pub target_index: Option<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SchemaColumn {
    pub name: String,
    pub kind: ColumnKind,
}

fn default_delimiter() -> String {
    ",".into()
}

fn default_true() -> bool {
    true
}

impl SchemaFile {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: SchemaFile = serde_json::from_str(&text)?;
        if schema.columns.is_empty() {
            return Err(Error::Schema(format!(
                "{}: no feature columns",
                path.display()
            )));
        }
        Ok(schema)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Sidecar matching an in-memory dataset, for files written by [`write_csv`].
    pub fn for_dataset(ds: &TabularDataset) -> Self {
        SchemaFile {
            name: Some(ds.name.clone()),
            columns: ds
                .columns
                .iter()
                .map(|c| SchemaColumn {
                    name: c.name.clone(),
                    kind: c.kind,
                })
                .collect(),
            target: ds.target_name.clone(),
            delimiter: ",".into(),
            has_header: true,
            target_index: None,
        }
    }

    fn delimiter_byte(&self) -> Result<u8> {
        match self.delimiter.as_str() {
            "\\t" | "\t" | "tab" => Ok(b'\t'),
            s if s.len() == 1 => Ok(s.as_bytes()[0]),
            s => Err(Error::Schema(format!("unsupported delimiter {s:?}"))),
        }
    }
}

/// Loads a CSV described by `schema`.
///
/// Empty cells become missing values. Categorical labels (and target labels)
/// get dense indices in order of first appearance.
pub fn load_csv(path: impl AsRef<Path>, schema: &SchemaFile) -> Result<TabularDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter_byte()?)
        .has_headers(schema.has_header)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_reader(file);

    let d = schema.columns.len();
    // file position of each feature column and of the target
    let (positions, target_pos) = if schema.has_header {
        let header = reader.headers()?.clone();
        let index: HashMap<&str, usize> = header.iter().enumerate().map(|(i, h)| (h, i)).collect();
        if header.len() != d + 1 {
            return Err(Error::Schema(format!(
                "header has {} columns, schema expects {}",
                header.len(),
                d + 1
            )));
        }
        let mut positions = Vec::with_capacity(d);
        for c in &schema.columns {
            let p = index
                .get(c.name.as_str())
                .ok_or_else(|| Error::Schema(format!("column `{}` not in header", c.name)))?;
            positions.push(*p);
        }
        let t = *index
            .get(schema.target.as_str())
            .ok_or_else(|| Error::Schema(format!("target `{}` not in header", schema.target)))?;
        (positions, t)
    } else {
        let t = schema.target_index.unwrap_or(d);
        if t > d {
            return Err(Error::Schema(format!(
                "target index {t} beyond {} columns",
                d + 1
            )));
        }
        let positions = (0..=d).filter(|&p| p != t).collect();
        (positions, t)
    };

    let mut labels: Vec<Vec<String>> = vec![Vec::new(); d];
    let mut label_index: Vec<HashMap<String, usize>> = vec![HashMap::new(); d];
    let mut class_labels = Vec::new();
    let mut class_index: HashMap<String, usize> = HashMap::new();
    let mut values = Vec::new();
    let mut targets = Vec::new();

    let line_offset = if schema.has_header { 2 } else { 1 };
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        let row = r + line_offset;
        for (j, col) in schema.columns.iter().enumerate() {
            let cell = record.get(positions[j]).unwrap_or("");
            let v = if cell.is_empty() {
                f64::NAN
            } else {
                match col.kind {
                    ColumnKind::Numerical => cell.parse::<f64>().map_err(|e| Error::Parse {
                        row,
                        column: col.name.clone(),
                        detail: format!("{cell:?}: {e}"),
                    })?,
                    ColumnKind::Categorical => {
                        let next = labels[j].len();
                        let idx = *label_index[j].entry(cell.to_string()).or_insert(next);
                        if idx == next {
                            labels[j].push(cell.to_string());
                        }
                        idx as f64
                    }
                }
            };
            values.push(v);
        }
        let t = record.get(target_pos).unwrap_or("");
        if t.is_empty() {
            return Err(Error::Parse {
                row,
                column: schema.target.clone(),
                detail: "missing target".into(),
            });
        }
        let next = class_labels.len();
        let idx = *class_index.entry(t.to_string()).or_insert(next);
        if idx == next {
            class_labels.push(t.to_string());
        }
        targets.push(idx);
    }

    let n = targets.len();
    let columns = schema
        .columns
        .iter()
        .zip(labels)
        .map(|(c, l)| match c.kind {
            ColumnKind::Numerical => ColumnSchema::numerical(&c.name),
            ColumnKind::Categorical => ColumnSchema::categorical(&c.name, l),
        })
        .collect();
    let name = schema.name.clone().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    });
    TabularDataset::new(
        name,
        columns,
        Tensor::from_vec(n, d, values)?,
        targets,
        schema.target.clone(),
        class_labels,
    )
}

/// Writes `ds` as a headed CSV with the target last. Missing cells are empty;
/// categorical cells are written as their labels.
pub fn write_csv(ds: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = ds.columns.iter().map(|c| c.name.as_str()).collect();
    header.push(&ds.target_name);
    w.write_record(&header)?;
    for i in 0..ds.n_rows() {
        let mut rec: Vec<String> = Vec::with_capacity(ds.n_cols() + 1);
        for (j, c) in ds.columns.iter().enumerate() {
            let v = ds.values.get(i, j);
            rec.push(if v.is_nan() {
                String::new()
            } else if c.is_categorical() {
                c.labels[v as usize].clone()
            } else {
                format!("{v}")
            });
        }
        rec.push(ds.class_labels[ds.targets[i]].clone());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
