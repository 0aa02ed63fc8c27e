use std::fs;
use std::path::Path;

use super::{sha256_hex, DataError, DataProvenance, Dataset};

/// Reads a headered CSV whose `label` column holds class indices; every
/// other column is a feature. Without `classes`, the class count is the
/// largest label plus one.
pub fn load_csv(path: &Path, classes: Option<usize>) -> Result<Dataset, DataError> {
    let bytes = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let csv_err = |e: csv::Error| {
        let (line, byte) = e.position().map_or((0, 0), |p| (p.line(), p.byte()));
        DataError::Csv {
            path: path.to_path_buf(),
            line,
            byte,
            message: e.to_string(),
        }
    };
    let header = reader.headers().map_err(csv_err)?.clone();
    let label_col = header
        .iter()
        .position(|h| h.trim() == "label")
        .ok_or_else(|| DataError::MissingLabelColumn {
            path: path.to_path_buf(),
        })?;
    let width = header.len();
    let dim = width - 1;

    let mut features = Vec::new();
    let mut raw_labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(csv_err)?;
        let (line, byte) = record.position().map_or((0, 0), |p| (p.line(), p.byte()));
        if record.len() != width {
            return Err(DataError::RaggedRow {
                path: path.to_path_buf(),
                line,
                byte,
                expected: width,
                found: record.len(),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if col == label_col {
                let label: usize = field.parse().map_err(|_| DataError::LabelOutOfRange {
                    path: path.to_path_buf(),
                    line,
                    byte,
                    label: field.to_string(),
                    classes: classes.unwrap_or(0),
                })?;
                if let Some(k) = classes.filter(|&k| label >= k) {
                    return Err(DataError::LabelOutOfRange {
                        path: path.to_path_buf(),
                        line,
                        byte,
                        label: field.to_string(),
                        classes: k,
                    });
                }
                raw_labels.push(label);
            } else {
                let v: f64 = field
                    .parse()
                    .ok()
                    .filter(|v: &f64| v.is_finite())
                    .ok_or_else(|| DataError::Csv {
                        path: path.to_path_buf(),
                        line,
                        byte,
                        message: format!("column {:?}: {field:?} is not a finite number", &header[col]),
                    })?;
                features.push(v);
            }
        }
    }
    if raw_labels.is_empty() || dim == 0 {
        return Err(DataError::Empty);
    }
    let classes = classes.unwrap_or_else(|| raw_labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(
        features,
        raw_labels,
        dim,
        classes,
        DataProvenance::File {
            path: path.display().to_string(),
            sha256: sha256_hex(&bytes),
        },
    )
}

/// Writes columns `f0..f{d-1},label` with shortest round-trip floats.
pub fn save_csv(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let io = |source: std::io::Error| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(|e| io(e.into()))?;
    let mut header: Vec<String> = (0..dataset.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(|e| io(e.into()))?;
    for i in 0..dataset.len() {
        let mut row: Vec<String> = dataset.row(i).iter().map(|v| v.to_string()).collect();
        row.push(dataset.labels()[i].to_string());
        w.write_record(&row).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}
