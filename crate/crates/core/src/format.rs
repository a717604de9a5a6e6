//! Rendering of result rows as JSON or CSV bodies.

use serde_json::Value;

use crate::provider::Row;

/// Columns in first-seen order across all rows.
pub fn columns(rows: &[Row]) -> Vec<&str> {
    let mut cols: Vec<&str> = Vec::new();
    for row in rows {
        for key in row.keys() {
            if !cols.contains(&key.as_str()) {
                cols.push(key);
            }
        }
    }
    cols
}

fn cell(value: Option<&Value>) -> String {
    match value {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(Value::Bool(b)) => b.to_string(),
        Some(Value::Number(n)) => n.to_string(),
        Some(other) => other.to_string(),
    }
}

/// RFC 4180 CSV with a header line; absent cells are empty.
pub fn rows_to_csv(rows: &[Row]) -> Vec<u8> {
    let cols = columns(rows);
    if cols.is_empty() {
        return Vec::new();
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(&cols).expect("writing to memory");
    for row in rows {
        w.write_record(cols.iter().map(|c| cell(row.get(*c))))
            .expect("writing to memory");
    }
    w.into_inner().expect("writing to memory")
}

/// A JSON array of row objects.
pub fn rows_to_json(rows: &[Row]) -> Vec<u8> {
    serde_json::to_vec(rows).expect("rows serialize")
}
