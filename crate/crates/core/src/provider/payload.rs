//! Submit payload decoding into records.

use serde_json::Value;

use super::Row;
use crate::model::PayloadFormat;

/// Decodes a submit payload into records.
///
/// JSON payloads are an object or an array of objects. CSV payloads need a
/// header row; every value is a string.
pub fn parse_records(bytes: &[u8], format: PayloadFormat) -> Result<Vec<Row>, String> {
    match format {
        PayloadFormat::Json => parse_json(bytes),
        PayloadFormat::Csv => parse_csv(bytes),
    }
}

fn parse_json(bytes: &[u8]) -> Result<Vec<Row>, String> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| format!("bad JSON payload: {e}"))?;
    let items = match value {
        Value::Array(items) => items,
        obj @ Value::Object(_) => vec![obj],
        _ => return Err("JSON payload must be an object or an array of objects".into()),
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, item)| match item {
            Value::Object(m) => Ok(m.into_iter().collect()),
            _ => Err(format!("record {i} is not an object")),
        })
        .collect()
}

fn parse_csv(bytes: &[u8]) -> Result<Vec<Row>, String> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| format!("bad CSV header: {e}"))?
        .clone();
    if headers.iter().any(str::is_empty) {
        return Err("CSV header contains an empty column name".into());
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| format!("bad CSV record {i}: {e}"))?;
        let row: Row = headers
            .iter()
            .zip(record.iter())
            .map(|(h, v)| (h.to_string(), Value::String(v.to_string())))
            .collect();
        rows.push(row);
    }
    Ok(rows)
}
