//! Lenient JSON reading.
//!
//! Hand-maintained project files routinely carry trailing commas (`{"a": 1,}`)
//! and still need to load unmodified. This pass blanks out every comma that is
//! directly followed (modulo whitespace) by `}` or `]`, outside string
//! literals. Replacing with a space instead of deleting keeps serde_json's
//! line/column error positions pointing at the caller's original text.

use std::borrow::Cow;

/// Returns `input` with trailing commas replaced by spaces.
///
/// Input that contains no trailing comma is returned borrowed.
pub fn strip_trailing_commas(input: &str) -> Cow<'_, str> {
    let bytes = input.as_bytes();
    let mut blanks = Vec::new();
    let mut in_string = false;
    let mut escaped = false;
    let mut pending_comma: Option<usize> = None;

    for (i, &b) in bytes.iter().enumerate() {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => {
                in_string = true;
                pending_comma = None;
            }
            b',' => pending_comma = Some(i),
            b'}' | b']' => {
                if let Some(at) = pending_comma.take() {
                    blanks.push(at);
                }
            }
            b' ' | b'\t' | b'\n' | b'\r' => {}
            _ => pending_comma = None,
        }
    }

    if blanks.is_empty() {
        return Cow::Borrowed(input);
    }
    let mut out = bytes.to_vec();
    for at in blanks {
        out[at] = b' ';
    }
    // Only ASCII commas were replaced by ASCII spaces, so UTF-8 is intact.
    Cow::Owned(String::from_utf8(out).expect("ascii-for-ascii replacement keeps utf-8"))
}

/// Parses `text` as JSON after [`strip_trailing_commas`].
pub fn from_str<T: serde::de::DeserializeOwned>(text: &str) -> serde_json::Result<T> {
    serde_json::from_str(&strip_trailing_commas(text))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::{json, Value};

    #[test]
    fn strips_object_and_array_trailing_commas() {
        let v: Value = from_str(r#"{"a": [1, 2, ], "b": {"c": 3,  },}"#).unwrap();
        assert_eq!(v, json!({"a": [1, 2], "b": {"c": 3}}));
    }

    #[test]
    fn commas_inside_strings_survive() {
        let v: Value = from_str(r#"{"a": ",}", "b": "x\",]",}"#).unwrap();
        assert_eq!(v, json!({"a": ",}", "b": "x\",]"}));
    }

    #[test]
    fn clean_input_is_borrowed() {
        assert!(matches!(strip_trailing_commas(r#"{"a": 1}"#), Cow::Borrowed(_)));
    }

    #[test]
    fn positions_are_preserved() {
        let text = "{\n  \"a\": 1,\n}";
        let stripped = strip_trailing_commas(text);
        assert_eq!(stripped.len(), text.len());
        assert_eq!(stripped.lines().count(), text.lines().count());
    }

    #[test]
    fn leading_or_double_commas_are_still_errors() {
        assert!(from_str::<Value>("[,1]").is_err());
        assert!(from_str::<Value>("[1,,]").is_err());
    }
}
