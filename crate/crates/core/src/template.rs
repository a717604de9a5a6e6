//! Bind-variable query templates.
//!
//! A template is provider-native query text with `$name$` placeholders. `$$`
//! is an escaped literal dollar sign. Placeholder names are identifiers
//! (`[A-Za-z_][A-Za-z0-9_]*`).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Advisory value type of a bind variable. Drives quoting in
/// [`SubstitutionMode::SqlQuoted`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeHint {
    #[default]
    String,
    Integer,
    Decimal,
    Boolean,
}

impl TypeHint {
    pub fn as_str(self) -> &'static str {
        match self {
            TypeHint::String => "string",
            TypeHint::Integer => "integer",
            TypeHint::Decimal => "decimal",
            TypeHint::Boolean => "boolean",
        }
    }
}

impl FromStr for TypeHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "string" => Ok(TypeHint::String),
            "integer" | "int" => Ok(TypeHint::Integer),
            "decimal" | "number" => Ok(TypeHint::Decimal),
            "boolean" | "bool" => Ok(TypeHint::Boolean),
            other => Err(format!(
                "unknown bind variable type '{other}' (expected string, integer, decimal or boolean)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindVariable {
    pub name: String,
    pub required: bool,
    /// Present iff `required` is false.
    pub default: Option<String>,
    pub type_hint: TypeHint,
    pub description: Option<String>,
}

impl BindVariable {
    pub fn required(name: impl Into<String>, type_hint: TypeHint) -> Self {
        BindVariable {
            name: name.into(),
            required: true,
            default: None,
            type_hint,
            description: None,
        }
    }

    pub fn optional(name: impl Into<String>, type_hint: TypeHint, default: impl Into<String>) -> Self {
        BindVariable {
            name: name.into(),
            required: false,
            default: Some(default.into()),
            type_hint,
            description: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct QueryTemplate {
    pub text: String,
    pub bind_variables: Vec<BindVariable>,
}

impl QueryTemplate {
    /// A template whose declared variables are exactly the extracted ones,
    /// all required strings.
    pub fn infer(text: impl Into<String>) -> Result<Self, TemplateError> {
        let text = text.into();
        let bind_variables = extract_bind_variables(&text)?
            .into_iter()
            .map(|n| BindVariable::required(n, TypeHint::String))
            .collect();
        Ok(QueryTemplate {
            text,
            bind_variables,
        })
    }

    pub fn new(text: impl Into<String>, bind_variables: Vec<BindVariable>) -> Self {
        QueryTemplate {
            text: text.into(),
            bind_variables,
        }
    }

    pub fn variable(&self, name: &str) -> Option<&BindVariable> {
        self.bind_variables.iter().find(|v| v.name == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubstitutionMode {
    /// Values are inserted verbatim.
    Raw,
    /// Strings are single-quoted with embedded quotes doubled; numbers and
    /// booleans are validated and inserted bare.
    SqlQuoted,
}

/// A template after substitution, ready for a provider.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BoundQuery {
    pub text: String,
    /// Values actually used, defaults included. Keys are template variables.
    pub applied_params: BTreeMap<String, String>,
    pub provider_language: String,
}

impl BoundQuery {
    /// A query with no parameters, mostly for tests and direct provider calls.
    pub fn literal(text: impl Into<String>, language: impl Into<String>) -> Self {
        BoundQuery {
            text: text.into(),
            applied_params: BTreeMap::new(),
            provider_language: language.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TemplateError {
    #[error("unbalanced '$' delimiter at byte {position}")]
    UnbalancedDelimiter { position: usize },
    #[error("illegal bind variable name '{name}' at byte {position}")]
    IllegalName { name: String, position: usize },
    #[error("missing required parameter '{0}'")]
    MissingParameter(String),
    #[error("parameter '{name}' expects {expected} but got '{value}'")]
    TypeMismatch {
        name: String,
        expected: &'static str,
        value: String,
    },
    #[error("parameter '{0}' is not a variable of this template")]
    UndeclaredParameter(String),
}

/// One lexical piece of a template.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment<'a> {
    Literal(&'a str),
    /// `$$`
    Dollar,
    Placeholder { name: &'a str, start: usize },
}

impl fmt::Display for Segment<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Segment::Literal(s) => f.write_str(s),
            Segment::Dollar => f.write_str("$$"),
            Segment::Placeholder { name, .. } => write!(f, "${name}$"),
        }
    }
}

/// Splits template text into literals, escapes and placeholders.
pub fn tokenize(text: &str) -> Result<Vec<Segment<'_>>, TemplateError> {
    let mut out = Vec::new();
    let mut rest_start = 0;
    let mut cursor = 0;
    while let Some(off) = text[cursor..].find('$') {
        let open = cursor + off;
        if open > rest_start {
            out.push(Segment::Literal(&text[rest_start..open]));
        }
        let after = open + 1;
        if text[after..].starts_with('$') {
            out.push(Segment::Dollar);
            cursor = after + 1;
        } else {
            let close = text[after..]
                .find('$')
                .map(|o| after + o)
                .ok_or(TemplateError::UnbalancedDelimiter { position: open })?;
            let name = &text[after..close];
            if !crate::model::is_identifier(name) {
                return Err(TemplateError::IllegalName {
                    name: name.to_string(),
                    position: open,
                });
            }
            out.push(Segment::Placeholder { name, start: open });
            cursor = close + 1;
        }
        rest_start = cursor;
    }
    if rest_start < text.len() {
        out.push(Segment::Literal(&text[rest_start..]));
    }
    Ok(out)
}

/// Distinct placeholder names in first-occurrence order.
pub fn extract_bind_variables(text: &str) -> Result<Vec<String>, TemplateError> {
    let mut seen = BTreeSet::new();
    let mut names = Vec::new();
    for seg in tokenize(text)? {
        if let Segment::Placeholder { name, .. } = seg {
            if seen.insert(name) {
                names.push(name.to_string());
            }
        }
    }
    Ok(names)
}

fn is_integer(s: &str) -> bool {
    let digits = s.strip_prefix(['+', '-']).unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

fn is_decimal(s: &str) -> bool {
    let body = s.strip_prefix(['+', '-']).unwrap_or(s);
    let (mantissa, exponent) = match body.find(['e', 'E']) {
        Some(i) => (&body[..i], Some(&body[i + 1..])),
        None => (body, None),
    };
    let (int_part, frac_part) = match mantissa.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (mantissa, None),
    };
    let all_digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    let mantissa_ok = all_digits(int_part)
        && frac_part.is_none_or(all_digits)
        && (!int_part.is_empty() || frac_part.is_some_and(|f| !f.is_empty()));
    mantissa_ok && exponent.is_none_or(is_integer)
}

fn render_value(var: &str, value: &str, hint: TypeHint, mode: SubstitutionMode) -> Result<String, TemplateError> {
    if mode == SubstitutionMode::Raw {
        return Ok(value.to_string());
    }
    let mismatch = |expected| TemplateError::TypeMismatch {
        name: var.to_string(),
        expected,
        value: value.to_string(),
    };
    match hint {
        TypeHint::String => {
            let mut s = String::with_capacity(value.len() + 2);
            s.push('\'');
            for c in value.chars() {
                if c == '\'' {
                    s.push('\'');
                }
                s.push(c);
            }
            s.push('\'');
            Ok(s)
        }
        TypeHint::Integer => {
            let v = value.trim();
            if is_integer(v) {
                Ok(v.to_string())
            } else {
                Err(mismatch("an integer"))
            }
        }
        TypeHint::Decimal => {
            let v = value.trim();
            if is_decimal(v) {
                Ok(v.to_string())
            } else {
                Err(mismatch("a decimal number"))
            }
        }
        TypeHint::Boolean => match value.trim().to_ascii_lowercase().as_str() {
            "true" | "1" => Ok("TRUE".into()),
            "false" | "0" => Ok("FALSE".into()),
            _ => Err(mismatch("a boolean")),
        },
    }
}

/// Fills a template's placeholders from `params`.
///
/// Every key of `params` must be a template variable. Variables without a
/// value fall back to their declared default; placeholders with no declared
/// variable are treated as required strings.
pub fn substitute(
    template: &QueryTemplate,
    params: &BTreeMap<String, String>,
    mode: SubstitutionMode,
) -> Result<BoundQuery, TemplateError> {
    let segments = tokenize(&template.text)?;
    let names: BTreeSet<&str> = segments
        .iter()
        .filter_map(|s| match s {
            Segment::Placeholder { name, .. } => Some(*name),
            _ => None,
        })
        .collect();
    if let Some(extra) = params.keys().find(|k| !names.contains(k.as_str())) {
        return Err(TemplateError::UndeclaredParameter(extra.clone()));
    }

    let mut rendered: BTreeMap<&str, String> = BTreeMap::new();
    let mut applied = BTreeMap::new();
    for name in &names {
        let var = template.variable(name);
        let value = match params.get(*name) {
            Some(v) => v.clone(),
            None => match var.and_then(|v| v.default.clone()) {
                Some(d) => d,
                None => return Err(TemplateError::MissingParameter(name.to_string())),
            },
        };
        let hint = var.map(|v| v.type_hint).unwrap_or_default();
        rendered.insert(name, render_value(name, &value, hint, mode)?);
        applied.insert(name.to_string(), value);
    }

    let mut text = String::with_capacity(template.text.len());
    for seg in segments {
        match seg {
            Segment::Literal(s) => text.push_str(s),
            Segment::Dollar => text.push('$'),
            Segment::Placeholder { name, .. } => text.push_str(&rendered[name]),
        }
    }
    Ok(BoundQuery {
        text,
        applied_params: applied,
        provider_language: String::new(),
    })
}
