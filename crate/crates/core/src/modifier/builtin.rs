//! Built-in modifiers other than the output chainer.

use std::collections::BTreeSet;

use async_trait::async_trait;
use serde_json::Value;

use super::{
    config_list, ModifierConfig, ModifierContext, ModifierError, PayloadModifier, QueryModifier,
    ResultModifier,
};
use crate::format::rows_to_csv;
use crate::model::{is_identifier, AttributeFilter, ModifierRef, PayloadFormat};
use crate::provider::ProviderResult;
use crate::template::BoundQuery;

pub const IDENTITY: &str = "identity";
pub const ROLE_FILTER: &str = "role-filter";
pub const FIELD_REDACTION: &str = "field-redaction";
pub const CSV_FORMATTER: &str = "csv-formatter";
pub const JSON_FIELD_SCRUB: &str = "json-field-scrub";

/// Passes everything through unchanged, at every stage.
pub struct Identity;

impl QueryModifier for Identity {
    fn apply(
        &self,
        query: BoundQuery,
        _: &ModifierConfig,
        _: &ModifierContext<'_>,
    ) -> Result<BoundQuery, ModifierError> {
        Ok(query)
    }
}

#[async_trait]
impl ResultModifier for Identity {
    async fn apply(
        &self,
        result: ProviderResult,
        _: &ModifierConfig,
        _: &ModifierContext<'_>,
    ) -> Result<ProviderResult, ModifierError> {
        Ok(result)
    }
}

impl PayloadModifier for Identity {
    fn apply(
        &self,
        payload: Vec<u8>,
        _: &ModifierConfig,
        _: &ModifierContext<'_>,
    ) -> Result<Vec<u8>, ModifierError> {
        Ok(payload)
    }
}

/// Restricts which values of one attribute a caller may see.
///
/// Configuration:
/// - `attribute`: the column being restricted.
/// - `param`: the bind variable carrying the requested value (defaults to
///   `attribute`).
/// - `allow.<role>`: comma-separated values visible to holders of `<role>`,
///   or `*` for all values. `allow.*` applies to every caller.
///
/// When the request binds `param`, a value outside the caller's allowed set
/// is rejected. When it does not and the query is SQL, the query is wrapped
/// so only allowed rows come back; the attribute must then be one of the
/// query's result columns, or no row matches. Any other case is rejected.
pub struct RoleFilter;

impl RoleFilter {
    fn allowed(config: &ModifierConfig, ctx: &ModifierContext<'_>) -> Option<BTreeSet<String>> {
        let mut allowed = BTreeSet::new();
        for (key, _) in config.iter() {
            let Some(role) = key.strip_prefix("allow.") else {
                continue;
            };
            if role != "*" && !ctx.principal.has_role(role) {
                continue;
            }
            for item in config_list(config, key) {
                if item == "*" {
                    return None;
                }
                allowed.insert(item);
            }
        }
        Some(allowed)
    }
}

fn sql_string(s: &str) -> String {
    format!("'{}'", s.replace('\'', "''"))
}

impl QueryModifier for RoleFilter {
    fn validate(&self, config: &ModifierConfig) -> Result<(), String> {
        let attr = config.get("attribute").ok_or("'attribute' is required")?;
        if !is_identifier(attr) {
            return Err(format!("'{attr}' is not a valid attribute name"));
        }
        if let Some(p) = config.get("param") {
            if !is_identifier(p) {
                return Err(format!("'{p}' is not a valid parameter name"));
            }
        }
        let mut any_rule = false;
        for key in config.keys() {
            match key.as_str() {
                "attribute" | "param" => {}
                k if k.starts_with("allow.") && k.len() > "allow.".len() => any_rule = true,
                k => return Err(format!("unknown key '{k}'")),
            }
        }
        if !any_rule {
            return Err("at least one 'allow.<role>' entry is required".into());
        }
        Ok(())
    }

    fn apply(
        &self,
        query: BoundQuery,
        config: &ModifierConfig,
        ctx: &ModifierContext<'_>,
    ) -> Result<BoundQuery, ModifierError> {
        let attr = config
            .get("attribute")
            .ok_or_else(|| ModifierError::failure(ROLE_FILTER, "'attribute' is not configured"))?;
        let param = config.get("param").unwrap_or(attr);
        let Some(allowed) = Self::allowed(config, ctx) else {
            return Ok(query);
        };
        if let Some(value) = query.applied_params.get(param) {
            return if allowed.contains(value) {
                Ok(query)
            } else {
                Err(ModifierError::rejected(
                    ROLE_FILTER,
                    format!("'{param}' = '{value}' is not accessible to '{}'", ctx.principal.subject),
                ))
            };
        }
        if query.provider_language != "sql" {
            return Err(ModifierError::rejected(
                ROLE_FILTER,
                format!("request does not bind '{param}' and the query cannot be filtered"),
            ));
        }
        let inner = query.text.trim_end().trim_end_matches(';');
        let predicate = if allowed.is_empty() {
            "1 = 0".to_string()
        } else {
            let list: Vec<String> = allowed.iter().map(|v| sql_string(v)).collect();
            format!("\"{attr}\" IN ({})", list.join(", "))
        };
        Ok(BoundQuery {
            text: format!("SELECT * FROM ({inner}) AS _filtered WHERE {predicate}"),
            ..query
        })
    }
}

/// The role-filter reference equivalent to an endpoint's attribute filter.
/// Allowed values must not contain commas.
pub fn role_filter_from_attribute_filter(filter: &AttributeFilter) -> ModifierRef {
    let mut r = ModifierRef::new(ROLE_FILTER).with("attribute", filter.attribute.clone());
    if let Some(p) = &filter.param {
        r = r.with("param", p.clone());
    }
    let values: Vec<&str> = filter.allowed_values.iter().map(String::as_str).collect();
    r = r.with("allow.*", values.join(","));
    for role in &filter.exempt_roles {
        r = r.with(format!("allow.{role}"), "*");
    }
    r
}

/// Removes the fields named in `drop` from every row.
pub struct FieldRedaction;

#[async_trait]
impl ResultModifier for FieldRedaction {
    fn validate(&self, config: &ModifierConfig) -> Result<(), String> {
        if config_list(config, "drop").is_empty() {
            return Err("'drop' must name at least one field".into());
        }
        Ok(())
    }

    async fn apply(
        &self,
        mut result: ProviderResult,
        config: &ModifierConfig,
        _: &ModifierContext<'_>,
    ) -> Result<ProviderResult, ModifierError> {
        let drop = config_list(config, "drop");
        for row in &mut result.rows {
            for field in &drop {
                row.shift_remove(field);
            }
        }
        Ok(result)
    }
}

/// Renders rows as a CSV document in `binary_payload`.
pub struct CsvFormatter;

#[async_trait]
impl ResultModifier for CsvFormatter {
    async fn apply(
        &self,
        mut result: ProviderResult,
        _: &ModifierConfig,
        _: &ModifierContext<'_>,
    ) -> Result<ProviderResult, ModifierError> {
        if result.binary_payload.is_some() {
            return Ok(result);
        }
        result.binary_payload = Some(rows_to_csv(&result.rows));
        result.rows.clear();
        result.content_type = "text/csv".into();
        Ok(result)
    }
}

/// Replaces the values of `scrubField` (comma-separated names) in a JSON or
/// CSV submit payload with `replacement` (default `REDACTED`).
pub struct JsonFieldScrub;

impl JsonFieldScrub {
    fn scrub_json(payload: &[u8], fields: &[String], replacement: &str) -> Result<Vec<u8>, String> {
        let mut doc: Value =
            serde_json::from_slice(payload).map_err(|e| format!("payload is not JSON: {e}"))?;
        let scrub = |obj: &mut serde_json::Map<String, Value>| {
            for f in fields {
                if let Some(v) = obj.get_mut(f) {
                    *v = Value::String(replacement.to_string());
                }
            }
        };
        match &mut doc {
            Value::Object(obj) => scrub(obj),
            Value::Array(items) => {
                for item in items {
                    match item {
                        Value::Object(obj) => scrub(obj),
                        _ => return Err("payload array must contain objects".into()),
                    }
                }
            }
            _ => return Err("payload must be an object or an array of objects".into()),
        }
        Ok(serde_json::to_vec(&doc).expect("value serializes"))
    }

    fn scrub_csv(payload: &[u8], fields: &[String], replacement: &str) -> Result<Vec<u8>, String> {
        let mut reader = csv::ReaderBuilder::new().from_reader(payload);
        let headers = reader.headers().map_err(|e| e.to_string())?.clone();
        let hit: Vec<bool> = headers.iter().map(|h| fields.iter().any(|f| f == h)).collect();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        w.write_record(&headers).map_err(|e| e.to_string())?;
        for rec in reader.records() {
            let rec = rec.map_err(|e| e.to_string())?;
            w.write_record(
                rec.iter()
                    .zip(&hit)
                    .map(|(v, &h)| if h { replacement } else { v }),
            )
            .map_err(|e| e.to_string())?;
        }
        w.into_inner().map_err(|e| e.to_string())
    }
}

impl PayloadModifier for JsonFieldScrub {
    fn validate(&self, config: &ModifierConfig) -> Result<(), String> {
        if config_list(config, "scrubField").is_empty() {
            return Err("'scrubField' must name at least one field".into());
        }
        Ok(())
    }

    fn apply(
        &self,
        payload: Vec<u8>,
        config: &ModifierConfig,
        ctx: &ModifierContext<'_>,
    ) -> Result<Vec<u8>, ModifierError> {
        let fields = config_list(config, "scrubField");
        let replacement = config.get("replacement").map_or("REDACTED", String::as_str);
        let out = match ctx.endpoint.payload_format() {
            PayloadFormat::Json => Self::scrub_json(&payload, &fields, replacement),
            PayloadFormat::Csv => Self::scrub_csv(&payload, &fields, replacement),
        };
        out.map_err(|reason| ModifierError::BadInput {
            id: JSON_FIELD_SCRUB.into(),
            reason,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Endpoint, EndpointKind};
    use crate::security::{Principal, PrincipalSource};
    use crate::template::QueryTemplate;
    use std::collections::BTreeMap;

    fn principal(roles: &[&str]) -> Principal {
        Principal {
            subject: "u".into(),
            roles: roles.iter().map(|r| r.to_string()).collect(),
            source: PrincipalSource::ApiKey,
            expires_at: None,
        }
    }

    fn query(text: &str, params: &[(&str, &str)]) -> BoundQuery {
        BoundQuery {
            text: text.into(),
            applied_params: params
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
            provider_language: "sql".into(),
        }
    }

    fn cfg(pairs: &[(&str, &str)]) -> ModifierConfig {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn role_filter_rejects_value_outside_role_map() {
        let ep = Endpoint::new("e", EndpointKind::Query, QueryTemplate::default());
        let h = BTreeMap::new();
        let p = principal(&["public"]);
        let ctx = ModifierContext::new(&p, &ep, &h);
        let c = cfg(&[("attribute", "project"), ("param", "p"), ("allow.public", "TCGA")]);
        RoleFilter.validate(&c).unwrap();
        let q = query("SELECT * FROM t WHERE project = 'PRIVATE'", &[("p", "PRIVATE")]);
        assert!(matches!(
            RoleFilter.apply(q, &c, &ctx),
            Err(ModifierError::Rejected { .. })
        ));
        let q = query("SELECT * FROM t WHERE project = 'TCGA'", &[("p", "TCGA")]);
        assert!(RoleFilter.apply(q, &c, &ctx).is_ok());
    }

    #[test]
    fn role_filter_wraps_unparameterized_sql() {
        let ep = Endpoint::new("e", EndpointKind::Query, QueryTemplate::default());
        let h = BTreeMap::new();
        let p = principal(&["public"]);
        let ctx = ModifierContext::new(&p, &ep, &h);
        let c = cfg(&[("attribute", "project"), ("allow.public", "TCGA,O'Neil")]);
        let out = RoleFilter.apply(query("SELECT * FROM t;", &[]), &c, &ctx).unwrap();
        assert_eq!(
            out.text,
            "SELECT * FROM (SELECT * FROM t) AS _filtered WHERE \"project\" IN ('O''Neil', 'TCGA')"
        );
        let admin = principal(&["admin"]);
        let ctx = ModifierContext::new(&admin, &ep, &h);
        let c = cfg(&[("attribute", "project"), ("allow.admin", "*"), ("allow.public", "TCGA")]);
        let out = RoleFilter.apply(query("SELECT 1", &[]), &c, &ctx).unwrap();
        assert_eq!(out.text, "SELECT 1");
    }

    #[test]
    fn role_filter_config_is_checked() {
        assert!(RoleFilter.validate(&cfg(&[("attribute", "a")])).is_err());
        assert!(RoleFilter
            .validate(&cfg(&[("attribute", "a b"), ("allow.x", "1")]))
            .is_err());
        assert!(RoleFilter
            .validate(&cfg(&[("attribute", "a"), ("allow.x", "1"), ("bogus", "")]))
            .is_err());
    }

    #[test]
    fn attribute_filter_translation() {
        let f = AttributeFilter {
            attribute: "project".into(),
            param: None,
            allowed_values: ["A".to_string(), "B".to_string()].into(),
            exempt_roles: ["admin".to_string()].into(),
        };
        let r = role_filter_from_attribute_filter(&f);
        assert_eq!(r.config["allow.*"], "A,B");
        assert_eq!(r.config["allow.admin"], "*");
        RoleFilter.validate(&r.config).unwrap();
    }

    #[test]
    fn scrub_json_and_csv() {
        let fields = vec!["name".to_string()];
        assert_eq!(
            JsonFieldScrub::scrub_json(br#"{"name":"x","age":3}"#, &fields, "REDACTED").unwrap(),
            br#"{"name":"REDACTED","age":3}"#
        );
        assert_eq!(
            JsonFieldScrub::scrub_csv(b"name,age\nx,3\n", &fields, "REDACTED").unwrap(),
            b"name,age\nREDACTED,3\n"
        );
        assert!(JsonFieldScrub::scrub_json(b"[1]", &fields, "R").is_err());
    }
}
