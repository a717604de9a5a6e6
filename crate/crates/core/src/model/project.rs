use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::de::{self, Deserialize, Deserializer, MapAccess, SeqAccess, Visitor};
use serde_json::{Map, Value};

use super::{
    is_identifier, is_path_segment, relaxed, AccessRule, ConnectionDescriptor,
    DataProviderProfile, Endpoint, EndpointKind, ModelError, ModifierRef, OutputFormat,
    PayloadFormat, Project, SubmitType,
};
use crate::template::{extract_bind_variables, BindVariable, QueryTemplate, TypeHint};

/// Parses a project file.
///
/// The project name is the document's top-level `name` key when present,
/// otherwise `default_name` (normally the file stem). Trailing commas are
/// tolerated; duplicate keys at any depth are a schema violation.
pub fn parse_project_file(bytes: &[u8], default_name: &str) -> Result<Project, ModelError> {
    let text = std::str::from_utf8(bytes).map_err(|e| ModelError::MalformedDocument {
        line: 0,
        column: 0,
        message: format!("project file is not UTF-8: {e}"),
    })?;
    let StrictValue(doc) = relaxed::from_str(text).map_err(ModelError::from_json)?;
    project_from_value(doc, default_name)
}

/// Writes `project` as a pretty-printed project file with a stable key order.
/// Empty optional sections are omitted.
pub fn serialize_project_file(project: &Project) -> String {
    let mut root = Map::new();
    root.insert("name".into(), Value::String(project.name.clone()));
    let mut profiles = Map::new();
    for (name, profile) in &project.profiles {
        profiles.insert(name.clone(), profile_to_value(profile));
    }
    root.insert("profiles".into(), Value::Object(profiles));
    for (k, v) in &project.extra {
        root.insert(k.clone(), v.clone());
    }
    let mut out = serde_json::to_string_pretty(&Value::Object(root))
        .expect("serializing a JSON value cannot fail");
    out.push('\n');
    out
}

/// A JSON value that refuses duplicate object keys.
struct StrictValue(Value);

impl<'de> Deserialize<'de> for StrictValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        deserializer.deserialize_any(StrictVisitor).map(StrictValue)
    }
}

struct StrictVisitor;

impl<'de> Visitor<'de> for StrictVisitor {
    type Value = Value;

    fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("any JSON value")
    }

    fn visit_bool<E>(self, v: bool) -> Result<Value, E> {
        Ok(Value::Bool(v))
    }
    fn visit_i64<E>(self, v: i64) -> Result<Value, E> {
        Ok(Value::from(v))
    }
    fn visit_u64<E>(self, v: u64) -> Result<Value, E> {
        Ok(Value::from(v))
    }
    fn visit_f64<E>(self, v: f64) -> Result<Value, E> {
        Ok(serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number))
    }
    fn visit_str<E>(self, v: &str) -> Result<Value, E> {
        Ok(Value::String(v.to_owned()))
    }
    fn visit_string<E>(self, v: String) -> Result<Value, E> {
        Ok(Value::String(v))
    }
    fn visit_unit<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }
    fn visit_none<E>(self) -> Result<Value, E> {
        Ok(Value::Null)
    }

    fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<Value, A::Error> {
        let mut out = Vec::new();
        while let Some(StrictValue(v)) = seq.next_element()? {
            out.push(v);
        }
        Ok(Value::Array(out))
    }

    fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Value, A::Error> {
        let mut out = Map::new();
        while let Some(key) = map.next_key::<String>()? {
            if out.contains_key(&key) {
                return Err(de::Error::custom(format!("duplicate key '{key}'")));
            }
            let StrictValue(v) = map.next_value()?;
            out.insert(key, v);
        }
        Ok(Value::Object(out))
    }
}

fn expect_object(value: Value, what: &str) -> Result<Map<String, Value>, ModelError> {
    match value {
        Value::Object(m) => Ok(m),
        other => Err(ModelError::schema(format!(
            "{what} must be a JSON object, found {}",
            type_name(&other)
        ))),
    }
}

fn expect_string(value: Value, what: &str) -> Result<String, ModelError> {
    match value {
        Value::String(s) => Ok(s),
        other => Err(ModelError::schema(format!(
            "{what} must be a string, found {}",
            type_name(&other)
        ))),
    }
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "array",
        Value::Object(_) => "object",
    }
}

fn scalar_to_string(value: Value, what: &str) -> Result<String, ModelError> {
    match value {
        Value::String(s) => Ok(s),
        Value::Number(n) => Ok(n.to_string()),
        Value::Bool(b) => Ok(b.to_string()),
        Value::Null => Ok(String::new()),
        other => Err(ModelError::schema(format!(
            "{what} must be a scalar, found {}",
            type_name(&other)
        ))),
    }
}

fn string_map(value: Value, what: &str) -> Result<BTreeMap<String, String>, ModelError> {
    expect_object(value, what)?
        .into_iter()
        .map(|(k, v)| {
            let s = scalar_to_string(v, &format!("{what}.{k}"))?;
            Ok((k, s))
        })
        .collect()
}

fn project_from_value(doc: Value, default_name: &str) -> Result<Project, ModelError> {
    let mut root = expect_object(doc, "project file")?;
    let name = match root.remove("name") {
        Some(v) => expect_string(v, "project name")?,
        None => default_name.to_string(),
    };
    if !is_path_segment(&name) {
        return Err(ModelError::schema(format!(
            "project name '{name}' is not a legal URL path segment"
        )));
    }
    let profiles_value = root
        .remove("profiles")
        .ok_or_else(|| ModelError::schema("missing 'profiles'"))?;
    let mut profiles = BTreeMap::new();
    for (profile_name, v) in expect_object(profiles_value, "profiles")? {
        let profile = profile_from_value(&profile_name, v)?;
        profiles.insert(profile_name, profile);
    }
    if profiles.is_empty() {
        return Err(ModelError::schema(
            "project has no data provider profiles, so nothing is servable",
        ));
    }
    Ok(Project {
        name,
        profiles,
        extra: root.into_iter().collect(),
    })
}

fn profile_from_value(name: &str, value: Value) -> Result<DataProviderProfile, ModelError> {
    if !is_path_segment(name) {
        return Err(ModelError::schema(format!(
            "profile name '{name}' is not a legal URL path segment"
        )));
    }
    let mut obj = expect_object(value, &format!("profile '{name}'"))?;
    if let Some(v) = obj.remove("name") {
        let declared = expect_string(v, "profile name")?;
        if declared != name {
            return Err(ModelError::schema(format!(
                "profile key '{name}' disagrees with its name field '{declared}'"
            )));
        }
    }
    let provider_id = match obj.remove("providerId") {
        Some(v) => expect_string(v, "providerId")?,
        None => {
            return Err(ModelError::schema(format!(
                "profile '{name}' is missing providerId"
            )))
        }
    };
    if provider_id.trim().is_empty() {
        return Err(ModelError::schema(format!(
            "profile '{name}' has an empty providerId"
        )));
    }
    let data_source = match obj.remove("dataSource") {
        Some(v) => descriptor_from_value(v, name)?,
        None => ConnectionDescriptor::default(),
    };
    let mut profile = DataProviderProfile::new(name, provider_id);
    profile.data_source = data_source;
    for kind in EndpointKind::ALL {
        if let Some(v) = obj.remove(kind.map_key()) {
            let map = expect_object(v, &format!("{name}.{}", kind.map_key()))?;
            for (ep_name, ep_value) in map {
                let ep = endpoint_from_value(&ep_name, kind, ep_value)?;
                profile.endpoints_mut(kind).insert(ep_name, ep);
            }
        }
    }
    profile.extra = obj.into_iter().collect();
    Ok(profile)
}

fn descriptor_from_value(value: Value, profile: &str) -> Result<ConnectionDescriptor, ModelError> {
    let mut obj = expect_object(value, &format!("{profile}.dataSource"))?;
    let initialize = match obj.remove("initialize") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => b,
        Some(Value::String(s)) if s == "true" || s == "false" => s == "true",
        Some(other) => {
            return Err(ModelError::schema(format!(
                "{profile}.dataSource.initialize must be a boolean, found {}",
                type_name(&other)
            )))
        }
    };
    let properties = string_map(Value::Object(obj), &format!("{profile}.dataSource"))?;
    Ok(ConnectionDescriptor {
        properties,
        initialize,
    })
}

fn take_modifiers(
    obj: &mut Map<String, Value>,
    keys: &[&str],
    what: &str,
) -> Result<Vec<ModifierRef>, ModelError> {
    let mut found: Option<Value> = None;
    for key in keys {
        if let Some(v) = obj.remove(*key) {
            if found.is_some() {
                return Err(ModelError::schema(format!(
                    "{what}: modifier list given under more than one key ({})",
                    keys.join(", ")
                )));
            }
            found = Some(v);
        }
    }
    let Some(value) = found else {
        return Ok(Vec::new());
    };
    let items = match value {
        Value::Array(items) => items,
        other => {
            return Err(ModelError::schema(format!(
                "{what} must be an array, found {}",
                type_name(&other)
            )))
        }
    };
    items
        .into_iter()
        .map(|item| match item {
            Value::String(id) => Ok(ModifierRef::new(id)),
            Value::Object(mut m) => {
                let id = m
                    .remove("id")
                    .ok_or_else(|| ModelError::schema(format!("{what}: modifier without id")))?;
                let id = expect_string(id, &format!("{what}.id"))?;
                let config = match m.remove("config") {
                    Some(v) => string_map(v, &format!("{what}.{id}.config"))?,
                    None => BTreeMap::new(),
                };
                if let Some(k) = m.keys().next() {
                    return Err(ModelError::schema(format!(
                        "{what}.{id}: unexpected key '{k}'"
                    )));
                }
                Ok(ModifierRef { id, config })
            }
            other => Err(ModelError::schema(format!(
                "{what}: modifier must be a string or object, found {}",
                type_name(&other)
            ))),
        })
        .collect()
}

fn bind_variable_from_value(value: Value, what: &str) -> Result<BindVariable, ModelError> {
    let mut obj = expect_object(value, what)?;
    let name = expect_string(
        obj.remove("name")
            .ok_or_else(|| ModelError::schema(format!("{what}: missing name")))?,
        &format!("{what}.name"),
    )?;
    if !is_identifier(&name) {
        return Err(ModelError::schema(format!(
            "{what}: '{name}' is not a legal bind variable name"
        )));
    }
    let required = match obj.remove("required") {
        None => true,
        Some(Value::Bool(b)) => b,
        Some(other) => {
            return Err(ModelError::schema(format!(
                "{what}.required must be a boolean, found {}",
                type_name(&other)
            )))
        }
    };
    let default = match obj.remove("defaultValue") {
        None | Some(Value::Null) => None,
        Some(v) => Some(scalar_to_string(v, &format!("{what}.defaultValue"))?),
    };
    let type_hint = match obj.remove("type") {
        None => TypeHint::String,
        Some(v) => {
            let s = expect_string(v, &format!("{what}.type"))?;
            s.parse::<TypeHint>()
                .map_err(|e| ModelError::schema(format!("{what}: {e}")))?
        }
    };
    let description = match obj.remove("description") {
        None | Some(Value::Null) => None,
        Some(v) => Some(expect_string(v, &format!("{what}.description"))?),
    };
    if let Some(k) = obj.keys().next() {
        return Err(ModelError::schema(format!("{what}: unexpected key '{k}'")));
    }
    if required && default.is_some() {
        return Err(ModelError::schema(format!(
            "{what}: required variable '{name}' must not declare a default"
        )));
    }
    if !required && default.is_none() {
        return Err(ModelError::schema(format!(
            "{what}: optional variable '{name}' must declare a defaultValue"
        )));
    }
    Ok(BindVariable {
        name,
        required,
        default,
        type_hint,
        description,
    })
}

fn endpoint_from_value(name: &str, kind: EndpointKind, value: Value) -> Result<Endpoint, ModelError> {
    let what = format!("{} endpoint '{name}'", kind.segment());
    if !is_path_segment(name) {
        return Err(ModelError::schema(format!(
            "{what}: name is not a legal URL path segment"
        )));
    }
    let mut obj = expect_object(value, &what)?;
    if let Some(v) = obj.remove("name") {
        let declared = expect_string(v, &format!("{what}.name"))?;
        if declared != name {
            return Err(ModelError::schema(format!(
                "{what}: key disagrees with its name field '{declared}'"
            )));
        }
    }
    let text = match obj.remove("queryTemplate") {
        None | Some(Value::Null) => String::new(),
        Some(v) => expect_string(v, &format!("{what}.queryTemplate"))?,
    };
    let bind_variables = match obj.remove("bindVariables") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .into_iter()
            .enumerate()
            .map(|(i, v)| bind_variable_from_value(v, &format!("{what}.bindVariables[{i}]")))
            .collect::<Result<Vec<_>, _>>()?,
        Some(other) => {
            return Err(ModelError::schema(format!(
                "{what}.bindVariables must be an array, found {}",
                type_name(&other)
            )))
        }
    };
    let output_format = match obj.remove("outputFormat") {
        None => OutputFormat::Json,
        Some(v) => serde_json::from_value::<OutputFormat>(v)
            .map_err(|e| ModelError::schema(format!("{what}.outputFormat: {e}")))?,
    };
    let metadata = match (obj.remove("metaData"), obj.remove("metadata")) {
        (Some(_), Some(_)) => {
            return Err(ModelError::schema(format!(
                "{what}: both metaData and metadata given"
            )))
        }
        (Some(v), None) | (None, Some(v)) => string_map(v, &format!("{what}.metaData"))?,
        (None, None) => BTreeMap::new(),
    };
    let query_modifiers = take_modifiers(&mut obj, &["queryModifiers"], &what)?;
    let result_modifiers =
        take_modifiers(&mut obj, &["queryResultModifiers", "resultModifiers"], &what)?;
    let payload_modifiers =
        take_modifiers(&mut obj, &["submitPayloadModifiers", "payloadModifiers"], &what)?;
    let visibility = match obj.remove("visibility") {
        None | Some(Value::Null) => None,
        Some(v) => Some(
            serde_json::from_value::<AccessRule>(v)
                .map_err(|e| ModelError::schema(format!("{what}.visibility: {e}")))?,
        ),
    };
    let submit_type = match obj.remove("type") {
        None | Some(Value::Null) => None,
        Some(v) => Some(serde_json::from_value::<SubmitType>(v).map_err(|e| {
            ModelError::schema(format!(
                "{what}.type: {e} (supported: FORM_DATA, RAW)"
            ))
        })?),
    };
    let properties: BTreeMap<String, Value> = match obj.remove("properties") {
        None | Some(Value::Null) => BTreeMap::new(),
        Some(v) => expect_object(v, &format!("{what}.properties"))?
            .into_iter()
            .collect(),
    };
    if let Some(v) = properties.get("inputType") {
        let s = v
            .as_str()
            .ok_or_else(|| ModelError::schema(format!("{what}.properties.inputType must be a string")))?;
        s.parse::<PayloadFormat>()?;
    }

    if kind != EndpointKind::Submit {
        if !payload_modifiers.is_empty() {
            return Err(ModelError::schema(format!(
                "{what}: payload modifiers are only allowed on submit endpoints"
            )));
        }
        if submit_type.is_some() {
            return Err(ModelError::schema(format!(
                "{what}: 'type' is only meaningful on submit endpoints"
            )));
        }
    }
    if kind != EndpointKind::Query
        && visibility
            .as_ref()
            .is_some_and(|v| v.attribute_filter.is_some())
    {
        return Err(ModelError::schema(format!(
            "{what}: attributeFilter applies only to query endpoints"
        )));
    }

    let template = QueryTemplate {
        text,
        bind_variables,
    };
    check_template(&what, &template)?;

    Ok(Endpoint {
        name: name.to_string(),
        kind,
        query_template: template,
        output_format,
        metadata,
        query_modifiers,
        result_modifiers,
        payload_modifiers,
        visibility,
        submit_type,
        properties,
        extra: obj.into_iter().collect(),
    })
}

fn check_template(what: &str, template: &QueryTemplate) -> Result<(), ModelError> {
    let extracted = extract_bind_variables(&template.text)
        .map_err(|e| ModelError::schema(format!("{what}: invalid query template: {e}")))?;
    let mut declared = BTreeSet::new();
    for var in &template.bind_variables {
        if !declared.insert(var.name.as_str()) {
            return Err(ModelError::schema(format!(
                "{what}: bind variable '{}' declared more than once",
                var.name
            )));
        }
    }
    let extracted_set: BTreeSet<&str> = extracted.iter().map(String::as_str).collect();
    if declared != extracted_set {
        return Err(ModelError::TemplateMismatch {
            endpoint: what.to_string(),
            declared: template
                .bind_variables
                .iter()
                .map(|v| v.name.clone())
                .collect(),
            extracted,
        });
    }
    Ok(())
}

fn profile_to_value(profile: &DataProviderProfile) -> Value {
    let mut obj = Map::new();
    obj.insert(
        "providerId".into(),
        Value::String(profile.provider_id.clone()),
    );
    let ds = &profile.data_source;
    if !ds.properties.is_empty() || ds.initialize {
        let mut m = Map::new();
        for (k, v) in &ds.properties {
            m.insert(k.clone(), Value::String(v.clone()));
        }
        m.insert("initialize".into(), Value::Bool(ds.initialize));
        obj.insert("dataSource".into(), Value::Object(m));
    }
    for kind in EndpointKind::ALL {
        let eps = profile.endpoints(kind);
        if eps.is_empty() {
            continue;
        }
        let m: Map<String, Value> = eps
            .iter()
            .map(|(k, ep)| (k.clone(), endpoint_to_value(ep)))
            .collect();
        obj.insert(kind.map_key().into(), Value::Object(m));
    }
    for (k, v) in &profile.extra {
        obj.insert(k.clone(), v.clone());
    }
    Value::Object(obj)
}

fn modifiers_to_value(chain: &[ModifierRef]) -> Value {
    Value::Array(
        chain
            .iter()
            .map(|m| {
                let mut o = Map::new();
                o.insert("id".into(), Value::String(m.id.clone()));
                if !m.config.is_empty() {
                    let cfg = m
                        .config
                        .iter()
                        .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                        .collect();
                    o.insert("config".into(), Value::Object(cfg));
                }
                Value::Object(o)
            })
            .collect(),
    )
}

fn endpoint_to_value(ep: &Endpoint) -> Value {
    let mut obj = Map::new();
    obj.insert("name".into(), Value::String(ep.name.clone()));
    if !ep.query_template.text.is_empty() {
        obj.insert(
            "queryTemplate".into(),
            Value::String(ep.query_template.text.clone()),
        );
    }
    if !ep.query_template.bind_variables.is_empty() {
        let vars = ep
            .query_template
            .bind_variables
            .iter()
            .map(|v| {
                let mut o = Map::new();
                o.insert("name".into(), Value::String(v.name.clone()));
                o.insert("required".into(), Value::Bool(v.required));
                if let Some(d) = &v.default {
                    o.insert("defaultValue".into(), Value::String(d.clone()));
                }
                o.insert("type".into(), Value::String(v.type_hint.as_str().into()));
                if let Some(d) = &v.description {
                    o.insert("description".into(), Value::String(d.clone()));
                }
                Value::Object(o)
            })
            .collect();
        obj.insert("bindVariables".into(), Value::Array(vars));
    }
    obj.insert(
        "outputFormat".into(),
        serde_json::to_value(ep.output_format).expect("enum serializes"),
    );
    if !ep.metadata.is_empty() {
        let m = ep
            .metadata
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        obj.insert("metaData".into(), Value::Object(m));
    }
    if !ep.query_modifiers.is_empty() {
        obj.insert("queryModifiers".into(), modifiers_to_value(&ep.query_modifiers));
    }
    if !ep.result_modifiers.is_empty() {
        obj.insert(
            "queryResultModifiers".into(),
            modifiers_to_value(&ep.result_modifiers),
        );
    }
    if !ep.payload_modifiers.is_empty() {
        obj.insert(
            "submitPayloadModifiers".into(),
            modifiers_to_value(&ep.payload_modifiers),
        );
    }
    if let Some(vis) = &ep.visibility {
        obj.insert(
            "visibility".into(),
            serde_json::to_value(vis).expect("access rule serializes"),
        );
    }
    if let Some(t) = ep.submit_type {
        obj.insert("type".into(), serde_json::to_value(t).expect("enum serializes"));
    }
    if !ep.properties.is_empty() {
        obj.insert(
            "properties".into(),
            Value::Object(ep.properties.clone().into_iter().collect()),
        );
    }
    for (k, v) in &ep.extra {
        obj.insert(k.clone(), v.clone());
    }
    Value::Object(obj)
}
