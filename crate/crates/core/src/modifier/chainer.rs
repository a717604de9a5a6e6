//! The output chainer: feeds each result row into another endpoint.

use std::collections::BTreeMap;

use async_trait::async_trait;
use serde_json::Value;

use super::{ChainTarget, ModifierConfig, ModifierContext, ModifierError, ResultModifier};
use crate::model::{is_identifier, is_path_segment, EndpointKind};
use crate::provider::ProviderResult;

pub const OUTPUT_CHAINER: &str = "output-chainer";
pub const DEFAULT_MAX_CHAIN_DEPTH: u32 = 4;

/// Configuration:
/// - `nextEndpoint` (required) and `paramField` (required, the row field
///   whose value is passed on).
/// - `nextProject` and `nextProvider` default to the current ones.
/// - `nextKind` defaults to `query`.
/// - `targetParam` is the target's bind variable, defaulting to
///   `paramField`.
/// - `maxDepth` defaults to 4. The client request is depth 0 and each
///   chained call one deeper; a call that would reach `maxDepth` fails.
pub struct OutputChainer;

struct Settings<'a> {
    target: ChainTarget,
    field: &'a str,
    target_param: &'a str,
    max_depth: u32,
}

fn settings<'a>(config: &'a ModifierConfig, ctx: &ModifierContext<'_>) -> Result<Settings<'a>, String> {
    let endpoint = config.get("nextEndpoint").ok_or("'nextEndpoint' is required")?;
    let field = config.get("paramField").ok_or("'paramField' is required")?;
    let kind = match config.get("nextKind") {
        Some(k) => EndpointKind::from_segment(k).ok_or_else(|| format!("unknown kind '{k}'"))?,
        None => EndpointKind::Query,
    };
    let max_depth = match config.get("maxDepth") {
        Some(d) => d
            .parse::<u32>()
            .ok()
            .filter(|d| *d >= 1)
            .ok_or_else(|| format!("'maxDepth' must be a positive integer, got '{d}'"))?,
        None => DEFAULT_MAX_CHAIN_DEPTH,
    };
    Ok(Settings {
        target: ChainTarget {
            project: config
                .get("nextProject")
                .cloned()
                .unwrap_or_else(|| ctx.project.to_string()),
            profile: config
                .get("nextProvider")
                .cloned()
                .unwrap_or_else(|| ctx.profile.to_string()),
            kind,
            endpoint: endpoint.clone(),
        },
        field,
        target_param: config.get("targetParam").unwrap_or(field),
        max_depth,
    })
}

fn param_value(v: &Value) -> Option<String> {
    match v {
        Value::Null => None,
        Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

#[async_trait]
impl ResultModifier for OutputChainer {
    fn validate(&self, config: &ModifierConfig) -> Result<(), String> {
        const KEYS: &[&str] = &[
            "nextProject",
            "nextProvider",
            "nextKind",
            "nextEndpoint",
            "paramField",
            "targetParam",
            "maxDepth",
        ];
        if let Some(k) = config.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(format!("unknown key '{k}'"));
        }
        for key in ["nextProject", "nextProvider", "nextEndpoint"] {
            if let Some(v) = config.get(key) {
                if !is_path_segment(v) {
                    return Err(format!("'{key}' = '{v}' is not a valid name"));
                }
            }
        }
        if let Some(p) = config.get("targetParam") {
            if !is_identifier(p) {
                return Err(format!("'targetParam' = '{p}' is not a valid name"));
            }
        }
        let h = BTreeMap::new();
        let ep = crate::model::Endpoint::new("", EndpointKind::Query, Default::default());
        let p = crate::security::Principal::anonymous();
        settings(config, &ModifierContext::new(&p, &ep, &h)).map(drop)
    }

    async fn apply(
        &self,
        result: ProviderResult,
        config: &ModifierConfig,
        ctx: &ModifierContext<'_>,
    ) -> Result<ProviderResult, ModifierError> {
        let s = settings(config, ctx).map_err(|r| ModifierError::failure(OUTPUT_CHAINER, r))?;
        if result.binary_payload.is_some() {
            return Err(ModifierError::failure(
                OUTPUT_CHAINER,
                "incoming result has no rows to chain",
            ));
        }
        let invoker = ctx
            .invoker
            .as_ref()
            .ok_or_else(|| ModifierError::failure(OUTPUT_CHAINER, "no gateway to chain through"))?;
        let mut rows = Vec::new();
        for row in &result.rows {
            let depth = ctx.depth + 1;
            if depth >= s.max_depth {
                return Err(ModifierError::ChainDepthExceeded {
                    depth,
                    max: s.max_depth,
                });
            }
            let value = row.get(s.field).and_then(param_value).ok_or_else(|| {
                ModifierError::failure(OUTPUT_CHAINER, format!("row has no value for '{}'", s.field))
            })?;
            let params = BTreeMap::from([(s.target_param.to_string(), value)]);
            let inner = invoker
                .invoke(&s.target, params, ctx.principal, ctx.headers, depth)
                .await?;
            if inner.binary_payload.is_some() {
                return Err(ModifierError::failure(
                    OUTPUT_CHAINER,
                    format!("target {} returned non-row output", s.target),
                ));
            }
            rows.extend(inner.rows);
        }
        Ok(ProviderResult::rows(rows))
    }
}
