//! Extraction of JSON answers from free-form LLM text.

use serde_json::{Map, Value};

use crate::error::{Error, Result};

type Check = fn(&Map<String, Value>) -> std::result::Result<(), String>;

fn string_field(obj: &Map<String, Value>, key: &str) -> std::result::Result<(), String> {
    match obj.get(key) {
        Some(Value::String(_)) => Ok(()),
        Some(_) => Err(format!("`{key}` must be a string")),
        None => Err(format!("missing `{key}`")),
    }
}

fn string_list(value: Option<&Value>, key: &str) -> std::result::Result<(), String> {
    match value {
        Some(Value::Array(items)) if items.iter().all(Value::is_string) => Ok(()),
        Some(_) => Err(format!("`{key}` must be a list of strings")),
        None => Err(format!("missing `{key}`")),
    }
}

fn objects<'a>(
    obj: &'a Map<String, Value>,
    key: &str,
) -> std::result::Result<Vec<&'a Map<String, Value>>, String> {
    match obj.get(key) {
        Some(Value::Array(items)) => items
            .iter()
            .map(|v| v.as_object().ok_or_else(|| format!("`{key}` entries must be objects")))
            .collect(),
        _ => Err(format!("`{key}` must be a list")),
    }
}

fn check_subjects(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    if let Some(v) = obj.get("has_characters") {
        if !v.is_boolean() {
            return Err("`has_characters` must be a boolean".into());
        }
    }
    for s in objects(obj, "subjects")? {
        string_field(s, "name")?;
    }
    Ok(())
}

fn check_details(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    string_field(obj, "portrait_prompt")?;
    string_field(obj, "type_token")?;
    if obj.contains_key("style_tags") {
        string_list(obj.get("style_tags"), "style_tags")?;
    }
    Ok(())
}

fn check_descriptor(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    string_field(obj, "short_descriptor")
}

fn check_scenes(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    string_list(obj.get("scenes"), "scenes")
}

fn check_presence(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    match obj.get("present") {
        Some(Value::Bool(_)) => Ok(()),
        _ => Err("`present` must be true or false".into()),
    }
}

fn check_rewrite(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    string_field(obj, "rewritten")
}

fn check_pool(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    for s in objects(obj, "subjects")? {
        for key in ["name", "portrait_prompt", "short_descriptor", "type_token"] {
            string_field(s, key)?;
        }
    }
    Ok(())
}

fn check_case(obj: &Map<String, Value>) -> std::result::Result<(), String> {
    string_field(obj, "scene_prompt")
}

fn schema_check(schema_id: &str) -> Option<Check> {
    Some(match schema_id {
        "subjects" => check_subjects,
        "subject_details" => check_details,
        "descriptor" => check_descriptor,
        "scenes" => check_scenes,
        "presence" => check_presence,
        "rewrite" => check_rewrite,
        "pool" => check_pool,
        "case" => check_case,
        _ => return None,
    })
}

/// Validates `value` against the named answer schema.
pub fn validate_schema(schema_id: &str, value: &Value) -> std::result::Result<(), String> {
    let check = schema_check(schema_id).ok_or_else(|| format!("unknown schema `{schema_id}`"))?;
    let obj = value.as_object().ok_or("answer must be a JSON object")?;
    check(obj)
}

/// Bare yes/no answers are accepted for presence questions.
fn yes_no(text: &str) -> Option<bool> {
    let word = text
        .trim()
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_lowercase();
    match word.as_str() {
        "yes" | "true" => Some(true),
        "no" | "false" => Some(false),
        _ => None,
    }
}

/// Returns the first JSON object embedded in `text` that satisfies the schema.
///
/// Code fences and surrounding prose are skipped because every `{` is tried
/// as the start of an island.
pub fn parse_structured_response(text: &str, schema_id: &str) -> Result<Value> {
    let fail = |reason: String| Error::LlmFormat {
        stage: schema_id.to_string(),
        reason,
        text: text.to_string(),
    };
    if schema_check(schema_id).is_none() {
        return Err(Error::Input(format!("unknown schema `{schema_id}`")));
    }
    let mut first_problem = None;
    let mut pos = 0;
    while let Some(offset) = text[pos..].find('{') {
        let start = pos + offset;
        let mut stream = serde_json::Deserializer::from_str(&text[start..]).into_iter::<Value>();
        match stream.next() {
            Some(Ok(value)) => {
                match validate_schema(schema_id, &value) {
                    Ok(()) => return Ok(value),
                    Err(e) => {
                        first_problem.get_or_insert(e);
                    }
                }
                pos = start + stream.byte_offset();
            }
            _ => pos = start + 1,
        }
    }
    if schema_id == "presence" {
        if let Some(present) = yes_no(text) {
            return Ok(serde_json::json!({ "present": present }));
        }
    }
    Err(fail(first_problem.unwrap_or_else(|| "no JSON object found".into())))
}
