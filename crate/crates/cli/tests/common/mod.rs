use serde_json::{json, Value};

fn load(file: &str) -> Value {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/");
    serde_json::from_str(&std::fs::read_to_string(format!("{path}{file}")).unwrap()).unwrap()
}

/// Validate `instance` against a published schema, or against one of its
/// `$defs` when `def` is given.
pub fn assert_conforms(file: &str, def: Option<&str>, instance: &Value) {
    let doc = load(file);
    let schema = match def {
        Some(name) => json!({ "$defs": doc["$defs"], "$ref": format!("#/$defs/{name}") }),
        None => doc,
    };
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> =
        validator.iter_errors(instance).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{file} {def:?}: {errors:?}");
}
