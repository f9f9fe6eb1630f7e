//! Every field the config types serialise must be declared in the published
//! schema, with a compatible JSON type.

use std::fs;
use std::path::{Path, PathBuf};

use advtrain::config::RunConfig;
use serde_json::Value;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn resolve<'a>(schema: &'a Value, node: &'a Value) -> &'a Value {
    match node.get("$ref").and_then(Value::as_str) {
        Some(r) => {
            let name = r.strip_prefix("#/$defs/").expect("local ref");
            &schema["$defs"][name]
        }
        None => node,
    }
}

fn type_ok(node: &Value, v: &Value) -> bool {
    let names: Vec<&str> = match &node["type"] {
        Value::String(s) => vec![s.as_str()],
        Value::Array(a) => a.iter().filter_map(Value::as_str).collect(),
        _ => return true,
    };
    names.iter().any(|&t| match t {
        "object" => v.is_object(),
        "array" => v.is_array(),
        "string" => v.is_string(),
        "boolean" => v.is_boolean(),
        "null" => v.is_null(),
        "integer" => v.is_u64() || v.is_i64(),
        "number" => v.is_number(),
        _ => false,
    })
}

fn check(schema: &Value, node: &Value, v: &Value, at: &str) {
    let node = resolve(schema, node);
    if let Some(branches) = node["oneOf"].as_array() {
        let tag = |b: &Value| -> Option<(String, Value)> {
            let b = resolve(schema, b);
            let props = b["properties"].as_object()?;
            props
                .iter()
                .find_map(|(k, p)| p.get("const").map(|c| (k.clone(), c.clone())))
        };
        let pick = branches.iter().find(|b| match tag(b) {
            Some((k, c)) => v.get(&k) == Some(&c),
            None => type_ok(resolve(schema, b), v),
        });
        let branch = pick.unwrap_or_else(|| panic!("{at}: no schema branch accepts {v}"));
        return check(schema, branch, v, at);
    }
    if let Some(allowed) = node["enum"].as_array() {
        assert!(allowed.contains(v), "{at}: {v} not in {allowed:?}");
    }
    assert!(type_ok(node, v), "{at}: {v} does not match {}", node["type"]);
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let p = node["properties"]
                    .get(k)
                    .unwrap_or_else(|| panic!("{at}.{k} is not declared in the schema"));
                check(schema, p, x, &format!("{at}.{k}"));
            }
            for r in node["required"].as_array().into_iter().flatten() {
                assert!(map.contains_key(r.as_str().unwrap()), "{at}: missing required {r}");
            }
        }
        Value::Array(items) if node.get("items").is_some() => {
            for (i, x) in items.iter().enumerate() {
                check(schema, &node["items"], x, &format!("{at}[{i}]"));
            }
        }
        _ => {}
    }
}

#[test]
fn presets_with_all_defaults_filled_in_match_the_schema() {
    let schema: Value = serde_json::from_str(&fs::read_to_string(root().join("configs/schema.json")).unwrap()).unwrap();
    let mut seen = 0;
    for entry in fs::read_dir(root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        if path.file_name().unwrap() == "schema.json" {
            continue;
        }
        let cfg = RunConfig::load(&path, &[]).unwrap();
        let full = serde_json::to_value(&cfg).unwrap();
        check(&schema, &schema, &full, &path.file_name().unwrap().to_string_lossy());
        seen += 1;
    }
    assert!(seen >= 4);
}

#[test]
fn custom_layers_and_sgd_match_the_schema() {
    let schema: Value = serde_json::from_str(&fs::read_to_string(root().join("configs/schema.json")).unwrap()).unwrap();
    let mut v: Value = serde_json::from_str(&fs::read_to_string(root().join("configs/blobs_rat.json")).unwrap()).unwrap();
    v["model"] = serde_json::json!({"kind": "custom", "layers": [
        {"type": "dense", "out_features": 8}, {"type": "relu"}, {"type": "dense", "out_features": 2}]});
    v["train"]["optimizer"] = serde_json::json!({"kind": "sgd"});
    v["train"]["early_stop"] = serde_json::json!({"kind": "on"});
    v["train"]["eval_attack"] = v["train"]["attack"].clone();
    let cfg = RunConfig::from_value(v).unwrap();
    check(&schema, &schema, &serde_json::to_value(&cfg).unwrap(), "custom");
}
