use serde_json::{Map, Value};

/// Returns the first complete JSON object embedded in `raw`, skipping any
/// leading prose and ignoring whatever follows the object.
pub fn first_json_object(raw: &str) -> Option<Map<String, Value>> {
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        if let Some(Ok(Value::Object(map))) = stream.next() {
            return Some(map);
        }
    }
    None
}
