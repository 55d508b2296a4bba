use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{ServiceKind, Transport, TransportError};
use crate::error::{Error, Result};

/// Serializes JSON with object keys sorted and no insignificant whitespace.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_canonical(v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (k, key) in keys.into_iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                out.push_str(&Value::String(key.clone()).to_string());
                out.push(':');
                write_canonical(&map[key], out);
            }
            out.push('}');
        }
        Value::Array(items) => {
            out.push('[');
            for (k, item) in items.iter().enumerate() {
                if k > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        scalar => out.push_str(&scalar.to_string()),
    }
}

/// SHA-256 (hex) over `"<kind>\n<canonical body>"`.
pub fn request_digest(kind: ServiceKind, body: &Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_str().as_bytes());
    h.update(b"\n");
    h.update(canonical_json(body).as_bytes());
    hex::encode(h.finalize())
}

/// What the mock does with a request it has no scripted response for.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum DefaultPolicy {
    #[default]
    Error,
    Fixed(Value),
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptLine {
    kind: ServiceKind,
    digest: String,
    response: Value,
}

/// Digest-keyed canned responses. Lookups are pure, so one script can serve
/// any number of concurrent callers with identical results.
#[derive(Debug, Clone, Default)]
pub struct MockScript {
    responses: HashMap<String, (ServiceKind, Value)>,
    defaults: BTreeMap<ServiceKind, DefaultPolicy>,
}

/// Digest placeholder used in script files for a per-kind fallback response.
const FALLBACK_DIGEST: &str = "*";

impl MockScript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_digest(&mut self, kind: ServiceKind, digest: impl Into<String>, response: Value) {
        self.responses.insert(digest.into(), (kind, response));
    }

    /// Scripts `response` for exactly the request body `request`.
    pub fn insert<Req: Serialize, Resp: Serialize>(
        &mut self,
        kind: ServiceKind,
        request: &Req,
        response: &Resp,
    ) -> &mut Self {
        let req = serde_json::to_value(request).expect("request bodies serialize to JSON");
        let resp = serde_json::to_value(response).expect("response bodies serialize to JSON");
        self.insert_digest(kind, request_digest(kind, &req), resp);
        self
    }

    pub fn set_default(&mut self, kind: ServiceKind, policy: DefaultPolicy) -> &mut Self {
        self.defaults.insert(kind, policy);
        self
    }

    pub fn set_fallback<Resp: Serialize>(&mut self, kind: ServiceKind, response: &Resp) -> &mut Self {
        let v = serde_json::to_value(response).expect("response bodies serialize to JSON");
        self.set_default(kind, DefaultPolicy::Fixed(v))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn lookup(&self, kind: ServiceKind, body: &Value) -> Result<Value, TransportError> {
        let digest = request_digest(kind, body);
        if let Some((k, v)) = self.responses.get(&digest) {
            if *k == kind {
                return Ok(v.clone());
            }
        }
        match self.defaults.get(&kind) {
            Some(DefaultPolicy::Fixed(v)) => Ok(v.clone()),
            _ => Err(TransportError::MockMiss { digest }),
        }
    }

    /// Parses a JSON-lines script. A line whose digest is `"*"` sets the
    /// fallback response for its kind.
    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut script = MockScript::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let l: ScriptLine = serde_json::from_str(line)
                .map_err(|e| Error::at(format!("script line {}", n + 1), e.to_string()))?;
            if l.digest == FALLBACK_DIGEST {
                script.set_default(l.kind, DefaultPolicy::Fixed(l.response));
            } else {
                script.insert_digest(l.kind, l.digest, l.response);
            }
        }
        Ok(script)
    }

    /// Writes the script back out, sorted so the bytes are reproducible.
    pub fn to_jsonl(&self) -> String {
        let mut lines: Vec<String> = Vec::new();
        for (kind, policy) in &self.defaults {
            if let DefaultPolicy::Fixed(v) = policy {
                lines.push(line_json(*kind, FALLBACK_DIGEST, v));
            }
        }
        let mut entries: Vec<_> = self.responses.iter().collect();
        entries.sort_by(|a, b| (a.1 .0, a.0).cmp(&(b.1 .0, b.0)));
        for (digest, (kind, v)) in entries {
            lines.push(line_json(*kind, digest, v));
        }
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }
}

fn line_json(kind: ServiceKind, digest: &str, response: &Value) -> String {
    let v = serde_json::json!({"kind": kind, "digest": digest, "response": response});
    canonical_json(&v)
}

/// In-process transport answering from a [`MockScript`].
#[derive(Debug, Clone)]
pub struct MockTransport {
    script: Arc<MockScript>,
}

impl MockTransport {
    pub fn new(script: MockScript) -> Self {
        MockTransport {
            script: Arc::new(script),
        }
    }

    pub fn script(&self) -> &MockScript {
        &self.script
    }
}

#[async_trait]
impl Transport for MockTransport {
    async fn call(&self, kind: ServiceKind, body: &Value) -> Result<Value, TransportError> {
        self.script.lookup(kind, body)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::wire::{CompleteRequest, TextResponse};
    use serde_json::json;

    #[test]
    fn canonical_form_sorts_keys() {
        let a = json!({"b": 1, "a": {"z": [1, 2.5, "x"], "y": null}});
        assert_eq!(canonical_json(&a), r#"{"a":{"y":null,"z":[1,2.5,"x"]},"b":1}"#);
        let b: Value = serde_json::from_str(r#"{ "a" : {"z":[1,2.5,"x"],"y":null}, "b":1 }"#).unwrap();
        assert_eq!(request_digest(ServiceKind::Complete, &a), request_digest(ServiceKind::Complete, &b));
        assert_ne!(request_digest(ServiceKind::Complete, &a), request_digest(ServiceKind::Caption, &a));
    }

    #[test]
    fn digest_is_pinned() {
        // sha256("complete\n{\"max_tokens\":8,\"prompt\":\"hi\"}")
        let d = request_digest(ServiceKind::Complete, &json!({"prompt": "hi", "max_tokens": 8}));
        let mut h = Sha256::new();
        h.update(br#"complete
{"max_tokens":8,"prompt":"hi"}"#);
        assert_eq!(d, hex::encode(h.finalize()));
    }

    #[test]
    fn lookup_and_defaults() {
        let req = CompleteRequest { prompt: "p".into(), max_tokens: 4 };
        let mut s = MockScript::new();
        s.insert(ServiceKind::Complete, &req, &TextResponse::new("scripted"));
        let body = serde_json::to_value(&req).unwrap();
        assert_eq!(s.lookup(ServiceKind::Complete, &body).unwrap(), json!({"text": "scripted"}));
        let other = json!({"prompt": "q", "max_tokens": 4});
        assert!(matches!(
            s.lookup(ServiceKind::Complete, &other),
            Err(TransportError::MockMiss { .. })
        ));
        s.set_fallback(ServiceKind::Complete, &TextResponse::new("fallback"));
        assert_eq!(s.lookup(ServiceKind::Complete, &other).unwrap()["text"], "fallback");
    }

    #[test]
    fn jsonl_roundtrip() {
        let mut s = MockScript::new();
        s.insert(ServiceKind::Vqa, &json!({"question": "q", "image_png_b64": ""}), &TextResponse::new("yes"));
        s.set_fallback(ServiceKind::Caption, &TextResponse::new("a caption"));
        let text = s.to_jsonl();
        let back = MockScript::from_jsonl(&text).unwrap();
        assert_eq!(back.to_jsonl(), text);
        assert!(MockScript::from_jsonl("{\"kind\":\"bogus\"}").is_err());
    }
}
