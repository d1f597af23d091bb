//! [`ModelEndpoint`] over a running `plvm serve`.

use base64::Engine as _;
use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use plvm::evalsuite::ModelEndpoint;
use plvm::image::Image;
use plvm::{PlvmError, Result};

pub struct HttpEndpoint {
    base: String,
    client: Client,
    session: String,
}

fn remote(e: impl std::fmt::Display) -> PlvmError {
    PlvmError::Endpoint(e.to_string())
}

impl HttpEndpoint {
    pub fn new(base: &str) -> Result<Self> {
        let client = Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(remote)?;
        Ok(Self {
            base: base.trim_end_matches('/').to_string(),
            client,
            session: format!("eval-{}", std::process::id()),
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    fn check(resp: reqwest::blocking::Response) -> Result<Value> {
        let status = resp.status();
        let body: Value = resp.json().unwrap_or(Value::Null);
        if status.is_success() {
            Ok(body)
        } else {
            Err(remote(format!("HTTP {status}: {body}")))
        }
    }

    fn b64(img: &Image) -> Result<String> {
        Ok(base64::engine::general_purpose::STANDARD.encode(img.encode_png()?))
    }
}

impl ModelEndpoint for HttpEndpoint {
    /// Replaces a concept of the same name left over from earlier runs.
    fn register(&mut self, name: &str, reference: &Image) -> Result<()> {
        let body = json!({"name": name, "image": Self::b64(reference)?});
        let resp = self.client.post(self.url("/concepts")).json(&body).send().map_err(remote)?;
        if resp.status() == StatusCode::CONFLICT {
            let path = format!("/concepts/{}", percent(name));
            self.client.delete(self.url(&path)).send().map_err(remote)?;
            let resp = self.client.post(self.url("/concepts")).json(&body).send().map_err(remote)?;
            return Self::check(resp).map(|_| ());
        }
        Self::check(resp).map(|_| ())
    }

    fn ask(&mut self, concept: &str, question: &str, query: Option<&Image>) -> Result<String> {
        let mut body = json!({"session_id": self.session, "question": question, "concepts": [concept]});
        if let Some(img) = query {
            body["query_image"] = Value::String(Self::b64(img)?);
        }
        let v = Self::check(self.client.post(self.url("/chat")).json(&body).send().map_err(remote)?)?;
        v["answer"]
            .as_str()
            .map(String::from)
            .ok_or_else(|| remote(format!("reply without an answer: {v}")))
    }
}

/// Percent-encodes everything outside unreserved ASCII.
fn percent(s: &str) -> String {
    s.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    #[test]
    fn percent_encodes_brackets() {
        assert_eq!(super::percent("⟨a_1⟩"), "%E2%9F%A8a_1%E2%9F%A9");
    }
}
