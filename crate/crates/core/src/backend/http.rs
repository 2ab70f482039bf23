//! HTTP backends: any OpenAI-compatible chat-completions endpoint for the
//! vision and text roles, and Google Cloud Vision for OCR.

use std::time::Duration;

use base64::Engine as _;
use serde_json::{json, Value};

use super::{
    BackendError, BackendProfile, OcrBackend, TextBackend, TextRequest, VisionBackend,
    VisionRequest,
};
use crate::model::ImageRecord;

fn client(timeout_secs: u64) -> Result<reqwest::blocking::Client, BackendError> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| BackendError::Config(e.to_string()))
}

fn map_err(e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout
    } else {
        BackendError::Unavailable(e.to_string())
    }
}

fn mime_for(uri: &str) -> &'static str {
    let ext = uri.rsplit('.').next().unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "png" => "image/png",
        "gif" => "image/gif",
        "webp" => "image/webp",
        _ => "image/jpeg",
    }
}

fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    bearer: Option<&str>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = bearer {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(map_err)?;
    let status = resp.status();
    let text = resp.text().map_err(map_err)?;
    if status.as_u16() == 429 {
        return Err(BackendError::RateLimited);
    }
    if !status.is_success() {
        return Err(BackendError::Http {
            status: status.as_u16(),
            body: text.chars().take(500).collect(),
        });
    }
    serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))
}

/// Chat-completions client used for both captioning and generation.
pub struct OpenAiCompatible {
    id: String,
    endpoint: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl OpenAiCompatible {
    pub fn from_profile(name: &str, profile: &BackendProfile) -> Result<Self, BackendError> {
        let endpoint = profile
            .endpoint
            .clone()
            .unwrap_or_else(|| "https://api.openai.com/v1".into());
        Ok(Self {
            id: format!("{name}:{}", profile.model),
            endpoint: endpoint.trim_end_matches('/').to_owned(),
            api_key: profile.api_key()?,
            client: client(profile.timeout_secs)?,
        })
    }

    fn chat(
        &self,
        model: &str,
        max_tokens: u32,
        temperature: f32,
        content: Value,
    ) -> Result<String, BackendError> {
        let body = json!({
            "model": model,
            "max_tokens": max_tokens,
            "temperature": temperature,
            "messages": [{"role": "user", "content": content}],
        });
        let url = format!("{}/chat/completions", self.endpoint);
        let resp = post_json(&self.client, &url, self.api_key.as_deref(), &body)?;
        resp.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::Malformed("missing choices[0].message.content".into()))
    }
}

impl VisionBackend for OpenAiCompatible {
    fn id(&self) -> &str {
        &self.id
    }

    fn describe(&self, req: &VisionRequest<'_>) -> Result<String, BackendError> {
        let url = match req.image_bytes {
            Some(bytes) => format!(
                "data:{};base64,{}",
                mime_for(&req.image.uri),
                base64::engine::general_purpose::STANDARD.encode(bytes)
            ),
            None if req.image.uri.starts_with("http") => req.image.uri.clone(),
            None => {
                return Err(BackendError::Config(format!(
                    "no bytes for image {}",
                    req.image.id
                )))
            }
        };
        let content = json!([
            {"type": "text", "text": req.prompt},
            {"type": "image_url", "image_url": {"url": url}},
        ]);
        self.chat(req.model, req.max_tokens, req.temperature, content)
    }
}

impl TextBackend for OpenAiCompatible {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, req: &TextRequest<'_>) -> Result<String, BackendError> {
        self.chat(
            req.model,
            req.max_tokens,
            req.temperature,
            Value::String(req.prompt.to_owned()),
        )
    }
}

/// Google Cloud Vision `TEXT_DETECTION`.
pub struct GoogleVisionOcr {
    url: String,
    client: reqwest::blocking::Client,
}

impl GoogleVisionOcr {
    pub fn from_profile(profile: &BackendProfile) -> Result<Self, BackendError> {
        let base = profile
            .endpoint
            .clone()
            .unwrap_or_else(|| "https://vision.googleapis.com/v1".into());
        let key = profile
            .api_key()?
            .ok_or_else(|| BackendError::Config("google vision needs api_key_env".into()))?;
        Ok(Self {
            url: format!("{}/images:annotate?key={key}", base.trim_end_matches('/')),
            client: client(profile.timeout_secs)?,
        })
    }
}

impl OcrBackend for GoogleVisionOcr {
    fn recognize(&self, image: &ImageRecord, bytes: Option<&[u8]>) -> Result<String, BackendError> {
        let img = match bytes {
            Some(b) => json!({"content": base64::engine::general_purpose::STANDARD.encode(b)}),
            None => json!({"source": {"imageUri": image.uri}}),
        };
        let body = json!({"requests": [{"image": img, "features": [{"type": "TEXT_DETECTION"}]}]});
        let resp = post_json(&self.client, &self.url, None, &body)?;
        Ok(resp
            .pointer("/responses/0/fullTextAnnotation/text")
            .and_then(Value::as_str)
            .unwrap_or("")
            .to_owned())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Serves one canned HTTP response and returns the raw request.
    fn one_shot_server(status: &str, body: &str) -> (String, std::thread::JoinHandle<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let response = format!(
            "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
            body.len()
        );
        let handle = std::thread::spawn(move || {
            let (mut sock, _) = listener.accept().unwrap();
            let mut buf = vec![0u8; 65536];
            let mut req = Vec::new();
            loop {
                let n = sock.read(&mut buf).unwrap();
                req.extend_from_slice(&buf[..n]);
                let text = String::from_utf8_lossy(&req);
                if let Some(head_end) = text.find("\r\n\r\n") {
                    let len = text[..head_end]
                        .lines()
                        .find_map(|l| {
                            l.to_ascii_lowercase()
                                .strip_prefix("content-length: ")
                                .map(|v| v.trim().parse::<usize>().unwrap())
                        })
                        .unwrap_or(0);
                    if req.len() >= head_end + 4 + len {
                        break;
                    }
                }
                if n == 0 {
                    break;
                }
            }
            sock.write_all(response.as_bytes()).unwrap();
            String::from_utf8_lossy(&req).into_owned()
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn profile(endpoint: String) -> BackendProfile {
        BackendProfile {
            kind: super::super::BackendKind::OpenaiCompatible,
            model: "gpt-test".into(),
            endpoint: Some(endpoint),
            timeout_secs: 5,
            ..BackendProfile::default()
        }
    }

    #[test]
    fn text_completion_round_trip() {
        let (endpoint, server) = one_shot_server(
            "200 OK",
            r#"{"choices":[{"message":{"content":"Question 1: hi"}}]}"#,
        );
        let backend = OpenAiCompatible::from_profile("llm", &profile(endpoint)).unwrap();
        let out = backend
            .complete(&TextRequest {
                model: "gpt-test",
                max_tokens: 64,
                temperature: 0.0,
                prompt: "say hi",
                fingerprint: "f",
            })
            .unwrap();
        assert_eq!(out, "Question 1: hi");
        let raw = server.join().unwrap();
        assert!(raw.starts_with("POST /v1/chat/completions"));
        assert!(raw.contains("\"model\":\"gpt-test\""));
    }

    #[test]
    fn server_errors_are_transient() {
        let (endpoint, server) = one_shot_server("503 Service Unavailable", "{}");
        let backend = OpenAiCompatible::from_profile("llm", &profile(endpoint)).unwrap();
        let err = backend
            .complete(&TextRequest {
                model: "m",
                max_tokens: 1,
                temperature: 0.0,
                prompt: "p",
                fingerprint: "f",
            })
            .unwrap_err();
        server.join().unwrap();
        assert!(matches!(err, BackendError::Http { status: 503, .. }));
        assert!(err.is_transient());
    }

    #[test]
    fn missing_api_key_env_is_config_error() {
        let mut p = profile("http://localhost:1".into());
        p.api_key_env = Some("INSTRUCT_ENGINE_TEST_UNSET_KEY".into());
        assert!(matches!(
            OpenAiCompatible::from_profile("x", &p),
            Err(BackendError::Config(_))
        ));
    }
}
