//! HTTP embedding and completion providers.
//!
//! Both speak a generate-style JSON protocol: embeddings come back in a
//! top-level `embedding` array, completions in a top-level `response`
//! string. Transport failures, timeouts and 5xx answers are retried.

use std::collections::HashMap;
use std::sync::RwLock;
use std::time::Duration;

use prefchain_core::calibration::{GenerationParams, LlmProvider, ProviderError};
use prefchain_core::embedding::{EmbeddingError, EmbeddingProvider, EmbeddingVector};
use serde_json::{json, Value};

/// Extra attempts after the first failed request.
pub const MAX_RETRIES: usize = 2;

#[derive(Debug, Clone)]
pub struct HttpClient {
    agent: ureq::Agent,
    url: String,
}

impl HttpClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        let agent =
            ureq::Agent::config_builder().timeout_global(Some(timeout)).http_status_as_error(true).build().into();
        Self { agent, url: url.into() }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn post_once(&self, body: &Value) -> Result<Value, ProviderError> {
        let mut response = self.agent.post(&self.url).send_json(body).map_err(classify)?;
        response.body_mut().read_json::<Value>().map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }

    /// Posts `body`, retrying failures that may be transient.
    pub fn post_json(&self, body: &Value) -> Result<Value, ProviderError> {
        let mut attempt = 0;
        loop {
            match self.post_once(body) {
                Err(e) if attempt < MAX_RETRIES && retryable(&e) => attempt += 1,
                other => return other,
            }
        }
    }
}

fn classify(e: ureq::Error) -> ProviderError {
    match e {
        ureq::Error::StatusCode(code) => ProviderError::Status(code),
        ureq::Error::Timeout(_) => ProviderError::Timeout,
        other => ProviderError::Transport(other.to_string()),
    }
}

fn retryable(e: &ProviderError) -> bool {
    match e {
        ProviderError::Transport(_) | ProviderError::Timeout => true,
        ProviderError::Status(code) => *code >= 500,
        _ => false,
    }
}

/// Embeddings from a remote model server.
#[derive(Debug, Clone)]
pub struct HttpEmbedder {
    client: HttpClient,
    model: String,
    id: String,
}

impl HttpEmbedder {
    pub fn new(client: HttpClient, model: impl Into<String>) -> Self {
        let model = model.into();
        let id = format!("http:{}@{}", model, client.url());
        Self { client, model, id }
    }

    fn request(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let answer = self.client.post_json(&json!({ "model": self.model, "prompt": text }))?;
        let values = answer
            .get("embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::InvalidResponse("no embedding array".into()))?
            .iter()
            .map(|v| v.as_f64().ok_or_else(|| ProviderError::InvalidResponse("non-numeric embedding".into())))
            .collect::<Result<Vec<f64>, _>>()?;
        EmbeddingVector::new(values).map_err(|e| ProviderError::InvalidResponse(e.to_string()))
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        self.request(text).map_err(|e| EmbeddingError::Provider(e.to_string()))
    }
}

/// Memoizes another provider by text. Values are deterministic per text, so
/// racing writers store equal vectors.
pub struct CachedEmbedder<P> {
    inner: P,
    cache: RwLock<HashMap<String, EmbeddingVector>>,
}

impl<P: EmbeddingProvider> CachedEmbedder<P> {
    pub fn new(inner: P) -> Self {
        Self { inner, cache: RwLock::new(HashMap::new()) }
    }

    pub fn len(&self) -> usize {
        self.cache.read().map(|c| c.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl<P: EmbeddingProvider> EmbeddingProvider for CachedEmbedder<P> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
        if let Some(v) = self.cache.read().ok().and_then(|c| c.get(text).cloned()) {
            return Ok(v);
        }
        let v = self.inner.embed(text)?;
        if let Ok(mut c) = self.cache.write() {
            c.insert(text.to_string(), v.clone());
        }
        Ok(v)
    }
}

/// Completions from a remote model server.
#[derive(Debug, Clone)]
pub struct HttpLlm {
    client: HttpClient,
    id: String,
}

impl HttpLlm {
    pub fn new(client: HttpClient) -> Self {
        let id = format!("http@{}", client.url());
        Self { client, id }
    }
}

pub fn completion_body(prompt: &str, params: &GenerationParams) -> Value {
    json!({
        "model": params.model,
        "prompt": prompt,
        "options": {
            "temperature": params.temperature,
            "top_p": params.top_p,
            "top_k": params.top_k,
            "repeat_penalty": params.repeat_penalty,
        },
        "think": params.think,
        "stream": false,
    })
}

impl LlmProvider for HttpLlm {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<String, ProviderError> {
        let answer = self.client.post_json(&completion_body(prompt, params))?;
        answer
            .get("response")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| ProviderError::InvalidResponse("no response text".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `replies` in order, one per connection, then stops. Each reply
    /// is (status, body). Returns the base URL and the request-body log.
    fn serve(replies: Vec<(u16, String)>) -> (String, Arc<RwLock<Vec<String>>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/api", listener.local_addr().unwrap());
        let log = Arc::new(RwLock::new(Vec::new()));
        let seen = Arc::clone(&log);
        std::thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut length = 0;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        length = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut request = vec![0; length];
                let _ = reader.read_exact(&mut request);
                seen.write().unwrap().push(String::from_utf8_lossy(&request).into_owned());
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (url, log)
    }

    fn client(url: &str) -> HttpClient {
        HttpClient::new(url, Duration::from_secs(5))
    }

    #[test]
    fn embedding_request_and_response() {
        let (url, log) = serve(vec![(200, r#"{"embedding": [1.0, 0.5, 0.0]}"#.into())]);
        let e = HttpEmbedder::new(client(&url), "mxbai-embed-large");
        assert_eq!(e.embed("a b").unwrap().values(), &[1.0, 0.5, 0.0]);
        let body: Value = serde_json::from_str(&log.read().unwrap()[0]).unwrap();
        assert_eq!(body, json!({"model": "mxbai-embed-large", "prompt": "a b"}));
    }

    #[test]
    fn retries_server_errors_then_gives_up() {
        let (url, log) = serve(vec![(503, "{}".into()), (200, r#"{"response": "ok"}"#.into())]);
        let llm = HttpLlm::new(client(&url));
        assert_eq!(llm.complete("p", &GenerationParams::default()).unwrap(), "ok");
        let body: Value = serde_json::from_str(&log.read().unwrap()[1]).unwrap();
        assert_eq!(body["options"]["top_k"], 20);
        assert_eq!(body["stream"], false);

        let (url, log) = serve(vec![(500, "{}".into()); 4]);
        let llm = HttpLlm::new(client(&url));
        assert_eq!(llm.complete("p", &GenerationParams::default()), Err(ProviderError::Status(500)));
        assert_eq!(log.read().unwrap().len(), 1 + MAX_RETRIES);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (url, log) = serve(vec![(404, "{}".into()), (200, "{}".into())]);
        let e = HttpEmbedder::new(client(&url), "m");
        assert!(matches!(e.embed("x"), Err(EmbeddingError::Provider(_))));
        assert_eq!(log.read().unwrap().len(), 1);
    }

    #[test]
    fn malformed_answers() {
        let (url, _) = serve(vec![(200, r#"{"embedding": ["a"]}"#.into()), (200, r#"{"text": "x"}"#.into())]);
        let e = HttpEmbedder::new(client(&url), "m");
        assert!(e.embed("x").is_err());
        let llm = HttpLlm::new(client(&url));
        assert!(matches!(llm.complete("p", &GenerationParams::default()), Err(ProviderError::InvalidResponse(_))));
    }

    #[test]
    fn unreachable_server() {
        let llm = HttpLlm::new(HttpClient::new("http://127.0.0.1:9/api", Duration::from_millis(500)));
        assert!(matches!(
            llm.complete("p", &GenerationParams::default()),
            Err(ProviderError::Transport(_) | ProviderError::Timeout)
        ));
    }

    struct Counting(AtomicUsize);

    impl EmbeddingProvider for Counting {
        fn id(&self) -> &str {
            "counting"
        }

        fn embed(&self, text: &str) -> Result<EmbeddingVector, EmbeddingError> {
            self.0.fetch_add(1, Ordering::SeqCst);
            prefchain_core::embedding::hash_embed(text, 16)
        }
    }

    #[test]
    fn cache_calls_inner_once_per_text() {
        let cached = CachedEmbedder::new(Counting(AtomicUsize::new(0)));
        let a = cached.embed("a b").unwrap();
        assert_eq!(cached.embed("a b").unwrap(), a);
        cached.embed("c").unwrap();
        assert_eq!(cached.inner.0.load(Ordering::SeqCst), 2);
        assert_eq!(cached.len(), 2);
    }
}
