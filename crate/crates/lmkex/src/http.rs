//! Live LM endpoints over HTTP.
//!
//! Generative: `POST {"prompt", "max_tokens", "temperature", "n"}` answered
//! by `{"choices": [{"text"}]}`. Masked: `POST {"prompt", "top_k"}`
//! answered by `{"candidates": [{"token", "score"}]}`. Retries are left to
//! the caller's [`RetryPolicy`](lmkex_core::backend::RetryPolicy).

use std::time::{Duration, Instant};

use lmkex_core::backend::{
    check_generative, check_masked, strip_echo, BackendError, GenerativeResponse, LanguageModel,
    MaskedResponse,
};
use lmkex_core::model::ModelClass;
use lmkex_core::prompt::{PromptSpec, MASK};
use serde::{Deserialize, Serialize};

pub const API_KEY_ENV: &str = "LMKEX_API_KEY";
pub const DEFAULT_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Serialize)]
struct CompletionRequest<'a> {
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    n: u32,
}

#[derive(Debug, Deserialize)]
struct Choice {
    text: String,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
}

#[derive(Debug, Serialize)]
struct MaskRequest<'a> {
    prompt: &'a str,
    top_k: u32,
}

#[derive(Debug, Deserialize)]
struct MaskCandidate {
    token: String,
    score: f64,
}

#[derive(Debug, Deserialize)]
struct MaskResponse {
    candidates: Vec<MaskCandidate>,
}

pub struct HttpBackend {
    lm_id: String,
    url: String,
    class: ModelClass,
    api_key: Option<String>,
    /// The endpoint's own mask token, substituted for `<mask>`.
    mask_token: String,
    timeout_ms: u64,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(lm_id: impl Into<String>, url: impl Into<String>, class: ModelClass) -> Self {
        Self::with_timeout(lm_id, url, class, DEFAULT_TIMEOUT_MS)
    }

    pub fn with_timeout(
        lm_id: impl Into<String>,
        url: impl Into<String>,
        class: ModelClass,
        timeout_ms: u64,
    ) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .build()
            .into();
        HttpBackend {
            lm_id: lm_id.into(),
            url: url.into(),
            class,
            api_key: None,
            mask_token: MASK.into(),
            timeout_ms,
            agent,
        }
    }

    pub fn with_api_key(mut self, key: Option<String>) -> Self {
        self.api_key = key.filter(|k| !k.is_empty());
        self
    }

    pub fn with_mask_token(mut self, token: impl Into<String>) -> Self {
        self.mask_token = token.into();
        self
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(&self, body: &Req) -> Result<Resp, BackendError> {
        let mut req = self.agent.post(&self.url);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(body).map_err(|e| self.map_err(e))?;
        resp.body_mut()
            .read_json::<Resp>()
            .map_err(|e| match e {
                ureq::Error::Json(e) => BackendError::Malformed(e.to_string()),
                other => self.map_err(other),
            })
    }

    fn map_err(&self, e: ureq::Error) -> BackendError {
        match e {
            ureq::Error::Timeout(_) => BackendError::Timeout(self.timeout_ms),
            ureq::Error::StatusCode(code) if code == 429 || code >= 500 => {
                BackendError::Transport(format!("{} answered HTTP {code}", self.url))
            }
            ureq::Error::StatusCode(code) => BackendError::Usage(format!("{} answered HTTP {code}", self.url)),
            ureq::Error::Json(e) => BackendError::Malformed(e.to_string()),
            other => BackendError::Transport(other.to_string()),
        }
    }

    fn check_class(&self, wanted: ModelClass) -> Result<(), BackendError> {
        if self.class != wanted {
            return Err(BackendError::Usage(format!(
                "{} is a {} LM, not {wanted}",
                self.lm_id, self.class
            )));
        }
        Ok(())
    }
}

impl LanguageModel for HttpBackend {
    fn lm_id(&self) -> &str {
        &self.lm_id
    }

    fn complete(&self, spec: &PromptSpec) -> Result<GenerativeResponse, BackendError> {
        check_generative(spec)?;
        self.check_class(ModelClass::Generative)?;
        let start = Instant::now();
        let resp: CompletionResponse = self.post(&CompletionRequest {
            prompt: &spec.text,
            max_tokens: spec.params.max_tokens,
            temperature: spec.params.temperature,
            n: spec.params.n_samples,
        })?;
        if resp.choices.len() != spec.params.n_samples as usize {
            return Err(BackendError::Malformed(format!(
                "asked for {} completions, got {}",
                spec.params.n_samples,
                resp.choices.len()
            )));
        }
        Ok(GenerativeResponse {
            samples: resp
                .choices
                .into_iter()
                .map(|c| strip_echo(&spec.text, &c.text))
                .collect(),
            lm_id: self.lm_id.clone(),
            elapsed_ms: start.elapsed().as_millis() as u64,
        })
    }

    fn fill_mask(&self, spec: &PromptSpec) -> Result<MaskedResponse, BackendError> {
        check_masked(spec)?;
        self.check_class(ModelClass::Masked)?;
        let prompt = spec.text.replace(MASK, &self.mask_token);
        let resp: MaskResponse = self.post(&MaskRequest {
            prompt: &prompt,
            top_k: spec.params.top_k,
        })?;
        let mut candidates: Vec<(String, f64)> = resp
            .candidates
            .into_iter()
            .map(|c| (c.token.trim().to_string(), c.score))
            .collect();
        candidates.sort_by(|a, b| b.1.total_cmp(&a.1));
        candidates.truncate(spec.params.top_k as usize);
        Ok(MaskedResponse {
            candidates,
            lm_id: self.lm_id.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use lmkex_core::model::{PromptId, Variable};
    use lmkex_core::prompt::{instantiate_template, TemplateSet};
    use lmkex_core::term::Term;
    use std::collections::BTreeMap;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;
    use std::thread;

    /// Serve one canned reply per connection, reporting each request body.
    fn serve(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<(String, String)>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1", listener.local_addr().unwrap());
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for (status, body) in replies {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                let mut auth = String::new();
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let l = line.trim_end();
                    if l.is_empty() {
                        break;
                    }
                    let lower = l.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                    if lower.starts_with("authorization:") {
                        auth = l["authorization:".len()..].trim().to_string();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send((String::from_utf8(buf).unwrap(), auth)).unwrap();
                write!(
                    stream,
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                )
                .unwrap();
            }
        });
        (url, rx)
    }

    fn spec(id: &str, bindings: &[(Variable, &str)]) -> PromptSpec {
        let set = TemplateSet::builtin();
        let b: BTreeMap<_, _> = bindings.iter().map(|(v, s)| (*v, Term::new(s).unwrap())).collect();
        instantiate_template(PromptId::new("p1"), set.get(id).unwrap(), &b, None).unwrap()
    }

    #[test]
    fn generative_wire_format() {
        let (url, rx) = serve(vec![(
            200,
            r#"{"choices":[{"text":"Explain how to patrol a warehouse. Walk around the warehouse."}]}"#.into(),
        )]);
        let b = HttpBackend::new("gpt3", url, ModelClass::Generative).with_api_key(Some("k".into()));
        let s = spec("psd-explain", &[(Variable::Task, "patrol a warehouse")]);
        let r = b.complete(&s).unwrap();
        assert_eq!(r.samples, ["Walk around the warehouse."]);
        let (body, auth) = rx.recv().unwrap();
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["prompt"], "Explain how to patrol a warehouse.");
        assert_eq!(v["n"], 1);
        assert_eq!(v["max_tokens"], 64);
        assert!(v.get("temperature").is_some());
        assert_eq!(auth, "Bearer k");
    }

    #[test]
    fn masked_wire_format() {
        let (url, rx) = serve(vec![(
            200,
            r#"{"candidates":[{"token":" deliver","score":0.2},{"token":"open","score":0.3}]}"#.into(),
        )]);
        let b = HttpBackend::new("bert", url, ModelClass::Masked).with_mask_token("[MASK]");
        let mut s = spec("op-can", &[(Variable::Actor, "A robot"), (Variable::Object, "package")]);
        s.params.top_k = 5;
        let r = b.fill_mask(&s).unwrap();
        assert_eq!(r.candidates, [("open".to_string(), 0.3), ("deliver".to_string(), 0.2)]);
        let (body, auth) = rx.recv().unwrap();
        let v: serde_json::Value = serde_json::from_str(&body).unwrap();
        assert_eq!(v["prompt"], "A robot can [MASK] a package.");
        assert_eq!(v["top_k"], 5);
        assert_eq!(auth, "");
    }

    #[test]
    fn error_mapping() {
        let (url, _rx) = serve(vec![
            (503, "{}".into()),
            (400, "{}".into()),
            (200, "{\"nope\": 1}".into()),
            (200, "{\"choices\": []}".into()),
        ]);
        let b = HttpBackend::new("gpt3", url, ModelClass::Generative);
        let s = spec("psd-explain", &[(Variable::Task, "x")]);
        assert!(matches!(b.complete(&s), Err(BackendError::Transport(_))));
        assert!(matches!(b.complete(&s), Err(BackendError::Usage(_))));
        assert!(matches!(b.complete(&s), Err(BackendError::Malformed(_))));
        assert!(matches!(b.complete(&s), Err(BackendError::Malformed(_))));
        let masked = spec("op-can", &[(Variable::Actor, "robot"), (Variable::Object, "package")]);
        assert!(matches!(b.fill_mask(&masked), Err(BackendError::Usage(_))));
    }

    #[test]
    fn timeouts_are_retryable() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/", listener.local_addr().unwrap());
        let hold = thread::spawn(move || {
            let (s, _) = listener.accept().unwrap();
            thread::sleep(Duration::from_millis(400));
            drop(s);
        });
        let b = HttpBackend::with_timeout("gpt3", url, ModelClass::Generative, 100);
        let e = b.complete(&spec("psd-explain", &[(Variable::Task, "x")])).unwrap_err();
        assert_eq!(e, BackendError::Timeout(100));
        assert!(e.is_retryable());
        hold.join().unwrap();
    }

    #[test]
    fn refused_connection_is_transport() {
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let b = HttpBackend::new("gpt3", format!("http://127.0.0.1:{port}/"), ModelClass::Generative);
        let e = b.complete(&spec("psd-explain", &[(Variable::Task, "x")])).unwrap_err();
        assert!(matches!(e, BackendError::Transport(_)), "{e:?}");
    }
}
