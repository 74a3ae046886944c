//! Zero-shot baseline against a chat-completion endpoint.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::GeneratorDataset;
use crate::error::{Error, Result};
use crate::metrics::ExperimentReport;

pub const SYSTEM_PROMPT: &str = "Act as a disinformation detector. Given the following news piece, which category does this news belong to? Return \"1\" if you think the news piece is disinformation; otherwise, return \"0\". Note that there is no need for an explanation.";

const BODY_EXCERPT: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ZeroShotConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key. No
    /// `Authorization` header is sent when it is unset.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_ms: u64,
    pub parallelism: usize,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        ZeroShotConfig {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            model: "gpt-3.5-turbo".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            timeout_secs: 30.0,
            max_retries: 3,
            backoff_ms: 500,
            parallelism: 4,
        }
    }
}

impl ZeroShotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::config("timeout_secs must be positive"));
        }
        if self.endpoint.is_empty() {
            return Err(Error::config("endpoint is empty"));
        }
        if self.parallelism == 0 {
            return Err(Error::config("parallelism must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotVerdict {
    pub index: usize,
    pub raw: String,
    /// `None` when the reply does not start with `0` or `1`.
    pub parsed: Option<u8>,
}

/// `(system, user)` messages for one article.
pub fn build_prompt(article: &str) -> Result<(String, String)> {
    if article.is_empty() {
        return Err(Error::contract("article text is empty"));
    }
    Ok((SYSTEM_PROMPT.to_string(), format!("news: {article}")))
}

/// Strict first-character rule on the trimmed reply.
pub fn parse_verdict(reply: &str) -> Option<u8> {
    match reply.trim().chars().next() {
        Some('0') => Some(0),
        Some('1') => Some(1),
        _ => None,
    }
}

pub fn request_body(model: &str, article: &str) -> Result<Value> {
    let (system, user) = build_prompt(article)?;
    Ok(json!({
        "model": model,
        "messages": [
            {"role": "system", "content": system},
            {"role": "user", "content": user},
        ],
        "temperature": 0,
    }))
}

fn reply_text(body: &str) -> Result<String> {
    let v: Value = serde_json::from_str(body)?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| Error::Format("response has no choices[0].message.content".into()))
}

/// Reusable HTTP client for one configuration.
pub struct Client {
    cfg: ZeroShotConfig,
    agent: ureq::Agent,
    api_key: Option<String>,
}

impl Client {
    pub fn new(cfg: ZeroShotConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .new_agent();
        let api_key = std::env::var(&cfg.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(Client {
            cfg,
            agent,
            api_key,
        })
    }

    pub fn config(&self) -> &ZeroShotConfig {
        &self.cfg
    }

    fn post_once(&self, body: &str) -> std::result::Result<(u16, String), ureq::Error> {
        let mut req = self
            .agent
            .post(&self.cfg.endpoint)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req.send(body)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string()?;
        Ok((status, text))
    }

    /// Sends one article. Transport failures are retried with exponential
    /// backoff; an HTTP error status is returned immediately.
    pub fn classify(&self, index: usize, article: &str) -> Result<ZeroShotVerdict> {
        let body = request_body(&self.cfg.model, article)?.to_string();
        let mut attempt = 0u32;
        loop {
            match self.post_once(&body) {
                Ok((status, text)) if (200..300).contains(&status) => {
                    let raw = reply_text(&text)?;
                    let parsed = parse_verdict(&raw);
                    return Ok(ZeroShotVerdict { index, raw, parsed });
                }
                Ok((status, text)) => {
                    return Err(Error::Status {
                        status,
                        body: text.chars().take(BODY_EXCERPT).collect(),
                    })
                }
                Err(e) if attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_ms.saturating_mul(1 << attempt.min(16));
                    log::warn!("request {index} failed ({e}); retrying in {wait} ms");
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => {
                    return Err(Error::Transport {
                        attempts: attempt + 1,
                        message: e.to_string(),
                    })
                }
            }
        }
    }

    /// Classifies every article with at most `parallelism` requests in
    /// flight. Verdicts come back in input order.
    pub fn classify_all(&self, articles: &[&str]) -> Result<Vec<ZeroShotVerdict>> {
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<Result<ZeroShotVerdict>>>> =
            Mutex::new((0..articles.len()).map(|_| None).collect());
        let workers = self.cfg.parallelism.min(articles.len()).max(1);
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= articles.len() {
                        break;
                    }
                    let v = self.classify(i, articles[i]);
                    slots.lock().expect("verdict lock")[i] = Some(v);
                });
            }
        });
        slots
            .into_inner()
            .expect("verdict lock")
            .into_iter()
            .map(|v| v.expect("every slot filled"))
            .collect()
    }
}

pub fn classify_remote(cfg: &ZeroShotConfig, article: &str) -> Result<ZeroShotVerdict> {
    Client::new(cfg.clone())?.classify(0, article)
}

/// Accuracy (%) per dataset; unparsable replies count as wrong.
pub fn evaluate_zero_shot(
    cfg: &ZeroShotConfig,
    datasets: &[GeneratorDataset],
) -> Result<ExperimentReport> {
    let client = Client::new(cfg.clone())?;
    let mut per_dataset = Vec::with_capacity(datasets.len());
    for d in datasets {
        if d.is_empty() {
            return Err(Error::contract(format!("dataset {:?} is empty", d.generator)));
        }
        let texts: Vec<&str> = d.examples.iter().map(|e| e.text.as_str()).collect();
        let verdicts = client.classify_all(&texts)?;
        let hits = verdicts
            .iter()
            .zip(&d.examples)
            .filter(|(v, e)| v.parsed == Some(e.label))
            .count();
        per_dataset.push(100.0 * hits as f64 / d.len() as f64);
    }
    let generators = datasets.iter().map(|d| d.generator.clone()).collect();
    let mut report = ExperimentReport::new(&format!("zero-shot ({})", cfg.model), false, generators, per_dataset, 0)?;
    report.config = serde_json::to_value(cfg)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_strings() {
        let (system, user) = build_prompt("abc").unwrap();
        assert_eq!(system, SYSTEM_PROMPT);
        assert_eq!(user, "news: abc");
        let (_, user) = build_prompt("line one\nline two").unwrap();
        assert_eq!(user, "news: line one\nline two");
        assert!(matches!(build_prompt(""), Err(Error::Contract(_))));
    }

    #[test]
    fn verdict_parsing_is_strict() {
        assert_eq!(parse_verdict("1"), Some(1));
        assert_eq!(parse_verdict("  0\n"), Some(0));
        assert_eq!(parse_verdict("1."), Some(1));
        assert_eq!(parse_verdict("I think 1"), None);
        assert_eq!(parse_verdict(""), None);
    }

    #[test]
    fn body_shape() {
        let b = request_body("m", "x").unwrap();
        assert_eq!(b["model"], "m");
        assert_eq!(b["temperature"], 0);
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"], "news: x");
    }

    #[test]
    fn config_validation() {
        let mut c = ZeroShotConfig::default();
        c.validate().unwrap();
        c.timeout_secs = 0.0;
        assert!(c.validate().is_err());
    }
}
