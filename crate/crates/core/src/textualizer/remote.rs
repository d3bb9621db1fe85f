//! HTTP client for an external fact-integration model.
//!
//! Protocol: `POST {endpoint}` with JSON `{instruction, image_id, facts, text?}`,
//! expecting `200` and JSON `{text}`. Anything else is retried; after the
//! last attempt the call fails with `RemoteUnavailable`.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::facts::FactSet;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteBackendConfig {
    pub endpoint: String,
    /// Instruction sent when composing a full description.
    pub fst_instruction: String,
    /// Instruction for query-focused extraction; `{category}` is substituted.
    pub qst_instruction: String,
    pub timeout_secs: f64,
    pub retries: u32,
    /// Maximum in-flight requests for batch calls.
    pub concurrency: usize,
}

impl Default for RemoteBackendConfig {
    fn default() -> Self {
        RemoteBackendConfig {
            endpoint: "http://127.0.0.1:8080/integrate".into(),
            fst_instruction: "Integrate the listed category, attribute and relation facts into one \
                              coherent description of the image. Use only the given facts."
                .into(),
            qst_instruction: "From the description, keep only the sentences about the {category}."
                .into(),
            timeout_secs: 30.0,
            retries: 2,
            concurrency: 4,
        }
    }
}

impl RemoteBackendConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "remote timeout must be positive, got {}",
                self.timeout_secs
            )));
        }
        if self.concurrency == 0 {
            return Err(Error::InvalidArgument("remote concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
pub struct RemoteRequest<'a> {
    pub instruction: &'a str,
    pub image_id: u64,
    pub facts: &'a FactSet,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text: Option<&'a str>,
}

#[derive(Debug, Deserialize)]
struct RemoteResponse {
    text: String,
}

#[derive(Debug, Clone)]
pub struct RemoteClient {
    config: RemoteBackendConfig,
    agent: ureq::Agent,
}

impl RemoteClient {
    pub fn new(config: RemoteBackendConfig) -> Result<Self> {
        config.check()?;
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build();
        Ok(RemoteClient { config, agent })
    }

    pub fn config(&self) -> &RemoteBackendConfig {
        &self.config
    }

    pub fn send(&self, request: &RemoteRequest<'_>) -> Result<String> {
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for _ in 0..attempts {
            match self.agent.post(&self.config.endpoint).send_json(request) {
                Ok(resp) if resp.status() == 200 => match resp.into_json::<RemoteResponse>() {
                    Ok(body) if !body.text.trim().is_empty() => return Ok(body.text),
                    Ok(_) => last = "empty text in response".into(),
                    Err(e) => last = format!("unreadable response: {e}"),
                },
                Ok(resp) => last = format!("status {}", resp.status()),
                Err(e) => last = e.to_string(),
            }
        }
        Err(Error::RemoteUnavailable {
            attempts,
            reason: last,
        })
    }

    /// Runs `count` requests with at most `concurrency` in flight; results
    /// are returned in request order.
    pub fn send_all<F>(&self, count: usize, make: F) -> Vec<Result<String>>
    where
        F: Fn(usize, &dyn Fn(&RemoteRequest<'_>) -> Result<String>) -> Result<String> + Sync,
    {
        let next = AtomicUsize::new(0);
        let mut slots: Vec<Option<Result<String>>> = (0..count).map(|_| None).collect();
        let workers = self.config.concurrency.min(count.max(1));
        let results = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= count {
                        break;
                    }
                    let out = make(i, &|req| self.send(req));
                    results.lock().expect("result lock poisoned")[i] = Some(out);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every request slot is filled"))
            .collect()
    }
}
