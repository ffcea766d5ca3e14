//! Grammar-error counting through an external checking service.

use std::collections::HashMap;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{GenerationCorpus, InterventionError, Result};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

/// Anything that can count the grammar matches flagged in a text.
pub trait GrammarService: Sync {
    fn match_count(&self, text: &str) -> Result<usize>;

    /// Upper bound on concurrent requests when scoring a whole corpus.
    fn max_in_flight(&self) -> usize {
        DEFAULT_MAX_IN_FLIGHT
    }
}

/// Client for a LanguageTool-compatible `/v2/check` endpoint.
pub struct HttpGrammarService {
    endpoint: String,
    agent: ureq::Agent,
    max_retries: u32,
    backoff: Duration,
    max_in_flight: usize,
}

impl HttpGrammarService {
    pub fn new(base_url: &str) -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build();
        HttpGrammarService {
            endpoint: format!("{}/v2/check", base_url.trim_end_matches('/')),
            agent: config.into(),
            max_retries: 3,
            backoff: Duration::from_millis(250),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }

    /// Retries after transport failures, 429 and 5xx, doubling the wait each time.
    pub fn with_retries(mut self, max_retries: u32, initial_backoff: Duration) -> Self {
        self.max_retries = max_retries;
        self.backoff = initial_backoff;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn attempt(&self, text: &str) -> std::result::Result<String, (bool, String)> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_form([("text", text), ("language", "en-US")])
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| (true, e.to_string()))?;
        match status {
            200..=299 => Ok(body),
            429 | 500..=599 => Err((true, format!("HTTP {status}"))),
            _ => Err((false, format!("HTTP {status}: {}", body.chars().take(200).collect::<String>()))),
        }
    }
}

/// Number of entries in the `matches` array of a check response.
pub(crate) fn parse_match_count(body: &str) -> Result<usize> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| InterventionError::MalformedResponse(e.to_string()))?;
    v.get("matches")
        .and_then(serde_json::Value::as_array)
        .map(Vec::len)
        .ok_or_else(|| InterventionError::MalformedResponse("response has no `matches` array".into()))
}

impl GrammarService for HttpGrammarService {
    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    fn match_count(&self, text: &str) -> Result<usize> {
        let mut wait = self.backoff;
        let mut last = String::new();
        for attempt in 0..=self.max_retries {
            match self.attempt(text) {
                Ok(body) => return parse_match_count(&body),
                Err((retry, msg)) => {
                    log::warn!("grammar request attempt {} failed: {msg}", attempt + 1);
                    last = msg;
                    if !retry {
                        break;
                    }
                    if attempt < self.max_retries {
                        std::thread::sleep(wait);
                        wait *= 2;
                    }
                }
            }
        }
        Err(InterventionError::ServiceUnavailable(format!("{}: {last}", self.endpoint)))
    }
}

/// One recorded request and its match count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureEntry {
    pub request_text: String,
    pub match_count: usize,
}

/// Answers from a recorded fixture; texts that were never recorded are unavailable.
#[derive(Debug, Clone, Default)]
pub struct ReplayService {
    responses: HashMap<String, usize>,
}

impl ReplayService {
    pub fn new(entries: impl IntoIterator<Item = FixtureEntry>) -> Self {
        ReplayService {
            responses: entries.into_iter().map(|e| (e.request_text, e.match_count)).collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let entries: Vec<FixtureEntry> =
            serde_json::from_str(text).map_err(|e| InterventionError::MalformedResponse(format!("fixture: {e}")))?;
        Ok(Self::new(entries))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| InterventionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }
}

impl GrammarService for ReplayService {
    fn match_count(&self, text: &str) -> Result<usize> {
        self.responses
            .get(text)
            .copied()
            .ok_or_else(|| InterventionError::ServiceUnavailable(format!("no recorded response for {text:?}")))
    }
}

/// Passes requests through to `inner` and keeps every answer for a fixture file.
pub struct RecordingService<S> {
    inner: S,
    recorded: Mutex<Vec<FixtureEntry>>,
}

impl<S: GrammarService> RecordingService<S> {
    pub fn new(inner: S) -> Self {
        RecordingService {
            inner,
            recorded: Mutex::new(Vec::new()),
        }
    }

    /// Recorded entries, sorted and de-duplicated by text.
    pub fn fixture(&self) -> Vec<FixtureEntry> {
        let mut v = self.recorded.lock().expect("recording lock").clone();
        v.sort_by(|a, b| a.request_text.cmp(&b.request_text));
        v.dedup_by(|a, b| a.request_text == b.request_text);
        v
    }

    pub fn fixture_json(&self) -> String {
        serde_json::to_string_pretty(&self.fixture()).expect("fixture serializes")
    }
}

impl<S: GrammarService> GrammarService for RecordingService<S> {
    fn max_in_flight(&self) -> usize {
        self.inner.max_in_flight()
    }

    fn match_count(&self, text: &str) -> Result<usize> {
        let n = self.inner.match_count(text)?;
        self.recorded.lock().expect("recording lock").push(FixtureEntry {
            request_text: text.to_string(),
            match_count: n,
        });
        Ok(n)
    }
}

/// Match counts for every sample, with at most `max_in_flight` requests outstanding.
///
/// On failure the error of the lowest-indexed failing sample is returned.
pub fn grammar_match_counts(
    corpus: &GenerationCorpus,
    service: &dyn GrammarService,
    max_in_flight: usize,
) -> Result<Vec<usize>> {
    let n = corpus.samples.len();
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<usize>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..max_in_flight.clamp(1, n.max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = service.match_count(&corpus.samples[i].text);
                let stop = r.is_err();
                slots.lock().expect("slot lock")[i] = Some(r);
                if stop {
                    next.store(n, Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(n);
    for slot in slots.into_inner().expect("slot lock") {
        match slot {
            Some(r) => out.push(r?),
            None => break,
        }
    }
    if out.len() < n {
        // a worker stopped early; only reachable after an error at a later index was recorded
        return Err(InterventionError::ServiceUnavailable("grammar checks aborted".into()));
    }
    Ok(out)
}

/// Flagged matches per 100 tokens across the corpus.
pub fn grammar_error_rate(corpus: &GenerationCorpus, service: &dyn GrammarService, max_in_flight: usize) -> Result<f64> {
    let total = corpus.total_tokens();
    if total == 0 {
        return Err(InterventionError::EmptyCorpus);
    }
    let matches: usize = grammar_match_counts(corpus, service, max_in_flight)?.iter().sum();
    Ok(100.0 * matches as f64 / total as f64)
}
