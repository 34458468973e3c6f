//! Line-delimited JSON run events, emitted through `log` under the
//! `kcr::event` target.

use std::time::Duration;

use serde::Serialize;

pub const TARGET: &str = "kcr::event";

#[derive(Debug, Default, Serialize)]
pub struct Event<'a> {
    pub stage: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sample_id: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backend: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub duration_ms: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl<'a> Event<'a> {
    pub fn new(stage: &'a str) -> Self {
        Self {
            stage,
            ..Default::default()
        }
    }

    pub fn sample(mut self, id: &'a str) -> Self {
        self.sample_id = Some(id);
        self
    }

    pub fn backend(mut self, id: &'a str) -> Self {
        self.backend = Some(id);
        self
    }

    pub fn endpoint(mut self, name: &'a str) -> Self {
        self.endpoint = Some(name);
        self
    }

    pub fn cache(mut self, outcome: &'a str) -> Self {
        self.cache = Some(outcome);
        self
    }

    pub fn duration(mut self, d: Duration) -> Self {
        self.duration_ms = Some(d.as_secs_f64() * 1000.0);
        self
    }

    pub fn error(mut self, e: impl ToString) -> Self {
        self.error = Some(e.to_string());
        self
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("events always serialize")
    }

    pub fn emit(&self) {
        let level = if self.error.is_some() {
            log::Level::Warn
        } else {
            log::Level::Info
        };
        if log::log_enabled!(target: TARGET, level) {
            log::log!(target: TARGET, level, "{}", self.to_json());
        }
    }
}
