//! HTTP captioning client for slider labeling.
//!
//! Wire format: `POST <url>` with
//! `{"instruction": ..., "pairs": [{"seed", "negative_png_base64", "positive_png_base64"}]}`,
//! answered by `{"label": "..."}`.

use std::time::Duration;

use base64::Engine;
use serde::Deserialize;
use serde_json::json;

use sliderspace_core::eval::{CaptionClient, ImagePair};
use sliderspace_core::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpCaptionClient {
    url: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CaptionResponse {
    label: String,
}

impl HttpCaptionClient {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            url: url.into(),
            agent: ureq::Agent::config_builder().timeout_global(Some(timeout)).build().into(),
        }
    }
}

impl CaptionClient for HttpCaptionClient {
    fn describe(&self, instruction: &str, pairs: &[ImagePair]) -> Result<String> {
        let b64 = base64::engine::general_purpose::STANDARD;
        let body = json!({
            "instruction": instruction,
            "pairs": pairs.iter().map(|p| json!({
                "seed": p.seed,
                "negative_png_base64": b64.encode(&p.negative_png),
                "positive_png_base64": b64.encode(&p.positive_png),
            })).collect::<Vec<_>>(),
        });
        let mut response = self.agent.post(&self.url).send_json(&body).map_err(|e| match e {
            ureq::Error::Timeout(t) => Error::Timeout(format!("captioning service: {t}")),
            other => Error::Backend(format!("captioning service: {other}")),
        })?;
        let parsed: CaptionResponse = response
            .body_mut()
            .read_json()
            .map_err(|e| Error::Parse(format!("captioning service reply: {e}")))?;
        Ok(parsed.label)
    }
}
