//! Remote captioner speaking a small JSON protocol.
//!
//! Every request is a `POST` to the configured endpoint with a `task` field
//! (`video`, `region` or `think`); frames travel as base64 PNG. The service
//! answers `{"text": "..."}`.

use std::time::Duration;

use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use serde::Deserialize;
use serde_json::{json, Value};
use videor4_core::corpus::{encode_png, BoundingBox, Frame};
use videor4_core::trajectory::{CaptionerClient, CaptionerError};

pub struct HttpCaptioner {
    endpoint: String,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct Reply {
    text: String,
}

fn frame_json(frame: &Frame) -> Result<Value, CaptionerError> {
    let png = encode_png(frame).map_err(|e| CaptionerError::Failed(e.to_string()))?;
    Ok(json!({
        "index": frame.index(),
        "width": frame.width(),
        "height": frame.height(),
        "png": STANDARD.encode(png),
    }))
}

impl HttpCaptioner {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            endpoint: endpoint.into(),
            agent,
        }
    }

    fn ask(&self, body: Value) -> Result<String, CaptionerError> {
        let mut resp = self
            .agent
            .post(&self.endpoint)
            .send_json(&body)
            .map_err(|e| match e {
                ureq::Error::StatusCode(code) => {
                    CaptionerError::Failed(format!("{} answered {code}", self.endpoint))
                }
                other => CaptionerError::Unavailable(format!("{}: {other}", self.endpoint)),
            })?;
        let reply: Reply = resp.body_mut().read_json().map_err(|e| {
            CaptionerError::Failed(format!("bad reply from {}: {e}", self.endpoint))
        })?;
        Ok(reply.text)
    }
}

impl CaptionerClient for HttpCaptioner {
    fn caption_video(&self, frames: &[&Frame]) -> Result<String, CaptionerError> {
        let frames = frames
            .iter()
            .map(|f| frame_json(f))
            .collect::<Result<Vec<_>, _>>()?;
        self.ask(json!({ "task": "video", "frames": frames }))
    }

    fn caption_region(
        &self,
        frame: &Frame,
        bbox: &BoundingBox,
        context: &str,
    ) -> Result<String, CaptionerError> {
        self.ask(json!({
            "task": "region",
            "frame": frame_json(frame)?,
            "box": bbox.coords(),
            "context": context,
        }))
    }

    fn think(&self, context: &str) -> Result<String, CaptionerError> {
        self.ask(json!({ "task": "think", "context": context }))
    }
}
