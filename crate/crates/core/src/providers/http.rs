use std::collections::BTreeMap;
use std::time::Instant;

use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{check_image, GeneratedImage, GenerationRequest, Provider, ProviderError};
use crate::transport::{HttpEndpoint, TransportError};

/// Body of `POST /v1/generate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub guidance: f64,
}

/// Response of `POST /v1/generate`: a base64 PNG plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub image_b64: String,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

impl From<&GenerationRequest> for WireRequest {
    fn from(r: &GenerationRequest) -> Self {
        Self {
            prompt: r.prompt.clone(),
            seed: r.seed,
            steps: r.steps,
            width: r.width,
            height: r.height,
            guidance: r.guidance,
        }
    }
}

pub struct HttpProvider {
    id: String,
    endpoint: HttpEndpoint,
}

impl HttpProvider {
    pub fn new(id: &str, endpoint: HttpEndpoint) -> Self {
        Self {
            id: id.to_string(),
            endpoint,
        }
    }

    pub fn endpoint(&self) -> &HttpEndpoint {
        &self.endpoint
    }
}

#[async_trait]
impl Provider for HttpProvider {
    fn id(&self) -> &str {
        &self.id
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<GeneratedImage, ProviderError> {
        request.validate()?;
        let started = Instant::now();
        let resp: WireResponse = self
            .endpoint
            .post_json("/v1/generate", &WireRequest::from(request))
            .await?;
        let png = STANDARD.decode(resp.image_b64.as_bytes()).map_err(|e| {
            ProviderError::Transport(TransportError::BadResponse {
                endpoint: self.endpoint.url("/v1/generate"),
                message: format!("image_b64: {e}"),
            })
        })?;
        check_image(request, &png)?;
        let mut meta: BTreeMap<String, String> = resp
            .meta
            .into_iter()
            .map(|(k, v)| match v {
                serde_json::Value::String(s) => (k, s),
                other => (k, other.to_string()),
            })
            .collect();
        meta.insert("latency_ms".into(), started.elapsed().as_millis().to_string());
        Ok(GeneratedImage { png, meta })
    }
}
