//! Client layer over black-box text-to-image endpoints.
//!
//! A [`Provider`] turns a [`GenerationRequest`] into PNG bytes. Remote
//! endpoints speak the JSON contract in [`http`]; [`StubProvider`] is a
//! deterministic local stand-in that can plant template-memorization
//! behaviour for tests and dry runs.

mod batch;
mod http;
mod stub;

use std::collections::BTreeMap;

use async_trait::async_trait;
use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::ImagingError;
use crate::transport::TransportError;

pub use batch::{generate_batch, BatchError, BatchOutcome, FailedEntry};
pub use http::{HttpProvider, WireRequest, WireResponse};
pub use stub::{stub_generate, stub_image, StubPlant, StubProvider};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub seed: u64,
    pub steps: u32,
    pub width: u32,
    pub height: u32,
    pub guidance: f64,
    pub provider_id: String,
}

impl GenerationRequest {
    pub fn validate(&self) -> Result<(), ProviderError> {
        if self.steps == 0 {
            return Err(ProviderError::InvalidRequest("steps must be >= 1".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(ProviderError::InvalidRequest("width and height must be > 0".into()));
        }
        Ok(())
    }

    /// Key under which a finished generation is cached. Guidance is not part
    /// of the key.
    pub fn cache_key(&self) -> String {
        let key = serde_json::json!([
            self.provider_id,
            self.prompt,
            self.seed,
            self.steps,
            self.width,
            self.height
        ]);
        crate::imaging::sha256_hex(key.to_string().as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub request: GenerationRequest,
    pub image_digest: String,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct GeneratedImage {
    pub png: Vec<u8>,
    pub meta: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ProviderError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("provider returned an undecodable image: {0}")]
    BadImage(String),
    #[error("provider returned {got_w}x{got_h}, requested {want_w}x{want_h}")]
    WrongSize {
        want_w: u32,
        want_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("no provider registered as {0:?}")]
    Unregistered(String),
}

impl ProviderError {
    /// Terminal errors should not be retried by a later sweep either.
    pub fn is_retryable(&self) -> bool {
        matches!(
            self,
            ProviderError::Transport(TransportError::Retryable { .. })
                | ProviderError::Transport(TransportError::Unreachable { .. })
        )
    }

    pub fn is_unreachable(&self) -> bool {
        matches!(self, ProviderError::Transport(t) if t.is_unreachable())
    }
}

impl From<ImagingError> for ProviderError {
    fn from(e: ImagingError) -> Self {
        ProviderError::BadImage(e.to_string())
    }
}

#[async_trait]
pub trait Provider: Send + Sync {
    fn id(&self) -> &str;
    async fn generate(&self, request: &GenerationRequest) -> Result<GeneratedImage, ProviderError>;
}

/// Decode a provider payload and check it has the requested dimensions.
pub fn check_image(request: &GenerationRequest, png: &[u8]) -> Result<image::RgbImage, ProviderError> {
    let img = crate::imaging::decode(png)?;
    if img.width() != request.width || img.height() != request.height {
        return Err(ProviderError::WrongSize {
            want_w: request.width,
            want_h: request.height,
            got_w: img.width(),
            got_h: img.height(),
        });
    }
    Ok(img)
}
