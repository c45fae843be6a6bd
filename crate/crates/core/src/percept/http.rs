use async_trait::async_trait;
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use image::RgbImage;
use serde::{Deserialize, Serialize};

use super::{Embedder, Mask, PerceptError, RleMask, Segmenter};
use crate::imaging;
use crate::transport::{HttpEndpoint, TransportError};

#[derive(Serialize)]
struct SegmentRequest<'a> {
    image_b64: String,
    class_label: &'a str,
}

#[derive(Deserialize)]
struct SegmentResponse {
    mask_rle: Vec<u32>,
    width: u32,
    height: u32,
}

#[derive(Serialize)]
struct EmbedRequest {
    image_b64: String,
}

#[derive(Deserialize)]
struct EmbedResponse {
    vector: Vec<f64>,
}

fn b64_png(image: &RgbImage) -> Result<String, PerceptError> {
    Ok(STANDARD.encode(imaging::encode_png(image)?))
}

/// `POST /v1/segment {image_b64, class_label} -> {mask_rle, width, height}`.
pub struct HttpSegmenter {
    id: String,
    endpoint: HttpEndpoint,
}

impl HttpSegmenter {
    pub fn new(id: &str, endpoint: HttpEndpoint) -> Self {
        Self {
            id: id.to_string(),
            endpoint,
        }
    }
}

#[async_trait]
impl Segmenter for HttpSegmenter {
    fn id(&self) -> &str {
        &self.id
    }

    async fn segment_image(&self, image: &RgbImage, class_label: &str) -> Result<Mask, PerceptError> {
        let body = SegmentRequest {
            image_b64: b64_png(image)?,
            class_label,
        };
        let resp: SegmentResponse = self.endpoint.post_json("/v1/segment", &body).await?;
        RleMask {
            width: resp.width,
            height: resp.height,
            class_label: class_label.to_string(),
            counts: resp.mask_rle,
        }
        .decode()
        .map_err(|e| {
            PerceptError::Provider(TransportError::BadResponse {
                endpoint: self.endpoint.url("/v1/segment"),
                message: e.to_string(),
            })
        })
    }
}

/// `POST /v1/embed {image_b64} -> {vector}`.
pub struct HttpEmbedder {
    id: String,
    endpoint: HttpEndpoint,
}

impl HttpEmbedder {
    pub fn new(id: &str, endpoint: HttpEndpoint) -> Self {
        Self {
            id: id.to_string(),
            endpoint,
        }
    }
}

#[async_trait]
impl Embedder for HttpEmbedder {
    fn id(&self) -> &str {
        &self.id
    }

    async fn embed_image(&self, image: &RgbImage) -> Result<Vec<f64>, PerceptError> {
        let resp: EmbedResponse = self
            .endpoint
            .post_json("/v1/embed", &EmbedRequest { image_b64: b64_png(image)? })
            .await?;
        Ok(resp.vector)
    }
}
