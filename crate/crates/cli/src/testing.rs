//! Helpers for exercising the service in tests.

use axum::body::Body;
use axum::http::{header, Request};
use image::{GrayImage, Luma, Rgb, RgbImage};
use promptseg_core::backbone::{Backbone, BackboneConfig};
use promptseg_core::decoder::{Decoder, DecoderConfig};
use promptseg_core::model::SegmentationModel;
use std::sync::Arc;

use crate::inference::png_bytes;

/// Untrained model on the tiny backbone; fast to build.
pub fn tiny_model() -> SegmentationModel {
    let bb = BackboneConfig::tiny(0);
    let dc = DecoderConfig::clipseg(&bb).with_width(16).with_layers(vec![1, 2, 3]);
    let backbone = Arc::new(Backbone::new(bb).expect("tiny backbone"));
    SegmentationModel::new(backbone, Decoder::init(dc, 0).expect("decoder")).expect("model")
}

pub fn gray_png(w: u32, h: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, 128]));
    png_bytes(&img).unwrap()
}

/// A centered square mask.
pub fn square_mask_png(w: u32, h: u32) -> Vec<u8> {
    let m = GrayImage::from_fn(w, h, |x, y| {
        let inside = x >= w / 4 && x < 3 * w / 4 && y >= h / 4 && y < 3 * h / 4;
        Luma([if inside { 255 } else { 0 }])
    });
    png_bytes(&m).unwrap()
}

pub struct Part {
    name: String,
    data: Vec<u8>,
    file: bool,
}

impl Part {
    pub fn png(name: &str, data: &[u8]) -> Self {
        Self {
            name: name.into(),
            data: data.to_vec(),
            file: true,
        }
    }

    pub fn text(name: &str, value: &str) -> Self {
        Self {
            name: name.into(),
            data: value.as_bytes().to_vec(),
            file: false,
        }
    }
}

const BOUNDARY: &str = "promptsegboundary7MA4YWxk";

pub fn multipart_body(parts: &[Part]) -> Vec<u8> {
    let mut body = Vec::new();
    for p in parts {
        body.extend_from_slice(format!("--{BOUNDARY}\r\n").as_bytes());
        if p.file {
            body.extend_from_slice(
                format!(
                    "Content-Disposition: form-data; name=\"{}\"; filename=\"{}.png\"\r\nContent-Type: image/png\r\n\r\n",
                    p.name, p.name
                )
                .as_bytes(),
            );
        } else {
            body.extend_from_slice(format!("Content-Disposition: form-data; name=\"{}\"\r\n\r\n", p.name).as_bytes());
        }
        body.extend_from_slice(&p.data);
        body.extend_from_slice(b"\r\n");
    }
    body.extend_from_slice(format!("--{BOUNDARY}--\r\n").as_bytes());
    body
}

pub fn multipart_request(parts: &[Part]) -> Request<Body> {
    Request::post("/segment")
        .header(header::CONTENT_TYPE, format!("multipart/form-data; boundary={BOUNDARY}"))
        .body(Body::from(multipart_body(parts)))
        .unwrap()
}
