use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use image::{GenericImageView, ImageBuffer, Luma};
use promptseg_cli::inference::{png_bytes, threshold_quantized};
use promptseg_cli::service::{router, AppState, ErrorBody, SegmentResponse, ServiceConfig};
use promptseg_cli::testing::{gray_png, multipart_request, square_mask_png, tiny_model, Part};
use promptseg_core::backbone::{Backbone, BackboneConfig};
use promptseg_core::datasets::{load_target, synth_dataset, DataStore, PrefixRegistry, SynthConfig, SynthDataset};
use promptseg_core::decoder::{Decoder, DecoderConfig};
use promptseg_core::imaging::{to_rgb8, BinaryMask};
use promptseg_core::model::SegmentationModel;
use promptseg_core::training::{train, TrainConfig};
use serde_json::Value;
use tower::ServiceExt;

fn app(cfg: ServiceConfig) -> axum::Router {
    router(AppState::new(tiny_model(), "abc123".into(), cfg))
}

async fn send(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn segment(app: axum::Router, parts: &[Part]) -> (StatusCode, Vec<u8>) {
    send(app, multipart_request(parts)).await
}

fn error_fields(body: &[u8]) -> Vec<String> {
    let e: ErrorBody = serde_json::from_slice(body).expect("error body");
    e.fields.into_iter().map(|f| f.field).collect()
}

fn decode_png(b64: &str) -> image::DynamicImage {
    image::load_from_memory(&B64.decode(b64).unwrap()).unwrap()
}

#[tokio::test]
async fn health_reports_model_hash() {
    let (status, body) = send(app(ServiceConfig::default()), Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_hash"], "abc123");
}

#[tokio::test]
async fn recipes_lists_ids_and_default() {
    let (status, body) = send(app(ServiceConfig::default()), Request::get("/recipes").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&body).unwrap();
    let ids: Vec<&str> = v["recipes"].as_array().unwrap().iter().map(|r| r.as_str().unwrap()).collect();
    assert!(ids.len() > 3, "{ids:?}");
    assert!(ids.contains(&v["default"].as_str().unwrap()));
}

#[tokio::test]
async fn text_prompt_returns_mask_and_prob_map() {
    let (status, body) = segment(
        app(ServiceConfig::default()),
        &[Part::png("image", &gray_png(40, 24)), Part::text("text", "red circle")],
    )
    .await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));
    let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
    assert_eq!((r.width, r.height), (40, 24));
    assert_eq!(r.threshold, 0.5);
    let mask = decode_png(&r.mask_png_base64);
    assert_eq!(mask.dimensions(), (40, 24));
    assert!(matches!(mask, image::DynamicImage::ImageLuma8(_)));
    assert!(matches!(decode_png(&r.prob_map_png_base64), image::DynamicImage::ImageLuma16(_)));
}

#[tokio::test]
async fn text_and_support_without_a_interpolate() {
    let parts = [
        Part::png("image", &gray_png(32, 32)),
        Part::text("text", "red circle"),
        Part::png("support_image", &gray_png(32, 32)),
        Part::png("support_mask", &square_mask_png(32, 32)),
        Part::text("a", "0.5"),
    ];
    let (status, body) = segment(app(ServiceConfig::default()), &parts).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&body));

    let (status, _) = segment(app(ServiceConfig::default()), &parts[..4]).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn identical_requests_give_identical_masks() {
    let app = app(ServiceConfig::default());
    let parts = || [Part::png("image", &gray_png(32, 32)), Part::text("text", "blue square")];
    let (_, a) = segment(app.clone(), &parts()).await;
    let (_, b) = segment(app, &parts()).await;
    let a: SegmentResponse = serde_json::from_slice(&a).unwrap();
    let b: SegmentResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(a.mask_png_base64, b.mask_png_base64);
    assert_eq!(a.prob_map_png_base64, b.prob_map_png_base64);
}

#[tokio::test]
async fn client_rethresholding_matches_server_masks() {
    let app = app(ServiceConfig::default());
    let mut prob = None;
    for t in ["0.1", "0.3", "0.5", "0.7", "0.9"] {
        let (status, body) = segment(
            app.clone(),
            &[Part::png("image", &gray_png(32, 32)), Part::text("text", "green cross"), Part::text("threshold", t)],
        )
        .await;
        assert_eq!(status, StatusCode::OK);
        let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
        let q = decode_png(&r.prob_map_png_base64).into_luma16();
        if let Some(p) = &prob {
            assert_eq!(p, &q, "probability map must not depend on the threshold");
        }
        let mine = threshold_quantized(&q, t.parse().unwrap());
        assert_eq!(mine, decode_png(&r.mask_png_base64).into_luma8(), "t={t}");
        prob = Some(q);
    }
}

#[tokio::test]
async fn malformed_multipart_is_400() {
    let req = Request::post("/segment")
        .header("content-type", "multipart/form-data; boundary=nope")
        .body(Body::from("garbage without boundaries"))
        .unwrap();
    let (status, body) = send(app(ServiceConfig::default()), req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let e: ErrorBody = serde_json::from_slice(&body).unwrap();
    assert!(!e.error.is_empty());
}

#[tokio::test]
async fn missing_image_is_400_with_field() {
    let (status, body) = segment(app(ServiceConfig::default()), &[Part::text("text", "red circle")]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_fields(&body).contains(&"image".to_string()));
}

#[tokio::test]
async fn bad_fields_are_400_with_diagnostics() {
    let cases: Vec<(Vec<Part>, &str)> = vec![
        (
            vec![Part::png("image", &gray_png(32, 32)), Part::text("text", "x"), Part::text("threshold", "1.5")],
            "threshold",
        ),
        (
            vec![Part::png("image", &gray_png(32, 32)), Part::text("text", "x"), Part::text("a", "abc")],
            "a",
        ),
        (
            vec![Part::png("image", &gray_png(32, 32)), Part::png("support_image", &gray_png(32, 32))],
            "support_mask",
        ),
        (
            vec![Part::png("image", &gray_png(32, 32)), Part::text("text", "x"), Part::text("colour", "red")],
            "colour",
        ),
    ];
    for (parts, field) in cases {
        let (status, body) = segment(app(ServiceConfig::default()), &parts).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{field}: {}", String::from_utf8_lossy(&body));
        assert!(error_fields(&body).iter().any(|f| f == field), "{field}: {}", String::from_utf8_lossy(&body));
    }
}

#[tokio::test]
async fn undecodable_image_is_400() {
    let (status, _) = segment(
        app(ServiceConfig::default()),
        &[Part::png("image", b"not a png"), Part::text("text", "x")],
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_image_is_413() {
    let small = ServiceConfig {
        max_image_bytes: 256,
        ..ServiceConfig::default()
    };
    let big = gray_png(200, 200);
    assert!(big.len() > 256);
    let (status, _) = segment(app(small), &[Part::png("image", &big), Part::text("text", "x")]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);

    let narrow = ServiceConfig {
        max_image_side: 64,
        ..ServiceConfig::default()
    };
    let (status, _) = segment(app(narrow), &[Part::png("image", &gray_png(65, 10)), Part::text("text", "x")]).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn missing_prompt_is_422() {
    let (status, body) = segment(app(ServiceConfig::default()), &[Part::png("image", &gray_png(32, 32))]).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{}", String::from_utf8_lossy(&body));
}

#[tokio::test]
async fn empty_form_is_400() {
    let (status, body) = segment(app(ServiceConfig::default()), &[]).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(error_fields(&body).contains(&"image".to_string()));
}

/// The tiny model overfit on eight synthetic images, shared by the tests
/// that need a model which actually segments.
fn overfit_model() -> &'static (Arc<AppState>, SynthDataset) {
    static CELL: OnceLock<(Arc<AppState>, SynthDataset)> = OnceLock::new();
    CELL.get_or_init(|| {
        let bb = Arc::new(Backbone::new(BackboneConfig::tiny(0)).unwrap());
        let data = synth_dataset(0, 8, &SynthConfig::default()).unwrap();
        let mut dec = Decoder::init(DecoderConfig::clipseg(bb.config()).with_width(32).with_layers(vec![1, 2, 3]), 0).unwrap();
        let cfg = TrainConfig {
            iterations: 500,
            batch_size: 8,
            lr0: 1e-3,
            lr_final: 1e-4,
            prefixes: PrefixRegistry::identity(),
            ..TrainConfig::default()
        };
        train(&mut dec, &bb, &data.store, &data.records, &cfg).unwrap();
        let model = SegmentationModel::new(bb, dec).unwrap();
        (AppState::new(model, "overfit".into(), ServiceConfig::default()), data)
    })
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        i += (*x && *y) as usize;
        u += (*x || *y) as usize;
    }
    i as f64 / u.max(1) as f64
}

#[tokio::test]
async fn overfit_model_segments_its_training_phrase() {
    let (state, data) = overfit_model();
    let record = data
        .records
        .iter()
        .find(|r| r.phrase == "red circle" && !r.negative)
        .or_else(|| data.records.iter().find(|r| !r.negative))
        .unwrap();
    let img = data.store.image(&record.image).unwrap();
    let target = load_target(&data.store, record, &img).unwrap();
    let (status, body) = segment(
        router(state.clone()),
        &[Part::png("image", &png_bytes(&to_rgb8(&img)).unwrap()), Part::text("text", &record.phrase)],
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let r: SegmentResponse = serde_json::from_slice(&body).unwrap();
    let mask: ImageBuffer<Luma<u8>, Vec<u8>> = decode_png(&r.mask_png_base64).into_luma8();
    let got = BinaryMask::from_luma(&mask).unwrap();
    let score = iou(&got, &target);
    assert!(score > 0.9, "{:?}: IoU {score:.3}", record.phrase);
}
