#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use axum::body::Body;
use axum::http::{HeaderMap, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;
use vlscope_core::bias::Corpus;
use vlscope_core::model::{FeatureSource, Model, ModelConfig, WeightSet};
use vlscope_core::synth;
use vlscope_service::{AppState, ServiceConfig};

pub struct Reply {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Value,
}

impl Reply {
    pub fn ok(self) -> Value {
        assert_eq!(self.status, StatusCode::OK, "body: {}", self.body);
        self.body
    }
}

pub async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> Reply {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let res = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = res.status();
    let headers = res.headers().clone();
    let bytes = res.into_body().collect().await.unwrap().to_bytes();
    let body = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes)
            .unwrap_or_else(|e| panic!("{method} {uri}: non-JSON body ({e}): {bytes:?}"))
    };
    Reply {
        status,
        headers,
        body,
    }
}

pub async fn get(app: &Router, uri: &str) -> Reply {
    call(app, "GET", uri, None).await
}

pub async fn post(app: &Router, uri: &str, body: Value) -> Reply {
    call(app, "POST", uri, Some(body)).await
}

pub fn model(config: ModelConfig, seed: u64) -> Model<f32> {
    let cfg = ModelConfig {
        vocab_size: synth::vocab().len(),
        answer_vocab_size: synth::answer_list().len(),
        ..config
    };
    Model::from_weights(&WeightSet::random(cfg, seed, 1.0).unwrap()).unwrap()
}

pub fn state_with(
    config: ModelConfig,
    corpus: Option<Corpus>,
    n_objects: usize,
    service: ServiceConfig,
) -> AppState {
    let features: Arc<dyn FeatureSource> = Arc::new(match &corpus {
        Some(c) => synth::feature_map(c, n_objects, 3),
        None => HashMap::from([(
            "img0000".to_owned(),
            Arc::new(synth::features("img0000", n_objects, 3)),
        )]),
    });
    AppState::new(
        model(config, 17),
        synth::vocab(),
        synth::answers(),
        corpus,
        features,
        service,
    )
    .unwrap()
}

/// Toy model over a 12-image, 4-questions-per-image corpus.
pub fn toy_state() -> AppState {
    state_with(
        ModelConfig::toy(0, 0),
        Some(synth::corpus(12, 4, 5)),
        9,
        ServiceConfig::default(),
    )
}

pub fn toy_state_cached(dir: &Path) -> AppState {
    state_with(
        ModelConfig::toy(0, 0),
        Some(synth::corpus(12, 4, 5)),
        9,
        ServiceConfig {
            cache_dir: Some(dir.to_path_buf()),
            ..ServiceConfig::default()
        },
    )
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

fn validators() -> &'static HashMap<String, jsonschema::Validator> {
    static V: OnceLock<HashMap<String, jsonschema::Validator>> = OnceLock::new();
    V.get_or_init(|| {
        let mut out = HashMap::new();
        for entry in std::fs::read_dir(schema_dir()).unwrap() {
            let path = entry.unwrap().path();
            let name = path.file_stem().unwrap().to_string_lossy().into_owned();
            let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap())
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let v = jsonschema::validator_for(&schema)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            out.insert(name, v);
        }
        out
    })
}

/// Panics unless `value` satisfies `schemas/<name>.json`.
pub fn assert_schema(name: &str, value: &Value) {
    let v = validators()
        .get(name)
        .unwrap_or_else(|| panic!("no schema `{name}`"));
    let errors: Vec<String> = v
        .iter_errors(value)
        .map(|e| format!("{} at {}", e, e.instance_path()))
        .collect();
    assert!(errors.is_empty(), "{name}: {errors:#?}\n{value}");
}

pub fn schema_names() -> Vec<String> {
    let mut names: Vec<String> = validators().keys().cloned().collect();
    names.sort();
    names
}
