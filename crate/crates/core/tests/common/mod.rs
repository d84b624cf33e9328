//! Independent oracles shared by the integration and acceptance tests. None of
//! these reuse the library's own arithmetic.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use solaudit_core::finetune::{
    loss_and_gradients, LoraAdapter, Projection, ProjectionGrad, RegressionPair, ToyAttentionLayer, WeightMatrix,
};
use solaudit_core::VulnerabilityLabel;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

/// Copies the fixture project into a fresh temporary directory named
/// `project`, so patching never touches the committed fixture.
pub fn fixture_project_copy() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let dest = tmp.path().join("project");
    copy_dir(&fixtures().join("project"), &dest);
    (tmp, dest)
}

pub fn copy_dir(src: &Path, dest: &Path) {
    std::fs::create_dir_all(dest).unwrap();
    for entry in std::fs::read_dir(src).unwrap() {
        let entry = entry.unwrap();
        let to = dest.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &to);
        } else {
            std::fs::copy(entry.path(), &to).unwrap();
        }
    }
}

// ---------------------------------------------------------------- attention

/// Triple-loop forward pass over plain `Vec`s.
pub fn forward_oracle(wq: &WeightMatrix, wk: &WeightMatrix, wv: &WeightMatrix, x: &WeightMatrix) -> Vec<Vec<f64>> {
    let (n, d) = x.shape();
    let k = wq.cols();
    let proj = |w: &WeightMatrix| -> Vec<Vec<f64>> {
        (0..n)
            .map(|t| (0..k).map(|j| (0..d).map(|i| x.get(t, i) * w.get(i, j)).sum()).collect())
            .collect()
    };
    let (q, kk, v) = (proj(wq), proj(wk), proj(wv));
    let scale = (d as f64).sqrt();
    (0..n)
        .map(|t| {
            let scores: Vec<f64> = (0..n)
                .map(|s| (0..k).map(|j| q[t][j] * kk[s][j]).sum::<f64>() / scale)
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..k).map(|j| (0..n).map(|s| e[s] / z * v[s][j]).sum()).collect()
        })
        .collect()
}

/// LoRA layer whose `B` factors are random, so every gradient entry is live.
pub fn live_lora_layer(d: usize, k: usize, r: usize, seed: u64) -> ToyAttentionLayer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb0b0);
    let adapted = ToyAttentionLayer::random(d, k, seed).with_lora(r, seed).unwrap();
    let projs: Vec<Projection> = adapted
        .projections()
        .iter()
        .map(|p| match p {
            Projection::Lora(ad) => {
                let b = WeightMatrix::random_normal(k, r, 0.5, &mut rng);
                Projection::Lora(LoraAdapter::from_parts(ad.base().clone(), ad.a().clone(), b).unwrap())
            }
            Projection::Full(_) => unreachable!(),
        })
        .collect();
    let mut it = projs.into_iter();
    ToyAttentionLayer::from_projections(it.next().unwrap(), it.next().unwrap(), it.next().unwrap()).unwrap()
}

/// Address of one trainable scalar: projection (0=q, 1=k, 2=v), matrix within
/// the projection (0 for W or A, 1 for B), row, column.
pub type ParamIndex = (usize, usize, usize, usize);

fn projection(layer: &ToyAttentionLayer, p: usize) -> &Projection {
    layer.projections()[p]
}

pub fn param_indices(layer: &ToyAttentionLayer) -> Vec<ParamIndex> {
    let mut out = Vec::new();
    for p in 0..3 {
        let mats: Vec<&WeightMatrix> = match projection(layer, p) {
            Projection::Full(w) => vec![w],
            Projection::Lora(ad) => vec![ad.a(), ad.b()],
        };
        for (m, w) in mats.into_iter().enumerate() {
            for i in 0..w.rows() {
                for j in 0..w.cols() {
                    out.push((p, m, i, j));
                }
            }
        }
    }
    out
}

pub fn perturb(layer: &ToyAttentionLayer, (p, m, i, j): ParamIndex, delta: f64) -> ToyAttentionLayer {
    let mut projs: Vec<Projection> = layer.projections().iter().map(|p| (*p).clone()).collect();
    projs[p] = match &projs[p] {
        Projection::Full(w) => Projection::Full(w.with_entry(i, j, w.get(i, j) + delta)),
        Projection::Lora(ad) => {
            let (a, b) = (ad.a().clone(), ad.b().clone());
            let (a, b) = if m == 0 {
                (a.with_entry(i, j, a.get(i, j) + delta), b)
            } else {
                (a, b.with_entry(i, j, b.get(i, j) + delta))
            };
            Projection::Lora(LoraAdapter::from_parts(ad.base().clone(), a, b).unwrap())
        }
    };
    let mut it = projs.into_iter();
    ToyAttentionLayer::from_projections(it.next().unwrap(), it.next().unwrap(), it.next().unwrap()).unwrap()
}

pub fn analytic_entry(layer: &ToyAttentionLayer, data: &[RegressionPair], idx: ParamIndex) -> f64 {
    let (_, grads) = loss_and_gradients(layer, data, true).unwrap();
    grad_entry(&grads.all(), idx)
}

pub fn grad_entry(grads: &[&ProjectionGrad; 3], (p, m, i, j): ParamIndex) -> f64 {
    match grads[p] {
        ProjectionGrad::Full { w } => w.get(i, j),
        ProjectionGrad::Lora { a, b } => {
            if m == 0 {
                a.get(i, j)
            } else {
                b.get(i, j)
            }
        }
    }
}

/// Central difference of the MSE loss in one parameter.
pub fn numeric_entry(layer: &ToyAttentionLayer, data: &[RegressionPair], idx: ParamIndex, h: f64) -> f64 {
    let lp = loss_and_gradients(&perturb(layer, idx, h), data, false).unwrap().0;
    let lm = loss_and_gradients(&perturb(layer, idx, -h), data, false).unwrap().0;
    (lp - lm) / (2.0 * h)
}

/// `|a − n| / max(|a|, |n|)`; both exactly zero counts as agreement. Entries
/// whose magnitudes are both below `floor` are compared on the floor scale,
/// since a relative error of two roundoff-level numbers carries no signal.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(floor);
    if scale == 0.0 {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

/// Largest relative error over every trainable scalar of `layer`.
pub fn max_gradient_error(layer: &ToyAttentionLayer, data: &[RegressionPair], h: f64, floor: f64) -> (f64, usize) {
    let (_, grads) = loss_and_gradients(layer, data, true).unwrap();
    let all = grads.all();
    let idx = param_indices(layer);
    let worst = idx
        .iter()
        .map(|&i| relative_error(grad_entry(&all, i), numeric_entry(layer, data, i, h), floor))
        .fold(0.0, f64::max);
    (worst, idx.len())
}

// ---------------------------------------------------------------------- SVD

pub fn singular_values(w: &WeightMatrix) -> Vec<f64> {
    let m = DMatrix::from_row_slice(w.rows(), w.cols(), w.as_slice());
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Largest singular value beyond the first `r`.
pub fn tail_singular_value(w: &WeightMatrix, r: usize) -> f64 {
    singular_values(w).into_iter().skip(r).fold(0.0, f64::max)
}

// ------------------------------------------------------------------ metrics

#[derive(Debug, Clone, PartialEq)]
pub struct OracleMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label counting written from the definitions, one pass per label over
/// `(gold, predicted)` pairs.
pub fn metrics_oracle(pairs: &[(VulnerabilityLabel, VulnerabilityLabel)]) -> BTreeMap<VulnerabilityLabel, OracleMetrics> {
    VulnerabilityLabel::VULNERABLE
        .iter()
        .map(|&label| {
            let mut tp = 0;
            let mut fp = 0;
            let mut fn_ = 0;
            for &(g, p) in pairs {
                if p == label && g == label {
                    tp += 1;
                }
                if p == label && g != label {
                    fp += 1;
                }
                if p != label && g == label {
                    fn_ += 1;
                }
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (
                label,
                OracleMetrics {
                    tp,
                    fp,
                    fn_,
                    precision,
                    recall,
                    f1,
                },
            )
        })
        .collect()
}

// -------------------------------------------------------------- stub server

/// One scripted reply: HTTP status and body.
pub type Reply = (u16, Value);

#[derive(Default)]
pub struct StubState {
    /// Replies served in order before falling back to echo mode.
    pub script: Mutex<VecDeque<Reply>>,
    pub requests: AtomicUsize,
    pub in_flight: AtomicUsize,
    pub max_in_flight: AtomicUsize,
    pub bodies: Mutex<Vec<Value>>,
    pub auth_headers: Mutex<Vec<Option<String>>>,
}

pub fn completion(content: &str) -> Value {
    json!({"choices": [{"index": 0, "message": {"role": "assistant", "content": content}}]})
}

/// Echo mode: answers with the last message's content after a delay derived
/// from that content, so completion order differs from request order.
async fn handler(
    State(state): State<Arc<StubState>>,
    headers: axum::http::HeaderMap,
    Json(body): Json<Value>,
) -> (StatusCode, Json<Value>) {
    state.requests.fetch_add(1, Ordering::SeqCst);
    let now = state.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    state.max_in_flight.fetch_max(now, Ordering::SeqCst);
    state.bodies.lock().unwrap().push(body.clone());
    state.auth_headers.lock().unwrap().push(
        headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .map(str::to_string),
    );

    let scripted = state.script.lock().unwrap().pop_front();
    let reply = match scripted {
        Some((status, body)) => (StatusCode::from_u16(status).unwrap(), Json(body)),
        None => {
            let content = body["messages"]
                .as_array()
                .and_then(|m| m.last())
                .and_then(|m| m["content"].as_str())
                .unwrap_or("")
                .to_string();
            let delay = content.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)) % 25;
            tokio::time::sleep(Duration::from_millis(delay)).await;
            (StatusCode::OK, Json(completion(&content)))
        }
    };
    state.in_flight.fetch_sub(1, Ordering::SeqCst);
    reply
}

/// Starts the stub on an ephemeral port and returns its base URL.
pub async fn start_stub(state: Arc<StubState>) -> String {
    let app = Router::new().route("/chat/completions", post(handler)).with_state(state);
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    format!("http://{addr}")
}
