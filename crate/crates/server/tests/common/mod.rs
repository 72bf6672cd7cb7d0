#![allow(dead_code)]

use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

pub const TOKEN: &str = "s3cret";

#[derive(Clone)]
pub struct Client {
    pub router: Router,
    pub token: Option<String>,
}

impl Client {
    pub fn new(router: Router) -> Self {
        Client {
            router,
            token: Some(TOKEN.into()),
        }
    }

    fn request(&self, method: &str, uri: &str, body: Option<&Value>) -> Request<Body> {
        let mut b = Request::builder().method(method).uri(uri);
        if let Some(t) = &self.token {
            b = b.header("authorization", format!("Bearer {t}"));
        }
        match body {
            Some(v) => b
                .header("content-type", "application/json")
                .body(Body::from(v.to_string()))
                .unwrap(),
            None => b.body(Body::empty()).unwrap(),
        }
    }

    pub async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
        let resp = self
            .router
            .clone()
            .oneshot(self.request(method, uri, body.as_ref()))
            .await
            .unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
        };
        (status, v)
    }

    pub async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.call("POST", uri, Some(body)).await
    }

    pub async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.call("GET", uri, None).await
    }

    pub async fn create(&self, config: Value) -> String {
        let (s, v) = self.post("/v1/experiments", config).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["experiment_id"].as_str().unwrap().to_string()
    }

    pub async fn assign(&self, id: &str, pid: &str) -> Value {
        let (s, v) = self
            .post(&format!("/v1/experiments/{id}/assignments"), json!({ "participant_id": pid }))
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v
    }

    pub async fn reward(&self, id: &str, assignment_id: u64, value: u8) -> Value {
        let (s, v) = self
            .post(
                &format!("/v1/experiments/{id}/rewards"),
                json!({ "assignment_id": assignment_id, "value": value }),
            )
            .await;
        assert_eq!(s, StatusCode::OK, "{v}");
        v
    }

    pub async fn act(&self, id: &str, body: Value) -> (StatusCode, Value) {
        self.post(&format!("/v1/experiments/{id}/actions"), body).await
    }

    /// Open the event stream and collect `n` events (id, kind, data).
    pub async fn events(
        &self,
        id: &str,
        query: &str,
        last_event_id: Option<u64>,
        n: usize,
    ) -> Result<Vec<(u64, String, Value)>, (StatusCode, Value)> {
        let mut req = self.request("GET", &format!("/v1/experiments/{id}/events{query}"), None);
        if let Some(l) = last_event_id {
            req.headers_mut().insert("last-event-id", l.to_string().parse().unwrap());
        }
        let resp = self.router.clone().oneshot(req).await.unwrap();
        if resp.status() != StatusCode::OK {
            let s = resp.status();
            let bytes = resp.into_body().collect().await.unwrap().to_bytes();
            return Err((s, serde_json::from_slice(&bytes).unwrap_or(Value::Null)));
        }
        assert_eq!(resp.headers()["content-type"], "text/event-stream");
        let mut body = resp.into_body();
        let mut text = String::new();
        let mut out = Vec::new();
        while out.len() < n {
            let frame = tokio::time::timeout(Duration::from_secs(5), body.frame())
                .await
                .expect("event stream stalled")
                .expect("stream ended")
                .unwrap();
            if let Ok(data) = frame.into_data() {
                text.push_str(std::str::from_utf8(&data).unwrap());
            }
            while let Some(end) = text.find("\n\n") {
                let block: String = text.drain(..end + 2).collect();
                let (mut sid, mut kind, mut data) = (None, String::new(), Value::Null);
                for line in block.lines() {
                    if let Some(v) = line.strip_prefix("id: ") {
                        sid = v.parse().ok();
                    } else if let Some(v) = line.strip_prefix("event: ") {
                        kind = v.to_string();
                    } else if let Some(v) = line.strip_prefix("data: ") {
                        data = serde_json::from_str(v).unwrap();
                    }
                }
                if let Some(sid) = sid {
                    out.push((sid, kind, data));
                }
            }
        }
        Ok(out)
    }
}

pub fn two_arm(split: f64, burn_in: u64, batch: u64) -> Value {
    json!({
        "name": "t",
        "arms": ["control", "treatment"],
        "split_to_uniform": split,
        "thompson": { "burn_in": burn_in, "batch_size": batch }
    })
}
