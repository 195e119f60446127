#![allow(dead_code)]

use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use pubcluster_core::domain::{ManualClock, Timestamp};
use pubcluster_core::fleet::{build_job_archive, SimJobScript};
use pubcluster_core::gateway::{router, ClusterService, GatewayConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

pub const SECRET: &str = "let-me-in";
pub const T0: Timestamp = Timestamp(1_700_000_000_000);

pub struct Harness {
    pub dir: TempDir,
    pub clock: ManualClock,
    pub service: Arc<ClusterService>,
    pub app: Router,
}

impl Harness {
    pub fn new(nodes: usize) -> Self {
        Self::with(nodes, |_| {})
    }

    pub fn with(nodes: usize, tweak: impl FnOnce(&mut GatewayConfig)) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = GatewayConfig::new(dir.path().join("data"), SECRET);
        cfg.demo_nodes = nodes;
        cfg.action_log = dir.path().join("actions.ndjson");
        tweak(&mut cfg);
        let clock = ManualClock::new(T0);
        let service = Arc::new(ClusterService::boot(&cfg, Arc::new(clock.clone())).unwrap());
        let app = router(Arc::clone(&service));
        Harness {
            dir,
            clock,
            service,
            app,
        }
    }

    pub fn advance(&self, d: Duration) -> Timestamp {
        self.clock.advance(d)
    }

    pub async fn send(&self, req: Request<Body>) -> (StatusCode, Vec<u8>) {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp
            .into_body()
            .collect()
            .await
            .unwrap()
            .to_bytes()
            .to_vec();
        (status, bytes)
    }

    /// JSON request. `auth` is `("bearer", token)` or `("admin", secret)`.
    pub async fn call(
        &self,
        method: &str,
        path: &str,
        auth: Option<(&str, &str)>,
        body: Option<Value>,
    ) -> (StatusCode, Value) {
        let mut b = Request::builder().method(method).uri(path);
        match auth {
            Some(("bearer", t)) => b = b.header("authorization", format!("Bearer {t}")),
            Some((_, s)) => b = b.header("x-admin-secret", s),
            None => {}
        }
        let req = match body {
            Some(v) => b
                .header("content-type", "application/json")
                .body(Body::from(v.to_string())),
            None => b.body(Body::empty()),
        }
        .unwrap();
        let (status, bytes) = self.send(req).await;
        let v = if bytes.is_empty() {
            Value::Null
        } else {
            serde_json::from_slice(&bytes).unwrap_or(Value::Null)
        };
        (status, v)
    }

    pub async fn upload(
        &self,
        app_id: &str,
        token: &str,
        environment: &str,
        archive: &[u8],
    ) -> (StatusCode, Value) {
        let boundary = "XbOuNdArYx";
        let mut body = Vec::new();
        body.extend_from_slice(
            format!("--{boundary}\r\nContent-Disposition: form-data; name=\"environment\"\r\n\r\n{environment}\r\n").as_bytes(),
        );
        body.extend_from_slice(
            format!(
                "--{boundary}\r\nContent-Disposition: form-data; name=\"archive\"; filename=\"job.tar\"\r\n\
                 Content-Type: application/x-tar\r\n\r\n"
            )
            .as_bytes(),
        );
        body.extend_from_slice(archive);
        body.extend_from_slice(format!("\r\n--{boundary}--\r\n").as_bytes());
        let req = Request::builder()
            .method("POST")
            .uri(format!("/applications/{app_id}/jobs"))
            .header("authorization", format!("Bearer {token}"))
            .header(
                "content-type",
                format!("multipart/form-data; boundary={boundary}"),
            )
            .body(Body::from(body))
            .unwrap();
        let (status, bytes) = self.send(req).await;
        (
            status,
            serde_json::from_slice(&bytes).unwrap_or(Value::Null),
        )
    }

    pub async fn submit(&self, name: &str, nodes: i64) -> String {
        let (s, v) = self
            .call(
                "POST",
                "/applications",
                None,
                Some(
                    json!({"name": name, "contact": format!("{name}@example.org"),
                            "job_description": "parallel heat equation", "nodes_requested": nodes}),
                ),
            )
            .await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["app_id"].as_str().unwrap().to_owned()
    }

    pub async fn approve(&self, app_id: &str, nodes: u32, hours: u32) -> (StatusCode, Value) {
        self.call(
            "POST",
            &format!("/admin/applications/{app_id}/review"),
            Some(("admin", SECRET)),
            Some(json!({"decision": "approve", "node_count": nodes, "period_hours": hours})),
        )
        .await
    }

    /// Submit, approve and confirm. Returns (app_id, token, confirm body).
    pub async fn active_tenant(
        &self,
        name: &str,
        nodes: u32,
        hours: u32,
    ) -> (String, String, Value) {
        let app_id = self.submit(name, i64::from(nodes)).await;
        let (s, v) = self.approve(&app_id, nodes, hours).await;
        assert_eq!(s, StatusCode::OK, "{v}");
        let token = v["access_token"].as_str().unwrap().to_owned();
        let (s, c) = self
            .call(
                "POST",
                &format!("/applications/{app_id}/confirm"),
                Some(("bearer", &token)),
                None,
            )
            .await;
        assert_eq!(s, StatusCode::OK, "{c}");
        (app_id, token, c)
    }
}

pub fn job_archive(runtime_s: u64, output: &str) -> Vec<u8> {
    build_job_archive(
        &SimJobScript::new(runtime_s, output),
        &[("src/main.c", b"int main(){return 0;}\n")],
    )
}

pub fn untar(bytes: &[u8]) -> std::collections::BTreeMap<String, String> {
    let mut out = std::collections::BTreeMap::new();
    let mut ar = tar::Archive::new(bytes);
    for entry in ar.entries().unwrap() {
        let mut e = entry.unwrap();
        let name = e.path().unwrap().to_string_lossy().into_owned();
        let mut s = String::new();
        std::io::Read::read_to_string(&mut e, &mut s).unwrap();
        out.insert(name, s);
    }
    out
}
