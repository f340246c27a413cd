//! In-process stand-in for the PlanetLab Central API.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use axum::extract::State;
use axum::http::header::CONTENT_TYPE;
use axum::routing::post;
use axum::Router;
use gplmt::planetlab::xmlrpc::{fault_response, method_response, parse_call, Value};
use gplmt::planetlab::FAULT_AUTH;

#[derive(Debug, Clone)]
pub struct Host {
    pub node_id: i64,
    pub hostname: String,
    pub boot_state: String,
}

pub fn host(node_id: i64, hostname: &str, boot_state: &str) -> Host {
    Host {
        node_id,
        hostname: hostname.into(),
        boot_state: boot_state.into(),
    }
}

struct Plc {
    user: String,
    secret: String,
    slices: BTreeMap<String, Vec<Host>>,
    requests: AtomicUsize,
}

pub struct FakePlc {
    pub url: String,
    state: Arc<Plc>,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl FakePlc {
    /// Serves `slices` on a free local port, accepting only `user`/`secret`.
    pub fn start(user: &str, secret: &str, slices: BTreeMap<String, Vec<Host>>) -> Self {
        let state = Arc::new(Plc {
            user: user.into(),
            secret: secret.into(),
            slices,
            requests: AtomicUsize::new(0),
        });
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        listener.set_nonblocking(true).unwrap();
        let url = format!("http://{}/PLCAPI/", listener.local_addr().unwrap());
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let app = Router::new()
            .route("/PLCAPI/", post(handle))
            .route("/html", post(|| async { "<html><body>maintenance</body></html>" }))
            .with_state(state.clone());
        let thread = std::thread::spawn(move || {
            let rt = tokio::runtime::Builder::new_current_thread().enable_all().build().unwrap();
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(listener).unwrap();
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .unwrap();
            });
        });
        Self {
            url,
            state,
            shutdown: Some(tx),
            thread: Some(thread),
        }
    }

    pub fn requests(&self) -> usize {
        self.state.requests.load(Ordering::SeqCst)
    }
}

impl Drop for FakePlc {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn authorized(plc: &Plc, auth: Option<&Value>) -> bool {
    let Some(auth) = auth else { return false };
    auth.get("AuthMethod").and_then(Value::as_str) == Some("password")
        && auth.get("Username").and_then(Value::as_str) == Some(plc.user.as_str())
        && auth.get("AuthString").and_then(Value::as_str) == Some(plc.secret.as_str())
}

async fn handle(State(plc): State<Arc<Plc>>, body: String) -> ([(axum::http::HeaderName, &'static str); 1], String) {
    plc.requests.fetch_add(1, Ordering::SeqCst);
    let xml = [(CONTENT_TYPE, "text/xml")];
    let (method, params) = match parse_call(&body) {
        Ok(c) => c,
        Err(e) => return (xml, fault_response(102, &e)),
    };
    if !authorized(&plc, params.first()) {
        return (xml, fault_response(FAULT_AUTH, "Failed to authenticate call"));
    }
    let filter = params.get(1).and_then(Value::as_array).unwrap_or_default();
    let result = match method.as_str() {
        "GetSlices" => Value::Array(
            filter
                .iter()
                .filter_map(Value::as_str)
                .filter_map(|name| plc.slices.get(name).map(|hosts| (name, hosts)))
                .map(|(name, hosts)| {
                    Value::structure([
                        ("name", Value::String(name.to_string())),
                        ("node_ids", Value::Array(hosts.iter().map(|h| Value::Int(h.node_id)).collect())),
                    ])
                })
                .collect(),
        ),
        "GetNodes" => {
            let ids: Vec<i64> = filter.iter().filter_map(Value::as_int).collect();
            Value::Array(
                plc.slices
                    .values()
                    .flatten()
                    .filter(|h| ids.contains(&h.node_id))
                    .map(|h| {
                        Value::structure([
                            ("node_id", Value::Int(h.node_id)),
                            ("hostname", Value::String(h.hostname.clone())),
                            ("boot_state", Value::String(h.boot_state.clone())),
                        ])
                    })
                    .collect(),
            )
        }
        other => return (xml, fault_response(100, &format!("unknown method {other}"))),
    };
    (xml, method_response(&result))
}
