//! Imports the nodes of a PlanetLab slice as SSH targets.

pub mod xmlrpc;

use std::collections::{BTreeSet, HashMap};
use std::time::Duration;

use crate::model::{Experiment, GroupMember, TargetDef, TargetKind};
use xmlrpc::{Response, Value};

/// Environment variable consulted when a planetlab target has no
/// `password` child.
pub const SECRET_ENV: &str = "GPLMT_PLANETLAB_SECRET";

/// Fault code the PlanetLab Central API uses for rejected credentials.
pub const FAULT_AUTH: i64 = 103;

const REQUEST_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SliceNodeRecord {
    pub hostname: String,
    pub boot_state: String,
    pub node_id: i64,
}

impl SliceNodeRecord {
    pub fn is_booted(&self) -> bool {
        self.boot_state == "boot"
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlanetLabError {
    #[error("PlanetLab API rejected the credentials for '{user}': {message}")]
    AuthFailed { user: String, message: String },
    #[error("PlanetLab API at {url} is unreachable: {reason}")]
    ApiUnreachable { url: String, reason: String },
    #[error("malformed PlanetLab API response: {0}")]
    MalformedResponse(String),
    #[error("PlanetLab API fault {code}: {message}")]
    Fault { code: i64, message: String },
    #[error("no credential for planetlab target '{0}': add a password element or set {SECRET_ENV}")]
    MissingCredential(String),
}

pub struct PlanetLabClient {
    http: reqwest::Client,
    api_url: String,
    auth: Value,
    user: String,
}

impl PlanetLabClient {
    pub fn new(api_url: &str, user: &str, credential: &str) -> Result<Self, PlanetLabError> {
        let http = reqwest::Client::builder()
            .timeout(REQUEST_TIMEOUT)
            .build()
            .map_err(|e| PlanetLabError::ApiUnreachable {
                url: api_url.to_string(),
                reason: e.to_string(),
            })?;
        Ok(Self {
            http,
            api_url: api_url.to_string(),
            auth: Value::structure([
                ("AuthMethod", Value::String("password".into())),
                ("Username", Value::String(user.into())),
                ("AuthString", Value::String(credential.into())),
            ]),
            user: user.to_string(),
        })
    }

    async fn call(&self, method: &str, mut params: Vec<Value>) -> Result<Value, PlanetLabError> {
        params.insert(0, self.auth.clone());
        let unreachable = |reason: String| PlanetLabError::ApiUnreachable {
            url: self.api_url.clone(),
            reason,
        };
        let resp = self
            .http
            .post(&self.api_url)
            .header(reqwest::header::CONTENT_TYPE, "text/xml")
            .body(xmlrpc::method_call(method, &params))
            .send()
            .await
            .map_err(|e| unreachable(e.to_string()))?;
        let status = resp.status();
        if status == reqwest::StatusCode::UNAUTHORIZED || status == reqwest::StatusCode::FORBIDDEN {
            return Err(PlanetLabError::AuthFailed {
                user: self.user.clone(),
                message: status.to_string(),
            });
        }
        if !status.is_success() {
            return Err(unreachable(format!("HTTP {status}")));
        }
        let body = resp.text().await.map_err(|e| unreachable(e.to_string()))?;
        match xmlrpc::parse_response(&body).map_err(PlanetLabError::MalformedResponse)? {
            Response::Success(v) => Ok(v),
            Response::Fault { code: FAULT_AUTH, message } => Err(PlanetLabError::AuthFailed {
                user: self.user.clone(),
                message,
            }),
            Response::Fault { code, message } => Err(PlanetLabError::Fault { code, message }),
        }
    }

    /// Nodes currently assigned to `slice`. An unknown slice has none.
    pub async fn slice_nodes(&self, slice: &str) -> Result<Vec<SliceNodeRecord>, PlanetLabError> {
        let malformed = |what: &str| PlanetLabError::MalformedResponse(what.to_string());
        let slices = self
            .call("GetSlices", vec![Value::strings([slice]), Value::strings(["node_ids"])])
            .await?;
        let slices = slices.as_array().ok_or_else(|| malformed("GetSlices did not return an array"))?;
        let mut ids = Vec::new();
        for s in slices {
            let node_ids = s
                .get("node_ids")
                .and_then(Value::as_array)
                .ok_or_else(|| malformed("slice record without node_ids"))?;
            for id in node_ids {
                ids.push(id.as_int().ok_or_else(|| malformed("node id is not an integer"))?);
            }
        }
        if ids.is_empty() {
            return Ok(Vec::new());
        }
        let nodes = self
            .call(
                "GetNodes",
                vec![
                    Value::Array(ids.into_iter().map(Value::Int).collect()),
                    Value::strings(["node_id", "hostname", "boot_state"]),
                ],
            )
            .await?;
        nodes
            .as_array()
            .ok_or_else(|| malformed("GetNodes did not return an array"))?
            .iter()
            .map(|n| {
                let hostname = n
                    .get("hostname")
                    .and_then(Value::as_str)
                    .filter(|h| !h.is_empty())
                    .ok_or_else(|| malformed("node record without hostname"))?;
                Ok(SliceNodeRecord {
                    hostname: hostname.to_string(),
                    boot_state: n.get("boot_state").and_then(Value::as_str).unwrap_or_default().to_string(),
                    node_id: n.get("node_id").and_then(Value::as_int).ok_or_else(|| malformed("node record without node_id"))?,
                })
            })
            .collect()
    }
}

pub async fn list_slice_nodes(
    api_url: &str,
    slice: &str,
    user: &str,
    credential: &str,
) -> Result<Vec<SliceNodeRecord>, PlanetLabError> {
    PlanetLabClient::new(api_url, user, credential)?.slice_nodes(slice).await
}

/// Turns a planetlab target into a group with one SSH leaf per distinct
/// hostname. Leaves log in as the slice and carry the target's exports.
/// Nodes not in the `boot` state are dropped unless `include_unbooted`.
pub fn expand_planetlab_target(target: &TargetDef, records: &[SliceNodeRecord], include_unbooted: bool) -> TargetDef {
    let slice = target.planetlab_slice.clone().unwrap_or_default();
    let mut seen = BTreeSet::new();
    let members = records
        .iter()
        .filter(|r| include_unbooted || r.is_booted())
        .filter(|r| seen.insert(r.hostname.clone()))
        .map(|r| {
            let mut leaf = TargetDef::ssh(&r.hostname, &slice, &r.hostname);
            leaf.env_exports = target.env_exports.clone();
            GroupMember::Inline(leaf)
        })
        .collect();
    TargetDef::group(&target.name, members)
}

fn collect_planetlab<'a>(t: &'a TargetDef, out: &mut Vec<&'a TargetDef>) {
    if t.kind == TargetKind::PlanetLab {
        out.push(t);
    }
    for m in &t.members {
        if let GroupMember::Inline(inner) = m {
            collect_planetlab(inner, out);
        }
    }
}

fn replace(t: &mut TargetDef, expanded: &HashMap<String, TargetDef>) {
    if t.kind == TargetKind::PlanetLab {
        if let Some(g) = expanded.get(&t.name) {
            *t = g.clone();
        }
        return;
    }
    for m in &mut t.members {
        if let GroupMember::Inline(inner) = m {
            replace(inner, expanded);
        }
    }
}

/// Replaces every planetlab target of `experiment` by its expanded group.
///
/// The credential is the target's `password`, or else `fallback_secret`.
pub async fn expand_experiment(
    experiment: &Experiment,
    fallback_secret: Option<&str>,
    include_unbooted: bool,
) -> Result<Experiment, PlanetLabError> {
    let mut targets = Vec::new();
    for t in &experiment.targets {
        collect_planetlab(t, &mut targets);
    }
    let mut expanded = HashMap::new();
    for t in targets {
        let secret = t
            .ssh_password
            .as_deref()
            .or(fallback_secret)
            .ok_or_else(|| PlanetLabError::MissingCredential(t.name.clone()))?;
        let records = list_slice_nodes(
            t.planetlab_api_url.as_deref().unwrap_or_default(),
            t.planetlab_slice.as_deref().unwrap_or_default(),
            t.planetlab_user.as_deref().unwrap_or_default(),
            secret,
        )
        .await?;
        expanded.insert(t.name.clone(), expand_planetlab_target(t, &records, include_unbooted));
    }
    let mut out = experiment.clone();
    for t in &mut out.targets {
        replace(t, &expanded);
    }
    Ok(out)
}
