//! Loopback TCP mode: the fleet runs in its own process and the gateway
//! side talks to it with newline-delimited JSON.
//!
//! Request: `{"identity": "...", "node": "...", "op": "...", "args": [...]}`.
//! Response: `{"exit_code": 0, "stdout": "...", "stderr": "..."}`, plus an
//! `error` kind when the channel itself refused the request.
//!
//! | op        | args                 | stdout                       |
//! |-----------|----------------------|------------------------------|
//! | `exec`    | `[command]`          | command output               |
//! | `put`     | `[name, base64]`     | empty                        |
//! | `get`     | `[name]`             | file contents, base64        |
//! | `power`   | `["on"\|"off"]`      | node view as JSON            |
//! | `sensors` | `[]`                 | telemetry sample as JSON     |

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::Arc;
use std::thread::JoinHandle;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use super::{Caller, CommandResult, Fleet, FleetError, NodeView, TelemetrySample, Transfer};
use crate::domain::{NodeId, PowerState};

/// Exit status reported when the channel, not the command, failed.
pub const CHANNEL_FAILURE: i32 = 255;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireRequest {
    pub identity: String,
    pub node: NodeId,
    pub op: String,
    #[serde(default)]
    pub args: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireResponse {
    pub exit_code: i32,
    pub stdout: String,
    pub stderr: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl WireResponse {
    fn ok(stdout: String) -> Self {
        WireResponse {
            exit_code: 0,
            stdout,
            stderr: String::new(),
            error: None,
        }
    }

    fn refused(kind: &str, message: String) -> Self {
        WireResponse {
            exit_code: CHANNEL_FAILURE,
            stdout: String::new(),
            stderr: message,
            error: Some(kind.to_owned()),
        }
    }
}

impl From<FleetError> for WireResponse {
    fn from(e: FleetError) -> Self {
        WireResponse::refused(e.kind(), e.to_string())
    }
}

impl From<CommandResult> for WireResponse {
    fn from(r: CommandResult) -> Self {
        WireResponse {
            exit_code: r.exit_code,
            stdout: r.stdout,
            stderr: r.stderr,
            error: None,
        }
    }
}

/// Executes one request against the fleet.
pub fn handle(fleet: &Fleet, req: &WireRequest) -> WireResponse {
    let caller = Caller::new(req.identity.clone());
    let args: Vec<&str> = req.args.iter().map(String::as_str).collect();
    let json = |v: Result<String, serde_json::Error>| v.expect("wire types serialize");
    let outcome: Result<WireResponse, FleetError> = match (req.op.as_str(), args.as_slice()) {
        ("exec", [cmd]) => fleet
            .exec_command(&caller, &req.node, cmd)
            .map(|env| env.result.expect("answered").into()),
        ("put", [name, data]) => match B64.decode(data) {
            Ok(bytes) => fleet
                .transfer_file(
                    &caller,
                    &req.node,
                    Transfer::In {
                        name,
                        bytes: &bytes,
                    },
                )
                .map(|_| WireResponse::ok(String::new())),
            Err(e) => Ok(WireResponse::refused(
                "BadRequest",
                format!("bad base64: {e}"),
            )),
        },
        ("get", [name]) => fleet
            .transfer_file(&caller, &req.node, Transfer::Out { name })
            .map(|b| WireResponse::ok(B64.encode(b.unwrap_or_default()))),
        ("power", [state]) => {
            let target = match *state {
                "on" => PowerState::On,
                "off" => PowerState::Off,
                other => {
                    return WireResponse::refused(
                        "BadRequest",
                        format!("bad power state {other:?}"),
                    )
                }
            };
            fleet
                .set_power(&caller, &req.node, target)
                .map(|v| WireResponse::ok(json(serde_json::to_string(&v))))
        }
        ("sensors", []) => match fleet.authorize(&caller) {
            Ok(()) => fleet
                .read_sensors(&req.node)
                .map(|s| WireResponse::ok(json(serde_json::to_string(&s)))),
            Err(e) => Err(e),
        },
        (op, _) => Ok(WireResponse::refused(
            "BadRequest",
            format!("unknown op {op:?} or wrong arguments"),
        )),
    };
    outcome.unwrap_or_else(WireResponse::from)
}

pub struct FleetServer {
    fleet: Arc<Fleet>,
    listener: TcpListener,
}

impl FleetServer {
    pub fn bind(fleet: Arc<Fleet>, addr: impl ToSocketAddrs) -> io::Result<Self> {
        Ok(FleetServer {
            fleet,
            listener: TcpListener::bind(addr)?,
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections forever, one thread per connection.
    pub fn serve(self) -> io::Result<()> {
        for stream in self.listener.incoming() {
            let stream = stream?;
            let fleet = Arc::clone(&self.fleet);
            std::thread::spawn(move || {
                if let Err(e) = serve_conn(&fleet, stream) {
                    tracing::debug!(error = %e, "fleet connection closed");
                }
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> JoinHandle<io::Result<()>> {
        std::thread::spawn(move || self.serve())
    }
}

fn serve_conn(fleet: &Fleet, stream: TcpStream) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let resp = match serde_json::from_str::<WireRequest>(&line) {
            Ok(req) => handle(fleet, &req),
            Err(e) => WireResponse::refused("BadRequest", format!("malformed request: {e}")),
        };
        let mut out = serde_json::to_vec(&resp).expect("wire types serialize");
        out.push(b'\n');
        writer.write_all(&out)?;
    }
    Ok(())
}

/// Client side of the wire protocol. Requests on one client are sent over a
/// single connection, one at a time.
pub struct RemoteFleet {
    identity: String,
    conn: Mutex<(BufReader<TcpStream>, TcpStream)>,
}

impl RemoteFleet {
    pub fn connect(addr: impl ToSocketAddrs, identity: impl Into<String>) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        let writer = stream.try_clone()?;
        Ok(RemoteFleet {
            identity: identity.into(),
            conn: Mutex::new((BufReader::new(stream), writer)),
        })
    }

    pub fn call(&self, node: &NodeId, op: &str, args: &[&str]) -> Result<WireResponse, FleetError> {
        let req = WireRequest {
            identity: self.identity.clone(),
            node: node.clone(),
            op: op.to_owned(),
            args: args.iter().map(|s| (*s).to_owned()).collect(),
        };
        let mut line = serde_json::to_vec(&req).map_err(|e| FleetError::Wire(e.to_string()))?;
        line.push(b'\n');
        let mut conn = self.conn.lock();
        let wire = |e: io::Error| FleetError::Wire(e.to_string());
        conn.1.write_all(&line).map_err(wire)?;
        let mut buf = String::new();
        if conn.0.read_line(&mut buf).map_err(wire)? == 0 {
            return Err(FleetError::Wire("connection closed".into()));
        }
        let resp: WireResponse =
            serde_json::from_str(&buf).map_err(|e| FleetError::Wire(e.to_string()))?;
        match resp.error.as_deref() {
            None => Ok(resp),
            Some(kind) => Err(match kind {
                "UnknownNode" => FleetError::UnknownNode(node.clone()),
                "NodeUnreachable" => FleetError::NodeUnreachable(node.clone()),
                "IdentityRejected" => FleetError::IdentityRejected(self.identity.clone()),
                "NoSuchFile" => FleetError::NoSuchFile {
                    node: node.clone(),
                    name: args.first().copied().unwrap_or_default().to_owned(),
                },
                _ => FleetError::Wire(resp.stderr.trim_end().to_owned()),
            }),
        }
    }

    pub fn exec(&self, node: &NodeId, command: &str) -> Result<CommandResult, FleetError> {
        let r = self.call(node, "exec", &[command])?;
        Ok(CommandResult {
            exit_code: r.exit_code,
            stdout: r.stdout,
            stderr: r.stderr,
        })
    }

    pub fn put(&self, node: &NodeId, name: &str, bytes: &[u8]) -> Result<(), FleetError> {
        self.call(node, "put", &[name, &B64.encode(bytes)])
            .map(drop)
    }

    pub fn get(&self, node: &NodeId, name: &str) -> Result<Vec<u8>, FleetError> {
        let r = self.call(node, "get", &[name])?;
        B64.decode(r.stdout.trim())
            .map_err(|e| FleetError::Wire(e.to_string()))
    }

    pub fn power(&self, node: &NodeId, target: PowerState) -> Result<NodeView, FleetError> {
        let arg = match target {
            PowerState::On => "on",
            PowerState::Off => "off",
        };
        let r = self.call(node, "power", &[arg])?;
        serde_json::from_str(&r.stdout).map_err(|e| FleetError::Wire(e.to_string()))
    }

    pub fn sensors(&self, node: &NodeId) -> Result<TelemetrySample, FleetError> {
        let r = self.call(node, "sensors", &[])?;
        serde_json::from_str(&r.stdout).map_err(|e| FleetError::Wire(e.to_string()))
    }
}
