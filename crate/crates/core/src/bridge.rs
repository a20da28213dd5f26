//! Client side of the newline-delimited JSON value protocol, for value
//! functions hosted outside this process.
//!
//! Each request line asks for the value of one retained set:
//!
//! ```text
//! {"id":7,"method":"value","params":{"retained":[0,1,3],"task":"majority_token","n_examples":2000}}
//! ```
//!
//! and each reply carries either a result or an error under the same id:
//!
//! ```text
//! {"id":7,"result":{"value":0.93,"n_examples":2000}}
//! {"id":7,"error":{"code":"task","message":"unknown task"}}
//! ```
//!
//! Replies may arrive in any order. Requests are written in chunks and the
//! replies are matched back by id, so results never depend on completion
//! order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::coalition::{Coalition, GameValue, OracleError, ValueOracle};

/// Requests written before waiting for replies.
pub const DEFAULT_PIPELINE: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueParams {
    pub retained: Vec<usize>,
    pub task: String,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueRequest {
    pub id: u64,
    pub method: String,
    pub params: ValueParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueResult {
    pub value: f64,
    pub n_examples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteError {
    pub code: serde_json::Value,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueResponse {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<ValueResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<RemoteError>,
}

impl ValueResponse {
    /// Checks the reply shape and converts it to a game value.
    pub fn into_value(self) -> Result<GameValue, OracleError> {
        match (self.result, self.error) {
            (Some(r), None) => GameValue::accuracy(r.value, r.n_examples),
            (None, Some(e)) => Err(OracleError::Remote {
                code: match e.code {
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                },
                message: e.message,
            }),
            (Some(_), Some(_)) => Err(OracleError::Protocol(format!(
                "reply {} has both result and error",
                self.id
            ))),
            (None, None) => Err(OracleError::Protocol(format!(
                "reply {} has neither result nor error",
                self.id
            ))),
        }
    }
}

/// Where the external evaluator lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// `HOST:PORT`
    Tcp(String),
    /// `exec:PROGRAM ARGS...`, spoken to over the child's stdin and stdout.
    Exec(Vec<String>),
}

impl Endpoint {
    pub fn parse(spec: &str) -> Result<Self, OracleError> {
        if let Some(cmd) = spec.strip_prefix("exec:") {
            let argv: Vec<String> = cmd.split_whitespace().map(str::to_owned).collect();
            if argv.is_empty() {
                return Err(OracleError::Transport(
                    "exec endpoint has no command".into(),
                ));
            }
            return Ok(Self::Exec(argv));
        }
        match spec.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {
                Ok(Self::Tcp(spec.to_owned()))
            }
            _ => Err(OracleError::Transport(format!(
                "endpoint `{spec}` is neither HOST:PORT nor exec:COMMAND"
            ))),
        }
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Tcp(addr) => f.write_str(addr),
            Self::Exec(argv) => write!(f, "exec:{}", argv.join(" ")),
        }
    }
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
    next_id: u64,
    broken: Option<String>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = &mut self.child {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Value oracle backed by an external evaluator.
pub struct ExternalOracle {
    endpoint: Endpoint,
    n_players: usize,
    task: String,
    n_examples: usize,
    pipeline: usize,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle")
            .field("endpoint", &self.endpoint)
            .field("n_players", &self.n_players)
            .field("task", &self.task)
            .finish()
    }
}

impl ExternalOracle {
    /// Opens the transport. `timeout` bounds each TCP read; subprocess
    /// pipes block until the child replies or exits.
    pub fn connect(
        endpoint: Endpoint,
        n_players: usize,
        task: impl Into<String>,
        n_examples: usize,
        timeout: Option<Duration>,
    ) -> Result<Self, OracleError> {
        let conn = match &endpoint {
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr.as_str())
                    .map_err(|e| OracleError::Transport(format!("connect {addr}: {e}")))?;
                stream
                    .set_read_timeout(timeout)
                    .and_then(|_| stream.set_nodelay(true))
                    .map_err(|e| OracleError::Transport(e.to_string()))?;
                let read_half = stream
                    .try_clone()
                    .map_err(|e| OracleError::Transport(e.to_string()))?;
                Connection {
                    reader: Box::new(BufReader::new(read_half)),
                    writer: Box::new(stream),
                    child: None,
                    next_id: 1,
                    broken: None,
                }
            }
            Endpoint::Exec(argv) => {
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| OracleError::Transport(format!("spawn {}: {e}", argv[0])))?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = child.stdout.take().expect("piped stdout");
                Connection {
                    reader: Box::new(BufReader::new(stdout)),
                    writer: Box::new(stdin),
                    child: Some(child),
                    next_id: 1,
                    broken: None,
                }
            }
        };
        Ok(Self {
            endpoint,
            n_players,
            task: task.into(),
            n_examples,
            pipeline: DEFAULT_PIPELINE,
            conn: Mutex::new(conn),
        })
    }

    pub fn with_pipeline(mut self, depth: usize) -> Self {
        self.pipeline = depth.max(1);
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    fn request_chunk(
        conn: &mut Connection,
        lines: &[String],
        ids: &[u64],
    ) -> Result<HashMap<u64, ValueResponse>, OracleError> {
        for line in lines {
            conn.writer
                .write_all(line.as_bytes())
                .map_err(|e| OracleError::Transport(format!("write: {e}")))?;
        }
        conn.writer
            .flush()
            .map_err(|e| OracleError::Transport(format!("flush: {e}")))?;

        let mut replies = HashMap::with_capacity(ids.len());
        let mut buf = String::new();
        while replies.len() < ids.len() {
            buf.clear();
            let n = conn
                .reader
                .read_line(&mut buf)
                .map_err(|e| OracleError::Transport(format!("read: {e}")))?;
            if n == 0 {
                return Err(OracleError::Transport(format!(
                    "evaluator closed the connection with {} replies outstanding",
                    ids.len() - replies.len()
                )));
            }
            if buf.trim().is_empty() {
                continue;
            }
            let reply: ValueResponse = serde_json::from_str(buf.trim_end())
                .map_err(|e| OracleError::Protocol(format!("{e}: {}", buf.trim_end())))?;
            if !ids.contains(&reply.id) {
                return Err(OracleError::Protocol(format!(
                    "reply for unknown id {}",
                    reply.id
                )));
            }
            if replies.contains_key(&reply.id) {
                return Err(OracleError::Protocol(format!(
                    "duplicate reply for id {}",
                    reply.id
                )));
            }
            replies.insert(reply.id, reply);
        }
        Ok(replies)
    }
}

impl ValueOracle for ExternalOracle {
    fn n_players(&self) -> usize {
        self.n_players
    }

    fn fingerprint(&self) -> String {
        format!(
            "external:{}:{}:n_examples={}",
            self.endpoint, self.task, self.n_examples
        )
    }

    fn value(&self, retained: Coalition) -> Result<GameValue, OracleError> {
        self.value_batch(&[retained])
            .pop()
            .expect("one result per request")
    }

    fn value_batch(&self, coalitions: &[Coalition]) -> Vec<Result<GameValue, OracleError>> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut out = Vec::with_capacity(coalitions.len());
        for chunk in coalitions.chunks(self.pipeline) {
            if let Some(reason) = &conn.broken {
                let err = OracleError::Transport(format!("connection unusable: {reason}"));
                out.extend(chunk.iter().map(|_| Err(err.clone())));
                continue;
            }
            let first = conn.next_id;
            conn.next_id += chunk.len() as u64;
            let ids: Vec<u64> = (first..conn.next_id).collect();
            let lines: Vec<String> = chunk
                .iter()
                .zip(&ids)
                .map(|(c, &id)| {
                    let req = ValueRequest {
                        id,
                        method: "value".into(),
                        params: ValueParams {
                            retained: c.players().collect(),
                            task: self.task.clone(),
                            n_examples: self.n_examples,
                        },
                    };
                    let mut line = serde_json::to_string(&req).expect("request serialises");
                    line.push('\n');
                    line
                })
                .collect();
            match Self::request_chunk(&mut conn, &lines, &ids) {
                Ok(mut replies) => {
                    for id in &ids {
                        let reply = replies.remove(id).expect("every id answered");
                        out.push(reply.into_value());
                    }
                }
                Err(e) => {
                    // Unread replies would be matched against later ids.
                    conn.broken = Some(e.to_string());
                    out.extend(chunk.iter().map(|_| Err(e.clone())));
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoint_parsing() {
        assert_eq!(
            Endpoint::parse("127.0.0.1:9000").unwrap(),
            Endpoint::Tcp("127.0.0.1:9000".into())
        );
        assert_eq!(
            Endpoint::parse("exec:python3 serve.py --mock").unwrap(),
            Endpoint::Exec(vec!["python3".into(), "serve.py".into(), "--mock".into()])
        );
        assert!(Endpoint::parse("exec:").is_err());
        assert!(Endpoint::parse("localhost").is_err());
        assert!(Endpoint::parse("localhost:http").is_err());
    }

    #[test]
    fn request_wire_shape() {
        let req = ValueRequest {
            id: 3,
            method: "value".into(),
            params: ValueParams {
                retained: vec![0, 2],
                task: "majority_token".into(),
                n_examples: 10,
            },
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"id":3,"method":"value","params":{"retained":[0,2],"task":"majority_token","n_examples":10}}"#
        );
    }

    #[test]
    fn reply_validation() {
        let ok: ValueResponse =
            serde_json::from_str(r#"{"id":1,"result":{"value":0.5,"n_examples":4}}"#).unwrap();
        assert_eq!(ok.into_value().unwrap().value, 0.5);

        let err: ValueResponse =
            serde_json::from_str(r#"{"id":1,"error":{"code":"task","message":"no such task"}}"#)
                .unwrap();
        assert_eq!(
            err.into_value(),
            Err(OracleError::Remote {
                code: "task".into(),
                message: "no such task".into()
            })
        );

        let both: ValueResponse = serde_json::from_str(
            r#"{"id":1,"result":{"value":0.5,"n_examples":4},"error":{"code":"x"}}"#,
        )
        .unwrap();
        assert!(matches!(both.into_value(), Err(OracleError::Protocol(_))));
        let none: ValueResponse = serde_json::from_str(r#"{"id":1}"#).unwrap();
        assert!(matches!(none.into_value(), Err(OracleError::Protocol(_))));

        let out_of_range: ValueResponse =
            serde_json::from_str(r#"{"id":1,"result":{"value":1.5,"n_examples":4}}"#).unwrap();
        assert!(matches!(
            out_of_range.into_value(),
            Err(OracleError::InvalidValue(_))
        ));
        let no_examples: ValueResponse =
            serde_json::from_str(r#"{"id":1,"result":{"value":0.5,"n_examples":0}}"#).unwrap();
        assert!(matches!(
            no_examples.into_value(),
            Err(OracleError::InvalidValue(_))
        ));
    }
}
