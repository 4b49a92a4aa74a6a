//! Session protocol: newline-delimited JSON messages, per-session
//! append-only logs, and replay.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;
use serde_json::{json, Value};

use crate::acquisition::ModelEval;
use crate::config::parse_experiment;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::rng::seed_from_str;
use crate::strategy::{estimate_jnd, estimate_threshold, outcome_from_value, JndDefinition, SessionState};

pub const PROTOCOL_VERSION: u32 = 1;

/// Named stimulus coordinates, one value per parameter.
pub type StimulusConfig = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryType {
    Prediction,
    Threshold,
    Jnd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    Setup {
        version: u32,
        /// INI experiment configuration.
        config: String,
    },
    SetupAck {
        session_id: String,
    },
    Ask,
    Config {
        config: StimulusConfig,
        trial_index: usize,
        is_finished: bool,
    },
    Tell {
        config: StimulusConfig,
        outcome: f64,
    },
    TellAck {
        n_data: usize,
    },
    Query {
        query_type: QueryType,
        #[serde(default)]
        params: Value,
    },
    QueryResponse {
        query_type: QueryType,
        result: Value,
    },
    Resume {
        session_id: String,
    },
    Exit,
    Error {
        message: String,
    },
}

impl WireMessage {
    pub const TYPES: [&'static str; 11] = [
        "setup",
        "setup_ack",
        "ask",
        "config",
        "tell",
        "tell_ack",
        "query",
        "query_response",
        "resume",
        "exit",
        "error",
    ];

    pub fn parse(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }

    /// Canonical single-line encoding.
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("wire messages always serialize")
    }

    fn error(message: impl Into<String>) -> Self {
        WireMessage::Error {
            message: message.into(),
        }
    }
}

/// Human-readable reason for a line that does not decode as a message.
fn decode_failure(line: &str, err: &serde_json::Error) -> String {
    match serde_json::from_str::<Value>(line) {
        Err(_) => format!("malformed JSON: {err}"),
        Ok(Value::Object(m)) => match m.get("type").and_then(Value::as_str) {
            None => "message has no string `type` field".into(),
            Some(t) if !WireMessage::TYPES.contains(&t) => format!("unknown message type `{t}`"),
            Some(t) => format!("invalid `{t}` message: {err}"),
        },
        Ok(_) => "message must be a JSON object".into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    In,
    Out,
}

#[derive(Debug, Deserialize)]
pub struct SessionLogEntry {
    pub timestamp_ms: u64,
    pub direction: Direction,
    /// The message exactly as received or sent. Inbound lines that are not
    /// JSON are stored as a JSON string.
    pub message: Box<RawValue>,
}

impl SessionLogEntry {
    /// The wire text this entry records.
    pub fn wire_text(&self) -> String {
        let raw = self.message.get();
        if raw.starts_with('"') {
            serde_json::from_str::<String>(raw).unwrap_or_else(|_| raw.to_string())
        } else {
            raw.to_string()
        }
    }
}

pub fn parse_log(text: &str) -> Result<Vec<SessionLogEntry>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

pub fn read_log(path: &Path) -> Result<Vec<SessionLogEntry>> {
    parse_log(&std::fs::read_to_string(path)?)
}

enum Sink {
    Null,
    Memory(Vec<String>),
    File(File),
}

/// Append-only JSON-lines log with non-decreasing timestamps.
pub struct SessionLog {
    sink: Sink,
    last_ms: u64,
}

impl SessionLog {
    pub fn null() -> Self {
        SessionLog {
            sink: Sink::Null,
            last_ms: 0,
        }
    }

    pub fn memory() -> Self {
        SessionLog {
            sink: Sink::Memory(Vec::new()),
            last_ms: 0,
        }
    }

    /// Opens `path` for appending, creating it if needed.
    pub fn append_to(path: &Path) -> Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let last_ms = match std::fs::read_to_string(path) {
            Ok(text) => parse_log(&text)?.last().map_or(0, |e| e.timestamp_ms),
            Err(_) => 0,
        };
        Ok(SessionLog {
            sink: Sink::File(file),
            last_ms,
        })
    }

    /// Lines written to a memory log.
    pub fn lines(&self) -> &[String] {
        match &self.sink {
            Sink::Memory(v) => v,
            _ => &[],
        }
    }

    fn append(&mut self, direction: Direction, wire: &str) -> Result<()> {
        if matches!(self.sink, Sink::Null) {
            return Ok(());
        }
        let now = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        self.last_ms = self.last_ms.max(now);
        let message = match serde_json::from_str::<&RawValue>(wire) {
            Ok(raw) => raw.get().to_string(),
            Err(_) => serde_json::to_string(wire)?,
        };
        let dir = match direction {
            Direction::In => "in",
            Direction::Out => "out",
        };
        let line = format!("{{\"timestamp_ms\":{},\"direction\":\"{dir}\",\"message\":{message}}}", self.last_ms);
        match &mut self.sink {
            Sink::Null => {}
            Sink::Memory(v) => v.push(line),
            Sink::File(f) => {
                writeln!(f, "{line}")?;
                f.flush()?;
            }
        }
        Ok(())
    }
}

/// One experiment session behind one connection.
pub struct Session {
    pub id: String,
    state: Option<SessionState>,
    log: SessionLog,
    closed: bool,
    exec: Execution,
}

impl Session {
    pub fn new(id: impl Into<String>, log: SessionLog) -> Self {
        Session {
            id: id.into(),
            state: None,
            log,
            closed: false,
            exec: Execution::Sequential,
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        if let Some(s) = self.state.take() {
            self.state = Some(s.with_execution(exec));
        }
        self
    }

    pub fn state(&self) -> Option<&SessionState> {
        self.state.as_ref()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn log(&self) -> &SessionLog {
        &self.log
    }

    /// Logs the inbound line, handles it, logs the reply and returns it.
    /// `None` when the message needs no reply (exit). Errors are log I/O
    /// failures only; protocol problems become `error` replies.
    pub fn handle_line(&mut self, line: &str) -> Result<Option<String>> {
        let line = line.trim_end_matches(['\r', '\n']);
        self.log.append(Direction::In, line)?;
        let reply = match WireMessage::parse(line) {
            Ok(msg) => self.handle_message(msg),
            Err(Error::Json(e)) => Some(WireMessage::error(decode_failure(line, &e))),
            Err(e) => Some(WireMessage::error(e.to_string())),
        };
        let Some(reply) = reply else {
            return Ok(None);
        };
        let text = reply.to_line();
        self.log.append(Direction::Out, &text)?;
        Ok(Some(text))
    }

    /// Protocol state machine without logging.
    pub fn handle_message(&mut self, msg: WireMessage) -> Option<WireMessage> {
        if self.closed {
            return Some(WireMessage::error("session is closed"));
        }
        let reply = match msg {
            WireMessage::Setup { version, config } => self.setup(version, &config),
            WireMessage::Resume { session_id } => {
                if self.state.is_some() && session_id == self.id {
                    Ok(WireMessage::SetupAck {
                        session_id: self.id.clone(),
                    })
                } else {
                    Err(Error::Protocol(format!("cannot resume `{session_id}` on this connection")))
                }
            }
            WireMessage::Ask => self.ask(),
            WireMessage::Tell { config, outcome } => self.tell(&config, outcome),
            WireMessage::Query { query_type, params } => self.query(query_type, &params),
            WireMessage::Exit => {
                self.closed = true;
                return None;
            }
            other => Err(Error::Protocol(format!(
                "`{}` is a server-to-client message",
                serde_json::to_value(&other).ok().and_then(|v| v["type"].as_str().map(String::from)).unwrap_or_default()
            ))),
        };
        Some(reply.unwrap_or_else(|e| WireMessage::error(e.to_string())))
    }

    fn setup(&mut self, version: u32, config: &str) -> Result<WireMessage> {
        if self.state.is_some() {
            return Err(Error::Protocol("session is already set up".into()));
        }
        if version != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {version}; expected {PROTOCOL_VERSION}")));
        }
        let exp = parse_experiment(config)?;
        let mut strategy = exp.strategy;
        strategy.seed = exp.seed.unwrap_or_else(|| seed_from_str(&self.id));
        self.state = Some(SessionState::new(strategy)?.with_execution(self.exec));
        Ok(WireMessage::SetupAck {
            session_id: self.id.clone(),
        })
    }

    fn ready(&mut self) -> Result<&mut SessionState> {
        self.state
            .as_mut()
            .ok_or_else(|| Error::Protocol("send setup first".into()))
    }

    fn ask(&mut self) -> Result<WireMessage> {
        let state = self.ready()?;
        let names = state.config.domain.names.clone();
        let named = |x: &[f64]| -> StimulusConfig { names.iter().cloned().zip(x.iter().map(|v| vec![*v])).collect() };
        // A repeated ask re-sends the outstanding stimulus.
        if let Some(x) = &state.pending_ask {
            return Ok(WireMessage::Config {
                config: named(x),
                trial_index: state.next_trial_index(),
                is_finished: false,
            });
        }
        if state.is_finished() {
            return Ok(WireMessage::Config {
                config: StimulusConfig::new(),
                trial_index: state.next_trial_index(),
                is_finished: true,
            });
        }
        let trial_index = state.next_trial_index();
        let x = state.next_point()?;
        Ok(WireMessage::Config {
            config: named(&x),
            trial_index,
            is_finished: false,
        })
    }

    fn tell(&mut self, config: &StimulusConfig, outcome: f64) -> Result<WireMessage> {
        let state = self.ready()?;
        let y = outcome_from_value(outcome)?;
        let domain = &state.config.domain;
        if let Some(extra) = config.keys().find(|k| !domain.names.contains(k)) {
            return Err(Error::Protocol(format!("unknown parameter `{extra}` in tell")));
        }
        let x = domain
            .names
            .iter()
            .map(|n| match config.get(n).map(Vec::as_slice) {
                Some([v]) => Ok(*v),
                Some(_) => Err(Error::Protocol(format!("parameter `{n}` needs exactly one value"))),
                None => Err(Error::Protocol(format!("tell is missing parameter `{n}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        state.record_outcome(&x, Some(y))?;
        Ok(WireMessage::TellAck { n_data: state.n_data() })
    }

    fn query(&mut self, query_type: QueryType, params: &Value) -> Result<WireMessage> {
        let state = self.ready()?;
        let domain = state.config.domain.clone();
        let grid_n = match params.get("grid_n") {
            None => 30,
            Some(v) => v
                .as_u64()
                .filter(|n| *n >= 2)
                .ok_or_else(|| Error::Protocol("`grid_n` must be an integer >= 2".into()))? as usize,
        };
        // Parse before fitting so malformed queries fail fast.
        let points = match query_type {
            QueryType::Prediction | QueryType::Jnd => Some(query_points(params, domain.dim())?),
            QueryType::Threshold => None,
        };
        if query_type == QueryType::Jnd && points.as_ref().is_some_and(|p| p.len() != 1) {
            return Err(Error::Protocol("jnd takes exactly one point in `x`".into()));
        }
        let target = match params.get("target") {
            None => state.config.acq.target,
            Some(v) => v
                .as_f64()
                .filter(|t| *t > 0.0 && *t < 1.0)
                .ok_or_else(|| Error::Protocol("`target` must be a number in (0, 1)".into()))?,
        };
        state.refresh_fit()?;
        let model = state.current_model()?;
        let result = match query_type {
            QueryType::Prediction => {
                let pts = points.expect("parsed above");
                for p in &pts {
                    if !domain.contains(p) {
                        return Err(Error::Protocol(format!("point {p:?} is outside the domain")));
                    }
                }
                let q = DMatrix::from_fn(pts.len(), domain.dim(), |r, k| domain.to_unit(&pts[r])[k]);
                let pred = model.predict(&q)?;
                json!({
                    "p_mean": pred.iter().map(|p| p.p_mean).collect::<Vec<_>>(),
                    "p_var": pred.iter().map(|p| p.p_var).collect::<Vec<_>>(),
                    "latent_mean": pred.iter().map(|p| p.latent_mean).collect::<Vec<_>>(),
                    "latent_var": pred.iter().map(|p| p.latent_var).collect::<Vec<_>>(),
                })
            }
            QueryType::Threshold => {
                let curve = estimate_threshold(&model, target, &domain, grid_n)?;
                json!({
                    "target": target,
                    "contexts": curve.contexts,
                    "thresholds": curve.thresholds,
                })
            }
            QueryType::Jnd => {
                let x = &points.expect("parsed above")[0];
                let def = match params.get("definition").and_then(Value::as_str).unwrap_or("derivative") {
                    "derivative" => JndDefinition::Derivative,
                    "step" => JndDefinition::Step,
                    other => return Err(Error::Protocol(format!("unknown jnd definition `{other}`; valid: derivative, step"))),
                };
                json!({ "jnd": estimate_jnd(&model, &domain, x, def, grid_n)? })
            }
        };
        Ok(WireMessage::QueryResponse { query_type, result })
    }

    /// Trials so far as CSV (`trial_index,<names>,outcome,phase,out_of_band`).
    pub fn trials_csv(&self) -> String {
        let Some(state) = &self.state else {
            return String::new();
        };
        let mut s = format!("trial_index,{},outcome,phase,out_of_band\n", state.config.domain.names.join(","));
        for r in &state.records {
            let xs: Vec<String> = r.x.iter().map(|v| crate::benchmark::format_g9(*v)).collect();
            let o = match r.outcome {
                Some(true) => "1",
                Some(false) => "0",
                None => "",
            };
            let phase = match r.phase {
                crate::strategy::Phase::Init => "init",
                crate::strategy::Phase::Adaptive => "adaptive",
            };
            s.push_str(&format!("{},{},{o},{phase},{}\n", r.trial_index, xs.join(","), r.out_of_band as u8));
        }
        s
    }
}

/// `params.x`: one point or a list of points in stimulus units.
fn query_points(params: &Value, dim: usize) -> Result<Vec<Vec<f64>>> {
    let bad = || Error::Protocol(format!("`x` must be a point or list of points with {dim} coordinates"));
    let x = params.get("x").ok_or_else(bad)?;
    let as_point = |v: &Value| -> Option<Vec<f64>> {
        let a = v.as_array()?;
        let p: Option<Vec<f64>> = a.iter().map(Value::as_f64).collect();
        p.filter(|p| p.len() == dim)
    };
    if let Some(p) = as_point(x) {
        return Ok(vec![p]);
    }
    let list = x.as_array().ok_or_else(bad)?;
    let pts: Option<Vec<Vec<f64>>> = list.iter().map(as_point).collect();
    pts.filter(|p| !p.is_empty()).ok_or_else(bad)
}

/// Session id from the first `setup_ack` in a log.
fn logged_session_id(entries: &[SessionLogEntry]) -> Option<String> {
    entries.iter().filter(|e| e.direction == Direction::Out).find_map(|e| {
        match WireMessage::parse(&e.wire_text()) {
            Ok(WireMessage::SetupAck { session_id }) => Some(session_id),
            _ => None,
        }
    })
}

/// Re-feeds every inbound message through a fresh session and checks each
/// outbound message against the log. A truncated log replays its prefix.
pub fn replay_entries(entries: &[SessionLogEntry], fallback_id: &str) -> Result<Session> {
    let id = logged_session_id(entries).unwrap_or_else(|| fallback_id.to_string());
    let mut session = Session::new(id, SessionLog::null());
    let mut expected: Option<(usize, String)> = None;
    for (index, entry) in entries.iter().enumerate() {
        match entry.direction {
            Direction::In => {
                if let Some((at, _)) = expected.take() {
                    return Err(Error::ReplayDivergence {
                        index: at,
                        detail: "logged reply is missing".into(),
                    });
                }
                if let Some(reply) = session.handle_line(&entry.wire_text())? {
                    expected = Some((index, reply));
                }
            }
            Direction::Out => {
                let logged = entry.wire_text();
                match expected.take() {
                    Some((_, reply)) if reply == logged => {}
                    Some((_, reply)) => {
                        return Err(Error::ReplayDivergence {
                            index,
                            detail: format!("expected {logged}, replay produced {reply}"),
                        })
                    }
                    None => {
                        return Err(Error::ReplayDivergence {
                            index,
                            detail: "outbound entry without a triggering inbound message".into(),
                        })
                    }
                }
            }
        }
    }
    Ok(session)
}

pub fn replay(log_path: &Path) -> Result<Session> {
    let stem = log_path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
    replay_entries(&read_log(log_path)?, &stem)
}

/// Reconstructs a session from its log and continues appending to it.
pub fn resume(log_path: &Path) -> Result<Session> {
    let mut session = replay(log_path)?;
    session.log = SessionLog::append_to(log_path)?;
    Ok(session)
}

pub fn session_log_path(data_dir: &Path, session_id: &str) -> PathBuf {
    data_dir.join(format!("{session_id}.jsonl"))
}

/// Reads a log file line by line; convenience for tools streaming large logs.
pub fn log_lines(path: &Path) -> Result<Vec<String>> {
    BufReader::new(File::open(path)?)
        .lines()
        .map(|l| l.map_err(Error::from))
        .collect()
}
