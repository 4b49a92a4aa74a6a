//! Experiment session server. Each connection owns one session; messages
//! are single-line JSON over TCP or one JSON text frame per WebSocket
//! message on `/ws`.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use futures_util::{SinkExt, StreamExt};
use psyfield::protocol::{resume, session_log_path, Session, SessionLog, WireMessage};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::handshake::server::{ErrorResponse, Request, Response};
use tokio_tungstenite::tungstenite::http::StatusCode;
use tokio_tungstenite::tungstenite::Message;

pub const DEFAULT_PORT: u16 = 5555;
pub const DEFAULT_WS_PORT: u16 = 5556;
pub const WS_PATH: &str = "/ws";

/// State shared by all connections.
pub struct Shared {
    pub data_dir: PathBuf,
    live: Mutex<HashSet<String>>,
}

impl Shared {
    pub fn new(data_dir: PathBuf) -> std::io::Result<Arc<Self>> {
        std::fs::create_dir_all(&data_dir)?;
        Ok(Arc::new(Shared {
            data_dir,
            live: Mutex::new(HashSet::new()),
        }))
    }

    fn claim(&self, id: &str) -> bool {
        self.live.lock().expect("live set").insert(id.to_string())
    }

    fn release(&self, id: &str) {
        self.live.lock().expect("live set").remove(id);
    }
}

/// Per-connection protocol driver, independent of the transport.
pub struct Connection {
    shared: Arc<Shared>,
    session: Option<Session>,
}

fn error_line(message: String) -> String {
    WireMessage::Error { message }.to_line()
}

impl Connection {
    pub fn new(shared: Arc<Shared>) -> Self {
        Connection { shared, session: None }
    }

    pub fn is_closed(&self) -> bool {
        self.session.as_ref().is_some_and(Session::is_closed)
    }

    /// Handles one inbound line; the session runs on the blocking pool so a
    /// long fit never stalls other connections.
    pub async fn handle(&mut self, line: String) -> Option<String> {
        if line.trim().is_empty() {
            return None;
        }
        if self.session.is_none() {
            match self.open(&line) {
                Ok(s) => self.session = Some(s),
                Err(reply) => return Some(reply),
            }
        }
        let mut session = self.session.take().expect("opened above");
        let (session, reply) = tokio::task::spawn_blocking(move || {
            let reply = session.handle_line(&line);
            (session, reply)
        })
        .await
        .expect("session task panicked");
        if session.is_closed() {
            self.finish(&session);
        }
        self.session = Some(session);
        match reply {
            Ok(r) => r,
            Err(e) => {
                log::error!("session log write failed: {e}");
                Some(error_line(format!("log write failed: {e}")))
            }
        }
    }

    /// First message of a connection: a resume attaches to an existing log,
    /// anything else starts a fresh session.
    fn open(&self, line: &str) -> Result<Session, String> {
        if let Ok(WireMessage::Resume { session_id }) = WireMessage::parse(line) {
            let valid = !session_id.is_empty() && session_id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
            let path = session_log_path(&self.shared.data_dir, &session_id);
            if !valid || !path.exists() {
                return Err(error_line(format!("unknown session `{session_id}`")));
            }
            if !self.shared.claim(&session_id) {
                return Err(error_line(format!("session `{session_id}` is active on another connection")));
            }
            return resume(&path).map_err(|e| {
                self.shared.release(&session_id);
                error_line(format!("cannot resume `{session_id}`: {e}"))
            });
        }
        let id = uuid::Uuid::new_v4().to_string();
        self.shared.claim(&id);
        let log = SessionLog::append_to(&session_log_path(&self.shared.data_dir, &id)).map_err(|e| {
            self.shared.release(&id);
            error_line(format!("cannot open session log: {e}"))
        })?;
        Ok(Session::new(id, log))
    }

    fn finish(&self, session: &Session) {
        if session.state().is_some() {
            let path = self.shared.data_dir.join(format!("{}.csv", session.id));
            if let Err(e) = std::fs::write(&path, session.trials_csv()) {
                log::warn!("could not export {}: {e}", path.display());
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(s) = &self.session {
            self.shared.release(&s.id);
        }
    }
}

pub async fn serve_tcp_connection(stream: TcpStream, shared: Arc<Shared>) -> std::io::Result<()> {
    let (read, mut write) = stream.into_split();
    let mut lines = BufReader::new(read).lines();
    let mut conn = Connection::new(shared);
    while let Some(line) = lines.next_line().await? {
        if let Some(reply) = conn.handle(line).await {
            write.write_all(reply.as_bytes()).await?;
            write.write_all(b"\n").await?;
            write.flush().await?;
        }
        if conn.is_closed() {
            break;
        }
    }
    Ok(())
}

pub async fn serve_ws_connection(stream: TcpStream, shared: Arc<Shared>) -> Result<(), tokio_tungstenite::tungstenite::Error> {
    let check_path = |req: &Request, resp: Response| -> Result<Response, ErrorResponse> {
        if req.uri().path() == WS_PATH {
            Ok(resp)
        } else {
            let mut err = ErrorResponse::new(Some(format!("websocket endpoint is {WS_PATH}")));
            *err.status_mut() = StatusCode::NOT_FOUND;
            Err(err)
        }
    };
    let mut ws = tokio_tungstenite::accept_hdr_async(stream, check_path).await?;
    let mut conn = Connection::new(shared);
    while let Some(msg) = ws.next().await {
        let text = match msg? {
            Message::Text(t) => t.to_string(),
            Message::Binary(b) => match String::from_utf8(b.to_vec()) {
                Ok(s) => s,
                Err(_) => {
                    ws.send(Message::text(error_line("binary frame is not UTF-8".into()))).await?;
                    continue;
                }
            },
            Message::Close(_) => break,
            _ => continue,
        };
        if let Some(reply) = conn.handle(text).await {
            ws.send(Message::text(reply)).await?;
        }
        if conn.is_closed() {
            ws.close(None).await?;
            break;
        }
    }
    Ok(())
}

pub async fn run_tcp(listener: TcpListener, shared: Arc<Shared>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let shared = shared.clone();
        tokio::spawn(async move {
            log::info!("tcp connection from {peer}");
            if let Err(e) = serve_tcp_connection(stream, shared).await {
                log::warn!("tcp connection {peer} ended: {e}");
            }
        });
    }
}

pub async fn run_ws(listener: TcpListener, shared: Arc<Shared>) -> std::io::Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let shared = shared.clone();
        tokio::spawn(async move {
            log::info!("websocket connection from {peer}");
            if let Err(e) = serve_ws_connection(stream, shared).await {
                log::warn!("websocket connection {peer} ended: {e}");
            }
        });
    }
}
