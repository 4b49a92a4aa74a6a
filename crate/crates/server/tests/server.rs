use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;

use futures_util::{SinkExt, StreamExt};
use psyfield_server::{run_tcp, run_ws, Shared};
use serde_json::{json, Value};
use tokio::io::{AsyncBufReadExt, AsyncWriteExt, BufReader, Lines};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio_tungstenite::tungstenite::Message;

const INI: &str = "[common]\nparnames = [context, intensity]\nlb = [-1, -1]\nub = [1, 1]\n\n[init_strat]\nn_trials = 3\n\n[opt_strat]\nn_trials = 2\nmodel = RBF\nacqf = BALD\nseed = 3\n";

async fn start(data: &Path) -> (SocketAddr, SocketAddr) {
    let shared: Arc<Shared> = Shared::new(data.to_path_buf()).unwrap();
    let tcp = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let ws = TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addrs = (tcp.local_addr().unwrap(), ws.local_addr().unwrap());
    tokio::spawn(run_tcp(tcp, shared.clone()));
    tokio::spawn(run_ws(ws, shared));
    addrs
}

struct Client {
    lines: Lines<BufReader<OwnedReadHalf>>,
    write: OwnedWriteHalf,
}

impl Client {
    async fn connect(addr: SocketAddr) -> Self {
        let (r, w) = TcpStream::connect(addr).await.unwrap().into_split();
        Client {
            lines: BufReader::new(r).lines(),
            write: w,
        }
    }

    async fn send_raw(&mut self, line: &str) -> Option<Value> {
        self.write.write_all(format!("{line}\n").as_bytes()).await.unwrap();
        self.lines
            .next_line()
            .await
            .unwrap()
            .map(|l| serde_json::from_str(&l).unwrap())
    }

    async fn send(&mut self, msg: Value) -> Value {
        self.send_raw(&msg.to_string()).await.expect("reply")
    }
}

fn setup() -> Value {
    json!({"type": "setup", "version": 1, "config": INI})
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn tcp_session_runs_to_completion() {
    let dir = tempfile::tempdir().unwrap();
    let (tcp, _) = start(dir.path()).await;
    let mut c = Client::connect(tcp).await;

    let err = c.send(json!({"type": "ask"})).await;
    assert_eq!(err["type"], "error");
    let ack = c.send(setup()).await;
    assert_eq!(ack["type"], "setup_ack");
    let id = ack["session_id"].as_str().unwrap().to_string();

    let q = c.send(json!({"type": "query", "query_type": "prediction", "params": {"x": [0.0, 0.0]}})).await;
    assert!((q["result"]["p_mean"][0].as_f64().unwrap() - 0.5).abs() <= 1e-9);

    let unknown = c.send(json!({"type": "teleport"})).await;
    assert_eq!(unknown["type"], "error");
    let garbage = c.send_raw("{{{").await.unwrap();
    assert_eq!(garbage["type"], "error");

    for t in 0..5 {
        let cfg = c.send(json!({"type": "ask"})).await;
        assert_eq!(cfg["type"], "config");
        assert_eq!(cfg["trial_index"], t);
        assert_eq!(cfg["is_finished"], false);
        let y = if cfg["config"]["intensity"][0].as_f64().unwrap() > 0.0 { 1 } else { 0 };
        let ack = c.send(json!({"type": "tell", "config": cfg["config"], "outcome": y})).await;
        assert_eq!(ack, json!({"type": "tell_ack", "n_data": t + 1}));
    }
    let done = c.send(json!({"type": "ask"})).await;
    assert_eq!(done["is_finished"], true);
    let th = c.send(json!({"type": "query", "query_type": "threshold", "params": {"grid_n": 5}})).await;
    assert_eq!(th["result"]["thresholds"].as_array().unwrap().len(), 5);

    assert!(c.send_raw(r#"{"type":"exit"}"#).await.is_none());
    let log = std::fs::read_to_string(dir.path().join(format!("{id}.jsonl"))).unwrap();
    // Every reply is in the log: 2 lines per exchange, exit has no reply.
    assert_eq!(log.lines().count(), 2 * 17 + 1);
    let csv = std::fs::read_to_string(dir.path().join(format!("{id}.csv"))).unwrap();
    assert_eq!(csv.lines().count(), 6);
    psyfield::protocol::replay(&dir.path().join(format!("{id}.jsonl"))).unwrap();
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn resume_after_disconnect() {
    let dir = tempfile::tempdir().unwrap();
    let (tcp, _) = start(dir.path()).await;
    let id;
    let pending;
    {
        let mut c = Client::connect(tcp).await;
        id = c.send(setup()).await["session_id"].as_str().unwrap().to_string();
        let cfg = c.send(json!({"type": "ask"})).await;
        c.send(json!({"type": "tell", "config": cfg["config"], "outcome": 1})).await;
        pending = c.send(json!({"type": "ask"})).await;
    }
    // The server notices the disconnect asynchronously.
    let mut c = Client::connect(tcp).await;
    let mut ack = Value::Null;
    for _ in 0..50 {
        ack = c.send(json!({"type": "resume", "session_id": id})).await;
        if ack["type"] == "setup_ack" {
            break;
        }
        tokio::time::sleep(std::time::Duration::from_millis(20)).await;
        c = Client::connect(tcp).await;
    }
    assert_eq!(ack, json!({"type": "setup_ack", "session_id": id}));
    let again = c.send(json!({"type": "ask"})).await;
    assert_eq!(again, pending);
    assert_eq!(again["trial_index"], 1);

    let mut other = Client::connect(tcp).await;
    let busy = other.send(json!({"type": "resume", "session_id": id})).await;
    assert_eq!(busy["type"], "error");
    let missing = other.send(json!({"type": "resume", "session_id": "no-such-session"})).await;
    assert_eq!(missing["type"], "error");
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_sessions_are_independent() {
    let dir = tempfile::tempdir().unwrap();
    let (tcp, _) = start(dir.path()).await;
    let mut a = Client::connect(tcp).await;
    let mut b = Client::connect(tcp).await;
    let ia = a.send(setup()).await["session_id"].clone();
    let ib = b.send(setup()).await["session_id"].clone();
    assert_ne!(ia, ib);
    // Same seed and answers give the same stimuli in both sessions.
    for _ in 0..4 {
        let ca = a.send(json!({"type": "ask"})).await;
        let cb = b.send(json!({"type": "ask"})).await;
        assert_eq!(ca, cb);
        a.send(json!({"type": "tell", "config": ca["config"], "outcome": 1})).await;
        b.send(json!({"type": "tell", "config": cb["config"], "outcome": 1})).await;
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn websocket_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ws_addr) = start(dir.path()).await;
    assert!(tokio_tungstenite::connect_async(format!("ws://{ws_addr}/other")).await.is_err());

    let (mut ws, _) = tokio_tungstenite::connect_async(format!("ws://{ws_addr}/ws")).await.unwrap();
    let mut call = async |v: Value| -> Value {
        ws.send(Message::text(v.to_string())).await.unwrap();
        loop {
            match ws.next().await.unwrap().unwrap() {
                Message::Text(t) => return serde_json::from_str(t.as_str()).unwrap(),
                _ => continue,
            }
        }
    };
    assert_eq!(call(setup()).await["type"], "setup_ack");
    let q = call(json!({"type": "query", "query_type": "prediction", "params": {"x": [[0.5, 0.5]]}})).await;
    assert!((q["result"]["p_mean"][0].as_f64().unwrap() - 0.5).abs() <= 1e-9);
    let cfg = call(json!({"type": "ask"})).await;
    assert_eq!(cfg["trial_index"], 0);
    let ack = call(json!({"type": "tell", "config": cfg["config"], "outcome": 0})).await;
    assert_eq!(ack["n_data"], 1);
    assert_eq!(call(json!({"type": "nope"})).await["type"], "error");
}
