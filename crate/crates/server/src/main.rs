use std::path::PathBuf;

use clap::Parser;
use psyfield_server::{run_tcp, run_ws, Shared, DEFAULT_PORT, DEFAULT_WS_PORT};
use tokio::net::TcpListener;

#[derive(Parser)]
#[command(name = "server", about = "Adaptive psychophysics session server")]
struct Cli {
    /// Newline-delimited JSON over TCP.
    #[arg(long, default_value_t = DEFAULT_PORT)]
    port: u16,
    /// WebSocket endpoint (path /ws).
    #[arg(long, default_value_t = DEFAULT_WS_PORT)]
    ws_port: u16,
    /// Session logs and CSV exports.
    #[arg(long, default_value = "data")]
    data_dir: PathBuf,
    #[arg(long, default_value = "info")]
    log_level: String,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log_level).init();
    let shared = Shared::new(cli.data_dir.clone())?;
    let tcp = TcpListener::bind(("0.0.0.0", cli.port)).await?;
    let ws = TcpListener::bind(("0.0.0.0", cli.ws_port)).await?;
    log::info!(
        "listening on tcp {} and ws {} (data in {})",
        tcp.local_addr()?,
        ws.local_addr()?,
        cli.data_dir.display()
    );
    tokio::select! {
        r = run_tcp(tcp, shared.clone()) => r,
        r = run_ws(ws, shared) => r,
    }
}
