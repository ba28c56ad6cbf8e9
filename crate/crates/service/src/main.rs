use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use positioner_service::{api, build_controller, ServiceConfig};
use tracing::{error, info};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(
    name = "positioner-service",
    version,
    about = "Positioner orchestrator HTTP service"
)]
struct Cli {
    /// TOML configuration file
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .init();

    let cli = Cli::parse();
    let cfg = match ServiceConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            error!("{e}");
            return ExitCode::from(2);
        }
    };
    let ctl = match build_controller(&cfg) {
        Ok(c) => c,
        Err(e) => {
            error!("cannot start controller: {e}");
            return ExitCode::FAILURE;
        }
    };
    let listener = match tokio::net::TcpListener::bind(&cfg.bind).await {
        Ok(l) => l,
        Err(e) => {
            error!("cannot bind {}: {e}", cfg.bind);
            return ExitCode::FAILURE;
        }
    };
    let addr = listener.local_addr().expect("bound socket has an address");
    info!(data_dir = %cfg.data_dir.display(), "service ready");
    println!("listening on http://{addr}");
    let _ = std::io::stdout().flush();

    let app = api::router(ctl.clone(), cfg.ui_dir.clone());
    let served = axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await;
    tokio::task::spawn_blocking(move || ctl.shutdown())
        .await
        .ok();
    match served {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("server error: {e}");
            ExitCode::FAILURE
        }
    }
}
