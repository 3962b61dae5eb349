//! Runs the feedback service.
//!
//! Environment:
//! - `FEEDBACK_STORE_DIR`: store root (default `./feedback-store`)
//! - `FEEDBACK_LISTEN_ADDR`: bind address (default `127.0.0.1:8080`)
//! - `FEEDBACK_UI_DIR`: static UI directory (default `<store>/ui` if present)
//! - `RUST_LOG`: log filter

use std::path::PathBuf;
use std::sync::Arc;

use feedback_service::{http, FeedbackService};

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = PathBuf::from(
        std::env::var("FEEDBACK_STORE_DIR").unwrap_or_else(|_| "feedback-store".into()),
    );
    let addr = std::env::var("FEEDBACK_LISTEN_ADDR").unwrap_or_else(|_| "127.0.0.1:8080".into());
    let ui_dir = std::env::var_os("FEEDBACK_UI_DIR")
        .map(PathBuf::from)
        .or_else(|| Some(root.join("ui")).filter(|p| p.is_dir()));

    let svc = {
        let root = root.clone();
        tokio::task::spawn_blocking(move || FeedbackService::open(root)).await??
    };
    log::info!(
        "store {} with {} experiments",
        root.display(),
        svc.experiment_ids().len()
    );
    let app = http::router(Arc::new(svc), ui_dir);
    let listener = tokio::net::TcpListener::bind(&addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
