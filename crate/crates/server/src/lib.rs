//! Session service: runs the control loop on a dedicated thread and exposes
//! it over a WebSocket (live state and operator commands) and HTTP/JSON
//! (episode tools, wire codec, retargeting).

pub mod http;
pub mod runner;

use std::future::Future;
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::JoinHandle as TaskHandle;

use dexmouse_core::session::{CommandMessage, ExitReport, InputScript, SessionConfig, SessionError};

pub use http::{router, App};
pub use runner::{spawn, SessionLink};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("binding {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error("control loop thread panicked")]
    LoopPanicked,
}

/// Serves `app` on `listener` until `shutdown` resolves.
pub async fn serve(listener: TcpListener, app: Arc<App>, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}

/// A session loop plus the HTTP server in front of it.
pub struct Service {
    pub addr: SocketAddr,
    pub app: Arc<App>,
    loop_thread: Option<JoinHandle<Result<ExitReport, SessionError>>>,
    server: TaskHandle<std::io::Result<()>>,
    stop_server: Option<tokio::sync::oneshot::Sender<()>>,
}

impl Service {
    /// Starts the loop (if `config` is given) and the server on `addr`.
    pub async fn start(addr: SocketAddr, config: Option<SessionConfig>, script: InputScript) -> Result<Service, ServiceError> {
        let log_dir = config.as_ref().and_then(|c| c.log_dir.clone());
        let (link, loop_thread) = match config {
            Some(c) => {
                let (link, handle) = runner::spawn(c, script)?;
                (Some(link), Some(handle))
            }
            None => (None, None),
        };
        let app = App::new(link, log_dir);
        let listener = TcpListener::bind(addr).await.map_err(|source| ServiceError::Bind { addr, source })?;
        let addr = listener.local_addr().map_err(|source| ServiceError::Bind { addr, source })?;
        let (stop_server, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(serve(listener, app.clone(), async move {
            let _ = stopped.await;
        }));
        tracing::info!(%addr, "listening");
        Ok(Service { addr, app, loop_thread, server, stop_server: Some(stop_server) })
    }

    /// Resolves when the loop has ended on its own (cycle limit or a stop
    /// command); never resolves for a service without a session.
    pub async fn loop_finished(&self) {
        match self.app.session() {
            Some(link) => {
                let mut rx = link.finished.clone();
                let _ = rx.wait_for(|r| r.is_some()).await;
            }
            None => std::future::pending().await,
        }
    }

    /// Stops the loop if it is still running, then the server. Returns the
    /// loop's exit report.
    pub async fn shutdown(mut self) -> Result<Option<ExitReport>, ServiceError> {
        if let Some(link) = self.app.session() {
            if link.is_running() {
                let _ = link.send(CommandMessage::Stop).await;
            }
        }
        let report = match self.loop_thread.take() {
            Some(h) => {
                let res = tokio::task::spawn_blocking(move || h.join()).await.map_err(|_| ServiceError::LoopPanicked)?;
                Some(res.map_err(|_| ServiceError::LoopPanicked)??)
            }
            None => None,
        };
        if let Some(tx) = self.stop_server.take() {
            let _ = tx.send(());
        }
        let _ = (&mut self.server).await;
        Ok(report)
    }
}
