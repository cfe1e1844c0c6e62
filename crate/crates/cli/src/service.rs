//! Startup and shutdown of the running service.

use std::net::SocketAddr;
use std::time::Duration;

use abb_core::SessionState;
use anyhow::Context;
use tokio::net::TcpListener;
use tokio::sync::{broadcast, mpsc, watch};
use tokio::task::JoinHandle;

use crate::config::ServiceConfig;
use crate::coordinator::{Coordinator, Input, Outbound, Snapshots};
use crate::devices::{open_camera, open_display};
use crate::transport::{keyboard_reader, router, serial_port, AppState};

const QUEUE_DEPTH: usize = 1024;
const OUTBOUND_DEPTH: usize = 256;

pub struct Service {
    addr: SocketAddr,
    inputs: mpsc::Sender<Input>,
    outbound: broadcast::Sender<Outbound>,
    snapshots: Snapshots,
    coordinator: JoinHandle<anyhow::Result<SessionState>>,
    finished: watch::Receiver<bool>,
    server: JoinHandle<()>,
    stop: watch::Sender<bool>,
    readers: Vec<JoinHandle<()>>,
}

/// Opens every transport and device, loads the session and starts the
/// coordinator. Errors here are startup errors.
pub async fn start(cfg: ServiceConfig) -> anyhow::Result<Service> {
    let camera = cfg
        .camera
        .as_ref()
        .map(|spec| open_camera(spec, cfg.camera_resolution))
        .transpose()?;
    let sink = cfg.display.as_ref().map(open_display).transpose()?;
    let (outbound, _) = broadcast::channel(OUTBOUND_DEPTH);
    let (coordinator, snapshots) = Coordinator::new(&cfg, camera, sink, outbound.clone())?;

    let listener = TcpListener::bind(cfg.listen)
        .await
        .with_context(|| format!("cannot listen on {}", cfg.listen))?;
    let addr = listener.local_addr()?;

    let (inputs, queue) = mpsc::channel(QUEUE_DEPTH);
    let (stop, stop_rx) = watch::channel(false);
    let (finished_tx, finished) = watch::channel(false);

    let coordinator = tokio::task::spawn_blocking(move || {
        let result = coordinator.run(queue);
        finished_tx.send_replace(true);
        result
    });

    let app = router(AppState {
        inputs: inputs.clone(),
        outbound: outbound.clone(),
        snapshots: snapshots.clone(),
        shutdown: stop_rx.clone(),
    });
    let mut server_stop = stop_rx;
    let server = tokio::spawn(async move {
        let shutdown = async move {
            let _ = server_stop.wait_for(|s| *s).await;
        };
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            tracing::error!("control server failed: {e}");
        }
    });
    tracing::info!(%addr, "control plane listening on ws://{addr}/control");

    let mut readers = Vec::new();
    if let Some(path) = cfg.serial.clone() {
        readers.push(tokio::spawn(serial_port(path, inputs.clone())));
    }
    if cfg.keyboard {
        readers.push(tokio::spawn(keyboard_reader(tokio::io::stdin(), inputs.clone())));
    }

    Ok(Service {
        addr,
        inputs,
        outbound,
        snapshots,
        coordinator,
        finished,
        server,
        stop,
        readers,
    })
}

impl Service {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// A queue handle, equivalent to any other front-end.
    pub fn inputs(&self) -> mpsc::Sender<Input> {
        self.inputs.clone()
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Outbound> {
        self.outbound.subscribe()
    }

    pub fn snapshots(&self) -> &Snapshots {
        &self.snapshots
    }

    /// Resolves once the coordinator has stopped on its own (keyboard `q`).
    pub async fn stopped(&self) {
        let mut finished = self.finished.clone();
        let _ = finished.wait_for(|f| *f).await;
    }

    /// Drains queued inputs, persists the session and closes transports.
    pub async fn shutdown(self) -> anyhow::Result<SessionState> {
        // queued behind everything already sent, so nothing is lost
        let _ = self.inputs.send(Input::Shutdown).await;
        let state = self.coordinator.await.context("coordinator panicked")??;
        self.stop.send_replace(true);
        for reader in &self.readers {
            reader.abort();
        }
        let mut server = self.server;
        if tokio::time::timeout(Duration::from_secs(2), &mut server).await.is_err() {
            server.abort();
        }
        Ok(state)
    }
}

async fn termination_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            tracing::warn!("cannot listen for ctrl-c: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}

/// Runs until a termination signal or a keyboard quit, then shuts down.
pub async fn serve(cfg: ServiceConfig) -> anyhow::Result<()> {
    let service = start(cfg).await?;
    tokio::select! {
        _ = termination_signal() => tracing::info!("shutting down"),
        _ = service.stopped() => {}
    }
    service.shutdown().await?;
    Ok(())
}
