//! Startup, serving and shutdown.

use std::future::Future;
use std::net::SocketAddr;

use advqa_core::adversary::AdversaryRegistry;
use advqa_core::engine::{Engine, EngineError};
use advqa_core::eventlog::{read_log, EventLogError, EventLogWriter};
use thiserror::Error;
use tokio::net::TcpListener;

use crate::api::{router, AppState};
use crate::config::{ConfigError, PlatformConfig};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
    #[error("event log is corrupt at seq {seq}: {reason}")]
    CorruptEventLog { seq: u64, reason: String },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Engine(EngineError),
    #[error(transparent)]
    Log(EventLogError),
}

impl From<EventLogError> for ServeError {
    fn from(e: EventLogError) -> Self {
        match e {
            EventLogError::Corrupt { seq, reason } => ServeError::CorruptEventLog { seq, reason },
            other => ServeError::Log(other),
        }
    }
}

impl From<EngineError> for ServeError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::InconsistentLog { seq, reason } => ServeError::CorruptEventLog { seq, reason },
            EngineError::Log(l) => l.into(),
            other => ServeError::Engine(other),
        }
    }
}

/// Rebuilds the engine from the data directory's log and keeps appending to it.
pub fn open_engine(config: &PlatformConfig, registry: AdversaryRegistry) -> Result<Engine, ServeError> {
    std::fs::create_dir_all(&config.data_dir)?;
    let path = config.event_log_path();
    let records = read_log(&path)?;
    let replayed = records.len();
    let engine = Engine::replay(config.engine_config(), registry, records)?;
    log::info!("replayed {replayed} events from {}", path.display());
    Ok(engine.with_sink(EventLogWriter::open(&path)?))
}

pub fn app_state(config: &PlatformConfig) -> Result<AppState, ServeError> {
    config.validate()?;
    let engine = open_engine(config, config.registry()?)?;
    Ok(AppState::new(engine, config))
}

pub async fn bind(addr: SocketAddr) -> Result<TcpListener, ServeError> {
    TcpListener::bind(addr)
        .await
        .map_err(|source| ServeError::BindFailure { addr, source })
}

/// Serves until `shutdown` resolves, then flushes the event log.
pub async fn run(listener: TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServeError> {
    let app = router(state.clone());
    axum::serve(listener, app).with_graceful_shutdown(shutdown).await?;
    state.engine().write(|e| e.flush())?;
    log::info!("event log flushed, shutting down");
    Ok(())
}

pub async fn serve(config: PlatformConfig, shutdown: impl Future<Output = ()> + Send + 'static) -> Result<(), ServeError> {
    let state = app_state(&config)?;
    let listener = bind(config.listen).await?;
    log::info!("listening on {}", listener.local_addr()?);
    run(listener, state, shutdown).await
}

/// Resolves on Ctrl-C or, on Unix, SIGTERM.
pub async fn shutdown_signal() {
    let ctrl_c = async {
        if let Err(e) = tokio::signal::ctrl_c().await {
            log::error!("cannot listen for Ctrl-C: {e}");
            std::future::pending::<()>().await;
        }
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(e) => {
                log::error!("cannot listen for SIGTERM: {e}");
                std::future::pending::<()>().await;
            }
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn config(dir: PathBuf) -> PlatformConfig {
        let mut c = PlatformConfig::from_toml("[[adversaries]]\nid = \"stub\"\nkind = \"stub\"\n", std::path::Path::new("t")).unwrap();
        c.data_dir = dir;
        c
    }

    #[test]
    fn truncated_log_is_reported_with_its_seq() {
        let dir = tempfile::tempdir().unwrap();
        let c = config(dir.path().to_owned());
        {
            let state = app_state(&c).unwrap();
            state
                .engine()
                .write(|e| {
                    e.register_worker(
                        "w1",
                        advqa_core::engine::Eligibility {
                            approval_rate: 0.99,
                            lifetime_hits: 5000,
                            country: "US".into(),
                        },
                    )
                    .map(|_| ())
                })
                .unwrap();
            state.engine().write(|e| e.flush()).unwrap();
        }
        let log = std::fs::read_to_string(c.event_log_path()).unwrap();
        assert!(!log.is_empty());
        std::fs::write(c.event_log_path(), &log[..log.len() / 2]).unwrap();
        match app_state(&c) {
            Err(ServeError::CorruptEventLog { seq, .. }) => assert_eq!(seq, 1),
            other => panic!("expected CorruptEventLog, got {:?}", other.err()),
        }
    }

    #[tokio::test]
    async fn second_bind_fails() {
        let first = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
        let addr = first.local_addr().unwrap();
        match bind(addr).await {
            Err(ServeError::BindFailure { addr: a, .. }) => assert_eq!(a, addr),
            other => panic!("expected BindFailure, got {:?}", other.err()),
        }
    }

    #[tokio::test]
    async fn graceful_shutdown_returns() {
        let dir = tempfile::tempdir().unwrap();
        let state = app_state(&config(dir.path().to_owned())).unwrap();
        let listener = bind("127.0.0.1:0".parse().unwrap()).await.unwrap();
        run(listener, state, async {}).await.unwrap();
    }
}
