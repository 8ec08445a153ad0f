#![allow(dead_code)]

use std::path::Path;
use std::sync::Arc;

use slide_agent_core::backends::{ScriptRule, ScriptedChat, ScriptedEmbedder};
use slide_agent_core::config::AppConfig;
use slide_agent_core::orchestrator::Backends;
use slide_agent_core::runtime::Runtime;
use slide_agent_core::slide_store::SlideLibrary;
use slide_agent_core::testkit::SyntheticBundle;
use slide_agent_service::api;
use slide_agent_service::manager::SessionManager;

pub const CORRECTED: &str = "corrected: frequent mitoses with marked pleomorphism";

/// Writes two bundles under `{dir}/slides`.
pub fn write_slides(dir: &Path) -> std::path::PathBuf {
    let slides = dir.join("slides");
    SyntheticBundle::new("s1", 6, 6).with_levels(&[5, 10]).tile_px(4).write(&slides.join("s1")).unwrap();
    SyntheticBundle::new("s2", 3, 2).tile_px(4).write(&slides.join("s2")).unwrap();
    slides
}

pub fn backends(executor: Vec<ScriptRule>) -> Backends {
    Backends {
        embedder: Arc::new(ScriptedEmbedder::hashed(8)),
        perceptor: Arc::new(ScriptedChat::new(vec![ScriptRule::fallback("tile {image} shows glands")])),
        executor: Arc::new(ScriptedChat::new(executor)),
    }
}

pub fn manager(dir: &Path, executor: Vec<ScriptRule>, max_sessions: usize) -> Arc<SessionManager> {
    let slides = write_slides(dir);
    let config = AppConfig {
        session_dir: dir.join("sessions"),
        max_sessions,
        ..AppConfig::default()
    };
    let rt = Arc::new(Runtime::new(config, SlideLibrary::scan(slides).unwrap(), backends(executor)));
    Arc::new(SessionManager::open(rt, dir.join("sessions"), max_sessions).unwrap())
}

/// Serves `mgr` on an ephemeral port and returns the base URL.
pub async fn serve(mgr: Arc<SessionManager>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, api::router(mgr)).await.unwrap();
    });
    format!("http://{addr}")
}
