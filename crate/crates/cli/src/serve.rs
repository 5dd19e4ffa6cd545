use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::Args;
use pointqa::checkpoint;
use pointqa::features::FeatureStore;
use pointqa_service::{AppState, Answerer, ModelAnswerer, StubAnswerer, DEFAULT_MAX_REGIONS};

use crate::io::annotations;
use crate::learn::{InputMeta, CHECKPOINT_FILE};

#[derive(Args)]
pub struct ServeArgs {
    /// Checkpoint to serve; without one a uniform stub answers.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    features: PathBuf,
    #[arg(long)]
    annotations: PathBuf,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "127.0.0.1")]
    host: std::net::IpAddr,
    /// Allowed UI origin; repeat for several. Any origin when omitted.
    #[arg(long = "cors-origin")]
    cors_origins: Vec<String>,
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let store = Arc::new(annotations(&a.annotations)?);
    let features = Arc::new(FeatureStore::open(&a.features).with_context(|| format!("opening {}", a.features.display()))?);
    let answerer: Arc<dyn Answerer> = match &a.checkpoint {
        Some(path) => {
            let file = if path.is_dir() { path.join(CHECKPOINT_FILE) } else { path.clone() };
            let (model, header) = checkpoint::load(&file).with_context(|| format!("loading {}", file.display()))?;
            let max_regions = serde_json::from_value::<InputMeta>(header.metadata["inputs"].clone())
                .map(|m| m.max_regions)
                .unwrap_or(DEFAULT_MAX_REGIONS);
            Arc::new(ModelAnswerer::new(model, Arc::clone(&store), Arc::clone(&features), max_regions))
        }
        None => {
            tracing::warn!("no checkpoint given; answering with a uniform stub");
            Arc::new(StubAnswerer { labels: vec!["no".into(), "yes".into()] })
        }
    };
    let state = AppState { store, known: Some(features), answerer, cors_origins: a.cors_origins };
    let addr = SocketAddr::new(a.host, a.port);
    tokio::runtime::Runtime::new()?.block_on(pointqa_service::serve(state, addr))?;
    Ok(())
}
