//! HTTP service for the rater study.
//!
//! Raters fetch tasks in a per-rater seeded order, look at the 380x380
//! un-resized crops, and post one condition vector per crop. Every
//! submission is appended to a JSON Lines log; the latest record per
//! (rater, crop) is the current one.

mod api;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use toothlabel::crops::CropRef;
use toothlabel::labeling::ConditionVocabulary;
use toothlabel::study::{ExpertImageDataset, RaterGroup, StudyError};

pub use api::router;
pub use store::{AnnotationStore, LogEntry};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("vocabulary is empty; refusing to start")]
    EmptyVocabulary,
    #[error("expert dataset has no items")]
    EmptyDataset,
    #[error("unknown rater {0:?}")]
    UnknownRater(String),
    #[error("unknown crop {0:?}")]
    UnknownCrop(String),
    #[error("labels have length {found}, expected {expected}")]
    BadVectorLength { expected: usize, found: usize },
    #[error(transparent)]
    Study(#[from] StudyError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl ServiceError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ServiceError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RaterToken {
    pub id: String,
    pub group: RaterGroup,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub bind: String,
    /// Expert set produced by `sample-expert-set`.
    pub dataset: PathBuf,
    /// Condition vocabulary JSON; the built-in dental vocabulary when absent.
    #[serde(default)]
    pub vocabulary: Option<PathBuf>,
    /// Directory of un-resized crops, `{crop_id}.png`.
    pub crops_dir: PathBuf,
    pub log: PathBuf,
    pub raters: Vec<RaterToken>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub static_dir: Option<PathBuf>,
    #[serde(default)]
    pub cors_origin: Option<String>,
}

/// A rater's fixed presentation order over the dataset items.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub rater: RaterToken,
    pub order: Vec<usize>,
}

/// Permutation of `0..n` derived from the study seed and the rater id.
pub fn session_order(seed: u64, rater_id: &str, n: usize) -> Vec<usize> {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(rater_id.as_bytes())
        .finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(bytes);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub struct AppState {
    pub vocabulary: ConditionVocabulary,
    pub items: Vec<CropRef>,
    item_index: BTreeMap<String, usize>,
    pub sessions: BTreeMap<String, Session>,
    pub crops_dir: PathBuf,
    pub store: AnnotationStore,
}

impl AppState {
    pub fn new(
        vocabulary: ConditionVocabulary,
        dataset: &ExpertImageDataset,
        raters: &[RaterToken],
        seed: u64,
        crops_dir: PathBuf,
        store: AnnotationStore,
    ) -> Result<Self, ServiceError> {
        if vocabulary.is_empty() {
            return Err(ServiceError::EmptyVocabulary);
        }
        let mut seen = BTreeSet::new();
        let items: Vec<CropRef> = dataset
            .crops()
            .into_iter()
            .filter(|c| seen.insert(c.clone()))
            .collect();
        if items.is_empty() {
            return Err(ServiceError::EmptyDataset);
        }
        let item_index = items
            .iter()
            .enumerate()
            .map(|(i, c)| (c.crop_id(), i))
            .collect();
        let mut sessions = BTreeMap::new();
        for r in raters {
            let session = Session {
                rater: r.clone(),
                order: session_order(seed, &r.id, items.len()),
            };
            if sessions.insert(r.id.clone(), session).is_some() {
                return Err(ServiceError::Config(format!(
                    "rater {:?} listed twice",
                    r.id
                )));
            }
        }
        Ok(AppState {
            vocabulary,
            items,
            item_index,
            sessions,
            crops_dir,
            store,
        })
    }

    pub fn from_config(config: &ServiceConfig) -> Result<Self, ServiceError> {
        let read = |p: &Path| std::fs::read_to_string(p).map_err(|e| ServiceError::io(p, e));
        let vocabulary = match &config.vocabulary {
            Some(p) => serde_json::from_str(&read(p)?)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", p.display())))?,
            None => ConditionVocabulary::dental_default(),
        };
        let dataset: ExpertImageDataset = serde_json::from_str(&read(&config.dataset)?)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", config.dataset.display())))?;
        let store = AnnotationStore::open(&config.log, vocabulary.len())?;
        Self::new(
            vocabulary,
            &dataset,
            &config.raters,
            config.seed,
            config.crops_dir.clone(),
            store,
        )
    }

    pub fn item(&self, crop_id: &str) -> Option<&CropRef> {
        self.item_index.get(crop_id).map(|&i| &self.items[i])
    }
}

/// Binds `config.bind` and serves until the process is stopped.
pub async fn serve(config: ServiceConfig) -> Result<(), ServiceError> {
    let state = Arc::new(AppState::from_config(&config)?);
    let app = router(
        state,
        config.static_dir.as_deref(),
        config.cors_origin.as_deref(),
    )?;
    let listener = tokio::net::TcpListener::bind(&config.bind)
        .await
        .map_err(|e| ServiceError::Config(format!("cannot bind {}: {e}", config.bind)))?;
    log::info!("listening on {}", config.bind);
    axum::serve(listener, app)
        .await
        .map_err(|e| ServiceError::Config(format!("server stopped: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_order_is_a_seeded_permutation() {
        let a = session_order(3, "r1", 78);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..78).collect::<Vec<_>>());
        assert_eq!(a, session_order(3, "r1", 78));
        assert_ne!(a, session_order(3, "r2", 78));
        assert_ne!(a, session_order(4, "r1", 78));
    }
}
