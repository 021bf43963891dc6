use std::collections::VecDeque;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use splatseg::association::InstanceTable;
use splatseg::codebook::TwoLevelCodebook;
use splatseg::io::Bundle;
use splatseg::query::Embedding;
use splatseg::scene::{Camera, Scene};
use splatseg::Feature;
use tokio::sync::Mutex;

pub const UNDO_DEPTH: usize = 16;

/// One consistent world. Readers clone the `Arc`s and never see a
/// half-applied edit.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub scene: Arc<Scene>,
    pub table: Arc<InstanceTable>,
    /// Training products, dropped once an edit changes the point set.
    pub trained: Option<Arc<(Vec<Feature>, TwoLevelCodebook)>>,
}

pub struct AppState {
    current: RwLock<Snapshot>,
    /// Held for a whole edit, which makes edits one-at-a-time.
    undo: Mutex<VecDeque<Snapshot>>,
    cameras: RwLock<Vec<Camera>>,
    bundle_cameras: usize,
    pub embeddings: Vec<Embedding>,
    pub save_path: Option<PathBuf>,
}

impl AppState {
    /// Session over a loaded bundle. Without a table every point is unowned.
    pub fn new(bundle: Bundle, embeddings: Vec<Embedding>, save_path: Option<PathBuf>) -> Self {
        let trained = match (bundle.features, bundle.codebook) {
            (Some(f), Some(c)) => Some(Arc::new((f, c))),
            _ => None,
        };
        let bundle_cameras = bundle.cameras.len();
        Self {
            current: RwLock::new(Snapshot {
                scene: Arc::new(bundle.scene),
                table: Arc::new(bundle.table.unwrap_or_default()),
                trained,
            }),
            undo: Mutex::new(VecDeque::new()),
            cameras: RwLock::new(bundle.cameras),
            bundle_cameras,
            embeddings,
            save_path,
        }
    }

    pub fn snapshot(&self) -> Snapshot {
        self.current.read().expect("snapshot lock").clone()
    }

    pub fn cameras(&self) -> Vec<Camera> {
        self.cameras.read().expect("camera lock").clone()
    }

    pub fn camera(&self, id: usize) -> Option<Camera> {
        self.cameras.read().expect("camera lock").get(id).cloned()
    }

    pub fn bundle_cameras(&self) -> usize {
        self.bundle_cameras
    }

    /// Registers a session camera and returns its id.
    pub fn add_camera(&self, cam: Camera) -> usize {
        let mut cams = self.cameras.write().expect("camera lock");
        cams.push(cam);
        cams.len() - 1
    }

    /// Runs `edit` on the current world under the writer turn, pushing the
    /// old world on the undo stack when it succeeds.
    pub async fn apply<E>(&self, edit: impl FnOnce(&Snapshot) -> Result<Snapshot, E>) -> Result<(Snapshot, usize), E> {
        let mut undo = self.undo.lock().await;
        let old = self.snapshot();
        let new = edit(&old)?;
        *self.current.write().expect("snapshot lock") = new.clone();
        undo.push_back(old);
        if undo.len() > UNDO_DEPTH {
            undo.pop_front();
        }
        Ok((new, undo.len()))
    }

    /// Restores the previous world; `None` when there is nothing to undo.
    pub async fn undo(&self) -> Option<(Snapshot, usize)> {
        let mut undo = self.undo.lock().await;
        let prev = undo.pop_back()?;
        *self.current.write().expect("snapshot lock") = prev.clone();
        Some((prev, undo.len()))
    }

    pub async fn undo_depth(&self) -> usize {
        self.undo.lock().await.len()
    }

    /// Bundle of the current world and the bundle's own cameras.
    pub fn bundle(&self) -> Bundle {
        let snap = self.snapshot();
        let cameras = self.cameras()[..self.bundle_cameras].to_vec();
        let (features, codebook) = match snap.trained.as_deref() {
            Some((f, c)) => (Some(f.clone()), Some(c.clone())),
            None => (None, None),
        };
        Bundle {
            scene: (*snap.scene).clone(),
            cameras,
            features,
            codebook,
            table: Some((*snap.table).clone()),
        }
    }
}
