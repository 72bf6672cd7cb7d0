use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock as StdRwLock};

use futures::Stream;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tokio::sync::{broadcast, RwLock};

use adaptrial_core::event::now_ms;
use adaptrial_core::sim::replication_seed;
use adaptrial_core::store::Snapshot;
use adaptrial_core::{Error, EventRecord, EventStore, ExperimentConfig, ExperimentState, FileStore};

use crate::error::ApiError;

const FEED_CAPACITY: usize = 1024;

/// Mutable side of one experiment. Guarded by the experiment's lock.
pub struct Live {
    pub state: ExperimentState,
    pub rng: ChaCha8Rng,
}

pub struct Experiment {
    pub id: String,
    pub live: RwLock<Live>,
    feed: broadcast::Sender<EventRecord>,
}

/// Shared service state.
pub struct App {
    store: Arc<dyn EventStore>,
    files: Option<Arc<FileStore>>,
    experiments: StdRwLock<HashMap<String, Arc<Experiment>>>,
    pub(crate) token: Option<String>,
    seed: Option<u64>,
    ordinal: AtomicU64,
}

impl App {
    /// In-memory service, for tests and throwaway runs.
    pub fn in_memory(token: Option<String>, seed: Option<u64>) -> Arc<Self> {
        Self::build(Arc::new(adaptrial_core::MemoryStore::new()), None, token, seed)
    }

    /// Service over a file store; replays every stored experiment.
    pub fn with_file_store(store: FileStore, token: Option<String>, seed: Option<u64>) -> Result<Arc<Self>, Error> {
        let files = Arc::new(store);
        let app = Self::build(files.clone(), Some(files), token, seed);
        app.load_existing()?;
        Ok(app)
    }

    fn build(
        store: Arc<dyn EventStore>,
        files: Option<Arc<FileStore>>,
        token: Option<String>,
        seed: Option<u64>,
    ) -> Arc<Self> {
        Arc::new(App {
            store,
            files,
            experiments: StdRwLock::new(HashMap::new()),
            token,
            seed,
            ordinal: AtomicU64::new(0),
        })
    }

    fn load_existing(&self) -> Result<(), Error> {
        let mut ids = self.store.experiment_ids()?;
        ids.sort();
        for id in ids {
            let events = self.store.load(&id)?;
            let state = ExperimentState::replay(&events)?;
            tracing::info!(experiment = %id, events = events.len(), "replayed experiment");
            self.insert(state);
        }
        Ok(())
    }

    fn next_rng(&self) -> ChaCha8Rng {
        let n = self.ordinal.fetch_add(1, Ordering::Relaxed);
        match self.seed {
            Some(seed) => ChaCha8Rng::seed_from_u64(replication_seed(seed, n)),
            None => ChaCha8Rng::from_os_rng(),
        }
    }

    fn insert(&self, state: ExperimentState) -> Arc<Experiment> {
        let (feed, _) = broadcast::channel(FEED_CAPACITY);
        let exp = Arc::new(Experiment {
            id: state.experiment_id.clone(),
            live: RwLock::new(Live {
                state,
                rng: self.next_rng(),
            }),
            feed,
        });
        self.experiments
            .write()
            .expect("experiment map poisoned")
            .insert(exp.id.clone(), exp.clone());
        exp
    }

    pub fn experiment(&self, id: &str) -> Result<Arc<Experiment>, ApiError> {
        self.experiments
            .read()
            .expect("experiment map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no experiment `{id}`")))
    }

    pub fn experiments(&self) -> Vec<Arc<Experiment>> {
        let mut all: Vec<_> = self
            .experiments
            .read()
            .expect("experiment map poisoned")
            .values()
            .cloned()
            .collect();
        all.sort_by(|a, b| a.id.cmp(&b.id));
        all
    }

    pub fn create(&self, config: ExperimentConfig) -> Result<String, ApiError> {
        let id = uuid::Uuid::new_v4().to_string();
        let (state, mut created) = ExperimentState::create(id.clone(), config)?;
        created.timestamp_ms = now_ms();
        self.store.append_event(&id, &created)?;
        self.insert(state);
        Ok(id)
    }

    /// Run `f` under the experiment's write lock, persist and publish its events.
    /// If persisting fails the in-memory state is rebuilt from the durable log.
    pub async fn mutate<T>(
        &self,
        exp: &Experiment,
        f: impl FnOnce(&mut Live) -> Result<(T, Vec<EventRecord>), Error>,
    ) -> Result<T, ApiError> {
        let mut live = exp.live.write().await;
        let (out, events) = f(&mut live)?;
        for mut event in events {
            event.timestamp_ms = now_ms();
            if let Err(e) = self.store.append_event(&exp.id, &event) {
                tracing::error!(experiment = %exp.id, error = %e, "append failed; restoring from log");
                live.state = ExperimentState::replay(&self.store.load(&exp.id)?)?;
                return Err(e.into());
            }
            let _ = exp.feed.send(event);
        }
        Ok(out)
    }

    /// Snapshot one experiment next to its log (file store only).
    pub async fn snapshot(&self, exp: &Experiment) -> Result<(), Error> {
        if let Some(files) = &self.files {
            let live = exp.live.read().await;
            files.write_snapshot(&Snapshot::of(&live.state))?;
        }
        Ok(())
    }

    pub async fn snapshot_all(&self) -> Result<(), Error> {
        for exp in self.experiments() {
            self.snapshot(&exp).await?;
        }
        Ok(())
    }

    /// Events with sequence > `after`, then every later event as it is committed.
    pub async fn subscribe(
        self: &Arc<Self>,
        exp: Arc<Experiment>,
        after: u64,
    ) -> Result<impl Stream<Item = EventRecord> + Send + 'static, ApiError> {
        // Subscribing and loading under the read lock means no commit can slip
        // between the backlog and the live feed.
        let (rx, backlog) = {
            let live = exp.live.read().await;
            if after > live.state.last_sequence {
                return Err(ApiError::invalid(format!(
                    "unknown sequence {after}; last is {}",
                    live.state.last_sequence
                )));
            }
            let rx = exp.feed.subscribe();
            let backlog: VecDeque<EventRecord> =
                self.store.load(&exp.id)?.into_iter().filter(|e| e.sequence > after).collect();
            (rx, backlog)
        };
        let feed = Feed {
            app: self.clone(),
            id: exp.id.clone(),
            last: after,
            buf: backlog,
            rx,
        };
        Ok(futures::stream::unfold(feed, |mut feed| async move {
            feed.next().await.map(|e| (e, feed))
        }))
    }
}

/// Per-connection cursor: yields each sequence exactly once, in order, and
/// refills from the store when the broadcast buffer overflows.
struct Feed {
    app: Arc<App>,
    id: String,
    last: u64,
    buf: VecDeque<EventRecord>,
    rx: broadcast::Receiver<EventRecord>,
}

impl Feed {
    async fn next(&mut self) -> Option<EventRecord> {
        let mut refilled = false;
        loop {
            if let Some(e) = self.buf.pop_front() {
                if e.sequence <= self.last {
                    continue;
                }
                if e.sequence == self.last + 1 {
                    self.last = e.sequence;
                    return Some(e);
                }
                if refilled {
                    // The store itself has a hole; end the stream so the
                    // client resumes from its last id.
                    return None;
                }
                self.refill();
                refilled = true;
                continue;
            }
            match self.rx.recv().await {
                Ok(e) => self.buf.push_back(e),
                Err(broadcast::error::RecvError::Lagged(_)) => self.refill(),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }

    fn refill(&mut self) {
        match self.app.store.load(&self.id) {
            Ok(events) => self.buf = events.into_iter().filter(|e| e.sequence > self.last).collect(),
            Err(e) => {
                tracing::error!(experiment = %self.id, error = %e, "event feed refill failed");
                self.buf.clear();
            }
        }
    }
}
