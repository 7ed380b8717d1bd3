//! Counting service: content-addressed images, a byte-capped LRU of
//! similarity maps and a small job queue drained by worker threads.
//!
//! Re-thresholding the same image and box reuses the cached map, so only
//! peak detection runs again.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::counting::{count_map, infer_similarity, CountMode, CountResult, Exemplar};
use crate::data::{BBox, Image, SimilarityMap};
use crate::error::{Error, Result};
use crate::model::Gmn;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    /// Upper bound on the bytes held by cached similarity maps.
    pub cache_bytes: usize,
    pub workers: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            cache_bytes: 64 << 20,
            workers: 2,
        }
    }
}

/// Cache key: the box is compared bit-for-bit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub image_id: String,
    pub bbox: [u64; 4],
    pub checkpoint_id: String,
}

impl CacheKey {
    pub fn new(image_id: &str, bbox: &BBox, checkpoint_id: &str) -> Self {
        Self {
            image_id: image_id.to_string(),
            bbox: [bbox.x.to_bits(), bbox.y.to_bits(), bbox.w.to_bits(), bbox.h.to_bits()],
            checkpoint_id: checkpoint_id.to_string(),
        }
    }
}

struct CacheEntry {
    map: Arc<SimilarityMap>,
    bytes: usize,
    last_use: u64,
}

/// Least-recently-used map cache whose total size never exceeds its cap.
pub struct MapCache {
    cap: usize,
    bytes: usize,
    tick: u64,
    entries: HashMap<CacheKey, CacheEntry>,
}

impl MapCache {
    pub fn new(cap: usize) -> Self {
        Self {
            cap,
            bytes: 0,
            tick: 0,
            entries: HashMap::new(),
        }
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.entries.contains_key(key)
    }

    pub fn get(&mut self, key: &CacheKey) -> Option<Arc<SimilarityMap>> {
        self.tick += 1;
        let tick = self.tick;
        self.entries.get_mut(key).map(|e| {
            e.last_use = tick;
            e.map.clone()
        })
    }

    /// Stores `map`, evicting the oldest entries as needed. A map larger than
    /// the whole cap is not stored.
    pub fn insert(&mut self, key: CacheKey, map: Arc<SimilarityMap>) {
        let bytes = map.byte_size();
        if let Some(old) = self.entries.remove(&key) {
            self.bytes -= old.bytes;
        }
        if bytes > self.cap {
            return;
        }
        while self.bytes + bytes > self.cap {
            let oldest = self
                .entries
                .iter()
                .min_by_key(|(_, e)| e.last_use)
                .map(|(k, _)| k.clone())
                .expect("non-empty while over cap");
            let e = self.entries.remove(&oldest).expect("present");
            self.bytes -= e.bytes;
        }
        self.tick += 1;
        self.bytes += bytes;
        self.entries.insert(key, CacheEntry { map, bytes, last_use: self.tick });
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Queued,
    Running,
    Done,
    Failed,
}

impl JobStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, Self::Done | Self::Failed)
    }

    fn rank(self) -> u8 {
        match self {
            Self::Queued => 0,
            Self::Running => 1,
            Self::Done | Self::Failed => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRequest {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default = "default_mode")]
    pub mode: CountMode,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Suppression radius; the exemplar radius when absent.
    #[serde(default)]
    pub min_distance: Option<f64>,
}

fn default_mode() -> CountMode {
    CountMode::LocalMax
}

pub const DEFAULT_THRESHOLD: f64 = 2.75;

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    #[serde(flatten)]
    pub count: CountResult,
    /// Whether the similarity map came from the cache.
    pub cache_hit: bool,
    pub map_height: usize,
    pub map_width: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountJob {
    pub id: u64,
    #[serde(flatten)]
    pub request: CountRequest,
    pub status: JobStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<JobResult>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip)]
    map: Option<Arc<SimilarityMap>>,
}

impl CountJob {
    pub fn map(&self) -> Option<&Arc<SimilarityMap>> {
        self.map.as_ref()
    }
}

/// Instrumentation counters.
#[derive(Debug, Default)]
pub struct Counters {
    pub embedding_calls: AtomicU64,
    pub cache_hits: AtomicU64,
    pub cache_misses: AtomicU64,
    pub uploads: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub embedding_calls: u64,
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub uploads: u64,
}

#[derive(Default)]
struct Queue {
    pending: VecDeque<u64>,
    shutdown: bool,
}

pub struct CountService {
    model: Gmn<f32>,
    checkpoint_id: String,
    images: Mutex<HashMap<String, Arc<Image>>>,
    cache: Mutex<MapCache>,
    /// One lock per key so concurrent misses on the same key embed once.
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
    jobs: Mutex<BTreeMap<u64, CountJob>>,
    queue: Mutex<Queue>,
    wake: Condvar,
    next_id: AtomicU64,
    counters: Counters,
}

pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl CountService {
    pub fn new(model: Gmn<f32>, checkpoint_id: impl Into<String>, config: &ServiceConfig) -> Self {
        Self {
            model,
            checkpoint_id: checkpoint_id.into(),
            images: Mutex::new(HashMap::new()),
            cache: Mutex::new(MapCache::new(config.cache_bytes)),
            key_locks: Mutex::new(HashMap::new()),
            jobs: Mutex::new(BTreeMap::new()),
            queue: Mutex::new(Queue::default()),
            wake: Condvar::new(),
            next_id: AtomicU64::new(1),
            counters: Counters::default(),
        }
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn counters(&self) -> CounterSnapshot {
        let c = &self.counters;
        CounterSnapshot {
            embedding_calls: c.embedding_calls.load(Ordering::SeqCst),
            cache_hits: c.cache_hits.load(Ordering::SeqCst),
            cache_misses: c.cache_misses.load(Ordering::SeqCst),
            uploads: c.uploads.load(Ordering::SeqCst),
        }
    }

    pub fn cache_bytes(&self) -> usize {
        self.cache.lock().unwrap().bytes()
    }

    /// Decodes PNG/JPEG bytes and stores the image under the hash of the bytes.
    pub fn upload_image(&self, bytes: &[u8]) -> Result<String> {
        if bytes.is_empty() {
            return Err(Error::Decode("empty payload".into()));
        }
        let id = content_id(bytes);
        self.counters.uploads.fetch_add(1, Ordering::SeqCst);
        if self.images.lock().unwrap().contains_key(&id) {
            return Ok(id);
        }
        let image = Image::decode(bytes, id.clone())?;
        image.ensure_min_size()?;
        self.images.lock().unwrap().entry(id.clone()).or_insert_with(|| Arc::new(image));
        Ok(id)
    }

    pub fn image(&self, id: &str) -> Result<Arc<Image>> {
        self.images
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownImage(id.to_string()))
    }

    fn validate(&self, req: &CountRequest) -> Result<()> {
        let image = self.image(&req.image_id)?;
        let b = &req.bbox;
        b.validate()?;
        if b.x < 0.0 || b.y < 0.0 || b.x + b.w > image.width() as f64 || b.y + b.h > image.height() as f64 {
            return Err(Error::InvalidBox(format!(
                "{b:?} is not inside the {}x{} image",
                image.width(),
                image.height()
            )));
        }
        if !req.threshold.is_finite() {
            return Err(Error::InvalidArgument("threshold must be finite".into()));
        }
        if req.min_distance.is_some_and(|d| !(d >= 0.0)) {
            return Err(Error::InvalidArgument("min_distance must be non-negative".into()));
        }
        Ok(())
    }

    /// Validates and enqueues a count job.
    pub fn submit(&self, request: CountRequest) -> Result<CountJob> {
        self.validate(&request)?;
        let id = self.next_id.fetch_add(1, Ordering::SeqCst);
        let job = CountJob {
            id,
            request,
            status: JobStatus::Queued,
            result: None,
            error: None,
            map: None,
        };
        self.jobs.lock().unwrap().insert(id, job.clone());
        self.queue.lock().unwrap().pending.push_back(id);
        self.wake.notify_one();
        Ok(job)
    }

    pub fn job(&self, id: u64) -> Result<CountJob> {
        self.jobs.lock().unwrap().get(&id).cloned().ok_or(Error::UnknownJob(id))
    }

    /// Similarity map of a finished job.
    pub fn job_map(&self, id: u64) -> Result<Arc<SimilarityMap>> {
        let job = self.job(id)?;
        job.map
            .ok_or_else(|| Error::InvalidArgument(format!("job {id} has no map (status {:?})", job.status)))
    }

    fn set_status(&self, id: u64, update: impl FnOnce(&mut CountJob)) {
        let mut jobs = self.jobs.lock().unwrap();
        let job = jobs.get_mut(&id).expect("job exists");
        let before = job.status;
        update(job);
        assert!(job.status.rank() >= before.rank(), "job {id} moved backwards");
    }

    /// Similarity map for `(image, box)`, computed at most once per key.
    fn similarity(&self, req: &CountRequest) -> Result<(Arc<SimilarityMap>, bool)> {
        let key = CacheKey::new(&req.image_id, &req.bbox, &self.checkpoint_id);
        let lock = self.key_locks.lock().unwrap().entry(key.clone()).or_default().clone();
        let _guard = lock.lock().unwrap();
        if let Some(map) = self.cache.lock().unwrap().get(&key) {
            self.counters.cache_hits.fetch_add(1, Ordering::SeqCst);
            return Ok((map, true));
        }
        self.counters.cache_misses.fetch_add(1, Ordering::SeqCst);
        let image = self.image(&req.image_id)?;
        let exemplar = Exemplar::from_box(&image, &req.bbox)?;
        self.counters.embedding_calls.fetch_add(1, Ordering::SeqCst);
        let map = Arc::new(infer_similarity(&self.model, &image, &exemplar)?);
        self.cache.lock().unwrap().insert(key, map.clone());
        Ok((map, false))
    }

    fn execute(&self, id: u64) {
        let Some(req) = self.jobs.lock().unwrap().get(&id).map(|j| j.request.clone()) else {
            return;
        };
        self.set_status(id, |j| j.status = JobStatus::Running);
        let outcome = self.similarity(&req).map(|(map, hit)| {
            let md = req.min_distance.unwrap_or_else(|| req.bbox.radius());
            let count = count_map(&map, req.mode, req.threshold, md);
            let result = JobResult {
                count,
                cache_hit: hit,
                map_height: map.height,
                map_width: map.width,
            };
            (result, map)
        });
        self.set_status(id, |j| match outcome {
            Ok((result, map)) => {
                j.result = Some(result);
                j.map = Some(map);
                j.status = JobStatus::Done;
            }
            Err(e) => {
                j.error = Some(e.to_string());
                j.status = JobStatus::Failed;
            }
        });
    }

    /// Runs the oldest queued job on the calling thread.
    pub fn process_next(&self) -> Option<u64> {
        let id = self.queue.lock().unwrap().pending.pop_front()?;
        self.execute(id);
        Some(id)
    }

    /// Runs queued jobs until the queue is empty.
    pub fn drain(&self) -> usize {
        let mut n = 0;
        while self.process_next().is_some() {
            n += 1;
        }
        n
    }

    /// Starts `n` threads that execute jobs as they arrive.
    pub fn spawn_workers(self: &Arc<Self>, n: usize) -> Vec<JoinHandle<()>> {
        (0..n)
            .map(|_| {
                let svc = Arc::clone(self);
                std::thread::spawn(move || loop {
                    let id = {
                        let mut q = svc.queue.lock().unwrap();
                        loop {
                            if q.shutdown {
                                return;
                            }
                            if let Some(id) = q.pending.pop_front() {
                                break id;
                            }
                            q = svc.wake.wait(q).unwrap();
                        }
                    };
                    svc.execute(id);
                })
            })
            .collect()
    }

    /// Stops workers after their current job.
    pub fn shutdown(&self) {
        self.queue.lock().unwrap().shutdown = true;
        self.wake.notify_all();
    }
}
