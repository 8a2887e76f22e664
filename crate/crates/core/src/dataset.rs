//! Expert trajectories, their on-disk format, and training-window sampling.
//!
//! File layout: magic `EATDATA1`, little-endian `u64` header length, a JSON
//! header, then per trajectory the blocks `states`, `actions`, `labels`,
//! `rewards` as little-endian `f64`. The header carries a SHA-256 of the data
//! region.

use std::fs;
use std::path::Path;
use std::sync::Mutex;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{write_atomic, CheckpointError};
use crate::eat::{Normalizer, TokenWindow};
use crate::embodiment::{EmbodimentBounds, EmbodimentVector};
use crate::env::{run_episode, EnvError, EnvSpec, ACTION_DIM, STATE_DIM};
use crate::policy::{EpisodeView, Policy};
use crate::seeding;

pub const DATA_MAGIC: &[u8; 8] = b"EATDATA1";
pub const DATA_FORMAT_VERSION: u32 = 2;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] CheckpointError),
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("dataset truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("checksum mismatch: header {expected}, data {actual}")]
    Checksum { expected: String, actual: String },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("window length {h} exceeds trajectory length {len}")]
    WindowTooLong { h: usize, len: usize },
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Env(#[from] EnvError),
}

pub type Result<T, E = DatasetError> = std::result::Result<T, E>;

/// One episode with flat row-major state and action blocks. `actions` are
/// what was executed; `labels` are what the demonstrator intended.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub embodiment: EmbodimentVector,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub labels: Vec<f64>,
    pub rewards: Vec<f64>,
    pub seed: u64,
    pub env_id: String,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub embodiment: EmbodimentVector,
    pub count: usize,
}

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

impl Normalization {
    pub fn to_normalizer(&self, bounds: EmbodimentBounds) -> Normalizer {
        Normalizer {
            state_mean: self.state_mean.clone(),
            state_std: self.state_std.clone(),
            action_mean: self.action_mean.clone(),
            action_std: self.action_std.clone(),
            embodiment_bounds: bounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub state_dim: usize,
    pub action_dim: usize,
    pub trajectories: Vec<Trajectory>,
    pub manifest: Vec<ManifestEntry>,
    pub normalization: Normalization,
    /// Rollouts dropped during collection because the expert failed.
    pub excluded: usize,
}

fn column_stats(blocks: impl Iterator<Item = impl AsRef<[f64]>> + Clone, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut mean = vec![0.0; dim];
    for b in blocks.clone() {
        for row in b.as_ref().chunks_exact(dim) {
            n += 1;
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
    }
    if n == 0 {
        return (vec![0.0; dim], vec![1.0; dim]);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for b in blocks {
        for row in b.as_ref().chunks_exact(dim) {
            var.iter_mut().zip(row).zip(&mean).for_each(|((v, x), m)| *v += (x - m) * (x - m));
        }
    }
    let std = var.iter().map(|v| (v / n as f64).sqrt()).map(|s| if s > 1e-12 { s } else { 1.0 }).collect();
    (mean, std)
}

impl Dataset {
    /// Builds a dataset, deriving the manifest and normalisation statistics.
    pub fn from_trajectories(state_dim: usize, action_dim: usize, trajectories: Vec<Trajectory>, excluded: usize) -> Self {
        let mut manifest: Vec<ManifestEntry> = Vec::new();
        for t in &trajectories {
            match manifest.iter_mut().find(|m| m.embodiment == t.embodiment) {
                Some(m) => m.count += 1,
                None => manifest.push(ManifestEntry { embodiment: t.embodiment, count: 1 }),
            }
        }
        let (state_mean, state_std) = column_stats(trajectories.iter().map(|t| &t.states), state_dim);
        let (action_mean, action_std) = column_stats(trajectories.iter().map(|t| &t.actions), action_dim);
        Self {
            state_dim,
            action_dim,
            trajectories,
            manifest,
            normalization: Normalization { state_mean, state_std, action_mean, action_std },
            excluded,
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Concatenates datasets and recomputes statistics over the union.
    pub fn merge(parts: Vec<Dataset>) -> Self {
        let (sd, ad) = parts.first().map_or((STATE_DIM, ACTION_DIM), |d| (d.state_dim, d.action_dim));
        let excluded = parts.iter().map(|d| d.excluded).sum();
        let trajectories = parts.into_iter().flat_map(|d| d.trajectories).collect();
        Self::from_trajectories(sd, ad, trajectories, excluded)
    }

    /// `H` consecutive timesteps from a uniformly chosen trajectory and start.
    pub fn sample_window<R: Rng + ?Sized>(&self, h: usize, rng: &mut R) -> Result<TokenWindow> {
        if self.trajectories.is_empty() {
            return Err(DatasetError::Empty);
        }
        let traj = &self.trajectories[rng.gen_range(0..self.trajectories.len())];
        if h == 0 || h > traj.len() {
            return Err(DatasetError::WindowTooLong { h, len: traj.len() });
        }
        let start = rng.gen_range(0..=traj.len() - h);
        Ok(self.window_at(traj, start, h))
    }

    pub fn sample_batch<R: Rng + ?Sized>(&self, h: usize, batch: usize, rng: &mut R) -> Result<Vec<TokenWindow>> {
        (0..batch).map(|_| self.sample_window(h, rng)).collect()
    }

    pub fn window_at(&self, traj: &Trajectory, start: usize, h: usize) -> TokenWindow {
        let (sd, ad) = (self.state_dim, self.action_dim);
        TokenWindow {
            embodiment: traj.embodiment,
            states: (start..start + h).map(|t| traj.states[t * sd..(t + 1) * sd].to_vec()).collect(),
            actions: (start..start + h).map(|t| traj.actions[t * ad..(t + 1) * ad].to_vec()).collect(),
            timesteps: (start..start + h).collect(),
            labels: (start..start + h).map(|t| traj.labels[t * ad..(t + 1) * ad].to_vec()).collect(),
        }
    }

    pub fn manifest_json(&self) -> serde_json::Value {
        serde_json::json!({
            "trajectories": self.len(),
            "excluded": self.excluded,
            "embodiments": self.manifest,
            "normalization": self.normalization,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut data = Vec::new();
        let mut entries = Vec::with_capacity(self.len());
        for t in &self.trajectories {
            for block in [&t.states, &t.actions, &t.labels, &t.rewards] {
                for v in block.iter() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
            }
            entries.push(TrajectoryEntry { embodiment: t.embodiment, len: t.len(), seed: t.seed, env_id: t.env_id.clone() });
        }
        let header = DataHeader {
            format: "eatlab-dataset".into(),
            version: DATA_FORMAT_VERSION,
            state_dim: self.state_dim,
            action_dim: self.action_dim,
            excluded: self.excluded,
            manifest: self.manifest.clone(),
            normalization: self.normalization.clone(),
            trajectories: entries,
            data_bytes: data.len(),
            sha256: hex_digest(&data),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(16 + header.len() + data.len());
        out.extend_from_slice(DATA_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&data);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(DatasetError::Truncated { needed: 16, have: bytes.len() });
        }
        if &bytes[..8] != DATA_MAGIC {
            return Err(DatasetError::BadMagic);
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let data_start = 16usize.saturating_add(hlen);
        if bytes.len() < data_start {
            return Err(DatasetError::Truncated { needed: data_start, have: bytes.len() });
        }
        let header: DataHeader =
            serde_json::from_slice(&bytes[16..data_start]).map_err(|e| DatasetError::Header(e.to_string()))?;
        if header.version != DATA_FORMAT_VERSION {
            return Err(DatasetError::Version { found: header.version, expected: DATA_FORMAT_VERSION });
        }
        let needed = data_start.saturating_add(header.data_bytes);
        if bytes.len() < needed {
            return Err(DatasetError::Truncated { needed, have: bytes.len() });
        }
        let data = &bytes[data_start..needed];
        let actual = hex_digest(data);
        if actual != header.sha256 {
            return Err(DatasetError::Checksum { expected: header.sha256, actual });
        }
        let (sd, ad) = (header.state_dim, header.action_dim);
        let mut cursor = 0usize;
        let mut take = |n: usize| -> Result<Vec<f64>> {
            let end = cursor + n * 8;
            if end > data.len() {
                return Err(DatasetError::Header("trajectory lengths exceed the data region".into()));
            }
            let v = data[cursor..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            cursor = end;
            Ok(v)
        };
        let mut trajectories = Vec::with_capacity(header.trajectories.len());
        for e in header.trajectories {
            let states = take(e.len * sd)?;
            let actions = take(e.len * ad)?;
            let labels = take(e.len * ad)?;
            let rewards = take(e.len)?;
            trajectories.push(Trajectory { embodiment: e.embodiment, states, actions, labels, rewards, seed: e.seed, env_id: e.env_id });
        }
        Ok(Self {
            state_dim: sd,
            action_dim: ad,
            trajectories,
            manifest: header.manifest,
            normalization: header.normalization,
            excluded: header.excluded,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(write_atomic(path, &self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| CheckpointError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn hex_digest(data: &[u8]) -> String {
    Sha256::digest(data).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryEntry {
    embodiment: EmbodimentVector,
    len: usize,
    seed: u64,
    env_id: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct DataHeader {
    format: String,
    version: u32,
    state_dim: usize,
    action_dim: usize,
    excluded: usize,
    manifest: Vec<ManifestEntry>,
    normalization: Normalization,
    trajectories: Vec<TrajectoryEntry>,
    data_bytes: usize,
    sha256: String,
}

/// [`collect_exploring`] without exploration noise.
pub fn collect<P: Policy + ?Sized>(
    spec: &EnvSpec,
    expert: &P,
    embodiments: &[EmbodimentVector],
    per_embodiment: usize,
    seed: u64,
) -> Result<Dataset> {
    collect_exploring(spec, expert, embodiments, per_embodiment, seed, 0.0)
}

/// Executes the expert's action plus Gaussian noise of scale `noise` and
/// records the noise-free action as the label.
struct Exploring<'a, P: ?Sized> {
    expert: &'a P,
    noise: f64,
    seed: u64,
    labels: Mutex<Vec<f64>>,
}

impl<P: Policy + ?Sized> Policy for Exploring<'_, P> {
    fn act(&self, view: &EpisodeView<'_>) -> f64 {
        let a = self.expert.act(view);
        self.labels.lock().expect("label buffer").push(a);
        if self.noise == 0.0 {
            return a;
        }
        let z: f64 = StandardNormal.sample(&mut seeding::rng(self.seed, &[0xD1_57AB, view.step as u64]));
        a + self.noise * z
    }

    fn label(&self) -> String {
        self.expert.label()
    }
}

/// Rolls out `expert` `per_embodiment` times on every body. Seeds depend on
/// `seed`, the body and the repetition index only. Rollouts that end early or
/// with negative return are dropped and counted.
pub fn collect_exploring<P: Policy + ?Sized>(
    spec: &EnvSpec,
    expert: &P,
    embodiments: &[EmbodimentVector],
    per_embodiment: usize,
    seed: u64,
    noise: f64,
) -> Result<Dataset> {
    let jobs: Vec<(EmbodimentVector, usize)> =
        embodiments.iter().flat_map(|&e| (0..per_embodiment).map(move |i| (e, i))).collect();
    let env_id = format!("{:?}", spec.task).to_lowercase();
    let results: Vec<Result<Option<Trajectory>>> = jobs
        .par_iter()
        .map(|&(e, i)| {
            let s = seeding::derive(seed, &[e.seed_key(), i as u64]);
            let demo = Exploring { expert, noise, seed: s, labels: Mutex::new(Vec::with_capacity(spec.episode_length)) };
            let ep = run_episode(&demo, &e, spec, s)?;
            if ep.unstable || ep.len() < spec.episode_length || ep.total_return < 0.0 {
                return Ok(None);
            }
            Ok(Some(Trajectory {
                embodiment: e,
                states: ep.states.concat(),
                actions: ep.actions,
                labels: demo.labels.into_inner().expect("label buffer"),
                rewards: ep.rewards,
                seed: s,
                env_id: env_id.clone(),
            }))
        })
        .collect();
    let mut trajectories = Vec::with_capacity(jobs.len());
    let mut excluded = 0;
    for r in results {
        match r? {
            Some(t) => trajectories.push(t),
            None => excluded += 1,
        }
    }
    Ok(Dataset::from_trajectories(STATE_DIM, ACTION_DIM, trajectories, excluded))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embodiment::{less_diverse_grid, training_grid};
    use crate::policy::Expert;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Dataset {
        let grid = &training_grid()[..3];
        collect(&EnvSpec::default(), &Expert::tuned(), grid, 2, 5).unwrap()
    }

    #[test]
    fn manifest_counts_per_body() {
        let d = collect(&EnvSpec::default(), &Expert::tuned(), &training_grid(), 2, 1).unwrap();
        assert_eq!(d.manifest.len(), 27);
        assert_eq!(d.manifest.iter().map(|m| m.count).sum::<usize>() + d.excluded, 54);
        assert_eq!(d.len() + d.excluded, 54);
        let ld = collect(&EnvSpec::default(), &Expert::tuned(), &less_diverse_grid(), 1, 1).unwrap();
        assert_eq!(ld.manifest.len(), 8);
    }

    #[test]
    fn collection_is_byte_deterministic() {
        assert_eq!(small().to_bytes(), small().to_bytes());
    }

    #[test]
    fn round_trip_and_corruption() {
        let d = small();
        let bytes = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        let mut bad = bytes.clone();
        let last = bad.len() - 5;
        bad[last] ^= 0x40;
        assert!(matches!(Dataset::from_bytes(&bad), Err(DatasetError::Checksum { .. })));
        assert!(matches!(Dataset::from_bytes(&bytes[..bytes.len() - 8]), Err(DatasetError::Truncated { .. })));
        let mut magic = bytes.clone();
        magic[3] = b'?';
        assert!(matches!(Dataset::from_bytes(&magic), Err(DatasetError::BadMagic)));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let d = Dataset::from_trajectories(STATE_DIM, ACTION_DIM, vec![], 0);
        assert_eq!(Dataset::from_bytes(&d.to_bytes()).unwrap(), d);
        assert!(matches!(d.sample_window(3, &mut ChaCha8Rng::seed_from_u64(0)), Err(DatasetError::Empty)));
    }

    #[test]
    fn window_equal_to_length_starts_at_zero() {
        let d = small();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let w = d.sample_window(200, &mut rng).unwrap();
            assert_eq!(w.timesteps[0], 0);
        }
        assert!(matches!(d.sample_window(201, &mut rng), Err(DatasetError::WindowTooLong { .. })));
    }
}
