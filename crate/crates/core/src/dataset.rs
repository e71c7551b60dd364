//! Episode recording, persistence, normalization and splitting.
//!
//! On-disk layout (the repo's stable data contract):
//!
//! ```text
//!   <dir>/manifest.json       schema version, task, per-episode metadata
//!                             (file, seed, ticks, outcome, sha256) and
//!                             dataset-level normalization stats
//!   <dir>/ep_00000.csv        one plain-text row per 1 ms tick:
//!                             18 observation values then 6 action values
//! ```
//!
//! Floats are written with Rust's shortest round-trip formatting, so a
//! write/read cycle is bitwise lossless.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::InitialPose;
use crate::error::{Error, Result};
use crate::seeds::{self, Stream};
use crate::types::{EpisodeOutcome, ACTION_DIM, COND_DIM, OBS_DIM};

pub const SCHEMA_VERSION: u32 = 1;
const ROW_DIM: usize = OBS_DIM + ACTION_DIM;

/// One 1 ms tick: observation paired with the executed action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TickRow {
    pub obs: [f64; OBS_DIM],
    pub action: [f64; ACTION_DIM],
}

/// A recorded demonstration episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub task: String,
    pub seed: u64,
    pub pose: InitialPose,
    pub outcome: EpisodeOutcome,
    pub rows: Vec<TickRow>,
}

impl EpisodeRecord {
    pub fn tick_count(&self) -> usize {
        self.rows.len()
    }
}

/// Per-dimension z-scoring statistics. Standard deviations are floored at
/// 1e-6 so constant channels normalize to zero instead of blowing up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub obs_mean: Vec<f64>,
    pub obs_std: Vec<f64>,
    pub action_mean: Vec<f64>,
    pub action_std: Vec<f64>,
}

pub const STD_FLOOR: f64 = 1e-6;

impl NormStats {
    pub fn identity() -> Self {
        Self {
            obs_mean: vec![0.0; OBS_DIM],
            obs_std: vec![1.0; OBS_DIM],
            action_mean: vec![0.0; ACTION_DIM],
            action_std: vec![1.0; ACTION_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.obs_mean.len() != OBS_DIM
            || self.obs_std.len() != OBS_DIM
            || self.action_mean.len() != ACTION_DIM
            || self.action_std.len() != ACTION_DIM
        {
            return Err(Error::Incompatible("normalization stats have wrong dims".into()));
        }
        if self.obs_std.iter().chain(self.action_std.iter()).any(|&s| s < STD_FLOOR) {
            return Err(Error::Incompatible("normalization std below floor".into()));
        }
        Ok(())
    }

    pub fn normalize_obs(&self, obs: &[f64; OBS_DIM]) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        for i in 0..OBS_DIM {
            out[i] = (obs[i] - self.obs_mean[i]) / self.obs_std[i];
        }
        out
    }

    pub fn normalize_action(&self, a: &[f64; ACTION_DIM]) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            out[i] = (a[i] - self.action_mean[i]) / self.action_std[i];
        }
        out
    }

    pub fn denormalize_action(&self, a: &[f64]) -> [f64; ACTION_DIM] {
        let mut out = [0.0; ACTION_DIM];
        for i in 0..ACTION_DIM {
            out[i] = a[i] * self.action_std[i] + self.action_mean[i];
        }
        out
    }
}

/// Mean/std over every row of `records`, per dimension.
pub fn compute_norm_stats(records: &[&EpisodeRecord]) -> Result<NormStats> {
    let total: usize = records.iter().map(|r| r.rows.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("cannot normalize an empty dataset".into()));
    }
    let mut mean = vec![0.0; ROW_DIM];
    for rec in records {
        for row in &rec.rows {
            for i in 0..OBS_DIM {
                mean[i] += row.obs[i];
            }
            for i in 0..ACTION_DIM {
                mean[OBS_DIM + i] += row.action[i];
            }
        }
    }
    for m in mean.iter_mut() {
        *m /= total as f64;
    }
    let mut var = vec![0.0; ROW_DIM];
    for rec in records {
        for row in &rec.rows {
            for i in 0..OBS_DIM {
                let d = row.obs[i] - mean[i];
                var[i] += d * d;
            }
            for i in 0..ACTION_DIM {
                let d = row.action[i] - mean[OBS_DIM + i];
                var[OBS_DIM + i] += d * d;
            }
        }
    }
    let std: Vec<f64> =
        var.iter().map(|v| (v / total as f64).sqrt().max(STD_FLOOR)).collect();
    Ok(NormStats {
        obs_mean: mean[..OBS_DIM].to_vec(),
        obs_std: std[..OBS_DIM].to_vec(),
        action_mean: mean[OBS_DIM..].to_vec(),
        action_std: std[OBS_DIM..].to_vec(),
    })
}

/// Normalized training pairs: for each tick `t`, the conditioning vector is
/// `[normalize(o_t), normalize(o_{t-1})]` (tick 0 duplicates its own
/// observation) and the target is the normalized action. Episodes never mix.
pub struct TrainingPairs {
    obs: Vec<f64>,
    actions: Vec<f64>,
    /// (current row, previous row) indices into the flat buffers.
    index: Vec<(u32, u32)>,
}

impl TrainingPairs {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn cond_dim(&self) -> usize {
        COND_DIM
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    pub fn write_cond(&self, i: usize, out: &mut [f64]) {
        let (cur, prev) = self.index[i];
        let cur = cur as usize * OBS_DIM;
        let prev = prev as usize * OBS_DIM;
        out[..OBS_DIM].copy_from_slice(&self.obs[cur..cur + OBS_DIM]);
        out[OBS_DIM..COND_DIM].copy_from_slice(&self.obs[prev..prev + OBS_DIM]);
    }

    pub fn action(&self, i: usize) -> &[f64] {
        let (cur, _) = self.index[i];
        let cur = cur as usize * ACTION_DIM;
        &self.actions[cur..cur + ACTION_DIM]
    }
}

pub fn build_training_pairs(records: &[&EpisodeRecord], stats: &NormStats) -> TrainingPairs {
    let total: usize = records.iter().map(|r| r.rows.len()).sum();
    let mut obs = Vec::with_capacity(total * OBS_DIM);
    let mut actions = Vec::with_capacity(total * ACTION_DIM);
    let mut index = Vec::with_capacity(total);
    let mut base = 0u32;
    for rec in records {
        for (t, row) in rec.rows.iter().enumerate() {
            obs.extend_from_slice(&stats.normalize_obs(&row.obs));
            actions.extend_from_slice(&stats.normalize_action(&row.action));
            let cur = base + t as u32;
            let prev = if t == 0 { cur } else { cur - 1 };
            index.push((cur, prev));
        }
        base += rec.rows.len() as u32;
    }
    TrainingPairs { obs, actions, index }
}

/// Episode-level split: shuffles episode indices under `seed` and takes the
/// first `round(n * fraction)` for training.
pub fn split<'a>(
    records: &'a [EpisodeRecord],
    fraction: f64,
    seed: u64,
) -> Result<(Vec<&'a EpisodeRecord>, Vec<&'a EpisodeRecord>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument("split fraction must be in (0, 1)".into()));
    }
    let n = records.len();
    let n_train = (n as f64 * fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(Error::InvalidArgument(format!(
            "split of {n} episodes at {fraction} leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seeds::rng(seed, Stream::TrainShuffle, u64::MAX);
    idx.shuffle(&mut rng);
    let train = idx[..n_train].iter().map(|&i| &records[i]).collect();
    let val = idx[n_train..].iter().map(|&i| &records[i]).collect();
    Ok((train, val))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEpisode {
    pub file: String,
    pub seed: u64,
    pub ticks: usize,
    pub pose: InitialPose,
    pub outcome: EpisodeOutcome,
    pub sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub task: String,
    pub episodes: Vec<ManifestEpisode>,
    /// Stats over the whole dataset, for reference; training recomputes
    /// stats from its own split.
    pub norm_stats: NormStats,
}

fn episode_csv(rec: &EpisodeRecord) -> String {
    let mut out = String::with_capacity(rec.rows.len() * ROW_DIM * 12);
    for row in &rec.rows {
        let mut first = true;
        for v in row.obs.iter().chain(row.action.iter()) {
            if !first {
                out.push(',');
            }
            write!(out, "{v}").unwrap();
            first = false;
        }
        out.push('\n');
    }
    out
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest {
        write!(s, "{b:02x}").unwrap();
    }
    s
}

/// Persist a dataset: one CSV per episode plus the manifest.
pub fn write_dataset(records: &[EpisodeRecord], dir: &Path) -> Result<Manifest> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("refusing to write an empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let refs: Vec<&EpisodeRecord> = records.iter().collect();
    let norm_stats = compute_norm_stats(&refs)?;
    let mut episodes = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let file = format!("ep_{i:05}.csv");
        let csv = episode_csv(rec);
        fs::write(dir.join(&file), &csv)?;
        episodes.push(ManifestEpisode {
            file,
            seed: rec.seed,
            ticks: rec.rows.len(),
            pose: rec.pose,
            outcome: rec.outcome,
            sha256: sha256_hex(csv.as_bytes()),
        });
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        task: records[0].task.clone(),
        episodes,
        norm_stats,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Corrupt(format!("manifest serialization: {e}")))?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(manifest)
}

fn parse_episode_csv(text: &str, file: &str) -> Result<Vec<TickRow>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut vals = [0.0f64; ROW_DIM];
        let mut count = 0;
        for field in line.split(',') {
            if count >= ROW_DIM {
                count += 1;
                break;
            }
            vals[count] = field.trim().parse::<f64>().map_err(|_| {
                Error::Corrupt(format!("{file}: row {lineno}: unparseable field"))
            })?;
            count += 1;
        }
        if count != ROW_DIM {
            return Err(Error::Corrupt(format!(
                "{file}: row {lineno}: expected {ROW_DIM} fields, got {count}"
            )));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt(format!("{file}: row {lineno}: non-finite value")));
        }
        let mut obs = [0.0; OBS_DIM];
        let mut action = [0.0; ACTION_DIM];
        obs.copy_from_slice(&vals[..OBS_DIM]);
        action.copy_from_slice(&vals[OBS_DIM..]);
        rows.push(TickRow { obs, action });
    }
    Ok(rows)
}

/// Load a dataset directory, validating schema version and checksums.
pub fn read_dataset(dir: &Path) -> Result<(Vec<EpisodeRecord>, Manifest)> {
    let manifest_path = dir.join("manifest.json");
    let manifest_text = fs::read_to_string(&manifest_path)
        .map_err(|e| Error::Corrupt(format!("missing manifest: {e}")))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Corrupt(format!("manifest parse: {e}")))?;
    if manifest.schema_version != SCHEMA_VERSION {
        return Err(Error::Incompatible(format!(
            "dataset schema v{} but this build reads v{SCHEMA_VERSION}",
            manifest.schema_version
        )));
    }
    manifest.norm_stats.validate()?;
    let mut records = Vec::with_capacity(manifest.episodes.len());
    for ep in &manifest.episodes {
        let text = fs::read_to_string(dir.join(&ep.file))?;
        if sha256_hex(text.as_bytes()) != ep.sha256 {
            return Err(Error::Corrupt(format!("{}: checksum mismatch", ep.file)));
        }
        let rows = parse_episode_csv(&text, &ep.file)?;
        if rows.len() != ep.ticks {
            return Err(Error::Corrupt(format!(
                "{}: manifest says {} ticks, file has {}",
                ep.file,
                ep.ticks,
                rows.len()
            )));
        }
        records.push(EpisodeRecord {
            task: manifest.task.clone(),
            seed: ep.seed,
            pose: ep.pose,
            outcome: ep.outcome,
            rows,
        });
    }
    Ok((records, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::Termination;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dummy_record(seed: u64, ticks: usize) -> EpisodeRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = (0..ticks)
            .map(|_| {
                let mut obs = [0.0; OBS_DIM];
                let mut action = [0.0; ACTION_DIM];
                for v in obs.iter_mut() {
                    *v = rng.gen_range(-5.0..5.0);
                }
                for v in action.iter_mut() {
                    *v = rng.gen_range(-20.0..20.0);
                }
                TickRow { obs, action }
            })
            .collect();
        EpisodeRecord {
            task: "cuboid".into(),
            seed,
            pose: InitialPose { lateral: 1e-3, tilt: 0.01, goal_offset: -5e-4 },
            outcome: EpisodeOutcome {
                success: true,
                duration: ticks as f64 * 1e-3,
                termination: Termination::Inserted,
            },
            rows,
        }
    }

    #[test]
    fn round_trip_is_bitwise_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..3).map(|i| dummy_record(i, 50 + i as usize)).collect();
        let manifest = write_dataset(&records, dir.path()).unwrap();
        assert_eq!(manifest.episodes.len(), 3);
        let (back, manifest2) = read_dataset(dir.path()).unwrap();
        assert_eq!(back, records);
        assert_eq!(manifest2.episodes.len(), manifest.episodes.len());
    }

    #[test]
    fn manifest_counts_match_files() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<_> = (0..4).map(|i| dummy_record(i, 20)).collect();
        let manifest = write_dataset(&records, dir.path()).unwrap();
        let csvs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".csv")
            })
            .count();
        assert_eq!(manifest.episodes.len(), csvs);
        let total_ticks: usize = manifest.episodes.iter().map(|e| e.ticks).sum();
        assert_eq!(total_ticks, 80);
    }

    #[test]
    fn corrupted_rows_are_rejected_with_location() {
        let dir = tempfile::tempdir().unwrap();
        let records = vec![dummy_record(0, 10)];
        let manifest = write_dataset(&records, dir.path()).unwrap();
        let file = dir.path().join(&manifest.episodes[0].file);
        let mut text = std::fs::read_to_string(&file).unwrap();
        text = text.replacen(&records[0].rows[3].obs[0].to_string(), "NaN", 1);
        std::fs::write(&file, &text).unwrap();
        // checksum catches the tamper first
        let err = read_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Corrupt(_)));

        // with a "valid" checksum the NaN row itself is reported
        let rows_err = parse_episode_csv(&text, "ep_00000.csv").unwrap_err();
        match rows_err {
            Error::Corrupt(msg) => assert!(msg.contains("row 3"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn schema_version_mismatch_is_incompatible() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&[dummy_record(0, 5)], dir.path()).unwrap();
        let mpath = dir.path().join("manifest.json");
        let text = std::fs::read_to_string(&mpath)
            .unwrap()
            .replace("\"schema_version\": 1", "\"schema_version\": 99");
        std::fs::write(&mpath, text).unwrap();
        assert!(matches!(read_dataset(dir.path()), Err(Error::Incompatible(_))));
    }

    #[test]
    fn norm_stats_floor_constant_channels() {
        let mut rec = dummy_record(1, 30);
        for row in rec.rows.iter_mut() {
            row.obs[4] = 7.5; // constant channel
        }
        let stats = compute_norm_stats(&[&rec]).unwrap();
        assert_eq!(stats.obs_std[4], STD_FLOOR);
        let n = stats.normalize_obs(&rec.rows[0].obs);
        assert_eq!(n[4], 0.0);
    }

    #[test]
    fn normalized_training_rows_have_zero_mean_unit_std() {
        let records: Vec<_> = (0..3).map(|i| dummy_record(i, 200)).collect();
        let refs: Vec<_> = records.iter().collect();
        let stats = compute_norm_stats(&refs).unwrap();
        let total: usize = records.iter().map(|r| r.rows.len()).sum();
        for dim in 0..OBS_DIM {
            let mut mean = 0.0;
            let mut var = 0.0;
            for r in &records {
                for row in &r.rows {
                    mean += stats.normalize_obs(&row.obs)[dim];
                }
            }
            mean /= total as f64;
            for r in &records {
                for row in &r.rows {
                    let d = stats.normalize_obs(&row.obs)[dim] - mean;
                    var += d * d;
                }
            }
            var /= total as f64;
            assert!(mean.abs() < 1e-9);
            assert!((var.sqrt() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalize_denormalize_round_trip() {
        let rec = dummy_record(3, 40);
        let stats = compute_norm_stats(&[&rec]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let mut a = [0.0; ACTION_DIM];
            for v in a.iter_mut() {
                *v = rng.gen_range(-30.0..30.0);
            }
            let round = stats.denormalize_action(&stats.normalize_action(&a));
            for i in 0..ACTION_DIM {
                assert!((round[i] - a[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn training_pairs_follow_the_boundary_rule() {
        let records = vec![dummy_record(0, 3), dummy_record(1, 2)];
        let refs: Vec<_> = records.iter().collect();
        let stats = compute_norm_stats(&refs).unwrap();
        let pairs = build_training_pairs(&refs, &stats);
        assert_eq!(pairs.len(), 5);

        let mut cond = vec![0.0; COND_DIM];
        // t = 0: both halves equal
        pairs.write_cond(0, &mut cond);
        assert_eq!(cond[..OBS_DIM], cond[OBS_DIM..]);

        // hand-assembled oracle for the second episode's t = 1 pair
        pairs.write_cond(4, &mut cond);
        let expect_cur = stats.normalize_obs(&records[1].rows[1].obs);
        let expect_prev = stats.normalize_obs(&records[1].rows[0].obs);
        assert_eq!(&cond[..OBS_DIM], expect_cur.as_slice());
        assert_eq!(&cond[OBS_DIM..], expect_prev.as_slice());
        let expect_act = stats.normalize_action(&records[1].rows[1].action);
        assert_eq!(pairs.action(4), expect_act.as_slice());

        // episode boundary: pair 3 (episode 1, t = 0) must not reach into
        // episode 0's last row
        pairs.write_cond(3, &mut cond);
        assert_eq!(cond[..OBS_DIM], cond[OBS_DIM..]);
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let records: Vec<_> = (0..10).map(|i| dummy_record(i, 5)).collect();
        let (train, val) = split(&records, 0.8, 42).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(val.len(), 2);
        let (train2, val2) = split(&records, 0.8, 42).unwrap();
        let key = |v: &Vec<&EpisodeRecord>| v.iter().map(|r| r.seed).collect::<Vec<_>>();
        assert_eq!(key(&train), key(&train2));
        assert_eq!(key(&val), key(&val2));
        let mut all: Vec<u64> = key(&train).into_iter().chain(key(&val)).collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn degenerate_splits_are_rejected() {
        let records: Vec<_> = (0..2).map(|i| dummy_record(i, 5)).collect();
        assert!(split(&records, 0.9, 1).is_err()); // 2 * 0.9 rounds to 2
        assert!(split(&records, 0.0, 1).is_err());
        assert!(split(&records, 1.0, 1).is_err());
    }
}
