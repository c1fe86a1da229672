//! Demonstration datasets and their JSON Lines encoding.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{train_episode_seed, Policy};
use crate::align::SegPointCloud;
use crate::envs::{self, EnvKind, Episode, EpisodeConfig, TOOL_CLASS};
use crate::error::{Error, Result};
use crate::geom::{RigidTransform, Vec3};

/// One observation and the action taken from it.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub episode_id: usize,
    pub t: usize,
    pub cloud: SegPointCloud,
    pub action: RigidTransform,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub env: EnvKind,
    pub episode: EpisodeConfig,
    pub seed: u64,
    pub attempted: usize,
    pub kept: usize,
    pub demo_success_rate: f64,
    pub episode_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BcDataset {
    pub records: Vec<Record>,
    pub provenance: Provenance,
}

/// Rolls out `policy` once and returns the visited (observation, action)
/// pairs together with the final episode.
pub fn rollout(policy: &dyn Policy, kind: EnvKind, config: &EpisodeConfig, seed: u64) -> Result<(Vec<(SegPointCloud, RigidTransform)>, Episode)> {
    let (mut ep, mut obs) = envs::reset(kind, config, seed)?;
    let mut steps = Vec::new();
    while !ep.done() {
        let action = policy.act(&obs, &ep)?;
        let next = ep.step(&action)?.observation;
        steps.push((obs, action));
        obs = next;
    }
    Ok((steps, ep))
}

/// Runs the expert on `n_episodes` training seeds and keeps the successful
/// episodes. Position noise from `config.noise_sigma` is added once to the
/// stored clouds.
pub fn generate_demos(kind: EnvKind, config: &EpisodeConfig, n_episodes: usize, seed: u64) -> Result<BcDataset> {
    if n_episodes == 0 {
        return Err(Error::BadConfig("need at least one episode".into()));
    }
    config.validate()?;
    let mut records = Vec::new();
    let mut episode_seeds = Vec::new();
    for i in 0..n_episodes {
        let episode_seed = train_episode_seed(seed, i as u64);
        let (steps, ep) = rollout(&super::ExpertPolicy, kind, config, episode_seed)?;
        if !ep.success() {
            continue;
        }
        let episode_id = episode_seeds.len();
        episode_seeds.push(episode_seed);
        records.extend(steps.into_iter().enumerate().map(|(t, (cloud, action))| Record {
            episode_id,
            t,
            cloud,
            action,
            success: true,
        }));
    }
    if episode_seeds.is_empty() {
        return Err(Error::NoSuccessfulDemos { attempted: n_episodes });
    }
    if config.noise_sigma > 0.0 {
        let mut clouds: Vec<SegPointCloud> = records.iter().map(|r| r.cloud.clone()).collect();
        envs::inject_noise(&mut clouds, config.noise_sigma, seed)?;
        for (r, c) in records.iter_mut().zip(clouds) {
            r.cloud = c;
        }
    }
    let kept = episode_seeds.len();
    Ok(BcDataset {
        records,
        provenance: Provenance {
            env: kind,
            episode: config.clone(),
            seed,
            attempted: n_episodes,
            kept,
            demo_success_rate: kept as f64 / n_episodes as f64,
            episode_seeds,
        },
    })
}

/// Writes every float with 17 significant digits in scientific notation.
struct FullPrecision;

impl serde_json::ser::Formatter for FullPrecision {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        write!(writer, "{value:.16e}")
    }
}

#[derive(Serialize, Deserialize)]
struct ActionJson {
    rot: [f64; 9],
    trans: [f64; 3],
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    episode_id: usize,
    t: usize,
    positions: Vec<[f64; 3]>,
    classes: Vec<Vec<u8>>,
    action: ActionJson,
    success: bool,
}

/// One JSON line for `r`, without the trailing newline.
pub fn record_to_json(r: &Record) -> String {
    let (rot, trans) = r.action.to_flat();
    let json = RecordJson {
        episode_id: r.episode_id,
        t: r.t,
        positions: r.cloud.positions().iter().map(|p| [p.x, p.y, p.z]).collect(),
        classes: (0..r.cloud.len())
            .map(|i| r.cloud.one_hot(i).iter().map(|&x| x as u8).collect())
            .collect(),
        action: ActionJson { rot, trans },
        success: r.success,
    };
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, FullPrecision);
    json.serialize(&mut ser).expect("records serialize");
    String::from_utf8(out).expect("JSON is UTF-8")
}

pub fn record_from_json(line: &str) -> Result<Record> {
    let json: RecordJson = serde_json::from_str(line).map_err(|e| Error::Format(e.to_string()))?;
    let one_hot: Vec<Vec<f64>> = json
        .classes
        .iter()
        .map(|row| row.iter().map(|&x| f64::from(x)).collect())
        .collect();
    let positions = json.positions.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect();
    let cloud = SegPointCloud::from_one_hot(positions, &one_hot, TOOL_CLASS)
        .map_err(|e| Error::Format(e.to_string()))?;
    let action = RigidTransform::from_flat(&json.action.rot, &json.action.trans)
        .map_err(|e| Error::Format(format!("action: {e}")))?;
    Ok(Record {
        episode_id: json.episode_id,
        t: json.t,
        cloud,
        action,
        success: json.success,
    })
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        writeln!(w, "{}", record_to_json(r)).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(record_from_json(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

/// `demos.jsonl` → `demos.provenance.json`.
pub fn provenance_path(jsonl: &Path) -> PathBuf {
    jsonl.with_extension("provenance.json")
}

impl BcDataset {
    /// Writes the records to `path` and the provenance next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records)?;
        let prov = provenance_path(path);
        let text = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        std::fs::write(&prov, text + "\n").map_err(|e| Error::io(&prov, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = read_records(path)?;
        let prov = provenance_path(path);
        let text = std::fs::read_to_string(&prov).map_err(|e| Error::io(&prov, e))?;
        let provenance: Provenance =
            serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", prov.display())))?;
        if records.is_empty() {
            return Err(Error::Format(format!("{}: no records", path.display())));
        }
        if !(provenance.demo_success_rate > 0.0 && provenance.demo_success_rate <= 1.0) {
            return Err(Error::Format(format!(
                "demonstrator success rate {} outside (0, 1]",
                provenance.demo_success_rate
            )));
        }
        Ok(BcDataset { records, provenance })
    }

    pub fn num_episodes(&self) -> usize {
        self.provenance.kept
    }
}
