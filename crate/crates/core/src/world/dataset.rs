//! Episode records and the JSON-lines episode file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, DOF};
use crate::world::generator::{episode_seed, sample_with_outcome, split_for, GenConfig, Outcome};
use crate::world::oracle::success_oracle;
use crate::world::scene::SceneState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub id: String,
    pub instruction: String,
    pub scene: SceneState,
    /// Raw trajectory, positions in normalized `[-1, 1]` coordinates.
    pub trajectory: Trajectory,
    pub label: u8,
    pub split: Split,
}

/// On-disk form: the trajectory is stored time-major, one 8-vector per step.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpisodeRecord {
    id: String,
    instruction: String,
    scene: SceneState,
    trajectory: Vec<[f64; DOF]>,
    label: u8,
    split: Split,
}

impl Episode {
    pub fn to_json_line(&self) -> String {
        let record = EpisodeRecord {
            id: self.id.clone(),
            instruction: self.instruction.clone(),
            scene: self.scene.clone(),
            trajectory: self.trajectory.steps(),
            label: self.label,
            split: self.split,
        };
        serde_json::to_string(&record).expect("episode records always serialize")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let r: EpisodeRecord =
            serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?;
        let ctx = |msg: String| Error::Data(format!("episode {}: {msg}", r.id));
        if r.id.is_empty() {
            return Err(Error::Data("episode id is empty".into()));
        }
        if r.label > 1 {
            return Err(ctx(format!("label {} is not 0 or 1", r.label)));
        }
        if r.scene.objects.is_empty() || r.scene.target >= r.scene.objects.len() {
            return Err(ctx(format!(
                "target index {} out of range for {} objects",
                r.scene.target,
                r.scene.objects.len()
            )));
        }
        let trajectory = Trajectory::from_steps(&r.trajectory).map_err(|e| ctx(e.to_string()))?;
        Ok(Self {
            id: r.id,
            instruction: r.instruction,
            scene: r.scene,
            trajectory,
            label: r.label,
            split: r.split,
        })
    }
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<()> {
    let result = (|| {
        let mut out = BufWriter::new(File::create(path)?);
        for ep in episodes {
            writeln!(out, "{}", ep.to_json_line())?;
        }
        out.flush()
    })();
    result.map_err(|e| {
        let _ = std::fs::remove_file(path);
        Error::io(path, e)
    })
}

/// Reads and validates every line; errors name the line number.
pub fn read_episodes(path: &Path) -> Result<Vec<Episode>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut episodes = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ep = Episode::from_json_line(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        if !seen.insert(ep.id.clone()) {
            return Err(Error::Data(format!(
                "{}:{}: duplicate episode id {}",
                path.display(),
                n + 1,
                ep.id
            )));
        }
        episodes.push(ep);
    }
    Ok(episodes)
}

/// Recomputes every label with the success oracle; the first mismatch is an
/// error.
pub fn revalidate(episodes: &[Episode]) -> Result<()> {
    for ep in episodes {
        let label = success_oracle(&ep.scene, &ep.trajectory);
        if label != ep.label {
            return Err(Error::Data(format!(
                "episode {}: stored label {} but oracle gives {label}",
                ep.id, ep.label
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub count: usize,
    pub positives: usize,
    pub positive_rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub positive_rate: f64,
    pub splits: BTreeMap<String, SplitStats>,
    /// Counts per generated failure mode.
    pub failure_modes: BTreeMap<String, usize>,
}

impl DatasetStats {
    pub fn of(episodes: &[Episode], outcomes: &[Outcome]) -> Self {
        let mut stats = DatasetStats {
            total: episodes.len(),
            ..Default::default()
        };
        for split in Split::ALL {
            stats
                .splits
                .insert(split.name().to_string(), SplitStats::default());
        }
        let mut positives = 0;
        for ep in episodes {
            let s = stats.splits.get_mut(ep.split.name()).unwrap();
            s.count += 1;
            s.positives += ep.label as usize;
            positives += ep.label as usize;
        }
        for s in stats.splits.values_mut() {
            s.positive_rate = rate(s.positives, s.count);
        }
        stats.positive_rate = rate(positives, episodes.len());
        for outcome in outcomes {
            if let Outcome::Failure(mode) = outcome {
                let name = serde_json::to_value(mode)
                    .unwrap()
                    .as_str()
                    .unwrap()
                    .to_string();
                *stats.failure_modes.entry(name).or_default() += 1;
            }
        }
        stats
    }
}

fn rate(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Generates `n` episodes in memory. Episode `i` depends only on
/// `(seed, i, config)`.
pub fn generate_episodes(
    n: usize,
    seed: u64,
    config: &GenConfig,
) -> Result<(Vec<Episode>, Vec<Outcome>)> {
    config.validate()?;
    let samples: Vec<_> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let id = format!("ep{i:06}");
            let mut s = sample_with_outcome(&id, episode_seed(seed, i), config)?;
            s.episode.split = split_for(seed, i, &config.split);
            Ok(s)
        })
        .collect::<Result<_>>()?;
    Ok(samples.into_iter().map(|s| (s.episode, s.outcome)).unzip())
}

/// Generates `n` episodes and writes them to `out`.
pub fn generate_dataset(
    n: usize,
    seed: u64,
    config: &GenConfig,
    out: &Path,
) -> Result<DatasetStats> {
    let (episodes, outcomes) = generate_episodes(n, seed, config)?;
    write_episodes(out, &episodes)?;
    Ok(DatasetStats::of(&episodes, &outcomes))
}
