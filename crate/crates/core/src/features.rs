//! Feature providers: visual (`h_lambda`) and language (`h_txt`) token sets
//! for an episode, from precomputed files or deterministic mock generators.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trajectory::{Trajectory, TrajectoryStats};
use crate::world::instruction::tokenize;
use crate::world::scene::{ObjectClass, SceneState};
use crate::world::Episode;

pub const FEATURE_MAGIC: &[u8; 8] = b"TMSPFEAT";
pub const FEATURE_VERSION: u16 = 1;

/// Slots used by the mock scene layout; wider rows are zero-padded.
///
/// `[0, 12)` class one-hot, `12` x, `13` y, `14` container flag,
/// `15` global-row flag, `16..20` goal box `x0 y0 x1 y1` (global row only).
pub const SCENE_LAYOUT_WIDTH: usize = 20;
const SLOT_X: usize = 12;
const SLOT_Y: usize = 13;
const SLOT_CONTAINER: usize = 14;
const SLOT_GLOBAL: usize = 15;
const SLOT_GOAL: usize = 16;

/// Inputs to the fusion model for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub episode_id: String,
    /// `K_lambda × scene width`.
    pub h_lambda: Tensor<f64>,
    /// `K_t × text width`.
    pub h_txt: Tensor<f64>,
    /// Standardized trajectory; the model encodes it to `h_traj`.
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProviderSpec {
    PrecomputedFile { path: PathBuf },
    MockTextHash { seed: u64, dim: usize },
    SyntheticScene { width: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub text: ProviderSpec,
    pub scene: ProviderSpec,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            text: ProviderSpec::MockTextHash { seed: 0, dim: 128 },
            scene: ProviderSpec::SyntheticScene { width: 128 },
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.text {
            ProviderSpec::SyntheticScene { .. } => {
                return Err(Error::Config(
                    "text provider cannot be synthetic_scene".into(),
                ))
            }
            ProviderSpec::MockTextHash { dim: 0, .. } => {
                return Err(Error::Config("mock text dim must be ≥ 1".into()))
            }
            _ => {}
        }
        match &self.scene {
            ProviderSpec::MockTextHash { .. } => {
                return Err(Error::Config(
                    "scene provider cannot be mock_text_hash".into(),
                ))
            }
            ProviderSpec::SyntheticScene { width } if *width < SCENE_LAYOUT_WIDTH => {
                return Err(Error::Config(format!(
                    "synthetic scene width {width} is below the layout width {SCENE_LAYOUT_WIDTH}"
                )))
            }
            _ => {}
        }
        Ok(())
    }
}

/// Hash embedding: each token becomes a unit vector seeded by
/// `sha256(seed ‖ token)`. Row order follows token order.
pub fn embed_text_mock(instruction: &str, seed: u64, dim: usize) -> Result<Tensor<f64>> {
    let tokens = tokenize(instruction);
    if tokens.is_empty() {
        return Err(Error::Data("instruction is empty".into()));
    }
    let mut data = Vec::with_capacity(tokens.len() * dim);
    for token in &tokens {
        data.extend(token_vector(token, seed, dim));
    }
    Ok(Tensor::new(&[tokens.len(), dim], data)?)
}

fn token_vector(token: &str, seed: u64, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(token.as_bytes());
    let digest = hasher.finalize();
    let mut rng = ChaCha8Rng::from_seed(digest.into());
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// One row per object plus a trailing global row carrying the goal box.
pub fn mock_scene_features(scene: &SceneState, width: usize) -> Tensor<f64> {
    assert!(
        width >= SCENE_LAYOUT_WIDTH,
        "scene width below layout width"
    );
    let rows = scene.objects.len() + 1;
    let mut data = vec![0.0; rows * width];
    for (r, obj) in scene.objects.iter().enumerate() {
        let row = &mut data[r * width..(r + 1) * width];
        row[obj.class.index()] = 1.0;
        row[SLOT_X] = obj.x;
        row[SLOT_Y] = obj.y;
        row[SLOT_CONTAINER] = f64::from(u8::from(obj.container));
    }
    let global = &mut data[scene.objects.len() * width..];
    global[SLOT_GLOBAL] = 1.0;
    let g = scene.goal;
    global[SLOT_GOAL..SLOT_GOAL + 4].copy_from_slice(&[g.x0, g.y0, g.x1, g.y1]);
    debug_assert_eq!(ObjectClass::ALL.len(), SLOT_X);
    Tensor::from_parts(vec![rows, width], data)
}

/// In-memory index of a feature file.
#[derive(Clone, Debug, Default)]
pub struct FeatureIndex {
    ids: Vec<String>,
    records: HashMap<String, Tensor<f32>>,
}

impl FeatureIndex {
    pub fn get(&self, id: &str) -> Result<&Tensor<f32>> {
        self.records
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("episode id {id:?} not in feature file")))
    }

    /// Ids in file order.
    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Column count shared by all records, if any.
    pub fn width(&self) -> Option<usize> {
        self.ids.first().map(|id| self.records[id].shape()[1])
    }
}

pub fn encode_feature_file(records: &[(String, Tensor<f32>)]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(FEATURE_MAGIC);
    w.u16(FEATURE_VERSION);
    w.u32(u32::try_from(records.len()).map_err(|_| Error::Format("too many records".into()))?);
    for (id, m) in records {
        let (rows, cols) = m.dims2()?;
        w.short_str(id)?;
        w.u32(rows as u32);
        w.u32(cols as u32);
        w.f32s(m.data());
    }
    Ok(w.buf)
}

/// Parses a whole feature file; nothing is returned unless every record is
/// valid.
pub fn decode_feature_file(bytes: &[u8]) -> Result<FeatureIndex> {
    let mut r = Reader::new(bytes, "feature file");
    r.magic(FEATURE_MAGIC)?;
    let version = r.u16()?;
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!(
            "feature file version {version} is not supported"
        )));
    }
    let count = r.u32()? as usize;
    let mut index = FeatureIndex::default();
    for _ in 0..count {
        let id = r.short_str()?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let data = r.f32s(rows.saturating_mul(cols))?;
        let m = Tensor::new(&[rows, cols], data)
            .map_err(|e| Error::Format(format!("record {id:?}: {e}")))?;
        if index.records.contains_key(&id) {
            return Err(Error::Format(format!("duplicate record id {id:?}")));
        }
        index.ids.push(id.clone());
        index.records.insert(id, m);
    }
    r.finish()?;
    Ok(index)
}

pub fn write_feature_file(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    let bytes = encode_feature_file(records)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureIndex> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_feature_file(&bytes)
}

/// The stored matrix for `episode_id`, unmodified.
pub fn load_precomputed_features(path: &Path, episode_id: &str) -> Result<Tensor<f32>> {
    Ok(read_feature_file(path)?.get(episode_id)?.clone())
}

/// Resolves both providers once; lookups afterwards are read-only.
#[derive(Clone, Debug)]
pub struct FeatureProvider {
    config: FeatureConfig,
    text_file: Option<FeatureIndex>,
    scene_file: Option<FeatureIndex>,
}

fn load_index(spec: &ProviderSpec) -> Result<Option<FeatureIndex>> {
    match spec {
        ProviderSpec::PrecomputedFile { path } => {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "feature file {} does not exist",
                    path.display()
                )));
            }
            let index = read_feature_file(path)?;
            let width = index.width();
            if let Some(id) = index
                .ids
                .iter()
                .find(|id| Some(index.records[*id].shape()[1]) != width)
            {
                return Err(Error::Format(format!(
                    "record {id:?} has a different width from the rest"
                )));
            }
            if index.is_empty() {
                return Err(Error::Format(format!(
                    "feature file {} has no records",
                    path.display()
                )));
            }
            Ok(Some(index))
        }
        _ => Ok(None),
    }
}

impl FeatureProvider {
    pub fn new(config: &FeatureConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            text_file: load_index(&config.text)?,
            scene_file: load_index(&config.scene)?,
        })
    }

    pub fn text_width(&self) -> usize {
        match (&self.config.text, &self.text_file) {
            (ProviderSpec::MockTextHash { dim, .. }, _) => *dim,
            (_, Some(index)) => index.width().unwrap(),
            _ => unreachable!("validated provider"),
        }
    }

    pub fn scene_width(&self) -> usize {
        match (&self.config.scene, &self.scene_file) {
            (ProviderSpec::SyntheticScene { width }, _) => *width,
            (_, Some(index)) => index.width().unwrap(),
            _ => unreachable!("validated provider"),
        }
    }

    pub fn embed_text(&self, instruction: &str, episode_id: &str) -> Result<Tensor<f64>> {
        match (&self.config.text, &self.text_file) {
            (ProviderSpec::MockTextHash { seed, dim }, _) => {
                embed_text_mock(instruction, *seed, *dim)
            }
            (_, Some(index)) => Ok(index.get(episode_id)?.cast()),
            _ => unreachable!("validated provider"),
        }
    }

    pub fn scene_features(&self, scene: &SceneState, episode_id: &str) -> Result<Tensor<f64>> {
        match (&self.config.scene, &self.scene_file) {
            (ProviderSpec::SyntheticScene { width }, _) => {
                if scene.objects.is_empty() {
                    return Err(Error::Data(format!(
                        "episode {episode_id}: scene has no objects"
                    )));
                }
                Ok(mock_scene_features(scene, *width))
            }
            (_, Some(index)) => Ok(index.get(episode_id)?.cast()),
            _ => unreachable!("validated provider"),
        }
    }

    pub fn bundle(&self, episode: &Episode, stats: &TrajectoryStats) -> Result<FeatureBundle> {
        Ok(FeatureBundle {
            episode_id: episode.id.clone(),
            h_lambda: self.scene_features(&episode.scene, &episode.id)?,
            h_txt: self.embed_text(&episode.instruction, &episode.id)?,
            trajectory: stats.normalize(&episode.trajectory, &episode.id)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{GoalRegion, SceneObject};
    use rand::Rng;

    fn scene() -> SceneState {
        SceneState {
            objects: vec![
                SceneObject::new(ObjectClass::Apple, 0.2, 0.3),
                SceneObject::new(ObjectClass::Bowl, 0.6, 0.7),
            ],
            goal: GoalRegion {
                x0: 0.1,
                y0: 0.7,
                x1: 0.25,
                y1: 0.85,
            },
            target: 0,
        }
    }

    #[test]
    fn mock_text_is_deterministic_unit_rows() {
        let a = embed_text_mock("Pick apple from bowl.", 3, 16).unwrap();
        let b = embed_text_mock("pick apple from bowl", 3, 16).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[4, 16]);
        for r in 0..4 {
            let n: f64 = a.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(embed_text_mock("  ", 3, 16).is_err());
    }

    #[test]
    fn one_word_change_touches_one_row() {
        let a = embed_text_mock("pick apple", 0, 32).unwrap();
        let b = embed_text_mock("pick orange", 0, 32).unwrap();
        assert_eq!(a.row(0), b.row(0));
        assert_ne!(a.row(1), b.row(1));
        // Independent recomputation of the hash embedding.
        let digest: [u8; 32] = Sha256::new()
            .chain_update(0u64.to_le_bytes())
            .chain_update(b"orange")
            .finalize()
            .into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let raw: Vec<f64> = (0..32)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (x, y) in b.row(1).iter().zip(&raw) {
            assert_eq!(*x, y / norm);
        }
    }

    #[test]
    fn scene_rows_and_layout() {
        let m = mock_scene_features(&scene(), 24);
        assert_eq!(m.shape(), &[3, 24]);
        assert_eq!(m.at(&[0, ObjectClass::Apple.index()]), 1.0);
        assert_eq!(m.at(&[1, SLOT_CONTAINER]), 1.0);
        assert_eq!(m.at(&[2, SLOT_GLOBAL]), 1.0);
        assert_eq!(&m.row(2)[SLOT_GOAL..SLOT_GOAL + 4], &[0.1, 0.7, 0.25, 0.85]);
        assert!(m.row(0)[SCENE_LAYOUT_WIDTH..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn translation_is_local() {
        let base = scene();
        let mut moved = base.clone();
        moved.objects[1].x += 0.05;
        let (a, b) = (
            mock_scene_features(&base, 20),
            mock_scene_features(&moved, 20),
        );
        for r in 0..3 {
            for c in 0..20 {
                let d = b.at(&[r, c]) - a.at(&[r, c]);
                if (r, c) == (1, SLOT_X) {
                    assert!((d - 0.05).abs() < 1e-12);
                } else {
                    assert_eq!(d, 0.0);
                }
            }
        }
    }

    #[test]
    fn class_swap_changes_one_row() {
        let base = scene();
        let mut other = base.clone();
        other.objects[0] = SceneObject::new(ObjectClass::Orange, 0.2, 0.3);
        let (a, b) = (
            mock_scene_features(&base, 20),
            mock_scene_features(&other, 20),
        );
        let differing: Vec<usize> = (0..3).filter(|&r| a.row(r) != b.row(r)).collect();
        assert_eq!(differing, vec![0]);
    }

    fn random_records(rng: &mut impl Rng) -> Vec<(String, Tensor<f32>)> {
        (0..3)
            .map(|i| {
                let data = (0..3 * 32)
                    .map(|_| rng.random_range(-1e3f32..1e3))
                    .collect();
                (format!("ep{i}"), Tensor::new(&[3, 32], data).unwrap())
            })
            .collect()
    }

    #[test]
    fn feature_file_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let records = random_records(&mut rng);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.bin");
        write_feature_file(&path, &records).unwrap();
        let index = read_feature_file(&path).unwrap();
        assert_eq!(index.ids(), &["ep0", "ep1", "ep2"]);
        for (id, m) in &records {
            let got = load_precomputed_features(&path, id).unwrap();
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&got), bits(m));
        }
        let err = load_precomputed_features(&path, "nope").unwrap_err();
        assert!(matches!(&err, Error::Lookup(m) if m.contains("nope")));
    }

    #[test]
    fn corrupt_feature_files_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bytes = encode_feature_file(&random_records(&mut rng)).unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            decode_feature_file(&bad_magic),
            Err(Error::Format(_))
        ));
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(
            decode_feature_file(&bad_version),
            Err(Error::Format(_))
        ));
        for cut in [3, 12, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_feature_file(&bytes[..cut]), Err(Error::Format(_))),
                "cut {cut}"
            );
        }
        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(decode_feature_file(&trailing).is_err());
    }

    #[test]
    fn provider_reads_precomputed_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.bin");
        let m = Tensor::new(&[2, 5], (0..10).map(|v| v as f32 * 0.5).collect()).unwrap();
        write_feature_file(&path, &[("a".to_string(), m.clone())]).unwrap();
        let cfg = FeatureConfig {
            scene: ProviderSpec::PrecomputedFile { path: path.clone() },
            ..FeatureConfig::default()
        };
        let provider = FeatureProvider::new(&cfg).unwrap();
        assert_eq!(provider.scene_width(), 5);
        assert_eq!(
            provider.scene_features(&scene(), "a").unwrap(),
            m.cast::<f64>()
        );
        assert!(matches!(
            provider.scene_features(&scene(), "b"),
            Err(Error::Lookup(_))
        ));

        let missing = FeatureConfig {
            text: ProviderSpec::PrecomputedFile {
                path: dir.path().join("absent.bin"),
            },
            ..FeatureConfig::default()
        };
        assert!(matches!(
            FeatureProvider::new(&missing),
            Err(Error::Config(_))
        ));
    }
}
