//! Seeded pick-and-place episode generator.
//!
//! A successful plan approaches the target, closes on it, carries it to the
//! goal box and opens there. Failures perturb that plan in one of four ways;
//! the label always comes from [`success_oracle`] on the final trajectory.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{Trajectory, DOF, GRIPPER_ROW};
use crate::world::dataset::{Episode, Split};
use crate::world::instruction::render_instruction;
use crate::world::oracle::{success_oracle, to_normalized, GRASP_RADIUS};
use crate::world::scene::{GoalRegion, ObjectClass, SceneObject, SceneState, Task};

/// Minimum distance between object centres.
pub const MIN_SEPARATION: f64 = 0.05;
const PLACEMENT_ATTEMPTS: usize = 100;
/// Success grasps land within this radius of the target.
const GRASP_NOISE: f64 = 0.012;
const MISS_OFFSET: (f64, f64) = (0.06, 0.15);
const PATH_JITTER: f64 = 0.002;
const Z_START: f64 = 0.25;
const Z_HOVER: f64 = 0.2;
const Z_LOW: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureMode {
    /// Closes at an offset from the target, outside the grasp radius.
    MissGrasp,
    /// Closes on a different object.
    WrongObject,
    /// Opens in transit, outside the goal.
    EarlyRelease,
    /// Gripper never reaches the close threshold.
    NoClose,
}

impl FailureMode {
    pub const ALL: [FailureMode; 4] = [
        FailureMode::MissGrasp,
        FailureMode::WrongObject,
        FailureMode::EarlyRelease,
        FailureMode::NoClose,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Success,
    Failure(FailureMode),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FailureMix {
    pub miss_grasp: f64,
    pub wrong_object: f64,
    pub early_release: f64,
    pub no_close: f64,
}

impl Default for FailureMix {
    fn default() -> Self {
        Self {
            miss_grasp: 0.35,
            wrong_object: 0.30,
            early_release: 0.20,
            no_close: 0.15,
        }
    }
}

impl FailureMix {
    fn weights(&self) -> [f64; 4] {
        [
            self.miss_grasp,
            self.wrong_object,
            self.early_release,
            self.no_close,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.85,
            val: 0.075,
            test: 0.075,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub positive_rate: f64,
    pub min_steps: usize,
    pub max_steps: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub goal_side_min: f64,
    pub goal_side_max: f64,
    pub failure_mix: FailureMix,
    pub split: SplitRatios,
    /// Trajectory values are rounded to this many decimals.
    pub decimals: u32,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            positive_rate: 0.5,
            min_steps: 40,
            max_steps: 200,
            min_objects: 3,
            max_objects: 5,
            goal_side_min: 0.1,
            goal_side_max: 0.2,
            failure_mix: FailureMix::default(),
            split: SplitRatios::default(),
            decimals: 4,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.positive_rate) {
            return bad("positive_rate must be in [0, 1]");
        }
        if self.min_steps < 12 || self.min_steps > self.max_steps {
            return bad("need 12 <= min_steps <= max_steps");
        }
        if self.min_objects < 3 || self.min_objects > self.max_objects || self.max_objects > 8 {
            return bad("need 3 <= min_objects <= max_objects <= 8");
        }
        if !(self.goal_side_min > 0.05
            && self.goal_side_min <= self.goal_side_max
            && self.goal_side_max <= 0.3)
        {
            return bad("need 0.05 < goal_side_min <= goal_side_max <= 0.3");
        }
        let w = self.failure_mix.weights();
        if w.iter().any(|&v| v < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return bad("failure_mix weights must be non-negative with a positive sum");
        }
        let r = &self.split;
        if [r.train, r.val, r.test].iter().any(|&v| v < 0.0)
            || ((r.train + r.val + r.test) - 1.0).abs() > 1e-9
        {
            return bad("split ratios must be non-negative and sum to 1");
        }
        if self.decimals < 3 || self.decimals > 12 {
            return bad("decimals must be between 3 and 12");
        }
        Ok(())
    }
}

/// Seed of episode `index` under master seed `master`.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// Split of episode `index`, drawn from a hash of `(master, index)`.
pub fn split_for(master: u64, index: u64, ratios: &SplitRatios) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(master ^ 0x9e37_79b9_7f4a_7c15);
    rng.set_stream(index);
    let u: f64 = rng.random();
    if u < ratios.train {
        Split::Train
    } else if u < ratios.train + ratios.val {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generated episode plus the outcome the generator aimed for.
#[derive(Clone, Debug)]
pub struct Sample {
    pub episode: Episode,
    pub outcome: Outcome,
}

/// Deterministic episode for `seed`; the split defaults to train.
pub fn sample_episode(id: &str, seed: u64, config: &GenConfig) -> Result<Episode> {
    Ok(sample_with_outcome(id, seed, config)?.episode)
}

pub fn sample_with_outcome(id: &str, seed: u64, config: &GenConfig) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let outcome = if rng.random::<f64>() < config.positive_rate {
        Outcome::Success
    } else {
        Outcome::Failure(pick_weighted(
            &mut rng,
            &FailureMode::ALL,
            &config.failure_mix.weights(),
        ))
    };
    for _ in 0..PLACEMENT_ATTEMPTS {
        let (scene, task) = sample_scene(&mut rng, config)?;
        let Some(trajectory) = plan_trajectory(&mut rng, &scene, &task, outcome, config)? else {
            continue;
        };
        let label = success_oracle(&scene, &trajectory);
        if label != u8::from(outcome == Outcome::Success) {
            continue;
        }
        let episode = Episode {
            id: id.to_string(),
            instruction: render_instruction(&scene, &task),
            scene,
            trajectory,
            label,
            split: Split::Train,
        };
        return Ok(Sample { episode, outcome });
    }
    Err(Error::Generation(format!(
        "episode {id}: no consistent {outcome:?} episode after {PLACEMENT_ATTEMPTS} attempts"
    )))
}

fn pick_weighted<T: Copy>(rng: &mut impl Rng, items: &[T], weights: &[f64]) -> T {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&item, &w) in items.iter().zip(weights) {
        if u < w {
            return item;
        }
        u -= w;
    }
    *items
        .iter()
        .zip(weights)
        .rev()
        .find(|(_, &w)| w > 0.0)
        .unwrap()
        .0
}

fn polar(rng: &mut impl Rng, r_min: f64, r_max: f64) -> (f64, f64) {
    // Uniform over the annulus area.
    let r = (rng.random_range(r_min * r_min..=r_max * r_max)).sqrt();
    let theta = rng.random_range(0.0..std::f64::consts::TAU);
    (r * theta.cos(), r * theta.sin())
}

fn uniform_xy(rng: &mut impl Rng, lo: f64, hi: f64) -> (f64, f64) {
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

#[derive(Clone, Copy)]
enum Kind {
    Pick,
    PickFrom,
    MoveNear,
}

/// Samples a scene and its task; objects are shuffled so the target index
/// carries no information.
pub(crate) fn sample_scene(rng: &mut impl Rng, config: &GenConfig) -> Result<(SceneState, Task)> {
    let graspable: Vec<ObjectClass> = ObjectClass::ALL
        .iter()
        .copied()
        .filter(|c| !c.is_container())
        .collect();
    let containers: Vec<ObjectClass> = ObjectClass::ALL
        .iter()
        .copied()
        .filter(|c| c.is_container())
        .collect();
    for _ in 0..PLACEMENT_ATTEMPTS {
        let kind = [Kind::Pick, Kind::PickFrom, Kind::MoveNear][rng.random_range(0..3)];
        let count = rng.random_range(config.min_objects..=config.max_objects);
        let mut g = graspable.clone();
        let mut c = containers.clone();
        g.shuffle(rng);
        c.shuffle(rng);

        // Roles first: target, then the container / reference, then one more
        // graspable so a wrong-object grasp is always possible.
        let mut objects: Vec<SceneObject> = Vec::with_capacity(count);
        let target_class = g.remove(0);
        let (tx, ty) = uniform_xy(rng, 0.08, 0.92);
        objects.push(SceneObject::new(target_class, tx, ty));
        let mut second = None;
        match kind {
            Kind::PickFrom => {
                let (dx, dy) = polar(rng, MIN_SEPARATION + 0.005, 0.08);
                objects.push(SceneObject::new(c.remove(0), tx + dx, ty + dy));
                second = Some(1);
            }
            Kind::MoveNear => {
                let class = if rng.random::<f64>() < 0.3 {
                    c.remove(0)
                } else {
                    g.remove(0)
                };
                let (x, y) = uniform_xy(rng, 0.08, 0.92);
                objects.push(SceneObject::new(class, x, y));
                second = Some(1);
            }
            Kind::Pick => {}
        }
        let (x, y) = uniform_xy(rng, 0.08, 0.92);
        objects.push(SceneObject::new(g.remove(0), x, y));
        let mut pool: Vec<ObjectClass> = g.into_iter().chain(c).collect();
        pool.shuffle(rng);
        while objects.len() < count {
            let (x, y) = uniform_xy(rng, 0.08, 0.92);
            objects.push(SceneObject::new(pool.remove(0), x, y));
        }

        let in_bounds = objects
            .iter()
            .all(|o| (0.05..=0.95).contains(&o.x) && (0.05..=0.95).contains(&o.y));
        let probe = SceneState {
            objects: objects.clone(),
            goal: GoalRegion {
                x0: 0.0,
                y0: 0.0,
                x1: 0.0,
                y1: 0.0,
            },
            target: 0,
        };
        if !in_bounds || probe.min_separation() < MIN_SEPARATION {
            continue;
        }

        let side = rng.random_range(config.goal_side_min..=config.goal_side_max);
        let half = side / 2.0;
        let goal = match kind {
            Kind::MoveNear => {
                let r = &objects[1];
                GoalRegion {
                    x0: (r.x - half).max(0.0),
                    y0: (r.y - half).max(0.0),
                    x1: (r.x + half).min(1.0),
                    y1: (r.y + half).min(1.0),
                }
            }
            _ => {
                let (cx, cy) = uniform_xy(rng, 0.02 + half, 0.98 - half);
                GoalRegion {
                    x0: cx - half,
                    y0: cy - half,
                    x1: cx + half,
                    y1: cy + half,
                }
            }
        };
        // The target must start clearly outside the goal.
        let margin = 0.03;
        let t = &objects[0];
        if t.x > goal.x0 - margin
            && t.x < goal.x1 + margin
            && t.y > goal.y0 - margin
            && t.y < goal.y1 + margin
        {
            continue;
        }

        let mut order: Vec<usize> = (0..objects.len()).collect();
        order.shuffle(rng);
        let position = |original: usize| order.iter().position(|&o| o == original).unwrap();
        let shuffled: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
        let target = position(0);
        let task = match (kind, second) {
            (Kind::PickFrom, Some(s)) => Task::PickFrom {
                target,
                container: position(s),
            },
            (Kind::MoveNear, Some(s)) => Task::MoveNear {
                target,
                reference: position(s),
            },
            _ => Task::Pick { target },
        };
        return Ok((
            SceneState {
                objects: shuffled,
                goal,
                target,
            },
            task,
        ));
    }
    Err(Error::Generation(format!(
        "no feasible scene after {PLACEMENT_ATTEMPTS} placement attempts"
    )))
}

fn clamp_table(v: f64) -> f64 {
    v.clamp(0.02, 0.98)
}

fn round_to(v: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    (v * scale).round() / scale
}

/// Plans the end-effector trajectory for `outcome`. `None` when the sampled
/// perturbation cannot be realized (the caller resamples).
fn plan_trajectory(
    rng: &mut impl Rng,
    scene: &SceneState,
    task: &Task,
    outcome: Outcome,
    config: &GenConfig,
) -> Result<Option<Trajectory>> {
    let steps = rng.random_range(config.min_steps..=config.max_steps);
    let target = scene.target_object();

    let grasp = match outcome {
        Outcome::Failure(FailureMode::MissGrasp) => {
            let (dx, dy) = polar(rng, MISS_OFFSET.0, MISS_OFFSET.1);
            (clamp_table(target.x + dx), clamp_table(target.y + dy))
        }
        Outcome::Failure(FailureMode::WrongObject) => {
            let others: Vec<&SceneObject> = scene
                .objects
                .iter()
                .enumerate()
                .filter(|&(i, o)| i != task.target() && !o.container)
                .map(|(_, o)| o)
                .collect();
            let other = others[rng.random_range(0..others.len())];
            let (dx, dy) = polar(rng, 0.0, GRASP_NOISE);
            (other.x + dx, other.y + dy)
        }
        _ => {
            let (dx, dy) = polar(rng, 0.0, GRASP_NOISE);
            (target.x + dx, target.y + dy)
        }
    };
    if matches!(outcome, Outcome::Failure(FailureMode::MissGrasp))
        && target.distance_to(grasp.0, grasp.1) <= 2.0 * GRASP_RADIUS
    {
        return Ok(None);
    }
    let goal = scene.goal;
    let inset = 0.01;
    let release = (
        rng.random_range(goal.x0 + inset..goal.x1 - inset),
        rng.random_range(goal.y0 + inset..goal.y1 - inset),
    );
    let start = uniform_xy(rng, 0.1, 0.9);

    // Keyframe times as fractions of the episode; each is jittered.
    let base = [0.22, 0.32, 0.40, 0.48, 0.70, 0.78, 0.86];
    let mut frac = [0.0; 9];
    for (i, &b) in base.iter().enumerate() {
        frac[i + 1] = b + rng.random_range(-0.02..0.02);
    }
    frac[8] = 1.0;
    let last = (steps - 1) as f64;
    let mut idx = [0usize; 9];
    for i in 1..9 {
        idx[i] = ((frac[i] * last).round() as usize).max(idx[i - 1] + 1);
    }
    if idx[8] > steps - 1 {
        return Ok(None);
    }
    let keys: [(f64, f64, f64); 9] = [
        (start.0, start.1, Z_START),
        (grasp.0, grasp.1, Z_HOVER),
        (grasp.0, grasp.1, Z_LOW),
        (grasp.0, grasp.1, Z_LOW),
        (grasp.0, grasp.1, Z_HOVER),
        (release.0, release.1, Z_HOVER),
        (release.0, release.1, Z_LOW),
        (release.0, release.1, Z_LOW),
        (release.0, release.1, Z_START),
    ];
    let mut pos = vec![(0.0, 0.0, 0.0); steps];
    for seg in 0..8 {
        let (a, b) = (idx[seg], idx[seg + 1]);
        for (t, p) in pos.iter_mut().enumerate().take(b + 1).skip(a) {
            let s = (t - a) as f64 / (b - a) as f64;
            let (ka, kb) = (keys[seg], keys[seg + 1]);
            *p = (
                ka.0 + s * (kb.0 - ka.0),
                ka.1 + s * (kb.1 - ka.1),
                ka.2 + s * (kb.2 - ka.2),
            );
        }
    }
    for p in &mut pos {
        p.0 = clamp_table(p.0 + rng.random_range(-PATH_JITTER..PATH_JITTER));
        p.1 = clamp_table(p.1 + rng.random_range(-PATH_JITTER..PATH_JITTER));
        p.2 = (p.2 + rng.random_range(-PATH_JITTER..PATH_JITTER)).max(0.0);
    }

    let close_at = idx[2];
    let mut open_at = idx[6];
    let mut closed_value = 1.0;
    match outcome {
        Outcome::Failure(FailureMode::NoClose) => closed_value = rng.random_range(0.1..0.4),
        Outcome::Failure(FailureMode::EarlyRelease) => {
            let (a, b) = (idx[4], idx[5]);
            let found = (0..20).find_map(|_| {
                let t = a + ((b - a) as f64 * rng.random_range(0.2..0.8)).round() as usize;
                let (x, y, _) = pos[t];
                let outside = x < goal.x0 - inset
                    || x > goal.x1 + inset
                    || y < goal.y0 - inset
                    || y > goal.y1 + inset;
                (t > close_at && outside).then_some(t)
            });
            match found {
                Some(t) => open_at = t,
                None => return Ok(None),
            }
        }
        _ => {}
    }

    let roll = rng.random_range(-0.1..0.1);
    let pitch = rng.random_range(-0.1..0.1);
    let yaw = rng.random_range(-0.5..0.5);
    let rows: Vec<[f64; DOF]> = pos
        .iter()
        .enumerate()
        .map(|(t, &(x, y, z))| {
            let mut s = [0.0; DOF];
            s[0] = to_normalized(x);
            s[1] = to_normalized(y);
            s[2] = to_normalized(z);
            s[3] = roll;
            s[4] = pitch;
            s[5] = yaw;
            s[GRIPPER_ROW] = if (close_at..open_at).contains(&t) {
                closed_value
            } else {
                0.0
            };
            s.map(|v| round_to(v, config.decimals))
        })
        .collect();
    Ok(Some(Trajectory::from_steps(&rows)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::oracle::first_close;

    #[test]
    fn same_seed_same_episode() {
        let cfg = GenConfig::default();
        let a = sample_episode("e", 42, &cfg).unwrap();
        let b = sample_episode("e", 42, &cfg).unwrap();
        assert_eq!(a, b);
        let c = sample_episode("e", 43, &cfg).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_invariants_hold() {
        let cfg = GenConfig::default();
        for seed in 0..200 {
            let ep = sample_episode("e", seed, &cfg).unwrap();
            let s = &ep.scene;
            assert!(s.min_separation() >= MIN_SEPARATION);
            assert!((3..=5).contains(&s.objects.len()));
            assert!(!s.target_object().container);
            assert!((40..=200).contains(&ep.trajectory.len()));
            assert!(ep.trajectory.values().data().iter().all(|v| v.abs() <= 1.0));
            let classes: std::collections::BTreeSet<_> =
                s.objects.iter().map(|o| o.class).collect();
            assert_eq!(classes.len(), s.objects.len(), "classes are unique");
        }
    }

    #[test]
    fn no_close_failures_stay_below_threshold() {
        let cfg = GenConfig {
            positive_rate: 0.0,
            failure_mix: FailureMix {
                miss_grasp: 0.0,
                wrong_object: 0.0,
                early_release: 0.0,
                no_close: 1.0,
            },
            ..GenConfig::default()
        };
        for seed in 0..30 {
            let sample = sample_with_outcome("e", seed, &cfg).unwrap();
            assert_eq!(sample.outcome, Outcome::Failure(FailureMode::NoClose));
            assert!(first_close(&sample.episode.trajectory).is_none());
            assert_eq!(sample.episode.label, 0);
        }
    }

    #[test]
    fn every_failure_mode_is_realizable() {
        for (i, mode) in FailureMode::ALL.iter().enumerate() {
            let mut w = [0.0; 4];
            w[i] = 1.0;
            let cfg = GenConfig {
                positive_rate: 0.0,
                failure_mix: FailureMix {
                    miss_grasp: w[0],
                    wrong_object: w[1],
                    early_release: w[2],
                    no_close: w[3],
                },
                ..GenConfig::default()
            };
            for seed in 0..25 {
                let s = sample_with_outcome("e", seed, &cfg).unwrap();
                assert_eq!(s.outcome, Outcome::Failure(*mode));
                assert_eq!(s.episode.label, 0);
            }
        }
    }

    #[test]
    fn positive_rate_monte_carlo() {
        let cfg = GenConfig::default();
        let positives: usize = (0..1000)
            .map(|i| sample_episode("e", episode_seed(5, i), &cfg).unwrap().label as usize)
            .sum();
        let rate = positives as f64 / 1000.0;
        assert!((0.48..=0.52).contains(&rate), "rate {rate}");
    }

    #[test]
    fn split_hash_ratios() {
        let ratios = SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        };
        let mut counts = [0usize; 3];
        for i in 0..1000 {
            counts[split_for(9, i, &ratios) as usize] += 1;
        }
        assert!((770..=830).contains(&counts[0]), "{counts:?}");
        assert!((70..=130).contains(&counts[1]), "{counts:?}");
        assert!((70..=130).contains(&counts[2]), "{counts:?}");
    }

    #[test]
    fn config_validation() {
        assert!(GenConfig::default().validate().is_ok());
        let bad = GenConfig {
            positive_rate: 1.5,
            ..GenConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = GenConfig {
            min_steps: 300,
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
    }
}
