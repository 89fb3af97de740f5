//! Ground-truth success labels.
//!
//! An episode succeeds iff all of:
//! 1. the first gripper-close event happens within [`GRASP_RADIUS`] of the
//!    target object (planar distance, world units);
//! 2. the gripper then opens exactly once and never closes again;
//! 3. at that opening step the end effector is inside the goal box.

use crate::trajectory::{Trajectory, GRIPPER_ROW};
use crate::world::scene::SceneState;

/// Maximum grasp offset from the target centre, world units.
pub const GRASP_RADIUS: f64 = 0.03;
/// Gripper aperture at or above which the gripper counts as closed.
pub const CLOSE_THRESHOLD: f64 = 0.5;

/// Maps a normalized coordinate in `[-1, 1]` to world units in `[0, 1]`.
pub fn to_world(v: f64) -> f64 {
    (v + 1.0) / 2.0
}

/// Inverse of [`to_world`].
pub fn to_normalized(w: f64) -> f64 {
    2.0 * w - 1.0
}

/// Planar end-effector position at step `t`, world units.
pub fn planar_position(traj: &Trajectory, t: usize) -> (f64, f64) {
    (to_world(traj.channel(0)[t]), to_world(traj.channel(1)[t]))
}

pub fn is_closed(aperture: f64) -> bool {
    aperture >= CLOSE_THRESHOLD
}

/// Step of the first gripper-close event.
pub fn first_close(traj: &Trajectory) -> Option<usize> {
    traj.channel(GRIPPER_ROW).iter().position(|&g| is_closed(g))
}

/// 1 for success, 0 for failure.
pub fn success_oracle(scene: &SceneState, traj: &Trajectory) -> u8 {
    let gripper = traj.channel(GRIPPER_ROW);
    let Some(close) = first_close(traj) else {
        return 0;
    };
    let (gx, gy) = planar_position(traj, close);
    if scene.target_object().distance_to(gx, gy) > GRASP_RADIUS {
        return 0;
    }
    let Some(open) = (close + 1..gripper.len()).find(|&t| !is_closed(gripper[t])) else {
        return 0;
    };
    if gripper[open..].iter().any(|&g| is_closed(g)) {
        return 0;
    }
    let (rx, ry) = planar_position(traj, open);
    u8::from(scene.goal.contains(rx, ry))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::DOF;
    use crate::world::scene::{GoalRegion, ObjectClass, SceneObject};

    fn scene() -> SceneState {
        SceneState {
            objects: vec![
                SceneObject::new(ObjectClass::Apple, 0.3, 0.4),
                SceneObject::new(ObjectClass::Can, 0.6, 0.2),
            ],
            goal: GoalRegion {
                x0: 0.7,
                y0: 0.7,
                x1: 0.85,
                y1: 0.85,
            },
            target: 0,
        }
    }

    fn step(x: f64, y: f64, g: f64) -> [f64; DOF] {
        let mut s = [0.0; DOF];
        s[0] = to_normalized(x);
        s[1] = to_normalized(y);
        s[GRIPPER_ROW] = g;
        s
    }

    fn pick_and_place(grasp: (f64, f64), release: (f64, f64)) -> Trajectory {
        Trajectory::from_steps(&[
            step(0.5, 0.5, 0.0),
            step(grasp.0, grasp.1, 0.0),
            step(grasp.0, grasp.1, 1.0),
            step(0.6, 0.6, 1.0),
            step(release.0, release.1, 1.0),
            step(release.0, release.1, 0.0),
            step(0.5, 0.5, 0.0),
        ])
        .unwrap()
    }

    #[test]
    fn exact_grasp_and_goal_centre_succeeds() {
        let s = scene();
        assert_eq!(
            success_oracle(&s, &pick_and_place((0.3, 0.4), s.goal.center())),
            1
        );
    }

    #[test]
    fn never_closing_fails() {
        let s = scene();
        let traj = Trajectory::from_steps(&[
            step(0.3, 0.4, 0.0),
            step(0.3, 0.4, 0.49),
            step(0.77, 0.77, 0.0),
        ])
        .unwrap();
        assert_eq!(success_oracle(&s, &traj), 0);
    }

    #[test]
    fn release_outside_goal_fails() {
        assert_eq!(
            success_oracle(&scene(), &pick_and_place((0.3, 0.4), (0.5, 0.9))),
            0
        );
    }

    #[test]
    fn never_releasing_fails() {
        let s = scene();
        let traj = Trajectory::from_steps(&[step(0.3, 0.4, 1.0), step(0.77, 0.77, 1.0)]).unwrap();
        assert_eq!(success_oracle(&s, &traj), 0);
    }

    #[test]
    fn re_closing_after_release_fails() {
        let s = scene();
        let mut steps = pick_and_place((0.3, 0.4), (0.77, 0.77)).steps();
        steps.push(step(0.77, 0.77, 1.0));
        assert_eq!(
            success_oracle(&s, &Trajectory::from_steps(&steps).unwrap()),
            0
        );
    }

    #[test]
    fn wrong_object_fails() {
        assert_eq!(
            success_oracle(&scene(), &pick_and_place((0.6, 0.2), (0.77, 0.77))),
            0
        );
    }

    #[test]
    fn label_flips_at_grasp_radius() {
        let s = scene();
        let (cx, cy) = (0.3, 0.4);
        let angle = 0.7f64;
        for (radius, expected) in [(GRASP_RADIUS - 1e-9, 1), (GRASP_RADIUS + 1e-9, 0)] {
            // Grasp positions are specified in world units, then stored
            // normalized; the round trip must not move them across the line.
            let gx = cx + radius * angle.cos();
            let gy = cy + radius * angle.sin();
            let traj = pick_and_place((gx, gy), (0.77, 0.77));
            assert_eq!(success_oracle(&s, &traj), expected, "radius {radius}");
        }
    }
}
