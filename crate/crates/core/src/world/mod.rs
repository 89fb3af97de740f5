//! Synthetic tabletop world: scenes, instructions, the success oracle and the
//! episode generator.

pub mod dataset;
pub mod generator;
pub mod instruction;
pub mod oracle;
pub mod scene;

pub use dataset::{
    generate_dataset, generate_episodes, read_episodes, revalidate, write_episodes, DatasetStats,
    Episode, Split,
};
pub use generator::{sample_episode, FailureMode, GenConfig};
pub use oracle::success_oracle;
pub use scene::{GoalRegion, ObjectClass, SceneObject, SceneState, Task};
