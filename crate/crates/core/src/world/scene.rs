use serde::{Deserialize, Serialize};

/// Object vocabulary of the synthetic world.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectClass {
    Apple,
    Orange,
    Banana,
    Can,
    Coke,
    Sponge,
    Chips,
    Rxbar,
    Bottle,
    Bowl,
    Drawer,
    Tray,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 12] = [
        ObjectClass::Apple,
        ObjectClass::Orange,
        ObjectClass::Banana,
        ObjectClass::Can,
        ObjectClass::Coke,
        ObjectClass::Sponge,
        ObjectClass::Chips,
        ObjectClass::Rxbar,
        ObjectClass::Bottle,
        ObjectClass::Bowl,
        ObjectClass::Drawer,
        ObjectClass::Tray,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ObjectClass::Apple => "apple",
            ObjectClass::Orange => "orange",
            ObjectClass::Banana => "banana",
            ObjectClass::Can => "can",
            ObjectClass::Coke => "coke",
            ObjectClass::Sponge => "sponge",
            ObjectClass::Chips => "chips",
            ObjectClass::Rxbar => "rxbar",
            ObjectClass::Bottle => "bottle",
            ObjectClass::Bowl => "bowl",
            ObjectClass::Drawer => "drawer",
            ObjectClass::Tray => "tray",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|c| c.name() == name)
    }

    pub fn is_container(self) -> bool {
        matches!(
            self,
            ObjectClass::Bowl | ObjectClass::Drawer | ObjectClass::Tray
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub x: f64,
    pub y: f64,
    pub container: bool,
}

impl SceneObject {
    pub fn new(class: ObjectClass, x: f64, y: f64) -> Self {
        Self {
            class,
            x,
            y,
            container: class.is_container(),
        }
    }

    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (self.x - x).hypot(self.y - y)
    }
}

/// Axis-aligned goal box in world coordinates, bounds inclusive.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoalRegion {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl GoalRegion {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }
}

/// Pre-manipulation scene: objects on a unit table, the goal box, and which
/// object the instruction refers to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneState {
    pub objects: Vec<SceneObject>,
    pub goal: GoalRegion,
    /// Index into `objects` of the object to manipulate.
    pub target: usize,
}

impl SceneState {
    pub fn target_object(&self) -> &SceneObject {
        &self.objects[self.target]
    }

    pub fn distractor_count(&self) -> usize {
        self.objects.len().saturating_sub(1)
    }

    pub fn find(&self, class: ObjectClass) -> Option<usize> {
        self.objects.iter().position(|o| o.class == class)
    }

    /// Smallest pairwise distance between objects.
    pub fn min_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                best = best.min(a.distance_to(b.x, b.y));
            }
        }
        best
    }
}

/// What the instruction asks for. Indices refer to `SceneState::objects`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Pick { target: usize },
    PickFrom { target: usize, container: usize },
    MoveNear { target: usize, reference: usize },
}

impl Task {
    pub fn target(&self) -> usize {
        match *self {
            Task::Pick { target }
            | Task::PickFrom { target, .. }
            | Task::MoveNear { target, .. } => target,
        }
    }
}
