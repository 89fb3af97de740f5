//! Template instructions and their inverse parse.

use crate::error::{Error, Result};
use crate::world::scene::{ObjectClass, SceneState, Task};

/// Lowercases, strips punctuation and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| !c.is_ascii_punctuation())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

pub fn render_instruction(scene: &SceneState, task: &Task) -> String {
    let name = |i: usize| scene.objects[i].class.name();
    match *task {
        Task::Pick { target } => format!("pick {}", name(target)),
        Task::PickFrom { target, container } => {
            format!("pick {} from {}", name(target), name(container))
        }
        Task::MoveNear { target, reference } => {
            format!("move {} near {}", name(target), name(reference))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Pick,
    PickFrom,
    MoveNear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParsedInstruction {
    pub kind: TaskKind,
    pub target: ObjectClass,
    /// Container for `PickFrom`, reference object for `MoveNear`.
    pub other: Option<ObjectClass>,
}

/// Inverse of [`render_instruction`] under the template grammar.
pub fn parse_instruction(text: &str) -> Result<ParsedInstruction> {
    let tokens = tokenize(text);
    let words: Vec<&str> = tokens.iter().map(String::as_str).collect();
    let class = |w: &str| {
        ObjectClass::from_name(w)
            .ok_or_else(|| Error::Data(format!("unknown object `{w}` in instruction `{text}`")))
    };
    match words.as_slice() {
        ["pick", t] => Ok(ParsedInstruction {
            kind: TaskKind::Pick,
            target: class(t)?,
            other: None,
        }),
        ["pick", t, "from", c] => Ok(ParsedInstruction {
            kind: TaskKind::PickFrom,
            target: class(t)?,
            other: Some(class(c)?),
        }),
        ["move", t, "near", r] => Ok(ParsedInstruction {
            kind: TaskKind::MoveNear,
            target: class(t)?,
            other: Some(class(r)?),
        }),
        _ => Err(Error::Data(format!(
            "instruction `{text}` does not match any template"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::scene::{GoalRegion, SceneObject};

    fn scene() -> SceneState {
        SceneState {
            objects: vec![
                SceneObject::new(ObjectClass::Apple, 0.3, 0.3),
                SceneObject::new(ObjectClass::Bowl, 0.35, 0.3),
                SceneObject::new(ObjectClass::Orange, 0.7, 0.6),
            ],
            goal: GoalRegion {
                x0: 0.8,
                y0: 0.1,
                x1: 0.95,
                y1: 0.25,
            },
            target: 0,
        }
    }

    #[test]
    fn templates() {
        let s = scene();
        assert_eq!(
            render_instruction(&s, &Task::Pick { target: 0 }),
            "pick apple"
        );
        assert_eq!(
            render_instruction(
                &s,
                &Task::PickFrom {
                    target: 0,
                    container: 1
                }
            ),
            "pick apple from bowl"
        );
        assert_eq!(
            render_instruction(
                &s,
                &Task::MoveNear {
                    target: 0,
                    reference: 2
                }
            ),
            "move apple near orange"
        );
    }

    #[test]
    fn parse_inverts_render() {
        let p = parse_instruction("Pick apple from bowl.").unwrap();
        assert_eq!(p.kind, TaskKind::PickFrom);
        assert_eq!(p.target, ObjectClass::Apple);
        assert_eq!(p.other, Some(ObjectClass::Bowl));
        assert!(parse_instruction("pick").is_err());
        assert!(parse_instruction("pick unicorn").is_err());
        assert!(parse_instruction("throw apple").is_err());
    }

    #[test]
    fn tokenizer_normalizes() {
        assert_eq!(
            tokenize("  Pick an Apple, please! "),
            vec!["pick", "an", "apple", "please"]
        );
        assert!(tokenize(" ... ").is_empty());
    }
}
