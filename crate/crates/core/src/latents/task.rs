use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// The five transfer tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Id,
    Style,
    Effect,
    Camera,
    Motion,
}

impl TaskKind {
    pub const ALL: [TaskKind; 5] = [
        TaskKind::Id,
        TaskKind::Style,
        TaskKind::Effect,
        TaskKind::Camera,
        TaskKind::Motion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Id => "id",
            TaskKind::Style => "style",
            TaskKind::Effect => "effect",
            TaskKind::Camera => "camera",
            TaskKind::Motion => "motion",
        }
    }

    pub fn category(self) -> TaskCategory {
        match self {
            TaskKind::Id | TaskKind::Style => TaskCategory::Appearance,
            TaskKind::Effect | TaskKind::Camera | TaskKind::Motion => TaskCategory::Temporal,
        }
    }

    /// Value written into every cell of the reference mask channels.
    pub fn mask_flag(self) -> f64 {
        match self {
            TaskKind::Effect | TaskKind::Camera | TaskKind::Motion => -1.0,
            TaskKind::Id => -2.0,
            TaskKind::Style => -3.0,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(TaskKind::Id),
            "style" => Ok(TaskKind::Style),
            "effect" => Ok(TaskKind::Effect),
            "camera" => Ok(TaskKind::Camera),
            "motion" => Ok(TaskKind::Motion),
            other => Err(format!(
                "unknown task '{other}' (expected one of id, style, effect, camera, motion)"
            )),
        }
    }
}

/// Appearance tasks are text-to-video, temporal tasks image-to-video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskCategory {
    Appearance,
    Temporal,
}

impl TaskCategory {
    pub fn is_image_conditioned(self) -> bool {
        self == TaskCategory::Temporal
    }
}

/// Identifier of the query bank a task reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct QueryBankId(pub TaskKind);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub category: TaskCategory,
    pub mask_flag: f64,
    pub query_bank: QueryBankId,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self {
            kind,
            category: kind.category(),
            mask_flag: kind.mask_flag(),
            query_bank: QueryBankId(kind),
        }
    }

    /// True when the fields agree with what `kind` dictates.
    pub fn is_consistent(&self) -> bool {
        *self == Self::new(self.kind)
    }
}

impl From<TaskKind> for TaskSpec {
    fn from(kind: TaskKind) -> Self {
        Self::new(kind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_and_categories() {
        for kind in TaskKind::ALL {
            let spec = TaskSpec::new(kind);
            let appearance = matches!(kind, TaskKind::Id | TaskKind::Style);
            assert_eq!(spec.category == TaskCategory::Appearance, appearance);
            let expected = match kind {
                TaskKind::Id => -2.0,
                TaskKind::Style => -3.0,
                _ => -1.0,
            };
            assert_eq!(spec.mask_flag, expected);
            assert!(spec.is_consistent());
        }
    }

    #[test]
    fn parse_names() {
        assert_eq!("Camera".parse::<TaskKind>().unwrap(), TaskKind::Camera);
        assert!("zoom".parse::<TaskKind>().is_err());
        for kind in TaskKind::ALL {
            assert_eq!(kind.name().parse::<TaskKind>().unwrap(), kind);
        }
    }
}
