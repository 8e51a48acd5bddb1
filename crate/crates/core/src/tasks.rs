//! Extraction targets, their label schemas, and per-sample label vectors.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;

/// The seven extraction targets, in canonical order.
///
/// The declaration order is load-bearing: it fixes head order in the model,
/// key order in serialized label maps, and row order in every report table.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum TaskId {
    T,
    N,
    M,
    Grade,
    #[serde(rename = "ER")]
    Er,
    #[serde(rename = "PR")]
    Pr,
    #[serde(rename = "HER2")]
    Her2,
}

impl TaskId {
    /// Every task, in canonical order.
    pub const ALL: [TaskId; 7] = [
        TaskId::T,
        TaskId::N,
        TaskId::M,
        TaskId::Grade,
        TaskId::Er,
        TaskId::Pr,
        TaskId::Her2,
    ];

    /// Short name used in serialized files and report tables.
    pub fn name(self) -> &'static str {
        match self {
            TaskId::T => "T",
            TaskId::N => "N",
            TaskId::M => "M",
            TaskId::Grade => "Grade",
            TaskId::Er => "ER",
            TaskId::Pr => "PR",
            TaskId::Her2 => "HER2",
        }
    }

    /// Human-readable field name used in the `Field:` block of prompts.
    pub fn field_name(self) -> &'static str {
        match self {
            TaskId::T => "T Stage",
            TaskId::N => "N Stage",
            TaskId::M => "M Stage",
            TaskId::Grade => "Histologic Grade",
            TaskId::Er => "ER Status",
            TaskId::Pr => "PR Status",
            TaskId::Her2 => "HER2 Status",
        }
    }

    /// Parses a short name back into a task id.
    pub fn from_name(name: &str) -> Option<TaskId> {
        TaskId::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Position of this task in [`TaskId::ALL`].
    pub fn index(self) -> usize {
        TaskId::ALL.iter().position(|t| *t == self).expect("task in ALL")
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ordered class list for one task. Class indices are positions in `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSchema {
    pub task: TaskId,
    pub classes: Vec<String>,
}

impl TaskSchema {
    pub fn new(task: TaskId, classes: &[&str]) -> Self {
        TaskSchema {
            task,
            classes: classes.iter().map(|c| c.to_string()).collect(),
        }
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Index of a class label, if it belongs to this schema.
    pub fn class_index(&self, label: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == label)
    }
}

/// The default clinical schema set for all seven tasks.
pub fn default_schemas() -> Vec<TaskSchema> {
    vec![
        TaskSchema::new(TaskId::T, &["pTis", "T0", "T1", "T2", "T3", "T4"]),
        TaskSchema::new(TaskId::N, &["N0", "N1", "N1mi", "N2", "N3"]),
        TaskSchema::new(TaskId::M, &["M0", "M1"]),
        TaskSchema::new(TaskId::Grade, &["G1", "G2", "G3"]),
        TaskSchema::new(TaskId::Er, &["Positive", "Negative", "Equivocal"]),
        TaskSchema::new(TaskId::Pr, &["Positive", "Negative", "Equivocal"]),
        TaskSchema::new(TaskId::Her2, &["Positive", "Negative", "Equivocal"]),
    ]
}

/// Looks up the schema for a task within a schema list.
pub fn schema_for(schemas: &[TaskSchema], task: TaskId) -> Option<&TaskSchema> {
    schemas.iter().find(|s| s.task == task)
}

/// Per-sample labels. A task absent from the map has no label available
/// ("missing"), which is an expected state, not an error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelVector {
    present: BTreeMap<TaskId, usize>,
}

impl LabelVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// A vector carrying exactly one labeled task.
    pub fn single(task: TaskId, class: usize) -> Self {
        let mut v = Self::new();
        v.set(task, class);
        v
    }

    pub fn set(&mut self, task: TaskId, class: usize) {
        self.present.insert(task, class);
    }

    pub fn clear(&mut self, task: TaskId) {
        self.present.remove(&task);
    }

    /// Class index for a task, or `None` when the label is missing.
    pub fn get(&self, task: TaskId) -> Option<usize> {
        self.present.get(&task).copied()
    }

    /// Labeled tasks in canonical order.
    pub fn present_tasks(&self) -> impl Iterator<Item = (TaskId, usize)> + '_ {
        self.present.iter().map(|(t, c)| (*t, *c))
    }

    /// Number of labeled tasks.
    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_class_counts() {
        let schemas = default_schemas();
        let counts: Vec<usize> = schemas.iter().map(|s| s.class_count()).collect();
        assert_eq!(counts, vec![6, 5, 2, 3, 3, 3, 3]);
        let total: usize = counts.iter().sum();
        assert_eq!(total, 25);
    }

    #[test]
    fn class_index_round_trips() {
        let schemas = default_schemas();
        for schema in &schemas {
            for (idx, class) in schema.classes.iter().enumerate() {
                assert_eq!(schema.class_index(class), Some(idx));
            }
            assert_eq!(schema.class_index("banana"), None);
        }
    }

    #[test]
    fn task_names_round_trip() {
        for task in TaskId::ALL {
            assert_eq!(TaskId::from_name(task.name()), Some(task));
        }
        assert_eq!(TaskId::from_name("XYZ"), None);
    }

    #[test]
    fn task_serde_uses_short_names() {
        let json = serde_json::to_string(&TaskId::Her2).unwrap();
        assert_eq!(json, "\"HER2\"");
        let back: TaskId = serde_json::from_str("\"ER\"").unwrap();
        assert_eq!(back, TaskId::Er);
    }

    #[test]
    fn label_vector_tracks_presence() {
        let mut v = LabelVector::new();
        assert!(v.is_empty());
        v.set(TaskId::Her2, 2);
        v.set(TaskId::T, 1);
        assert_eq!(v.get(TaskId::T), Some(1));
        assert_eq!(v.get(TaskId::N), None);
        let order: Vec<TaskId> = v.present_tasks().map(|(t, _)| t).collect();
        assert_eq!(order, vec![TaskId::T, TaskId::Her2]);
        v.clear(TaskId::T);
        assert_eq!(v.len(), 1);
    }
}
