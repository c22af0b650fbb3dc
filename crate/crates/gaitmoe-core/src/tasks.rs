//! Task roster: what the model predicts and how tasks group for masking.
//!
//! The full roster is 17 psychological-attribute classification tasks plus
//! gender classification, BMI regression, and identity embedding — 20 heads
//! total. Masking operates on four groups (traits, gender, BMI, identity);
//! the ablation grid trains every published combination of those groups.

use alloc::string::String;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

/// Output contract of one prediction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    /// Softmax classification over `classes` labels.
    Classification { classes: usize },
    /// Scalar regression (standardized target).
    Regression,
    /// L2-normalized embedding of width `dim`, trained with triplet loss.
    Identification { dim: usize },
}

/// Masking granularity: tasks activate and deactivate as groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskGroup {
    Traits,
    Gender,
    Bmi,
    Id,
}

/// One prediction task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub group: MaskGroup,
}

impl TaskSpec {
    /// Width of the head's final linear layer.
    pub fn out_dim(&self) -> usize {
        match self.kind {
            TaskKind::Classification { classes } => classes,
            TaskKind::Regression => 1,
            TaskKind::Identification { dim } => dim,
        }
    }
}

/// The 17 psychological attributes and their class counts, in fixed roster
/// order: five personality factors, self-esteem, four aggression subscales,
/// three occupational-fatigue subscales, three distress subscales, and
/// general health.
pub const TRAITS: [(&str, usize); 17] = [
    ("openness", 4),
    ("conscientiousness", 4),
    ("extraversion", 4),
    ("agreeableness", 4),
    ("neuroticism", 4),
    ("self_esteem", 3),
    ("aggression_physical", 4),
    ("aggression_verbal", 4),
    ("anger", 4),
    ("hostility", 4),
    ("fatigue_chronic", 4),
    ("fatigue_acute", 4),
    ("recovery", 4),
    ("depression", 5),
    ("anxiety", 5),
    ("stress", 5),
    ("general_health", 3),
];

/// Full 20-task roster: 17 traits, gender, BMI, identity (in that order).
pub fn full_roster(id_dim: usize) -> Vec<TaskSpec> {
    let mut tasks: Vec<TaskSpec> = TRAITS
        .iter()
        .map(|&(name, classes)| TaskSpec {
            name: name.to_string(),
            kind: TaskKind::Classification { classes },
            group: MaskGroup::Traits,
        })
        .collect();
    tasks.push(TaskSpec {
        name: "gender".to_string(),
        kind: TaskKind::Classification { classes: 2 },
        group: MaskGroup::Gender,
    });
    tasks.push(TaskSpec {
        name: "bmi".to_string(),
        kind: TaskKind::Regression,
        group: MaskGroup::Bmi,
    });
    tasks.push(TaskSpec {
        name: "identity".to_string(),
        kind: TaskKind::Identification { dim: id_dim },
        group: MaskGroup::Id,
    });
    tasks
}

/// Minimal three-task roster exercising every loss family; used by the
/// gradient-check preset.
pub fn tiny_roster(id_dim: usize) -> Vec<TaskSpec> {
    vec![
        TaskSpec {
            name: "openness".to_string(),
            kind: TaskKind::Classification { classes: 4 },
            group: MaskGroup::Traits,
        },
        TaskSpec {
            name: "bmi".to_string(),
            kind: TaskKind::Regression,
            group: MaskGroup::Bmi,
        },
        TaskSpec {
            name: "identity".to_string(),
            kind: TaskKind::Identification { dim: id_dim },
            group: MaskGroup::Id,
        },
    ]
}

/// Expands group activation into a per-task mask for `tasks`.
pub fn mask_for_groups(tasks: &[TaskSpec], active: &[MaskGroup]) -> Vec<bool> {
    tasks.iter().map(|t| active.contains(&t.group)).collect()
}

/// The published ablation grid: singletons, traits paired with each other
/// group, traits with two others, and all four. Row order matches the
/// reference table (rows 1–11).
pub fn ablation_grid() -> Vec<(&'static str, Vec<MaskGroup>)> {
    use MaskGroup::*;
    vec![
        ("id_only", vec![Id]),
        ("gender_only", vec![Gender]),
        ("bmi_only", vec![Bmi]),
        ("traits_only", vec![Traits]),
        ("id_traits", vec![Id, Traits]),
        ("gender_traits", vec![Gender, Traits]),
        ("bmi_traits", vec![Bmi, Traits]),
        ("id_gender_traits", vec![Id, Gender, Traits]),
        ("id_bmi_traits", vec![Id, Bmi, Traits]),
        ("gender_bmi_traits", vec![Gender, Bmi, Traits]),
        ("all_tasks", vec![Id, Gender, Bmi, Traits]),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_roster_has_twenty_tasks_in_contract_order() {
        let tasks = full_roster(64);
        assert_eq!(tasks.len(), 20);
        assert_eq!(tasks[0].name, "openness");
        assert_eq!(tasks[16].name, "general_health");
        assert_eq!(tasks[17].name, "gender");
        assert_eq!(tasks[17].out_dim(), 2);
        assert_eq!(tasks[18].kind, TaskKind::Regression);
        assert_eq!(tasks[19].kind, TaskKind::Identification { dim: 64 });
        assert_eq!(tasks.iter().filter(|t| t.group == MaskGroup::Traits).count(), 17);
    }

    #[test]
    fn ablation_grid_matches_published_structure() {
        let grid = ablation_grid();
        assert_eq!(grid.len(), 11);
        // Four singletons, three pairs with traits, three triples with
        // traits, one full row.
        assert_eq!(grid.iter().filter(|(_, g)| g.len() == 1).count(), 4);
        assert_eq!(grid.iter().filter(|(_, g)| g.len() == 2).count(), 3);
        assert_eq!(grid.iter().filter(|(_, g)| g.len() == 3).count(), 3);
        assert_eq!(grid.iter().filter(|(_, g)| g.len() == 4).count(), 1);
        assert!(grid
            .iter()
            .filter(|(_, g)| g.len() > 1)
            .all(|(_, g)| g.contains(&MaskGroup::Traits)));
        assert_eq!(grid[10].0, "all_tasks");
    }

    #[test]
    fn mask_expansion_follows_groups() {
        let tasks = full_roster(8);
        let mask = mask_for_groups(&tasks, &[MaskGroup::Id, MaskGroup::Traits]);
        assert_eq!(mask.iter().filter(|&&m| m).count(), 18);
        assert!(mask[0] && mask[16] && mask[19]);
        assert!(!mask[17] && !mask[18]);
    }
}
