//! Cartesian expansion of a configuration matrix into a task plan.

use std::fmt;

use indexmap::IndexMap;
use thiserror::Error;

use crate::config::{ConfigMatrix, ExclusionRule, ParamValue, Settings};
use crate::identity::{self, EncodeError, TaskKey};

/// Plans are materialized in memory; larger matrices are refused.
pub const MAX_PLAN_TASKS: usize = 1_000_000;

/// One value per declared dimension, in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Assignment {
    bindings: IndexMap<String, ParamValue>,
}

impl Assignment {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, ParamValue)>) -> Self {
        Assignment {
            bindings: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&ParamValue> {
        self.bindings.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.bindings.iter()
    }

    pub fn len(&self) -> usize {
        self.bindings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bindings.is_empty()
    }
}

/// `dim1=v1 dim2=v2 ...`
impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.bindings.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{name}={value}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedTask {
    pub assignment: Assignment,
    pub key: TaskKey,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskPlan {
    /// Dimension names and sizes in declaration order.
    pub dimensions: Vec<(String, usize)>,
    pub settings: Settings,
    pub tasks: Vec<PlannedTask>,
    pub excluded_count: usize,
    pub config_fingerprint: TaskKey,
}

impl TaskPlan {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn keys(&self) -> impl Iterator<Item = TaskKey> + '_ {
        self.tasks.iter().map(|t| t.key)
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExpandError {
    #[error("matrix has {0} combinations; at most {MAX_PLAN_TASKS} are supported")]
    TooLarge(u128),
    #[error("matrix declares no parameter dimensions")]
    NoDimensions,
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

/// True iff some rule's predicate is a sub-map of the assignment.
pub fn is_excluded(assignment: &Assignment, rules: &[ExclusionRule]) -> bool {
    rules.iter().any(|rule| {
        rule.predicate
            .iter()
            .all(|(name, value)| assignment.get(name) == Some(value))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TaskCount {
    pub total: u128,
    pub excluded: u128,
}

impl TaskCount {
    pub fn included(&self) -> u128 {
        self.total - self.excluded
    }
}

/// Inclusion-exclusion is exponential in the rule count; past this many
/// rules the excluded count is found by walking the product instead.
const MAX_RULES_FOR_INCLUSION_EXCLUSION: usize = 16;

/// Counts combinations and excluded combinations without building tasks.
/// Overlapping rules are counted once.
pub fn count_tasks(config: &ConfigMatrix) -> TaskCount {
    let sizes: Vec<u128> = config.parameters.values().map(|v| v.len() as u128).collect();
    let total = sizes
        .iter()
        .try_fold(1u128, |acc, s| acc.checked_mul(*s))
        .unwrap_or(u128::MAX);
    if config.parameters.is_empty() {
        return TaskCount { total: 0, excluded: 0 };
    }
    let rules = effective_rules(config);
    if rules.is_empty() || total == 0 {
        return TaskCount { total, excluded: 0 };
    }
    let excluded = if rules.len() <= MAX_RULES_FOR_INCLUSION_EXCLUSION {
        inclusion_exclusion(config, &rules)
    } else {
        let mut n = 0u128;
        for_each_assignment(config, |a| {
            if is_excluded(a, &rules) {
                n += 1;
            }
        });
        n
    };
    TaskCount { total, excluded }
}

/// Rules that can match at least one combination. Rules naming unknown
/// dimensions or out-of-domain values match nothing.
fn effective_rules(config: &ConfigMatrix) -> Vec<ExclusionRule> {
    config
        .exclusions
        .iter()
        .filter(|rule| {
            rule.predicate
                .iter()
                .all(|(name, value)| config.parameters.get(name).is_some_and(|values| values.contains(value)))
        })
        .cloned()
        .collect()
}

fn inclusion_exclusion(config: &ConfigMatrix, rules: &[ExclusionRule]) -> u128 {
    let mut positive = 0u128;
    let mut negative = 0u128;
    for mask in 1u32..(1 << rules.len()) {
        let mut merged: IndexMap<&str, &ParamValue> = IndexMap::new();
        let mut consistent = true;
        for (i, rule) in rules.iter().enumerate() {
            if mask & (1 << i) == 0 {
                continue;
            }
            for (name, value) in &rule.predicate {
                match merged.insert(name.as_str(), value) {
                    Some(prev) if prev != value => consistent = false,
                    _ => {}
                }
            }
        }
        if !consistent {
            continue;
        }
        let matching: u128 = config
            .parameters
            .iter()
            .filter(|(name, _)| !merged.contains_key(name.as_str()))
            .map(|(_, values)| values.len() as u128)
            .product();
        if mask.count_ones() % 2 == 1 {
            positive += matching;
        } else {
            negative += matching;
        }
    }
    positive - negative
}

/// Visits every combination in plan order: mixed radix with the
/// first-declared dimension varying slowest.
fn for_each_assignment(config: &ConfigMatrix, mut visit: impl FnMut(&Assignment)) {
    let dims: Vec<(&String, &Vec<ParamValue>)> = config.parameters.iter().collect();
    if dims.is_empty() || dims.iter().any(|(_, v)| v.is_empty()) {
        return;
    }
    let mut digits = vec![0usize; dims.len()];
    loop {
        let assignment = Assignment::from_pairs(
            dims.iter()
                .zip(&digits)
                .map(|((name, values), &d)| ((*name).clone(), values[d].clone())),
        );
        visit(&assignment);
        // increment, last dimension fastest
        let mut pos = dims.len();
        loop {
            if pos == 0 {
                return;
            }
            pos -= 1;
            digits[pos] += 1;
            if digits[pos] < dims[pos].1.len() {
                break;
            }
            digits[pos] = 0;
        }
    }
}

/// Expands a validated matrix into its task plan.
pub fn expand(config: &ConfigMatrix) -> Result<TaskPlan, ExpandError> {
    if config.parameters.is_empty() {
        return Err(ExpandError::NoDimensions);
    }
    let count = count_tasks(config);
    if count.total > MAX_PLAN_TASKS as u128 {
        return Err(ExpandError::TooLarge(count.total));
    }
    let mut tasks = Vec::with_capacity(count.included() as usize);
    let mut excluded_count = 0usize;
    let mut error = None;
    for_each_assignment(config, |assignment| {
        if error.is_some() {
            return;
        }
        if is_excluded(assignment, &config.exclusions) {
            excluded_count += 1;
            return;
        }
        match identity::task_key(assignment, &config.settings) {
            Ok(key) => tasks.push(PlannedTask {
                assignment: assignment.clone(),
                key,
            }),
            Err(e) => error = Some(e),
        }
    });
    if let Some(e) = error {
        return Err(e.into());
    }
    Ok(TaskPlan {
        dimensions: config
            .parameters
            .iter()
            .map(|(name, values)| (name.clone(), values.len()))
            .collect(),
        settings: config.settings.clone(),
        tasks,
        excluded_count,
        config_fingerprint: identity::config_fingerprint(config)?,
    })
}
