//! Exhaustive scenario trees: finite filtered probability spaces with a
//! deterministic clock and exact-moment factor increments.
//!
//! A tree has levels `0..=S`; the step `s` (from level `s-1` to level `s`)
//! accrues the clock increment `dA_s` and every node branches the same way.
//! Branch designs satisfy exact moment conditions
//!
//! ```text
//! sum_b p_b dW_b = 0,        sum_b p_b dW_b dW_b^T = dA_s * I_d,
//! ```
//!
//! so conditional expectations, martingale properties and covariation laws
//! hold as finite-sum identities rather than statistically.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Deterministic strictly increasing clock, stored through its increments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clock {
    increments: Vec<f64>,
}

impl Clock {
    pub fn from_increments(increments: Vec<f64>) -> Result<Self> {
        if increments.is_empty() {
            return Err(Error::NonPositiveClockStep(f64::NAN));
        }
        for &d in &increments {
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::NonPositiveClockStep(d));
            }
        }
        Ok(Clock { increments })
    }

    pub fn uniform(steps: usize, delta: f64) -> Result<Self> {
        Clock::from_increments(vec![delta; steps])
    }

    pub fn steps(&self) -> usize {
        self.increments.len()
    }

    /// Increment `dA_s` for step `s` in `1..=S`.
    pub fn delta(&self, step: usize) -> f64 {
        self.increments[step - 1]
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    /// Cumulative value `A_t` at level `t` in `0..=S`.
    pub fn cumulative(&self, level: usize) -> f64 {
        self.increments[..level].iter().sum()
    }

    pub fn total(&self) -> f64 {
        self.cumulative(self.steps())
    }
}

/// Branching designs with exact first and second moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchingDesign {
    /// `2^d` branches with increments `+-sqrt(dA)` per factor, equal probability.
    FullBinary,
    /// `d + 1` branches from a Helmert-type orthogonal array, equal probability.
    #[serde(alias = "orthogonal-array")]
    Simplex,
}

impl BranchingDesign {
    pub fn branch_count(self, factors: usize) -> usize {
        match self {
            BranchingDesign::FullBinary => 1usize << factors,
            BranchingDesign::Simplex => factors + 1,
        }
    }

    /// Unit-clock branch increments and probabilities; the step increment
    /// scales each vector by `sqrt(dA)`.
    fn unit_branches(self, factors: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        match self {
            BranchingDesign::FullBinary => {
                let b = 1usize << factors;
                let p = 1.0 / b as f64;
                let branches = (0..b)
                    .map(|mask| {
                        (0..factors)
                            .map(|k| if mask >> k & 1 == 1 { 1.0 } else { -1.0 })
                            .collect()
                    })
                    .collect();
                (branches, vec![p; b])
            }
            BranchingDesign::Simplex => {
                // Columns of the Helmert matrix scaled by sqrt(d + 1):
                // rows are orthonormal and sum to zero, hence the moment
                // conditions hold with equal probabilities.
                let b = factors + 1;
                let p = 1.0 / b as f64;
                let scale = (b as f64).sqrt();
                let mut branches = vec![vec![0.0; factors]; b];
                for j in 1..=factors {
                    let norm = 1.0 / ((j * (j + 1)) as f64).sqrt();
                    for (idx, branch) in branches.iter_mut().enumerate().take(j) {
                        let _ = idx;
                        branch[j - 1] = norm * scale;
                    }
                    branches[j][j - 1] = -(j as f64) * norm * scale;
                }
                (branches, vec![p; b])
            }
        }
    }
}

/// One node of the tree. The root has no incoming branch; its `dw` is empty
/// and its probability fields are 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Index of the parent at the previous level (0 for the root).
    pub parent: usize,
    /// Probability of the incoming branch.
    pub probability: f64,
    /// Factor increment along the incoming branch.
    pub dw: Vec<f64>,
}

/// A scenario tree; immutable after construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioTree {
    clock: Clock,
    factors: usize,
    design: BranchingDesign,
    levels: Vec<Vec<TreeNode>>,
    #[serde(skip)]
    path_probs: Vec<Vec<f64>>,
}

/// Default bound on the total node count.
pub const DEFAULT_NODE_CAP: u64 = 2_000_000;

impl ScenarioTree {
    /// Builds a tree; errors if the total node count would exceed `cap`.
    pub fn build(
        clock: Clock,
        factors: usize,
        design: BranchingDesign,
        cap: u64,
    ) -> Result<Self> {
        assert!(factors >= 1, "factor count must be at least 1");
        let branches = design.branch_count(factors);
        let mut total: u128 = 1;
        let mut width: u128 = 1;
        for _ in 0..clock.steps() {
            width = width.saturating_mul(branches as u128);
            total = total.saturating_add(width);
            if total > cap as u128 {
                return Err(Error::NodeCapExceeded {
                    needed: total,
                    cap,
                });
            }
        }

        let (unit, probs) = design.unit_branches(factors);
        let mut levels = vec![vec![TreeNode {
            parent: 0,
            probability: 1.0,
            dw: Vec::new(),
        }]];
        for step in 1..=clock.steps() {
            let sqrt_da = clock.delta(step).sqrt();
            let prev_len = levels[step - 1].len();
            let mut level = Vec::with_capacity(prev_len * branches);
            for parent in 0..prev_len {
                for b in 0..branches {
                    level.push(TreeNode {
                        parent,
                        probability: probs[b],
                        dw: unit[b].iter().map(|w| w * sqrt_da).collect(),
                    });
                }
            }
            levels.push(level);
        }

        let mut tree = ScenarioTree {
            clock,
            factors,
            design,
            levels,
            path_probs: Vec::new(),
        };
        tree.rebuild_path_probs();
        Ok(tree)
    }

    fn rebuild_path_probs(&mut self) {
        let mut probs: Vec<Vec<f64>> = Vec::with_capacity(self.levels.len());
        probs.push(vec![1.0]);
        for t in 1..self.levels.len() {
            let row = self.levels[t]
                .iter()
                .map(|n| probs[t - 1][n.parent] * n.probability)
                .collect();
            probs.push(row);
        }
        self.path_probs = probs;
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    pub fn factors(&self) -> usize {
        self.factors
    }

    pub fn design(&self) -> BranchingDesign {
        self.design
    }

    pub fn steps(&self) -> usize {
        self.clock.steps()
    }

    pub fn branches(&self) -> usize {
        self.design.branch_count(self.factors)
    }

    pub fn level_len(&self, level: usize) -> usize {
        self.levels[level].len()
    }

    pub fn leaf_count(&self) -> usize {
        self.level_len(self.steps())
    }

    pub fn total_nodes(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn node(&self, level: usize, index: usize) -> &TreeNode {
        &self.levels[level][index]
    }

    /// Children of node `index` at `level` occupy a contiguous range at
    /// `level + 1`.
    pub fn children(&self, _level: usize, index: usize) -> std::ops::Range<usize> {
        let b = self.branches();
        index * b..(index + 1) * b
    }

    /// Probability of reaching a node from the root.
    pub fn path_prob(&self, level: usize, index: usize) -> f64 {
        self.path_probs[level][index]
    }

    /// Exact conditional expectation: maps values on level `t + 1` to values
    /// on level `t` through the branch probabilities.
    pub fn cond_exp(&self, t: usize, values_next: &[f64]) -> Vec<f64> {
        assert_eq!(values_next.len(), self.level_len(t + 1));
        (0..self.level_len(t))
            .map(|v| {
                self.children(t, v)
                    .map(|c| self.levels[t + 1][c].probability * values_next[c])
                    .sum()
            })
            .collect()
    }

    /// Unconditional expectation of values on a level.
    pub fn expectation(&self, level: usize, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.level_len(level));
        values
            .iter()
            .zip(&self.path_probs[level])
            .map(|(v, p)| v * p)
            .sum()
    }

    /// Serializes to the documented JSON form (levels of nodes carrying
    /// parent, probability and the factor increment vector).
    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Exact round-trip of [`ScenarioTree::to_json_string`].
    pub fn from_json_str(s: &str) -> Result<Self> {
        let mut tree: ScenarioTree = serde_json::from_str(s)?;
        tree.rebuild_path_probs();
        Ok(tree)
    }
}

/// A process with one value per node, level by level.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapted<T> {
    levels: Vec<Vec<T>>,
}

impl<T> Adapted<T> {
    pub fn from_levels(levels: Vec<Vec<T>>) -> Self {
        Adapted { levels }
    }

    pub fn level(&self, t: usize) -> &[T] {
        &self.levels[t]
    }

    pub fn levels(&self) -> &[Vec<T>] {
        &self.levels
    }

    pub fn value(&self, level: usize, node: usize) -> &T {
        &self.levels[level][node]
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

impl Adapted<f64> {
    pub fn zeros_like(tree: &ScenarioTree) -> Self {
        Adapted {
            levels: (0..=tree.steps())
                .map(|t| vec![0.0; tree.level_len(t)])
                .collect(),
        }
    }

    /// Terminal (leaf) values.
    pub fn terminal(&self) -> &[f64] {
        self.levels.last().expect("nonempty process")
    }
}

/// A process attached to steps: entry `s - 1` holds one value per node of
/// level `s - 1`, measurable there (constant across the sibling branches it
/// governs).
#[derive(Debug, Clone, PartialEq)]
pub struct Predictable<T> {
    steps: Vec<Vec<T>>,
}

impl<T> Predictable<T> {
    pub fn from_steps(steps: Vec<Vec<T>>) -> Self {
        Predictable { steps }
    }

    /// Values for step `s` in `1..=S`, indexed by level-`(s-1)` node.
    pub fn step(&self, s: usize) -> &[T] {
        &self.steps[s - 1]
    }

    pub fn steps(&self) -> &[Vec<T>] {
        &self.steps
    }

    pub fn value(&self, s: usize, node: usize) -> &T {
        &self.steps[s - 1][node]
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}
