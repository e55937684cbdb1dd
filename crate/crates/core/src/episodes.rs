//! Class splits and n-way k-shot episode sampling.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::SparseGraph;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Val,
    Test,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Val => "val",
            Phase::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EpisodeError {
    #[error("class split needs {requested} classes but only {available} have at least {min_size} nodes")]
    NotEnoughClasses {
        requested: usize,
        available: usize,
        min_size: usize,
    },
    #[error("{phase} phase has {eligible} eligible classes, episode needs {way}")]
    DeficientPhase { phase: Phase, eligible: usize, way: usize },
    #[error("invalid class split: {0}")]
    InvalidSplit(String),
    #[error("episode shape must have way, shot and queries >= 1")]
    EmptyShape,
}

/// Disjoint class sets for meta-training, validation and meta-testing.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl ClassSplit {
    pub fn classes(&self, phase: Phase) -> &[usize] {
        match phase {
            Phase::Train => &self.train,
            Phase::Val => &self.val,
            Phase::Test => &self.test,
        }
    }

    /// Checks disjointness and range; `require_val` additionally demands a
    /// non-empty validation set.
    pub fn validate(&self, num_classes: usize, require_val: bool) -> Result<(), EpisodeError> {
        let mut seen = BTreeSet::new();
        for &c in self.train.iter().chain(&self.val).chain(&self.test) {
            if c >= num_classes {
                return Err(EpisodeError::InvalidSplit(format!(
                    "class {c} out of range for {num_classes} classes"
                )));
            }
            if !seen.insert(c) {
                return Err(EpisodeError::InvalidSplit(format!("class {c} appears twice")));
            }
        }
        if self.train.is_empty() {
            return Err(EpisodeError::InvalidSplit("train set is empty".into()));
        }
        if self.test.is_empty() {
            return Err(EpisodeError::InvalidSplit("test set is empty".into()));
        }
        if require_val && self.val.is_empty() {
            return Err(EpisodeError::InvalidSplit(
                "val set is empty but validation is enabled".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> crate::Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| crate::Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| crate::Error::Json {
            path: path.into(),
            source,
        })
    }

    pub fn save(&self, path: &Path) -> crate::Result<()> {
        let mut text = serde_json::to_string(self).expect("split serialises");
        text.push('\n');
        crate::trainer::write_atomic(path, text.as_bytes())
    }
}

/// Shuffles the classes that have at least `min_class_size` nodes and deals
/// them into train/val/test sets of the requested sizes. Smaller classes are
/// excluded with a warning.
pub fn split_classes(
    graph: &SparseGraph,
    counts: (usize, usize, usize),
    min_class_size: usize,
    seed: u64,
) -> Result<ClassSplit, EpisodeError> {
    let by_class = graph.nodes_by_class();
    let mut eligible: Vec<usize> = (0..graph.num_classes())
        .filter(|&c| by_class[c].len() >= min_class_size)
        .collect();
    let excluded = graph.num_classes() - eligible.len();
    if excluded > 0 {
        log::warn!("{excluded} classes have fewer than {min_class_size} nodes and are excluded from the split");
    }
    let requested = counts.0 + counts.1 + counts.2;
    if requested > eligible.len() {
        return Err(EpisodeError::NotEnoughClasses {
            requested,
            available: eligible.len(),
            min_size: min_class_size,
        });
    }
    eligible.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = eligible.into_iter();
    let mut take = |n: usize| -> Vec<usize> {
        let mut v: Vec<usize> = it.by_ref().take(n).collect();
        v.sort_unstable();
        v
    };
    Ok(ClassSplit {
        train: take(counts.0),
        val: take(counts.1),
        test: take(counts.2),
        seed,
    })
}

/// One n-way k-shot task. Support and query lists are class-major: entries
/// `j*shot .. (j+1)*shot` of `support` belong to `classes[j]`, whose local
/// label is `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

impl Episode {
    pub fn local_label(&self, class: usize) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn support_labels(&self) -> Vec<usize> {
        (0..self.way).flat_map(|j| std::iter::repeat_n(j, self.shot)).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        (0..self.way)
            .flat_map(|j| std::iter::repeat_n(j, self.query_per_class))
            .collect()
    }
}

/// Samples episodes from a fixed graph.
#[derive(Clone, Debug)]
pub struct EpisodeSampler {
    by_class: Vec<Vec<usize>>,
}

impl EpisodeSampler {
    pub fn new(graph: &SparseGraph) -> Self {
        EpisodeSampler {
            by_class: graph.nodes_by_class(),
        }
    }

    pub fn class_size(&self, class: usize) -> usize {
        self.by_class.get(class).map_or(0, Vec::len)
    }

    /// Classes of `phase_classes` with at least `k + m` nodes.
    pub fn eligible(&self, phase_classes: &[usize], shot: usize, queries: usize) -> Vec<usize> {
        phase_classes
            .iter()
            .copied()
            .filter(|&c| self.class_size(c) >= shot + queries)
            .collect()
    }

    /// Picks `way` classes uniformly without replacement, then `shot + queries`
    /// nodes per class uniformly without replacement; the first `shot` go to the
    /// support set.
    pub fn sample(
        &self,
        phase: Phase,
        phase_classes: &[usize],
        way: usize,
        shot: usize,
        queries: usize,
        rng: &mut impl Rng,
    ) -> Result<Episode, EpisodeError> {
        if way == 0 || shot == 0 || queries == 0 {
            return Err(EpisodeError::EmptyShape);
        }
        let eligible = self.eligible(phase_classes, shot, queries);
        if eligible.len() < way {
            return Err(EpisodeError::DeficientPhase {
                phase,
                eligible: eligible.len(),
                way,
            });
        }
        let classes: Vec<usize> = index::sample(rng, eligible.len(), way)
            .into_iter()
            .map(|i| eligible[i])
            .collect();
        let mut support = Vec::with_capacity(way * shot);
        let mut query = Vec::with_capacity(way * queries);
        for &c in &classes {
            let nodes = &self.by_class[c];
            let picked = index::sample(rng, nodes.len(), shot + queries);
            for (i, idx) in picked.into_iter().enumerate() {
                if i < shot {
                    support.push(nodes[idx]);
                } else {
                    query.push(nodes[idx]);
                }
            }
        }
        Ok(Episode {
            way,
            shot,
            query_per_class: queries,
            classes,
            support,
            query,
        })
    }
}
