//! Item-sequence datasets: synthetic generation, the line-oriented text
//! format, and the leave-last-two split.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Items per planted cluster in [`generate_synthetic`].
pub const CLUSTER_SIZE: usize = 8;
/// Relative weight of a within-cluster transition against a cross-cluster one.
pub const WITHIN_CLUSTER_WEIGHT: f64 = 10.0;
pub const MIN_SEQUENCE_LEN: usize = 5;
pub const MAX_SEQUENCE_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("sequences shorter than 3 items for users: {}", users.join(", "))]
    TooShortSequence { users: Vec<String> },
    #[error("dataset is empty")]
    Empty,
    #[error("synthetic data needs at least {CLUSTER_SIZE} items, got {0}")]
    TooFewItems(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserSequence {
    pub user: String,
    pub items: Vec<usize>,
}

/// Chronological interaction sequences, one per user.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemSequenceDataset {
    pub sequences: Vec<UserSequence>,
    pub num_items: usize,
}

impl ItemSequenceDataset {
    /// Checks the dataset invariants: ids in range and every sequence at
    /// least three items long.
    pub fn new(sequences: Vec<UserSequence>, num_items: usize) -> Result<Self, DataError> {
        if sequences.is_empty() {
            return Err(DataError::Empty);
        }
        let short: Vec<String> = sequences
            .iter()
            .filter(|s| s.items.len() < 3)
            .map(|s| s.user.clone())
            .collect();
        if !short.is_empty() {
            return Err(DataError::TooShortSequence { users: short });
        }
        for (i, s) in sequences.iter().enumerate() {
            if let Some(&bad) = s.items.iter().find(|&&it| it >= num_items) {
                return Err(DataError::Parse {
                    line: i + 1,
                    msg: format!("item {bad} outside [0, {num_items})"),
                });
            }
        }
        Ok(Self {
            sequences,
            num_items,
        })
    }

    pub fn num_users(&self) -> usize {
        self.sequences.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(|s| s.items.len()).sum()
    }
}

/// Planted cluster of `item` for a catalogue of `num_items`.
pub fn cluster_of(item: usize, num_items: usize) -> usize {
    let clusters = (num_items / CLUSTER_SIZE).max(1);
    (item / CLUSTER_SIZE).min(clusters - 1)
}

/// Seeded first-order Markov chain over items with block structure: a
/// transition to another item of the same cluster is
/// [`WITHIN_CLUSTER_WEIGHT`] times likelier than one leaving the cluster.
/// Self-transitions never occur.
pub fn generate_synthetic(
    num_users: usize,
    num_items: usize,
    seed: u64,
) -> Result<ItemSequenceDataset, DataError> {
    if num_items < CLUSTER_SIZE {
        return Err(DataError::TooFewItems(num_items));
    }
    if num_users == 0 {
        return Err(DataError::Empty);
    }
    let cumulative: Vec<Vec<f64>> = (0..num_items)
        .map(|from| {
            let mut acc = 0.0;
            (0..num_items)
                .map(|to| {
                    acc += transition_weight(from, to, num_items);
                    acc
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(num_users);
    for u in 0..num_users {
        let len = rng.gen_range(MIN_SEQUENCE_LEN..=MAX_SEQUENCE_LEN);
        let mut items = Vec::with_capacity(len);
        let mut cur = rng.gen_range(0..num_items);
        items.push(cur);
        for _ in 1..len {
            let row = &cumulative[cur];
            let x = rng.gen::<f64>() * row[num_items - 1];
            cur = row.partition_point(|&c| c <= x).min(num_items - 1);
            items.push(cur);
        }
        sequences.push(UserSequence {
            user: format!("u{u}"),
            items,
        });
    }
    ItemSequenceDataset::new(sequences, num_items)
}

fn transition_weight(from: usize, to: usize, num_items: usize) -> f64 {
    if from == to {
        0.0
    } else if cluster_of(from, num_items) == cluster_of(to, num_items) {
        WITHIN_CLUSTER_WEIGHT
    } else {
        1.0
    }
}

/// Parses the text format: one sequence per line, first token the user id,
/// the rest item ids in chronological order; `#` lines are comments.
///
/// Item tokens are re-indexed densely, in numeric order when every token is
/// an integer and lexicographic order otherwise.
pub fn parse_dataset(text: &str) -> Result<ItemSequenceDataset, DataError> {
    let mut raw: Vec<(usize, String, Vec<&str>)> = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut tokens = trimmed.split_whitespace();
        let user = tokens
            .next()
            .expect("non-empty line has a token")
            .to_string();
        if !seen.insert(user.clone()) {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("duplicate user {user:?}"),
            });
        }
        let items: Vec<&str> = tokens.collect();
        if items.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                msg: format!("user {user:?} has no items"),
            });
        }
        raw.push((line_no, user, items));
    }
    if raw.is_empty() {
        return Err(DataError::Empty);
    }

    let distinct: HashSet<&str> = raw
        .iter()
        .flat_map(|(_, _, it)| it.iter().copied())
        .collect();
    let numeric: Option<Vec<(u64, &str)>> = distinct
        .iter()
        .map(|t| t.parse::<u64>().ok().map(|n| (n, *t)))
        .collect();
    let ordered: Vec<&str> = match numeric {
        Some(mut nums) => {
            nums.sort_unstable();
            nums.into_iter().map(|(_, t)| t).collect()
        }
        None => {
            let mut v: Vec<&str> = distinct.into_iter().collect();
            v.sort_unstable();
            v
        }
    };
    let index: BTreeMap<&str, usize> = ordered.iter().enumerate().map(|(i, t)| (*t, i)).collect();

    let sequences = raw
        .into_iter()
        .map(|(_, user, items)| UserSequence {
            user,
            items: items.iter().map(|t| index[t]).collect(),
        })
        .collect();
    ItemSequenceDataset::new(sequences, ordered.len())
}

pub fn load_dataset(path: &Path) -> Result<ItemSequenceDataset, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_dataset(&text)
}

pub fn format_dataset(ds: &ItemSequenceDataset) -> String {
    let mut out = String::with_capacity(ds.num_interactions() * 4);
    for s in &ds.sequences {
        out.push_str(&s.user);
        for it in &s.items {
            out.push(' ');
            out.push_str(&it.to_string());
        }
        out.push('\n');
    }
    out
}

pub fn save_dataset(ds: &ItemSequenceDataset, path: &Path) -> Result<(), DataError> {
    let io_err = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(format_dataset(ds).as_bytes()).map_err(io_err)?;
    Ok(())
}

/// One held-out prediction: rank `target` given `context`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalCase {
    pub user: usize,
    pub context: Vec<usize>,
    pub target: usize,
}

/// Leave-last-two split. The last item of each sequence is the test target,
/// the second-to-last the validation target, and the remaining prefix is
/// used for training.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

pub fn split_leave_last_two(ds: &ItemSequenceDataset) -> Split {
    let mut split = Split {
        train: Vec::with_capacity(ds.num_users()),
        valid: Vec::with_capacity(ds.num_users()),
        test: Vec::with_capacity(ds.num_users()),
    };
    for (user, s) in ds.sequences.iter().enumerate() {
        let l = s.items.len();
        debug_assert!(l >= 3);
        split.train.push(s.items[..l - 2].to_vec());
        split.valid.push(EvalCase {
            user,
            context: s.items[..l - 2].to_vec(),
            target: s.items[l - 2],
        });
        split.test.push(EvalCase {
            user,
            context: s.items[..l - 1].to_vec(),
            target: s.items[l - 1],
        });
    }
    split
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = generate_synthetic(100, 64, 7).unwrap();
        let b = generate_synthetic(100, 64, 7).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_synthetic(100, 64, 8).unwrap());
        assert_eq!(a.num_users(), 100);
        for s in &a.sequences {
            assert!((MIN_SEQUENCE_LEN..=MAX_SEQUENCE_LEN).contains(&s.items.len()));
            assert!(s.items.iter().all(|&i| i < 64));
            assert!(s.items.windows(2).all(|w| w[0] != w[1]));
        }
        assert!(matches!(
            generate_synthetic(10, 7, 0),
            Err(DataError::TooFewItems(7))
        ));
    }

    #[test]
    fn within_cluster_transitions_are_about_ten_times_likelier() {
        let ds = generate_synthetic(1000, 64, 3).unwrap();
        let (mut within, mut cross, mut total) = (0usize, 0usize, 0usize);
        for s in &ds.sequences {
            for w in s.items.windows(2) {
                total += 1;
                if cluster_of(w[0], 64) == cluster_of(w[1], 64) {
                    within += 1;
                } else {
                    cross += 1;
                }
            }
        }
        assert!(total >= 10_000, "{total}");
        // per ordered pair: 7 within-cluster targets, 56 cross-cluster targets
        let ratio = (within as f64 / 7.0) / (cross as f64 / 56.0);
        assert!((5.0..=15.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn parse_single_line() {
        let ds = parse_dataset("u1 3 7 2 9\n").unwrap();
        assert_eq!(ds.num_users(), 1);
        assert_eq!(ds.sequences[0].items.len(), 4);
        // dense numeric re-index: 2,3,7,9 -> 0,1,2,3
        assert_eq!(ds.sequences[0].items, vec![1, 2, 0, 3]);
        assert_eq!(ds.num_items, 4);
    }

    #[test]
    fn parse_comments_and_string_items() {
        let ds = parse_dataset("# header\n\nalice b a c\n# mid\nbob c c a\n").unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.sequences[0].items, vec![1, 0, 2]);
        assert_eq!(ds.sequences[1].items, vec![2, 2, 0]);
    }

    #[test]
    fn parse_errors() {
        match parse_dataset("u1 1 2 3\nu2 4 5\nu3 1 2\n") {
            Err(DataError::TooShortSequence { users }) => assert_eq!(users, vec!["u2", "u3"]),
            other => panic!("{other:?}"),
        }
        match parse_dataset("u1 1 2 3\n# c\nu1 4 5 6\n") {
            Err(DataError::Parse { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_dataset("u1 1 2 3\nlonely\n") {
            Err(DataError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_dataset("# only comments\n"),
            Err(DataError::Empty)
        ));
    }

    #[test]
    fn format_round_trip() {
        let ds = generate_synthetic(150, 64, 11).unwrap();
        assert_eq!(parse_dataset(&format_dataset(&ds)).unwrap(), ds);
    }

    #[test]
    fn leave_last_two() {
        let ds = ItemSequenceDataset::new(
            vec![
                UserSequence {
                    user: "x".into(),
                    items: vec![0, 1, 2, 3],
                },
                UserSequence {
                    user: "y".into(),
                    items: vec![4, 5, 6],
                },
            ],
            7,
        )
        .unwrap();
        let split = split_leave_last_two(&ds);
        assert_eq!(split.train[0], vec![0, 1]);
        assert_eq!(split.valid[0].context, vec![0, 1]);
        assert_eq!(split.valid[0].target, 2);
        assert_eq!(split.test[0].context, vec![0, 1, 2]);
        assert_eq!(split.test[0].target, 3);
        assert_eq!(split.train[1], vec![4]);
        assert_eq!(split.valid.len(), 2);
        assert_eq!(split.test.len(), 2);
    }

    #[test]
    fn split_reconstructs_and_targets_follow_context() {
        let ds = generate_synthetic(50, 32, 5).unwrap();
        let split = split_leave_last_two(&ds);
        for (u, s) in ds.sequences.iter().enumerate() {
            let mut rebuilt = split.train[u].clone();
            rebuilt.push(split.valid[u].target);
            rebuilt.push(split.test[u].target);
            assert_eq!(rebuilt, s.items);
            // a target is never part of the window it is predicted from
            assert_eq!(split.test[u].context.len(), s.items.len() - 1);
            assert_eq!(split.valid[u].context.len(), s.items.len() - 2);
        }
    }
}
