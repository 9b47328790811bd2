//! Synthetic retrieval tasks for the toy ablations.
//!
//! Vocabulary layout for `vocab` ids: the lower half is filler, the next
//! quarter keys, the top quarter values. A needle sequence is filler with one
//! `KEY VALUE` pair inserted; the final position repeats `KEY` and the only
//! target is `VALUE` there. Accuracy is exact next-token match (argmax over
//! the whole vocabulary).

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::CliError;

pub const DEPTH_BUCKETS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    /// Random first half, repeated as the second half; targets on the repeat.
    Copy,
    Needle,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Needle => "needle",
        })
    }
}

impl FromStr for TaskKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "needle" => Ok(TaskKind::Needle),
            _ => Err(CliError::Usage(format!("unknown task `{s}` (copy|needle)"))),
        }
    }
}

/// Where the key of a needle goes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum NeedlePlacement {
    /// Any position that leaves room for the value and the query.
    Uniform,
    /// Key position drawn from `[lo, hi)`, clamped to the valid range.
    Range(usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seq_len: usize,
    pub vocab: usize,
    pub placement: NeedlePlacement,
}

/// One generated sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    /// Key position for needles, 0 for copy.
    pub needle_pos: usize,
}

impl Example {
    /// Needle depth as a fraction of the positions a key can occupy.
    pub fn depth(&self) -> f64 {
        let span = self.tokens.len().saturating_sub(3).max(1);
        self.needle_pos as f64 / span as f64
    }

    pub fn depth_bucket(&self) -> usize {
        ((self.depth() * DEPTH_BUCKETS as f64) as usize).min(DEPTH_BUCKETS - 1)
    }
}

impl SyntheticTask {
    pub fn needle(seq_len: usize, vocab: usize) -> Self {
        Self {
            kind: TaskKind::Needle,
            seq_len,
            vocab,
            placement: NeedlePlacement::Uniform,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.vocab < 8 || !self.vocab.is_multiple_of(4) {
            return Err(CliError::Usage(format!(
                "task vocab must be a multiple of 4 and at least 8, got {}",
                self.vocab
            )));
        }
        let min_len = match self.kind {
            TaskKind::Copy => 2,
            TaskKind::Needle => 3,
        };
        if self.seq_len < min_len {
            return Err(CliError::Usage(format!("seq_len {} too short", self.seq_len)));
        }
        Ok(())
    }

    fn filler(&self) -> std::ops::Range<usize> {
        0..self.vocab / 2
    }

    pub fn keys(&self) -> std::ops::Range<usize> {
        self.vocab / 2..3 * self.vocab / 4
    }

    pub fn values(&self) -> std::ops::Range<usize> {
        3 * self.vocab / 4..self.vocab
    }

    /// Same task at another length.
    pub fn with_len(&self, seq_len: usize) -> Self {
        Self {
            seq_len,
            ..self.clone()
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Example {
        match self.kind {
            TaskKind::Copy => self.sample_copy(rng),
            TaskKind::Needle => self.sample_needle(rng),
        }
    }

    fn sample_copy(&self, rng: &mut impl Rng) -> Example {
        let half = self.seq_len / 2;
        let first: Vec<usize> = (0..half).map(|_| rng.gen_range(0..self.vocab)).collect();
        let mut tokens = first.clone();
        tokens.extend_from_slice(&first);
        tokens.resize(self.seq_len, 0);
        // position i predicts token i + 1; only the repeat is predictable
        let targets = (0..self.seq_len)
            .map(|i| (i + 1 > half && i + 1 < 2 * half).then(|| tokens[i + 1]))
            .collect();
        Example {
            tokens,
            targets,
            needle_pos: 0,
        }
    }

    fn sample_needle(&self, rng: &mut impl Rng) -> Example {
        let n = self.seq_len;
        let last_key = n - 3;
        let pos = match self.placement {
            NeedlePlacement::Uniform => rng.gen_range(0..=last_key),
            NeedlePlacement::Range(lo, hi) => {
                let lo = lo.min(last_key);
                let hi = hi.clamp(lo + 1, last_key + 1);
                rng.gen_range(lo..hi)
            }
        };
        let filler = self.filler();
        let mut tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(filler.clone())).collect();
        let key = rng.gen_range(self.keys());
        let value = rng.gen_range(self.values());
        tokens[pos] = key;
        tokens[pos + 1] = value;
        tokens[n - 1] = key;
        let mut targets = vec![None; n];
        targets[n - 1] = Some(value);
        Example {
            tokens,
            targets,
            needle_pos: pos,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn needle_layout() {
        let task = SyntheticTask::needle(64, 32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let ex = task.sample(&mut rng);
            let p = ex.needle_pos;
            assert_eq!(ex.tokens.len(), 64);
            assert!(task.keys().contains(&ex.tokens[p]));
            assert_eq!(ex.tokens[63], ex.tokens[p]);
            assert_eq!(ex.targets[63], Some(ex.tokens[p + 1]));
            assert!(task.values().contains(&ex.tokens[p + 1]));
            assert_eq!(ex.targets.iter().flatten().count(), 1);
            // the key occurs exactly twice
            assert_eq!(ex.tokens.iter().filter(|&&t| t == ex.tokens[p]).count(), 2);
            assert!(ex.depth_bucket() < DEPTH_BUCKETS);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let task = SyntheticTask::needle(100, 16);
        let a: Vec<Example> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..5).map(|_| task.sample(&mut rng)).collect()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let b: Vec<Example> = (0..5).map(|_| task.sample(&mut rng)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn ranged_placement() {
        let task = SyntheticTask {
            placement: NeedlePlacement::Range(32, 400),
            ..SyntheticTask::needle(512, 32)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let p = task.sample(&mut rng).needle_pos;
            assert!((32..400).contains(&p));
        }
    }

    #[test]
    fn copy_targets_repeat() {
        let task = SyntheticTask {
            kind: TaskKind::Copy,
            ..SyntheticTask::needle(20, 16)
        };
        let ex = task.sample(&mut ChaCha8Rng::seed_from_u64(3));
        for (i, t) in ex.targets.iter().enumerate() {
            if let Some(t) = t {
                assert_eq!(*t, ex.tokens[i + 1]);
                assert_eq!(ex.tokens[i + 1], ex.tokens[i + 1 - 10]);
            }
        }
        assert_eq!(ex.targets.iter().flatten().count(), 9);
    }

    #[test]
    fn bad_vocab() {
        assert!(SyntheticTask::needle(10, 6).validate().is_err());
        assert!(SyntheticTask::needle(2, 16).validate().is_err());
    }
}
