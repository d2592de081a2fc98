//! Partition rules: `time:<len>`, `rows:<n>`, `random:<n>`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionRule {
    /// Consecutive time blocks of the given length.
    Time(usize),
    /// `n` contiguous row ranges of near-equal size.
    Rows(usize),
    /// Seeded uniform assignment of rows to `n` parts.
    Random(usize),
}

impl PartitionRule {
    pub fn parse(s: &str) -> Result<Self> {
        let Some((kind, n)) = s.split_once(':') else {
            return invalid(format!("partition rule `{s}` is not of the form <kind>:<n>"));
        };
        let Ok(n) = n.trim().parse::<usize>() else {
            return invalid(format!("partition rule `{s}` needs a positive integer"));
        };
        if n == 0 {
            return invalid("partition size must be positive");
        }
        match kind.trim() {
            "time" => Ok(Self::Time(n)),
            "rows" => Ok(Self::Rows(n)),
            "random" => Ok(Self::Random(n)),
            other => invalid(format!("unknown partition kind `{other}`")),
        }
    }

    /// Row indices of each partition, each in table order.
    pub fn apply(&self, data: &Dataset, seed: u64) -> Result<Vec<Vec<usize>>> {
        let n = data.len();
        match *self {
            PartitionRule::Time(len) => {
                let mut times = Vec::with_capacity(n);
                for (i, r) in data.records.iter().enumerate() {
                    match r.time {
                        Some(t) => times.push(t),
                        None => return invalid(format!("row {i} has no time index for a time partition")),
                    }
                }
                let n_parts = times.iter().max().map_or(0, |t| t / len + 1);
                let mut parts = vec![Vec::new(); n_parts];
                for (i, t) in times.into_iter().enumerate() {
                    parts[t / len].push(i);
                }
                Ok(parts)
            }
            PartitionRule::Rows(k) => {
                if k > n.max(1) {
                    return invalid(format!("cannot split {n} rows into {k} parts"));
                }
                Ok((0..k).map(|j| (j * n / k..(j + 1) * n / k).collect()).collect())
            }
            PartitionRule::Random(k) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_9a27);
                let mut parts = vec![Vec::new(); k];
                for i in 0..n {
                    parts[rng.random_range(0..k)].push(i);
                }
                Ok(parts)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;

    fn data(n: usize) -> Dataset {
        Dataset { records: (0..n).map(|i| Record::new(0, i as f64).time(i / 2)).collect() }
    }

    #[test]
    fn parse_rules() {
        assert_eq!(PartitionRule::parse("time:10").unwrap(), PartitionRule::Time(10));
        assert_eq!(PartitionRule::parse("rows:3").unwrap(), PartitionRule::Rows(3));
        assert_eq!(PartitionRule::parse("random:4").unwrap(), PartitionRule::Random(4));
        for bad in ["time", "time:0", "blocks:2", "rows:x"] {
            assert!(PartitionRule::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn every_row_lands_in_exactly_one_part() {
        let d = data(23);
        for rule in [PartitionRule::Time(3), PartitionRule::Rows(4), PartitionRule::Random(5)] {
            let parts = rule.apply(&d, 7).unwrap();
            let mut all: Vec<usize> = parts.concat();
            all.sort_unstable();
            assert_eq!(all, (0..23).collect::<Vec<_>>(), "{rule:?}");
        }
        let t = PartitionRule::Time(3).apply(&d, 0).unwrap();
        assert_eq!(t.len(), 4);
        assert_eq!(t[0], vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(PartitionRule::Random(5).apply(&d, 7).unwrap(), PartitionRule::Random(5).apply(&d, 7).unwrap());
    }

    #[test]
    fn time_rule_needs_times() {
        let d = Dataset { records: vec![Record::new(0, 1.0)] };
        assert!(PartitionRule::Time(2).apply(&d, 0).is_err());
    }
}
