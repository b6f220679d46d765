//! Patient-grouped train/validation/test partitioning.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn parts(&self) -> [&[usize]; 3] {
        [&self.train, &self.val, &self.test]
    }
}

/// Largest share of the dataset a single patient may hold.
pub const MAX_PATIENT_SHARE: f64 = 0.8;

/// Assigns whole patients to splits so that sizes approach `fractions`.
///
/// Patients are visited in a seeded random order; each goes to the split
/// furthest below its target (ties to the earlier split). Indices in the
/// result are sorted.
pub fn split_by_patient<S: AsRef<str>>(patient_ids: &[S], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!("split fractions must be non-negative and sum to 1, got {fractions:?}")));
    }
    let n = patient_ids.len();
    if n == 0 {
        return Err(Error::Config("cannot split an empty dataset".into()));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in patient_ids.iter().enumerate() {
        groups.entry(p.as_ref()).or_default().push(i);
    }
    if let Some((p, g)) = groups.iter().find(|(_, g)| g.len() as f64 > MAX_PATIENT_SHARE * n as f64) {
        return Err(Error::Infeasible(format!(
            "patient {p} owns {} of {n} images; no patient-disjoint split is possible",
            g.len()
        )));
    }
    let mut order: Vec<Vec<usize>> = groups.into_values().collect();
    order.shuffle(&mut rng::seeded(rng::derive(seed, "split")));

    let targets = fractions.map(|f| f * n as f64);
    let mut parts: [Vec<usize>; 3] = Default::default();
    for group in order {
        let mut best = 0;
        let mut best_deficit = f64::NEG_INFINITY;
        for (k, part) in parts.iter().enumerate() {
            let deficit = targets[k] - part.len() as f64;
            if deficit > best_deficit {
                best = k;
                best_deficit = deficit;
            }
        }
        parts[best].extend(group);
    }
    for p in &mut parts {
        p.sort_unstable();
    }
    let [train, val, test] = parts;
    Ok(Split { train, val, test })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn ids(groups: &[usize]) -> Vec<String> {
        groups
            .iter()
            .enumerate()
            .flat_map(|(p, &k)| std::iter::repeat_n(format!("P{p}"), k))
            .collect()
    }

    #[test]
    fn ten_equal_patients() {
        let s = split_by_patient(&ids(&[10; 10]), [0.8, 0.1, 0.1], 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn thousand_images_hit_the_train_target() {
        use rand::Rng;
        for seed in 0..20 {
            let mut r = rng::seeded(rng::derive(seed, "groups"));
            let mut groups = Vec::new();
            let mut total = 0;
            while total < 1000 {
                let k = r.random_range(1..=3usize).min(1000 - total);
                groups.push(k);
                total += k;
            }
            let s = split_by_patient(&ids(&groups), [0.8, 0.1, 0.1], seed).unwrap();
            assert!((797..=803).contains(&s.train.len()), "{}", s.train.len());
        }
    }

    #[test]
    fn dominant_patient_is_infeasible() {
        let mut g = vec![1; 10];
        g.push(90);
        assert!(matches!(split_by_patient(&ids(&g), [0.8, 0.1, 0.1], 0), Err(Error::Infeasible(_))));
    }

    #[test]
    fn rejects_bad_fractions() {
        assert!(split_by_patient(&ids(&[2, 2]), [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_by_patient::<String>(&[], [0.8, 0.1, 0.1], 0).is_err());
    }

    proptest! {
        #[test]
        fn patient_disjoint_and_covering(groups in prop::collection::vec(1usize..=3, 40..200), seed in any::<u64>()) {
            let pids = ids(&groups);
            let s = split_by_patient(&pids, [0.8, 0.1, 0.1], seed).unwrap();
            let mut all: Vec<usize> = s.parts().iter().flat_map(|p| p.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..pids.len()).collect::<Vec<_>>());
            let sets: Vec<HashSet<&str>> = s.parts().iter().map(|p| p.iter().map(|&i| pids[i].as_str()).collect()).collect();
            for a in 0..3 {
                for b in a + 1..3 {
                    prop_assert!(sets[a].is_disjoint(&sets[b]));
                }
            }
            let n = pids.len() as f64;
            for (k, f) in [0.8, 0.1, 0.1].iter().enumerate() {
                prop_assert!((s.parts()[k].len() as f64 - f * n).abs() <= 6.0 + 1e-9);
            }
        }

        #[test]
        fn deterministic(groups in prop::collection::vec(1usize..=3, 5..50), seed in any::<u64>()) {
            let pids = ids(&groups);
            prop_assert_eq!(
                split_by_patient(&pids, [0.8, 0.1, 0.1], seed).unwrap(),
                split_by_patient(&pids, [0.8, 0.1, 0.1], seed).unwrap()
            );
        }
    }
}
