use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// Exponential class-count profile: class `i` (0-based, head first) keeps
/// `n_max · (1/ρ)^(i/(C−1))` samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailSpec {
    pub classes: usize,
    pub n_max: usize,
    pub rho: f64,
    #[serde(default)]
    pub seed: u64,
}

impl LongTailSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Parameter(format!(
                "long-tail profile needs at least 2 classes, got {}",
                self.classes
            )));
        }
        if self.n_max < 1 {
            return Err(Error::Parameter("n_max must be at least 1".into()));
        }
        if !(self.rho >= 1.0) || !self.rho.is_finite() {
            return Err(Error::Parameter(format!("rho must be a finite value >= 1, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn mu(&self) -> f64 {
        1.0 / self.rho
    }
}

/// Per-class sample counts, rounded to nearest with a floor of 1.
pub fn class_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let c = spec.classes as f64;
    Ok((0..spec.classes)
        .map(|i| {
            let n = spec.n_max as f64 * spec.mu().powf(i as f64 / (c - 1.0));
            (n.round() as usize).max(1)
        })
        .collect())
}

/// Subsamples `source` to the profile of `spec`, picking each class's
/// members by a seeded shuffle of that class's index list.
pub fn make_longtail(source: &LabeledDataset, spec: &LongTailSpec) -> Result<LabeledDataset> {
    let counts = class_counts(spec)?;
    if source.classes() != spec.classes {
        return Err(Error::Data(format!(
            "source has {} classes but the profile asks for {}",
            source.classes(),
            spec.classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked = Vec::new();
    for (class, (members, &want)) in source.class_indices().iter().zip(&counts).enumerate() {
        if members.len() < want {
            return Err(Error::Data(format!(
                "class {class} has {} samples but the profile needs {want}",
                members.len()
            )));
        }
        let mut idx = members.clone();
        idx.shuffle(&mut rng);
        let mut chosen = idx[..want].to_vec();
        chosen.sort_unstable();
        picked.extend(chosen);
    }
    source.subset(&picked)
}

/// Removes a class-balanced validation set of `total` samples (the first
/// `total / C` of each class in index order) and returns it with the rest.
pub fn carve_validation(source: &LabeledDataset, total: usize) -> Result<(LabeledDataset, LabeledDataset)> {
    let c = source.classes();
    if total == 0 || !total.is_multiple_of(c) {
        return Err(Error::Data(format!(
            "validation size {total} is not a positive multiple of the {c} classes"
        )));
    }
    let per = total / c;
    let mut val = Vec::with_capacity(total);
    let mut taken = vec![false; source.len()];
    for (class, members) in source.class_indices().iter().enumerate() {
        if members.len() < per {
            return Err(Error::Data(format!(
                "class {class} has {} samples, fewer than the {per} needed for validation",
                members.len()
            )));
        }
        for &i in &members[..per] {
            val.push(i);
            taken[i] = true;
        }
    }
    let rest: Vec<usize> = (0..source.len()).filter(|&i| !taken[i]).collect();
    Ok((source.subset(&val)?, source.subset(&rest)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(classes: usize, n_max: usize, rho: f64) -> LongTailSpec {
        LongTailSpec {
            classes,
            n_max,
            rho,
            seed: 0,
        }
    }

    /// Direct evaluation of the profile, independent of `class_counts`.
    fn formula(n_max: f64, rho: f64, c: usize, i: usize) -> f64 {
        n_max * (1.0 / rho).powf((i as f64 - 1.0) / (c as f64 - 1.0))
    }

    #[test]
    fn balanced_profile() {
        assert_eq!(class_counts(&spec(10, 5000, 1.0)).unwrap(), vec![5000; 10]);
    }

    #[test]
    fn endpoints_at_rho_100() {
        let counts = class_counts(&spec(10, 5000, 100.0)).unwrap();
        assert_eq!(counts[0], 5000);
        assert_eq!(counts[9], 50);
        assert!(counts.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn second_class_at_rho_10() {
        // 500 · 0.1^(1/9) = 387.13...
        let expected = formula(500.0, 10.0, 10, 2);
        assert!((expected - 387.13).abs() < 0.01);
        assert_eq!(class_counts(&spec(10, 500, 10.0)).unwrap()[1], 387);
    }

    #[test]
    fn rejects_degenerate_profiles() {
        assert!(matches!(class_counts(&spec(1, 10, 2.0)), Err(Error::Parameter(_))));
        assert!(matches!(class_counts(&spec(3, 10, 0.5)), Err(Error::Parameter(_))));
        assert!(matches!(class_counts(&spec(3, 0, 2.0)), Err(Error::Parameter(_))));
    }

    #[test]
    fn tiny_tail_clamps_to_one() {
        let counts = class_counts(&spec(5, 10, 1000.0)).unwrap();
        assert_eq!(*counts.last().unwrap(), 1);
    }

    fn pool(classes: usize, per: usize) -> LabeledDataset {
        let labels: Vec<usize> = (0..classes * per).map(|i| i % classes).collect();
        let features = (0..classes * per).map(|i| i as f32).collect();
        LabeledDataset::new(features, 1, labels, classes).unwrap()
    }

    #[test]
    fn longtail_counts_and_determinism() {
        let src = pool(10, 600);
        let s = LongTailSpec {
            classes: 10,
            n_max: 500,
            rho: 10.0,
            seed: 3,
        };
        let a = make_longtail(&src, &s).unwrap();
        assert_eq!(a.counts(), class_counts(&s).unwrap());
        assert_eq!(a, make_longtail(&src, &s).unwrap());
        let other = make_longtail(&src, &LongTailSpec { seed: 4, ..s.clone() }).unwrap();
        assert_ne!(a.features(), other.features());
    }

    #[test]
    fn longtail_reports_short_class() {
        let src = pool(3, 5);
        let err = make_longtail(&src, &spec(3, 6, 2.0)).unwrap_err().to_string();
        assert!(err.contains("class 0"), "{err}");
    }

    #[test]
    fn carve_is_balanced_and_disjoint() {
        let src = pool(10, 150);
        let (val, rest) = carve_validation(&src, 1000).unwrap();
        assert_eq!(val.counts(), vec![100; 10]);
        assert_eq!(rest.len(), 500);
        // features are unique sample ids in this pool
        let mut ids: Vec<i64> = val.features().iter().chain(rest.features()).map(|&v| v as i64).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 1500);
    }

    #[test]
    fn carve_hundred_classes() {
        let (val, _) = carve_validation(&pool(100, 12), 1000).unwrap();
        assert_eq!(val.counts(), vec![10; 100]);
    }

    #[test]
    fn carve_errors() {
        assert!(matches!(carve_validation(&pool(3, 5), 10), Err(Error::Data(_))));
        assert!(matches!(carve_validation(&pool(3, 5), 18), Err(Error::Data(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn profile_invariants(classes in 2usize..40, n_max in 100usize..6000, rho in 1.0f64..200.0) {
                let counts = class_counts(&spec(classes, n_max, rho)).unwrap();
                prop_assert_eq!(counts.len(), classes);
                prop_assert_eq!(counts[0], n_max);
                prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
                let last = ((n_max as f64 / rho).round() as usize).max(1);
                prop_assert_eq!(*counts.last().unwrap(), last);
                for (i, &n) in counts.iter().enumerate() {
                    prop_assert!((n as f64 - formula(n_max as f64, rho, classes, i + 1)).abs() <= 0.5 + 1e-9);
                }
                if n_max as f64 / rho >= 25.0 {
                    let ratio = n_max as f64 / *counts.last().unwrap() as f64;
                    prop_assert!((ratio - rho).abs() <= 0.02 * rho);
                }
            }
        }
    }
}
