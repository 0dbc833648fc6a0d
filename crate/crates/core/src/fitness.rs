//! Explored-set registry and the max-normalized fitness.
//!
//! Fitness of an architecture is the sum over the enabled metrics of its
//! raw score divided by the best score of that metric among every explored
//! architecture. Maxima move as exploration proceeds, so fitness is always
//! computed on demand and never stored.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricVector;

/// Which fitness terms participate; used for leave-one-out ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Terms {
    pub log_synflow: bool,
    pub linear_regions: bool,
    pub skip: bool,
}

impl Default for Terms {
    fn default() -> Self {
        Terms { log_synflow: true, linear_regions: true, skip: true }
    }
}

impl Terms {
    /// The full fitness followed by the three leave-one-out variants.
    pub fn ablations() -> [(&'static str, Terms); 4] {
        let all = Terms::default();
        [
            ("all", all),
            ("no-ls", Terms { log_synflow: false, ..all }),
            ("no-lr", Terms { linear_regions: false, ..all }),
            ("no-skip", Terms { skip: false, ..all }),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maxima {
    pub log_synflow: f64,
    pub linear_regions: f64,
    pub skip_score: f64,
}

impl Default for Maxima {
    fn default() -> Self {
        Maxima { log_synflow: f64::NEG_INFINITY, linear_regions: f64::NEG_INFINITY, skip_score: f64::NEG_INFINITY }
    }
}

/// The explored set `J`: canonical hash → metric vector, plus running maxima.
#[derive(Debug, Clone, Default)]
pub struct ExploredRegistry {
    entries: HashMap<u64, MetricVector>,
    maxima: Maxima,
    terms: Terms,
}

fn raise(current: &mut f64, value: f64) {
    if value.is_finite() && value > *current {
        *current = value;
    }
}

fn term(value: f64, max: f64) -> f64 {
    if !max.is_finite() || max <= 0.0 || !value.is_finite() {
        0.0
    } else {
        value / max
    }
}

impl ExploredRegistry {
    pub fn new(terms: Terms) -> Self {
        ExploredRegistry { terms, ..Default::default() }
    }

    pub fn terms(&self) -> Terms {
        self.terms
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn maxima(&self) -> Maxima {
        self.maxima
    }

    pub fn get(&self, hash: u64) -> Option<&MetricVector> {
        self.entries.get(&hash)
    }

    pub fn vectors(&self) -> impl Iterator<Item = &MetricVector> {
        self.entries.values()
    }

    /// Records `vector` under `hash`. Re-registering a known hash is a no-op.
    /// Non-finite values (the singular-kernel sentinel) never become maxima.
    pub fn register(&mut self, hash: u64, vector: MetricVector) -> bool {
        if self.entries.contains_key(&hash) {
            return false;
        }
        self.entries.insert(hash, vector);
        raise(&mut self.maxima.log_synflow, vector.log_synflow);
        raise(&mut self.maxima.linear_regions, vector.linear_regions);
        raise(&mut self.maxima.skip_score, vector.skip_score);
        true
    }

    /// A term contributes 0 when disabled, when its maximum is not positive
    /// and finite, or when the value itself is non-finite.
    pub fn fitness(&self, v: &MetricVector) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::EmptyRegistry);
        }
        let m = &self.maxima;
        let mut f = 0.0;
        if self.terms.log_synflow {
            f += term(v.log_synflow, m.log_synflow);
        }
        if self.terms.linear_regions {
            f += term(v.linear_regions, m.linear_regions);
        }
        if self.terms.skip {
            f += term(v.skip_score, m.skip_score);
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(ls: f64, lr: f64, skip: f64) -> MetricVector {
        MetricVector { log_synflow: ls, linear_regions: lr, skip_score: skip }
    }

    #[test]
    fn empty_registry_has_no_fitness() {
        let r = ExploredRegistry::default();
        assert!(matches!(r.fitness(&v(1.0, 1.0, 1.0)), Err(Error::EmptyRegistry)));
    }

    #[test]
    fn first_registration_sets_maxima() {
        let mut r = ExploredRegistry::default();
        r.register(1, v(2.0, 3.0, 1.0));
        assert_eq!(r.maxima(), Maxima { log_synflow: 2.0, linear_regions: 3.0, skip_score: 1.0 });
        r.register(2, v(1.0, 1.0, 0.5));
        assert_eq!(r.maxima(), Maxima { log_synflow: 2.0, linear_regions: 3.0, skip_score: 1.0 });
    }

    #[test]
    fn sentinel_never_becomes_max() {
        let mut r = ExploredRegistry::default();
        r.register(1, v(0.0, f64::NEG_INFINITY, 0.0));
        assert_eq!(r.maxima().linear_regions, f64::NEG_INFINITY);
        assert_eq!(r.fitness(&v(0.0, f64::NEG_INFINITY, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn fitness_examples() {
        let mut r = ExploredRegistry::default();
        r.register(1, v(4.0, 20.0, 2.0));
        assert_eq!(r.fitness(&v(4.0, 20.0, 2.0)).unwrap(), 3.0);
        assert_eq!(r.fitness(&v(2.0, 10.0, 1.0)).unwrap(), 1.5);
        assert_eq!(r.fitness(&v(0.0, f64::NEG_INFINITY, 0.0)).unwrap(), 0.0);
    }

    #[test]
    fn negative_linear_regions_stay_negative() {
        let mut r = ExploredRegistry::default();
        r.register(1, v(1.0, 10.0, 1.0));
        assert_eq!(r.fitness(&v(0.0, -5.0, 0.0)).unwrap(), -0.5);
    }

    #[test]
    fn disabled_terms_contribute_nothing() {
        let mut r = ExploredRegistry::new(Terms { linear_regions: false, ..Terms::default() });
        r.register(1, v(4.0, 20.0, 2.0));
        assert_eq!(r.fitness(&v(4.0, 20.0, 2.0)).unwrap(), 2.0);
    }

    #[test]
    fn new_max_holder_changes_fitness_on_requery() {
        let mut r = ExploredRegistry::default();
        let a = v(2.0, 2.0, 2.0);
        r.register(1, a);
        assert_eq!(r.fitness(&a).unwrap(), 3.0);
        r.register(2, v(4.0, 4.0, 4.0));
        assert_eq!(r.fitness(&a).unwrap(), 1.5);
    }

    #[test]
    fn duplicate_hash_is_ignored() {
        let mut r = ExploredRegistry::default();
        assert!(r.register(7, v(1.0, 1.0, 1.0)));
        assert!(!r.register(7, v(9.0, 9.0, 9.0)));
        assert_eq!(r.len(), 1);
        assert_eq!(r.maxima().log_synflow, 1.0);
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn metric() -> impl Strategy<Value = MetricVector> {
            (0.0..1e3f64, prop_oneof![Just(f64::NEG_INFINITY), -50.0..500.0f64], 0.0..3.0f64)
                .prop_map(|(ls, lr, skip)| v(ls, lr, skip))
        }

        proptest! {
            #[test]
            fn rescaling_log_synflow_preserves_ranking(
                vs in prop::collection::vec(metric(), 2..40),
                scale in 1e-3..1e3f64,
            ) {
                let mut a = ExploredRegistry::default();
                let mut b = ExploredRegistry::default();
                for (i, x) in vs.iter().enumerate() {
                    a.register(i as u64, *x);
                    b.register(i as u64, MetricVector { log_synflow: x.log_synflow * scale, ..*x });
                }
                for x in &vs {
                    for y in &vs {
                        let fa = a.fitness(x).unwrap() - a.fitness(y).unwrap();
                        let sx = MetricVector { log_synflow: x.log_synflow * scale, ..*x };
                        let sy = MetricVector { log_synflow: y.log_synflow * scale, ..*y };
                        let fb = b.fitness(&sx).unwrap() - b.fitness(&sy).unwrap();
                        if fa.abs() > 1e-9 {
                            prop_assert_eq!(fa > 0.0, fb > 0.0);
                        }
                    }
                }
            }

            #[test]
            fn max_holder_terms_are_one(vs in prop::collection::vec(metric(), 1..40)) {
                let mut r = ExploredRegistry::default();
                for (i, x) in vs.iter().enumerate() {
                    r.register(i as u64, *x);
                }
                let m = r.maxima();
                for x in &vs {
                    let f = r.fitness(x).unwrap();
                    prop_assert!(f <= 3.0 + 1e-12);
                    if m.log_synflow > 0.0 && x.log_synflow == m.log_synflow {
                        let only = ExploredRegistry { terms: Terms { linear_regions: false, skip: false, log_synflow: true }, ..r.clone() };
                        prop_assert_eq!(only.fitness(x).unwrap(), 1.0);
                    }
                }
            }

            #[test]
            fn fitness_increases_with_each_component(x in metric(), bump in 1e-3..10.0f64) {
                let mut r = ExploredRegistry::default();
                r.register(0, v(1e3, 500.0, 3.0));
                let base = r.fitness(&x).unwrap();
                let more_ls = MetricVector { log_synflow: x.log_synflow + bump, ..x };
                let more_skip = MetricVector { skip_score: x.skip_score + bump, ..x };
                prop_assert!(r.fitness(&more_ls).unwrap() > base);
                prop_assert!(r.fitness(&more_skip).unwrap() > base);
                if x.linear_regions.is_finite() {
                    let more_lr = MetricVector { linear_regions: x.linear_regions + bump, ..x };
                    prop_assert!(r.fitness(&more_lr).unwrap() > base);
                }
            }
        }
    }
}
