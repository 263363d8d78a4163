//! Count-aware replay budget allocation.
//!
//! Each class gets `clip(round(alpha * sqrt(n_c)), m_min, u_c)` slots where
//! `u_c = min(m_max, n_c, floor(p_max * n_c))`. `alpha` is the largest value
//! whose total stays within the budget; a greedy pass then hands out (or
//! takes back) single slots until the total matches.

use std::cmp::{Ordering, Reverse};

use crate::error::{Error, Result};
use crate::model::{AllocationPlan, ClassAllocation, ClassInventory};

const MAX_DOUBLINGS: usize = 60;
const BISECTION_STEPS: usize = 64;

/// `u_c = min(m_max, n_c, floor(p_max * n_c))`.
pub fn effective_cap(count: usize, m_max: usize, p_max: f64) -> usize {
    let pct_cap = (p_max * count as f64).floor() as usize;
    m_max.min(count).min(pct_cap)
}

/// Nearest integer, halves away from zero.
fn round_half_away(x: f64) -> usize {
    x.round() as usize
}

/// `min(max(x, lo), hi)`: when `hi < lo` the upper cap wins.
fn clip(x: usize, lo: usize, hi: usize) -> usize {
    x.max(lo).min(hi)
}

fn class_weight(count: usize, cap: usize, alpha: f64, m_min: usize) -> usize {
    clip(round_half_away(alpha * (count as f64).sqrt()), m_min, cap)
}

#[derive(Debug, Clone)]
struct Slot<'a> {
    label: &'a str,
    count: usize,
    cap: usize,
}

fn slots<'a>(
    counts: impl IntoIterator<Item = (&'a str, usize)>,
    m_max: usize,
    p_max: f64,
) -> Result<Vec<Slot<'a>>> {
    let mut slots: Vec<Slot<'a>> = counts
        .into_iter()
        .map(|(label, count)| Slot {
            label,
            count,
            cap: effective_cap(count, m_max, p_max),
        })
        .collect();
    slots.sort_by(|a, b| a.label.cmp(b.label));
    if let Some(w) = slots.windows(2).find(|w| w[0].label == w[1].label) {
        return Err(Error::InvalidParams(format!(
            "class `{}` listed twice",
            w[0].label
        )));
    }
    Ok(slots)
}

fn total(slots: &[Slot<'_>], alpha: f64, m_min: usize) -> usize {
    slots
        .iter()
        .map(|s| class_weight(s.count, s.cap, alpha, m_min))
        .sum()
}

/// Sum over classes of `clip(round(alpha * sqrt(n_c)), m_min, u_c)`.
pub fn total_for_alpha(
    inventory: &ClassInventory,
    alpha: f64,
    m_min: usize,
    m_max: usize,
    p_max: f64,
) -> usize {
    total_for_counts(inventory.counts(), alpha, m_min, m_max, p_max)
}

/// [`total_for_alpha`] over `(label, n_c)` pairs.
pub fn total_for_counts<'a>(
    counts: impl IntoIterator<Item = (&'a str, usize)>,
    alpha: f64,
    m_min: usize,
    m_max: usize,
    p_max: f64,
) -> usize {
    counts
        .into_iter()
        .map(|(_, n)| class_weight(n, effective_cap(n, m_max, p_max), alpha, m_min))
        .sum()
}

/// Largest tested alpha with `TOTAL(alpha) <= budget`, or 0 if even alpha = 0 overshoots.
fn search_alpha(slots: &[Slot<'_>], budget: usize, m_min: usize) -> f64 {
    let fits = |alpha: f64| total(slots, alpha, m_min) <= budget;

    let (mut lo, mut hi) = if fits(1.0) {
        let mut lo = 1.0;
        let mut hi = None;
        for _ in 0..MAX_DOUBLINGS {
            let next = lo * 2.0;
            if fits(next) {
                lo = next;
            } else {
                hi = Some(next);
                break;
            }
        }
        match hi {
            Some(hi) => (lo, hi),
            // every class is already at its cap
            None => return lo,
        }
    } else {
        (0.0, 1.0)
    };

    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Tie order shared by both greedy loops: larger `n_c` first, then smaller label.
fn tie_order(a: &Slot<'_>, b: &Slot<'_>) -> Ordering {
    b.count.cmp(&a.count).then_with(|| a.label.cmp(b.label))
}

/// Splits `budget` replay slots across the classes of `inventory`.
///
/// Fails with [`Error::InfeasibleBudget`] when `budget` is smaller than the
/// number of classes, or when every class is already down to one slot and
/// the total still exceeds the budget.
pub fn allocate_budget(
    inventory: &ClassInventory,
    budget: usize,
    m_min: usize,
    m_max: usize,
    p_max: f64,
) -> Result<AllocationPlan> {
    allocate_counts(inventory.counts(), budget, m_min, m_max, p_max)
}

/// [`allocate_budget`] over `(label, n_c)` pairs given in any order.
/// Labels must be distinct.
pub fn allocate_counts<'a>(
    counts: impl IntoIterator<Item = (&'a str, usize)>,
    budget: usize,
    m_min: usize,
    m_max: usize,
    p_max: f64,
) -> Result<AllocationPlan> {
    if m_min == 0 || m_max < m_min || !(p_max > 0.0 && p_max <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "caps m_min={m_min}, m_max={m_max}, p_max={p_max}"
        )));
    }
    let slots = slots(counts, m_max, p_max)?;
    if slots.is_empty() {
        return Err(Error::InvalidParams("inventory has no classes".into()));
    }
    let classes = slots.len();
    if budget < classes {
        return Err(Error::InfeasibleBudget { budget, classes });
    }

    let alpha = search_alpha(&slots, budget, m_min);
    let mut quotas: Vec<usize> = slots
        .iter()
        .map(|s| class_weight(s.count, s.cap, alpha, m_min))
        .collect();
    let mut sum: usize = quotas.iter().sum();

    while sum < budget {
        let pick = (0..slots.len())
            .filter(|&i| quotas[i] < slots[i].cap)
            .min_by(|&i, &j| {
                quotas[i]
                    .cmp(&quotas[j])
                    .then_with(|| tie_order(&slots[i], &slots[j]))
            });
        match pick {
            Some(i) => {
                quotas[i] += 1;
                sum += 1;
            }
            None => break,
        }
    }

    while sum > budget {
        let pick = (0..slots.len())
            .filter(|&i| quotas[i] > 1)
            .min_by(|&i, &j| {
                Reverse(quotas[i])
                    .cmp(&Reverse(quotas[j]))
                    .then_with(|| tie_order(&slots[i], &slots[j]))
            });
        match pick {
            Some(i) => {
                quotas[i] -= 1;
                sum -= 1;
            }
            None => return Err(Error::InfeasibleBudget { budget, classes }),
        }
    }

    Ok(AllocationPlan {
        budget,
        alpha,
        classes: slots
            .iter()
            .zip(&quotas)
            .map(|(s, &quota)| ClassAllocation {
                class_label: s.label.to_string(),
                count: s.count,
                cap: s.cap,
                quota,
            })
            .collect(),
        shortfall: budget - sum,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_inventory, AssetRecord};

    pub(crate) fn inventory(sizes: &[(&str, usize)]) -> ClassInventory {
        let records = sizes.iter().flat_map(|&(label, n)| {
            (0..n).map(move |i| AssetRecord::new(format!("{label}-{i:04}"), label, ["caption"]))
        });
        validate_inventory(records).unwrap()
    }

    /// Exhaustive scan over the breakpoints `(j + 0.5) / sqrt(n)` where some
    /// class's rounded weight steps up. Returns the largest total <= budget
    /// reachable by any alpha, together with the quotas at that alpha.
    fn breakpoint_oracle(
        sizes: &[usize],
        budget: usize,
        m_min: usize,
        m_max: usize,
        p_max: f64,
    ) -> (usize, Vec<usize>) {
        let caps: Vec<usize> = sizes
            .iter()
            .map(|&n| {
                let mut u = m_max.min(n);
                while (u as f64) > p_max * n as f64 {
                    u -= 1;
                }
                u
            })
            .collect();
        let weights = |alpha: f64| -> Vec<usize> {
            sizes
                .iter()
                .zip(&caps)
                .map(|(&n, &u)| {
                    let raw = alpha * (n as f64).sqrt();
                    let r = if raw - raw.floor() >= 0.5 {
                        raw.ceil()
                    } else {
                        raw.floor()
                    } as usize;
                    if r < m_min {
                        m_min.min(u)
                    } else {
                        r.min(u)
                    }
                })
                .collect()
        };
        let mut candidates = vec![0.0];
        for &n in sizes {
            for j in 0..=m_max {
                let b = (j as f64 + 0.5) / (n as f64).sqrt();
                candidates.extend([b, b * (1.0 + 1e-12)]);
            }
        }
        let mut best = (0, weights(0.0));
        for a in candidates {
            let w = weights(a);
            let t: usize = w.iter().sum();
            if t <= budget && t >= best.0 {
                best = (t, w);
            }
        }
        best
    }

    #[test]
    fn cap_examples() {
        assert_eq!(effective_cap(100, 20, 0.30), 20);
        assert_eq!(effective_cap(10, 20, 0.30), 3);
        assert_eq!(effective_cap(2, 20, 0.30), 0);
    }

    #[test]
    fn total_examples() {
        let inv = inventory(&[("a", 100), ("b", 25), ("c", 9)]);
        assert_eq!(total_for_alpha(&inv, 0.66, 1, 20, 1.0), 12);
        // alpha = 0: every class sits at min(m_min, u_c)
        assert_eq!(total_for_alpha(&inv, 0.0, 1, 20, 1.0), 3);
        let small = inventory(&[("a", 100), ("b", 2)]);
        assert_eq!(total_for_alpha(&small, 0.0, 3, 20, 0.30), 3);
        assert_eq!(
            total_for_alpha(&inventory(&[("x", 16)]), 1.0, 1, 20, 1.0),
            4
        );
    }

    #[test]
    fn three_class_budget_matches_oracle() {
        let (oracle_total, oracle_quotas) = breakpoint_oracle(&[100, 25, 9], 12, 1, 20, 1.0);
        assert_eq!(oracle_total, 12);
        assert_eq!(oracle_quotas, [7, 3, 2]);

        let plan = allocate_budget(
            &inventory(&[("a", 100), ("b", 25), ("c", 9)]),
            12,
            1,
            20,
            1.0,
        )
        .unwrap();
        let quotas: Vec<_> = plan.classes.iter().map(|c| c.quota).collect();
        assert_eq!(quotas, [7, 3, 2]);
        assert_eq!(plan.shortfall, 0);
        assert!(
            plan.alpha >= 0.65 && plan.alpha < 0.7,
            "alpha {}",
            plan.alpha
        );
    }

    #[test]
    fn single_class_absorbs_budget() {
        let plan = allocate_budget(&inventory(&[("x", 10)]), 4, 1, 20, 1.0).unwrap();
        assert_eq!(plan.classes[0].quota, 4);
    }

    #[test]
    fn budget_below_class_count_is_infeasible() {
        let inv = inventory(&[("a", 10), ("b", 10), ("c", 10)]);
        assert!(matches!(
            allocate_budget(&inv, 2, 1, 20, 1.0),
            Err(Error::InfeasibleBudget {
                budget: 2,
                classes: 3
            })
        ));
    }

    #[test]
    fn shortfall_when_caps_exhausted() {
        let inv = inventory(&[("a", 10), ("b", 10)]);
        let plan = allocate_budget(&inv, 50, 1, 20, 0.30).unwrap();
        assert_eq!(plan.allocated(), 6);
        assert_eq!(plan.shortfall, 44);
        plan.check().unwrap();
    }

    #[test]
    fn decrement_goes_below_m_min() {
        // m_min forces 3 per class but the budget only covers 4.
        let inv = inventory(&[("a", 40), ("b", 20)]);
        let plan = allocate_budget(&inv, 4, 3, 20, 1.0).unwrap();
        assert_eq!(plan.allocated(), 4);
        assert_eq!(plan.quota("a"), Some(2));
        assert_eq!(plan.quota("b"), Some(2));
        assert_eq!(plan.alpha, 0.0);
    }

    #[test]
    fn zero_cap_class_gets_nothing() {
        let inv = inventory(&[("a", 50), ("tiny", 2)]);
        let plan = allocate_budget(&inv, 10, 3, 20, 0.30).unwrap();
        assert_eq!(plan.quota("tiny"), Some(0));
        assert_eq!(plan.quota("a"), Some(10));
        plan.check().unwrap();
    }

    #[test]
    fn long_tailed_base_inventory_fills_248() {
        // 45 classes, 1352 assets, every class >= 10.
        let mut sizes: Vec<usize> = (0..45)
            .map(|i| 10 + (90.0 * (-(i as f64) / 9.0).exp()) as usize)
            .collect();
        let deficit = 1352 - sizes.iter().sum::<usize>();
        sizes[0] += deficit;
        let names: Vec<String> = (0..45).map(|i| format!("class{i:02}")).collect();
        let pairs: Vec<(&str, usize)> = names
            .iter()
            .map(String::as_str)
            .zip(sizes.iter().copied())
            .collect();
        let inv = inventory(&pairs);
        assert_eq!(inv.total(), 1352);
        let plan = allocate_budget(&inv, 248, 3, 20, 0.30).unwrap();
        assert_eq!(plan.allocated(), 248);
        plan.check().unwrap();
        assert!(plan.classes.iter().all(|c| c.quota >= 3 && c.quota <= 20));
    }

    #[test]
    fn counts_entry_point_ignores_order() {
        let a = allocate_counts([("x", 100), ("y", 25), ("z", 9)], 12, 3, 20, 0.30).unwrap();
        let b = allocate_counts([("z", 9), ("x", 100), ("y", 25)], 12, 3, 20, 0.30).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.classes[0].class_label, "x");
        // x: round(10) within cap 20; z: cap floor(2.7) = 2 beats m_min
        assert_eq!(
            total_for_counts([("z", 9), ("x", 100)], 1.0, 3, 20, 0.30),
            12
        );
    }

    #[test]
    fn counts_entry_point_rejects_repeated_label() {
        assert!(matches!(
            allocate_counts([("x", 10), ("x", 20)], 5, 1, 20, 1.0),
            Err(Error::InvalidParams(_))
        ));
    }
}
