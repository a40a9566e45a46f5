//! Closed-form quantities against brute-force recomputations on random
//! instances.

use rand::Rng as _;

use super::Verdict;
use crate::budget::{penalty, query_cost, FeatureSpec, QueryMask};
use crate::data::{normalized_score, reward_to_go};
use crate::error::Result;
use crate::rng::{self, tag, Rng};

const INSTANCES: usize = 1000;
const SUM_TOL: f64 = 1e-12;

fn random_spec(r: &mut Rng) -> (FeatureSpec, Vec<f64>) {
    let m = r.random_range(1..=16);
    let mut costs: Vec<f64> = (0..m)
        .map(|_| if r.random_bool(0.2) { 0.0 } else { r.random_range(0.01..25.0) })
        .collect();
    if costs.iter().all(|&c| c == 0.0) {
        costs[0] = r.random_range(0.01..25.0);
    }
    let names = (0..m).map(|i| format!("f{i}")).collect();
    let widths = (0..m).map(|_| r.random_range(1..4)).collect();
    (FeatureSpec::new(names, costs.clone(), widths).expect("valid spec"), costs)
}

fn oracle_cost(bits: &[bool], costs: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut total = 0.0;
    for i in 0..costs.len() {
        if bits[i] {
            num += costs[i];
        }
        total += costs[i];
    }
    num / total
}

/// Hinge on the trailing window average at every step, averaged over steps.
fn oracle_penalty(costs: &[f64], c: f64, n: usize) -> f64 {
    let t_len = costs.len();
    let mut acc = 0.0;
    for t in 0..t_len {
        let first = if t + 1 >= n { t + 1 - n } else { 0 };
        let mut s = 0.0;
        let mut count = 0usize;
        for &x in &costs[first..=t] {
            s += x;
            count += 1;
        }
        let avg = s / count as f64;
        if avg > c {
            acc += avg - c;
        }
    }
    acc / t_len as f64
}

fn oracle_rtg(rewards: &[f64]) -> Vec<f64> {
    (0..rewards.len())
        .map(|t| {
            let mut s = 0.0;
            for &x in &rewards[t..] {
                s += x;
            }
            s
        })
        .collect()
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= SUM_TOL * a.abs().max(b.abs()).max(1.0)
}

pub(super) fn check() -> Result<Verdict> {
    let mut r = rng::stream(0, &[tag::ACCEPTANCE, 20]);
    let mut failures: Vec<String> = Vec::new();
    let mut fail = |what: &str, i: usize| {
        if failures.len() < 5 {
            failures.push(format!("{what}#{i}"));
        }
    };

    for i in 0..INSTANCES {
        let (spec, costs) = random_spec(&mut r);
        let bits: Vec<bool> = (0..costs.len()).map(|_| r.random()).collect();
        let got = query_cost(&QueryMask::new(bits.clone()), &spec)?;
        if got != oracle_cost(&bits, &costs) {
            fail("query_cost", i);
        }
    }

    for n in [1usize, 3] {
        for i in 0..INSTANCES {
            let t = r.random_range(1..60);
            let costs: Vec<f64> = (0..t).map(|_| r.random_range(0.0..1.0)).collect();
            let c = r.random_range(0.0..1.0);
            if !close(penalty(&costs, c, n), oracle_penalty(&costs, c, n)) {
                fail(if n == 1 { "penalty_n1" } else { "penalty_n3" }, i);
            }
        }
    }

    for i in 0..INSTANCES {
        let lo = r.random_range(-100.0..100.0);
        let hi = lo + r.random_range(0.5..200.0);
        let s = r.random_range(-300.0..300.0);
        let (a, b) = if r.random() { (lo, hi) } else { (hi, lo) };
        if normalized_score(s, a, b)? != 100.0 * (s - a) / (b - a) {
            fail("normalized_score", i);
        }
    }

    for i in 0..INSTANCES {
        let t = r.random_range(0..300);
        let rewards: Vec<f64> = (0..t).map(|_| r.random_range(-10.0..10.0)).collect();
        let got = reward_to_go(&rewards);
        let want = oracle_rtg(&rewards);
        if got.len() != want.len() || !got.iter().zip(&want).all(|(a, b)| close(*a, *b)) {
            fail("reward_to_go", i);
        }
    }

    let passed = failures.is_empty();
    Ok(Verdict::new(
        passed,
        if passed {
            format!("{INSTANCES} instances each of query_cost, penalty N=1 and N=3, normalized_score, reward_to_go; 0 mismatches")
        } else {
            format!("mismatches: {}", failures.join(", "))
        },
    ))
}
