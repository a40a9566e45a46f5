//! Acquisition costs, the hinge penalty on per-step cost, the penalty weight
//! schedule, and the budgeted loss.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Per-feature names, acquisition costs and value widths.
///
/// A feature may span several observation values (a raycast reports a
/// distance and a hit kind); its mask bit covers all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    names: Vec<String>,
    costs: Vec<f64>,
    widths: Vec<usize>,
}

impl FeatureSpec {
    pub fn new(names: Vec<String>, costs: Vec<f64>, widths: Vec<usize>) -> Result<Self> {
        if names.len() != costs.len() || names.len() != widths.len() {
            return Err(Error::Config(format!(
                "feature spec has {} names, {} costs and {} widths",
                names.len(),
                costs.len(),
                widths.len()
            )));
        }
        if let Some(i) = costs.iter().position(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::Config(format!(
                "feature {} has invalid cost {}",
                names[i], costs[i]
            )));
        }
        if let Some(i) = widths.iter().position(|&w| w == 0) {
            return Err(Error::Config(format!("feature {} has zero width", names[i])));
        }
        let spec = FeatureSpec {
            names,
            costs,
            widths,
        };
        if spec.l1() <= 0.0 {
            return Err(Error::Config("feature costs sum to zero".into()));
        }
        Ok(spec)
    }

    /// Scalar features, all with the same cost.
    pub fn uniform(names: &[&str], cost: f64) -> Result<Self> {
        FeatureSpec::new(
            names.iter().map(|s| s.to_string()).collect(),
            vec![cost; names.len()],
            vec![1; names.len()],
        )
    }

    pub fn m(&self) -> usize {
        self.costs.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// `‖f‖₁`.
    pub fn l1(&self) -> f64 {
        self.costs.iter().sum()
    }

    /// Length of the observation vector.
    pub fn obs_dim(&self) -> usize {
        self.widths.iter().sum()
    }

    /// Start of each feature's values in the observation vector.
    pub fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.widths
            .iter()
            .map(|w| {
                let o = off;
                off += w;
                o
            })
            .collect()
    }

    /// Per-value multipliers for a mask: each bit repeated over its feature's width.
    pub fn expand(&self, bits: &[f64]) -> Vec<f64> {
        bits.iter()
            .zip(&self.widths)
            .flat_map(|(&b, &w)| std::iter::repeat_n(b, w))
            .collect()
    }

    /// `m × obs_dim` 0/1 matrix mapping mask bits to observation values.
    pub fn expansion_matrix(&self) -> Tensor {
        let (m, d) = (self.m(), self.obs_dim());
        let mut e = vec![0.0; m * d];
        for (i, (&o, &w)) in self.offsets().iter().zip(&self.widths).enumerate() {
            for j in o..o + w {
                e[i * d + j] = 1.0;
            }
        }
        Tensor::new(vec![m, d], e).expect("shape")
    }

    /// Costs divided by `‖f‖₁`, as an `m × 1` column.
    pub fn normalized_cost_column(&self) -> Tensor {
        let l1 = self.l1();
        Tensor::new(vec![self.m(), 1], self.costs.iter().map(|c| c / l1).collect()).expect("shape")
    }

    /// Indices of features with zero cost.
    pub fn free_features(&self) -> Vec<usize> {
        (0..self.m()).filter(|&i| self.costs[i] == 0.0).collect()
    }
}

/// Binary acquisition mask over the `m` features.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct QueryMask {
    bits: Vec<bool>,
}

impl QueryMask {
    pub fn new(bits: Vec<bool>) -> Self {
        QueryMask { bits }
    }

    pub fn ones(m: usize) -> Self {
        QueryMask { bits: vec![true; m] }
    }

    pub fn zeros(m: usize) -> Self {
        QueryMask { bits: vec![false; m] }
    }

    /// Bits from a 0/1 float vector; any nonzero entry counts as acquired.
    pub fn from_f64(v: &[f64]) -> Self {
        QueryMask {
            bits: v.iter().map(|&x| x != 0.0).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn set(&mut self, i: usize, on: bool) {
        self.bits[i] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }
}

/// Observation values with unacquired entries zeroed, plus the mask itself.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedObservation {
    pub values: Vec<f64>,
    pub mask: QueryMask,
}

impl MaskedObservation {
    /// Zeroes the values of unacquired features.
    pub fn new(full: &[f64], mask: &QueryMask, spec: &FeatureSpec) -> Self {
        let mult = spec.expand(&mask.to_f64());
        let values = full
            .iter()
            .zip(&mult)
            .map(|(&v, &k)| if k != 0.0 { v } else { 0.0 })
            .collect();
        MaskedObservation {
            values,
            mask: mask.clone(),
        }
    }

    /// `[q⊙o, q]`.
    pub fn encode(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.extend(self.mask.to_f64());
        v
    }
}

/// `⟨q, f⟩ / ‖f‖₁`.
pub fn query_cost(q: &QueryMask, spec: &FeatureSpec) -> Result<f64> {
    if q.len() != spec.m() {
        return Err(Error::Policy(format!(
            "mask of length {} for {} features",
            q.len(),
            spec.m()
        )));
    }
    let num: f64 = q
        .bits()
        .iter()
        .zip(spec.costs())
        .map(|(&b, &c)| if b { c } else { 0.0 })
        .sum();
    Ok(num / spec.l1())
}

/// Cost at step `t` of a recorded mask sequence.
pub fn step_cost(masks: &[QueryMask], t: usize, spec: &FeatureSpec) -> Result<f64> {
    let q = masks
        .get(t)
        .ok_or_else(|| Error::Policy(format!("no query recorded at step {t} of {}", masks.len())))?;
    query_cost(q, spec)
}

/// Cost of every step of a recorded mask sequence.
pub fn step_costs(masks: &[QueryMask], spec: &FeatureSpec) -> Result<Vec<f64>> {
    masks.iter().map(|q| query_cost(q, spec)).collect()
}

/// Trailing `n`-step averages; the first `n-1` steps average their prefix.
pub fn windowed_costs(costs: &[f64], n: usize) -> Vec<f64> {
    let n = n.max(1);
    (0..costs.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(n);
            let w = &costs[lo..=t];
            w.iter().sum::<f64>() * (1.0 / w.len() as f64)
        })
        .collect()
}

/// `(1/T) Σ_t max(c̄_t - C, 0)` where `c̄_t` is the windowed cost.
pub fn penalty(costs: &[f64], constraint: f64, window: usize) -> f64 {
    if costs.is_empty() {
        return 0.0;
    }
    let hinge: f64 = windowed_costs(costs, window)
        .iter()
        .map(|c| (c - constraint).max(0.0))
        .sum();
    hinge * (1.0 / costs.len() as f64)
}

/// Differentiable step cost `⟨q̃, f⟩/‖f‖₁` of a `1 × m` probability row.
pub fn graph_step_cost(g: &mut Graph, probs: Var, cost_column: Var) -> Result<Var> {
    let c = g.matmul(probs, cost_column)?;
    Ok(g.reshape(c, &[])?)
}

/// Graph version of [`penalty`] over scalar step-cost nodes.
pub fn graph_penalty(g: &mut Graph, costs: &[Var], constraint: f64, window: usize) -> Result<Var> {
    if costs.is_empty() {
        return Err(Error::Policy("penalty over an empty trajectory".into()));
    }
    let n = window.max(1);
    let mut total: Option<Var> = None;
    for t in 0..costs.len() {
        let lo = (t + 1).saturating_sub(n);
        let mut s = costs[lo];
        for &c in &costs[lo + 1..=t] {
            s = g.add(s, c)?;
        }
        let avg = g.scale(s, 1.0 / (t + 1 - lo) as f64);
        let shifted = g.add_scalar(avg, -constraint);
        let h = g.max_with_scalar(shifted, 0.0);
        total = Some(match total {
            None => h,
            Some(acc) => g.add(acc, h)?,
        });
    }
    Ok(g.scale(total.expect("nonempty"), 1.0 / costs.len() as f64))
}

/// `Δ + γ·φ`.
pub fn budgeted_loss(g: &mut Graph, delta: Var, penalty: Var, gamma: f64) -> Result<Var> {
    let w = g.scale(penalty, gamma);
    Ok(g.add(delta, w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetConfig {
    /// Cost ceiling `C`, normalized unless `normalized` is false.
    pub constraint: f64,
    /// When false, `constraint` is in raw cost units and is divided by `‖f‖₁`.
    pub normalized: bool,
    /// Window `N` of the averaged constraint.
    pub window: usize,
    pub gamma_step: f64,
    pub gamma_max: f64,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        BudgetConfig {
            constraint: 1.0,
            normalized: true,
            window: 1,
            gamma_step: 1e-3,
            gamma_max: 100.0,
        }
    }
}

impl BudgetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.constraint >= 0.0) {
            return Err(Error::Config(format!("constraint {} must be nonnegative", self.constraint)));
        }
        if self.window == 0 {
            return Err(Error::Config("window must be at least 1".into()));
        }
        if !(self.gamma_step > 0.0) || !(self.gamma_max >= 0.0) {
            return Err(Error::Config("gamma_step must be positive and gamma_max nonnegative".into()));
        }
        Ok(())
    }

    /// The ceiling on the normalized cost scale.
    pub fn normalized_constraint(&self, spec: &FeatureSpec) -> f64 {
        if self.normalized {
            self.constraint
        } else {
            self.constraint / spec.l1()
        }
    }
}

/// Penalty weight `γ_k` and iteration counter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PenaltyState {
    pub gamma: f64,
    pub k: u64,
    /// Set once γ has reached `gamma_max`.
    pub capped: bool,
}

impl PenaltyState {
    pub fn new() -> Self {
        PenaltyState::default()
    }

    /// Raises γ by one step when the batch violated the constraint.
    pub fn update(&mut self, batch_penalty: f64, cfg: &BudgetConfig) {
        if batch_penalty > 0.0 {
            self.gamma = (self.gamma + cfg.gamma_step).min(cfg.gamma_max);
            if self.gamma >= cfg.gamma_max && !self.capped {
                self.capped = true;
                log::warn!(
                    "penalty weight reached its cap {} at iteration {}; the constraint may be infeasible",
                    cfg.gamma_max,
                    self.k + 1
                );
            }
        }
        self.k += 1;
    }
}
