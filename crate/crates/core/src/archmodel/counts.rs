//! Closed-form MAC and weight-access counts per epoch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::LearningRule;
use crate::network::NetworkSpec;

/// `Exact` counts what the training loops execute (no error propagation out
/// of the first layer, DFA feedback only for hidden layers). `PaperLiteral`
/// sums every layer, giving `3KΣm_in_i` totals and `KΣm_in_L` for DFA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CountMode {
    #[default]
    Exact,
    PaperLiteral,
}

/// Weight-access formula: `Final` charges every layer twice per update,
/// `Draft` charges the first layer once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessFormula {
    #[default]
    Final,
    Draft,
}

/// Which layers keep their output activations for the backward pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointPlan {
    pub stored: Vec<bool>,
}

impl CheckpointPlan {
    pub fn store_all(layers: usize) -> Self {
        CheckpointPlan {
            stored: vec![true; layers],
        }
    }

    pub fn from_stored(layers: usize, stored_layers: &[usize]) -> Result<Self> {
        let mut stored = vec![false; layers];
        for &i in stored_layers {
            if i >= layers {
                return Err(Error::Bounds(format!("checkpoint layer {i} of {layers}")));
            }
            stored[i] = true;
        }
        Ok(CheckpointPlan { stored })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MacCounts {
    pub forward: u64,
    pub backward: u64,
    pub gradient: u64,
    pub recompute: u64,
}

impl MacCounts {
    pub fn total(&self) -> u64 {
        self.forward + self.backward + self.gradient + self.recompute
    }

    /// MACs spent in matrix products during training, excluding recompute.
    pub fn training(&self) -> u64 {
        self.forward + self.backward + self.gradient
    }
}

/// Per-layer forward, backward and gradient MACs over `k` samples. The
/// backward entry of layer `i` is the cost of propagating its error to layer
/// `i−1`.
pub fn mac_counts_by_layer(spec: &NetworkSpec, k: u64, rule: LearningRule, mode: CountMode) -> Vec<MacCounts> {
    let n_l = spec.output() as u64;
    spec.shapes()
        .enumerate()
        .map(|(i, (m, n))| {
            let mn = (m * n) as u64;
            let propagates = i > 0 || mode == CountMode::PaperLiteral;
            let backward = match rule {
                _ if !propagates => 0,
                LearningRule::Dfa { .. } => m as u64 * n_l,
                _ => mn,
            };
            MacCounts {
                forward: k * mn,
                backward: k * backward,
                gradient: k * mn,
                recompute: 0,
            }
        })
        .collect()
}

pub fn mac_counts(
    spec: &NetworkSpec,
    k: u64,
    rule: LearningRule,
    checkpoints: &CheckpointPlan,
    mode: CountMode,
) -> Result<MacCounts> {
    let l = spec.layers();
    if checkpoints.stored.len() != l {
        return Err(Error::shape(
            "mac_counts",
            format!("checkpoint plan for {} layers, network has {l}", checkpoints.stored.len()),
        ));
    }
    let mut out = MacCounts::default();
    for c in mac_counts_by_layer(spec, k, rule, mode) {
        out.forward += c.forward;
        out.backward += c.backward;
        out.gradient += c.gradient;
    }
    let mn: Vec<u64> = spec.shapes().map(|(m, n)| (m * n) as u64).collect();
    let mut last_stored = 0;
    for i in 0..l {
        if checkpoints.stored[i] {
            last_stored = i;
        } else {
            out.recompute += k * mn[last_stored..=i].iter().sum::<u64>();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct WeightAccesses {
    pub weights: u64,
    pub feedback: u64,
}

impl WeightAccesses {
    pub fn total(&self) -> u64 {
        self.weights + self.feedback
    }
}

/// Per-layer weight words over `k` samples with `⌈k/b⌉` updates. Feedback
/// words of layer `i` belong to the matrix that carries its error to `i−1`.
pub fn weight_access_counts_by_layer(
    spec: &NetworkSpec,
    k: u64,
    rule: LearningRule,
    mode: CountMode,
    formula: AccessFormula,
) -> Vec<WeightAccesses> {
    let updates = k.div_ceil(rule.batch().max(1) as u64);
    let n_l = spec.output() as u64;
    spec.shapes()
        .enumerate()
        .map(|(i, (m, n))| {
            let mn = (m * n) as u64;
            let reads = if rule.is_pipelined() {
                1
            } else if i == 0 && formula == AccessFormula::Draft {
                1
            } else {
                2
            };
            let feedback = match rule {
                LearningRule::Dfa { .. } if i > 0 || mode == CountMode::PaperLiteral => m as u64 * n_l,
                LearningRule::Fa { .. } if i > 0 => mn,
                _ => 0,
            };
            WeightAccesses {
                weights: updates * reads * mn,
                feedback: updates * feedback,
            }
        })
        .collect()
}

/// Weight words read per epoch over `k` samples, with `⌈k/b⌉` updates.
pub fn weight_access_counts(
    spec: &NetworkSpec,
    k: u64,
    rule: LearningRule,
    mode: CountMode,
    formula: AccessFormula,
) -> WeightAccesses {
    weight_access_counts_by_layer(spec, k, rule, mode, formula)
        .into_iter()
        .fold(WeightAccesses::default(), |a, c| WeightAccesses {
            weights: a.weights + c.weights,
            feedback: a.feedback + c.feedback,
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net() -> NetworkSpec {
        NetworkSpec::new(vec![784, 500, 10]).unwrap()
    }

    fn all(l: usize) -> CheckpointPlan {
        CheckpointPlan::store_all(l)
    }

    #[test]
    fn literal_total_and_dfa_backward() {
        let c = mac_counts(&net(), 100, LearningRule::Sgd, &all(2), CountMode::PaperLiteral).unwrap();
        assert_eq!(c.total(), 119_100_000);
        let d = mac_counts(&net(), 100, LearningRule::Dfa { batch: 1 }, &all(2), CountMode::PaperLiteral).unwrap();
        assert_eq!(d.backward, 1_284_000);
        let e = mac_counts(&net(), 100, LearningRule::Dfa { batch: 1 }, &all(2), CountMode::Exact).unwrap();
        assert_eq!(e.backward, 100 * 500 * 10);
    }

    #[test]
    fn single_layer_has_no_backward() {
        let s = NetworkSpec::new(vec![30, 10]).unwrap();
        for rule in [LearningRule::Sgd, LearningRule::Cp, LearningRule::Dfa { batch: 2 }] {
            assert_eq!(mac_counts(&s, 8, rule, &all(1), CountMode::Exact).unwrap().backward, 0);
        }
    }

    #[test]
    fn recompute_sums_from_previous_checkpoint() {
        let s = NetworkSpec::new(vec![2, 3, 4, 5, 6]).unwrap();
        // Layers 0 and 2 stored; 1 recomputes layers 0..=1, 3 recomputes 2..=3.
        let plan = CheckpointPlan::from_stored(4, &[0, 2]).unwrap();
        let c = mac_counts(&s, 10, LearningRule::Sgd, &plan, CountMode::Exact).unwrap();
        assert_eq!(c.recompute, 10 * ((6 + 12) + (20 + 30)));
        assert_eq!(mac_counts(&s, 10, LearningRule::Sgd, &all(4), CountMode::Exact).unwrap().recompute, 0);
        assert!(CheckpointPlan::from_stored(4, &[4]).is_err());
    }

    #[test]
    fn access_formulas() {
        let s = net();
        let w = |rule| weight_access_counts(&s, 100, rule, CountMode::Exact, AccessFormula::Final).total();
        assert_eq!(w(LearningRule::Sgd), 79_400_000);
        assert_eq!(w(LearningRule::Mbgd { batch: 100 }), 794_000);
        assert_eq!(w(LearningRule::Cp), 39_700_000);
        assert_eq!(w(LearningRule::Dfa { batch: 100 }), 794_000 + 5_000);
        let lit = weight_access_counts(&s, 100, LearningRule::Dfa { batch: 100 }, CountMode::PaperLiteral, AccessFormula::Final);
        assert_eq!(lit.feedback, 7_840 + 5_000);
        let draft = weight_access_counts(&s, 100, LearningRule::Sgd, CountMode::Exact, AccessFormula::Draft);
        assert_eq!(draft.weights, 100 * (2 * 5_000 + 392_000));
    }

    #[test]
    fn batch_scaling_law() {
        let s = NetworkSpec::new(vec![13, 7, 5, 3]).unwrap();
        let sgd = weight_access_counts(&s, 60, LearningRule::Sgd, CountMode::Exact, AccessFormula::Final).total();
        for b in [1, 2, 3, 4, 5, 6, 10, 12, 15, 20, 30, 60] {
            let mb = weight_access_counts(&s, 60, LearningRule::Mbgd { batch: b }, CountMode::Exact, AccessFormula::Final);
            assert_eq!(mb.total() * b as u64, sgd);
        }
        let cp = weight_access_counts(&s, 60, LearningRule::Cp, CountMode::Exact, AccessFormula::Final).total();
        assert_eq!(2 * cp, sgd);
    }
}
