//! Magnitude pruning with an exponentially decaying ramp.
//!
//! The number of pruned weights grows from 0 at epoch 0 to its final value at `ramp_epochs`,
//! removing the most weights early and progressively fewer later. Masks are permanent: once a
//! weight is pruned it is held at exactly `0.0` for the rest of training.

use crate::error::{Error, Result};
use crate::model::Network;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;
use std::collections::BTreeMap;

/// Fraction of the final pruned count still missing at `ramp_epochs` under the pure
/// exponential `1 - γ^e`; fixes `γ = RAMP_RESIDUAL^(1 / ramp_epochs)`.
pub const RAMP_RESIDUAL: f64 = 0.001;

pub fn default_gamma(ramp_epochs: usize) -> f64 {
    if ramp_epochs == 0 {
        return 0.0;
    }
    RAMP_RESIDUAL.powf(1.0 / ramp_epochs as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

/// `prune.*` keys of an experiment config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    pub enabled: bool,
    /// Non-zero parameters of the whole model once the ramp completes (biases and batchnorm
    /// terms included, as in a model summary).
    pub target_nonzero: usize,
    pub ramp_epochs: usize,
    pub scope: PruneScope,
    /// Per-epoch decay; derived from `ramp_epochs` when absent.
    pub gamma: Option<f64>,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self { enabled: false, target_nonzero: 400_000, ramp_epochs: 100, scope: PruneScope::Global, gamma: None }
    }
}

impl PruneConfig {
    pub fn gamma(&self) -> f64 {
        self.gamma.unwrap_or_else(|| default_gamma(self.ramp_epochs))
    }
}

/// Per-epoch increments of the ramp: non-increasing integers summing to `n_final`, each the
/// floor of `n_final · γ^e (1-γ) / (1-γ^R)` with the leftover units given to the earliest
/// epochs.
fn ramp_increments(n_final: usize, ramp_epochs: usize, gamma: f64) -> Vec<usize> {
    let norm = 1.0 - gamma.powi(ramp_epochs as i32);
    let mut inc: Vec<usize> = (0..ramp_epochs)
        .map(|e| (n_final as f64 * gamma.powi(e as i32) * (1.0 - gamma) / norm).floor() as usize)
        .collect();
    let mut sum: usize = inc.iter().sum();
    // Floating error can overshoot by a unit; take it back from the tail.
    for v in inc.iter_mut().rev() {
        if sum <= n_final {
            break;
        }
        let d = (*v).min(sum - n_final);
        *v -= d;
        sum -= d;
    }
    let leftover = n_final - sum;
    let mut i = 0;
    for _ in 0..leftover {
        inc[i % ramp_epochs] += 1;
        i += 1;
    }
    inc
}

/// Number of pruned weights at the start of `epoch`.
///
/// `N_final = total_prunable - target_nonzero`; `pruned(0) = 0`, `pruned(e) = N_final` for
/// `e >= ramp_epochs`, and in between the normalized exponential
/// `N_final · (1 - γ^e) / (1 - γ^R)` realized with non-increasing integer increments.
pub fn schedule_pruned_count(
    epoch: usize,
    total_prunable: usize,
    target_nonzero: usize,
    ramp_epochs: usize,
    gamma: f64,
) -> Result<usize> {
    if target_nonzero > total_prunable {
        return Err(Error::Config(format!(
            "prune target {target_nonzero} exceeds the {total_prunable} prunable weights"
        )));
    }
    let n_final = total_prunable - target_nonzero;
    if epoch >= ramp_epochs {
        return Ok(n_final);
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("prune gamma = {gamma} must lie in (0, 1)")));
    }
    Ok(ramp_increments(n_final, ramp_epochs, gamma)[..epoch].iter().sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    /// `true` = kept. One entry per prunable tensor, keyed by parameter name.
    pub masks: BTreeMap<String, Vec<bool>>,
    pub target_nonzero: usize,
    pub ramp_epochs: usize,
    pub gamma: f64,
    pub scope: PruneScope,
    total_prunable: usize,
    exempt: usize,
    pruned: usize,
}

impl PruneState {
    pub fn new(net: &Network, cfg: &PruneConfig) -> Result<Self> {
        let mut masks = BTreeMap::new();
        let mut exempt = 0;
        net.visit_params(&mut |name, kind, t| {
            if kind.prunable() {
                masks.insert(name.to_string(), vec![true; t.numel()]);
            } else {
                exempt += t.numel();
            }
        });
        let total_prunable = masks.values().map(Vec::len).sum();
        if cfg.target_nonzero < exempt || cfg.target_nonzero - exempt > total_prunable {
            return Err(Error::Config(format!(
                "prune.target_nonzero = {} is outside the reachable range [{exempt}, {}] for this model",
                cfg.target_nonzero,
                exempt + total_prunable
            )));
        }
        let gamma = cfg.gamma();
        if cfg.ramp_epochs > 0 && !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::Config(format!("prune.gamma = {gamma} must lie in (0, 1)")));
        }
        Ok(Self {
            masks,
            target_nonzero: cfg.target_nonzero,
            ramp_epochs: cfg.ramp_epochs,
            gamma,
            scope: cfg.scope,
            total_prunable,
            exempt,
            pruned: 0,
        })
    }

    pub fn total_prunable(&self) -> usize {
        self.total_prunable
    }

    /// Parameters never pruned (biases, batchnorm scale and shift).
    pub fn exempt(&self) -> usize {
        self.exempt
    }

    pub fn pruned(&self) -> usize {
        self.pruned
    }

    /// Prunable weights left once the ramp completes.
    pub fn prunable_target(&self) -> usize {
        self.target_nonzero - self.exempt
    }

    pub fn scheduled(&self, epoch: usize) -> Result<usize> {
        schedule_pruned_count(epoch, self.total_prunable, self.prunable_target(), self.ramp_epochs, self.gamma)
    }

    /// Replaces the masks (e.g. from a checkpoint). Names and lengths must match.
    pub fn set_masks(&mut self, masks: BTreeMap<String, Vec<bool>>) -> Result<()> {
        if masks.len() != self.masks.len() {
            return Err(Error::Checkpoint(format!("expected {} masks, got {}", self.masks.len(), masks.len())));
        }
        for (name, m) in &masks {
            match self.masks.get(name) {
                Some(old) if old.len() == m.len() => {}
                _ => return Err(Error::Checkpoint(format!("mask {name} does not match the model"))),
            }
        }
        self.pruned = masks.values().map(|m| m.iter().filter(|k| !**k).count()).sum();
        self.masks = masks;
        Ok(())
    }

    /// Brings the pruned count up to the schedule for `epoch`.
    pub fn step_epoch(&mut self, net: &mut Network, epoch: usize) -> Result<()> {
        let n = self.scheduled(epoch)?;
        apply_magnitude_pruning(net, self, n)
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    mag: f32,
    tensor: usize,
    index: usize,
}

fn by_magnitude(a: &Candidate, b: &Candidate) -> Ordering {
    a.mag.total_cmp(&b.mag).then(a.tensor.cmp(&b.tensor)).then(a.index.cmp(&b.index))
}

fn unpruned_candidates(net: &Network, state: &PruneState) -> Vec<Vec<Candidate>> {
    let names: Vec<&String> = state.masks.keys().collect();
    let mut per_tensor = vec![Vec::new(); names.len()];
    net.visit_params(&mut |name, _, t| {
        if let Ok(ti) = names.binary_search(&&name.to_string()) {
            let mask = &state.masks[name];
            per_tensor[ti] = t
                .data()
                .iter()
                .zip(mask)
                .enumerate()
                .filter(|(_, (_, keep))| **keep)
                .map(|(index, (w, _))| Candidate { mag: w.abs(), tensor: ti, index })
                .collect();
        }
    });
    per_tensor
}

/// Prunes the additional `new_pruned_count - state.pruned()` weights of smallest magnitude
/// among the unpruned ones. Ties break by tensor name, then flat index.
pub fn apply_magnitude_pruning(net: &mut Network, state: &mut PruneState, new_pruned_count: usize) -> Result<()> {
    if new_pruned_count < state.pruned {
        return Err(Error::State(format!(
            "pruned count cannot decrease ({} -> {new_pruned_count})",
            state.pruned
        )));
    }
    if new_pruned_count > state.total_prunable {
        return Err(Error::Config(format!(
            "cannot prune {new_pruned_count} of {} prunable weights",
            state.total_prunable
        )));
    }
    let extra = new_pruned_count - state.pruned;
    if extra == 0 {
        return Ok(());
    }
    let mut per_tensor = unpruned_candidates(net, state);
    let chosen: Vec<Candidate> = match state.scope {
        PruneScope::Global => {
            let mut all: Vec<Candidate> = per_tensor.into_iter().flatten().collect();
            all.select_nth_unstable_by(extra - 1, by_magnitude);
            all.truncate(extra);
            all
        }
        PruneScope::PerLayer => {
            let quotas = per_layer_quotas(state, new_pruned_count);
            let mut out = Vec::with_capacity(extra);
            for (cands, quota) in per_tensor.iter_mut().zip(quotas) {
                if quota > 0 {
                    cands.select_nth_unstable_by(quota - 1, by_magnitude);
                    out.extend_from_slice(&cands[..quota]);
                }
            }
            out
        }
    };
    let names: Vec<String> = state.masks.keys().cloned().collect();
    for c in &chosen {
        state.masks.get_mut(&names[c.tensor]).expect("mask")[c.index] = false;
    }
    state.pruned = new_pruned_count;
    enforce_masks(net, state);
    Ok(())
}

/// Additional weights to prune per tensor so each tensor reaches (as closely as integers
/// allow) the same pruned fraction, never un-pruning anything.
fn per_layer_quotas(state: &PruneState, new_total: usize) -> Vec<usize> {
    let frac = new_total as f64 / state.total_prunable as f64;
    let sizes: Vec<usize> = state.masks.values().map(Vec::len).collect();
    let current: Vec<usize> = state.masks.values().map(|m| m.iter().filter(|k| !**k).count()).collect();
    let ideal: Vec<f64> = sizes.iter().map(|n| frac * *n as f64).collect();
    let mut want: Vec<usize> = ideal.iter().zip(&current).map(|(x, c)| (x.floor() as usize).max(*c)).collect();
    let mut total: usize = want.iter().sum();
    // Largest fractional remainder first; ties by tensor order.
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by(|a, b| {
        let ra = ideal[*a] - ideal[*a].floor();
        let rb = ideal[*b] - ideal[*b].floor();
        rb.total_cmp(&ra).then(a.cmp(b))
    });
    while total < new_total {
        for &i in &order {
            if total == new_total {
                break;
            }
            if want[i] < sizes[i] {
                want[i] += 1;
                total += 1;
            }
        }
    }
    while total > new_total {
        for &i in order.iter().rev() {
            if total == new_total {
                break;
            }
            if want[i] > current[i] {
                want[i] -= 1;
                total -= 1;
            }
        }
    }
    want.iter().zip(&current).map(|(w, c)| w - c).collect()
}

/// Zeroes every masked-out weight. Called after each optimizer step.
pub fn enforce_masks(net: &mut Network, state: &PruneState) {
    net.visit_params_mut(&mut |name, _, t| {
        if let Some(mask) = state.masks.get(name) {
            for (w, keep) in t.data_mut().iter_mut().zip(mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_initialized, ArchSpec};
    use crate::ops::norm::Mode;
    use crate::ops::Sgd;
    use crate::tensor::Tensor;

    #[test]
    fn gamma_for_hundred_epochs() {
        let g = default_gamma(100);
        assert!((g - 0.933).abs() < 5e-4, "{g}");
        assert!((1.0 - g.powi(100) - 0.999).abs() < 1e-12);
    }

    #[test]
    fn ramp_endpoints_and_shape() {
        let (total, target) = (1_000_000, 400_000);
        let n_final = total - target;
        let g = default_gamma(100);
        let at = |e| schedule_pruned_count(e, total, target, 100, g).unwrap();
        assert_eq!(at(0), 0);
        assert_eq!(at(100), n_final);
        assert_eq!(at(250), n_final);
        let r1 = at(1) as f64 / n_final as f64;
        let r50 = at(50) as f64 / n_final as f64;
        assert!((r1 - 0.067).abs() < 1e-3, "{r1}");
        assert!((r50 - 0.969).abs() < 1e-3, "{r50}");
        let inc: Vec<usize> = (0..100).map(|e| at(e + 1) - at(e)).collect();
        assert!(inc.windows(2).all(|w| w[0] >= w[1]));
        assert!(inc[0] > inc[99]);
    }

    #[test]
    fn small_counts_stay_monotone() {
        for n in [0usize, 1, 7, 99, 100, 101, 12_345] {
            let inc = ramp_increments(n, 100, default_gamma(100));
            assert_eq!(inc.iter().sum::<usize>(), n);
            assert!(inc.windows(2).all(|w| w[0] >= w[1]), "n = {n}");
        }
    }

    #[test]
    fn target_above_total_is_config_error() {
        assert!(matches!(schedule_pruned_count(3, 10, 11, 100, 0.9), Err(Error::Config(_))));
    }

    fn tiny_net() -> Network {
        let spec = ArchSpec { base_channels: 4, rho: 2, num_classes: 2, ..ArchSpec::default() };
        build_initialized(&spec, 3).unwrap()
    }

    #[test]
    fn order_statistics_on_four_weights() {
        let mut net = tiny_net();
        let mut state = PruneState::new(&net, &PruneConfig { target_nonzero: 1_000_000_000, ..Default::default() })
            .unwrap_or_else(|_| {
                let s = net.summarize().unwrap();
                PruneState::new(&net, &PruneConfig { target_nonzero: s.total_params, ..Default::default() }).unwrap()
            });
        // Make every prunable weight large except four on the classifier.
        net.visit_params_mut(&mut |name, kind, t| {
            if kind.prunable() {
                t.data_mut().fill(10.0);
                if name == "head.weight" {
                    t.data_mut()[..4].copy_from_slice(&[0.5, -0.1, 0.3, -0.7]);
                }
            }
        });
        apply_magnitude_pruning(&mut net, &mut state, 2).unwrap();
        assert_eq!(&net.head.weight.data()[..4], &[0.5, 0.0, 0.0, -0.7]);
        assert_eq!(state.masks["head.weight"][..4], [true, false, false, true]);
    }

    #[test]
    fn same_count_is_noop_and_decrease_is_error() {
        let mut net = tiny_net();
        let total = net.summarize().unwrap().total_params;
        let mut state = PruneState::new(&net, &PruneConfig { target_nonzero: total / 2, ..Default::default() }).unwrap();
        apply_magnitude_pruning(&mut net, &mut state, 50).unwrap();
        let before = state.clone();
        apply_magnitude_pruning(&mut net, &mut state, 50).unwrap();
        assert_eq!(before, state);
        assert!(apply_magnitude_pruning(&mut net, &mut state, 49).is_err());
        let over = state.total_prunable() + 1;
        assert!(apply_magnitude_pruning(&mut net, &mut state, over).is_err());
    }

    #[test]
    fn nonzero_count_is_exact() {
        for scope in [PruneScope::Global, PruneScope::PerLayer] {
            let mut net = tiny_net();
            let s = net.summarize().unwrap();
            let cfg = PruneConfig { target_nonzero: s.total_params / 3, scope, ..Default::default() };
            let mut state = PruneState::new(&net, &cfg).unwrap();
            let last = state.total_prunable() - s.total_params / 3 + state.exempt();
            for k in [10, 500, state.total_prunable() / 2, last] {
                apply_magnitude_pruning(&mut net, &mut state, k).unwrap();
                let s2 = net.summarize().unwrap();
                assert_eq!(s2.nonzero_params, s.total_params - k, "{scope:?} k={k}");
            }
            assert_eq!(net.summarize().unwrap().nonzero_params, cfg.target_nonzero);
        }
    }

    #[test]
    fn per_layer_prunes_evenly() {
        let mut net = tiny_net();
        let total = net.summarize().unwrap().total_params;
        let cfg = PruneConfig { target_nonzero: total / 2, scope: PruneScope::PerLayer, ..Default::default() };
        let mut state = PruneState::new(&net, &cfg).unwrap();
        let half = state.total_prunable() / 2;
        apply_magnitude_pruning(&mut net, &mut state, half).unwrap();
        for (name, m) in &state.masks {
            let frac = m.iter().filter(|k| !**k).count() as f64 / m.len() as f64;
            assert!((frac - 0.5).abs() <= 1.0 / m.len() as f64 + 1e-9, "{name}: {frac}");
        }
    }

    #[test]
    fn masks_survive_sgd_step() {
        let mut net = tiny_net();
        let total = net.summarize().unwrap().total_params;
        let mut state = PruneState::new(&net, &PruneConfig { target_nonzero: total / 2, ..Default::default() }).unwrap();
        apply_magnitude_pruning(&mut net, &mut state, 300).unwrap();
        let x = Tensor::ones(&[2, 2, 32, 32]);
        let logits = net.forward(&x, Mode::Train).unwrap();
        let (_, g) = crate::ops::softmax_cross_entropy(&logits, &[0, 1]).unwrap();
        net.backward(&g).unwrap();
        let mut opt = Sgd::new(0.9, 0.0);
        net.visit_params_mut(&mut |name, _, t| opt.step(name, t, 0.1).unwrap());
        enforce_masks(&mut net, &state);
        net.visit_params(&mut |name, _, t| {
            if let Some(m) = state.masks.get(name) {
                for (w, keep) in t.data().iter().zip(m) {
                    if !keep {
                        assert_eq!(w.to_bits(), 0.0f32.to_bits());
                    }
                }
            }
        });
    }

    #[test]
    fn all_ones_masks_are_noop() {
        let mut net = tiny_net();
        let before = net.summarize().unwrap();
        let state = PruneState::new(&net, &PruneConfig { target_nonzero: before.total_params, ..Default::default() }).unwrap();
        let mut w = Vec::new();
        net.visit_params(&mut |_, _, t| w.extend_from_slice(t.data()));
        enforce_masks(&mut net, &state);
        let mut w2 = Vec::new();
        net.visit_params(&mut |_, _, t| w2.extend_from_slice(t.data()));
        assert_eq!(w, w2);
    }
}
