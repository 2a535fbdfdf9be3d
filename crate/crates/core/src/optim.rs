//! Adam with per-group learning rates, decoupled decay toward anchors and
//! post-step constraints.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::colorspace::DET_GUARD;
use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Coarse parameter families; several fine-grained groups can share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKind {
    GaussianGeometry,
    GaussianColor,
    ColorAdjustAb,
    ViewMatrices,
    GlobalCurve,
    GeneratorWeights,
}

impl GroupKind {
    pub fn name(self) -> &'static str {
        match self {
            GroupKind::GaussianGeometry => "gaussian_geometry",
            GroupKind::GaussianColor => "gaussian_color",
            GroupKind::ColorAdjustAb => "color_adjust_ab",
            GroupKind::ViewMatrices => "view_matrices",
            GroupKind::GlobalCurve => "global_curve",
            GroupKind::GeneratorWeights => "generator_weights",
        }
    }
}

/// Constraint restored after each update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constraint {
    None,
    /// Parameters are consecutive quaternions, renormalized after the step.
    UnitQuaternions,
    /// Parameters are consecutive row-major 3×3 matrices; a step that would
    /// bring `|det|` below the guard is undone for that matrix.
    InvertibleMatrices,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub kind: GroupKind,
    pub lr: f64,
    pub weight_decay: f64,
    /// Decay target, repeated cyclically over the parameters; zero when unset.
    pub decay_anchor: Option<Vec<f64>>,
    pub constraint: Constraint,
}

impl ParamGroup {
    pub fn new(name: impl Into<String>, kind: GroupKind, lr: f64) -> Self {
        Self {
            name: name.into(),
            kind,
            lr,
            weight_decay: 0.0,
            decay_anchor: None,
            constraint: Constraint::None,
        }
    }

    pub fn with_decay(mut self, weight_decay: f64, anchor: Option<Vec<f64>>) -> Self {
        self.weight_decay = weight_decay;
        self.decay_anchor = anchor;
        self
    }

    pub fn with_constraint(mut self, c: Constraint) -> Self {
        self.constraint = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument(format!("group {}: lr must be positive", self.name)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument(format!("group {}: weight decay must be non-negative", self.name)));
        }
        if matches!(&self.decay_anchor, Some(a) if a.is_empty()) {
            return Err(Error::InvalidArgument(format!("group {}: empty decay anchor", self.name)));
        }
        Ok(())
    }

    fn anchor(&self, i: usize) -> f64 {
        match &self.decay_anchor {
            Some(a) => a[i % a.len()],
            None => 0.0,
        }
    }
}

/// Moments and step count of one parameter slot.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

/// Adam state keyed by slot name. A slot is created on first use.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub slots: BTreeMap<String, Moments>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            slots: BTreeMap::new(),
        }
    }
}

impl AdamState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a slot after rows were removed or added. `rows[i]` names the
    /// old row that new row `i` inherits from; `None` starts from zero moments.
    pub fn remap_rows(&mut self, slot: &str, stride: usize, rows: &[Option<usize>]) {
        let Some(old) = self.slots.get_mut(slot) else {
            return;
        };
        let mut m = vec![0.0; rows.len() * stride];
        let mut v = vec![0.0; rows.len() * stride];
        for (new, src) in rows.iter().enumerate() {
            if let Some(src) = *src {
                if (src + 1) * stride <= old.m.len() {
                    m[new * stride..(new + 1) * stride].copy_from_slice(&old.m[src * stride..(src + 1) * stride]);
                    v[new * stride..(new + 1) * stride].copy_from_slice(&old.v[src * stride..(src + 1) * stride]);
                }
            }
        }
        old.m = m;
        old.v = v;
    }

    pub fn is_finite(&self) -> bool {
        self.slots
            .values()
            .all(|s| s.m.iter().chain(&s.v).all(|v| v.is_finite()))
    }
}

/// What happened to one group during a step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepOutcome {
    /// Matrices whose update was undone by the determinant guard.
    pub rolled_back: Vec<usize>,
}

/// One group's parameters and gradient for a step.
pub struct Update<'a> {
    pub group: &'a ParamGroup,
    /// Slot name in the state; defaults to the group name when `None`.
    pub slot: Option<String>,
    pub params: &'a mut [f64],
    pub grads: &'a [f64],
}

impl<'a> Update<'a> {
    pub fn new(group: &'a ParamGroup, params: &'a mut [f64], grads: &'a [f64]) -> Self {
        Self {
            group,
            slot: None,
            params,
            grads,
        }
    }

    pub fn with_slot(mut self, slot: impl Into<String>) -> Self {
        self.slot = Some(slot.into());
        self
    }
}

/// Applies one Adam step to every update. All gradients are checked first;
/// a non-finite value aborts the whole step with nothing modified.
pub fn adam_step(state: &mut AdamState, updates: &mut [Update<'_>]) -> Result<Vec<StepOutcome>> {
    for u in updates.iter() {
        u.group.validate()?;
        if u.params.len() != u.grads.len() {
            return Err(Error::InvalidArgument(format!(
                "group {}: {} parameters but {} gradients",
                u.group.name,
                u.params.len(),
                u.grads.len()
            )));
        }
        if let Some(i) = u.grads.iter().position(|g| !g.is_finite()) {
            log::error!("non-finite gradient in group {} at entry {i}", u.group.name);
            return Err(Error::NonFinite(format!("gradient of group {} entry {i}", u.group.name)));
        }
    }
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let mut outcomes = Vec::with_capacity(updates.len());
    for u in updates.iter_mut() {
        let g = u.group;
        let key = u.slot.clone().unwrap_or_else(|| g.name.clone());
        let slot = state.slots.entry(key).or_default();
        let n = u.params.len();
        if slot.m.len() != n {
            slot.m.resize(n, 0.0);
            slot.v.resize(n, 0.0);
        }
        let before = (g.constraint == Constraint::InvertibleMatrices)
            .then(|| (u.params.to_vec(), slot.m.clone(), slot.v.clone()));
        slot.step += 1;
        let bc1 = 1.0 - b1.powi(slot.step as i32);
        let bc2 = 1.0 - b2.powi(slot.step as i32);
        for i in 0..n {
            let grad = u.grads[i];
            slot.m[i] = b1 * slot.m[i] + (1.0 - b1) * grad;
            slot.v[i] = b2 * slot.v[i] + (1.0 - b2) * grad * grad;
            let mut p = u.params[i];
            if g.weight_decay > 0.0 {
                p -= g.lr * g.weight_decay * (p - g.anchor(i));
            }
            p -= g.lr * (slot.m[i] / bc1) / ((slot.v[i] / bc2).sqrt() + eps);
            u.params[i] = p;
        }
        let mut outcome = StepOutcome::default();
        match g.constraint {
            Constraint::None => {}
            Constraint::UnitQuaternions => {
                for q in u.params.chunks_exact_mut(4) {
                    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > 0.0 {
                        q.iter_mut().for_each(|v| *v /= norm);
                    } else {
                        q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
                    }
                }
            }
            Constraint::InvertibleMatrices => {
                let (p0, m0, v0) = before.expect("snapshot taken for matrix groups");
                for (k, mat) in u.params.chunks_exact_mut(9).enumerate() {
                    if det3(mat).abs() < DET_GUARD {
                        let r = 9 * k..9 * k + 9;
                        mat.copy_from_slice(&p0[r.clone()]);
                        slot.m[r.clone()].copy_from_slice(&m0[r.clone()]);
                        slot.v[r.clone()].copy_from_slice(&v0[r]);
                        log::warn!("group {}: matrix {k} step rolled back by the determinant guard", g.name);
                        outcome.rolled_back.push(k);
                    }
                }
            }
        }
        outcomes.push(outcome);
    }
    Ok(outcomes)
}

fn det3(m: &[f64]) -> f64 {
    m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) + m[2] * (m[3] * m[7] - m[4] * m[6])
}

pub const AUDIT_STEP: f64 = 1e-4;
pub const AUDIT_REL_TOL: f64 = 1e-3;
pub const AUDIT_ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct AuditSample {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `|numeric − analytic| / max(|numeric|, floor/tol)`.
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub samples: Vec<AuditSample>,
    pub max_rel_error: f64,
    pub passed: bool,
    /// `tensor[index]` of the worst sample.
    pub worst: Option<String>,
}

/// Compares analytic gradients against central differences at randomly
/// chosen parameters. `params` and `analytic` are parallel lists of named
/// tensors; `loss` is evaluated on perturbed copies.
pub fn grad_audit(
    names: &[&str],
    params: &[Vec<f64>],
    analytic: &[Vec<f64>],
    loss: &dyn Fn(&[Vec<f64>]) -> f64,
    sample_count: usize,
    seed: u64,
) -> Result<AuditReport> {
    if names.len() != params.len() || params.len() != analytic.len() {
        return Err(Error::InvalidArgument("audit tensor lists differ in length".into()));
    }
    for (i, (p, a)) in params.iter().zip(analytic).enumerate() {
        if p.len() != a.len() {
            return Err(Error::InvalidArgument(format!("audit tensor {} has mismatched gradient", names[i])));
        }
    }
    let total: usize = params.iter().map(|p| p.len()).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("audit over zero parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Vec<f64>> = params.to_vec();
    let mut samples = Vec::with_capacity(sample_count);
    let denom_floor = AUDIT_ABS_FLOOR / AUDIT_REL_TOL;
    for _ in 0..sample_count {
        let mut flat = rng.gen_range(0..total);
        let mut t = 0;
        while flat >= params[t].len() {
            flat -= params[t].len();
            t += 1;
        }
        let orig = work[t][flat];
        work[t][flat] = orig + AUDIT_STEP;
        let up = loss(&work);
        work[t][flat] = orig - AUDIT_STEP;
        let down = loss(&work);
        work[t][flat] = orig;
        let numeric = (up - down) / (2.0 * AUDIT_STEP);
        let an = analytic[t][flat];
        let rel_error = (numeric - an).abs() / numeric.abs().max(denom_floor);
        samples.push(AuditSample {
            tensor: names[t].to_string(),
            index: flat,
            analytic: an,
            numeric,
            rel_error: if rel_error.is_nan() { f64::INFINITY } else { rel_error },
        });
    }
    let worst = samples
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.rel_error.total_cmp(&b.1.rel_error))
        .map(|(i, _)| i);
    let max_rel_error = worst.map(|i| samples[i].rel_error).unwrap_or(0.0);
    Ok(AuditReport {
        passed: max_rel_error <= AUDIT_REL_TOL,
        worst: worst.map(|i| format!("{}[{}]", samples[i].tensor, samples[i].index)),
        max_rel_error,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn group(lr: f64) -> ParamGroup {
        ParamGroup::new("g", GroupKind::GaussianColor, lr)
    }

    #[test]
    fn zero_gradient_zero_decay_unchanged() {
        let g = group(0.1);
        let mut p = vec![0.3, -1.2, 5.0];
        let mut st = AdamState::new();
        adam_step(&mut st, &mut [Update::new(&g, &mut p, &[0.0; 3])]).unwrap();
        assert_eq!(p, vec![0.3, -1.2, 5.0]);
        assert_eq!(st.slots["g"].step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let g = group(0.01);
        let grads = [3.0, -0.5, 1e-3];
        let mut p = vec![0.0; 3];
        adam_step(&mut AdamState::new(), &mut [Update::new(&g, &mut p, &grads)]).unwrap();
        for (v, gr) in p.iter().zip(grads) {
            let expect = -0.01 * gr / (gr.abs() + EPSILON);
            assert!((v - expect).abs() < 1e-15);
            assert!((v + 0.01 * gr.signum()).abs() < 1e-7);
        }
    }

    #[test]
    fn decay_pulls_toward_anchor() {
        let mut identity = vec![0.0; 9];
        identity[0] = 1.0;
        identity[4] = 1.0;
        identity[8] = 1.0;
        let g = ParamGroup::new("m", GroupKind::ViewMatrices, 2.5e-4).with_decay(1e-5, Some(identity.clone()));
        let mut p = identity.clone();
        p[0] = 1.5;
        p[1] = 0.2;
        let before = p.clone();
        adam_step(&mut AdamState::new(), &mut [Update::new(&g, &mut p, &[0.0; 9])]).unwrap();
        for i in 0..9 {
            let expect = before[i] - 2.5e-4 * 1e-5 * (before[i] - identity[i]);
            assert_eq!(p[i], expect);
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let a = group(0.1);
        let b = ParamGroup::new("curve", GroupKind::GlobalCurve, 0.1);
        let mut pa = vec![1.0];
        let mut pb = vec![2.0];
        let mut st = AdamState::new();
        let r = adam_step(
            &mut st,
            &mut [Update::new(&a, &mut pa, &[1.0]), Update::new(&b, &mut pb, &[f64::NAN])],
        );
        match r {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("curve")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!((pa[0], pb[0]), (1.0, 2.0));
        assert!(st.slots.is_empty());
    }

    #[test]
    fn quaternions_renormalized() {
        let g = group(0.5).with_constraint(Constraint::UnitQuaternions);
        let mut p = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        adam_step(&mut AdamState::new(), &mut [Update::new(&g, &mut p, &[1.0, -1.0, 0.5, 0.0, 0.2, 0.0, -3.0, 1.0])]).unwrap();
        for q in p.chunks(4) {
            assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn determinant_guard_rolls_back() {
        let g = ParamGroup::new("m", GroupKind::ViewMatrices, 1.0).with_constraint(Constraint::InvertibleMatrices);
        // A first-step update of size lr on each entry lands exactly on a singular matrix.
        let mut p = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let mut grads = vec![0.0; 18];
        grads[0] = -1.0;
        grads[13] = 1.0;
        let mut st = AdamState::new();
        let out = adam_step(&mut st, &mut [Update::new(&g, &mut p, &grads)]).unwrap();
        assert_eq!(out[0].rolled_back, vec![1]);
        assert_eq!(&p[9..], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert!((p[0] - 2.0).abs() < 1e-6);
        assert!(st.slots["m"].m[9..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn slots_keep_separate_step_counts() {
        let g = group(0.1);
        let mut p = vec![0.0];
        let mut st = AdamState::new();
        adam_step(&mut st, &mut [Update::new(&g, &mut p, &[1.0]).with_slot("view/0")]).unwrap();
        adam_step(&mut st, &mut [Update::new(&g, &mut p, &[1.0]).with_slot("view/0")]).unwrap();
        adam_step(&mut st, &mut [Update::new(&g, &mut p, &[1.0]).with_slot("view/1")]).unwrap();
        assert_eq!(st.slots["view/0"].step, 2);
        assert_eq!(st.slots["view/1"].step, 1);
    }

    #[test]
    fn remap_rows_copies_and_zeroes() {
        let mut st = AdamState::new();
        st.slots.insert(
            "pos".into(),
            Moments {
                m: vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0],
                v: vec![4.0, 4.0, 5.0, 5.0, 6.0, 6.0],
                step: 7,
            },
        );
        st.remap_rows("pos", 2, &[Some(2), Some(0), None]);
        let s = &st.slots["pos"];
        assert_eq!(s.m, vec![3.0, 3.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(s.v, vec![6.0, 6.0, 4.0, 4.0, 0.0, 0.0]);
        assert_eq!(s.step, 7);
    }

    #[test]
    fn invalid_group_rejected() {
        let g = group(0.0);
        let mut p = vec![0.0];
        assert!(matches!(
            adam_step(&mut AdamState::new(), &mut [Update::new(&g, &mut p, &[0.0])]),
            Err(Error::InvalidArgument(_))
        ));
    }

    fn quadratic(p: &[Vec<f64>]) -> f64 {
        p[0].iter().map(|v| 2.0 * v * v).sum::<f64>() + p[1].iter().map(|v| 3.0 * v).sum::<f64>()
    }

    #[test]
    fn audit_quadratic_exact() {
        let params = vec![vec![0.5, -1.0, 2.0], vec![0.1, 0.2]];
        let analytic = vec![params[0].iter().map(|v| 4.0 * v).collect(), vec![3.0, 3.0]];
        let r = grad_audit(&["x", "y"], &params, &analytic, &quadratic, 20, 1).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9);
        assert_eq!(r.samples.len(), 20);
    }

    #[test]
    fn audit_flags_corrupted_gradient() {
        let params = vec![vec![0.5, -1.0, 2.0], vec![0.1]];
        let mut analytic: Vec<Vec<f64>> = vec![params[0].iter().map(|v| 4.0 * v).collect(), vec![3.0]];
        analytic[0][1] += 0.5;
        let r = grad_audit(&["x", "y"], &params, &analytic, &quadratic, 40, 2).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst.as_deref(), Some("x[1]"));
    }

    proptest! {
        #[test]
        fn step_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = group(0.01).with_decay(0.1, None);
            let p0: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let gr: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let run = || {
                let mut p = p0.clone();
                let mut st = AdamState::new();
                for _ in 0..3 {
                    adam_step(&mut st, &mut [Update::new(&g, &mut p, &gr)]).unwrap();
                }
                (p, st)
            };
            let (a, sa) = run();
            let (b, sb) = run();
            prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(sa, sb);
        }

        #[test]
        fn guard_keeps_determinants(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ParamGroup::new("m", GroupKind::ViewMatrices, 0.3).with_constraint(Constraint::InvertibleMatrices);
            let mut p = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
            let mut st = AdamState::new();
            for _ in 0..20 {
                let gr: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
                adam_step(&mut st, &mut [Update::new(&g, &mut p, &gr)]).unwrap();
                prop_assert!(det3(&p).abs() >= DET_GUARD);
            }
        }
    }
}
