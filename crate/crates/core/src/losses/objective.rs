use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::{forward_kd, reverse_kd, self_distill_with_targets, sup_classification, sup_contrastive, unsup_contrastive};
use crate::error::{invalid, shape, Result};
use crate::real::Real;
use crate::representation::{HeadGrads, HeadParameters, Temperatures};

pub const DEFAULT_LAMBDA: f64 = 0.35;
pub const DEFAULT_EPSILON: f64 = 1.0;

/// Which distillation directions contribute to the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KdMode {
    #[default]
    Both,
    Forward,
    Reverse,
    None,
}

impl KdMode {
    pub fn forward(self) -> bool {
        matches!(self, KdMode::Both | KdMode::Forward)
    }

    pub fn reverse(self) -> bool {
        matches!(self, KdMode::Both | KdMode::Reverse)
    }
}

impl std::str::FromStr for KdMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "both" | "fd+rd" => Ok(KdMode::Both),
            "forward" | "fd" => Ok(KdMode::Forward),
            "reverse" | "rd" => Ok(KdMode::Reverse),
            "none" => Ok(KdMode::None),
            other => Err(invalid!("unknown distillation mode {other:?} (both, forward, reverse, none)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda: f64,
    pub epsilon: f64,
    pub temperatures: Temperatures,
    pub kd: KdMode,
    /// Average the unsupervised contrastive loss over both anchor directions.
    pub symmetric_unsup_con: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda: DEFAULT_LAMBDA,
            epsilon: DEFAULT_EPSILON,
            temperatures: Temperatures::default(),
            kd: KdMode::Both,
            symmetric_unsup_con: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(invalid!("lambda must lie in [0, 1], got {}", self.lambda));
        }
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(invalid!("epsilon must be finite and non-negative, got {}", self.epsilon));
        }
        self.temperatures.validate()
    }
}

/// The seven individually weighted terms of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    SupCon,
    UnsupCon,
    SupCls,
    UnsupCe,
    MeanEntropy,
    ForwardKd,
    ReverseKd,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::SupCon,
        Component::UnsupCon,
        Component::SupCls,
        Component::UnsupCe,
        Component::MeanEntropy,
        Component::ForwardKd,
        Component::ReverseKd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::SupCon => "sup_con",
            Component::UnsupCon => "unsup_con",
            Component::SupCls => "sup_cls",
            Component::UnsupCe => "unsup_ce",
            Component::MeanEntropy => "mean_entropy",
            Component::ForwardKd => "forward_kd",
            Component::ReverseKd => "reverse_kd",
        }
    }
}

/// Multipliers on each term. The entropy weight multiplies `-H(p̄)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ComponentWeights {
    pub sup_con: f64,
    pub unsup_con: f64,
    pub sup_cls: f64,
    pub unsup_ce: f64,
    pub entropy: f64,
    pub fd: f64,
    pub rd: f64,
}

impl ComponentWeights {
    pub fn from_config(cfg: &LossConfig) -> Self {
        let l = cfg.lambda;
        ComponentWeights {
            sup_con: l,
            unsup_con: 1.0 - l,
            sup_cls: l,
            unsup_ce: 1.0 - l,
            entropy: (1.0 - l) * cfg.epsilon,
            fd: if cfg.kd.forward() { 1.0 } else { 0.0 },
            rd: if cfg.kd.reverse() { 1.0 } else { 0.0 },
        }
    }

    /// Unit weight on one term, zero elsewhere.
    pub fn only(c: Component) -> Self {
        let mut w = ComponentWeights::default();
        *w.get_mut(c) = 1.0;
        w
    }

    pub fn get(&self, c: Component) -> f64 {
        let mut copy = *self;
        *copy.get_mut(c)
    }

    fn get_mut(&mut self, c: Component) -> &mut f64 {
        match c {
            Component::SupCon => &mut self.sup_con,
            Component::UnsupCon => &mut self.unsup_con,
            Component::SupCls => &mut self.sup_cls,
            Component::UnsupCe => &mut self.unsup_ce,
            Component::MeanEntropy => &mut self.entropy,
            Component::ForwardKd => &mut self.fd,
            Component::ReverseKd => &mut self.rd,
        }
    }
}

/// One minibatch: the student's filtered cross-modal rows for two views, the
/// teacher's rows for the same samples, and a label for each labeled member.
#[derive(Debug, Clone, Copy)]
pub struct BatchInputs<'a, T> {
    pub z_a: ArrayView2<'a, T>,
    pub z_b: ArrayView2<'a, T>,
    pub z_teacher: ArrayView2<'a, T>,
    pub labels: &'a [Option<u32>],
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup_con: f64,
    pub l_unsup_con: f64,
    pub l_sup_cls: f64,
    /// Self-distillation cross-entropy minus `epsilon` times the mean entropy.
    pub l_unsup_cls: f64,
    pub l_unsup_ce: f64,
    pub mean_entropy: f64,
    pub l_fd: f64,
    pub l_rd: f64,
    pub total: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub fd_weight: f64,
    pub rd_weight: f64,
}

impl LossBreakdown {
    pub fn component(&self, c: Component) -> f64 {
        match c {
            Component::SupCon => self.l_sup_con,
            Component::UnsupCon => self.l_unsup_con,
            Component::SupCls => self.l_sup_cls,
            Component::UnsupCe => self.l_unsup_ce,
            Component::MeanEntropy => self.mean_entropy,
            Component::ForwardKd => self.l_fd,
            Component::ReverseKd => self.l_rd,
        }
    }

    /// Recombines the stored terms with the stored coefficients.
    pub fn recombined(&self) -> f64 {
        let l = self.lambda;
        l * (self.l_sup_cls + self.l_sup_con)
            + (1.0 - l) * (self.l_unsup_cls + self.l_unsup_con)
            + self.fd_weight * self.l_fd
            + self.rd_weight * self.l_rd
    }

    pub fn is_finite(&self) -> bool {
        [
            self.l_sup_con,
            self.l_unsup_con,
            self.l_sup_cls,
            self.l_unsup_cls,
            self.mean_entropy,
            self.l_fd,
            self.l_rd,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Full objective and its gradient with respect to every head parameter.
pub fn total_loss<T: Real>(
    params: &HeadParameters<T>,
    batch: &BatchInputs<'_, T>,
    cfg: &LossConfig,
) -> Result<(LossBreakdown, HeadGrads<T>)> {
    let (mut breakdown, grads) = total_loss_weighted(params, batch, cfg, &ComponentWeights::from_config(cfg))?;
    breakdown.total = breakdown.recombined();
    Ok((breakdown, grads))
}

/// Like [`total_loss`] but with arbitrary per-term weights. The breakdown's
/// `total` is the weighted sum actually differentiated.
pub fn total_loss_weighted<T: Real>(
    params: &HeadParameters<T>,
    batch: &BatchInputs<'_, T>,
    cfg: &LossConfig,
    weights: &ComponentWeights,
) -> Result<(LossBreakdown, HeadGrads<T>)> {
    evaluate(params, None, batch, cfg, weights)
}

/// `target_params`, when given, produces the sharpened self-distillation
/// targets in place of `params`.
fn evaluate<T: Real>(
    params: &HeadParameters<T>,
    target_params: Option<&HeadParameters<T>>,
    batch: &BatchInputs<'_, T>,
    cfg: &LossConfig,
    weights: &ComponentWeights,
) -> Result<(LossBreakdown, HeadGrads<T>)> {
    let b = batch.z_a.nrows();
    if batch.z_b.dim() != batch.z_a.dim() || batch.z_teacher.dim() != batch.z_a.dim() {
        return Err(shape!(
            "batch views disagree: {:?}, {:?}, teacher {:?}",
            batch.z_a.dim(),
            batch.z_b.dim(),
            batch.z_teacher.dim()
        ));
    }
    if batch.labels.len() != b {
        return Err(shape!("{} labels for a batch of {b}", batch.labels.len()));
    }
    let temps = &cfg.temperatures;
    let ta = params.forward(batch.z_a, temps.cls_student)?;
    let tb = params.forward(batch.z_b, temps.cls_student)?;
    let k = params.dims.n_classes;
    if let Some(y) = batch.labels.iter().flatten().find(|&&y| y as usize >= k) {
        return Err(invalid!("label {y} outside {k} classes"));
    }

    // supervised contrastive over both views, labels repeated
    let both = concatenate![Axis(0), ta.w, tb.w];
    let labels2: Vec<Option<u32>> = batch.labels.iter().chain(batch.labels).copied().collect();
    let (l_sup_con, d_both) = sup_contrastive(both.view(), &labels2, temps.contrast)?;
    let (l_unsup_con, d_wa_u, d_wb_u) =
        unsup_contrastive(ta.w.view(), tb.w.view(), temps.contrast, cfg.symmetric_unsup_con)?;

    let targets: Vec<(usize, u32)> = batch
        .labels
        .iter()
        .enumerate()
        .filter_map(|(i, y)| y.map(|y| (i, y)))
        .collect();
    let logits_a = ta.cosines.mapv(|c| c / T::of(temps.cls_student));
    let (l_sup_cls, d_logits) = sup_classification(logits_a.view(), &targets)?;
    let target_cos = match target_params {
        Some(tp) => tp.forward(batch.z_b, temps.cls_student)?.cosines,
        None => tb.cosines.clone(),
    };
    let sd = self_distill_with_targets(
        ta.cosines.view(),
        tb.cosines.view(),
        target_cos.view(),
        temps.cls_student,
        temps.cls_sharp,
    )?;

    let z_tilde_a = &ta.z_tilde;
    let (l_fd, d_fd) = forward_kd(z_tilde_a.view(), batch.z_teacher)?;
    let (l_rd, d_rd) = reverse_kd(z_tilde_a.view(), batch.z_teacher)?;

    let w = |x: f64| T::of(x);
    let scale = |a: &Array2<T>, x: f64| a.mapv(|g| g * w(x));

    let d_w_a = scale(&d_both.slice(s![..b, ..]).to_owned(), weights.sup_con) + scale(&d_wa_u, weights.unsup_con);
    let d_w_b = scale(&d_both.slice(s![b.., ..]).to_owned(), weights.sup_con) + scale(&d_wb_u, weights.unsup_con);
    let d_cos_a = scale(&d_logits, weights.sup_cls / temps.cls_student)
        + scale(&sd.d_ce_cos_a, weights.unsup_ce)
        - scale(&sd.d_entropy_cos_a, weights.entropy);
    let d_cos_b = scale(&sd.d_entropy_cos_b, -weights.entropy);
    let d_z_kd = scale(&d_fd, weights.fd) + scale(&d_rd, weights.rd);

    let mut grads = HeadGrads::zeros(params.dims);
    params.backward(&ta, batch.z_a, d_cos_a.view(), d_w_a.view(), Some(d_z_kd.view()), &mut grads);
    params.backward(&tb, batch.z_b, d_cos_b.view(), d_w_b.view(), None, &mut grads);

    let f = |x: T| x.as_f64();
    let ce = f(sd.cross_entropy);
    let h = f(sd.mean_entropy);
    let total = weights.sup_con * f(l_sup_con)
        + weights.unsup_con * f(l_unsup_con)
        + weights.sup_cls * f(l_sup_cls)
        + weights.unsup_ce * ce
        - weights.entropy * h
        + weights.fd * f(l_fd)
        + weights.rd * f(l_rd);
    Ok((
        LossBreakdown {
            l_sup_con: f(l_sup_con),
            l_unsup_con: f(l_unsup_con),
            l_sup_cls: f(l_sup_cls),
            l_unsup_cls: ce - cfg.epsilon * h,
            l_unsup_ce: ce,
            mean_entropy: h,
            l_fd: f(l_fd),
            l_rd: f(l_rd),
            total,
            lambda: cfg.lambda,
            epsilon: cfg.epsilon,
            fd_weight: weights.fd,
            rd_weight: weights.rd,
        },
        grads,
    ))
}

/// Objective value at `params` with the sharpened targets pinned to
/// `target_params`. Its finite differences are what the analytic gradient
/// approximates when `target_params` is the unperturbed point.
pub(crate) fn weighted_value<T: Real>(
    params: &HeadParameters<T>,
    target_params: &HeadParameters<T>,
    batch: &BatchInputs<'_, T>,
    cfg: &LossConfig,
    weights: &ComponentWeights,
) -> Result<f64> {
    evaluate(params, Some(target_params), batch, cfg, weights).map(|(b, _)| b.total)
}
