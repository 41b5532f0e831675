//! Trainable head over filtered cross-modal rows.
//!
//! ```text
//! z~ = scale ⊙ z + shift                   per-concept recalibration
//! u  = z~ W                                linear projection
//! c  = normalize(u) · normalize(P_k)       cosine classifier
//! p  = softmax(c / tau_cls)
//! w  = normalize(MLP(u))                   contrastive embedding
//! ```
//!
//! The recalibration layer stands in for the fine-tuned last block of the
//! student image encoder; it is where distillation gradients land.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::real::Real;
use crate::seed;

pub const DEFAULT_D_PROJ: usize = 768;
pub const DEFAULT_D_CONTRAST: usize = 256;
/// Norm floor used by every L2 normalization.
pub const NORM_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeadDims {
    /// Filtered dictionary size.
    pub n_concepts: usize,
    /// Projection width; also the MLP hidden width.
    pub d_proj: usize,
    pub d_contrast: usize,
    pub n_classes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Temperatures {
    /// CLIP logit temperature of the cross-modal similarities.
    pub logit: f64,
    pub cls_student: f64,
    /// Temperature of the sharpened self-distillation targets.
    pub cls_sharp: f64,
    pub contrast: f64,
}

impl Default for Temperatures {
    fn default() -> Self {
        Self {
            logit: 0.01,
            cls_student: 0.1,
            cls_sharp: 0.05,
            contrast: 0.1,
        }
    }
}

impl Temperatures {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [
            ("logit", self.logit),
            ("cls_student", self.cls_student),
            ("cls_sharp", self.cls_sharp),
            ("contrast", self.contrast),
        ] {
            if !(t.is_finite() && t > 0.0) {
                return Err(invalid!("temperature {name} must be positive, got {t}"));
            }
        }
        if self.cls_sharp >= self.cls_student {
            return Err(invalid!(
                "sharpening temperature {} must be below the student temperature {}",
                self.cls_sharp,
                self.cls_student
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters<T> {
    pub dims: HeadDims,
    pub recal_scale: Array1<T>,
    pub recal_shift: Array1<T>,
    /// `[n_concepts, d_proj]`
    pub projection: Array2<T>,
    /// `[n_classes, d_proj]`, rows kept at unit norm by the trainer.
    pub prototypes: Array2<T>,
    pub mlp: [Linear<T>; 3],
}

/// Gradient buffers share the parameter layout.
pub type HeadGrads<T> = HeadParameters<T>;

pub const TENSOR_NAMES: [&str; 10] = [
    "recal.scale",
    "recal.shift",
    "projection",
    "prototypes",
    "mlp.0.weight",
    "mlp.0.bias",
    "mlp.1.weight",
    "mlp.1.bias",
    "mlp.2.weight",
    "mlp.2.bias",
];

impl<T: Real> HeadParameters<T> {
    pub fn zeros(dims: HeadDims) -> Self {
        let HeadDims {
            n_concepts: m,
            d_proj: d,
            d_contrast: c,
            n_classes: k,
        } = dims;
        Self {
            dims,
            recal_scale: Array1::zeros(m),
            recal_shift: Array1::zeros(m),
            projection: Array2::zeros((m, d)),
            prototypes: Array2::zeros((k, d)),
            mlp: [Linear::zeros(d, d), Linear::zeros(d, d), Linear::zeros(d, c)],
        }
    }

    /// Named views over every tensor, in [`TENSOR_NAMES`] order.
    pub fn tensors(&self) -> Vec<(&'static str, ArrayViewD<'_, T>)> {
        let [l0, l1, l2] = &self.mlp;
        let views = [
            self.recal_scale.view().into_dyn(),
            self.recal_shift.view().into_dyn(),
            self.projection.view().into_dyn(),
            self.prototypes.view().into_dyn(),
            l0.weight.view().into_dyn(),
            l0.bias.view().into_dyn(),
            l1.weight.view().into_dyn(),
            l1.bias.view().into_dyn(),
            l2.weight.view().into_dyn(),
            l2.bias.view().into_dyn(),
        ];
        TENSOR_NAMES.into_iter().zip(views).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, ArrayViewMutD<'_, T>)> {
        let [l0, l1, l2] = &mut self.mlp;
        let views = [
            self.recal_scale.view_mut().into_dyn(),
            self.recal_shift.view_mut().into_dyn(),
            self.projection.view_mut().into_dyn(),
            self.prototypes.view_mut().into_dyn(),
            l0.weight.view_mut().into_dyn(),
            l0.bias.view_mut().into_dyn(),
            l1.weight.view_mut().into_dyn(),
            l1.bias.view_mut().into_dyn(),
            l2.weight.view_mut().into_dyn(),
            l2.bias.view_mut().into_dyn(),
        ];
        TENSOR_NAMES.into_iter().zip(views).collect()
    }

    pub fn n_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|x| x.is_finite()))
    }

    pub fn renormalize_prototypes(&mut self) {
        let eps = T::of(NORM_EPS);
        for mut row in self.prototypes.rows_mut() {
            let n = row.dot(&row).sqrt().max(eps);
            row.mapv_inplace(|x| x / n);
        }
    }

    pub fn cast<U: Real>(&self) -> HeadParameters<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::of(x.as_f64()));
        let c2 = |a: &Array2<T>| a.mapv(|x| U::of(x.as_f64()));
        let lin = |l: &Linear<T>| Linear {
            weight: c2(&l.weight),
            bias: c1(&l.bias),
        };
        HeadParameters {
            dims: self.dims,
            recal_scale: c1(&self.recal_scale),
            recal_shift: c1(&self.recal_shift),
            projection: c2(&self.projection),
            prototypes: c2(&self.prototypes),
            mlp: [lin(&self.mlp[0]), lin(&self.mlp[1]), lin(&self.mlp[2])],
        }
    }

    fn check_input(&self, z_hat: ArrayView2<'_, T>) -> Result<()> {
        if z_hat.ncols() != self.dims.n_concepts {
            return Err(shape!(
                "input has {} concepts, head expects {}",
                z_hat.ncols(),
                self.dims.n_concepts
            ));
        }
        Ok(())
    }

    /// Student rows after the per-concept recalibration.
    pub fn recalibrate(&self, z_hat: ArrayView2<'_, T>) -> Array2<T> {
        &z_hat * &self.recal_scale + &self.recal_shift
    }

    pub fn forward(&self, z_hat: ArrayView2<'_, T>, tau_cls: f64) -> Result<ForwardTrace<T>> {
        self.check_input(z_hat)?;
        let z_tilde = self.recalibrate(z_hat);
        let u = z_tilde.dot(&self.projection);
        let (u_hat, u_norm) = normalize_rows(u.view());
        let (p_hat, p_norm) = normalize_rows(self.prototypes.view());
        let cosines = u_hat.dot(&p_hat.t());
        let logits = cosines.mapv(|c| c / T::of(tau_cls));
        let probs = softmax(logits.view());

        let a1 = self.mlp[0].forward(u.view());
        let h1 = a1.mapv(gelu);
        let a2 = self.mlp[1].forward(h1.view());
        let h2 = a2.mapv(gelu);
        let o = self.mlp[2].forward(h2.view());
        let (w, o_norm) = normalize_rows(o.view());
        Ok(ForwardTrace {
            z_tilde,
            u,
            u_hat,
            u_norm,
            p_hat,
            p_norm,
            cosines,
            probs,
            a1,
            h1,
            a2,
            h2,
            o_norm,
            w,
        })
    }

    /// Single-row convenience wrapper around [`Self::forward`].
    pub fn forward_one(&self, z_hat: ArrayView1<'_, T>, tau_cls: f64) -> Result<ForwardTrace<T>> {
        self.forward(z_hat.insert_axis(Axis(0)), tau_cls)
    }

    /// Accumulates parameter gradients given upstream gradients on the
    /// classifier cosines, the contrastive embeddings and (optionally) the
    /// recalibrated rows.
    pub fn backward(
        &self,
        trace: &ForwardTrace<T>,
        z_hat: ArrayView2<'_, T>,
        d_cos: ArrayView2<'_, T>,
        d_w: ArrayView2<'_, T>,
        d_z_tilde_extra: Option<ArrayView2<'_, T>>,
        grads: &mut HeadGrads<T>,
    ) {
        // cosine classifier
        let d_p_hat = d_cos.t().dot(&trace.u_hat);
        let d_u_hat = d_cos.dot(&trace.p_hat);
        grads.prototypes += &normalize_rows_backward(d_p_hat.view(), trace.p_hat.view(), trace.p_norm.view());
        let mut d_u = normalize_rows_backward(d_u_hat.view(), trace.u_hat.view(), trace.u_norm.view());

        // projection MLP
        let d_o = normalize_rows_backward(d_w, trace.w.view(), trace.o_norm.view());
        let d_h2 = linear_backward(&self.mlp[2], &mut grads.mlp[2], trace.h2.view(), d_o.view());
        let d_a2 = &d_h2 * &trace.a2.mapv(gelu_grad);
        let d_h1 = linear_backward(&self.mlp[1], &mut grads.mlp[1], trace.h1.view(), d_a2.view());
        let d_a1 = &d_h1 * &trace.a1.mapv(gelu_grad);
        d_u += &linear_backward(&self.mlp[0], &mut grads.mlp[0], trace.u.view(), d_a1.view());

        // projection and recalibration
        grads.projection += &trace.z_tilde.t().dot(&d_u);
        let mut d_z_tilde = d_u.dot(&self.projection.t());
        if let Some(extra) = d_z_tilde_extra {
            d_z_tilde += &extra;
        }
        grads.recal_scale += &(&d_z_tilde * &z_hat).sum_axis(Axis(0));
        grads.recal_shift += &d_z_tilde.sum_axis(Axis(0));
    }
}

fn linear_backward<T: Real>(
    layer: &Linear<T>,
    grad: &mut Linear<T>,
    input: ArrayView2<'_, T>,
    d_out: ArrayView2<'_, T>,
) -> Array2<T> {
    grad.weight += &input.t().dot(&d_out);
    grad.bias += &d_out.sum_axis(Axis(0));
    d_out.dot(&layer.weight.t())
}

/// Batch forward intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<T> {
    pub z_tilde: Array2<T>,
    pub u: Array2<T>,
    pub u_hat: Array2<T>,
    /// Unclamped row norms of `u`.
    pub u_norm: Array1<T>,
    pub p_hat: Array2<T>,
    pub p_norm: Array1<T>,
    /// `[B, K]` cosine between normalized `u` and prototypes.
    pub cosines: Array2<T>,
    /// Softmax of `cosines / tau_cls`.
    pub probs: Array2<T>,
    pub a1: Array2<T>,
    pub h1: Array2<T>,
    pub a2: Array2<T>,
    pub h2: Array2<T>,
    pub o_norm: Array1<T>,
    /// Unit-norm contrastive embeddings.
    pub w: Array2<T>,
}

impl<T: Real> ForwardTrace<T> {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs
            .rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, T::neg_infinity()), |best, (k, &p)| if p > best.1 { (k, p) } else { best })
                    .0
            })
            .collect()
    }
}

/// Row-wise softmax with max subtraction.
pub(crate) fn softmax<T: Real>(logits: ArrayView2<'_, T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

/// Rows divided by `max(norm, NORM_EPS)`; also returns the unclamped norms.
pub fn normalize_rows<T: Real>(x: ArrayView2<'_, T>) -> (Array2<T>, Array1<T>) {
    let eps = T::of(NORM_EPS);
    let norms: Array1<T> = x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut out = x.to_owned();
    for (mut row, &n) in out.rows_mut().into_iter().zip(&norms) {
        let d = n.max(eps);
        row.mapv_inplace(|v| v / d);
    }
    (out, norms)
}

/// Gradient of [`normalize_rows`] with respect to its input.
pub fn normalize_rows_backward<T: Real>(
    d_hat: ArrayView2<'_, T>,
    x_hat: ArrayView2<'_, T>,
    norms: ArrayView1<'_, T>,
) -> Array2<T> {
    let eps = T::of(NORM_EPS);
    let mut out = d_hat.to_owned();
    Zip::from(out.rows_mut())
        .and(x_hat.rows())
        .and(&norms)
        .for_each(|mut d, xh, &n| {
            if n > eps {
                let proj = xh.dot(&d);
                d.zip_mut_with(&xh, |g, &x| *g = (*g - x * proj) / n);
            } else {
                d.mapv_inplace(|g| g / eps);
            }
        });
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of(0.5);
    let inner = T::of(GELU_C) * (x + T::of(GELU_A) * x * x * x);
    let t = inner.tanh();
    let d_inner = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * d_inner
}

fn truncated_normal<T: Real>(rng: &mut impl Rng, shape: (usize, usize)) -> Array2<T> {
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            break T::of(z * INIT_STD);
        }
    })
}

/// Truncated-normal (std 0.02, cut at two std) weights, zero biases, identity
/// recalibration and unit-norm prototypes.
pub fn init_head<T: Real>(dims: HeadDims, seed: u64) -> HeadParameters<T> {
    let mut p = HeadParameters::<T>::zeros(dims);
    let mut rng = seed::rng(seed, "head-init", 0);
    p.recal_scale.fill(T::one());
    p.projection = truncated_normal(&mut rng, (dims.n_concepts, dims.d_proj));
    p.prototypes = truncated_normal(&mut rng, (dims.n_classes, dims.d_proj));
    for layer in &mut p.mlp {
        layer.weight = truncated_normal(&mut rng, layer.weight.dim());
    }
    p.renormalize_prototypes();
    p
}
