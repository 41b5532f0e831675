//! Cross-modal representations and the trainable head.

pub(crate) mod head;

pub use head::{
    TENSOR_NAMES,
    gelu, gelu_grad, init_head, normalize_rows, normalize_rows_backward, ForwardTrace, HeadDims,
    HeadGrads, HeadParameters, Linear, Temperatures, DEFAULT_D_CONTRAST, DEFAULT_D_PROJ, NORM_EPS,
};

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{invalid, shape, Result};
use crate::spectral::CrossModalMatrix;

/// CLIP logit temperature for both teacher and student similarities.
pub const DEFAULT_LOGIT_TEMPERATURE: f64 = 0.01;

fn unit_rows(x: ArrayView2<'_, f32>, what: &str) -> Result<Array2<f64>> {
    let mut out = x.mapv(f64::from);
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let n = row.dot(&row).sqrt();
        if !(n > 0.0) || !n.is_finite() {
            return Err(invalid!("{what} row {i} has zero or non-finite norm"));
        }
        row /= n;
    }
    Ok(out)
}

/// `[N, M]` matrix of `cos(image_i, concept_j) / tau`, with its row softmax.
pub fn cross_modal(
    image_embeds: ArrayView2<'_, f32>,
    concept_embeds: ArrayView2<'_, f32>,
    tau: f64,
) -> Result<CrossModalMatrix> {
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    if image_embeds.ncols() != concept_embeds.ncols() {
        return Err(shape!(
            "image dim {} differs from concept dim {}",
            image_embeds.ncols(),
            concept_embeds.ncols()
        ));
    }
    let images = unit_rows(image_embeds, "image")?;
    let concepts = unit_rows(concept_embeds, "concept")?;
    let raw = images.dot(&concepts.t()) / tau;
    CrossModalMatrix::from_raw(raw, tau)
}
