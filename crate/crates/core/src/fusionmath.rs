//! Numerical kernels for the text/image fusion block and the segmentation loss.
//!
//! Token matrices are dense `(L+1) × D` matrices whose first row is the
//! projected text token and whose remaining `L` rows are projected image
//! tokens. The attention mask lets every token see itself and the text
//! token, nothing else. The loss kernels work on [`SaliencyMap`]s and come
//! with analytic gradients with respect to the predicted probabilities.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::saliency::SaliencyMap;

/// Lower clamp for probabilities inside the focal term; the upper clamp is `1 - PROB_CLAMP`.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch { what: &'static str, expected: (usize, usize), got: (usize, usize) },
    #[error("at least one image token is required")]
    NoImageTokens,
    #[error("embedding dimension must be positive")]
    ZeroDimension,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("loss weights must be nonnegative with at least one positive entry")]
    InvalidWeights,
}

pub type Result<T> = std::result::Result<T, FusionError>;

fn shape(m: &DMatrix<f64>) -> (usize, usize) {
    (m.nrows(), m.ncols())
}

fn expect_shape(what: &'static str, m: &DMatrix<f64>, expected: (usize, usize)) -> Result<()> {
    if shape(m) != expected {
        return Err(FusionError::ShapeMismatch { what, expected, got: shape(m) });
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite(what));
    }
    Ok(())
}

/// Projects the text embedding and the image tokens into the joint space and
/// stacks them, text first.
///
/// `text` has length `D_l`, `image` is `L × D_v`; the projections are
/// `D_l × D` and `D_v × D` and act on row vectors. The image [CLS] token is
/// not part of `image`: its slot is taken by the text token.
pub fn fuse_tokens(
    text: &DVector<f64>,
    image: &DMatrix<f64>,
    proj_text: &DMatrix<f64>,
    proj_image: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    if image.nrows() == 0 {
        return Err(FusionError::NoImageTokens);
    }
    let d = proj_text.ncols();
    if d == 0 {
        return Err(FusionError::ZeroDimension);
    }
    expect_shape("proj_text", proj_text, (text.len(), d))?;
    expect_shape("proj_image", proj_image, (image.ncols(), d))?;
    expect_shape("image tokens", image, (image.nrows(), proj_image.nrows()))?;
    if text.iter().any(|v| !v.is_finite()) {
        return Err(FusionError::NonFinite("text token"));
    }
    let text_row = text.transpose() * proj_text;
    let image_rows = image * proj_image;
    let mut out = DMatrix::zeros(image.nrows() + 1, d);
    out.row_mut(0).copy_from(&text_row);
    out.rows_mut(1, image.nrows()).copy_from(&image_rows);
    Ok(out)
}

/// Additive attention mask over `L + 1` tokens: `0` where attention is
/// allowed, `-inf` elsewhere. Stored implicitly; the pattern is fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionMask {
    tokens: usize,
}

impl AttentionMask {
    /// Total number of tokens, text token included.
    pub fn size(&self) -> usize {
        self.tokens
    }

    pub fn image_tokens(&self) -> usize {
        self.tokens - 1
    }

    /// Zero-based: column 0 is the text token.
    pub fn allows(&self, i: usize, j: usize) -> bool {
        i == j || j == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if self.allows(i, j) {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.tokens, self.tokens, |i, j| self.get(i, j))
    }

    /// Unmasked columns of row `i`, ascending.
    fn columns(&self, i: usize) -> impl Iterator<Item = usize> {
        std::iter::once(0).chain((i != 0).then_some(i))
    }
}

pub fn build_mask(image_tokens: usize) -> Result<AttentionMask> {
    if image_tokens == 0 {
        return Err(FusionError::NoImageTokens);
    }
    Ok(AttentionMask { tokens: image_tokens + 1 })
}

fn check_attention_inputs(q: &DMatrix<f64>, k: &DMatrix<f64>, v: &DMatrix<f64>, mask: &AttentionMask) -> Result<()> {
    let n = mask.size();
    if q.ncols() == 0 {
        return Err(FusionError::ZeroDimension);
    }
    expect_shape("Q", q, (n, q.ncols()))?;
    expect_shape("K", k, (n, q.ncols()))?;
    expect_shape("V", v, (n, v.ncols()))?;
    Ok(())
}

/// Attention weights `softmax((QKᵀ + M)/√D)` as a dense matrix. Masked
/// entries are exactly zero; only the unmasked logits are ever computed.
pub fn attention_weights(q: &DMatrix<f64>, k: &DMatrix<f64>, mask: &AttentionMask, scale_dim: f64) -> Result<DMatrix<f64>> {
    let n = mask.size();
    let dummy_v = DMatrix::zeros(n, 1);
    check_attention_inputs(q, k, &dummy_v, mask)?;
    if !(scale_dim > 0.0) {
        return Err(FusionError::ZeroDimension);
    }
    let inv_sqrt = 1.0 / scale_dim.sqrt();
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        let logits: Vec<(usize, f64)> =
            mask.columns(i).map(|j| (j, (q.row(i).dot(&k.row(j)) + mask.get(i, j)) * inv_sqrt)).collect();
        let max = logits.iter().map(|(_, l)| *l).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<(usize, f64)> = logits.iter().map(|&(j, l)| (j, (l - max).exp())).collect();
        let z: f64 = exps.iter().map(|(_, e)| e).sum();
        for (j, e) in exps {
            w[(i, j)] = e / z;
        }
    }
    Ok(w)
}

/// One masked self-attention pass: `softmax((QKᵀ + M)/√D) · V`.
pub fn masked_attention(
    q: &DMatrix<f64>,
    k: &DMatrix<f64>,
    v: &DMatrix<f64>,
    mask: &AttentionMask,
    scale_dim: f64,
) -> Result<DMatrix<f64>> {
    check_attention_inputs(q, k, v, mask)?;
    let w = attention_weights(q, k, mask, scale_dim)?;
    let mut out = DMatrix::zeros(mask.size(), v.ncols());
    for i in 0..mask.size() {
        for j in mask.columns(i) {
            let weighted = v.row(j) * w[(i, j)];
            let mut row = out.row_mut(i);
            row += weighted;
        }
    }
    Ok(out)
}

/// Parameters of the per-output segmentation loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossParams {
    /// Focusing exponent of the focal term.
    pub gamma: f64,
    /// Foreground balance of the focal term.
    pub alpha: f64,
    /// Additive smoothing of the DICE ratio.
    pub smooth: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { gamma: 2.0, alpha: 0.25, smooth: 1.0 }
    }
}

fn check_pair(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(FusionError::ShapeMismatch {
            what: "prediction vs ground truth",
            expected: (gt.height(), gt.width()),
            got: (pred.height(), pred.width()),
        });
    }
    Ok(())
}

struct DiceParts {
    intersection: f64,
    denominator: f64,
}

fn dice_parts(pred: &SaliencyMap, gt: &SaliencyMap, smooth: f64) -> DiceParts {
    let (mut inter, mut sum) = (0.0, 0.0);
    for (p, g) in pred.values().iter().zip(gt.values()) {
        inter += p * g;
        sum += p + g;
    }
    DiceParts { intersection: inter, denominator: sum + smooth }
}

pub fn dice_loss_with(pred: &SaliencyMap, gt: &SaliencyMap, smooth: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let d = dice_parts(pred, gt, smooth);
    Ok(1.0 - (2.0 * d.intersection + smooth) / d.denominator)
}

/// `1 - (2·Σpg + 1) / (Σp + Σg + 1)`.
pub fn dice_loss(pred: &SaliencyMap, gt: &SaliencyMap) -> Result<f64> {
    dice_loss_with(pred, gt, LossParams::default().smooth)
}

fn dice_gradient(pred: &SaliencyMap, gt: &SaliencyMap, smooth: f64) -> Vec<f64> {
    let d = dice_parts(pred, gt, smooth);
    let num = 2.0 * d.intersection + smooth;
    let den2 = d.denominator * d.denominator;
    gt.values().iter().map(|g| -(2.0 * g * d.denominator - num) / den2).collect()
}

/// Per-pixel focal term and its derivative with respect to the unclamped
/// prediction. Soft targets interpolate `p_t` and `α_t` linearly.
fn focal_pixel(p: f64, g: f64, gamma: f64, alpha: f64) -> (f64, f64) {
    let inside = (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p);
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let pt = p * g + (1.0 - p) * (1.0 - g);
    let at = alpha * g + (1.0 - alpha) * (1.0 - g);
    let one_minus = 1.0 - pt;
    let log_pt = pt.ln();
    let value = -at * one_minus.powf(gamma) * log_pt;
    if !inside {
        return (value, 0.0);
    }
    let focus_slope = if gamma == 0.0 { 0.0 } else { gamma * one_minus.powf(gamma - 1.0) * log_pt };
    let d_pt = at * (focus_slope - one_minus.powf(gamma) / pt);
    (value, d_pt * (2.0 * g - 1.0))
}

/// Mean over pixels of `-α_t (1 - p_t)^γ log p_t`, with predictions clamped
/// to `[1e-7, 1 - 1e-7]`.
pub fn focal_loss(pred: &SaliencyMap, gt: &SaliencyMap, gamma: f64, alpha: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    let n = pred.values().len() as f64;
    let sum: f64 = pred.values().iter().zip(gt.values()).map(|(&p, &g)| focal_pixel(p, g, gamma, alpha).0).sum();
    Ok(sum / n)
}

/// Focal plus DICE loss of one output map.
pub fn segmentation_loss(pred: &SaliencyMap, gt: &SaliencyMap, params: &LossParams) -> Result<f64> {
    Ok(focal_loss(pred, gt, params.gamma, params.alpha)? + dice_loss_with(pred, gt, params.smooth)?)
}

/// Gradient of [`segmentation_loss`] with respect to each predicted pixel,
/// row-major.
pub fn segmentation_loss_gradient(pred: &SaliencyMap, gt: &SaliencyMap, params: &LossParams) -> Result<Vec<f64>> {
    check_pair(pred, gt)?;
    let n = pred.values().len() as f64;
    let dice = dice_gradient(pred, gt, params.smooth);
    Ok(pred
        .values()
        .iter()
        .zip(gt.values())
        .zip(dice)
        .map(|((&p, &g), dd)| focal_pixel(p, g, params.gamma, params.alpha).1 / n + dd)
        .collect())
}

/// Weights of the fused output and the four side outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub fuse: f64,
    pub side: [f64; 4],
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { fuse: 1.0, side: [1.0; 4] }
    }
}

impl LossWeights {
    pub fn fuse_only() -> Self {
        Self { fuse: 1.0, side: [0.0; 4] }
    }

    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.fuse).chain(self.side);
        if all.clone().any(|w| !(w >= 0.0) || !w.is_finite()) || !all.into_iter().any(|w| w > 0.0) {
            return Err(FusionError::InvalidWeights);
        }
        Ok(())
    }

    fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        std::iter::once(self.fuse).chain(self.side.iter().copied())
    }
}

/// The fused map followed by the four side outputs.
pub struct Outputs<'a> {
    pub fuse: &'a SaliencyMap,
    pub side: [&'a SaliencyMap; 4],
}

impl<'a> Outputs<'a> {
    fn iter(&self) -> impl Iterator<Item = &'a SaliencyMap> + '_ {
        std::iter::once(self.fuse).chain(self.side.iter().copied())
    }
}

/// Weighted sum of the per-output losses.
pub fn total_loss(outputs: &Outputs<'_>, gt: &SaliencyMap, weights: &LossWeights, params: &LossParams) -> Result<f64> {
    weights.validate()?;
    let mut total = 0.0;
    for (map, w) in outputs.iter().zip(weights.iter()) {
        total += w * segmentation_loss(map, gt, params)?;
    }
    Ok(total)
}

/// Gradients of [`total_loss`] with respect to the pixels of each output, in
/// the order fused, side 1..4.
pub fn total_loss_gradient(
    outputs: &Outputs<'_>,
    gt: &SaliencyMap,
    weights: &LossWeights,
    params: &LossParams,
) -> Result<Vec<Vec<f64>>> {
    weights.validate()?;
    outputs
        .iter()
        .zip(weights.iter())
        .map(|(map, w)| Ok(segmentation_loss_gradient(map, gt, params)?.into_iter().map(|g| w * g).collect()))
        .collect()
}
