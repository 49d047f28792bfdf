//! Training-free editing in token space: temporal in-betweening, body-part
//! regeneration and transitions between two clips.
//!
//! Random draws are split across two ChaCha streams of the same seed: stream
//! 1 picks extra masked positions, stream 0 drives the iterative fill, so an
//! edit that masks everything reproduces fresh generation exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::motiondata::Part;
use crate::spamgen::{GenError, GenModel, TextBundle};
use crate::spamvq::TokenGrid;

#[derive(Debug, Error)]
pub enum EditError {
    #[error("invalid range {alpha}..{beta}")]
    InvalidRange { alpha: usize, beta: usize },
    #[error("range end {beta} exceeds sequence length {n}")]
    OutOfBounds { beta: usize, n: usize },
    #[error("body-part edit needs at least one part")]
    NoParts,
    #[error("mask ratio must lie in [0, 1), got {0}")]
    BadRatio(f64),
    #[error("context of {n_ctx} steps is longer than an input of {n} steps")]
    ContextTooLong { n_ctx: usize, n: usize },
    #[error("input grid is incomplete (contains MASK)")]
    Incomplete,
    #[error("grids disagree in layers or codebook size")]
    GridMismatch,
    #[error(transparent)]
    Gen(#[from] GenError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    /// Probability of masking each token of the parts not being edited.
    pub rho: f64,
    pub n_trans: usize,
    pub n_ctx: usize,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            rho: 0.15,
            n_trans: 4,
            n_ctx: 4,
        }
    }
}

/// What an edit targets.
#[derive(Debug, Clone, PartialEq)]
pub enum EditRequest {
    /// Token span `alpha..beta`.
    Inbetween { alpha: usize, beta: usize },
    Bodypart { parts: Vec<Part>, rho: f64 },
}

/// Token span covering frames `alpha..beta`.
pub fn frame_span_to_tokens(alpha: usize, beta: usize, downscale: usize) -> (usize, usize) {
    (alpha / downscale, beta.div_ceil(downscale))
}

fn fill_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// RNG for the extra-mask draw of body-part edits.
pub fn mask_rng(seed: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(1);
    r
}

fn require_complete(grid: &TokenGrid) -> Result<(), EditError> {
    if grid.is_complete() {
        Ok(())
    } else {
        Err(EditError::Incomplete)
    }
}

/// Mask the selected base cells, refill them and regenerate their residual
/// tokens. `cells` is indexed `p·n + t`.
fn regenerate_cells(
    grid: &TokenGrid,
    cells: &[bool],
    text: &TextBundle,
    model: &GenModel,
    seed: u64,
) -> Result<TokenGrid, EditError> {
    if !cells.iter().any(|&c| c) {
        return Ok(grid.clone());
    }
    let mask = grid.mask();
    let mut base = grid.layer(0).to_vec();
    for (tok, &sel) in base.iter_mut().zip(cells) {
        if sel {
            *tok = mask;
        }
    }
    let filled = model.fill_base(&base, text, &mut fill_rng(seed))?;
    let mut out = grid.clone();
    out.layer_mut(0).copy_from_slice(&filled);
    Ok(model.regenerate_residuals(&out, text, cells)?)
}

/// Regenerate token steps `alpha..beta` of every part.
pub fn edit_inbetween(
    grid: &TokenGrid,
    alpha: usize,
    beta: usize,
    text: &TextBundle,
    model: &GenModel,
    seed: u64,
) -> Result<TokenGrid, EditError> {
    require_complete(grid)?;
    if alpha > beta {
        return Err(EditError::InvalidRange { alpha, beta });
    }
    if beta > grid.n {
        return Err(EditError::OutOfBounds { beta, n: grid.n });
    }
    let n = grid.n;
    let cells: Vec<bool> = (0..4 * n).map(|pos| (alpha..beta).contains(&(pos % n))).collect();
    regenerate_cells(grid, &cells, text, model, seed)
}

/// Cells masked by a body-part edit: every step of the parts in `parts`,
/// plus each other cell independently with probability `rho`.
pub fn bodypart_mask(n: usize, parts: &[Part], rho: f64, seed: u64) -> Vec<bool> {
    let mut rng = mask_rng(seed);
    let mut cells = vec![false; 4 * n];
    for p in 0..4 {
        let edited = parts.iter().any(|q| q.index() == p);
        for t in 0..n {
            cells[p * n + t] = if edited { true } else { rng.gen::<f64>() < rho };
        }
    }
    cells
}

/// Regenerate the parts in `parts`, loosening the others with ratio `rho`.
pub fn edit_bodypart(
    grid: &TokenGrid,
    parts: &[Part],
    text: &TextBundle,
    rho: f64,
    model: &GenModel,
    seed: u64,
) -> Result<TokenGrid, EditError> {
    require_complete(grid)?;
    if parts.is_empty() {
        return Err(EditError::NoParts);
    }
    if !(0.0..1.0).contains(&rho) {
        return Err(EditError::BadRatio(rho));
    }
    let cells = bodypart_mask(grid.n, parts, rho, seed);
    regenerate_cells(grid, &cells, text, model, seed)
}

pub fn apply_edit(
    grid: &TokenGrid,
    req: &EditRequest,
    text: &TextBundle,
    model: &GenModel,
    seed: u64,
) -> Result<TokenGrid, EditError> {
    match req {
        EditRequest::Inbetween { alpha, beta } => edit_inbetween(grid, *alpha, *beta, text, model, seed),
        EditRequest::Bodypart { parts, rho } => edit_bodypart(grid, parts, text, *rho, model, seed),
    }
}

/// `[A | transition | B]`, where the `n_trans` transition steps are filled
/// conditioned on the last `n_ctx` steps of A and the first `n_ctx` of B.
pub fn blend(
    a: &TokenGrid,
    b: &TokenGrid,
    n_trans: usize,
    n_ctx: usize,
    text: &TextBundle,
    model: &GenModel,
    seed: u64,
) -> Result<TokenGrid, EditError> {
    require_complete(a)?;
    require_complete(b)?;
    if (a.layers, a.k) != (b.layers, b.k) {
        return Err(EditError::GridMismatch);
    }
    for g in [a, b] {
        if n_ctx > g.n {
            return Err(EditError::ContextTooLong { n_ctx, n: g.n });
        }
    }
    if n_trans == 0 {
        return Ok(TokenGrid::concat(&[a, b]));
    }
    let gap = TokenGrid::masked(a.layers, n_trans, a.k);
    let head = a.slice_steps(a.n - n_ctx..a.n);
    let tail = b.slice_steps(0..n_ctx);
    let window = TokenGrid::concat(&[&head, &gap, &tail]);
    let wn = window.n;
    let cells: Vec<bool> = (0..4 * wn)
        .map(|pos| (n_ctx..n_ctx + n_trans).contains(&(pos % wn)))
        .collect();
    let filled_base = model.fill_base(window.layer(0), text, &mut fill_rng(seed))?;
    let mut filled = window.clone();
    filled.layer_mut(0).copy_from_slice(&filled_base);
    // Residual layers of the transition are still MASK; give them a valid
    // placeholder before prediction overwrites them.
    for l in 1..filled.layers {
        for p in 0..4 {
            for t in n_ctx..n_ctx + n_trans {
                filled.set(l, p, t, 0);
            }
        }
    }
    let filled = model.regenerate_residuals(&filled, text, &cells)?;
    let transition = filled.slice_steps(n_ctx..n_ctx + n_trans);
    Ok(TokenGrid::concat(&[a, &transition, b]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spamgen::GenConfig;

    fn model() -> GenModel {
        GenModel::new(
            GenConfig {
                model_dim: 8,
                ff_dim: 8,
                text_dim: 4,
                max_len: 16,
                codes: 6,
                steps: 3,
                ..GenConfig::desk()
            },
            1,
        )
        .unwrap()
    }

    fn grid(m: &GenModel, n: usize, seed: u64) -> TokenGrid {
        m.generate(&TextBundle::unconditional(), n, seed).unwrap()
    }

    #[test]
    fn span_conversion_covers_frames() {
        assert_eq!(frame_span_to_tokens(5, 13, 4), (1, 4));
        assert_eq!(frame_span_to_tokens(8, 16, 4), (2, 4));
        assert_eq!(frame_span_to_tokens(0, 0, 4), (0, 0));
    }

    #[test]
    fn empty_span_is_identity() {
        let m = model();
        let g = grid(&m, 6, 1);
        assert_eq!(edit_inbetween(&g, 3, 3, &TextBundle::unconditional(), &m, 5).unwrap(), g);
        assert!(edit_inbetween(&g, 4, 3, &TextBundle::unconditional(), &m, 5).is_err());
        assert!(edit_inbetween(&g, 0, 7, &TextBundle::unconditional(), &m, 5).is_err());
    }

    #[test]
    fn full_span_equals_fresh_generation() {
        let m = model();
        let text = TextBundle::global(Some(vec![0.5, -0.5, 0.1, 0.0]));
        let g = grid(&m, 6, 1);
        let edited = edit_inbetween(&g, 0, 6, &text, &m, 9).unwrap();
        assert_eq!(edited, m.generate(&text, 6, 9).unwrap());
    }

    #[test]
    fn inbetween_preserves_outside() {
        let m = model();
        let g = grid(&m, 8, 2);
        let e = edit_inbetween(&g, 2, 5, &TextBundle::unconditional(), &m, 3).unwrap();
        for l in 0..g.layers {
            for p in 0..4 {
                for t in (0..2).chain(5..8) {
                    assert_eq!(e.get(l, p, t), g.get(l, p, t));
                }
            }
        }
        assert!(e.is_complete());
    }

    #[test]
    fn bodypart_zero_rho_keeps_other_parts() {
        let m = model();
        let g = grid(&m, 5, 4);
        let e = edit_bodypart(&g, &[Part::LU], &TextBundle::unconditional(), 0.0, &m, 8).unwrap();
        for l in 0..g.layers {
            for p in 1..4 {
                for t in 0..5 {
                    assert_eq!(e.get(l, p, t), g.get(l, p, t));
                }
            }
        }
        assert!(edit_bodypart(&g, &[], &TextBundle::unconditional(), 0.0, &m, 8).is_err());
        assert!(edit_bodypart(&g, &[Part::LU], &TextBundle::unconditional(), 1.0, &m, 8).is_err());
    }

    #[test]
    fn all_parts_mask_everything() {
        let cells = bodypart_mask(3, &Part::ALL, 0.0, 1);
        assert!(cells.iter().all(|&c| c));
    }

    #[test]
    fn blend_lengths_and_preservation() {
        let m = model();
        let a = grid(&m, 5, 1);
        let b = grid(&m, 6, 2);
        let text = TextBundle::unconditional();
        let out = blend(&a, &b, 3, 2, &text, &m, 7).unwrap();
        assert_eq!(out.n, 5 + 3 + 6);
        assert_eq!(out.slice_steps(0..5), a);
        assert_eq!(out.slice_steps(8..14), b);
        assert!(out.is_complete());
        assert_eq!(blend(&a, &b, 0, 2, &text, &m, 7).unwrap(), TokenGrid::concat(&[&a, &b]));
        assert!(matches!(
            blend(&a, &b, 3, 6, &text, &m, 7),
            Err(EditError::ContextTooLong { .. })
        ));
    }
}
