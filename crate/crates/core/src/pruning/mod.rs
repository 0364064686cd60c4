//! Sub-network extraction: importance scores, mask extraction in layerwise
//! or global scope, masked parameter views, mask grouping and the mask file
//! format.

mod groups;
mod mask;
mod scores;

use rand::RngCore;

pub use groups::{group_masks, language_masks, Group, Grouping, MaskScorer};
pub use mask::{
    apply_mask, extract_mask, materialize, read_mask, write_mask, zero_count, MaskedParams, Scope, Strategy, SubnetMask,
};
pub use scores::{magnitude_scores, random_scores, taylor_from_gradients, taylor_scores, ImportanceTable, Provenance};

use crate::error::Result;
use crate::model::ParamTree;
use crate::scalar::Scalar;

/// Uniformly random mask with the exact zero count of `scope`.
pub fn random_mask<S: Scalar>(
    params: &ParamTree<S>,
    p: f64,
    scope: Scope,
    rng: &mut dyn RngCore,
    id: impl Into<String>,
) -> Result<SubnetMask> {
    extract_mask(&random_scores(params, rng), p, scope, Strategy::Random, id, None)
}
