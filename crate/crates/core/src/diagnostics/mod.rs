//! Analysis instruments: linear CKA between the layers of two models,
//! gradient norms per share group and per layer, and loss-curve smoothing.

mod cka;
mod curves;
mod gradnorm;

pub use cka::{cka_linear, layer_similarity, SimilarityCurve, SIMILARITY_ACTIVATION};
pub use curves::{max_rise, moving_average, slope, window_standard_error};
pub use gradnorm::{grad_norm_per_layer, norm_spread, GradNormTrace, LayerGrouping};
