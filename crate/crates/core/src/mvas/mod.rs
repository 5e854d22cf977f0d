//! Multi-view adaptive selection attention.
//!
//! For every view, the feature map is cut into `a × a` windows, each window
//! is summarized by the mean of its projected tokens, the `k` windows of the
//! other views whose summaries correlate best are selected, and the view's
//! queries attend only to the tokens of those selected windows.

mod attention;
mod block;
mod complexity;
mod oracle;
mod select;
mod window;

pub use attention::{
    fuse_view, gather_topk, mvas_forward, neighborhood_cross_attention, project_qkv,
    validate_geometry,
};
pub use block::{mvas_block, positional_encoding, Linear, MvasBlockParams, Norm, QkvWeights, RESIDUAL_GAIN_INIT};
pub use complexity::{
    am_gm_terms, flop_model, gathered_kv_elements, optimal_window, optimal_window_divisor,
    valid_windows, FlopCounts,
};
pub use oracle::{dense_cross_attention_all, dense_cross_attention_oracle};
pub use select::{correlation, topk_indices, window_descriptors, CorrelationMatrix, TopKSelection};
pub use window::{partition_var, unpartition_var, WindowGrid};
