//! The four network families and their parameter accounting.
//!
//! Every model is a base encoder-decoder; the iterative kinds add `N - 1`
//! refinery encoder-decoders, each fed the base module's first-level
//! features concatenated with the previous module's second-last layer.

mod model;
mod spec;

pub use model::{ForwardOutput, LayerInfo, LayerKind, Model, DEFAULT_DROPOUT};
pub use spec::{ArchKind, ArchitectureSpec, Ladder, MiniSpec};

/// Parameter budgets from the published comparison table, in scalars.
pub fn reference_budget(kind: ArchKind) -> f64 {
    match kind {
        ArchKind::Unet => 7.8e6,
        ArchKind::MiUnet => 0.069e6,
        ArchKind::IterNet => 8.0e6,
        ArchKind::IterMiUnet => 0.15e6,
    }
}

/// Relative tolerance allowed around [`reference_budget`].
pub const BUDGET_TOLERANCE: f64 = 0.15;

/// Trainable scalars of a model, weights plus biases.
pub fn count_parameters(model: &Model) -> usize {
    model.count_parameters()
}
