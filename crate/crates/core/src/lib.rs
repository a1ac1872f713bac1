//! First-order calculus on finite metric measure spaces: pointwise
//! Lipschitz constants, stencil derivations, the module structure of
//! derivations and measurable differentiable structures.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]
pub mod derivation;
pub mod error;
pub mod field;
pub mod lipcalc;
pub mod mds;
pub mod modalg;
pub mod space;

pub use derivation::{combine, ComponentTable, Derivation, Scheme};
pub use error::{Error, Result};
pub use field::ScalarField;
pub use lipcalc::{LipCalculus, LipKind, ScaleLadder, VariationRule};
pub use space::{FiniteMetricMeasureSpace, SpaceRef};
