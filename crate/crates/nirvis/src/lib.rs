//! NIR-to-VIS face matching toolkit.
//!
//! Matches near-infrared (NIR) probe faces against visible-spectrum (VIS)
//! galleries using two independent, composable techniques:
//!
//! * **Cross-spectral hallucination** — small per-channel fully-convolutional
//!   networks translate a NIR face into a VIS-looking image before it is fed
//!   to an off-the-shelf VIS feature extractor ([`net`], [`mining`],
//!   [`blend`]).
//! * **Low-rank embedding** — a square linear transform learned with a
//!   concave-convex procedure on a nuclear-norm objective pulls NIR and VIS
//!   features of the same subject into a common low-dimensional subspace
//!   ([`lowrank`]).
//!
//! The feature extractor itself is treated as a black box: deep features are
//! ingested from files ([`features`]), reduced with PCA ([`pca`]) and matched
//! by cosine similarity ([`matcher`]). The [`pipeline`] module wires the whole
//! experiment graph together; the `nirvis` binary exposes it as subcommands.
//!
//! Each major capability has a runnable example under `examples/`.

pub mod blend;
pub mod color;
pub mod container;
pub mod error;
pub mod features;
pub mod lowrank;
pub mod matcher;
pub mod mining;
pub mod net;
pub mod pca;
pub mod pipeline;
pub mod raster;
pub mod register;

pub use error::{Error, Result};
