//! Parabolic optimal transport flow on bounded 1D/2D domains.
//!
//! The crate discretizes a fully nonlinear parabolic flow whose steady states
//! are optimal transport potentials for a smooth cost, together with the
//! tooling around it: c-exponential geometry, an oblique second boundary
//! condition, initial data by cost continuation, MTW-defect estimates, a
//! blow-up monitor and independent oracles for validation.

// `!(x > 0.0)` is used on purpose so that NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod cli;
pub mod cost;
pub mod diagnostics;
pub mod error;
pub mod flow;
pub mod geometry;
pub mod initdata;
pub mod linalg;
pub mod oracle;
pub mod spline;
pub mod stencil;

pub use error::{Error, Result};

/// Serialize non-finite values as JSON `null`.
pub(crate) fn serialize_inf_as_null<S: serde::Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}
