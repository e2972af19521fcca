//! Estimation of the association between an intermittently measured,
//! error-prone time-varying exposure and a right-censored event time.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod data;
pub mod estimators;
pub mod lmm;
pub mod numerics;
pub mod par;
pub mod simulate;
pub mod study;
pub mod survival;
