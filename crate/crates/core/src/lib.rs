//! Closed-loop joint downlink/uplink channel estimation for non-reciprocal
//! RIS-assisted MIMO links.
//!
//! The base station sends pilots through the RIS, the user terminal codes and
//! returns them through the RIS, and the base station fits a fourth-order
//! Tucker model to what comes back:
//!
//! ```text
//! Q = R ×₁ H_u ×₂ H_d ×₃ S ×₄ Gᵀ + V,    G = G_dᵀ ⋄ G_uᵀ
//! ```
//!
//! [`estimators::tals_fit`] recovers `H_u`, `H_d` and `G` by alternating least
//! squares and [`estimators::krf_split`] splits `G` into `G_d` and `G_u`.
//! [`experiment`] runs seeded NMSE-versus-SNR campaigns against FDD LS and
//! LS-KRF benchmarks.

pub mod error;
pub mod estimators;
pub mod experiment;
pub mod random;
pub mod selftest;
pub mod sim;
pub mod system;
pub mod tensor;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use system::{ChannelSet, ProtocolMatrices, Snr, SystemConfig};
pub use tensor::{CMatrix, ComplexTensor, C64};
