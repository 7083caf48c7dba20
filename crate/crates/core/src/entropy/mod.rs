//! Probability models, rate estimation, range coding and the stream container.

pub mod bitstream;
pub mod cdf;
pub mod factorized;
pub mod laplace;
pub mod range_coder;
pub mod rate;

pub use bitstream::{pack_bitstream, unpack_bitstream, Bitstream, Header, HEADER_LEN, MAGIC, VERSION};
pub use cdf::{CdfTable, DEFAULT_PRECISION};
pub use factorized::FactorizedDensity;
pub use laplace::{laplace_cdf, laplace_pmf, laplace_table};
pub use range_coder::{ac_decode, ac_encode};
pub use rate::{bits_tape, rate_estimate};
