//! Independent oracles and the property suite behind `siamtpn selftest`.

pub mod gradcheck;
pub mod oracle;
pub mod suite;
