//! Pulse-signal recovery from noisy multichannel measurements.
//!
//! A stochastic interpolant bridges the distribution of clean pulse windows
//! (`x0`) and the distribution of measured multichannel windows (`x1`).
//! Two time-conditioned networks learn the interpolant flow and the injected
//! noise (denoiser); at inference the reverse-time SDE carries a measurement
//! back to an ensemble of pulse reconstructions whose spread is scored with
//! proper scoring rules, calibration curves and a Gauge R&R decomposition.
//!
//! Module map:
//!
//! * [`signals`] windowing, FIR band-pass, power spectra, pulse-rate readout
//! * [`synth`] paired synthetic datasets with a controllable corruption
//! * [`vectorfield`] reverse-mode tape, 1-D conv network, Adam, checkpoints
//! * [`interpolant`] the linear interpolant with `gamma(t) = sqrt(2t(1-t))`
//! * [`training`] flow / denoiser / residual-correlation losses and the loop
//! * [`sampler`] drift assembly and Euler–Maruyama reverse sampling
//! * [`uq`] accuracy and predictive-uncertainty metrics
//! * [`gauge`] ANOVA Gauge R&R over ensembles
//! * [`cli`] command implementations and on-disk formats

pub mod cli;
pub mod gauge;
pub mod interpolant;
pub mod sampler;
pub mod signals;
pub mod synth;
pub mod training;
pub mod uq;
pub mod vectorfield;

pub use ndarray::Array2;

/// Deterministic RNG used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Seeded constructor for [`Rng`].
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}
