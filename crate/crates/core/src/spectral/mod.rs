//! Closed-form spectra of single-channel circular convolutions, the gap and
//! cross-layer bounds derived from them, and spectral-norm clipping.

mod bounds;
mod circulant;
mod clip;

pub use bounds::{
    corollary_gap_bound, lemma_gap_bound, theorem_cross_bound, verify_circulant_bounds,
    run_bound_trials, BoundRecord, BoundReport, BoundTrialSummary, CorollaryRecord, TheoremRecord, BOUND_SLACK,
};
pub use circulant::{autocorrelation_coeffs, circulant_spectrum, fourier_basis_vector, CirculantSpectrum};
pub use clip::{clip_spectral_norm, ClipConfig, ClipReport};
pub use crate::numerics::SpectralState;
