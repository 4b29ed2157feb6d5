//! Adapted defenses: STRIP entropy screening, spectral-signature filtering
//! with retraining, fine-pruning, and the adaptive-attacker sweep.

mod prune;
mod spectral;
mod strip;
mod sweep;

pub use prune::{fine_prune, PruneDirection, PruneResult};
pub use spectral::{power_iteration, spectral_filter, SpectralOutcome};
pub use strip::{
    frr_threshold, normalized_entropy, strip_score, strip_screen, superpose, EntropyReport,
};
pub use sweep::{adaptive_sweep, SweepCell, SweepRow};
