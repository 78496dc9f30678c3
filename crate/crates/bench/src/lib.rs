//! Shared fixtures for the kernel benchmarks.

use duforge_core::dataset::procedural_clean;
use duforge_core::Image;

/// Deterministic 8-bit clean image of side `side`.
pub fn fixture(side: usize) -> Image {
    procedural_clean(7, side, side).expect("procedural image").quantize_8bit()
}
