//! Moves a synthesized expression from the template onto a reconstructed
//! identity by plain vertex-difference addition.

use crate::error::{Error, Result};
use crate::geom::{apply, diff, DeformationField, Mesh};

pub const MAX_INTENSITY: f64 = 1.5;

/// Expression displacement of `synthetic` relative to `template`.
pub fn compute_delta(synthetic: &Mesh, template: &Mesh) -> Result<DeformationField> {
    diff(synthetic, template)
}

/// `reconstructed + intensity * delta`.
pub fn transfer(reconstructed: &Mesh, delta: &DeformationField, intensity: f64) -> Result<Mesh> {
    check_intensity(intensity)?;
    if intensity == 1.0 {
        apply(reconstructed, delta)
    } else {
        apply(reconstructed, &delta.scaled(intensity))
    }
}

pub fn check_intensity(intensity: f64) -> Result<()> {
    if !(0.0..=MAX_INTENSITY).contains(&intensity) {
        return Err(Error::OutOfRange {
            field: "intensity",
            value: intensity,
        });
    }
    Ok(())
}
