//! Maturities and finite linear combinations of Dirac masses.
//!
//! Integrands, frame members and the market price of risk are all finite
//! Dirac combinations `sum_i c_i * delta_{x_i}` on the maturity interval.
//! Atom merging uses exact equality of maturity values, so configurations
//! must reuse identical maturity literals.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A point of the maturity interval `[0, T*]`.
///
/// The upper bound `T*` is configuration-dependent and enforced at config
/// validation time; the newtype itself only guards against non-finite or
/// negative values.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Maturity(f64);

impl Maturity {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() || value < 0.0 {
            return Err(Error::InvalidMaturity(value));
        }
        Ok(Maturity(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Maturity {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Maturity::new(value)
    }
}

/// Checks that a slice of maturities is pairwise distinct.
pub fn require_distinct(points: &[Maturity]) -> Result<()> {
    for (i, a) in points.iter().enumerate() {
        for b in &points[i + 1..] {
            if a.value() == b.value() {
                return Err(Error::DuplicatePoints(a.value()));
            }
        }
    }
    Ok(())
}

/// A finite signed combination of Dirac masses, `sum_i c_i * delta_{x_i}`.
///
/// Atoms are kept sorted by maturity with pairwise distinct points; the zero
/// measure is the empty atom list. Addition and scaling merge atoms at equal
/// points and drop exact zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteMeasure {
    atoms: Vec<(Maturity, f64)>,
}

impl FiniteMeasure {
    /// The zero measure.
    pub fn zero() -> Self {
        FiniteMeasure { atoms: Vec::new() }
    }

    /// A single Dirac mass `c * delta_x`.
    pub fn dirac(x: Maturity, c: f64) -> Self {
        FiniteMeasure::from_atoms(vec![(x, c)])
    }

    /// Builds a measure from raw atoms, merging duplicates and dropping zeros.
    pub fn from_atoms(atoms: Vec<(Maturity, f64)>) -> Self {
        let mut atoms = atoms;
        atoms.sort_by(|a, b| a.0.value().total_cmp(&b.0.value()));
        let mut merged: Vec<(Maturity, f64)> = Vec::with_capacity(atoms.len());
        for (x, c) in atoms {
            match merged.last_mut() {
                Some((y, d)) if y.value() == x.value() => *d += c,
                _ => merged.push((x, c)),
            }
        }
        merged.retain(|&(_, c)| c != 0.0);
        FiniteMeasure { atoms: merged }
    }

    /// Builds a measure with coefficients on a fixed point set.
    pub fn from_coeffs(points: &[Maturity], coeffs: &[f64]) -> Self {
        debug_assert_eq!(points.len(), coeffs.len());
        FiniteMeasure::from_atoms(points.iter().copied().zip(coeffs.iter().copied()).collect())
    }

    pub fn atoms(&self) -> &[(Maturity, f64)] {
        &self.atoms
    }

    pub fn is_zero(&self) -> bool {
        self.atoms.is_empty()
    }

    /// Coefficient attached to `x` (zero when `x` is not an atom).
    pub fn coefficient(&self, x: Maturity) -> f64 {
        self.atoms
            .iter()
            .find(|(y, _)| y.value() == x.value())
            .map(|&(_, c)| c)
            .unwrap_or(0.0)
    }

    pub fn scale(&self, a: f64) -> Self {
        if a == 0.0 {
            return FiniteMeasure::zero();
        }
        FiniteMeasure {
            atoms: self.atoms.iter().map(|&(x, c)| (x, a * c)).collect(),
        }
    }

    pub fn add(&self, other: &FiniteMeasure) -> Self {
        let mut atoms = self.atoms.clone();
        atoms.extend_from_slice(&other.atoms);
        FiniteMeasure::from_atoms(atoms)
    }

    pub fn sub(&self, other: &FiniteMeasure) -> Self {
        self.add(&other.scale(-1.0))
    }

    /// `self + a * other` without intermediate allocations piling up.
    pub fn add_scaled(&self, a: f64, other: &FiniteMeasure) -> Self {
        self.add(&other.scale(a))
    }

    /// Checks that every atom sits on one of the given base points.
    pub fn require_supported_on(&self, base: &[Maturity]) -> Result<()> {
        for &(x, _) in &self.atoms {
            if !base.iter().any(|b| b.value() == x.value()) {
                return Err(Error::SupportOutsideBase(x.value()));
            }
        }
        Ok(())
    }

    /// Coefficient vector of the measure against an ordered base point list.
    ///
    /// Fails if the support is not contained in the base.
    pub fn coeffs_on(&self, base: &[Maturity]) -> Result<Vec<f64>> {
        self.require_supported_on(base)?;
        Ok(base.iter().map(|&b| self.coefficient(b)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(v: f64) -> Maturity {
        Maturity::new(v).unwrap()
    }

    #[test]
    fn maturity_rejects_bad_values() {
        assert!(Maturity::new(-0.5).is_err());
        assert!(Maturity::new(f64::NAN).is_err());
        assert!(Maturity::new(f64::INFINITY).is_err());
        assert!(Maturity::new(0.0).is_ok());
    }

    #[test]
    fn atoms_merge_at_equal_points() {
        let mu = FiniteMeasure::from_atoms(vec![(m(0.5), 2.0), (m(0.25), 1.0), (m(0.5), -2.0)]);
        assert_eq!(mu.atoms().len(), 1);
        assert_eq!(mu.atoms()[0].0.value(), 0.25);
        assert_eq!(mu.atoms()[0].1, 1.0);
    }

    #[test]
    fn zero_measure_is_empty() {
        assert!(FiniteMeasure::zero().is_zero());
        assert!(FiniteMeasure::dirac(m(0.3), 1.0)
            .sub(&FiniteMeasure::dirac(m(0.3), 1.0))
            .is_zero());
        assert!(FiniteMeasure::dirac(m(0.3), 1.0).scale(0.0).is_zero());
    }

    #[test]
    fn linear_operations() {
        let mu = FiniteMeasure::dirac(m(0.2), 1.0).add(&FiniteMeasure::dirac(m(0.8), -3.0));
        let nu = mu.add_scaled(2.0, &FiniteMeasure::dirac(m(0.2), 1.0));
        assert_eq!(nu.coefficient(m(0.2)), 3.0);
        assert_eq!(nu.coefficient(m(0.8)), -3.0);
        assert_eq!(nu.coefficient(m(0.5)), 0.0);
    }

    #[test]
    fn support_check() {
        let mu = FiniteMeasure::dirac(m(0.2), 1.0);
        assert!(mu.require_supported_on(&[m(0.2), m(0.4)]).is_ok());
        assert!(matches!(
            mu.require_supported_on(&[m(0.4)]),
            Err(Error::SupportOutsideBase(_))
        ));
        let c = mu.coeffs_on(&[m(0.4), m(0.2)]).unwrap();
        assert_eq!(c, vec![0.0, 1.0]);
    }

    #[test]
    fn distinct_points_guard() {
        assert!(require_distinct(&[m(0.1), m(0.2)]).is_ok());
        assert!(require_distinct(&[m(0.1), m(0.1)]).is_err());
    }
}
