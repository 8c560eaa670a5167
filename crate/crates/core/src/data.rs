//! Choice observations and their attribute vectors.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One observed choice: the chosen alternative and the offered set, both as
/// indices into the universe `0..m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observation {
    pub chosen: usize,
    pub offered: Vec<usize>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DataError {
    #[error("dataset has no observations")]
    Empty,
    #[error("universe of alternatives is empty")]
    NoAlternatives,
    #[error("attribute blocks given for {found} observations, expected {expected}")]
    ObservationCount { expected: usize, found: usize },
    #[error("observation {0} offers no alternatives")]
    EmptyOffer(usize),
    #[error("observation {n}: alternative {alt} is outside the universe of {m}")]
    UnknownAlternative { n: usize, alt: usize, m: usize },
    #[error("observation {n}: alternative {alt} is offered twice")]
    DuplicateOffer { n: usize, alt: usize },
    #[error("observation {n}: chosen alternative {chosen} is not offered")]
    ChosenNotOffered { n: usize, chosen: usize },
    #[error("observation {n}: expected {expected} attribute values, found {found}")]
    AttributeShape { n: usize, expected: usize, found: usize },
    #[error("observation {n}: non-finite attribute value")]
    NonFinite { n: usize },
}

/// `N` observations over a universe of `m` alternatives with `p` attributes.
/// Attributes of observation `n` are stored row-major, one row per offered
/// alternative in the order of `offered`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceDataset {
    num_alternatives: usize,
    num_attributes: usize,
    observations: Vec<Observation>,
    attributes: Vec<Vec<f64>>,
    chosen_slot: Vec<usize>,
}

impl ChoiceDataset {
    pub fn new(
        num_alternatives: usize,
        num_attributes: usize,
        observations: Vec<Observation>,
        attributes: Vec<Vec<f64>>,
    ) -> Result<Self, DataError> {
        if observations.is_empty() {
            return Err(DataError::Empty);
        }
        if num_alternatives == 0 {
            return Err(DataError::NoAlternatives);
        }
        if attributes.len() != observations.len() {
            return Err(DataError::ObservationCount {
                expected: observations.len(),
                found: attributes.len(),
            });
        }
        let mut seen = vec![usize::MAX; num_alternatives];
        let mut chosen_slot = Vec::with_capacity(observations.len());
        for (n, (obs, attrs)) in observations.iter().zip(&attributes).enumerate() {
            if obs.offered.is_empty() {
                return Err(DataError::EmptyOffer(n));
            }
            for &alt in &obs.offered {
                if alt >= num_alternatives {
                    return Err(DataError::UnknownAlternative {
                        n,
                        alt,
                        m: num_alternatives,
                    });
                }
                if seen[alt] == n {
                    return Err(DataError::DuplicateOffer { n, alt });
                }
                seen[alt] = n;
            }
            let slot = obs
                .offered
                .iter()
                .position(|&a| a == obs.chosen)
                .ok_or(DataError::ChosenNotOffered { n, chosen: obs.chosen })?;
            chosen_slot.push(slot);
            let expected = obs.offered.len() * num_attributes;
            if attrs.len() != expected {
                return Err(DataError::AttributeShape {
                    n,
                    expected,
                    found: attrs.len(),
                });
            }
            if attrs.iter().any(|v| !v.is_finite()) {
                return Err(DataError::NonFinite { n });
            }
        }
        Ok(Self {
            num_alternatives,
            num_attributes,
            observations,
            attributes,
            chosen_slot,
        })
    }

    pub fn num_observations(&self) -> usize {
        self.observations.len()
    }

    pub fn num_alternatives(&self) -> usize {
        self.num_alternatives
    }

    pub fn num_attributes(&self) -> usize {
        self.num_attributes
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn observation(&self, n: usize) -> &Observation {
        &self.observations[n]
    }

    /// Row-major `|S_n| x p` attribute block of observation `n`.
    pub fn attributes(&self, n: usize) -> &[f64] {
        &self.attributes[n]
    }

    /// Attribute vector of the alternative in position `slot` of `offered`.
    pub fn attribute_row(&self, n: usize, slot: usize) -> &[f64] {
        let p = self.num_attributes;
        &self.attributes[n][slot * p..(slot + 1) * p]
    }

    /// Position of the chosen alternative within `offered`.
    pub fn chosen_slot(&self, n: usize) -> usize {
        self.chosen_slot[n]
    }

    /// Total number of offered alternatives over all observations (`Z`).
    pub fn total_offered(&self) -> usize {
        self.observations.iter().map(|o| o.offered.len()).sum()
    }

    /// Utilities `beta^T a_nj` in offered order.
    pub fn utilities(&self, beta: &[f64], n: usize) -> Vec<f64> {
        let p = self.num_attributes;
        if p == 0 {
            return vec![0.0; self.observations[n].offered.len()];
        }
        self.attributes[n].chunks(p).map(|row| dot(row, beta)).collect()
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(chosen: usize, offered: &[usize]) -> Observation {
        Observation {
            chosen,
            offered: offered.to_vec(),
        }
    }

    #[test]
    fn valid_dataset_exposes_rows_in_offered_order() {
        let d = ChoiceDataset::new(
            3,
            2,
            vec![obs(2, &[0, 2]), obs(1, &[1])],
            vec![vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0]],
        )
        .unwrap();
        assert_eq!(d.attribute_row(0, 1), &[3.0, 4.0]);
        assert_eq!(d.chosen_slot(0), 1);
        assert_eq!(d.total_offered(), 3);
        assert_eq!(d.utilities(&[1.0, -1.0], 0), vec![-1.0, -1.0]);
    }

    #[test]
    fn chosen_must_be_offered() {
        let err = ChoiceDataset::new(3, 1, vec![obs(2, &[0, 1])], vec![vec![0.0, 0.0]]).unwrap_err();
        assert_eq!(err, DataError::ChosenNotOffered { n: 0, chosen: 2 });
    }

    #[test]
    fn malformed_inputs_are_rejected() {
        assert_eq!(
            ChoiceDataset::new(3, 1, vec![obs(0, &[])], vec![vec![]]).unwrap_err(),
            DataError::EmptyOffer(0)
        );
        assert_eq!(
            ChoiceDataset::new(3, 1, vec![obs(0, &[0, 0])], vec![vec![0.0, 0.0]]).unwrap_err(),
            DataError::DuplicateOffer { n: 0, alt: 0 }
        );
        assert_eq!(
            ChoiceDataset::new(3, 1, vec![obs(0, &[0, 5])], vec![vec![0.0, 0.0]]).unwrap_err(),
            DataError::UnknownAlternative { n: 0, alt: 5, m: 3 }
        );
        assert_eq!(
            ChoiceDataset::new(3, 2, vec![obs(0, &[0])], vec![vec![0.0]]).unwrap_err(),
            DataError::AttributeShape { n: 0, expected: 2, found: 1 }
        );
        assert_eq!(
            ChoiceDataset::new(3, 1, vec![obs(0, &[0])], vec![vec![f64::NAN]]).unwrap_err(),
            DataError::NonFinite { n: 0 }
        );
        assert_eq!(ChoiceDataset::new(3, 1, vec![], vec![]).unwrap_err(), DataError::Empty);
    }
}
