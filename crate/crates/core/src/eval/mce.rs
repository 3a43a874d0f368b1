//! Corruption error normalized by a baseline model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MceError {
    #[error("baseline error for '{0}' is zero; mCE is undefined")]
    ZeroBaseline(String),
    #[error("'{0}' has no baseline error")]
    MissingBaseline(String),
    #[error("baseline has '{0}' but the model has no error for it")]
    MissingModel(String),
    #[error("no corruptions given")]
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MceTable {
    /// `(corruption, mCE in percent)` in the order of the model's errors.
    pub rows: Vec<(String, f64)>,
    /// Arithmetic mean of the row values, in percent.
    pub average: f64,
}

impl MceTable {
    pub fn get(&self, corruption: &str) -> Option<f64> {
        self.rows.iter().find(|(c, _)| c == corruption).map(|r| r.1)
    }
}

/// `mCE_c = 100 · error_c / baseline_c` for every corruption `c`.
///
/// Both inputs must cover the same corruptions; errors may be fractions or
/// percentages as long as both sides use the same unit.
pub fn mce(errors: &[(String, f64)], baseline: &[(String, f64)]) -> Result<MceTable, MceError> {
    if errors.is_empty() {
        return Err(MceError::Empty);
    }
    if let Some((c, _)) = baseline.iter().find(|(c, _)| !errors.iter().any(|(e, _)| e == c)) {
        return Err(MceError::MissingModel(c.clone()));
    }
    let mut rows = Vec::with_capacity(errors.len());
    for (c, err) in errors {
        let base = baseline
            .iter()
            .find(|(b, _)| b == c)
            .map(|b| b.1)
            .ok_or_else(|| MceError::MissingBaseline(c.clone()))?;
        if base == 0.0 {
            return Err(MceError::ZeroBaseline(c.clone()));
        }
        rows.push((c.clone(), 100.0 * err / base));
    }
    let average = rows.iter().map(|r| r.1).sum::<f64>() / rows.len() as f64;
    Ok(MceTable { rows, average })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(v: &[(&str, f64)]) -> Vec<(String, f64)> {
        v.iter().map(|(c, e)| (c.to_string(), *e)).collect()
    }

    #[test]
    fn published_cells() {
        let t = mce(&pairs(&[("Brightness", 4.2), ("Motion Blur", 15.6)]), &pairs(&[
            ("Brightness", 84.9),
            ("Motion Blur", 20.1),
        ]))
        .unwrap();
        assert!((t.get("Brightness").unwrap() - 4.947).abs() < 1e-3);
        assert!((t.get("Motion Blur").unwrap() - 77.61).abs() < 1e-2);
    }

    #[test]
    fn self_baseline_is_one_hundred() {
        let e = pairs(&[("a", 0.3), ("b", 0.12), ("c", 0.9)]);
        let t = mce(&e, &e).unwrap();
        assert!(t.rows.iter().all(|r| (r.1 - 100.0).abs() < 1e-12));
        assert!((t.average - 100.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let e = pairs(&[("a", 0.3)]);
        assert_eq!(mce(&e, &pairs(&[("a", 0.0)])), Err(MceError::ZeroBaseline("a".into())));
        assert_eq!(mce(&e, &pairs(&[("b", 0.1)])), Err(MceError::MissingModel("b".into())));
        assert_eq!(mce(&e, &[]), Err(MceError::MissingBaseline("a".into())));
        assert_eq!(mce(&[], &[]), Err(MceError::Empty));
    }
}
