use serde::Serialize;

use crate::decoder::{NUM_NUTRIENTS, NUTRIENTS};
use crate::error::{Error, Result};

fn check(preds: &[[f64; NUM_NUTRIENTS]], truths: &[[f64; NUM_NUTRIENTS]], j: usize) -> Result<()> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "metrics need n ≥ 1 matching rows, got {} and {}",
            preds.len(),
            truths.len()
        )));
    }
    if j >= NUM_NUTRIENTS {
        return Err(Error::Contract(format!("nutrient index {j} out of range")));
    }
    Ok(())
}

pub fn mae(preds: &[[f64; NUM_NUTRIENTS]], truths: &[[f64; NUM_NUTRIENTS]], j: usize) -> Result<f64> {
    check(preds, truths, j)?;
    let total: f64 = preds.iter().zip(truths).map(|(p, t)| (p[j] - t[j]).abs()).sum();
    Ok(total / preds.len() as f64)
}

/// `100 · MAE_j / mean(y_j)`.
pub fn mape(preds: &[[f64; NUM_NUTRIENTS]], truths: &[[f64; NUM_NUTRIENTS]], j: usize) -> Result<f64> {
    let m = mae(preds, truths, j)?;
    let mean = truths.iter().map(|t| t[j]).sum::<f64>() / truths.len() as f64;
    if mean <= 0.0 {
        return Err(Error::Division {
            nutrient: NUTRIENTS[j].to_string(),
        });
    }
    Ok(100.0 * m / mean)
}

/// Arithmetic mean of per-nutrient MAPEs.
pub fn mape_mean(mapes: &[f64]) -> f64 {
    mapes.iter().sum::<f64>() / mapes.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub n: usize,
    pub mae: [f64; NUM_NUTRIENTS],
    pub mape: [f64; NUM_NUTRIENTS],
    pub mean_mape: f64,
}

impl EvalReport {
    pub fn compute(preds: &[[f64; NUM_NUTRIENTS]], truths: &[[f64; NUM_NUTRIENTS]]) -> Result<Self> {
        let mut mae_j = [0.0; NUM_NUTRIENTS];
        let mut mape_j = [0.0; NUM_NUTRIENTS];
        for j in 0..NUM_NUTRIENTS {
            mae_j[j] = mae(preds, truths, j)?;
            mape_j[j] = mape(preds, truths, j)?;
        }
        Ok(Self {
            n: preds.len(),
            mae: mae_j,
            mape: mape_j,
            mean_mape: mape_mean(&mape_j),
        })
    }

    /// Human-readable table.
    pub fn table(&self) -> String {
        let mut s = format!("{:<10} {:>12} {:>10}\n", "nutrient", "MAE", "MAPE %");
        for j in 0..NUM_NUTRIENTS {
            s.push_str(&format!("{:<10} {:>12.4} {:>10.4}\n", NUTRIENTS[j], self.mae[j], self.mape[j]));
        }
        s.push_str(&format!("{:<10} {:>12} {:>10.4}\n", "mean", "", self.mean_mape));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(v: &[f64]) -> Vec<[f64; 5]> {
        v.iter().map(|&x| [x; 5]).collect()
    }

    #[test]
    fn hand_values() {
        let (p, t) = (rows(&[110.0, 190.0]), rows(&[100.0, 200.0]));
        assert_eq!(mae(&p, &t, 0).unwrap(), 10.0);
        assert_eq!(mape(&p, &t, 1).unwrap(), 100.0 * 10.0 / 150.0);
        assert!((mape(&p, &t, 1).unwrap() - 6.6667).abs() < 1e-4);
        let r = EvalReport::compute(&t, &t).unwrap();
        assert_eq!(r.mape, [0.0; 5]);
        assert_eq!(r.mean_mape, 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(mae(&[], &[], 0), Err(Error::Contract(_))));
        assert!(matches!(mape(&rows(&[1.0]), &rows(&[0.0]), 2), Err(Error::Division { .. })));
    }

    #[test]
    fn permutation_invariant() {
        let p = rows(&[1.0, 5.0, 2.5, 9.0]);
        let t = rows(&[2.0, 3.0, 3.5, 1.0]);
        let order = [2, 0, 3, 1];
        let pp: Vec<_> = order.iter().map(|&i| p[i]).collect();
        let tp: Vec<_> = order.iter().map(|&i| t[i]).collect();
        assert_eq!(mae(&p, &t, 0).unwrap(), mae(&pp, &tp, 0).unwrap());
    }
}
