use crate::error::{Error, Result};
use crate::numerics::{Tensor, Var};

fn check_truth(y: f64) -> Result<()> {
    if y < 0.0 || !y.is_finite() {
        return Err(Error::Data(format!("ground-truth value {y} must be finite and non-negative")));
    }
    Ok(())
}

/// `Σ_j (1/m) Σ_i |ŷ_ij − y_ij| / (y_ij + 1)` over a batch of equal-length
/// rows.
pub fn loss<P: AsRef<[f64]>, T: AsRef<[f64]>>(preds: &[P], truths: &[T]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "loss needs m ≥ 1 matching rows, got {} predictions and {} truths",
            preds.len(),
            truths.len()
        )));
    }
    let m = preds.len() as f64;
    let k = truths[0].as_ref().len();
    let mut per_nutrient = vec![0.0; k];
    for (p, t) in preds.iter().zip(truths) {
        let (p, t) = (p.as_ref(), t.as_ref());
        if p.len() != k || t.len() != k {
            return Err(Error::Contract("loss rows must all have the same length".into()));
        }
        for j in 0..k {
            check_truth(t[j])?;
            per_nutrient[j] += (p[j] - t[j]).abs() / (t[j] + 1.0);
        }
    }
    Ok(per_nutrient.iter().map(|s| s / m).sum())
}

/// One sample's contribution to [`loss`] for a batch of `m`, as a graph
/// node: `(1/m) Σ_j |ŷ_j − y_j| / (y_j + 1)`.
pub fn sample_loss<'g>(pred: &Var<'g>, truth: &[f64], m: usize) -> Result<Var<'g>> {
    if pred.shape() != [truth.len()] || m == 0 {
        return Err(Error::Contract(format!(
            "sample loss: prediction {:?} vs {} truths, m = {m}",
            pred.shape(),
            truth.len()
        )));
    }
    for &y in truth {
        check_truth(y)?;
    }
    let target = Tensor::new(vec![truth.len()], truth.to_vec())?;
    let weights = Tensor::new(vec![truth.len()], truth.iter().map(|y| 1.0 / ((y + 1.0) * m as f64)).collect())?;
    Ok(pred.add_const(&target.map(|v| -v))?.abs().mul_const(&weights)?.sum_all())
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::Graph;

    #[test]
    fn hand_example_and_zero() {
        assert_eq!(loss(&[[109.0, 1.0]], &[[99.0, 0.0]]).unwrap(), 1.1);
        let y = [[3.0, 4.0, 5.0, 6.0, 7.0]];
        assert_eq!(loss(&y, &y).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        assert!(matches!(loss(&[[1.0]], &[[-1.0]]), Err(Error::Data(_))));
        let empty: [[f64; 1]; 0] = [];
        assert!(matches!(loss(&empty, &empty), Err(Error::Contract(_))));
    }

    #[test]
    fn not_homogeneous() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let y: Vec<[f64; 5]> = (0..4).map(|_| std::array::from_fn(|_| r.gen_range(0.0..50.0))).collect();
        let p: Vec<[f64; 5]> = (0..4).map(|_| std::array::from_fn(|_| r.gen_range(0.0..50.0))).collect();
        let c = 3.0;
        let ys: Vec<[f64; 5]> = y.iter().map(|v| v.map(|x| c * x)).collect();
        let ps: Vec<[f64; 5]> = p.iter().map(|v| v.map(|x| c * x)).collect();
        let (a, b) = (loss(&p, &y).unwrap(), loss(&ps, &ys).unwrap());
        assert!((b - c * a).abs() > 1e-6);
    }

    #[test]
    fn graph_loss_matches_plain_and_gradient() {
        let y = [10.0, 0.0, 3.5, 7.0, 1.0];
        let p = [12.0, -0.5, 3.0, 9.5, 1.25];
        let g = Graph::default();
        let pv = g.leaf(Tensor::new(vec![5], p.to_vec()).unwrap());
        let l = sample_loss(&pv, &y, 2).unwrap();
        let plain = loss(&[p], &[y]).unwrap() / 2.0;
        assert!((l.value().data()[0] - plain).abs() < 1e-15);
        let grad = g.backward(l).unwrap().wrt(pv).unwrap();
        for j in 0..5 {
            let expect = (p[j] - y[j]).signum() / ((y[j] + 1.0) * 2.0);
            assert_eq!(grad.data()[j], expect);
        }
    }
}
