//! Log-spectral distortion: RMS over frequency of dB differences, one term per (subject, position, ear).

use crate::error::{Error, Result};
use crate::numerics::{Graph, Var};

/// Added under the square root of the training loss so its gradient stays finite at zero error.
pub const LSD_EPS: f64 = 1e-12;

/// One term per contiguous run of `num_bins` values.
pub fn lsd_terms(pred_db: &[f64], truth_db: &[f64], num_bins: usize) -> Result<Vec<f64>> {
    if pred_db.len() != truth_db.len() || num_bins == 0 || pred_db.len() % num_bins != 0 {
        return Err(Error::Shape {
            context: "lsd".into(),
            expected: vec![truth_db.len()],
            actual: vec![pred_db.len()],
        });
    }
    Ok(pred_db
        .chunks_exact(num_bins)
        .zip(truth_db.chunks_exact(num_bins))
        .map(|(p, t)| {
            let ms = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / num_bins as f64;
            ms.sqrt()
        })
        .collect())
}

/// Mean of [`lsd_terms`].
pub fn lsd(pred_db: &[f64], truth_db: &[f64], num_bins: usize) -> Result<f64> {
    let terms = lsd_terms(pred_db, truth_db, num_bins)?;
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// Differentiable mean LSD with frequency along `freq_axis`.
pub fn lsd_loss(g: &mut Graph, pred_db: Var, truth_db: Var, freq_axis: usize) -> Var {
    let diff = g.sub(pred_db, truth_db);
    let sq = g.square(diff);
    let ms = g.mean_axis(sq, freq_axis);
    let ms = g.add_scalar(ms, LSD_EPS);
    let terms = g.sqrt(ms);
    g.mean(terms)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn identical_is_zero() {
        let v = [1.0, -2.0, 3.5, 0.0];
        assert_eq!(lsd(&v, &v, 2).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset() {
        let t = [1.0, -2.0, 3.5, 0.0, 4.0, 4.0];
        let p: Vec<f64> = t.iter().map(|v| v + 6.0).collect();
        for term in lsd_terms(&p, &t, 3).unwrap() {
            assert!((term - 6.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_rms() {
        let t = [0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        let p = [1.0, -1.0, 2.0, 0.0, 1.0, 1.0, 1.0, 4.0];
        let terms = lsd_terms(&p, &t, 4).unwrap();
        assert!((terms[0] - (6.0f64 / 4.0).sqrt()).abs() < 1e-15);
        assert!((terms[1] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        assert!(lsd(&[1.0, 2.0], &[1.0], 1).is_err());
        assert!(lsd(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], 2).is_err());
    }

    #[test]
    fn graph_loss_matches_plain() {
        let p = Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]).unwrap();
        let t = Tensor::new(&[2, 3], vec![0.0, 2.5, 3.0, 1.0, 0.0, 0.0]).unwrap();
        let mut g = Graph::inference();
        let pv = g.constant(p.clone());
        let tv = g.constant(t.clone());
        let l = lsd_loss(&mut g, pv, tv, 1);
        let plain = lsd(p.data(), t.data(), 3).unwrap();
        assert!((g.value(l).item() - plain).abs() < 1e-9);
    }
}
