//! Prototype construction and the cosine/softmax metric head.

use ndarray::Array2;

use crate::autodiff::{Tape, TensorError, Var};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before the logarithm.
pub const PROB_FLOOR: f64 = 1e-300;

/// Class prototypes (`way × dim`) as the mean of each class's `shot` support
/// rows. `support` must be class-major.
pub fn prototypes(tape: &mut Tape<'_>, support: Var, way: usize, shot: usize) -> Result<Var> {
    if support.rows() != way * shot || shot == 0 {
        return Err(Error::config(format!(
            "support block has {} rows, expected {way}×{shot}",
            support.rows()
        )));
    }
    let mut avg = Array2::zeros((way, way * shot));
    for j in 0..way {
        for i in 0..shot {
            avg[[j, j * shot + i]] = 1.0 / shot as f64;
        }
    }
    let avg = tape.constant(avg)?;
    Ok(tape.matmul(avg, support)?)
}

/// `temperature · cos(query_x, proto_j)` for every query/prototype pair.
///
/// `query_nodes` names the graph node of each query row for error reports.
pub fn cosine_similarities(
    tape: &mut Tape<'_>,
    queries: Var,
    protos: Var,
    temperature: f64,
    query_nodes: &[usize],
) -> Result<Var> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::config("temperature must be positive"));
    }
    let q = tape.l2_row_normalize(queries).map_err(|e| match e {
        TensorError::ZeroNorm { row } => Error::config(format!(
            "query node {} has a zero-norm embedding (collapsed encoder)",
            query_nodes.get(row).copied().unwrap_or(row)
        )),
        other => other.into(),
    })?;
    let c = tape.l2_row_normalize(protos).map_err(|e| match e {
        TensorError::ZeroNorm { row } => Error::config(format!(
            "prototype of local class {row} has zero norm (collapsed encoder)"
        )),
        other => other.into(),
    })?;
    let ct = tape.transpose(c)?;
    let cos = tape.matmul(q, ct)?;
    Ok(tape.scale(cos, temperature)?)
}

/// Row softmax of a similarity block.
pub fn metric_probabilities(tape: &mut Tape<'_>, block: Var) -> Result<Var> {
    Ok(tape.row_softmax(block)?)
}

/// `-mean_x log p(true class of x)`. True-class probabilities below
/// [`PROB_FLOOR`] are clamped, with a warning.
pub fn nll_loss(tape: &mut Tape<'_>, probs: Var, labels: &[usize]) -> Result<Var> {
    if labels.len() != probs.rows() {
        return Err(Error::config(format!(
            "{} labels for {} probability rows",
            labels.len(),
            probs.rows()
        )));
    }
    let mut onehot = Array2::zeros(probs.shape());
    for (r, &l) in labels.iter().enumerate() {
        if l >= probs.cols() {
            return Err(Error::config(format!(
                "label {l} out of range for {} classes",
                probs.cols()
            )));
        }
        onehot[[r, l]] = 1.0;
    }
    let onehot = tape.constant(onehot)?;
    let picked = tape.mul(probs, onehot)?;
    let picked = tape.row_sum(picked)?;
    let clamped = tape.value(picked).iter().filter(|&&p| p < PROB_FLOOR).count();
    if clamped > 0 {
        log::warn!("{clamped} true-class probabilities below {PROB_FLOOR:e} were clamped (divergence?)");
    }
    let picked = tape.clamp_min(picked, PROB_FLOOR)?;
    let logs = tape.log(picked)?;
    let mean = tape.mean(logs)?;
    Ok(tape.scale(mean, -1.0)?)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(probs: &Array2<f64>) -> Vec<usize> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |best, (j, &v)| if v > best.1 { (j, v) } else { best },
                )
                .0
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let pred = argmax_rows(probs);
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_shot_prototype_is_the_support_row() {
        let mut t = Tape::new();
        let s = t.constant(array![[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let p = prototypes(&mut t, s, 2, 1).unwrap();
        assert_eq!(t.value(p), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn two_shot_midpoint() {
        let mut t = Tape::new();
        let s = t.constant(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let p = prototypes(&mut t, s, 1, 2).unwrap();
        assert_eq!(t.value(p), &array![[0.5, 0.5]]);
    }

    #[test]
    fn prototypes_match_columnwise_average() {
        let (way, shot, dim) = (3, 5, 4);
        let s = random(way * shot, dim, 1);
        let mut t = Tape::new();
        let sv = t.constant(s.clone()).unwrap();
        let p = prototypes(&mut t, sv, way, shot).unwrap();
        for j in 0..way {
            for d in 0..dim {
                let mut total = 0.0;
                for i in 0..shot {
                    total += s[[j * shot + i, d]];
                }
                assert!((t.value(p)[[j, d]] - total / shot as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn self_and_orthogonal_similarity() {
        let mut t = Tape::new();
        let q = t.constant(array![[2.0, 0.0]]).unwrap();
        let c = t.constant(array![[5.0, 0.0], [0.0, 3.0]]).unwrap();
        let s = cosine_similarities(&mut t, q, c, 10.0, &[0]).unwrap();
        assert!((t.value(s)[[0, 0]] - 10.0).abs() < 1e-12);
        assert!(t.value(s)[[0, 1]].abs() < 1e-12);
    }

    #[test]
    fn cosine_matches_brute_force() {
        let qm = random(3, 4, 2);
        let cm = random(2, 4, 3);
        let mut t = Tape::new();
        let q = t.constant(qm.clone()).unwrap();
        let c = t.constant(cm.clone()).unwrap();
        let s = cosine_similarities(&mut t, q, c, 1.0, &[0, 1, 2]).unwrap();
        for x in 0..3 {
            for j in 0..2 {
                let (a, b) = (qm.row(x), cm.row(j));
                let want = a.dot(&b) / (a.dot(&a).sqrt() * b.dot(&b).sqrt());
                assert!((t.value(s)[[x, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_norm_query_names_the_node() {
        let mut t = Tape::new();
        let q = t.constant(array![[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let c = t.constant(array![[1.0, 1.0]]).unwrap();
        let err = cosine_similarities(&mut t, q, c, 1.0, &[17, 42]).unwrap_err();
        assert!(err.to_string().contains("node 42"), "{err}");
    }

    #[test]
    fn equal_row_is_uniform_and_large_gap_saturates() {
        let mut t = Tape::new();
        let b = t.constant(array![[0.3; 5]]).unwrap();
        let p = metric_probabilities(&mut t, b).unwrap();
        assert!(t.value(p).iter().all(|v| (v - 0.2).abs() < 1e-15));
        let b = t.constant(array![[200.0, -200.0]]).unwrap();
        let p = metric_probabilities(&mut t, b).unwrap();
        assert!((t.value(p)[[0, 0]] - 1.0).abs() < 1e-15 && t.value(p)[[0, 1]] < 1e-150);
    }

    #[test]
    fn softmax_matches_brute_force() {
        let m = random(4, 5, 9) * 3.0;
        let mut t = Tape::new();
        let b = t.constant(m.clone()).unwrap();
        let p = metric_probabilities(&mut t, b).unwrap();
        for r in 0..4 {
            let z: f64 = m.row(r).iter().map(|v| v.exp()).sum();
            for j in 0..5 {
                assert!((t.value(p)[[r, j]] - m[[r, j]].exp() / z).abs() < 1e-12);
            }
            assert!((t.value(p).row(r).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_values() {
        let mut t = Tape::new();
        let p = t.constant(array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let l = nll_loss(&mut t, p, &[0, 1]).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let p = t.constant(Array2::from_elem((3, 5), 0.2)).unwrap();
        let l = nll_loss(&mut t, p, &[0, 3, 4]).unwrap();
        assert!((t.scalar(l) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_matches_brute_force() {
        let mut m = random(6, 4, 5).mapv(f64::exp);
        for mut row in m.rows_mut() {
            let s = row.sum();
            row /= s;
        }
        let labels = [0, 3, 1, 1, 2, 0];
        let mut t = Tape::new();
        let p = t.constant(m.clone()).unwrap();
        let l = nll_loss(&mut t, p, &labels).unwrap();
        let want = -labels.iter().enumerate().map(|(r, &l)| m[[r, l]].ln()).sum::<f64>() / 6.0;
        assert!((t.scalar(l) - want).abs() < 1e-12);
    }

    #[test]
    fn nll_clamps_zero_probability() {
        let mut t = Tape::new();
        let p = t.constant(array![[0.0, 1.0]]).unwrap();
        let l = nll_loss(&mut t, p, &[0]).unwrap();
        assert!((t.scalar(l) - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }
}
