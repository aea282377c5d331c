use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

fn check_weights(weights: &[f64], classes: usize) -> Result<()> {
    if weights.len() != classes {
        return Err(Error::param(format!("{} class weights for {classes} classes", weights.len())));
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::param("class weights must be positive"));
    }
    Ok(())
}

/// `w_y · CE(y, softmax(logits))`.
pub fn classification_loss(logits: &[f64], label: usize, weights: &[f64]) -> Result<f64> {
    check_weights(weights, logits.len())?;
    if label >= logits.len() {
        return Err(Error::param(format!("label {label} out of range")));
    }
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    Ok(weights[label] * (lse - logits[label]))
}

/// Same loss recorded on a tape for a `1 × C` logit row.
pub fn classification_loss_on_tape(tape: &mut Tape, logits: Var, label: usize, weights: &[f64]) -> Result<Var> {
    let c = tape.shape(logits).1;
    check_weights(weights, c)?;
    if label >= c {
        return Err(Error::param(format!("label {label} out of range")));
    }
    let lsm = tape.log_softmax(logits);
    let picked = tape.slice_cols(lsm, label, 1);
    let loss = tape.sum(picked);
    Ok(tape.scale(loss, -weights[label]))
}

/// `w_c = n / (C · n_c)` before normalization.
pub fn class_weights_raw(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; num_classes];
    for &l in labels {
        if l >= num_classes {
            return Err(Error::Split(format!("label {l} outside {num_classes} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Split(format!("class {c} absent from the training split")));
    }
    let n = labels.len() as f64;
    Ok(counts.iter().map(|&nc| n / (num_classes as f64 * nc as f64)).collect())
}

/// Inverse-frequency weights rescaled to mean 1.
pub fn class_weights_from_split(labels: &[usize], num_classes: usize) -> Result<Vec<f64>> {
    let raw = class_weights_raw(labels, num_classes)?;
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        assert!(classification_loss(&[50.0, 0.0], 0, &[1.0, 1.0]).unwrap() < 1e-20);
        assert!((classification_loss(&[0.3, 0.3], 1, &[1.0, 1.0]).unwrap() - 2f64.ln()).abs() < 1e-12);
        let l = [0.2, -1.3];
        let plain = classification_loss(&l, 0, &[1.0, 1.0]).unwrap();
        assert!((classification_loss(&l, 0, &[2.0, 1.0]).unwrap() - 2.0 * plain).abs() < 1e-12);
        assert!(classification_loss(&l, 0, &[0.0, 1.0]).is_err());
        assert!(classification_loss(&l, 2, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn tape_loss_matches() {
        let mut t = Tape::new();
        let v = t.constant(ndarray::array![[0.5, 1.5, -0.2]]);
        let l = classification_loss_on_tape(&mut t, v, 2, &[1.0, 0.5, 2.0]).unwrap();
        let direct = classification_loss(&[0.5, 1.5, -0.2], 2, &[1.0, 0.5, 2.0]).unwrap();
        assert!((t.scalar(l) - direct).abs() < 1e-12);
    }

    #[test]
    fn weight_examples() {
        assert_eq!(class_weights_from_split(&[0, 1, 0, 1], 2).unwrap(), vec![1.0, 1.0]);
        let mut labels = vec![0; 339];
        labels.extend(vec![1; 136]);
        let raw = class_weights_raw(&labels, 2).unwrap();
        assert!((raw[0] - 475.0 / 678.0).abs() < 1e-12);
        assert!((raw[1] - 475.0 / 272.0).abs() < 1e-12);
        let w = class_weights_from_split(&labels, 2).unwrap();
        assert!(((w[0] + w[1]) / 2.0 - 1.0).abs() < 1e-12);
        assert!((w[1] / w[0] - 339.0 / 136.0).abs() < 1e-12);
        let mut three = vec![0; 350];
        three.extend(vec![1; 78]);
        three.extend(vec![2; 47]);
        let w = class_weights_from_split(&three, 3).unwrap();
        assert!((w[0] * 350.0 - w[1] * 78.0).abs() < 1e-9 && (w[1] * 78.0 - w[2] * 47.0).abs() < 1e-9);
        assert!(matches!(class_weights_from_split(&[0, 0], 2), Err(crate::Error::Split(_))));
    }
}
