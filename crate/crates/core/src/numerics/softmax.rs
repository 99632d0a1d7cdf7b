use crate::error::{Error, Result};

/// Softmax over the `valid` entries of `logits`; masked entries come out as exactly 0.
pub fn masked_row_softmax(logits: &[f64], valid: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != valid.len() {
        return Err(Error::shape("masked_row_softmax", logits.len(), valid.len()));
    }
    let mut out = logits.to_vec();
    softmax_in_place(&mut out, valid)?;
    Ok(out)
}

pub(crate) fn softmax_in_place(values: &mut [f64], valid: &[bool]) -> Result<()> {
    let max = values
        .iter()
        .zip(valid)
        .filter(|(_, &ok)| ok)
        .map(|(&x, _)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::EmptyAttentionSupport);
    }
    let mut sum = 0.0;
    for (x, &ok) in values.iter_mut().zip(valid) {
        if ok {
            *x = (*x - max).exp();
            sum += *x;
        } else {
            *x = 0.0;
        }
    }
    for x in values.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// Plain softmax over every entry of `values`.
pub(crate) fn softmax_all(values: &mut [f64]) {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in values.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in values.iter_mut() {
        *x /= sum;
    }
}

/// Backward of softmax: given probabilities `p` and upstream `dp`, returns dlogits.
pub(crate) fn softmax_backward(p: &[f64], dp: &[f64], out: &mut [f64]) {
    let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(dp) {
        *o = pi * (gi - inner);
    }
}
