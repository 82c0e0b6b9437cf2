use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::kernels::log_sum_exp;

/// Log-softmax over `logits` with `blocked` ids removed (they get `-inf`).
pub fn masked_log_softmax(logits: &[f64], blocked: &[usize]) -> Result<Vec<f64>> {
    let mut row = logits.to_vec();
    for &b in blocked {
        if let Some(x) = row.get_mut(b) {
            *x = f64::NEG_INFINITY;
        }
    }
    let lse = log_sum_exp(&row);
    if lse == f64::NEG_INFINITY {
        return Err(Error::AllBlocked);
    }
    Ok(row.into_iter().map(|x| x - lse).collect())
}

/// The renormalised nucleus: `(token, probability)` in descending probability,
/// ties by ascending id.
pub fn nucleus_probs(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    blocked: &[usize],
) -> Result<Vec<(usize, f64)>> {
    assert!(temperature > 0.0, "temperature must be positive");
    let scaled: Vec<f64> = logits.iter().map(|x| x / temperature).collect();
    let logp = masked_log_softmax(&scaled, blocked)?;
    let mut order: Vec<(usize, f64)> = logp
        .iter()
        .enumerate()
        .filter(|(_, lp)| lp.is_finite())
        .map(|(i, lp)| (i, lp.exp()))
        .collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep = 0;
    let mut mass = 0.0;
    for (_, p) in &order {
        keep += 1;
        mass += p;
        if mass >= top_p {
            break;
        }
    }
    order.truncate(keep);
    for e in &mut order {
        e.1 /= mass;
    }
    Ok(order)
}

/// Samples one token: block, temper, keep the top-p nucleus, renormalise, draw.
pub fn sample_next<R: Rng + ?Sized>(
    logits: &[f64],
    temperature: f64,
    top_p: f64,
    blocked: &[usize],
    rng: &mut R,
) -> Result<usize> {
    let nucleus = nucleus_probs(logits, temperature, top_p, blocked)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(tok, p) in &nucleus {
        acc += p;
        if u < acc {
            return Ok(tok);
        }
    }
    Ok(nucleus.last().expect("non-empty nucleus").0)
}
