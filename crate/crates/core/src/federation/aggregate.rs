use crate::error::{Error, Result};
use crate::nn::ParamVector;

/// `N_k / sum_j N_j` for each participating client.
pub fn aggregation_weights(labelled_sizes: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = labelled_sizes.iter().sum();
    if total == 0 {
        return Err(Error::Protocol(
            "participating clients hold no labelled data; aggregation weights undefined".into(),
        ));
    }
    Ok(labelled_sizes
        .iter()
        .map(|&n| n as f64 / total as f64)
        .collect())
}

/// Labelled-pool-size weighted average of client parameters.
///
/// Each coordinate is clamped to the clients' coordinate range so rounding can
/// never push the average outside the convex hull.
pub fn aggregate(clients: &[(&ParamVector, u64)]) -> Result<ParamVector> {
    let (first, _) = clients
        .first()
        .ok_or_else(|| Error::Protocol("no clients to aggregate".into()))?;
    if clients.iter().any(|(p, _)| p.spec() != first.spec()) {
        return Err(Error::Protocol("clients disagree on model architecture".into()));
    }
    let sizes: Vec<u64> = clients.iter().map(|&(_, n)| n).collect();
    let weights = aggregation_weights(&sizes)?;

    let mut out = first.values().iter().map(|v| weights[0] * v).collect::<Vec<_>>();
    let mut lo = first.values().to_vec();
    let mut hi = lo.clone();
    for ((params, _), &w) in clients.iter().zip(&weights).skip(1) {
        for (((o, l), h), &v) in out.iter_mut().zip(&mut lo).zip(&mut hi).zip(params.values()) {
            *o += w * v;
            *l = l.min(v);
            *h = h.max(v);
        }
    }
    for ((o, l), h) in out.iter_mut().zip(&lo).zip(&hi) {
        *o = o.clamp(*l, *h);
    }
    ParamVector::from_values(first.spec(), out)
}
