use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{train_epoch, Model, SgdConfig};
use crate::rng::RngStream;

/// `epochs` shuffled mini-batch SGD passes over the device's samples,
/// starting from the received global model.
pub fn local_update(
    global: &Model,
    ds: &Dataset,
    indices: &[usize],
    epochs: usize,
    sgd: SgdConfig,
    rng: &mut RngStream,
) -> Result<Model> {
    if epochs == 0 {
        return Err(Error::param("local epochs must be >= 1"));
    }
    let mut model = global.clone();
    for _ in 0..epochs {
        train_epoch(&mut model, ds, indices, sgd, rng)?;
    }
    Ok(model)
}

/// Sample-count-weighted parameter mean.
pub fn fedavg(models: &[&Model], weights: &[usize]) -> Result<Model> {
    if models.is_empty() {
        return Err(Error::Contract("fedavg of zero models".into()));
    }
    if models.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} models but {} weights",
            models.len(),
            weights.len()
        )));
    }
    let shape = |m: &Model| (m.w1.dim(), m.b1.dim(), m.w2.dim(), m.b2.dim());
    let reference = shape(models[0]);
    if models.iter().any(|m| shape(m) != reference) {
        return Err(Error::Contract("fedavg over mismatched shapes".into()));
    }
    let total: usize = weights.iter().sum();
    if total == 0 {
        return Err(Error::Contract("fedavg weights sum to zero".into()));
    }
    if models.len() == 1 {
        return Ok(models[0].clone());
    }
    let mut out = Model::zeros();
    for (m, &w) in models.iter().zip(weights) {
        out.add_scaled(w as f64 / total as f64, m);
    }
    Ok(out)
}
