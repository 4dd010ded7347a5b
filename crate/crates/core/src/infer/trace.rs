use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// One inference request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub id: usize,
    pub slot: u64,
    /// Index into the test set.
    pub sample: usize,
}

/// One Bernoulli(`lambda`) arrival opportunity per slot over `horizon`
/// slots, each arrival carrying a uniformly drawn test sample.
pub fn gen_trace(lambda: f64, horizon: u64, n_samples: usize, rng: &mut RngStream) -> Result<Vec<Arrival>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::param(format!("arrival rate {lambda} outside [0, 1]")));
    }
    if n_samples == 0 {
        return Err(Error::param("trace needs a non-empty test set"));
    }
    let mut out = Vec::new();
    for slot in 0..horizon {
        if rng.sample_bernoulli(lambda)? {
            let sample = rng.below(n_samples as u64) as usize;
            out.push(Arrival {
                id: out.len(),
                slot,
                sample,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_stream, StreamId};

    fn rng() -> RngStream {
        derive_stream(9, StreamId::new("infer", 0, "trace"))
    }

    #[test]
    fn extremes() {
        assert!(gen_trace(0.0, 1000, 10, &mut rng()).unwrap().is_empty());
        let all = gen_trace(1.0, 1000, 10, &mut rng()).unwrap();
        assert_eq!(all.len(), 1000);
        assert!(all.iter().enumerate().all(|(i, a)| a.slot == i as u64 && a.id == i));
        assert!(gen_trace(1.5, 10, 10, &mut rng()).is_err());
    }

    #[test]
    fn half_rate_count() {
        let t = gen_trace(0.5, 100_000, 10, &mut rng()).unwrap();
        assert!((t.len() as f64 - 50_000.0).abs() < 500.0, "{}", t.len());
        assert!(t.iter().all(|a| a.sample < 10));
    }
}
