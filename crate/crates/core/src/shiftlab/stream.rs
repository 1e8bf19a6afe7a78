use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Rng;
use crate::shiftlab::Dataset;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamOrder {
    Iid,
    /// Runs of same-class samples.
    ClassCorrelated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub order: StreamOrder,
    #[serde(default = "one")]
    pub run_length: usize,
    /// Class proportions of the stream. `None` keeps every sample.
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
    /// Number of samples. `None` means as many as the weights allow.
    #[serde(default)]
    pub length: Option<usize>,
    #[serde(default = "sixteen")]
    pub batch_size: usize,
}

fn one() -> usize {
    1
}

fn sixteen() -> usize {
    16
}

impl StreamSpec {
    pub fn iid(batch_size: usize) -> Self {
        StreamSpec {
            order: StreamOrder::Iid,
            run_length: 1,
            class_weights: None,
            length: None,
            batch_size,
        }
    }

    pub fn correlated(run_length: usize, batch_size: usize) -> Self {
        StreamSpec {
            order: StreamOrder::ClassCorrelated,
            run_length,
            ..StreamSpec::iid(batch_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_length == 0 {
            return Err(Error::invalid("run length must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if let Some(w) = &self.class_weights {
            let sum: f64 = w.iter().sum();
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("class weights {w:?} must be nonnegative and sum to 1")));
            }
        }
        Ok(())
    }
}

/// Per-class sample counts following `weights`, largest-remainder rounding.
fn class_quota(weights: &[f64], length: usize) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * length as f64).collect();
    let mut quota: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = length - quota.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &c in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        if weights[c] > 0.0 {
            quota[c] += 1;
            rest -= 1;
        }
    }
    quota
}

/// Orders `data` per `spec` (class identity from the true labels) and
/// slices it into batches; the last batch may be short.
pub fn make_stream(data: &Dataset, spec: &StreamSpec, rng: &mut Rng) -> Result<Vec<Dataset>> {
    spec.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("cannot stream an empty dataset"));
    }
    let classes = data.truth.iter().max().map_or(0, |m| m + 1);
    let classes = spec.class_weights.as_ref().map_or(classes, |w| w.len().max(classes));
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in data.truth.iter().enumerate() {
        pools[y].push(i);
    }
    for p in &mut pools {
        rng.shuffle(p);
    }

    if let Some(w) = &spec.class_weights {
        if w.len() != classes {
            return Err(Error::invalid(format!(
                "{} class weights for {classes} classes",
                w.len()
            )));
        }
        let length = match spec.length {
            Some(n) => n,
            // largest stream the pools can support at these proportions
            None => w
                .iter()
                .zip(&pools)
                .filter(|(&wc, _)| wc > 0.0)
                .map(|(&wc, p)| (p.len() as f64 / wc).floor() as usize)
                .min()
                .unwrap_or(0),
        };
        let quota = class_quota(w, length);
        for (c, (q, p)) in quota.iter().zip(&mut pools).enumerate() {
            if *q > p.len() {
                return Err(Error::invalid(format!(
                    "stream needs {q} samples of class {c}, only {} available",
                    p.len()
                )));
            }
            p.truncate(*q);
        }
    } else if let Some(n) = spec.length {
        if n > data.len() {
            return Err(Error::invalid(format!(
                "stream length {n} exceeds {} samples",
                data.len()
            )));
        }
        let quota = class_quota(
            &pools
                .iter()
                .map(|p| p.len() as f64 / data.len() as f64)
                .collect::<Vec<_>>(),
            n,
        );
        for (p, q) in pools.iter_mut().zip(quota) {
            p.truncate(q);
        }
    }

    let order: Vec<usize> = match spec.order {
        StreamOrder::Iid => {
            let mut all: Vec<usize> = pools.concat();
            rng.shuffle(&mut all);
            all
        }
        StreamOrder::ClassCorrelated => {
            let mut out = Vec::with_capacity(pools.iter().map(Vec::len).sum());
            let mut cursors = vec![0usize; classes];
            loop {
                let remaining: Vec<f64> = pools
                    .iter()
                    .zip(&cursors)
                    .map(|(p, &c)| (p.len() - c) as f64)
                    .collect();
                if remaining.iter().all(|&r| r == 0.0) {
                    break;
                }
                let c = rng.categorical(&remaining);
                let take = spec.run_length.min(remaining[c] as usize);
                out.extend_from_slice(&pools[c][cursors[c]..cursors[c] + take]);
                cursors[c] += take;
            }
            out
        }
    };

    Ok(order
        .chunks(spec.batch_size)
        .map(|chunk| data.select(chunk))
        .collect())
}
