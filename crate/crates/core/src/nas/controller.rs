use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::supernet::{key_stream, Binder, ParamStore};

pub const EMBEDDING_DIM: usize = 16;

const EMBEDDING_LIMIT: f64 = 1.0;

/// Input-independent policy: per decision site a trainable embedding feeding
/// a linear head whose softmax gives that site's option probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Controller {
    options: Vec<usize>,
    params: ParamStore,
}

fn site_key(site: usize, part: &str) -> String {
    format!("site{site}.{part}")
}

impl Controller {
    /// `tag` separates the random streams of controllers sharing a seed.
    pub fn new(options: Vec<usize>, seed: u64, tag: &str) -> Result<Self> {
        if let Some(site) = options.iter().position(|&o| o == 0) {
            return Err(Error::Argument(format!("controller site {site} has no options")));
        }
        let mut params = ParamStore::new();
        for (site, &n) in options.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(key_stream(&format!("{tag}.{site}")));
            let emb = (0..EMBEDDING_DIM).map(|_| rng.gen_range(-EMBEDDING_LIMIT..EMBEDDING_LIMIT)).collect();
            let limit = (6.0 / (EMBEDDING_DIM + n) as f64).sqrt();
            let w = (0..EMBEDDING_DIM * n).map(|_| rng.gen_range(-limit..limit)).collect();
            params.insert(site_key(site, "emb"), Tensor::matrix(1, EMBEDDING_DIM, emb)?);
            params.insert(site_key(site, "w"), Tensor::matrix(EMBEDDING_DIM, n, w)?);
            params.insert(site_key(site, "b"), Tensor::vector(vec![0.0; n]));
        }
        Ok(Self { options, params })
    }

    pub fn options(&self) -> &[usize] {
        &self.options
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Per-site probability vectors on `tape`, with optional additive noise
    /// on the logits. `binder` must wrap [`Self::params`].
    pub fn probabilities(&self, tape: &mut Tape, binder: &mut Binder, noise: Option<&[Vec<f64>]>) -> Result<Vec<Var>> {
        if let Some(noise) = noise {
            check_aligned("noise", &self.options, noise)?;
        }
        (0..self.options.len())
            .map(|site| {
                let emb = binder.var(tape, &site_key(site, "emb"))?;
                let w = binder.var(tape, &site_key(site, "w"))?;
                let b = binder.var(tape, &site_key(site, "b"))?;
                let z = tape.matmul(emb, w)?;
                let mut z = tape.add_bias(z, b)?;
                if let Some(noise) = noise {
                    z = tape.add_constant(z, &Tensor::vector(noise[site].clone()))?;
                }
                tape.softmax(z)
            })
            .collect()
    }

    /// Plain-valued [`Self::probabilities`].
    pub fn probabilities_values(&self, noise: Option<&[Vec<f64>]>) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let mut binder = Binder::frozen(&self.params);
        let p = self.probabilities(&mut tape, &mut binder, noise)?;
        Ok(p.iter().map(|&v| tape.value(v).data().to_vec()).collect())
    }

    /// Noise-free logits per site.
    pub fn logits(&self) -> Vec<Vec<f64>> {
        (0..self.options.len())
            .map(|site| {
                let emb = self.params.get(&site_key(site, "emb")).expect("embedding");
                let w = self.params.get(&site_key(site, "w")).expect("head");
                let b = self.params.get(&site_key(site, "b")).expect("bias");
                let n = self.options[site];
                (0..n)
                    .map(|j| b.data()[j] + (0..EMBEDDING_DIM).map(|k| emb.data()[k] * w.at(k, j)).sum::<f64>())
                    .collect()
            })
            .collect()
    }
}

pub(crate) fn check_aligned(what: &str, options: &[usize], values: &[Vec<f64>]) -> Result<()> {
    if values.len() != options.len() || values.iter().zip(options).any(|(v, &n)| v.len() != n) {
        return Err(Error::Contract(format!("{what} not aligned with controller sites")));
    }
    Ok(())
}

/// Linearly annealed Gumbel noise on controller logits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub alpha: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl NoiseSchedule {
    /// `α · max(0, 1 − i/M)`.
    pub fn scale(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return 0.0;
        }
        self.alpha * (1.0 - epoch as f64 / self.epochs as f64).max(0.0)
    }

    /// Scaled Gumbel(0, 1) samples per site; `stream` separates controllers.
    pub fn sample(&self, epoch: usize, options: &[usize], stream: u64) -> Vec<Vec<f64>> {
        let tau = self.scale(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(stream);
        options
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| {
                        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                        let g = -(-u.ln()).ln();
                        if tau == 0.0 {
                            0.0
                        } else {
                            tau * g
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Per-site argmax.
pub fn sample_choices(p: &[Vec<f64>]) -> Vec<usize> {
    p.iter().map(|v| argmax(v)).collect()
}

/// Uniformly random option per site.
pub fn random_choices(options: &[usize], rng: &mut impl Rng) -> Vec<usize> {
    options.iter().map(|&n| rng.gen_range(0..n)).collect()
}
