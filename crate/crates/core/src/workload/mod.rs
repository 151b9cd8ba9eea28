//! Synthetic request traces and the step-level response-length model.
//!
//! Traces are drawn from (mixtures of) log-normal response-length models
//! whose median drifts from step to step. The planner never sees a
//! request's true length; it works from a [`LengthDistribution`] of the
//! step, conditioned on completions as they are observed, and the
//! per-request progress (`generated_len`).

mod arima;

pub use arima::{fit_predictor, Arima, ArimaOrder, Predictor};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BUCKET_WIDTH: u32 = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Waiting,
    Running,
    Done,
}

/// One prompt/response unit.
///
/// `true_total_len` includes the prompt and is hidden from the scheduler;
/// only `generated_len` is observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub prompt_len: u32,
    pub true_total_len: u32,
    pub generated_len: u32,
    pub state: RequestState,
    pub home_instance: Option<usize>,
}

impl Request {
    pub fn new(id: u64, prompt_len: u32, response_len: u32) -> Self {
        let state = if response_len == 0 {
            RequestState::Done
        } else {
            RequestState::Waiting
        };
        Request {
            id,
            prompt_len,
            true_total_len: prompt_len + response_len,
            generated_len: 0,
            state,
            home_instance: None,
        }
    }

    pub fn response_len(&self) -> u32 {
        self.true_total_len - self.prompt_len
    }

    /// True remaining decode tokens (oracle knowledge).
    pub fn true_remaining(&self) -> u32 {
        self.response_len() - self.generated_len
    }

    pub fn kv_tokens(&self) -> u64 {
        self.prompt_len as u64 + self.generated_len as u64
    }

    pub fn is_done(&self) -> bool {
        self.state == RequestState::Done
    }

    /// Decodes up to `tokens` tokens; returns how many were produced.
    pub fn advance(&mut self, tokens: u32) -> u32 {
        let n = tokens.min(self.true_remaining());
        self.generated_len += n;
        if self.generated_len == self.response_len() {
            self.state = RequestState::Done;
        }
        n
    }
}

/// Parametric length model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LengthModel {
    LogNormal { mu: f64, sigma: f64 },
    Mixture { components: Vec<MixtureComponent> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mu: f64,
    pub sigma: f64,
}

impl LengthModel {
    fn validate(&self, what: &str) -> Result<()> {
        let check = |mu: f64, sigma: f64| -> Result<()> {
            if !mu.is_finite() || !sigma.is_finite() || sigma < 0.0 {
                return Err(Error::config(format!(
                    "{what}: invalid log-normal parameters mu={mu}, sigma={sigma}"
                )));
            }
            Ok(())
        };
        match self {
            LengthModel::LogNormal { mu, sigma } => check(*mu, *sigma),
            LengthModel::Mixture { components } => {
                if components.is_empty() {
                    return Err(Error::config(format!("{what}: empty mixture")));
                }
                let mut wsum = 0.0;
                for c in components {
                    if !c.weight.is_finite() || c.weight < 0.0 {
                        return Err(Error::config(format!("{what}: invalid weight {}", c.weight)));
                    }
                    check(c.mu, c.sigma)?;
                    wsum += c.weight;
                }
                if (wsum - 1.0).abs() > 1e-9 {
                    return Err(Error::config(format!("{what}: weights sum to {wsum}, not 1")));
                }
                Ok(())
            }
        }
    }

    /// Analytic mean (before clamping and rounding).
    pub fn mean(&self) -> f64 {
        match self {
            LengthModel::LogNormal { mu, sigma } => (mu + sigma * sigma / 2.0).exp(),
            LengthModel::Mixture { components } => components
                .iter()
                .map(|c| c.weight * (c.mu + c.sigma * c.sigma / 2.0).exp())
                .sum(),
        }
    }

    fn sample<R: Rng>(&self, rng: &mut R, mu_shift: f64) -> f64 {
        let draw = |rng: &mut R, mu: f64, sigma: f64| {
            LogNormal::new(mu + mu_shift, sigma)
                .expect("validated parameters")
                .sample(rng)
        };
        match self {
            LengthModel::LogNormal { mu, sigma } => draw(rng, *mu, *sigma),
            LengthModel::Mixture { components } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = components.len() - 1;
                for (i, c) in components.iter().enumerate() {
                    acc += c.weight;
                    if u < acc {
                        pick = i;
                        break;
                    }
                }
                let c = &components[pick];
                draw(rng, c.mu, c.sigma)
            }
        }
    }
}

fn default_drift() -> f64 {
    1.0
}
fn default_max_response() -> u32 {
    32_768
}
fn default_max_prompt() -> u32 {
    4_096
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadConfig {
    pub n_requests: usize,
    pub length_model: LengthModel,
    pub prompt_len_model: LengthModel,
    /// Per-step multiplicative factor on the median response length.
    #[serde(default = "default_drift")]
    pub drift: f64,
    #[serde(default = "default_max_response")]
    pub max_response_len: u32,
    #[serde(default = "default_max_prompt")]
    pub max_prompt_len: u32,
    pub seed: u64,
}

impl WorkloadConfig {
    pub fn validate(&self) -> Result<()> {
        self.length_model.validate("workload.length_model")?;
        self.prompt_len_model.validate("workload.prompt_len_model")?;
        if !self.drift.is_finite() || self.drift <= 0.0 {
            return Err(Error::config(format!("workload.drift must be > 0, got {}", self.drift)));
        }
        if self.max_response_len == 0 || self.max_prompt_len == 0 {
            return Err(Error::config("workload length caps must be positive"));
        }
        Ok(())
    }

    /// Log-space shift applied to every component's mu at `step`.
    pub fn mu_shift(&self, step: usize) -> f64 {
        step as f64 * self.drift.ln()
    }
}

fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mix = seed ^ (step as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mix)
}

/// Draws the request batch for one step.
pub fn sample_trace(cfg: &WorkloadConfig, step: usize) -> Result<Vec<Request>> {
    cfg.validate()?;
    let mut rng = step_rng(cfg.seed, step);
    let shift = cfg.mu_shift(step);
    let base = step as u64 * cfg.n_requests as u64;
    let reqs = (0..cfg.n_requests)
        .map(|i| {
            let resp = cfg.length_model.sample(&mut rng, shift);
            let prompt = cfg.prompt_len_model.sample(&mut rng, 0.0);
            let resp = (resp.round() as u64).clamp(1, cfg.max_response_len as u64) as u32;
            let prompt = (prompt.round() as u64).clamp(1, cfg.max_prompt_len as u64) as u32;
            Request::new(base + i as u64, prompt, resp)
        })
        .collect();
    Ok(reqs)
}

/// Writes `id,prompt_len,true_total_len` rows.
pub fn trace_csv(reqs: &[Request]) -> String {
    let mut out = String::from("id,prompt_len,true_total_len\n");
    for r in reqs {
        out.push_str(&format!("{},{},{}\n", r.id, r.prompt_len, r.true_total_len));
    }
    out
}

/// Histogram of response lengths over fixed-width buckets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub bucket_width: u32,
    pub counts: Vec<u64>,
    pub total: u64,
}

impl LengthDistribution {
    pub fn empty(bucket_width: u32) -> Self {
        assert!(bucket_width > 0);
        LengthDistribution { bucket_width, counts: Vec::new(), total: 0 }
    }

    pub fn from_lengths(lengths: impl IntoIterator<Item = u32>, bucket_width: u32) -> Self {
        let mut d = Self::empty(bucket_width);
        for l in lengths {
            let b = d.bucket_of(l);
            if b >= d.counts.len() {
                d.counts.resize(b + 1, 0);
            }
            d.counts[b] += 1;
            d.total += 1;
        }
        d
    }

    pub fn bucket_of(&self, len: u32) -> usize {
        (len / self.bucket_width) as usize
    }

    pub fn midpoint(&self, bucket: usize) -> f64 {
        (bucket as f64 + 0.5) * self.bucket_width as f64
    }

    pub fn mean(&self) -> f64 {
        if self.total == 0 {
            return 0.0;
        }
        let s: f64 = self
            .counts
            .iter()
            .enumerate()
            .map(|(b, &c)| c as f64 * self.midpoint(b))
            .sum();
        s / self.total as f64
    }

    pub fn frequencies(&self) -> Vec<f64> {
        if self.total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / self.total as f64).collect()
    }

    /// Expected remaining tokens of a request that has already produced
    /// `generated` tokens, under this distribution restricted to lengths
    /// `>= generated`. Falls back to one bucket width when that mass is empty.
    pub fn expected_remaining(&self, generated: u32) -> f64 {
        let g = generated as f64;
        let w = self.bucket_width as f64;
        let mut mass = 0.0;
        let mut acc = 0.0;
        for (b, &c) in self.counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let upper = (b as f64 + 1.0) * w;
            if upper <= g {
                continue;
            }
            let mid = self.midpoint(b);
            let v = if mid > g { mid } else { (g + upper) / 2.0 };
            mass += c as f64;
            acc += c as f64 * v;
        }
        if mass == 0.0 {
            w
        } else {
            acc / mass - g
        }
    }
}

/// Removes completed requests from the distribution.
///
/// A length whose bucket is already empty decrements the nearest non-empty
/// bucket (lower index on ties); with nothing left the completion is ignored.
pub fn condition_on_completions(dist: &LengthDistribution, completed: &[u32]) -> LengthDistribution {
    let mut out = dist.clone();
    for &len in completed {
        if out.total == 0 {
            break;
        }
        let b = out.bucket_of(len);
        let target = if b < out.counts.len() && out.counts[b] > 0 {
            b
        } else {
            nearest_nonempty(&out.counts, b)
        };
        out.counts[target] -= 1;
        out.total -= 1;
    }
    out
}

fn nearest_nonempty(counts: &[u64], b: usize) -> usize {
    let mut best: Option<(usize, usize)> = None;
    for (i, &c) in counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let d = i.abs_diff(b);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.expect("total > 0 implies a non-empty bucket").1
}

/// Per-request snapshot carried inside a [`Bucket`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMember {
    pub id: u64,
    pub home: Option<usize>,
    pub prompt_len: u32,
    pub generated_len: u32,
    /// KV cache currently held on its instance (admitted and not preempted).
    #[serde(default)]
    pub resident: bool,
}

impl BucketMember {
    /// Resident KV tokens; queued requests hold none.
    pub fn kv_tokens(&self) -> u64 {
        if self.resident {
            self.context_tokens()
        } else {
            0
        }
    }

    /// Prompt plus generated tokens, resident or not.
    pub fn context_tokens(&self) -> u64 {
        self.prompt_len as u64 + self.generated_len as u64
    }
}

/// Pending requests sharing a remaining-length class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub index: usize,
    pub lower: u32,
    pub upper: u32,
    /// Remaining tokens assumed for every member (the bucket's upper bound).
    pub representative: u32,
    pub members: Vec<BucketMember>,
}

impl Bucket {
    pub fn count(&self) -> usize {
        self.members.len()
    }

    pub fn kv_tokens(&self) -> u64 {
        self.members.iter().map(BucketMember::kv_tokens).sum()
    }

    pub fn context_tokens(&self) -> u64 {
        self.members.iter().map(BucketMember::context_tokens).sum()
    }

    /// Remaining decode tokens the bucket represents.
    pub fn work(&self) -> f64 {
        self.count() as f64 * self.representative as f64
    }

    /// Splits the bucket into at most `parts` contiguous chunks of near-equal size.
    pub fn split(&self, parts: usize) -> Vec<Bucket> {
        let n = self.members.len();
        let parts = parts.clamp(1, n.max(1));
        let base = n / parts;
        let extra = n % parts;
        let mut out = Vec::with_capacity(parts);
        let mut start = 0;
        for p in 0..parts {
            let len = base + usize::from(p < extra);
            let mut b = self.clone();
            b.members = self.members[start..start + len].to_vec();
            start += len;
            out.push(b);
        }
        out
    }
}

/// Groups pending requests into remaining-length buckets using `estimate`.
pub fn bucketize_by<F>(requests: &[Request], width: u32, mut estimate: F) -> Vec<Bucket>
where
    F: FnMut(&Request) -> f64,
{
    let mut by_index: std::collections::BTreeMap<usize, Vec<BucketMember>> = Default::default();
    for r in requests.iter().filter(|r| !r.is_done()) {
        let est = estimate(r).max(0.0);
        let idx = (est / width as f64).floor() as usize;
        by_index.entry(idx).or_default().push(BucketMember {
            id: r.id,
            home: r.home_instance,
            prompt_len: r.prompt_len,
            generated_len: r.generated_len,
            resident: r.state == RequestState::Running,
        });
    }
    by_index
        .into_iter()
        .map(|(index, members)| {
            let lower = index as u32 * width;
            let upper = lower + width;
            Bucket { index, lower, upper, representative: upper, members }
        })
        .collect()
}

/// Buckets pending requests by their expected remaining length under `dist`.
pub fn bucketize(requests: &[Request], dist: &LengthDistribution) -> Vec<Bucket> {
    bucketize_by(requests, dist.bucket_width, |r| dist.expected_remaining(r.generated_len))
}
