//! Timing of the grouped self-attention under two schedules: the fixed-size
//! subgroup batch used by the network, and a loop over the variable-length
//! groups themselves.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, iasa, AttentionWeights};
use crate::autograd::Eager;
use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::tensor::{matmul, Tensor};
use crate::token_agg::{build_grouping, TokenGrouping};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchMode {
    Subgrouped,
    NaiveGroups,
}

impl FromStr for BenchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "subgrouped" => Ok(Self::Subgrouped),
            "naive-groups" => Ok(Self::NaiveGroups),
            _ => Err(Error::Usage(format!("unknown bench mode {s:?}"))),
        }
    }
}

impl fmt::Display for BenchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Subgrouped => "subgrouped",
            Self::NaiveGroups => "naive-groups",
        })
    }
}

/// Grouped self-attention computed one group at a time.
///
/// Each group's queries attend to every key slot any of them can reach, and
/// slots outside a query's own subgroup and its successor are masked. The
/// result equals [`iasa`] up to rounding, but the score matrix of a group
/// grows with the square of its size.
pub fn iasa_naive(x: &Tensor, grouping: &TokenGrouping, w: &AttentionWeights) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let (gs, n_sub) = (grouping.g_s, grouping.n_sub);
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    let mut out = Tensor::zeros(&[n, d]);

    let mut start = 0;
    while start < n {
        let label = grouping.labels[grouping.perm[start]];
        let mut end = start;
        while end < n && grouping.labels[grouping.perm[end]] == label {
            end += 1;
        }
        let reach = |s: usize| [s / gs, (s / gs + 1) % n_sub];
        let keys: Vec<usize> = (start..end)
            .flat_map(reach)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .flat_map(|sub| sub * gs..(sub + 1) * gs)
            .filter(|&s| !grouping.pad_mask[s])
            .collect();
        let mut blocked = Vec::with_capacity((end - start) * keys.len());
        for s in start..end {
            let own = reach(s);
            blocked.extend(keys.iter().map(|&ks| !own.contains(&(ks / gs))));
        }
        let rows = |t: &Tensor, slots: &[usize]| -> Result<Tensor> {
            let idx: Vec<usize> = slots.iter().map(|&s| grouping.perm[s]).collect();
            t.gather_rows(&idx)?.into_reshape(&[1, slots.len(), d])
        };
        let qs: Vec<usize> = (start..end).collect();
        let o = attend(
            &mut Eager,
            &rows(&q, &qs)?,
            &rows(&k, &keys)?,
            &rows(&v, &keys)?,
            w.heads,
            Some(&blocked),
        )?;
        let od = o.data();
        let dst = out.data_mut();
        for (i, s) in (start..end).enumerate() {
            let t = grouping.perm[s];
            dst[t * d..(t + 1) * d].copy_from_slice(&od[i * d..(i + 1) * d]);
        }
        start = end;
    }
    matmul(&out, &w.w_out)
}

/// Labels for `n` tokens over `m` groups with a `major` fraction of the
/// tokens in group 0 and the rest spread uniformly over the others.
pub fn skewed_labels(n: usize, m: usize, major: f64, rng: &mut impl Rng) -> Vec<usize> {
    let big = if m <= 1 {
        n
    } else {
        ((n as f64) * major).round() as usize
    };
    let mut labels: Vec<usize> = (0..n)
        .map(|i| if i < big { 0 } else { rng.gen_range(1..m) })
        .collect();
    labels.shuffle(rng);
    labels
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    pub mode: BenchMode,
    /// Wall time of each timed run, in seconds.
    pub samples: Vec<f64>,
    pub output: Tensor,
}

impl BenchReport {
    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.samples.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.samples.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl fmt::Display for BenchReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "mode={} samples={} mean_ms={:.3} min_ms={:.3} max_ms={:.3}",
            self.mode,
            self.samples.len(),
            self.mean() * 1e3,
            self.min() * 1e3,
            self.max() * 1e3
        )
    }
}

/// Random tokens, weights and a skewed grouping for a `h × w` feature map.
pub struct BenchCase {
    pub x: Tensor,
    pub grouping: TokenGrouping,
    pub weights: AttentionWeights,
}

impl BenchCase {
    pub fn new(cfg: &ModelConfig, h: usize, w: usize, major: f64, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if h == 0 || w == 0 {
            return Err(Error::Usage("bench size must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = h * w;
        let x = Tensor::rand_uniform(&[n, cfg.dim], -1.0, 1.0, &mut rng);
        let labels = skewed_labels(n, cfg.centers, major, &mut rng);
        let grouping = build_grouping(&labels, cfg.group_size)?;
        let weights = AttentionWeights::init(cfg.dim, cfg.heads, &mut rng)?;
        Ok(Self { x, grouping, weights })
    }

    pub fn run_once(&self, mode: BenchMode) -> Result<Tensor> {
        match mode {
            BenchMode::Subgrouped => iasa(&self.x, &self.grouping, &self.weights),
            BenchMode::NaiveGroups => iasa_naive(&self.x, &self.grouping, &self.weights),
        }
    }

    pub fn run(&self, mode: BenchMode, warmups: usize, samples: usize) -> Result<BenchReport> {
        let mut output = None;
        for _ in 0..warmups {
            output = Some(self.run_once(mode)?);
        }
        let mut times = Vec::with_capacity(samples);
        for _ in 0..samples {
            let t0 = Instant::now();
            let o = self.run_once(mode)?;
            times.push(t0.elapsed().as_secs_f64());
            output = Some(o);
        }
        let output = match output {
            Some(o) => o,
            None => self.run_once(mode)?,
        };
        Ok(BenchReport {
            mode,
            samples: times,
            output,
        })
    }
}
