//! Particle-interaction baselines: SMC with reward potentials, Best-of-N, and
//! their combination. Any sampler method can serve as the base step.

use rand::Rng;
use rayon::prelude::*;

use crate::efr::Workspace;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, sub_seed, RESAMPLING_STREAM};
use crate::samplers::{ChainState, Evaluation, Sampler};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Resampling {
    #[default]
    Multinomial,
    Systematic,
}

impl Resampling {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "multinomial" => Some(Resampling::Multinomial),
            "systematic" => Some(Resampling::Systematic),
            _ => None,
        }
    }
}

/// Form of the incremental potential `exp(lambda (h_new - h_old))`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Potential {
    /// `h` is the reward of the current Tweedie mean.
    #[default]
    Diff,
    /// `h` is the running maximum of that reward along the particle's history.
    Max,
}

impl Potential {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "diff" => Some(Potential::Diff),
            "max" => Some(Potential::Max),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmcConfig {
    pub particles: usize,
    pub resample_every: usize,
    pub resampling: Resampling,
    pub potential: Potential,
}

impl SmcConfig {
    pub fn new(particles: usize, resample_every: usize) -> Result<Self> {
        if particles == 0 {
            return Err(Error::Argument("SMC needs at least one particle".into()));
        }
        if resample_every == 0 {
            return Err(Error::Argument("resample_every must be >= 1".into()));
        }
        Ok(Self {
            particles,
            resample_every,
            resampling: Resampling::default(),
            potential: Potential::default(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct ParticleEnsemble {
    pub states: Vec<ChainState>,
    pub log_weights: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn normalized_weights(&self) -> Vec<f64> {
        let mut w = self.log_weights.clone();
        crate::vecops::softmax_in_place(&mut w);
        w
    }
}

/// Ancestor indices drawn from normalized `weights`.
pub fn resample_indices<R: Rng + ?Sized>(
    weights: &[f64],
    scheme: Resampling,
    rng: &mut R,
) -> Vec<usize> {
    let n = weights.len();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for w in weights {
        acc += w;
        cdf.push(acc);
    }
    let total = acc;
    let pick = |u: f64| cdf.partition_point(|&c| c <= u * total).min(n - 1);
    match scheme {
        Resampling::Multinomial => (0..n).map(|_| pick(rng.random::<f64>())).collect(),
        Resampling::Systematic => {
            let u0: f64 = rng.random();
            (0..n).map(|i| pick((i as f64 + u0) / n as f64)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmcOutput {
    pub samples: Vec<Vec<f64>>,
    pub score_evals: u64,
    pub resample_events: usize,
}

struct Slot {
    state: ChainState,
    eval: Evaluation,
    ws: Workspace,
    h: f64,
}

/// Propagates `cfg.particles` chains of the sampler's method and resamples
/// them every `cfg.resample_every` steps by their accumulated potentials.
///
/// A particle's random stream stays with its slot, so copies made by
/// resampling diverge on the next step. Resampling draws come from a
/// dedicated stream.
pub fn smc_run(sampler: &Sampler<'_>, cfg: &SmcConfig, seed: u64) -> Result<SmcOutput> {
    let n = cfg.particles;
    if n == 0 || cfg.resample_every == 0 {
        return Err(Error::Argument(
            "SMC needs particles >= 1 and resample_every >= 1".into(),
        ));
    }
    let lambda = sampler.spec().guidance.lambda;
    let reward = sampler.reward();
    let mut slots: Vec<Slot> = (0..n as u64)
        .map(|i| Slot {
            state: sampler.init_chain(seed, i),
            eval: Evaluation::default(),
            ws: Workspace::default(),
            h: 0.0,
        })
        .collect();
    let mut log_w = vec![0.0; n];
    let mut resample_rng = stream_rng(sub_seed(seed, RESAMPLING_STREAM), RESAMPLING_STREAM);
    let mut events = 0;
    let intervals: Vec<(f64, f64)> = sampler.spec().grid.intervals().collect();
    for (k, &(t_hi, t_lo)) in intervals.iter().enumerate() {
        slots
            .par_iter_mut()
            .try_for_each(|s| sampler.evaluate(&mut s.state, t_hi, &mut s.eval, &mut s.ws))?;
        for (s, lw) in slots.iter_mut().zip(log_w.iter_mut()) {
            let r = reward.eval(&s.eval.tweedie);
            let h = match cfg.potential {
                Potential::Diff => r,
                Potential::Max if k == 0 => r,
                Potential::Max => s.h.max(r),
            };
            *lw += lambda * (h - s.h);
            s.h = h;
        }
        if (k + 1) % cfg.resample_every == 0 && n > 1 {
            let mut w = log_w.clone();
            crate::vecops::softmax_in_place(&mut w);
            let ancestors = resample_indices(&w, cfg.resampling, &mut resample_rng);
            let snapshot: Vec<(Vec<f64>, Evaluation, f64)> = slots
                .iter()
                .map(|s| (s.state.x.clone(), s.eval.clone(), s.h))
                .collect();
            for (s, &a) in slots.iter_mut().zip(&ancestors) {
                s.state.x.clone_from(&snapshot[a].0);
                s.eval.clone_from(&snapshot[a].1);
                s.h = snapshot[a].2;
            }
            log_w.iter_mut().for_each(|w| *w = 0.0);
            events += 1;
        }
        slots
            .par_iter_mut()
            .try_for_each(|s| sampler.advance(&mut s.state, &s.eval.score, t_hi, t_lo))?;
    }
    Ok(SmcOutput {
        score_evals: slots.iter().map(|s| s.state.score_evals).sum(),
        samples: slots.into_iter().map(|s| s.state.x).collect(),
        resample_events: events,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub x: Vec<f64>,
    pub reward: f64,
    pub index: usize,
    pub score_evals: u64,
}

/// Index of the highest reward; the lowest index wins ties.
fn argmax_reward(sampler: &Sampler<'_>, samples: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in samples.iter().enumerate() {
        let r = sampler.reward().eval(x);
        if r > best.1 {
            best = (i, r);
        }
    }
    best
}

/// Runs `n` independent chains and keeps the highest-reward terminal sample.
pub fn best_of_n(sampler: &Sampler<'_>, n: usize, seed: u64) -> Result<Selection> {
    if n == 0 {
        return Err(Error::Argument("best-of-N needs N >= 1".into()));
    }
    let outs = sampler.run_chains(seed, n)?;
    let score_evals = outs.iter().map(|o| o.score_evals).sum();
    let samples: Vec<Vec<f64>> = outs.into_iter().map(|o| o.x_final).collect();
    let (index, reward) = argmax_reward(sampler, &samples);
    Ok(Selection {
        x: samples[index].clone(),
        reward,
        index,
        score_evals,
    })
}

/// SMC followed by best-of-N selection over the terminal particles.
pub fn smc_bon(sampler: &Sampler<'_>, cfg: &SmcConfig, seed: u64) -> Result<Selection> {
    let out = smc_run(sampler, cfg, seed)?;
    let (index, reward) = argmax_reward(sampler, &out.samples);
    Ok(Selection {
        x: out.samples[index].clone(),
        reward,
        index,
        score_evals: out.score_evals,
    })
}
