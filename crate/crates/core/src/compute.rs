//! FLOPs accounting and scaling-curve fitting.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Forward-pass FLOPs per token per parameter.
pub const DEFAULT_FLOPS_MULTIPLIER: f64 = 2.0;

/// Inference FLOPs of one call: `2 · params · (prompt + completion tokens)`.
pub fn call_flops(param_count: u64, prompt_tokens: u64, completion_tokens: u64) -> f64 {
    call_flops_with(DEFAULT_FLOPS_MULTIPLIER, param_count, prompt_tokens, completion_tokens)
}

pub fn call_flops_with(multiplier: f64, param_count: u64, prompt_tokens: u64, completion_tokens: u64) -> f64 {
    multiplier * param_count as f64 * (prompt_tokens + completion_tokens) as f64
}

/// Usage attributed to one agent: its generation calls, and the reward
/// calls that scored its samples.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AgentUsage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub flops: f64,
    pub reward_calls: u64,
    pub reward_tokens: u64,
    pub reward_flops: f64,
}

impl AgentUsage {
    fn absorb(&mut self, other: &AgentUsage) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
        self.flops += other.flops;
        self.reward_calls += other.reward_calls;
        self.reward_tokens += other.reward_tokens;
        self.reward_flops += other.reward_flops;
    }
}

/// Merge-friendly usage ledger.
///
/// `total_flops` is the sum of generation and reward FLOPs over agents.
/// Merging is associative and commutative as long as the FLOPs values stay
/// exactly representable, which holds for integer token and parameter counts
/// below 2^53.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub per_agent: BTreeMap<String, AgentUsage>,
    pub total_flops: f64,
}

impl BudgetLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_generation(&mut self, agent_id: &str, flops: f64, prompt_tokens: u64, completion_tokens: u64) {
        let u = self.per_agent.entry(agent_id.to_string()).or_default();
        u.calls += 1;
        u.prompt_tokens += prompt_tokens;
        u.completion_tokens += completion_tokens;
        u.flops += flops;
        self.total_flops += flops;
    }

    pub fn record_scoring(&mut self, agent_id: &str, flops: f64, tokens: u64) {
        let u = self.per_agent.entry(agent_id.to_string()).or_default();
        u.reward_calls += 1;
        u.reward_tokens += tokens;
        u.reward_flops += flops;
        self.total_flops += flops;
    }

    pub fn merge(&mut self, other: &BudgetLedger) {
        for (agent, usage) in &other.per_agent {
            self.per_agent.entry(agent.clone()).or_default().absorb(usage);
        }
        self.total_flops += other.total_flops;
    }

    pub fn merged(mut self, other: &BudgetLedger) -> Self {
        self.merge(other);
        self
    }

    pub fn generation_flops(&self) -> f64 {
        self.per_agent.values().map(|u| u.flops).sum()
    }

    pub fn reward_flops(&self) -> f64 {
        self.per_agent.values().map(|u| u.reward_flops).sum()
    }

    pub fn calls(&self) -> u64 {
        self.per_agent.values().map(|u| u.calls).sum()
    }
}

/// `R = a·log10(C)² + b·log10(C) + c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub rmse: f64,
    pub points_used: usize,
}

impl ScalingFit {
    pub fn predict(&self, compute: f64) -> f64 {
        let x = compute.log10();
        self.a * x * x + self.b * x + self.c
    }

    pub fn csv_header() -> &'static str {
        "a,b,c,rmse"
    }

    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}", self.a, self.b, self.c, self.rmse)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FitError {
    #[error("need at least 3 distinct compute values, got {distinct}")]
    DegenerateFit { distinct: usize },
    #[error("compute values must be positive and finite, got {0}")]
    InvalidCompute(f64),
    #[error("reward values must be finite, got {0}")]
    InvalidReward(f64),
}

/// Least-squares fit of reward against log-compute.
///
/// Solved on centered, scaled features for conditioning and mapped back
/// to the `(log10 C)², log10 C, 1` basis.
pub fn fit_scaling_curve(points: &[(f64, f64)]) -> Result<ScalingFit, FitError> {
    for &(c, r) in points {
        if !c.is_finite() || c <= 0.0 {
            return Err(FitError::InvalidCompute(c));
        }
        if !r.is_finite() {
            return Err(FitError::InvalidReward(r));
        }
    }
    let mut distinct: Vec<f64> = points.iter().map(|p| p.0).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(FitError::DegenerateFit {
            distinct: distinct.len(),
        });
    }

    let xs: Vec<f64> = points.iter().map(|p| p.0.log10()).collect();
    let m = points.len();
    let mean = xs.iter().sum::<f64>() / m as f64;
    let scale = xs.iter().map(|x| (x - mean).abs()).fold(0.0, f64::max);
    let design = DMatrix::from_fn(m, 3, |i, j| {
        let t = (xs[i] - mean) / scale;
        match j {
            0 => t * t,
            1 => t,
            _ => 1.0,
        }
    });
    let y = DVector::from_iterator(m, points.iter().map(|p| p.1));
    let theta = design
        .svd(true, true)
        .solve(&y, 1e-14)
        .expect("SVD computed with both factors");

    // r = p·t² + q·t + s with t = (x − mean)/scale
    let (p, q, s) = (theta[0], theta[1], theta[2]);
    let a = p / (scale * scale);
    let b = q / scale - 2.0 * p * mean / (scale * scale);
    let c = s - q * mean / scale + p * mean * mean / (scale * scale);

    let sse: f64 = points
        .iter()
        .zip(&xs)
        .map(|(&(_, r), &x)| {
            let e = r - (a * x * x + b * x + c);
            e * e
        })
        .sum();
    Ok(ScalingFit {
        a,
        b,
        c,
        rmse: (sse / m as f64).sqrt(),
        points_used: m,
    })
}
