//! Prosumer and main-grid economics.

use thiserror::Error;

use crate::scenario::{GridParams, ProsumerParams, Scheme};

/// Slack allowed on bound checks, to absorb solver round-off.
const BOUND_SLACK: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("generation {g} outside [{lo}, {hi}]")]
    GenerationBounds { g: f64, lo: f64, hi: f64 },
    #[error("negative demand {0}")]
    NegativeDemand(f64),
    #[error("fairness index of an all-zero welfare vector")]
    AllZero,
}

/// `b·g + a·g²`.
pub fn producer_cost(g: f64, params: &ProsumerParams) -> Result<f64, AgentError> {
    if g < params.g_p_min - BOUND_SLACK || g > params.g_p_max + BOUND_SLACK {
        return Err(AgentError::GenerationBounds {
            g,
            lo: params.g_p_min,
            hi: params.g_p_max,
        });
    }
    Ok(cost_curve(g, params))
}

pub(crate) fn cost_curve(g: f64, params: &ProsumerParams) -> f64 {
    params.b * g + params.a * g * g
}

/// Demand beyond which utility stops growing, `β/(2α)`.
pub fn saturation(params: &ProsumerParams) -> f64 {
    params.beta / (2.0 * params.alpha)
}

/// `β·d − α·d²` up to the saturation point, flat afterwards.
pub fn consumer_utility(d: f64, params: &ProsumerParams) -> Result<f64, AgentError> {
    if d < -BOUND_SLACK {
        return Err(AgentError::NegativeDemand(d));
    }
    let d = d.max(0.0).min(saturation(params));
    Ok(params.beta * d - params.alpha * d * d)
}

pub fn marginal_utility(d: f64, params: &ProsumerParams) -> f64 {
    (params.beta - 2.0 * params.alpha * d).max(0.0)
}

pub fn marginal_cost(g: f64, params: &ProsumerParams) -> f64 {
    params.b + 2.0 * params.a * g
}

/// Cost of the main grid to supply `p0`: `b0·p0 + a0·p0²`.
pub fn grid_generation_cost(p0: f64, grid: &GridParams) -> f64 {
    grid.b0 * p0 + grid.a0 * p0 * p0
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPriceQuote {
    pub buy_price: f64,
    pub sell_price: f64,
}

/// Buying quotes from grid loads `p_0i` (positive = buying from the grid).
///
/// Under UPS every prosumer sees `b0 + a0·Σ max(p_0i, 0)`; under DPS each
/// sees `b0 + a0·max(p_0i, 0)`.
pub fn grid_price_quote(loads: &[f64], grid: &GridParams) -> Vec<GridPriceQuote> {
    let quote = |load: f64| GridPriceQuote {
        buy_price: grid.b0 + grid.a0 * load,
        sell_price: grid.lambda_sell,
    };
    match grid.scheme {
        Scheme::Ups => {
            let total: f64 = loads.iter().map(|p| p.max(0.0)).sum();
            vec![quote(total); loads.len()]
        }
        Scheme::Dps => loads.iter().map(|p| quote(p.max(0.0))).collect(),
    }
}

/// Total paid to the grid for purchases `loads` under `scheme`.
///
/// UPS charges every unit at the common price, which sums to the grid's
/// cost of the aggregate; DPS sums each prosumer's own quadratic bill.
pub fn grid_payments(loads: &[f64], grid: &GridParams, scheme: Scheme) -> f64 {
    match scheme {
        Scheme::Ups => grid_generation_cost(loads.iter().map(|p| p.max(0.0)).sum(), grid),
        Scheme::Dps => loads
            .iter()
            .map(|p| grid_generation_cost(p.max(0.0), grid))
            .sum(),
    }
}

/// Welfare of one prosumer, excluding bilateral payments.
///
/// `p_i0` is the signed exchange with the grid (positive = selling to it).
pub fn prosumer_welfare(
    d: f64,
    g: f64,
    p_i0: f64,
    quote: &GridPriceQuote,
    params: &ProsumerParams,
) -> Result<f64, AgentError> {
    let p_0i = -p_i0;
    Ok(
        consumer_utility(d, params)? - producer_cost(g, params)? - quote.buy_price * p_0i.max(0.0)
            + quote.sell_price * p_i0.max(0.0),
    )
}

/// Jain's fairness index `(Σw)² / (n·Σw²)`.
pub fn jain_fairness(welfares: &[f64]) -> Result<f64, AgentError> {
    let sq: f64 = welfares.iter().map(|w| w * w).sum();
    if sq == 0.0 {
        return Err(AgentError::AllZero);
    }
    let sum: f64 = welfares.iter().sum();
    Ok(sum * sum / (welfares.len() as f64 * sq))
}
