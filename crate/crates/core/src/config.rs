use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{ComqError, Result};
use crate::grid::check_bits;

/// Default number of sweeps; three or four sweeps is where the error stops
/// improving on real networks.
pub const DEFAULT_ITERS: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One scale for the whole matrix, symmetric codes.
    PerLayer,
    /// One scale and zero-point per output column, affine codes.
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Order {
    /// Rows in index order.
    Cyclic,
    /// Rows by descending `|w_j| * ||x_j||`.
    Greedy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieRule {
    #[default]
    HalfToEven,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::PerLayer => "per-layer",
            Granularity::PerChannel => "per-channel",
        })
    }
}

impl fmt::Display for Order {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Order::Cyclic => "cyclic",
            Order::Greedy => "greedy",
        })
    }
}

/// Solver configuration for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantConfig {
    pub bits: u32,
    pub iters: u32,
    /// Range shrink for the per-channel initial scale. `None` picks
    /// [`default_lambda`] for the bit-width.
    pub lambda: Option<f64>,
    pub granularity: Granularity,
    pub order: Order,
    #[serde(default)]
    pub tie_rule: TieRule,
    /// Use `||q||^2` instead of `||Xq||^2` as the per-channel scale
    /// denominator. Not a least-squares step; for A/B comparison only.
    #[serde(default)]
    pub strict_paper_scale: bool,
}

/// `1.0` at four bits and above, `0.9` below.
pub fn default_lambda(bits: u32) -> f64 {
    if bits >= 4 {
        1.0
    } else {
        0.9
    }
}

impl QuantConfig {
    pub fn new(bits: u32, granularity: Granularity) -> Self {
        let order = match granularity {
            Granularity::PerLayer => Order::Cyclic,
            Granularity::PerChannel => Order::Greedy,
        };
        QuantConfig {
            bits,
            iters: DEFAULT_ITERS,
            lambda: None,
            granularity,
            order,
            tie_rule: TieRule::HalfToEven,
            strict_paper_scale: false,
        }
    }

    pub fn per_layer(bits: u32) -> Self {
        Self::new(bits, Granularity::PerLayer)
    }

    pub fn per_channel(bits: u32) -> Self {
        Self::new(bits, Granularity::PerChannel)
    }

    pub fn with_iters(mut self, iters: u32) -> Self {
        self.iters = iters;
        self
    }

    pub fn with_order(mut self, order: Order) -> Self {
        self.order = order;
        self
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = Some(lambda);
        self
    }

    pub fn lambda(&self) -> f64 {
        self.lambda.unwrap_or_else(|| default_lambda(self.bits))
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.bits)?;
        if self.iters == 0 {
            return Err(ComqError::InvalidConfig(
                "iteration count must be at least 1".into(),
            ));
        }
        let lambda = self.lambda();
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(ComqError::InvalidConfig(format!(
                "lambda must be in (0, 1], got {lambda}"
            )));
        }
        Ok(())
    }
}
