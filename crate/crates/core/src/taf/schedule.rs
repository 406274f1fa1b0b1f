use std::fmt;
use std::str::FromStr;

use super::TafError;

/// Per-branch allowed change rates `c₁ ≤ c₂ ≤ … ≤ cₘ`, in mean softmax-L1
/// change per frame. `f64::INFINITY` exempts a branch from regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeRateSchedule {
    rates: Vec<f64>,
}

impl ChangeRateSchedule {
    pub fn new(rates: Vec<f64>) -> Result<Self, TafError> {
        if rates.is_empty() {
            return Err(TafError::Config("change-rate schedule is empty".into()));
        }
        for (i, &c) in rates.iter().enumerate() {
            if c.is_nan() || c < 0.0 {
                return Err(TafError::Config(format!("rate {i} is {c}, must be >= 0")));
            }
        }
        if let Some(i) = rates.windows(2).position(|w| w[0] > w[1]) {
            return Err(TafError::Config(format!(
                "rates must be nondecreasing: c{} = {} > c{} = {}",
                i + 1,
                rates[i],
                i + 2,
                rates[i + 1]
            )));
        }
        if rates.iter().all(|c| c.is_infinite()) {
            log::warn!("every change rate is infinite: the regularizer is disabled");
        }
        Ok(Self { rates })
    }

    /// A single finite rate on branch 0 with every other branch exempt.
    pub fn coarsest_only(c: f64, m: usize) -> Result<Self, TafError> {
        let mut rates = vec![f64::INFINITY; m];
        rates[0] = c;
        Self::new(rates)
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn len(&self) -> usize {
        self.rates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rates.is_empty()
    }

    pub fn rate(&self, i: usize) -> f64 {
        self.rates[i]
    }

    /// Indices of branches with a finite rate; only these are ever sampled.
    pub fn finite_branches(&self) -> Vec<usize> {
        (0..self.rates.len())
            .filter(|&i| self.rates[i].is_finite())
            .collect()
    }

    pub fn all_infinite(&self) -> bool {
        self.rates.iter().all(|c| c.is_infinite())
    }
}

impl fmt::Display for ChangeRateSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .rates
            .iter()
            .map(|c| if c.is_infinite() { "inf".to_string() } else { c.to_string() })
            .collect();
        f.write_str(&parts.join(", "))
    }
}

impl FromStr for ChangeRateSchedule {
    type Err = TafError;

    /// Parses a comma list such as `0.0001, inf, inf`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let rates = s
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                match tok.to_ascii_lowercase().as_str() {
                    "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
                    _ => tok
                        .parse::<f64>()
                        .map_err(|_| TafError::Config(format!("bad change rate {tok:?}"))),
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(rates)
    }
}
