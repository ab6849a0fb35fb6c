use crate::error::{Error, Result};

pub const DEFAULT_STABILIZER: f64 = 1e-12;

/// How biases take part in redistribution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BiasPolicy {
    /// Biases are left out of the denominators; all relevance reaches the inputs.
    #[default]
    Exclude,
    /// Biases join the denominators and keep their share.
    Include,
}

impl std::str::FromStr for BiasPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(Self::Exclude),
            "include" => Ok(Self::Include),
            other => Err(Error::Config(format!("unknown bias policy `{other}`"))),
        }
    }
}

impl std::fmt::Display for BiasPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BiasPolicy::Exclude => "exclude",
            BiasPolicy::Include => "include",
        })
    }
}

/// Rule used at the first linear layer, the one that sees the raw voxels.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InputRule {
    #[default]
    AlphaBeta,
    /// Box-constrained rule for inputs known to lie in `[low, high]`.
    ZB { low: f64, high: f64 },
}

impl std::str::FromStr for InputRule {
    type Err = Error;

    /// `alphabeta` or `zb:LOW,HIGH`.
    fn from_str(s: &str) -> Result<Self> {
        if s == "alphabeta" {
            return Ok(Self::AlphaBeta);
        }
        let bounds = s
            .strip_prefix("zb:")
            .ok_or_else(|| Error::Config(format!("unknown input rule `{s}`")))?;
        let (lo, hi) = bounds
            .split_once(',')
            .ok_or_else(|| Error::Config(format!("input rule `{s}` needs zb:LOW,HIGH")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad zB bound `{v}`")))
        };
        let rule = Self::ZB {
            low: parse(lo)?,
            high: parse(hi)?,
        };
        rule.validate()?;
        Ok(rule)
    }
}

impl std::fmt::Display for InputRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InputRule::AlphaBeta => f.write_str("alphabeta"),
            InputRule::ZB { low, high } => write!(f, "zb:{low},{high}"),
        }
    }
}

impl InputRule {
    fn validate(&self) -> Result<()> {
        if let InputRule::ZB { low, high } = *self {
            if !(low.is_finite() && high.is_finite() && low <= high) {
                return Err(Error::Config(format!(
                    "zB bounds must be finite with low <= high, got [{low}, {high}]"
                )));
            }
        }
        Ok(())
    }
}

/// Parameters of the αβ relevance rules. Construction enforces
/// `alpha − beta = 1` and `beta >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrpConfig {
    alpha: f64,
    beta: f64,
    stabilizer: f64,
    input_rule: InputRule,
    bias_policy: BiasPolicy,
}

impl LrpConfig {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !alpha.is_finite() || !beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        if beta < 0.0 {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        if (alpha - beta - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "alpha - beta must equal 1, got {alpha} - {beta}"
            )));
        }
        Ok(Self {
            alpha,
            beta,
            stabilizer: DEFAULT_STABILIZER,
            input_rule: InputRule::AlphaBeta,
            bias_policy: BiasPolicy::Exclude,
        })
    }

    /// Config for `beta`, with `alpha = 1 + beta`.
    pub fn with_beta(beta: f64) -> Result<Self> {
        Self::new(1.0 + beta, beta)
    }

    pub fn stabilized(mut self, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::Config(format!("stabilizer must be positive, got {epsilon}")));
        }
        self.stabilizer = epsilon;
        Ok(self)
    }

    pub fn with_input_rule(mut self, rule: InputRule) -> Result<Self> {
        rule.validate()?;
        self.input_rule = rule;
        Ok(self)
    }

    pub fn with_bias_policy(mut self, policy: BiasPolicy) -> Self {
        self.bias_policy = policy;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn stabilizer(&self) -> f64 {
        self.stabilizer
    }

    pub fn input_rule(&self) -> InputRule {
        self.input_rule
    }

    pub fn bias_policy(&self) -> BiasPolicy {
        self.bias_policy
    }

    /// The report sweep `(1,0)`, `(2,1)`, `(3,2)`.
    pub fn default_sweep() -> Vec<Self> {
        [0.0, 1.0, 2.0]
            .iter()
            .map(|&b| Self::with_beta(b).expect("valid pair"))
            .collect()
    }
}

impl Default for LrpConfig {
    fn default() -> Self {
        Self::new(1.0, 0.0).expect("valid pair")
    }
}
