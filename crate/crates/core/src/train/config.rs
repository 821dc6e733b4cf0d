use crate::error::{Error, Result};
use crate::lognum::{AccumMode, ArithFormat, QuantizerConfig, Rounding};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    SgdMomentum { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Optimizer::SgdMomentum { lr, momentum }
    }

    pub fn adam(lr: f64) -> Self {
        Optimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            Optimizer::SgdMomentum { lr, .. } | Optimizer::Adam { lr, .. } => lr,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            Optimizer::SgdMomentum { lr, momentum } => lr >= 0.0 && (0.0..1.0).contains(&momentum),
            Optimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
            } => lr >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` epochs.
    StepDecay { every: usize, factor: f64 },
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { every, factor } => base * factor.powi((epoch / every.max(1)) as i32),
        }
    }
}

/// Training hyper-parameters. A `None` quantizer leaves that tensor in
/// full precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub weight_q: Option<QuantizerConfig>,
    pub activation_q: Option<QuantizerConfig>,
    pub gradient_q: Option<QuantizerConfig>,
    pub optimizer: Optimizer,
    pub schedule: LrSchedule,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Random horizontal flip and 2-pixel pad-crop on image inputs.
    pub augment: bool,
    pub fmt: ArithFormat,
    pub accum: AccumMode,
    /// FSR used for an all-zero gradient or weight tensor.
    pub fsr_floor: i32,
    pub bn_momentum: f64,
    /// Samples used to re-estimate normalization statistics after each
    /// epoch; 0 keeps the momentum estimates.
    pub bn_refresh: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            weight_q: None,
            activation_q: None,
            gradient_q: None,
            optimizer: Optimizer::adam(1e-3),
            schedule: LrSchedule::Constant,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            augment: false,
            fmt: ArithFormat::wide(),
            accum: AccumMode::Linear,
            fsr_floor: -20,
            bn_momentum: 0.1,
            bn_refresh: 1024,
        }
    }
}

impl TrainConfig {
    /// Float baseline.
    pub fn float() -> Self {
        Self::default()
    }

    /// 4b unsigned log activations at FSR 4, 5b signed log weights, and 5b
    /// signed log gradients rounded toward zero.
    pub fn log_quantized() -> Self {
        Self {
            weight_q: Some(QuantizerConfig::log(5, 0).signed()),
            activation_q: Some(QuantizerConfig::log(4, 4)),
            gradient_q: Some(
                QuantizerConfig::log(5, 0)
                    .signed()
                    .with_rounding(Rounding::FloorMsb),
            ),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, q, signed) in [
            ("weight_q", &self.weight_q, true),
            ("activation_q", &self.activation_q, false),
            ("gradient_q", &self.gradient_q, true),
        ] {
            if let Some(q) = q {
                q.validate()
                    .map_err(|e| Error::config(format!("{name}: {e}")))?;
                if q.signed != signed {
                    let want = if signed { "signed" } else { "unsigned" };
                    return Err(Error::config(format!("{name} must be {want}")));
                }
            }
        }
        self.optimizer.validate()?;
        self.fmt.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("bn_momentum must lie in [0, 1]"));
        }
        if let LrSchedule::StepDecay { every, factor } = self.schedule {
            if every == 0 || !(factor > 0.0) {
                return Err(Error::config("step decay needs every > 0 and factor > 0"));
            }
        }
        Ok(())
    }
}
