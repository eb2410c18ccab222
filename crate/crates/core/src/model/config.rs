use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::RetrievalConfig;
use crate::tokenizer::contexts_per_series;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Forecasting tasks as tokens, with context examples.
    Ictsp,
    /// One token per series.
    SeriesWise,
    /// One token per time step.
    TemporalWise,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ictsp => "ictsp",
            Variant::SeriesWise => "series_wise",
            Variant::TemporalWise => "temporal_wise",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ictsp" => Ok(Variant::Ictsp),
            "series_wise" | "series-wise" => Ok(Variant::SeriesWise),
            "temporal_wise" | "temporal-wise" => Ok(Variant::TemporalWise),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub dropout: f64,
    pub input_len: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Sampling stride `m` between context examples.
    pub step: usize,
    pub retrieval: RetrievalConfig,
    /// Capacity of the series-embedding table.
    pub max_channels: usize,
    /// Channel count the temporal-wise variant is built for.
    pub channels: usize,
    /// Include context examples (ICTSP only).
    pub context: bool,
    /// Subtract each token's last lookback value before the network.
    pub rationalize: bool,
    /// Series and position embeddings.
    pub embeddings: bool,
    /// Give every context token the same position embedding.
    pub tie_context_positions: bool,
    /// Also fit the futures of context tokens.
    pub context_loss: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Ictsp,
            layers: 3,
            d_model: 128,
            heads: 8,
            dropout: 0.5,
            input_len: 1440,
            lookback: 512,
            horizon: 96,
            step: 8,
            retrieval: RetrievalConfig::default(),
            max_channels: 64,
            channels: 7,
            context: true,
            rationalize: true,
            embeddings: true,
            tie_context_positions: false,
            context_loss: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} must be a positive multiple of heads {}", self.d_model, self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if self.horizon == 0 || self.input_len == 0 {
            return bad("input_len and horizon must be positive".into());
        }
        if self.max_channels == 0 {
            return bad("max_channels must be positive".into());
        }
        match self.variant {
            Variant::Ictsp => {
                if self.lookback == 0 || self.step == 0 {
                    return bad("lookback and step must be positive".into());
                }
                if self.context && self.lookback + self.horizon > self.input_len {
                    return bad(format!(
                        "L_b + L_P = {} exceeds L_I = {}",
                        self.lookback + self.horizon,
                        self.input_len
                    ));
                }
                if !self.context && self.lookback > self.input_len {
                    return bad(format!("L_b = {} exceeds L_I = {}", self.lookback, self.input_len));
                }
                if self.uses_retrieval() {
                    self.retrieval.validate()?;
                }
            }
            Variant::TemporalWise if self.channels == 0 => {
                return bad("temporal-wise model needs channels >= 1".into());
            }
            _ => {}
        }
        Ok(())
    }

    /// Width of one token.
    pub fn token_width(&self) -> usize {
        match self.variant {
            Variant::Ictsp => self.lookback + self.horizon,
            Variant::SeriesWise => self.input_len + self.horizon,
            Variant::TemporalWise => self.channels,
        }
    }

    pub fn uses_retrieval(&self) -> bool {
        self.variant == Variant::Ictsp && self.context && self.retrieval.enabled
    }

    /// Context examples per series at stride 1, the most any stride yields.
    pub fn max_contexts(&self) -> usize {
        if self.variant == Variant::Ictsp && self.context {
            contexts_per_series(self.input_len, self.lookback, self.horizon, 1, 0)
        } else {
            0
        }
    }

    /// Rows of the position-embedding table, or 0 when there is none.
    pub fn position_rows(&self) -> usize {
        if !self.embeddings {
            return 0;
        }
        match self.variant {
            Variant::Ictsp => {
                let merged = if self.uses_retrieval() { self.retrieval.merged } else { 0 };
                1 + self.max_contexts() + merged
            }
            Variant::SeriesWise => 0,
            Variant::TemporalWise => self.input_len + self.horizon,
        }
    }

    /// Rows of the series-embedding table, or 0 when there is none.
    pub fn series_rows(&self) -> usize {
        match self.variant {
            Variant::TemporalWise => 0,
            _ if self.embeddings => self.max_channels,
            _ => 0,
        }
    }
}
