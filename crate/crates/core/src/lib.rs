//! Transfer learning for financial aspect classification and sentiment
//! regression with an AWD-LSTM style encoder.

pub mod autodiff;
pub mod baselines;
pub mod finetune;
pub mod model;
pub mod synth;
pub mod text;
