use keytoken_core::model::{
    disruptive_union_bound, naive_curve, reliability_curve, validate_grid, DecayClass, ModelError, TwoRateModel,
};
use serde::{Deserialize, Serialize};

use super::{finish, ignore_trials};
use crate::config::{load, model_error};
use crate::output::Artifacts;
use crate::{Cli, CliError, Command, Format, RunSummary};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictParams {
    pub model: TwoRateModel,
    pub n_values: Vec<u64>,
    /// Error rate of the naive comparison curve; defaults to `model.e_key`.
    #[serde(default)]
    pub naive_e: Option<f64>,
}

#[derive(Serialize)]
struct Row {
    n: u64,
    p_naive: f64,
    p_two_rate: f64,
}

#[derive(Serialize)]
struct Point {
    n: u64,
    key_count: u64,
    p_naive: f64,
    p_two_rate: f64,
    union_bound: f64,
}

#[derive(Serialize)]
struct Report<'a> {
    model: &'a TwoRateModel,
    model_label: String,
    decay_class: DecayClass,
    naive_e: f64,
    rate_ordering_violated: bool,
    points: Vec<Point>,
}

pub fn run(cli: &Cli) -> Result<RunSummary, CliError> {
    ignore_trials(cli);
    let mut config = load::<PredictParams>(cli)?.config;
    let p = &mut config.params;
    p.model.validate().map_err(|e| model_error("params.model", e))?;
    validate_grid(&p.n_values).map_err(|e| CliError::config("params.n_values", e))?;
    let naive_e = *p.naive_e.get_or_insert(p.model.e_key);

    let naive = naive_curve(naive_e, &p.n_values).map_err(|e| match e {
        ModelError::OutOfRange { .. } => CliError::config("params.naive_e", e),
        other => CliError::config("params.n_values", other),
    })?;
    let two_rate = reliability_curve(&p.model, &p.n_values).map_err(|e| CliError::config("params.n_values", e))?;

    let mut artifacts = Artifacts::default();
    let pairs = naive.points.iter().zip(&two_rate.points);
    if config.wants(Format::Csv) {
        artifacts.csv("predict.csv", pairs.clone().map(|(a, b)| Row { n: a.n, p_naive: a.p, p_two_rate: b.p }))?;
    }
    if config.wants(Format::Json) {
        let model = &config.params.model;
        let report = Report {
            model,
            model_label: model.label(),
            decay_class: model.growth.decay_class(),
            naive_e,
            rate_ordering_violated: model.rate_ordering_violated(),
            points: pairs
                .map(|(a, b)| Point {
                    n: a.n,
                    key_count: model.key_count(a.n),
                    p_naive: a.p,
                    p_two_rate: b.p,
                    union_bound: disruptive_union_bound(model, a.n),
                })
                .collect(),
        };
        artifacts.json("predict.json", &report)?;
    }
    finish(Command::Predict, &config, artifacts)
}
