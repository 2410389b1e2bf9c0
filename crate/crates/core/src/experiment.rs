//! Dataset-to-trained-model pipeline shared by the command line and tests.

use crate::anchor::{build_anchor_table, AnchorTable};
use crate::config::RunConfig;
use crate::data::{load_dataset_dir, make_windows, split_dataset, Normalizer, SeriesTensor, Splits, WindowSet};
use crate::error::{config, Result};
use crate::model::{Model, ModelConfig};
use crate::trainer::{train_with, EpochRecord, TrainConfig, TrainOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(config(format!("unknown split `{s}` (train|val|test)"))),
        }
    }
}

/// A dataset cut into splits, with everything fitted on the training split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub series: SeriesTensor,
    pub splits: Splits,
    pub normalizer: Normalizer,
    pub anchors: AnchorTable,
    pub model_cfg: ModelConfig,
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
}

impl Prepared {
    pub fn windows(&self, split: Split) -> &WindowSet {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn fresh_model(&self, seed: u64) -> Result<Model> {
        let anchors = self.model_cfg.uses_anchor().then(|| self.anchors.clone());
        Model::new(self.model_cfg.clone(), seed, self.normalizer, anchors)
    }
}

pub fn prepare(series: SeriesTensor, run: &RunConfig) -> Result<Prepared> {
    let model_cfg = run.model_for(&series)?;
    let need = model_cfg.input_len + model_cfg.horizon;
    let splits = split_dataset(&series, (run.train_ratio, run.val_ratio, run.test_ratio), need)?;
    let normalizer = Normalizer::fit(&splits.train)?;
    let anchors = build_anchor_table(&splits.train)?;
    let windows = |s: &SeriesTensor| make_windows(s, model_cfg.input_len, model_cfg.horizon, &normalizer);
    let (train, val, test) = (windows(&splits.train)?, windows(&splits.val)?, windows(&splits.test)?);
    Ok(Prepared { series, splits, normalizer, anchors, model_cfg, train, val, test })
}

pub fn prepare_from_config(run: &RunConfig) -> Result<Prepared> {
    let dir = run.data.as_ref().ok_or_else(|| config("the configuration does not name a dataset (`data = DIR`)"))?;
    prepare(load_dataset_dir(dir)?, run)
}

/// Builds a model from `run.seed` and trains it on `prep`.
pub fn run_training(
    prep: &Prepared,
    run: &RunConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainOutcome)> {
    let mut model = prep.fresh_model(run.seed)?;
    let outcome = train_with(&mut model, &prep.train.windows, &prep.val.windows, &TrainConfig::from_run(run), on_epoch)?;
    Ok((model, outcome))
}
