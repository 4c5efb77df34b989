//! Dataset materialization for an experiment.

use crate::data::io::Dataset;
use crate::data::{
    gen_density2d, gen_ellipse, gen_linear_system, gen_periodic, gen_stiff, gen_tpp, partition, DensityDataset2D,
    EventSequenceDataset, Split, TrajectoryDataset, TrajectorySplits,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::config::{DatasetSpec, ExperimentKind};

/// Generated (or loaded) data with its splits resolved.
#[derive(Clone, Debug, PartialEq)]
pub enum ExperimentData {
    Trajectory(TrajectorySplits),
    Events {
        full: EventSequenceDataset,
        splits: [EventSequenceDataset; 3],
    },
    Density {
        full: DensityDataset2D,
        splits: [Tensor; 3],
    },
}

impl ExperimentData {
    pub fn generate(spec: &DatasetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            DatasetSpec::Periodic { signal, n, m, x_range, t_range } => {
                ExperimentData::Trajectory(gen_periodic(*signal, *n, *m, seed, *x_range, *t_range)?)
            }
            DatasetSpec::Sink { n, m } => ExperimentData::Trajectory(gen_linear_system(*n, *m, seed)?),
            DatasetSpec::Ellipse { n, m } => ExperimentData::Trajectory(gen_ellipse(*n, *m, seed)?),
            DatasetSpec::Stiff { n, interval_len, t_max } => {
                ExperimentData::Trajectory(gen_stiff(*interval_len, *t_max, *n, seed)?)
            }
            DatasetSpec::Tpp { n_seq, seq_len, .. } => {
                let kind = spec.tpp_kind().expect("validated process name");
                Self::from_events(gen_tpp(&kind, *n_seq, *seq_len, seed)?)
            }
            DatasetSpec::Density2d { n } => Self::from_density(gen_density2d(*n, seed)?),
        })
    }

    pub fn from_events(full: EventSequenceDataset) -> Self {
        let splits = full.splits();
        ExperimentData::Events { full, splits }
    }

    pub fn from_density(full: DensityDataset2D) -> Self {
        let splits = partition(full.len()).map(|r| full.rows(r));
        ExperimentData::Density { full, splits }
    }

    pub fn kind(&self) -> ExperimentKind {
        match self {
            ExperimentData::Trajectory(s) if s.train.name == "stiff" => ExperimentKind::Stiff,
            ExperimentData::Trajectory(_) => ExperimentKind::Trajectory,
            ExperimentData::Events { .. } => ExperimentKind::Tpp,
            ExperimentData::Density { .. } => ExperimentKind::Density,
        }
    }

    /// Units (trajectories, sequences or samples) in the training split.
    pub fn train_len(&self) -> usize {
        self.split_len(Split::Train).unwrap_or(0)
    }

    pub fn split_len(&self, split: Split) -> Option<usize> {
        match self {
            ExperimentData::Trajectory(s) => s.get(split).map(TrajectoryDataset::len),
            ExperimentData::Events { splits, .. } => split_index(split).map(|i| splits[i].sequences.len()),
            ExperimentData::Density { splits, .. } => split_index(split).map(|i| splits[i].rows()),
        }
    }

    /// Splits present in this dataset, in canonical order.
    pub fn available_splits(&self) -> Vec<Split> {
        Split::ALL.into_iter().filter(|s| self.split_len(*s).is_some()).collect()
    }

    /// State dimension for trajectory and density data, `None` for events.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ExperimentData::Trajectory(s) => Some(s.train.dim),
            ExperimentData::Events { .. } => None,
            ExperimentData::Density { .. } => Some(2),
        }
    }

    pub fn to_dataset(&self) -> Dataset {
        match self {
            ExperimentData::Trajectory(s) => Dataset::Trajectories(s.iter().cloned().collect()),
            ExperimentData::Events { full, .. } => Dataset::Events(full.clone()),
            ExperimentData::Density { full, .. } => Dataset::Density(full.clone()),
        }
    }

    pub fn from_dataset(ds: Dataset) -> Result<Self> {
        match ds {
            Dataset::Trajectories(parts) => {
                let mut by_split: [Option<TrajectoryDataset>; 5] = Default::default();
                for p in parts {
                    let i = p.split as usize;
                    if by_split[i].is_some() {
                        return Err(Error::Invalid(format!("split {} appears twice", p.split.as_str())));
                    }
                    by_split[i] = Some(p);
                }
                let [train, val, test, space, time] = by_split;
                let missing = |s: Split| Error::Invalid(format!("dataset has no {} split", s.as_str()));
                Ok(ExperimentData::Trajectory(TrajectorySplits {
                    train: train.ok_or_else(|| missing(Split::Train))?,
                    val: val.ok_or_else(|| missing(Split::Val))?,
                    test: test.ok_or_else(|| missing(Split::Test))?,
                    extrapolate_space: space,
                    extrapolate_time: time,
                }))
            }
            Dataset::Events(e) => Ok(Self::from_events(e)),
            Dataset::Density(d) => Ok(Self::from_density(d)),
        }
    }
}

pub(crate) fn split_index(split: Split) -> Option<usize> {
    match split {
        Split::Train => Some(0),
        Split::Val => Some(1),
        Split::Test => Some(2),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::PeriodicKind;

    #[test]
    fn dataset_round_trip_keeps_splits() {
        let spec = DatasetSpec::Periodic {
            signal: PeriodicKind::Sawtooth,
            n: 10,
            m: 3,
            x_range: (-2.0, 2.0),
            t_range: (0.0, 10.0),
        };
        let d = ExperimentData::generate(&spec, 4).unwrap();
        assert_eq!(d.available_splits().len(), 5);
        assert_eq!(d.train_len(), 6);
        let back = ExperimentData::from_dataset(d.to_dataset()).unwrap();
        assert_eq!(back, d);
        let ev = ExperimentData::generate(
            &DatasetSpec::Tpp { process: "poisson".into(), n_seq: 10, seq_len: 4 },
            0,
        )
        .unwrap();
        assert_eq!(ev.available_splits(), vec![Split::Train, Split::Val, Split::Test]);
        assert_eq!(ev.split_len(Split::Test), Some(2));
        assert_eq!(ev.kind(), ExperimentKind::Tpp);
    }
}
