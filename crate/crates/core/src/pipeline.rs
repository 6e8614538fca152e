//! End-to-end stages shared by the command line and the benchmarks.

use std::path::Path;

use crate::bias::{Affine, BiasTransform};
use crate::checkpoint;
use crate::config::{ExperimentConfig, PruneMethod, Stage, TeacherKind};
use crate::corpus::{group, load_split, materialize, CorpusConfig, Dataset, Labels, Split};
use crate::error::{Error, Result};
use crate::model::QualityModel;
use crate::prune::{run_prune_schedule, PruneData, PruneState, TrajectoryPoint};
use crate::train::{distill, pseudo_labels, train_labeled, TeacherHandle, TrainOutcome};

/// Corpus split by role.
#[derive(Clone, Debug, Default)]
pub struct Data {
    pub train: Vec<Dataset>,
    pub unlabeled: Vec<Dataset>,
    pub val: Vec<Dataset>,
    pub test: Vec<Dataset>,
}

fn labeled_only(sets: Vec<Dataset>) -> Vec<Dataset> {
    sets.into_iter()
        .map(|mut d| {
            d.clips.retain(|c| c.mos.is_some());
            d
        })
        .filter(|d| !d.is_empty())
        .collect()
}

impl Data {
    /// Synthesize the corpus in memory.
    pub fn generate(cfg: &ExperimentConfig) -> Result<Data> {
        let mut splits = materialize(&cfg.corpus, cfg.stage_seed(Stage::Corpus), &cfg.corpus.features)?;
        let mut take = |s: Split| group(splits.remove(&s).unwrap_or_default());
        let train_all = take(Split::Train);
        let (val, test) = (take(Split::Val), take(Split::Test));
        let mut unlabeled: Vec<Dataset> = Vec::new();
        for d in &train_all {
            let clips: Vec<_> = d.clips.iter().filter(|c| c.mos.is_none()).cloned().collect();
            if !clips.is_empty() {
                unlabeled.push(Dataset { id: d.id.clone(), clips });
            }
        }
        Ok(Data {
            train: labeled_only(train_all),
            unlabeled,
            val: labeled_only(val),
            test: labeled_only(test),
        })
    }

    /// Read a corpus written by `build_corpus`.
    pub fn load(root: &Path, cfg: &ExperimentConfig) -> Result<Data> {
        let feat = &cfg.corpus.features;
        Ok(Data {
            train: load_split(root, Split::Train, Labels::Labeled, feat)?,
            unlabeled: load_split(root, Split::Train, Labels::Unlabeled, feat)?,
            val: load_split(root, Split::Val, Labels::Labeled, feat)?,
            test: load_split(root, Split::Test, Labels::Labeled, feat)?,
        })
    }
}

/// Per-dataset transforms of the oracle teacher: the rating-scale
/// distortions each dataset was generated with.
pub fn oracle_bias(corpus: &CorpusConfig) -> BiasTransform {
    let mut b = BiasTransform::identity();
    for d in corpus.datasets.iter().filter(|d| d.labeled) {
        b.per_dataset
            .insert(d.id.clone(), Affine::new(d.oracle_scale as f32, d.oracle_shift as f32));
    }
    b
}

pub fn teacher(cfg: &ExperimentConfig) -> Result<TeacherHandle> {
    match cfg.teacher.backend {
        TeacherKind::Oracle => TeacherHandle::oracle(
            cfg.teacher.noise_std,
            cfg.stage_seed(Stage::Teacher),
            oracle_bias(&cfg.corpus),
        ),
        TeacherKind::Model => {
            let path = cfg
                .teacher
                .checkpoint
                .as_ref()
                .ok_or_else(|| Error::Config("teacher.checkpoint is required for backend = model".into()))?;
            Ok(TeacherHandle::model(checkpoint::load(path)?))
        }
    }
}

pub fn fresh_student(cfg: &ExperimentConfig) -> Result<QualityModel> {
    QualityModel::new(cfg.student.resolve()?, cfg.stage_seed(Stage::Init))
}

pub fn train_baseline(cfg: &ExperimentConfig, data: &Data) -> Result<TrainOutcome> {
    train_labeled(fresh_student(cfg)?, &data.train, &data.val, &cfg.train.to_config(cfg.stage_seed(Stage::Train)))
}

pub fn distill_student(cfg: &ExperimentConfig, data: &Data, teacher: &TeacherHandle) -> Result<TrainOutcome> {
    let tc = cfg.distill.to_config(cfg.stage_seed(Stage::Distill));
    distill(fresh_student(cfg)?, teacher, &data.unlabeled, &data.train, &data.val, &tc)
}

/// Run the pruning schedule for one method from `source`.
pub fn prune(
    cfg: &ExperimentConfig,
    data: &Data,
    teacher: &TeacherHandle,
    source: QualityModel,
    method: PruneMethod,
    out_dir: Option<&Path>,
) -> Result<Vec<TrajectoryPoint>> {
    let p = &cfg.prune;
    let pseudo;
    let prune_data = if p.use_unlabeled {
        pseudo = pseudo_labels(teacher, &data.unlabeled, cfg.distill.max_skip_rate)?;
        PruneData {
            train: &pseudo,
            val: &data.val,
            universal_targets: true,
        }
    } else {
        PruneData {
            train: &data.train,
            val: &data.val,
            universal_targets: false,
        }
    };
    let mut state = PruneState::for_model(&source, p.step_rate, p.smoothing)?;
    let seed = crate::corpus::mix_seed(cfg.stage_seed(Stage::Prune), method as u64);
    run_prune_schedule(source, prune_data, &mut state, method, p, seed, out_dir)
}
