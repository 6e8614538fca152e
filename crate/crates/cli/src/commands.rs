use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};

use log::info;
use mosdistill::bias::BiasTransform;
use mosdistill::checkpoint;
use mosdistill::config::{self, ExperimentConfig, PruneSource, Stage, TeacherKind};
use mosdistill::corpus::{build_corpus, load_split, Dataset, Labels, Split};
use mosdistill::eval::{self, EvalReport};
use mosdistill::pipeline::{self, Data};
use mosdistill::train::{write_history, TeacherHandle};
use mosdistill::Error;

use crate::layout::{Layout, LOCK, RESOLVED};
use crate::{Cli, Verb};

pub const EXIT_IO: u8 = 2;
pub const EXIT_PREREQ: u8 = 3;
pub const EXIT_CONFIG: u8 = 4;
pub const EXIT_NUMERIC: u8 = 5;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Ingest { .. } | Error::Checkpoint(_) => EXIT_IO,
            Error::Config(_) | Error::Invalid(_) => EXIT_CONFIG,
            Error::Teacher(_) => EXIT_PREREQ,
            _ => EXIT_NUMERIC,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn io(path: &Path, e: std::io::Error) -> Failure {
    Failure::new(EXIT_IO, format!("{}: {e}", path.display()))
}

/// Removes the lock file when the command ends.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Outcome<Lock> {
        let path = dir.join(LOCK);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => Err(Failure::new(
                EXIT_IO,
                format!("{} is locked by another command ({})", dir.display(), path.display()),
            )),
            Err(e) => Err(io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct Plan {
    needs: Vec<PathBuf>,
    writes: Vec<PathBuf>,
}

fn load_config(cli: &Cli) -> Outcome<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::new(EXIT_CONFIG, "--config is required"))?;
    let overrides = config::env_overrides(std::env::vars());
    let mut cfg = config::load(path, &overrides)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg.resolved()?)
}

fn source_stage(cfg: &ExperimentConfig) -> &'static str {
    match cfg.prune.source {
        PruneSource::Baseline => "baseline",
        PruneSource::Distilled => "distilled",
    }
}

fn plan(verb: Verb, cfg: &ExperimentConfig, l: &Layout) -> Plan {
    let mut needs = Vec::new();
    let mut writes = Vec::new();
    if verb != Verb::Synth {
        needs.extend(l.manifests());
    }
    match verb {
        Verb::Synth => writes.push(l.corpus()),
        Verb::Train => writes.extend([l.checkpoint("baseline"), l.history("baseline")]),
        Verb::Distill => {
            if let (TeacherKind::Model, Some(p)) = (cfg.teacher.backend, &cfg.teacher.checkpoint) {
                needs.push(p.clone());
            }
            writes.extend([l.checkpoint("distilled"), l.history("distilled")]);
        }
        Verb::Prune => {
            needs.push(l.checkpoint(source_stage(cfg)));
            if cfg.prune.use_unlabeled {
                if let (TeacherKind::Model, Some(p)) = (cfg.teacher.backend, &cfg.teacher.checkpoint) {
                    needs.push(p.clone());
                }
            }
            writes.push(l.pruned_dir());
        }
        Verb::Eval => writes.push(l.reports()),
        Verb::Sweep => writes.extend([l.sweep_csv(), l.sweep_dat()]),
    }
    Plan { needs, writes }
}

/// Which command creates a prerequisite.
fn producer(path: &Path, l: &Layout) -> &'static str {
    if l.manifests().iter().any(|m| m == path) {
        "run `mosdistill synth` first"
    } else if path == l.checkpoint("baseline") {
        "run `mosdistill train` first"
    } else if path == l.checkpoint("distilled") {
        "run `mosdistill distill` first"
    } else {
        "set by teacher.checkpoint"
    }
}

pub fn run(cli: &Cli) -> Outcome {
    let cfg = load_config(cli)?;
    let l = Layout::new(&cfg.out_dir);
    let plan = plan(cli.verb, &cfg, &l);
    if let Some(missing) = plan.needs.iter().find(|p| !p.exists()) {
        return Err(Failure::new(
            EXIT_PREREQ,
            format!("missing prerequisite {} ({})", missing.display(), producer(missing, &l)),
        ));
    }
    let models = match cli.verb {
        Verb::Eval | Verb::Sweep => {
            let m = model_inputs(&cfg, &l)?;
            let need = if cli.verb == Verb::Sweep { 2 } else { 1 };
            if m.len() + usize::from(cfg.eval.include_teacher) < need {
                return Err(Failure::new(
                    EXIT_PREREQ,
                    format!("missing prerequisite: no checkpoints found in {}", l.root.display()),
                ));
            }
            m
        }
        _ => Vec::new(),
    };
    let resolved = cfg.to_toml()?;

    if cli.dry_run {
        println!("# {:?} plan", cli.verb);
        for p in &plan.needs {
            println!("# reads  {}", p.display());
        }
        for m in &models {
            println!("# reads  {}", m.path.display());
        }
        for p in &plan.writes {
            println!("# writes {}", p.display());
        }
        print!("{resolved}");
        return Ok(());
    }

    if !cli.force {
        if let Some(p) = plan.writes.iter().find(|p| p.exists()) {
            return Err(Failure::new(
                EXIT_IO,
                format!("{} already exists; rerun with --force to overwrite", p.display()),
            ));
        }
    }
    fs::create_dir_all(&l.root).map_err(|e| io(&l.root, e))?;
    let _lock = Lock::acquire(&l.root)?;
    for p in &plan.writes {
        if p.is_dir() {
            fs::remove_dir_all(p).map_err(|e| io(p, e))?;
        }
    }
    let rc = l.root.join(RESOLVED);
    fs::write(&rc, &resolved).map_err(|e| io(&rc, e))?;

    match cli.verb {
        Verb::Synth => synth(&cfg, &l),
        Verb::Train => train(&cfg, &l),
        Verb::Distill => distill(&cfg, &l),
        Verb::Prune => prune(&cfg, &l),
        Verb::Eval => evaluate(&cfg, &l, &models),
        Verb::Sweep => sweep(&cfg, &l, &models),
    }
}

fn synth(cfg: &ExperimentConfig, l: &Layout) -> Outcome {
    let summary = build_corpus(&cfg.corpus, cfg.stage_seed(Stage::Corpus), &l.corpus())?;
    println!("{summary}");
    Ok(())
}

fn split(cfg: &ExperimentConfig, l: &Layout, s: Split, which: Labels) -> Outcome<Vec<Dataset>> {
    Ok(load_split(&l.corpus(), s, which, &cfg.corpus.features)?)
}

fn train(cfg: &ExperimentConfig, l: &Layout) -> Outcome {
    let data = Data {
        train: split(cfg, l, Split::Train, Labels::Labeled)?,
        val: split(cfg, l, Split::Val, Labels::Labeled)?,
        ..Default::default()
    };
    let out = pipeline::train_baseline(cfg, &data)?;
    checkpoint::save(&out.model, &l.checkpoint("baseline"))?;
    write_history(&l.history("baseline"), &out.history)?;
    println!(
        "baseline: best step {:?}, val MSE {:?}",
        out.best_step, out.best_val_mse
    );
    Ok(())
}

fn teacher(cfg: &ExperimentConfig) -> Outcome<TeacherHandle> {
    Ok(pipeline::teacher(cfg)?)
}

fn distill(cfg: &ExperimentConfig, l: &Layout) -> Outcome {
    let t = teacher(cfg)?;
    let data = Data {
        train: split(cfg, l, Split::Train, Labels::Labeled)?,
        unlabeled: split(cfg, l, Split::Train, Labels::Unlabeled)?,
        val: split(cfg, l, Split::Val, Labels::Labeled)?,
        ..Default::default()
    };
    let out = pipeline::distill_student(cfg, &data, &t)?;
    checkpoint::save(&out.model, &l.checkpoint("distilled"))?;
    write_history(&l.history("distilled"), &out.history)?;
    println!(
        "distilled: best step {:?}, val MSE {:?}",
        out.best_step, out.best_val_mse
    );
    Ok(())
}

fn prune(cfg: &ExperimentConfig, l: &Layout) -> Outcome {
    let source = checkpoint::load(&l.checkpoint(source_stage(cfg)))?;
    let t = if cfg.prune.use_unlabeled {
        teacher(cfg)?
    } else {
        TeacherHandle::oracle(0.0, 0, BiasTransform::identity())?
    };
    let data = Data {
        train: split(cfg, l, Split::Train, Labels::Labeled)?,
        unlabeled: if cfg.prune.use_unlabeled {
            split(cfg, l, Split::Train, Labels::Unlabeled)?
        } else {
            Vec::new()
        },
        val: split(cfg, l, Split::Val, Labels::Labeled)?,
        ..Default::default()
    };
    let dir = l.pruned_dir();
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    for &method in &cfg.prune.methods {
        let points = pipeline::prune(cfg, &data, &t, source.clone(), method, Some(&dir))?;
        mosdistill::prune::write_trajectory(&l.trajectory(method), &points)?;
        for p in &points {
            println!(
                "{}: {:.1} effective params ({:.3} remaining), val MSE {:.5}",
                p.path.as_deref().unwrap_or(Path::new("-")).display(),
                p.effective_params,
                p.remaining_fraction,
                p.val_mse
            );
        }
    }
    Ok(())
}

/// A checkpoint to score, with its sweep method tag.
struct ModelInput {
    id: String,
    method: String,
    path: PathBuf,
}

fn model_inputs(cfg: &ExperimentConfig, l: &Layout) -> Outcome<Vec<ModelInput>> {
    let mut out = Vec::new();
    for stage in ["baseline", "distilled"] {
        let path = l.checkpoint(stage);
        if path.exists() {
            out.push(ModelInput {
                id: stage.into(),
                method: stage.into(),
                path,
            });
        }
    }
    let dir = l.pruned_dir();
    if dir.is_dir() {
        let mut found: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "sqac"))
            .collect();
        found.sort();
        for path in found {
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            let method = format!("pruned_{}", id.split('_').next().unwrap_or_default());
            out.push(ModelInput { id, method, path });
        }
    }
    for x in &cfg.eval.extra {
        if !x.path.exists() {
            return Err(Failure::new(
                EXIT_PREREQ,
                format!("missing prerequisite {}", x.path.display()),
            ));
        }
        out.push(ModelInput {
            id: x.id.clone(),
            method: x.method.clone(),
            path: x.path.clone(),
        });
    }
    Ok(out)
}

/// Reports for every input plus the teacher, keyed by method tag. The
/// oracle teacher has no parameter count and is left out of the sweep.
fn score_all(cfg: &ExperimentConfig, l: &Layout, models: &[ModelInput]) -> Outcome<Vec<(String, EvalReport, bool)>> {
    let test = split(cfg, l, Split::Test, Labels::Labeled)?;
    let mode = cfg.eval.bias_mode;
    let mut out = Vec::new();
    for m in models {
        let model = checkpoint::load(&m.path)?;
        let r = eval::evaluate(&m.id, &model, &test, mode)?;
        info!("{}: weighted PCC {:?}", m.id, r.weighted_mean);
        out.push((m.method.clone(), r, true));
    }
    if cfg.eval.include_teacher {
        let t = teacher(cfg)?;
        let (size, sized) = match &cfg.teacher.backend {
            TeacherKind::Model => {
                let p = cfg.teacher.checkpoint.as_ref().expect("validated");
                (checkpoint::load(p)?.count_parameters(true), true)
            }
            TeacherKind::Oracle => (0.0, false),
        };
        let r = eval::evaluate_teacher("teacher", &t, size, &test, mode)?;
        out.push(("teacher".into(), r, sized));
    }
    Ok(out)
}

fn evaluate(cfg: &ExperimentConfig, l: &Layout, models: &[ModelInput]) -> Outcome {
    let dir = l.reports();
    fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
    for (_, r, _) in score_all(cfg, l, models)? {
        r.write_csv(&l.report(&r.model_id))?;
        println!("{}: weighted PCC {}", r.model_id, fmt(r.weighted_mean));
    }
    Ok(())
}

fn fmt(v: Option<f64>) -> String {
    v.map(|p| format!("{p:.4}")).unwrap_or_else(|| "NA".into())
}

fn sweep(cfg: &ExperimentConfig, l: &Layout, models: &[ModelInput]) -> Outcome {
    let reports: Vec<(String, EvalReport)> = score_all(cfg, l, models)?
        .into_iter()
        .filter(|r| r.2)
        .map(|(m, r, _)| (m, r))
        .collect();
    let rows = eval::size_sweep(&reports)?;
    eval::write_sweep(&l.sweep_csv(), &l.sweep_dat(), &rows)?;
    for r in &rows {
        println!("{:>12} {:<16} {:>10.0} {}", r.model_id, r.method, r.effective_params, fmt(r.weighted_pcc));
    }
    Ok(())
}
