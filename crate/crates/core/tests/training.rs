use mosdistill::corpus::{group, materialize, CorpusConfig, DatasetConfig, Dataset, Split};
use mosdistill::eval::pearson;
use mosdistill::model::QualityModel;
use mosdistill::pipeline::{self, Data};
use mosdistill::presets;
use mosdistill::train::{train_labeled, validation_mse, TrainConfig, Weighting};

fn constant(sets: Vec<Dataset>, mos: f64) -> Vec<Dataset> {
    sets.into_iter()
        .map(|mut d| {
            for c in &mut d.clips {
                c.mos = Some(mos);
            }
            d
        })
        .collect()
}

#[test]
fn constant_labels_are_learned() {
    let cfg = CorpusConfig {
        duration_s: 1.0,
        datasets: vec![DatasetConfig {
            id: "flat".into(),
            labeled: true,
            train: 24,
            val: 8,
            test: 0,
            oracle_scale: 1.0,
            oracle_shift: 0.0,
        }],
        ..Default::default()
    };
    let mut s = materialize(&cfg, 11, &cfg.features).unwrap();
    let train = constant(group(s.remove(&Split::Train).unwrap()), 3.0);
    let val = constant(group(s.remove(&Split::Val).unwrap()), 3.0);
    let model = QualityModel::new(presets::tiny_student(), 5).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        batch_size: 8,
        total_steps: 2000,
        validate_every: 250,
        seed: 3,
        ..TrainConfig::labeled()
    };
    let out = train_labeled(model, &train, &val, &tc).unwrap();
    let mse = validation_mse(&out.model, &val, Weighting::Clips).unwrap();
    assert!(mse < 0.01, "{mse}");
    for c in &val[0].clips {
        let m = out.model.mos(&c.features, Some("flat")).unwrap();
        assert!((m - 3.0).abs() < 0.1, "{m}");
    }
}

// Pure pseudo-labels: the student should track the teacher on held-out clips.
// The desk preset's 2000 unlabeled clips are too few for that; this pool is
// larger and training runs longer.
#[test]
fn teacher_only_distillation_tracks_the_teacher() {
    let mut cfg = presets::desk_experiment().unwrap();
    cfg.corpus.datasets[0].train = 16_000;
    cfg.distill.mix_in_p = 0.0;
    cfg.distill.total_steps = 3250;
    let data = Data::generate(&cfg).unwrap();
    let teacher = pipeline::teacher(&cfg).unwrap();
    let out = pipeline::distill_student(&cfg, &data, &teacher).unwrap();
    let (mut student, mut reference) = (Vec::new(), Vec::new());
    for c in data.test.iter().flat_map(|d| &d.clips) {
        student.push(out.model.mos(&c.features, None).unwrap());
        reference.push(teacher.score(c).unwrap());
    }
    let r = pearson(&student, &reference).unwrap();
    eprintln!("student vs teacher on {} held-out clips: {r:.4}", student.len());
    assert!(r >= 0.9, "{r}");
}
