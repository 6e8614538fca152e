//! Pearson correlation, per-dataset reports and the size sweep table.

use std::path::Path;

use log::warn;

use crate::config::BiasMode;
use crate::corpus::{write_lines, Clip, Dataset};
use crate::error::{Error, Result};
use crate::model::QualityModel;
use crate::train::TeacherHandle;

/// Sample Pearson correlation, two-pass and mean-centred in f64.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Invalid(format!("pearson: lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::UndefinedCorrelation(format!("{} points, need at least 3", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Invalid("pearson: non-finite input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `Σ nᵢ·vᵢ / Σ nᵢ`.
pub fn weighted_mean(items: &[(usize, f64)]) -> Option<f64> {
    let n: usize = items.iter().map(|i| i.0).sum();
    (n > 0).then(|| items.iter().map(|&(k, v)| k as f64 * v).sum::<f64>() / n as f64)
}

pub fn unweighted_mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetScore {
    pub dataset_id: String,
    pub n_clips: usize,
    /// `None` when the dataset was excluded.
    pub pcc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub model_id: String,
    pub effective_params: f64,
    pub datasets: Vec<DatasetScore>,
    pub weighted_mean: Option<f64>,
    pub unweighted_mean: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|p| format!("{p:.6}")).unwrap_or_else(|| "NA".into())
}

impl EvalReport {
    pub fn from_scores(model_id: &str, effective_params: f64, datasets: Vec<DatasetScore>) -> Self {
        let kept: Vec<(usize, f64)> = datasets.iter().filter_map(|d| d.pcc.map(|p| (d.n_clips, p))).collect();
        let values: Vec<f64> = kept.iter().map(|k| k.1).collect();
        EvalReport {
            model_id: model_id.to_string(),
            effective_params,
            weighted_mean: weighted_mean(&kept),
            unweighted_mean: unweighted_mean(&values),
            datasets,
        }
    }

    pub fn csv_lines(&self) -> Vec<String> {
        let mut out = vec!["dataset_id,n_clips,pcc".to_string()];
        for d in &self.datasets {
            out.push(format!("{},{},{}", d.dataset_id, d.n_clips, fmt_opt(d.pcc)));
        }
        let used: Vec<&DatasetScore> = self.datasets.iter().filter(|d| d.pcc.is_some()).collect();
        let n: usize = used.iter().map(|d| d.n_clips).sum();
        out.push(format!("weighted_mean,{n},{}", fmt_opt(self.weighted_mean)));
        out.push(format!("unweighted_mean,{},{}", used.len(), fmt_opt(self.unweighted_mean)));
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_lines(path, &self.csv_lines())
    }
}

/// Per-dataset PCC of `score` against labels. Datasets with fewer than
/// three labeled clips, or whose predictions are constant, are excluded
/// with a warning.
pub fn evaluate_with<F>(model_id: &str, effective_params: f64, test: &[Dataset], mut score: F) -> Result<EvalReport>
where
    F: FnMut(&Clip, &str) -> Result<f64>,
{
    let mut rows = Vec::new();
    for d in test {
        let labeled: Vec<&Clip> = d.clips.iter().filter(|c| c.mos.is_some()).collect();
        let n = labeled.len();
        if n < 3 {
            warn!("{model_id}: dataset `{}` has {n} labeled clips; excluded", d.id);
            rows.push(DatasetScore {
                dataset_id: d.id.clone(),
                n_clips: n,
                pcc: None,
            });
            continue;
        }
        let mut pred = Vec::with_capacity(n);
        for c in &labeled {
            pred.push(score(c, &d.id)?);
        }
        let truth: Vec<f64> = labeled.iter().map(|c| c.mos.expect("filtered")).collect();
        let pcc = match pearson(&pred, &truth) {
            Ok(p) => Some(p),
            Err(Error::UndefinedCorrelation(m)) => {
                warn!("{model_id}: dataset `{}` excluded: {m}", d.id);
                None
            }
            Err(e) => return Err(e),
        };
        rows.push(DatasetScore {
            dataset_id: d.id.clone(),
            n_clips: n,
            pcc,
        });
    }
    Ok(EvalReport::from_scores(model_id, effective_params, rows))
}

pub fn evaluate(model_id: &str, model: &QualityModel, test: &[Dataset], mode: BiasMode) -> Result<EvalReport> {
    let eff = model.count_parameters(true);
    evaluate_with(model_id, eff, test, |c, ds| match mode {
        BiasMode::PerDataset => model.mos(&c.features, Some(ds)),
        BiasMode::Universal => model.mos(&c.features, None),
    })
}

pub fn evaluate_teacher(model_id: &str, teacher: &TeacherHandle, effective_params: f64, test: &[Dataset], mode: BiasMode) -> Result<EvalReport> {
    evaluate_with(model_id, effective_params, test, |c, ds| match mode {
        BiasMode::PerDataset => teacher.score_for(c, Some(ds)),
        BiasMode::Universal => teacher.score_for(c, None),
    })
}

pub const METHOD_TAGS: [&str; 5] = ["baseline", "distilled", "pruned_taylor", "pruned_magnitude", "teacher"];

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub model_id: String,
    pub method: String,
    pub effective_params: f64,
    pub weighted_pcc: Option<f64>,
}

/// Rows sorted by effective size, then id.
pub fn size_sweep(reports: &[(String, EvalReport)]) -> Result<Vec<SweepRow>> {
    if reports.len() < 2 {
        return Err(Error::Invalid("size sweep needs at least two checkpoints".into()));
    }
    let mut rows = Vec::new();
    for (method, r) in reports {
        if !METHOD_TAGS.contains(&method.as_str()) {
            return Err(Error::Invalid(format!("unknown method tag `{method}`")));
        }
        rows.push(SweepRow {
            model_id: r.model_id.clone(),
            method: method.clone(),
            effective_params: r.effective_params,
            weighted_pcc: r.weighted_mean,
        });
    }
    rows.sort_by(|a, b| {
        a.effective_params
            .total_cmp(&b.effective_params)
            .then_with(|| a.model_id.cmp(&b.model_id))
    });
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> Vec<String> {
    let mut out = vec!["model_id,method,effective_params,weighted_pcc".to_string()];
    for r in rows {
        out.push(format!(
            "{},{},{:.1},{}",
            r.model_id,
            r.method,
            r.effective_params,
            fmt_opt(r.weighted_pcc)
        ));
    }
    out
}

/// gnuplot data: one indexed block per method, two blank lines apart.
pub fn sweep_dat(rows: &[SweepRow]) -> Vec<String> {
    let mut out = Vec::new();
    for tag in METHOD_TAGS {
        let block: Vec<&SweepRow> = rows.iter().filter(|r| r.method == tag).collect();
        if block.is_empty() {
            continue;
        }
        if !out.is_empty() {
            out.push(String::new());
            out.push(String::new());
        }
        out.push(format!("# {tag}: effective_params weighted_pcc"));
        for r in block {
            out.push(format!("{:.1} {}", r.effective_params, fmt_opt(r.weighted_pcc)));
        }
    }
    out
}

pub fn write_sweep(csv_path: &Path, dat_path: &Path, rows: &[SweepRow]) -> Result<()> {
    write_lines(csv_path, &sweep_csv(rows))?;
    write_lines(dat_path, &sweep_dat(rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureTensor;
    use proptest::prelude::*;

    #[test]
    fn examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        let r = pearson(&[1.0, 2.0, 3.0, 4.0], &[1.2, 1.9, 3.4, 3.8]).unwrap();
        assert!((r - 0.977_324).abs() < 1e-4, "{r}");
    }

    #[test]
    fn undefined_cases_are_errors() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(matches!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn weighted_mean_example() {
        let r = EvalReport::from_scores(
            "m",
            1.0,
            vec![
                DatasetScore { dataset_id: "a".into(), n_clips: 100, pcc: Some(0.8) },
                DatasetScore { dataset_id: "b".into(), n_clips: 300, pcc: Some(0.6) },
                DatasetScore { dataset_id: "c".into(), n_clips: 2, pcc: None },
            ],
        );
        assert!((r.weighted_mean.unwrap() - 0.65).abs() < 1e-15);
        assert!((r.unweighted_mean.unwrap() - 0.70).abs() < 1e-15);
        assert_eq!(
            r.csv_lines(),
            vec![
                "dataset_id,n_clips,pcc",
                "a,100,0.800000",
                "b,300,0.600000",
                "c,2,NA",
                "weighted_mean,400,0.650000",
                "unweighted_mean,2,0.700000"
            ]
        );
    }

    fn labeled(id: &str, mos: &[f64]) -> Dataset {
        Dataset {
            id: id.into(),
            clips: mos
                .iter()
                .enumerate()
                .map(|(i, &m)| Clip {
                    id: format!("{id}{i}"),
                    dataset_id: id.into(),
                    mos: Some(m),
                    spec: None,
                    features: FeatureTensor::zeros(4),
                })
                .collect(),
        }
    }

    #[test]
    fn exact_predictions_and_exclusions() {
        let test = vec![labeled("a", &[1.5, 2.0, 4.0, 3.0]), labeled("b", &[2.0, 3.0]), labeled("c", &[1.0, 2.0, 3.0])];
        let r = evaluate_with("oracle", 10.0, &test, |c, ds| Ok(if ds == "c" { 3.0 } else { c.mos.unwrap() })).unwrap();
        assert_eq!(r.datasets[0].pcc, Some(1.0));
        assert_eq!(r.datasets[1].pcc, None);
        assert_eq!(r.datasets[2].pcc, None);
        assert_eq!(r.weighted_mean, Some(1.0));
        assert_eq!(r.weighted_mean, r.unweighted_mean);
    }

    #[test]
    fn sweep_sorting_and_files() {
        let rep = |id: &str, size: f64, p: f64| {
            EvalReport::from_scores(id, size, vec![DatasetScore { dataset_id: "a".into(), n_clips: 10, pcc: Some(p) }])
        };
        let rows = size_sweep(&[
            ("distilled".into(), rep("d", 300.0, 0.8)),
            ("pruned_taylor".into(), rep("p50", 150.0, 0.7)),
            ("teacher".into(), rep("t", 900.0, 0.95)),
        ])
        .unwrap();
        let ids: Vec<&str> = rows.iter().map(|r| r.model_id.as_str()).collect();
        assert_eq!(ids, ["p50", "d", "t"]);
        assert_eq!(sweep_csv(&rows)[1], "p50,pruned_taylor,150.0,0.700000");
        let dat = sweep_dat(&rows);
        assert_eq!(dat[0], "# distilled: effective_params weighted_pcc");
        assert!(dat.contains(&"900.0 0.950000".to_string()));
        assert!(size_sweep(&[("baseline".into(), rep("x", 1.0, 0.5))]).is_err());
        assert!(size_sweep(&[("x".into(), rep("x", 1.0, 0.5)), ("y".into(), rep("y", 1.0, 0.5))]).is_err());
    }

    proptest! {
        #[test]
        fn symmetric_and_affine_invariant(
            xs in proptest::collection::vec(-10.0f64..10.0, 3..40),
            noise in proptest::collection::vec(-1.0f64..1.0, 40),
            a in 0.01f64..100.0, b in -50.0f64..50.0,
        ) {
            let ys: Vec<f64> = xs.iter().zip(&noise).map(|(x, e)| 0.3 * x + e).collect();
            if let Ok(r) = pearson(&xs, &ys) {
                prop_assert_eq!(r, pearson(&ys, &xs).unwrap());
                let up: Vec<f64> = xs.iter().map(|x| a * x + b).collect();
                let down: Vec<f64> = xs.iter().map(|x| -a * x + b).collect();
                prop_assert!((pearson(&up, &ys).unwrap() - r).abs() < 1e-12);
                prop_assert!((pearson(&down, &ys).unwrap() + r).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }

        #[test]
        fn weighted_mean_between_extremes(items in proptest::collection::vec((1usize..500, -1.0f64..1.0), 1..10)) {
            let w = weighted_mean(&items).unwrap();
            let lo = items.iter().map(|i| i.1).fold(f64::INFINITY, f64::min);
            let hi = items.iter().map(|i| i.1).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(w >= lo - 1e-12 && w <= hi + 1e-12);
        }
    }
}
