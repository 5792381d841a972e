//! The six ablation grids. Every row runs the full loop once per seed on that
//! seed's benchmark and reports the mean patient-level test AUC.

use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;

use nodule_core::evaluate::roc_curve;

use crate::commands::{run_self_train, Data};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, fmt_f64, write_artifact, Record};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Student architectures.
    Models,
    /// Soft against hard pseudo labels.
    Labels,
    /// Warm-started against freshly initialized students.
    WarmStart,
    /// Noise sources.
    Noise,
    /// Linear against Maxout head.
    Head,
    /// Mixup concentration sweep.
    Mixup,
}

pub const MIXUP_ALPHAS: [f64; 10] = [0.1, 0.2, 0.4, 0.8, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0];

impl Suite {
    pub const ALL: [Suite; 6] = [Suite::Models, Suite::Labels, Suite::WarmStart, Suite::Noise, Suite::Head, Suite::Mixup];

    pub fn id(self) -> &'static str {
        match self {
            Suite::Models => "b1",
            Suite::Labels => "b2",
            Suite::WarmStart => "b3",
            Suite::Noise => "b4",
            Suite::Head => "b5",
            Suite::Mixup => "b6",
        }
    }

    pub fn alias(self) -> &'static str {
        match self {
            Suite::Models => "models",
            Suite::Labels => "labels",
            Suite::WarmStart => "warmstart",
            Suite::Noise => "noise",
            Suite::Head => "head",
            Suite::Mixup => "mixup",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Suite::ALL
            .into_iter()
            .find(|x| x.id() == s || x.alias() == s)
            .ok_or_else(|| format!("unknown suite `{s}`; expected b1..b6 or models, labels, warmstart, noise, head, mixup"))
    }
}

/// One configuration of a grid, as key changes on top of the base config.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub changes: Vec<(&'static str, String)>,
}

fn row(name: &str, changes: &[(&'static str, &str)]) -> AblationRow {
    AblationRow {
        name: name.to_string(),
        changes: changes.iter().map(|&(k, v)| (k, v.to_string())).collect(),
    }
}

const FULL_NOISE: &str = "augmentation,stochastic_depth,dropout";

pub fn rows(suite: Suite) -> Vec<AblationRow> {
    match suite {
        Suite::Models => ["maxout_a", "resnet_a", "resnet_a_maxout", "maxout_local_global"]
            .iter()
            .map(|v| row(v, &[("model.student", v)]))
            .collect(),
        Suite::Labels => vec![
            row("hard_labels", &[("selftrain.labels", "hard")]),
            row("soft_labels", &[("selftrain.labels", "soft")]),
        ],
        // warm starting copies the teacher, so both rows use one architecture
        Suite::WarmStart => {
            let same = [("model.teacher", "maxout_local_global"), ("model.student", "maxout_local_global")];
            vec![
                row("warm_start", &[same[0], same[1], ("selftrain.warm_start", "true")]),
                row("no_warm_start", &[same[0], same[1], ("selftrain.warm_start", "false")]),
            ]
        }
        Suite::Noise => vec![
            row("teacher_only", &[("selftrain.iterations", "1")]),
            row("noisy_student", &[("noise.student", FULL_NOISE)]),
            row("without_augmentation", &[("noise.student", "stochastic_depth,dropout")]),
            row("without_augmentation_and_sd", &[("noise.student", "dropout")]),
            row("no_noise", &[("noise.student", "none")]),
            row(
                "noised_teacher",
                &[("noise.student", FULL_NOISE), ("noise.noised_teacher", "true")],
            ),
        ],
        Suite::Head => vec![
            row("linear_head", &[("model.student", "local_global_linear")]),
            row("maxout_head", &[("model.student", "maxout_local_global")]),
        ],
        Suite::Mixup => std::iter::once(row("no_mixup", &[("mixup.alpha", "none")]))
            .chain(MIXUP_ALPHAS.iter().map(|a| AblationRow {
                name: format!("alpha_{a}"),
                changes: vec![("mixup.alpha", a.to_string())],
            }))
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RowResult {
    pub name: String,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    pub mean_auc: f64,
}

pub fn seeds(base: &ExperimentConfig) -> Vec<u64> {
    (0..base.ablation_seeds as u64).map(|i| base.seed + i).collect()
}

fn join<T: fmt::Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

/// Runs every row; each writes its own record under `dir/<suite>/<row>/`.
pub fn run_suite(suite: Suite, base: &ExperimentConfig, dir: &Path) -> CliResult<Vec<RowResult>> {
    let seeds = seeds(base);
    let data = seeds
        .iter()
        .map(|&s| Data::synthesize(&base.with(&[("seed", s.to_string())])?))
        .collect::<CliResult<Vec<_>>>()?;
    let mut results = Vec::new();
    for (i, r) in rows(suite).into_iter().enumerate() {
        let row_dir = dir.join(suite.id()).join(format!("{i:02}_{}", r.name));
        ensure_dir(&row_dir)?;
        let mut aucs = Vec::with_capacity(seeds.len());
        let mut record = Record::new();
        for (&seed, d) in seeds.iter().zip(&data) {
            let mut changes = r.changes.clone();
            changes.push(("seed", seed.to_string()));
            let config = base.with(&changes)?;
            let (_, scores) = run_self_train(&config, d)?;
            let auc = roc_curve(&scores, &d.test_labels)?.auc;
            if !auc.is_finite() {
                return Err(CliError::Numeric(format!("row {} seed {seed}: AUC is {auc}", r.name)));
            }
            record.push(format!("seed.{seed}.config_sha256"), config.hash());
            record.push(format!("seed.{seed}.test_auc"), fmt_f64(auc));
            aucs.push(auc);
        }
        let mean_auc = aucs.iter().sum::<f64>() / aucs.len() as f64;
        record.push("row", &r.name).push("mean_auc", fmt_f64(mean_auc));
        for (k, v) in &r.changes {
            record.push(format!("change.{k}"), v);
        }
        write_artifact(&row_dir.join("metrics.txt"), base, &record.render())?;
        results.push(RowResult {
            name: r.name,
            seeds: seeds.clone(),
            aucs,
            mean_auc,
        });
    }
    Ok(results)
}

/// Summary table `ablation_<suite>.csv`: one line per row.
/// Writes the suite table and returns it.
pub fn write_suite(suite: Suite, rows: &[RowResult], base: &ExperimentConfig, dir: &Path) -> CliResult<String> {
    let mut csv = String::from("suite,row,mean_auc,seeds,aucs\n");
    for r in rows {
        let aucs: Vec<String> = r.aucs.iter().map(|&a| fmt_f64(a)).collect();
        let _ = writeln!(
            csv,
            "{suite},{},{},{},{}",
            r.name,
            fmt_f64(r.mean_auc),
            join(&r.seeds).replace(',', ";"),
            aucs.join(";")
        );
    }
    write_artifact(&dir.join(format!("ablation_{suite}.csv")), base, &csv)?;
    Ok(csv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_sizes() {
        let counts: Vec<usize> = Suite::ALL.iter().map(|&s| rows(s).len()).collect();
        assert_eq!(counts, vec![4, 2, 2, 6, 2, 11]);
    }

    #[test]
    fn every_row_is_a_valid_config() {
        let base = ExperimentConfig::default();
        for suite in Suite::ALL {
            for r in rows(suite) {
                base.with(&r.changes).unwrap_or_else(|e| panic!("{suite} {}: {e}", r.name));
            }
        }
    }

    #[test]
    fn suite_names_and_aliases() {
        assert_eq!("noise".parse::<Suite>().unwrap(), Suite::Noise);
        assert_eq!("b6".parse::<Suite>().unwrap(), Suite::Mixup);
        assert!("b7".parse::<Suite>().is_err());
        assert!(rows(Suite::Noise).iter().any(|r| r.name == "noised_teacher"));
        assert_eq!(seeds(&ExperimentConfig::default().with(&[("seed", "4".into())]).unwrap()), vec![4, 5, 6]);
    }
}
