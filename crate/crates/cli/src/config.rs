//! Flat `key = value` experiment configuration with a closed schema.
//!
//! Values resolve in order of precedence: `--set key=value` flags, then the
//! config file, then the built-in default listed in [`SCHEMA`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use nodule_core::blocks::StochasticDepthConfig;
use nodule_core::mixup::MixupConfig;
use nodule_core::model::{ModelConfig, ModelVariant};
use nodule_core::optim::SgdConfig;
use nodule_core::preprocess::AugmentConfig;
use nodule_core::selftrain::{LabelMode, MixupStage, NoiseToggles, SelfTrainConfig, TrainConfig};
use nodule_core::synth::SynthConfig;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub struct KeySpec {
    pub key: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

const fn key(key: &'static str, default: &'static str, help: &'static str) -> KeySpec {
    KeySpec { key, default, help }
}

pub const SCHEMA: &[KeySpec] = &[
    key("seed", "0", "global seed; every random stream derives from it"),
    key("output.dir", "out", "output directory; `--out` overrides; excluded from the config hash"),
    key("synth.labeled_nodules", "200", "labeled nodules drawn before rater exclusion"),
    key("synth.patients", "400", "patients in the unlabeled cohort"),
    key("synth.test_patients", "200", "patients in the held-out test cohort"),
    key("synth.difficulty", "0.5", "class overlap in [0, 1]; 0 is separable"),
    key("synth.crop_size", "16", "crop edge length S, also the network input size"),
    key("synth.nodules_per_patient", "0.3,0.25,0.2,0.15,0.1", "relative weights of 1..5 detections per patient"),
    key("synth.extra_malignant_rate", "0.25", "chance that each further nodule of a cancer patient is malignant"),
    key("model.teacher", "local_global_linear", "teacher variant"),
    key("model.student", "maxout_local_global", "student variant per round, comma separated; the last repeats"),
    key("model.base_channels", "8", "channels of the first stage"),
    key("model.maxout_pieces", "2", "affine pieces of a Maxout head"),
    key("model.dropout", "0.1,0.2", "dropout after the first and second mixing stage"),
    key("model.survival", "0.8", "stochastic-depth survival of the head"),
    key("train.epochs", "30", "epochs per round"),
    key("train.batch_size", "64", "minibatch size"),
    key("train.learning_rate", "0.01", "initial SGD step size"),
    key("train.decay_factor", "0.1", "step-decay multiplier"),
    key("train.decay_every", "none", "epochs between decays, or `none`"),
    key("selftrain.iterations", "3", "rounds including the teacher round"),
    key("selftrain.labels", "soft", "pseudo labels: `soft` or `hard`"),
    key("selftrain.threshold", "0.3", "keep pseudo labels with |p - 0.5| >= threshold"),
    key("selftrain.warm_start", "false", "start students from the half-trained teacher"),
    key("noise.teacher", "dropout", "teacher noise: `none` or a list of augmentation, stochastic_depth, dropout"),
    key("noise.student", "dropout", "student noise, same form as noise.teacher"),
    key("noise.noised_teacher", "false", "infer pseudo labels with the teacher's noise live"),
    key("mixup.alpha", "none", "Beta concentration, or `none` to disable"),
    key("mixup.stage", "final", "`final` student round only, or `all` student rounds"),
    key("augment.noise_sigma", "0.05", "standard deviation of additive patch noise"),
    key("augment.blur_scales", "0.5,1,1.5", "three Gaussian blur sigmas"),
    key("eval.threshold", "0.5", "decision threshold for confusion counts"),
    key("ablate.seeds", "3", "seeds averaged per ablation row"),
];

/// Keys that do not change results and stay out of the hash.
const UNHASHED: &[&str] = &["output.dir"];

/// A resolved configuration: every schema key has a validated value.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    values: BTreeMap<&'static str, String>,
    pub seed: u64,
    pub output_dir: String,
    pub synth: SynthConfig,
    pub n_test_patients: usize,
    pub self_train: SelfTrainConfig,
    pub eval_threshold: f64,
    pub ablation_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::resolve(&[], &[]).expect("built-in defaults are valid")
    }
}

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_text(text: &str) -> CliResult<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::config(line, format!("line {}: expected `key = value`", n + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

/// Parses a `--set key=value` flag.
pub fn parse_override(flag: &str) -> CliResult<(String, String)> {
    let (k, v) = flag
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got `{flag}`")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

fn spec(k: &str) -> CliResult<&'static KeySpec> {
    SCHEMA
        .iter()
        .find(|s| s.key == k)
        .ok_or_else(|| CliError::config(k, "unknown key"))
}

impl ExperimentConfig {
    /// Reads an optional file and applies `--set` flags on top.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let from_file = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
                parse_text(&text)?
            }
            None => Vec::new(),
        };
        let flags = overrides.iter().map(|f| parse_override(f)).collect::<CliResult<Vec<_>>>()?;
        Self::resolve(&from_file, &flags)
    }

    pub fn resolve(from_file: &[(String, String)], flags: &[(String, String)]) -> CliResult<Self> {
        let mut values: BTreeMap<&'static str, String> =
            SCHEMA.iter().map(|s| (s.key, s.default.to_string())).collect();
        let mut seen = BTreeMap::new();
        for (k, v) in from_file {
            let s = spec(k)?;
            if seen.insert(s.key, ()).is_some() {
                return Err(CliError::config(k.as_str(), "set twice in the config file"));
            }
            values.insert(s.key, v.clone());
        }
        for (k, v) in flags {
            values.insert(spec(k)?.key, v.clone());
        }
        Self::build(values)
    }

    /// Same configuration with some keys replaced.
    pub fn with(&self, changes: &[(&str, String)]) -> CliResult<Self> {
        let mut values = self.values.clone();
        for (k, v) in changes {
            values.insert(spec(k)?.key, v.clone());
        }
        Self::build(values)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    /// Every hashed key in schema order, one `key = value` line each.
    pub fn canonical_text(&self) -> String {
        let mut out = String::new();
        for s in SCHEMA.iter().filter(|s| !UNHASHED.contains(&s.key)) {
            let _ = writeln!(out, "{} = {}", s.key, self.values[s.key]);
        }
        out
    }

    /// SHA-256 of [`canonical_text`](Self::canonical_text), hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_text().as_bytes()))
    }

    fn build(values: BTreeMap<&'static str, String>) -> CliResult<Self> {
        let r = Reader { values: &values };
        let seed: u64 = r.parse("seed")?;
        let crop_size: usize = r.parse("synth.crop_size")?;
        let synth = SynthConfig {
            n_labeled_nodules: r.parse("synth.labeled_nodules")?,
            n_patients: r.parse("synth.patients")?,
            nodules_per_patient: r.array("synth.nodules_per_patient")?,
            extra_malignant_rate: r.parse("synth.extra_malignant_rate")?,
            difficulty: r.parse("synth.difficulty")?,
            crop_size,
            seed,
            ..SynthConfig::default()
        };
        synth.validate().map_err(|e| CliError::config("synth.*", e.to_string()))?;
        let n_test_patients: usize = r.parse("synth.test_patients")?;
        if n_test_patients == 0 {
            return Err(CliError::config("synth.test_patients", "must be positive"));
        }

        let model = ModelConfig {
            variant: r.parse("model.teacher")?,
            input_size: crop_size,
            base_channels: r.parse("model.base_channels")?,
            maxout_pieces: r.parse("model.maxout_pieces")?,
            dropout_rates: r.array("model.dropout")?,
            stochastic_depth: StochasticDepthConfig {
                survival: r.parse("model.survival")?,
            },
            seed,
        };
        model.validate().map_err(|e| CliError::config("model.*", e.to_string()))?;
        let student_variants = r
            .list("model.student")?
            .into_iter()
            .map(|v| v.parse::<ModelVariant>().map_err(|e| CliError::config("model.student", e.to_string())))
            .collect::<CliResult<Vec<_>>>()?;

        let decay_every = match r.raw("train.decay_every") {
            "none" => None,
            _ => Some(r.parse::<usize>("train.decay_every")?),
        };
        let train = TrainConfig {
            epochs: r.parse("train.epochs")?,
            batch_size: r.parse("train.batch_size")?,
            sgd: SgdConfig {
                learning_rate: r.parse("train.learning_rate")?,
                step_decay_factor: r.parse("train.decay_factor")?,
                decay_every_epochs: decay_every,
            },
        };
        train.validate().map_err(|e| CliError::config("train.*", e.to_string()))?;

        let mut student_noise = r.noise("noise.student")?;
        student_noise.noised_teacher = r.parse("noise.noised_teacher")?;
        let mixup = match r.raw("mixup.alpha") {
            "none" => MixupConfig::disabled(),
            _ => MixupConfig::with_alpha(r.parse("mixup.alpha")?),
        };
        let self_train = SelfTrainConfig {
            iterations: r.parse("selftrain.iterations")?,
            label_mode: match r.raw("selftrain.labels") {
                "soft" => LabelMode::Soft,
                "hard" => LabelMode::Hard,
                other => return Err(CliError::config("selftrain.labels", format!("`{other}` is not soft or hard"))),
            },
            confidence_threshold: r.parse("selftrain.threshold")?,
            warm_start: r.parse("selftrain.warm_start")?,
            model,
            student_variants,
            teacher_noise: r.noise("noise.teacher")?,
            student_noise,
            mixup,
            mixup_stage: match r.raw("mixup.stage") {
                "final" => MixupStage::FinalIteration,
                "all" => MixupStage::AllStudentIterations,
                other => return Err(CliError::config("mixup.stage", format!("`{other}` is not final or all"))),
            },
            train,
            augment: AugmentConfig {
                noise_sigma: r.parse("augment.noise_sigma")?,
                blur_scales: r.array("augment.blur_scales")?,
            },
            seed,
        };
        self_train.validate().map_err(|e| CliError::config("selftrain.*", e.to_string()))?;

        let eval_threshold: f64 = r.parse("eval.threshold")?;
        let ablation_seeds: usize = r.parse("ablate.seeds")?;
        if ablation_seeds == 0 {
            return Err(CliError::config("ablate.seeds", "must be positive"));
        }
        Ok(ExperimentConfig {
            output_dir: r.raw("output.dir").to_string(),
            values,
            seed,
            synth,
            n_test_patients,
            self_train,
            eval_threshold,
            ablation_seeds,
        })
    }
}

struct Reader<'a> {
    values: &'a BTreeMap<&'static str, String>,
}

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn parse<T: FromStr>(&self, key: &str) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        let v = self.raw(key);
        v.parse()
            .map_err(|e: T::Err| CliError::config(key, format!("cannot parse `{v}`: {e}")))
    }

    fn list(&self, key: &str) -> CliResult<Vec<String>> {
        let items: Vec<String> = self.raw(key).split(',').map(|s| s.trim().to_string()).collect();
        if items.iter().any(String::is_empty) {
            return Err(CliError::config(key, "empty list entry"));
        }
        Ok(items)
    }

    fn array<const N: usize>(&self, key: &str) -> CliResult<[f64; N]> {
        let items = self.list(key)?;
        let nums = items
            .iter()
            .map(|s| s.parse::<f64>().map_err(|e| CliError::config(key, format!("cannot parse `{s}`: {e}"))))
            .collect::<CliResult<Vec<_>>>()?;
        nums.try_into()
            .map_err(|v: Vec<f64>| CliError::config(key, format!("expected {N} numbers, got {}", v.len())))
    }

    fn noise(&self, key: &str) -> CliResult<NoiseToggles> {
        let mut toggles = NoiseToggles::none();
        if self.raw(key) == "none" {
            return Ok(toggles);
        }
        for item in self.list(key)? {
            match item.as_str() {
                "augmentation" => toggles.augmentation = true,
                "stochastic_depth" => toggles.stochastic_depth = true,
                "dropout" => toggles.dropout = true,
                other => return Err(CliError::config(key, format!("unknown noise `{other}`"))),
            }
        }
        Ok(toggles)
    }
}
