//! Subcommand wiring: argument parsing and the pipeline stages.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nodule_core::aggregate::{predict_cohort, PatientCase};
use nodule_core::evaluate::{confusion_at_threshold, delong_test, roc_curve, RocCurve};
use nodule_core::model::predict_nodules;
use nodule_core::preprocess::NoduleCrop;
use nodule_core::rng::{derive_seed, stream};
use nodule_core::selftrain::{
    filter_confident, infer_pseudo_labels, self_train_loop, train_teacher, EvalCohort, SelfTrainOutcome, TrainingSet,
};
use nodule_core::synth::{gen_benchmark, Benchmark};

use crate::ablation::{run_suite, write_suite, Suite};
use crate::archive::CropArchive;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::output::{ensure_dir, fmt_f64, read_column, read_labels, write_artifact, Record};

#[derive(Debug, Parser)]
#[command(name = "nodule", version, about = "Noisy-student self-training for nodule classification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable. Beats the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory; same as `--set output.dir=DIR`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> CliResult<(ExperimentConfig, PathBuf)> {
        let mut flags = self.set.clone();
        if let Some(out) = &self.out {
            flags.push(format!("output.dir={}", out.display()));
        }
        let config = ExperimentConfig::load(self.config.as_deref(), &flags)?;
        let dir = PathBuf::from(&config.output_dir);
        ensure_dir(&dir)?;
        Ok((config, dir))
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the labeled set, unlabeled cohort and test cohort as crop archives.
    SynthGen {
        #[command(flatten)]
        common: Common,
    },
    /// Train the teacher on labeled crops and save a checkpoint.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Infer and filter pseudo labels with a saved model.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
    },
    /// Run the full teacher/student loop.
    SelfTrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        labeled: Option<PathBuf>,
        #[arg(long)]
        unlabeled: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// Patient-level metrics of a saved model on a test cohort.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: Option<PathBuf>,
    },
    /// DeLong's test for two paired score columns.
    Delong {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores_a: PathBuf,
        #[arg(long)]
        scores_b: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Run one ablation suite: b1..b6 or models, labels, warmstart, noise, head, mixup.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Suite,
    },
    /// Write the ROC curve of a score column as `f_pr,t_pr` rows.
    RocExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Checkpoint { source, .. } => eprintln!("error [{}]: {e}", source.code()),
                _ => eprintln!("error: {e}"),
            }
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> CliResult<()> {
    match command {
        Command::SynthGen { common } => synth_gen(&common),
        Command::TrainTeacher { common, labeled, test } => cmd_train_teacher(&common, labeled.as_deref(), test.as_deref()),
        Command::PseudoLabel {
            common,
            checkpoint,
            unlabeled,
        } => pseudo_label(&common, &checkpoint, unlabeled.as_deref()),
        Command::SelfTrain {
            common,
            labeled,
            unlabeled,
            test,
        } => cmd_self_train(&common, labeled.as_deref(), unlabeled.as_deref(), test.as_deref()),
        Command::Evaluate { common, checkpoint, test } => evaluate(&common, &checkpoint, test.as_deref()),
        Command::Delong {
            common,
            scores_a,
            scores_b,
            labels,
        } => delong(&common, &scores_a, &scores_b, &labels),
        Command::Ablate { common, suite } => {
            let (config, dir) = common.resolve()?;
            let rows = run_suite(suite, &config, &dir)?;
            print!("{}", write_suite(suite, &rows, &config, &dir)?);
            Ok(())
        }
        Command::RocExport { common, scores, labels } => roc_export(&common, &scores, &labels),
    }
}

/// Benchmark archives as they would read back from disk.
pub struct Archives {
    pub labeled: CropArchive,
    pub unlabeled: CropArchive,
    pub test: CropArchive,
}

pub fn synth_archives(config: &ExperimentConfig) -> CliResult<(Archives, Benchmark)> {
    let bench = gen_benchmark(&config.synth, config.n_test_patients)?;
    let archives = Archives {
        labeled: CropArchive::from_labeled(&bench.labeled).quantized()?,
        unlabeled: CropArchive::from_cohort(&bench.unlabeled, false).quantized()?,
        test: CropArchive::from_cohort(&bench.test, true).quantized()?,
    };
    Ok((archives, bench))
}

/// Training inputs: crop archives from disk where given, synthesized otherwise.
pub struct Data {
    pub labeled: TrainingSet,
    pub unlabeled: Vec<NoduleCrop>,
    pub test_cases: Vec<PatientCase>,
    pub test_labels: Vec<u8>,
}

impl Data {
    pub fn synthesize(config: &ExperimentConfig) -> CliResult<Self> {
        let (a, _) = synth_archives(config)?;
        Self::from_archives(&a.labeled, &a.unlabeled, &a.test)
    }

    fn from_archives(labeled: &CropArchive, unlabeled: &CropArchive, test: &CropArchive) -> CliResult<Self> {
        let (test_cases, test_labels) = test.cases()?;
        Ok(Data {
            labeled: labeled.training_set()?,
            unlabeled: unlabeled.crops(),
            test_cases,
            test_labels,
        })
    }

    fn load(config: &ExperimentConfig, labeled: Option<&Path>, unlabeled: Option<&Path>, test: Option<&Path>) -> CliResult<Self> {
        if labeled.is_none() && unlabeled.is_none() && test.is_none() {
            return Self::synthesize(config);
        }
        let (synth, _) = synth_archives(config)?;
        let pick = |p: Option<&Path>, fallback: &CropArchive| match p {
            Some(p) => CropArchive::load(p),
            None => Ok(fallback.clone()),
        };
        Self::from_archives(
            &pick(labeled, &synth.labeled)?,
            &pick(unlabeled, &synth.unlabeled)?,
            &pick(test, &synth.test)?,
        )
    }

    pub fn eval(&self) -> EvalCohort<'_> {
        EvalCohort {
            cases: &self.test_cases,
            labels: &self.test_labels,
        }
    }
}

fn check_finite(what: &str, v: f64) -> CliResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Numeric(format!("{what} is {v}")))
    }
}

/// Runs the configured loop and scores the final model on the test cohort.
pub fn run_self_train(config: &ExperimentConfig, data: &Data) -> CliResult<(SelfTrainOutcome, Vec<f64>)> {
    let outcome = self_train_loop(&config.self_train, &data.labeled, &data.unlabeled, Some(&data.eval()))?;
    for r in &outcome.records {
        check_finite(&format!("round {} training loss", r.iteration), r.final_loss)?;
    }
    let scores = predict_cohort(&outcome.model, &data.test_cases)?;
    Ok((outcome, scores))
}

fn synth_gen(common: &Common) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let (archives, bench) = synth_archives(&config)?;
    archives.labeled.save(&dir.join("labeled.crops"))?;
    archives.unlabeled.save(&dir.join("unlabeled.crops"))?;
    archives.test.save(&dir.join("test.crops"))?;

    let mut truth = String::from("patient_id,rank,malignant\n");
    for p in &bench.test.patients {
        for (rank, t) in p.nodule_truth.iter().enumerate() {
            let _ = writeln!(truth, "{},{rank},{t}", p.case.patient_id);
        }
    }
    write_artifact(&dir.join("test_nodule_truth.csv"), &config, &truth)?;

    let mut r = Record::new();
    r.push("labeled_crops", archives.labeled.len())
        .push("labeled_excluded", bench.labeled.excluded)
        .push("labeled_malignant", bench.labeled.labels.iter().filter(|&&l| l == 1).count())
        .push("unlabeled_patients", bench.unlabeled.patients.len())
        .push("unlabeled_crops", archives.unlabeled.len())
        .push("test_patients", bench.test.patients.len())
        .push("test_cancer_patients", bench.test.labels().iter().filter(|&&l| l == 1).count())
        .push("test_crops", archives.test.len());
    write_artifact(&dir.join("synth.txt"), &config, &r.render())
}

fn cmd_train_teacher(common: &Common, labeled: Option<&Path>, test: Option<&Path>) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let data = Data::load(&config, labeled, None, test)?;
    let run = train_teacher(&config.self_train, &data.labeled, Some(&data.eval()))?;
    check_finite("training loss", run.record.final_loss)?;
    save_checkpoint(&run.model, &dir.join("teacher.ckpt"))?;
    let mut r = Record::new();
    r.push("variant", run.record.variant)
        .push("train_size", run.record.train_size)
        .push("epochs", config.self_train.train.epochs)
        .push("final_loss", fmt_f64(run.record.final_loss))
        .push("test_auc", fmt_f64(run.record.auc.unwrap_or(f64::NAN)));
    write_artifact(&dir.join("teacher.txt"), &config, &r.render())
}

fn pseudo_label(common: &Common, checkpoint: &Path, unlabeled: Option<&Path>) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let crops = match unlabeled {
        Some(p) => CropArchive::load(p)?.crops(),
        None => synth_archives(&config)?.0.unlabeled.crops(),
    };
    let noised = config.self_train.student_noise.noised_teacher;
    let mut rng = stream(derive_seed(config.seed, 1), 1);
    let pseudo = infer_pseudo_labels(&model, &crops, noised, 1, &mut rng)?;
    let kept = filter_confident(&pseudo, config.self_train.confidence_threshold)?;
    let mut csv = String::from("crop,patient_id,rank,probability,confidence,kept\n");
    let mut k = kept.entries.iter().peekable();
    for e in &pseudo.entries {
        let is_kept = k.next_if(|x| x.crop == e.crop).is_some();
        let c = &crops[e.crop];
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{}",
            e.crop, c.patient_id, c.rank, fmt_f64(e.label), fmt_f64(e.confidence), is_kept as u8
        );
    }
    write_artifact(&dir.join("pseudo_labels.csv"), &config, &csv)?;
    let mut r = Record::new();
    r.push("total", pseudo.len())
        .push("kept", kept.len())
        .push("threshold", config.self_train.confidence_threshold)
        .push("noised_teacher", noised);
    if kept.is_empty() {
        eprintln!("warning: no pseudo label passed the confidence threshold");
    }
    write_artifact(&dir.join("pseudo.txt"), &config, &r.render())
}

fn cmd_self_train(common: &Common, labeled: Option<&Path>, unlabeled: Option<&Path>, test: Option<&Path>) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let data = Data::load(&config, labeled, unlabeled, test)?;
    let (outcome, scores) = run_self_train(&config, &data)?;
    save_checkpoint(&outcome.model, &dir.join("student.ckpt"))?;
    let auc = roc_curve(&scores, &data.test_labels)?.auc;
    let mut r = Record::new();
    for rec in &outcome.records {
        let p = format!("round.{}", rec.iteration);
        r.push(format!("{p}.variant"), rec.variant)
            .push(format!("{p}.pseudo_total"), rec.pseudo_total)
            .push(format!("{p}.pseudo_kept"), rec.pseudo_kept)
            .push(format!("{p}.train_size"), rec.train_size)
            .push(format!("{p}.final_loss"), fmt_f64(rec.final_loss))
            .push(format!("{p}.test_auc"), fmt_f64(rec.auc.unwrap_or(f64::NAN)));
    }
    r.push("warnings", outcome.warnings.len()).push("test_auc", fmt_f64(auc));
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    write_artifact(&dir.join("metrics.txt"), &config, &r.render())?;
    write_scores(&dir, &config, &data.test_cases, &data.test_labels, &scores)
}

fn write_scores(dir: &Path, config: &ExperimentConfig, cases: &[PatientCase], labels: &[u8], scores: &[f64]) -> CliResult<()> {
    let mut s = String::from("patient_id,score\n");
    let mut l = String::from("patient_id,label\n");
    for ((c, &label), &score) in cases.iter().zip(labels).zip(scores) {
        let _ = writeln!(s, "{},{score}", c.patient_id);
        let _ = writeln!(l, "{},{label}", c.patient_id);
    }
    write_artifact(&dir.join("scores.csv"), config, &s)?;
    write_artifact(&dir.join("labels.csv"), config, &l)
}

fn roc_rows(roc: &RocCurve) -> String {
    let mut out = String::from("f_pr,t_pr\n");
    for &(f, t) in &roc.points {
        let _ = writeln!(out, "{f},{t}");
    }
    out
}

fn evaluate(common: &Common, checkpoint: &Path, test: Option<&Path>) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let model = load_checkpoint(checkpoint)?;
    let (cases, labels) = match test {
        Some(p) => CropArchive::load(p)?.cases()?,
        None => synth_archives(&config)?.0.test.cases()?,
    };
    let scores = predict_cohort(&model, &cases)?;
    let roc = roc_curve(&scores, &labels)?;
    let cm = confusion_at_threshold(&scores, &labels, config.eval_threshold)?;
    let crops: Vec<NoduleCrop> = cases.iter().flat_map(|c| c.crops.iter().cloned()).collect();
    let nodule_probs = predict_nodules(&model, &crops)?;
    let mut r = Record::new();
    r.push("variant", model.config.variant)
        .push("patients", cases.len())
        .push("nodules", nodule_probs.len())
        .push("auc", fmt_f64(check_finite("auc", roc.auc)?))
        .push("threshold", config.eval_threshold)
        .push("tp", cm.tp)
        .push("tn", cm.tn)
        .push("fp", cm.fp)
        .push("fn", cm.fn_)
        .push("sensitivity", fmt_f64(cm.sensitivity()))
        .push("specificity", fmt_f64(cm.specificity()))
        .push("false_positive_rate", fmt_f64(cm.false_positive_rate()))
        .push("accuracy", fmt_f64(cm.accuracy()));
    write_artifact(&dir.join("evaluation.txt"), &config, &r.render())?;
    write_artifact(&dir.join("roc.csv"), &config, &roc_rows(&roc))?;
    write_scores(&dir, &config, &cases, &labels, &scores)
}

fn delong(common: &Common, a: &Path, b: &Path, labels: &Path) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let (sa, sb, y) = (read_column(a)?, read_column(b)?, read_labels(labels)?);
    let res = delong_test(&sa, &sb, &y)?;
    let mut r = Record::new();
    r.push("auc_a", fmt_f64(res.auc_a))
        .push("auc_b", fmt_f64(res.auc_b))
        .push("variance", format!("{:e}", res.variance))
        .push("z", fmt_f64(res.z))
        .push("p_value", format!("{:e}", res.p_value))
        .push("degenerate", res.degenerate);
    print!("{}", r.render());
    write_artifact(&dir.join("delong.txt"), &config, &r.render())
}

fn roc_export(common: &Common, scores: &Path, labels: &Path) -> CliResult<()> {
    let (config, dir) = common.resolve()?;
    let roc = roc_curve(&read_column(scores)?, &read_labels(labels)?)?;
    println!("auc = {}", fmt_f64(roc.auc));
    write_artifact(&dir.join("roc.csv"), &config, &roc_rows(&roc))
}
