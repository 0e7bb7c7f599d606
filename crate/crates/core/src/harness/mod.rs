//! Experiment orchestration: the four comparison studies, result tables and
//! run directories.
//!
//! A [`Lab`] caches corpora, teachers and trained students, so studies that
//! share conditions (the clean-data students of the size sweep, the noise
//! sweep and the decoding comparison, for instance) train each model once.

mod report;

pub use report::{delta_rate, mean_std, ExperimentReport, ReportMetadata, ReportRow, RunRecord, KEY_COLUMNS};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bleu::{corpus_bleu, Smoothing};
use crate::corpus::{generate_task, ParallelCorpus, TaskKind, TaskSpec};
use crate::decode::{translate_all, BeamConfig, DecodeMode};
use crate::distill::GateTrace;
use crate::model::{ModelConfig, TransformerModel};
use crate::noise::{corrupt_sources, NoiseProfile};
use crate::train::{save_checkpoint, Checkpoint, Regime, Teacher, TrainConfig, Trainer};
use crate::{io_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    SizeSweep,
    NoiseSweep,
    Decoding,
    HybridVsSingle,
}

impl Study {
    pub fn as_str(self) -> &'static str {
        match self {
            Study::SizeSweep => "size_sweep",
            Study::NoiseSweep => "noise_sweep",
            Study::Decoding => "decoding",
            Study::HybridVsSingle => "hybrid_vs_single",
        }
    }

    /// Metric columns following `condition,regime,status`.
    pub fn columns(self) -> &'static [&'static str] {
        match self {
            Study::SizeSweep => &["params", "bleu_mean", "bleu_std", "delta"],
            Study::NoiseSweep => &["bleu_mean", "bleu_std", "delta", "delta_rate"],
            Study::Decoding => &["bs_token", "bs_sentence", "delta_bs", "tf_token", "tf_sentence", "delta_tf"],
            Study::HybridVsSingle => &["params", "bleu_mean", "bleu_std", "initial_mean_g", "final_mean_g"],
        }
    }
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "size_sweep" | "size" => Ok(Study::SizeSweep),
            "noise_sweep" | "noise" => Ok(Study::NoiseSweep),
            "decoding" => Ok(Study::Decoding),
            "hybrid_vs_single" | "hybrid" => Ok(Study::HybridVsSingle),
            other => Err(Error::Config(format!("unknown study {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSize {
    pub name: String,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub study: Study,
    pub task: TaskSpec,
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub test_pairs: usize,
    pub data_seed: u64,
    pub teacher: ModelConfig,
    pub teacher_seed: u64,
    /// Ordered from smallest to largest.
    pub students: Vec<StudentSize>,
    pub noise_profiles: Vec<NoiseProfile>,
    pub seeds: Vec<u64>,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    /// Decoder used for test-set scoring.
    pub beam: BeamConfig,
    /// Student used by the noise and hybrid studies; defaults to the largest.
    pub focus_student: Option<String>,
    pub output_dir: Option<PathBuf>,
    pub save_checkpoints: bool,
}

fn sizes(vocab: usize, dims: &[(&str, usize, usize, usize)]) -> Vec<StudentSize> {
    dims.iter()
        .map(|&(name, d, layers, ffn)| StudentSize {
            name: name.into(),
            config: ModelConfig::tiny(vocab, d, 4, layers, ffn),
        })
        .collect()
}

impl ExperimentSpec {
    /// Full desk-scale defaults: vocabulary 512, 20k training pairs, 1k
    /// dev/test pairs, three seeds, students XS/S/M/L and an L teacher.
    pub fn desk_default(study: Study) -> Self {
        let vocab = 512;
        let students = sizes(
            vocab,
            &[("XS", 32, 1, 64), ("S", 64, 2, 128), ("M", 128, 2, 256), ("L", 256, 3, 1024)],
        );
        Self {
            study,
            task: TaskSpec::new(TaskKind::LexiconReorder, vocab, (5, 20), 7),
            train_pairs: 20_000,
            dev_pairs: 1_000,
            test_pairs: 1_000,
            data_seed: 11,
            teacher: students[3].config.clone(),
            teacher_seed: 1,
            students,
            noise_profiles: vec![NoiseProfile::none(), NoiseProfile::moderate(), NoiseProfile::high()],
            seeds: vec![1, 2, 3],
            teacher_train: TrainConfig {
                max_epochs: 30,
                token_budget: 4096,
                ..TrainConfig::default()
            },
            student_train: TrainConfig {
                max_epochs: 20,
                token_budget: 4096,
                ..TrainConfig::default()
            },
            beam: BeamConfig::default(),
            focus_student: None,
            output_dir: None,
            save_checkpoints: true,
        }
    }

    /// Laptop-sized preset: vocabulary 40, short sentences, a few thousand
    /// pairs, single-digit-minute studies on one core.
    pub fn quick(study: Study) -> Self {
        let vocab = 40;
        let students = sizes(vocab, &[("XS", 16, 1, 32), ("S", 32, 1, 64), ("M", 48, 2, 96), ("L", 64, 2, 128)]);
        let train = TrainConfig {
            base_lr: 2e-3,
            warmup_steps: 100,
            accumulation_steps: 1,
            token_budget: 512,
            max_epochs: 15,
            dev_sentences: 200,
            ..TrainConfig::default()
        };
        Self {
            study,
            task: TaskSpec::new(TaskKind::LexiconReorder, vocab, (4, 10), 7),
            train_pairs: 6_000,
            dev_pairs: 200,
            test_pairs: 300,
            data_seed: 11,
            teacher: students[3].config.clone(),
            teacher_seed: 1,
            students,
            noise_profiles: vec![NoiseProfile::none(), NoiseProfile::moderate(), NoiseProfile::high()],
            seeds: vec![1, 2, 3],
            teacher_train: train.clone(),
            student_train: train,
            beam: BeamConfig::default(),
            focus_student: None,
            output_dir: None,
            save_checkpoints: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("an experiment needs at least one seed".into()));
        }
        self.task.validate()?;
        self.teacher.validate()?;
        self.teacher_train.validate()?;
        self.student_train.validate()?;
        self.beam.validate()?;
        if self.train_pairs == 0 || self.test_pairs == 0 {
            return Err(Error::Config("train_pairs and test_pairs must be positive".into()));
        }
        if self.students.is_empty() {
            return Err(Error::Config(format!("study {} needs at least one student size", self.study.as_str())));
        }
        if self.study == Study::NoiseSweep && self.noise_profiles.is_empty() {
            return Err(Error::Config("noise_sweep needs at least one noise profile".into()));
        }
        for s in &self.students {
            s.config.validate()?;
            if s.config.vocab_size != self.task.vocab_size {
                return Err(Error::Config(format!("student {} has the wrong vocabulary size", s.name)));
            }
        }
        if self.teacher.vocab_size != self.task.vocab_size {
            return Err(Error::Config("teacher vocabulary differs from the task vocabulary".into()));
        }
        if let Some(f) = &self.focus_student {
            if !self.students.iter().any(|s| &s.name == f) {
                return Err(Error::Config(format!("focus student {f:?} is not in the student list")));
            }
        }
        for p in &self.noise_profiles {
            p.validate()?;
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::Parse {
            path: "experiment spec".into(),
            detail: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Fails for values TOML cannot hold, such as seeds above `i64::MAX`.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot write spec as TOML: {e}")))
    }

    fn focus(&self) -> &StudentSize {
        self.focus_student
            .as_ref()
            .and_then(|f| self.students.iter().find(|s| &s.name == f))
            .unwrap_or_else(|| self.students.last().expect("validated"))
    }

    fn clean_profile(&self) -> NoiseProfile {
        self.noise_profiles
            .iter()
            .find(|p| p.is_identity())
            .cloned()
            .unwrap_or_else(NoiseProfile::none)
    }
}

/// Train / dev / test corpora for one noise condition. Only training
/// sources are corrupted.
#[derive(Debug, Clone)]
pub struct Data {
    pub train: ParallelCorpus,
    pub dev: ParallelCorpus,
    pub test: ParallelCorpus,
}

#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub teacher: Teacher,
    pub bleu: f64,
    pub tf_bleu: f64,
    pub steps: usize,
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub record: RunRecord,
    pub model: TransformerModel,
    pub gate_trace: Option<GateTrace>,
}

type StudentKey = (String, String, Regime, u64);

/// Memoizing experiment runner.
pub struct Lab {
    pub spec: ExperimentSpec,
    data: BTreeMap<String, Data>,
    teachers: BTreeMap<String, TeacherRun>,
    students: BTreeMap<StudentKey, StudentRun>,
    started: Instant,
}

/// BLEU of beam search and of teacher-forced argmax on `corpus`.
pub fn score_model(model: &TransformerModel, corpus: &ParallelCorpus, beam: &BeamConfig) -> Result<(f64, f64)> {
    let srcs = corpus.sources();
    let refs = corpus.targets();
    let hyps = translate_all(model, &srcs, None, DecodeMode::Beam, beam, 64)?;
    let bs = corpus_bleu(&hyps, &refs, 4, Smoothing::None)?.bleu;
    let tf = translate_all(model, &srcs, Some(&refs), DecodeMode::Tf, beam, 64)?;
    let tf = corpus_bleu(&tf, &refs, 4, Smoothing::None)?.bleu;
    Ok((bs, tf))
}

impl Lab {
    pub fn new(spec: ExperimentSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            data: BTreeMap::new(),
            teachers: BTreeMap::new(),
            students: BTreeMap::new(),
            started: Instant::now(),
        })
    }

    pub fn data(&mut self, profile: &NoiseProfile) -> Result<&Data> {
        if !self.data.contains_key(&profile.name) {
            let s = &self.spec;
            let n = s.train_pairs + s.dev_pairs + s.test_pairs;
            let mut train = generate_task(&s.task, n, s.data_seed)?;
            let mut dev = train.split_off(s.train_pairs);
            let test = dev.split_off(s.dev_pairs);
            let noise_seed = crate::noise::derive_seed(s.data_seed, 0x0015e);
            let train = corrupt_sources(&train, profile, s.task.vocab_size, noise_seed)?;
            self.data.insert(profile.name.clone(), Data { train, dev, test });
        }
        Ok(&self.data[&profile.name])
    }

    /// Teacher trained on the (possibly noised) training data of `profile`,
    /// with distillation signals precomputed for every student regime.
    pub fn teacher(&mut self, profile: &NoiseProfile) -> Result<&TeacherRun> {
        if !self.teachers.contains_key(&profile.name) {
            self.data(profile)?;
            let data = &self.data[&profile.name];
            let spec = &self.spec;
            let cfg = TrainConfig {
                regime: Regime::Teacher,
                seed: spec.teacher_seed,
                ..spec.teacher_train.clone()
            };
            info!("training teacher for noise profile {}", profile.name);
            let model = TransformerModel::build(spec.teacher.clone(), spec.teacher_seed)?;
            let out = Trainer::new(model, cfg, &data.train, &data.dev, None)?.run()?;
            if let Some(step) = out.diverged {
                return Err(Error::Diverged { step });
            }
            let (bleu, tf_bleu) = score_model(&out.model, &data.test, &spec.beam)?;
            info!("teacher ({}) test BLEU {bleu:.2}", profile.name);
            let teacher = Teacher::prepare(
                out.model,
                &data.train,
                &[Regime::TokenKd, Regime::SentenceKd, Regime::Hybrid],
                &spec.student_train,
            )?;
            if spec.save_checkpoints {
                if let Some(dir) = &spec.output_dir {
                    let ck = Checkpoint::from_model(&teacher.model, None);
                    save_checkpoint(&ck, dir.join("checkpoints").join(format!("teacher-{}", profile.name)))?;
                }
            }
            self.teachers.insert(
                profile.name.clone(),
                TeacherRun {
                    teacher,
                    bleu,
                    tf_bleu,
                    steps: out.steps,
                },
            );
        }
        Ok(&self.teachers[&profile.name])
    }

    /// Train (or fetch) one student.
    pub fn student(&mut self, size: &StudentSize, profile: &NoiseProfile, regime: Regime, seed: u64) -> Result<&StudentRun> {
        let key = (size.name.clone(), profile.name.clone(), regime, seed);
        if !self.students.contains_key(&key) {
            self.teacher(profile)?;
            let data = &self.data[&profile.name];
            let teacher = &self.teachers[&profile.name].teacher;
            let spec = &self.spec;
            let cfg = TrainConfig {
                regime,
                seed,
                ..spec.student_train.clone()
            };
            let initial_g = (regime == Regime::Hybrid).then(|| crate::tensor::sigmoid(cfg.gate_init));
            info!("training {} student {} (noise {}, seed {seed})", regime.as_str(), size.name, profile.name);
            let model = TransformerModel::build(size.config.clone(), seed)?;
            let params = model.param_count();
            let out = Trainer::new(model, cfg, &data.train, &data.dev, Some(teacher))?.run()?;
            let (bleu, tf_bleu) = score_model(&out.model, &data.test, &spec.beam)?;
            info!("{} {} seed {seed}: test BLEU {bleu:.2}, TF BLEU {tf_bleu:.2}", size.name, regime.as_str());
            let gate_trace = out.gate_trace();
            let record = RunRecord {
                condition: size.name.clone(),
                regime: regime.as_str().into(),
                seed,
                params,
                bleu,
                tf_bleu,
                steps: out.steps,
                initial_mean_g: initial_g,
                final_mean_g: gate_trace.as_ref().and_then(GateTrace::last_mean_g),
                final_token_loss: out.history.last().and_then(|r| r.token_loss),
                final_sentence_loss: out.history.last().and_then(|r| r.sentence_loss),
                failure: out.diverged.map(|s| format!("diverged at step {s}")),
            };
            if spec.save_checkpoints {
                if let Some(dir) = &spec.output_dir {
                    let ck = Checkpoint::from_model(&out.model, None);
                    let name = format!("{}-{}-{}-s{seed}", profile.name, size.name, regime.as_str());
                    save_checkpoint(&ck, dir.join("checkpoints").join(name))?;
                }
            }
            self.students.insert(
                key.clone(),
                StudentRun {
                    record,
                    model: out.model,
                    gate_trace,
                },
            );
        }
        Ok(&self.students[&key])
    }

    /// Records of `regime` students over all seeds; `(bleu, tf_bleu)` means
    /// and stdevs are computed from successful runs only.
    fn seed_runs(&mut self, size: &StudentSize, profile: &NoiseProfile, regime: Regime) -> Result<Vec<RunRecord>> {
        let seeds = self.spec.seeds.clone();
        seeds
            .into_iter()
            .map(|s| self.student(size, profile, regime, s).map(|r| r.record.clone()))
            .collect()
    }

    pub fn gate_traces(&self, size: &str, profile: &str) -> Vec<(u64, GateTrace)> {
        self.students
            .iter()
            .filter(|((s, p, r, _), _)| s == size && p == profile && *r == Regime::Hybrid)
            .filter_map(|((_, _, _, seed), run)| run.gate_trace.clone().map(|t| (*seed, t)))
            .collect()
    }

    fn report(&self, study: Study, rows: Vec<ReportRow>, runs: Vec<RunRecord>, notes: Vec<String>) -> ExperimentReport {
        ExperimentReport {
            study,
            rows,
            runs,
            metadata: ReportMetadata {
                seeds: self.spec.seeds.clone(),
                wall_time_secs: self.started.elapsed().as_secs_f64(),
                notes,
            },
        }
    }

    pub fn run(&mut self, study: Study) -> Result<ExperimentReport> {
        match study {
            Study::SizeSweep => self.size_sweep(),
            Study::NoiseSweep => self.noise_sweep(),
            Study::Decoding => self.decoding_comparison(),
            Study::HybridVsSingle => self.hybrid_comparison(),
        }
    }

    /// Token- vs sentence-level students of every size on clean data.
    pub fn size_sweep(&mut self) -> Result<ExperimentReport> {
        let clean = self.spec.clean_profile();
        let t = self.teacher(&clean)?;
        let teacher_params = t.teacher.model.param_count();
        let mut rows = vec![ReportRow {
            condition: "teacher".into(),
            regime: "teacher".into(),
            status: "ok".into(),
            cells: vec![Some(teacher_params as f64), Some(t.bleu), Some(0.0), None],
        }];
        let mut runs = Vec::new();
        let mut notes = Vec::new();
        let students = self.spec.students.clone();
        for size in &students {
            let tok = self.seed_runs(size, &clean, Regime::TokenKd)?;
            let sen = self.seed_runs(size, &clean, Regime::SentenceKd)?;
            let (tm, ts, tstat) = summarize(&tok, |r| r.bleu);
            let (sm, ss, sstat) = summarize(&sen, |r| r.bleu);
            let delta = tm.zip(sm).map(|(a, b)| a - b);
            let params = size.config.clone();
            let p = Some(crate::model::param_count(&params) as f64);
            rows.push(row(&size.name, "token_kd", tstat, vec![p, tm, ts, delta]));
            rows.push(row(&size.name, "sentence_kd", sstat, vec![p, sm, ss, delta]));
            runs.extend(tok);
            runs.extend(sen);
        }
        let first = &students[0].name;
        let last = &students[students.len() - 1].name;
        let d = |r: &[ReportRow], c: &str| r.iter().find(|x| &x.condition == c).and_then(|x| x.cells[3]);
        if let (Some(a), Some(b)) = (d(&rows, first), d(&rows, last)) {
            notes.push(format!(
                "delta (token - sentence) grows from {a:+.2} at {first} to {b:+.2} at {last}: {}; the reference pattern goes from negative at the smallest student to positive at the largest",
                if a < b { "matches" } else { "does not match" }
            ));
        }
        Ok(self.report(Study::SizeSweep, rows, runs, notes))
    }

    /// Token- vs sentence-level students of the focus size under each noise
    /// profile.
    pub fn noise_sweep(&mut self) -> Result<ExperimentReport> {
        let size = self.spec.focus().clone();
        let profiles = self.spec.noise_profiles.clone();
        let mut rows = Vec::new();
        let mut runs = Vec::new();
        let mut orig: Option<(Option<f64>, Option<f64>)> = None;
        let mut deltas = Vec::new();
        for p in &profiles {
            let tok = self.seed_runs(&size, p, Regime::TokenKd)?;
            let sen = self.seed_runs(&size, p, Regime::SentenceKd)?;
            let (tm, ts, tstat) = summarize(&tok, |r| r.bleu);
            let (sm, ss, sstat) = summarize(&sen, |r| r.bleu);
            let delta = tm.zip(sm).map(|(a, b)| a - b);
            deltas.push((p.name.clone(), delta));
            let (rt, rs) = match orig {
                None => {
                    orig = Some((tm, sm));
                    (None, None)
                }
                Some((ot, os)) => (
                    ot.zip(tm).and_then(|(o, n)| delta_rate(o, n)),
                    os.zip(sm).and_then(|(o, n)| delta_rate(o, n)),
                ),
            };
            rows.push(row(&p.name, "token_kd", tstat, vec![tm, ts, delta, rt]));
            rows.push(row(&p.name, "sentence_kd", sstat, vec![sm, ss, delta, rs]));
            runs.extend(tok);
            runs.extend(sen);
        }
        let mut notes = vec![format!("student {} ({} parameters)", size.name, crate::model::param_count(&size.config))];
        if let (Some((fa, Some(a))), Some((la, Some(b)))) = (deltas.first(), deltas.last()) {
            notes.push(format!(
                "delta (token - sentence) moves from {a:+.2} ({fa}) to {b:+.2} ({la}): {}; the reference pattern falls from positive without noise to negative under high noise",
                if b < a { "matches" } else { "does not match" }
            ));
        }
        Ok(self.report(Study::NoiseSweep, rows, runs, notes))
    }

    /// Beam-search vs teacher-forced BLEU of token- and sentence-level
    /// students of every size.
    pub fn decoding_comparison(&mut self) -> Result<ExperimentReport> {
        let clean = self.spec.clean_profile();
        let students = self.spec.students.clone();
        let mut rows = Vec::new();
        let mut runs = Vec::new();
        for size in &students {
            let tok = self.seed_runs(size, &clean, Regime::TokenKd)?;
            let sen = self.seed_runs(size, &clean, Regime::SentenceKd)?;
            let (bt, _, s1) = summarize(&tok, |r| r.bleu);
            let (bs, _, s2) = summarize(&sen, |r| r.bleu);
            let (tt, _, _) = summarize(&tok, |r| r.tf_bleu);
            let (ts, _, _) = summarize(&sen, |r| r.tf_bleu);
            let status = if s1 == "ok" { s2 } else { s1 };
            let d = |a: Option<f64>, b: Option<f64>| a.zip(b).map(|(a, b)| a - b);
            rows.push(row(
                &size.name,
                "token_kd-sentence_kd",
                status,
                vec![bt, bs, d(bt, bs), tt, ts, d(tt, ts)],
            ));
            runs.extend(tok);
            runs.extend(sen);
        }
        let notes = vec![
            "all deltas are token minus sentence; the reference table mixes sign conventions between its two delta columns".into(),
        ];
        Ok(self.report(Study::Decoding, rows, runs, notes))
    }

    /// Token-level, sentence-level and hybrid students of the focus size.
    pub fn hybrid_comparison(&mut self) -> Result<ExperimentReport> {
        let clean = self.spec.clean_profile();
        let size = self.spec.focus().clone();
        let p = Some(crate::model::param_count(&size.config) as f64);
        let mut rows = Vec::new();
        let mut runs = Vec::new();
        for regime in [Regime::TokenKd, Regime::SentenceKd, Regime::Hybrid] {
            let rs = self.seed_runs(&size, &clean, regime)?;
            let (m, s, stat) = summarize(&rs, |r| r.bleu);
            let (g0, g1) = if regime == Regime::Hybrid {
                (summarize(&rs, |r| r.initial_mean_g.unwrap_or(f64::NAN)).0, summarize(&rs, |r| r.final_mean_g.unwrap_or(f64::NAN)).0)
            } else {
                (None, None)
            };
            rows.push(row(&size.name, regime.as_str(), stat, vec![p, m, s, g0, g1]));
            runs.extend(rs);
        }
        let gate_params = match self.spec.student_train.gate_mode {
            crate::distill::GateMode::Scalar => 1,
            crate::distill::GateMode::PooledLinear => size.config.d_model + 1,
        };
        let mut notes = vec![format!(
            "all regimes share the {} architecture; the hybrid gate adds {gate_params} parameters",
            size.name
        )];
        let hybrid: Vec<&RunRecord> = runs.iter().filter(|r| r.regime == Regime::Hybrid.as_str()).collect();
        let mean_of = |f: fn(&RunRecord) -> Option<f64>| {
            let v: Vec<f64> = hybrid.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        if let (Some(t), Some(s)) = (mean_of(|r| r.final_token_loss), mean_of(|r| r.final_sentence_loss)) {
            notes.push(format!(
                "hybrid last-epoch losses: token {t:.4}, sentence {s:.4}; the gate moves toward the smaller one"
            ));
        }
        Ok(self.report(Study::HybridVsSingle, rows, runs, notes))
    }

    /// Write `report.csv`, `report.md`, `runs.json`, gate traces and a
    /// `manifest.json` with the spec and artifact hashes into `dir`.
    pub fn write_outputs(&self, report: &ExperimentReport, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut artifacts: Vec<PathBuf> = Vec::new();
        let p = dir.join("report.csv");
        report.write_csv(&p)?;
        artifacts.push(p);
        let p = dir.join("report.md");
        report.write_markdown(&p)?;
        artifacts.push(p);
        let p = dir.join("runs.json");
        std::fs::write(&p, serde_json::to_string_pretty(&report.runs).expect("runs serialize")).map_err(io_err(&p))?;
        artifacts.push(p);
        if report.study == Study::HybridVsSingle {
            let focus = self.spec.focus().name.clone();
            let clean = self.spec.clean_profile().name;
            let traces = self.gate_traces(&focus, &clean);
            for (i, (seed, t)) in traces.iter().enumerate() {
                if i == 0 {
                    let p = dir.join("gate_trace.csv");
                    t.write(&p)?;
                    artifacts.push(p);
                }
                let p = dir.join(format!("gate_trace_seed{seed}.csv"));
                t.write(&p)?;
                artifacts.push(p);
            }
        }
        let mut hashes = BTreeMap::new();
        for a in &artifacts {
            let bytes = std::fs::read(a).map_err(io_err(a))?;
            let name = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            hashes.insert(name, hex::encode(Sha256::digest(&bytes)));
        }
        let manifest = serde_json::json!({
            "study": report.study.as_str(),
            "spec": self.spec,
            "seeds": self.spec.seeds,
            "wall_time_secs": report.metadata.wall_time_secs,
            "artifacts": hashes,
        });
        let p = dir.join("manifest.json");
        std::fs::write(&p, serde_json::to_string_pretty(&manifest).expect("manifest serializes")).map_err(io_err(&p))?;
        Ok(())
    }
}

fn row(condition: &str, regime: &str, status: String, cells: Vec<Option<f64>>) -> ReportRow {
    ReportRow {
        condition: condition.into(),
        regime: regime.into(),
        status,
        cells,
    }
}

/// Mean and stdev of `f` over successful runs plus a status string listing
/// failures.
fn summarize(runs: &[RunRecord], f: impl Fn(&RunRecord) -> f64) -> (Option<f64>, Option<f64>, String) {
    let ok: Vec<f64> = runs.iter().filter(|r| r.failure.is_none()).map(&f).collect();
    let failed: Vec<String> = runs
        .iter()
        .filter_map(|r| r.failure.as_ref().map(|m| format!("seed {} {m}", r.seed)))
        .collect();
    let status = if failed.is_empty() {
        "ok".to_string()
    } else {
        format!("failed: {}", failed.join("; "))
    };
    if ok.is_empty() || ok.iter().any(|x| x.is_nan()) {
        return (None, None, status);
    }
    let (m, s) = mean_std(&ok);
    (Some(m), Some(s), status)
}

/// Run one study end to end, writing outputs when `output_dir` is set.
pub fn run_study(spec: ExperimentSpec) -> Result<ExperimentReport> {
    let study = spec.study;
    let out = spec.output_dir.clone();
    let mut lab = Lab::new(spec)?;
    let report = lab.run(study)?;
    if let Some(dir) = out {
        lab.write_outputs(&report, &dir)?;
    }
    Ok(report)
}
