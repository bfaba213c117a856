use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use seedlab::distill::{
    check_guidance, distill_cfg, distill_fewstep, student_checkpoint, train_noise_ref, DistillReport, NoiseRefNet,
    NoiseRefReport,
};
use seedlab::eval::{
    evaluate_batch, rates, summarize, sweep_cfg, sweep_csv, EvalRecord, Rates, Summary, SATISFIED_THRESHOLD,
    USABLE_THRESHOLD,
};
use seedlab::flow::{
    endpoint_errors, sample_batch, ExecField, NoiseReference, SampleContext, Sampled, SamplerConfig,
    VelocityField,
};
use seedlab::model::{ModelCard, VelocityNet};
use seedlab::numerics::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind};
use seedlab::quant::{calibrate, quantize_net, CalibGuidance, CostReport, LayerReport, QuantExec, SchemeTable};
use seedlab::toydata::io::{read_dataset, write_dataset_with_manifest};
use seedlab::toydata::{augment_reverse, gen_pairs, EditPair, GenSpec};
use seedlab::trainer::{train_stage, validate_schedule, write_log, TimestepDistribution};
use seedlab::{RngState, Tensor};

use crate::config::{
    self, BenchConfig, DistillCliConfig, GenDataConfig, QuantizeConfig, SampleSpec, SourceSpec, SweepConfig,
    TrainConfig,
};
use crate::error::{CliError, CliResult};
use crate::manifest::Manifest;

/// Flags shared by every subcommand.
#[derive(Clone, Debug)]
pub struct Flags {
    pub seed: u64,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub schemes: Option<PathBuf>,
    pub teacher: Option<PathBuf>,
}

impl Flags {
    fn need<'a>(&self, v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
        v.as_deref().ok_or_else(|| CliError::Usage(format!("this subcommand requires {flag}")))
    }

    fn prepare_out(&self) -> CliResult<()> {
        std::fs::create_dir_all(&self.out).map_err(|e| CliError::io(&self.out, e))
    }

    fn manifest(&self, command: &str, config: serde_json::Value) -> Manifest {
        Manifest::new(command, self.seed, config)
    }
}

/// Independent seed for one consumer of the master seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    RngState::new(seed).fork_named(label).next_raw()
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(format!("report encoding: {e}")))?;
    std::fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn read_data(path: &Path) -> CliResult<Vec<EditPair>> {
    if !path.exists() {
        return Err(CliError::Runtime(format!("dataset contract: {} does not exist", path.display())));
    }
    let pairs = read_dataset(path)?;
    if pairs.is_empty() {
        return Err(CliError::Runtime(format!("dataset contract: {} holds no records", path.display())));
    }
    Ok(pairs)
}

/// `teacher.ckpt` → `teacher.card.json`.
pub fn card_path(ckpt: &Path) -> PathBuf {
    ckpt.with_extension("card.json")
}

pub fn noise_ref_path(student_ckpt: &Path) -> PathBuf {
    student_ckpt.with_file_name("noise_ref.ckpt")
}

fn load_net(path: &Path) -> CliResult<(VelocityNet, Checkpoint)> {
    let card: ModelCard = config::load_required(&card_path(path))
        .map_err(|e| CliError::Runtime(format!("checkpoint contract: model card for {}: {e}", path.display())))?;
    let ckpt = load_checkpoint(path)?;
    let net = VelocityNet::from_checkpoint(&card, &ckpt)?;
    let expected = if net.config.guidance { CheckpointKind::Student } else { CheckpointKind::Teacher };
    if ckpt.kind != expected {
        return Err(CliError::Runtime(format!(
            "checkpoint contract: {} is a {:?} checkpoint but its card describes a {:?} net",
            path.display(),
            ckpt.kind,
            expected
        )));
    }
    Ok((net, ckpt))
}

fn save_net(out: &Path, stem: &str, net: &VelocityNet, ckpt: &Checkpoint) -> CliResult<Vec<PathBuf>> {
    let path = out.join(format!("{stem}.ckpt"));
    save_checkpoint(ckpt, &path)?;
    let card = card_path(&path);
    write_json(&card, &net.card())?;
    Ok(vec![path, card])
}

fn generate(specs: &[SourceSpec], rng: &RngState, first_id: &mut u64) -> CliResult<Vec<EditPair>> {
    let mut out = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let spec = GenSpec::new(s.kind, s.n, &s.dims).with_ops(&s.ops).with_first_id(*first_id);
        out.extend(gen_pairs(&spec, &rng.fork(i as u64))?);
        *first_id += s.n as u64;
    }
    Ok(out)
}

pub fn gen_data(flags: &Flags) -> CliResult<()> {
    let cfg: GenDataConfig = config::load(flags.config.as_deref())?;
    if cfg.train.is_empty() {
        return Err(CliError::Config("config error: gen-data needs at least one training source".into()));
    }
    flags.prepare_out()?;
    let mut manifest = flags.manifest("gen-data", config::as_value(&cfg));
    if let Some(p) = &flags.config {
        manifest.input(p)?;
    }
    let root = RngState::new(flags.seed);
    let mut next_id = 0;
    let mut train = generate(&cfg.train, &root.fork_named("train"), &mut next_id)?;
    if cfg.augment_reverse {
        train = augment_reverse(&train);
        next_id = train.iter().map(|p| p.id + 1).max().unwrap_or(next_id);
    }
    let mut outputs = Vec::new();
    let path = flags.out.join("train.jsonl");
    write_dataset_with_manifest(&path, &train, flags.seed)?;
    outputs.push(path.clone());
    outputs.push(seedlab::toydata::io::manifest_path(&path));
    if !cfg.held_out.is_empty() {
        let held = generate(&cfg.held_out, &root.fork_named("held-out"), &mut next_id)?;
        let path = flags.out.join("heldout.jsonl");
        write_dataset_with_manifest(&path, &held, flags.seed)?;
        outputs.push(path.clone());
        outputs.push(seedlab::toydata::io::manifest_path(&path));
    }
    info!("wrote {} training records", train.len());
    manifest.write(&flags.out, &outputs)?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    stages: usize,
    steps: usize,
    kept_records: Vec<usize>,
    filtered_out: Vec<usize>,
    x0_absent_batches: usize,
    final_loss: Option<f64>,
    parameter_checksum: u64,
}

pub fn train(flags: &Flags) -> CliResult<()> {
    let mut cfg: TrainConfig = config::load(flags.config.as_deref())?;
    let data_path = flags.need(&flags.data, "--data")?;
    for (i, s) in cfg.stages.iter_mut().enumerate() {
        s.seed = derive_seed(flags.seed, &format!("stage.{i}"));
    }
    validate_schedule(&cfg.stages)?;
    let data = read_data(data_path)?;
    flags.prepare_out()?;
    let mut manifest = flags.manifest("train", config::as_value(&cfg));
    manifest.input(data_path)?;

    let mut net = VelocityNet::init(cfg.net.clone(), &RngState::new(derive_seed(flags.seed, "init")))?;
    let mut dist = TimestepDistribution::default();
    let mut log = Vec::new();
    let mut summary = TrainSummary {
        stages: cfg.stages.len(),
        steps: 0,
        kept_records: vec![],
        filtered_out: vec![],
        x0_absent_batches: 0,
        final_loss: None,
        parameter_checksum: 0,
    };
    for stage in &cfg.stages {
        info!("{} stage: {} steps", stage.stage.name(), stage.steps);
        let report = train_stage(&mut net, &data, stage, &mut dist)?;
        summary.steps += stage.steps;
        summary.kept_records.push(report.kept_records);
        summary.filtered_out.push(report.filtered_out);
        summary.x0_absent_batches += report.x0_absent_batches;
        if let Some(last) = report.step_records().last() {
            summary.final_loss = Some(last.loss);
        }
        log.extend(report.log);
    }
    summary.parameter_checksum = net.params.checksum();
    let mut outputs = save_net(&flags.out, "teacher", &net, &net.to_checkpoint())?;
    let metrics = flags.out.join("metrics.jsonl");
    write_log(&metrics, &log)?;
    let report = flags.out.join("train_report.json");
    write_json(&report, &summary)?;
    outputs.extend([metrics, report]);
    manifest.write(&flags.out, &outputs)?;
    Ok(())
}

#[derive(Serialize)]
struct DistillSummary {
    cfg: DistillReport,
    noise_ref: NoiseRefReport,
    fewstep: DistillReport,
    teacher_checksum: u64,
}

pub fn distill(flags: &Flags) -> CliResult<()> {
    let mut cfg: DistillCliConfig = config::load(flags.config.as_deref())?;
    let ckpt_path = flags.need(&flags.checkpoint, "--checkpoint")?;
    let data_path = flags.need(&flags.data, "--data")?;
    cfg.distill.seed = derive_seed(flags.seed, "distill");
    cfg.noise_ref.seed = derive_seed(flags.seed, "noise-ref");
    cfg.distill.validate()?;
    let (teacher, _) = load_net(ckpt_path)?;
    if teacher.config.guidance {
        return Err(CliError::Runtime("distillation contract: --checkpoint must be a teacher".into()));
    }
    let data = read_data(data_path)?;
    flags.prepare_out()?;
    let mut manifest = flags.manifest("distill", config::as_value(&cfg));
    manifest.input(ckpt_path)?;
    manifest.input(data_path)?;

    let before = teacher.params.checksum();
    let mut student = VelocityNet::student_from(&teacher, &RngState::new(derive_seed(flags.seed, "student-init")))?;
    info!("guidance distillation: {} iterations", cfg.distill.iterations);
    let cfg_report = distill_cfg(&teacher, &mut student, &data, &cfg.distill)?;
    info!("noise reference: {} iterations", cfg.noise_ref.iterations);
    let (noise_ref, nr_report) = train_noise_ref(&teacher, &data, &cfg.noise_ref)?;
    info!("few-step distillation: {} iterations", cfg.distill.fewstep_iterations);
    let few_report = distill_fewstep(&teacher, &mut student, &noise_ref, &data, &cfg.distill)?;
    if teacher.params.checksum() != before {
        return Err(CliError::Runtime("distillation contract: the teacher changed during distillation".into()));
    }
    let mut outputs = save_net(&flags.out, "student", &student, &student_checkpoint(&student, &cfg.distill))?;
    let nr_path = flags.out.join("noise_ref.ckpt");
    save_checkpoint(&noise_ref.to_checkpoint(), &nr_path)?;
    let report = flags.out.join("distill_report.json");
    write_json(
        &report,
        &DistillSummary { cfg: cfg_report, noise_ref: nr_report, fewstep: few_report, teacher_checksum: before },
    )?;
    outputs.extend([nr_path, report]);
    manifest.write(&flags.out, &outputs)?;
    Ok(())
}

pub fn quantize(flags: &Flags) -> CliResult<()> {
    let cfg: QuantizeConfig = config::load(flags.config.as_deref())?;
    let ckpt_path = flags.need(&flags.checkpoint, "--checkpoint")?;
    let data_path = flags.need(&flags.data, "--data")?;
    let (net, ckpt) = load_net(ckpt_path)?;
    let data = read_data(data_path)?;
    flags.prepare_out()?;
    let mut manifest = flags.manifest("quantize", config::as_value(&cfg));
    manifest.input(ckpt_path)?;
    manifest.input(data_path)?;

    let guidance = ckpt.guidance.map(|g| CalibGuidance {
        image: (g.image.0 as f64, g.image.1 as f64),
        text: (g.text.0 as f64, g.text.1 as f64),
    });
    let rng = RngState::new(derive_seed(flags.seed, "calibration"));
    let calib = calibrate(&net, &data, cfg.calibration_passes, guidance, &rng)?;
    let (table, layers): (SchemeTable, Vec<LayerReport>) = quantize_net(&net, &calib, &cfg.quant)?;
    let schemes = flags.out.join("schemes.json");
    write_json(&schemes, &table)?;
    let report = flags.out.join("quant_report.json");
    write_json(&report, &layers)?;
    manifest.write(&flags.out, &[schemes, report])?;
    Ok(())
}

/// A checkpoint ready to sample: the net, its noise reference and an
/// optional quantization table.
struct Loaded {
    net: VelocityNet,
    ckpt: Checkpoint,
    noise_ref: Option<NoiseRefNet>,
    exec: Option<QuantExec>,
}

impl Loaded {
    fn open(flags: &Flags, ckpt_path: &Path, manifest: &mut Manifest) -> CliResult<Self> {
        let (net, ckpt) = load_net(ckpt_path)?;
        manifest.input(ckpt_path)?;
        let nr_path = noise_ref_path(ckpt_path);
        let noise_ref = if net.config.guidance && nr_path.exists() {
            manifest.input(&nr_path)?;
            Some(NoiseRefNet::from_checkpoint(&load_checkpoint(&nr_path)?)?)
        } else {
            None
        };
        let exec = match &flags.schemes {
            Some(p) => {
                let table: SchemeTable = serde_json::from_str(&std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?)
                    .map_err(|e| CliError::Runtime(format!("quantization contract: {}: {e}", p.display())))?;
                manifest.input(p)?;
                Some(QuantExec::new(&net, &table)?)
            }
            None => None,
        };
        Ok(Self { net, ckpt, noise_ref, exec })
    }

    fn student(&self) -> bool {
        self.net.config.guidance
    }

    fn sampler(&self, spec: &SampleSpec) -> SamplerConfig {
        let steps = spec.steps_for(self.student());
        let cfg = if self.student() {
            if let Some(r) = &self.ckpt.guidance {
                check_guidance(r, spec.w_image, spec.w_text);
            }
            SamplerConfig::student(steps, spec.w_image, spec.w_text)
        } else {
            SamplerConfig::teacher(steps, spec.w_image, spec.w_text)
        };
        cfg.with_noise(spec.noise_for(self.student()))
    }

    fn with_field<T>(&self, f: impl FnOnce(&dyn VelocityField) -> CliResult<T>) -> CliResult<T> {
        match &self.exec {
            Some(exec) => f(&ExecField { net: &self.net, exec }),
            None => f(&self.net),
        }
    }

    fn noise_ref(&self) -> Option<&dyn NoiseReference> {
        self.noise_ref.as_ref().map(|n| n as &dyn NoiseReference)
    }

    fn cost(&self, evals: u64) -> CostReport {
        match &self.exec {
            Some(e) => CostReport::model(&self.net.config, &e.bits(), evals, 0.0),
            None => CostReport::float(&self.net.config, evals, 0.0),
        }
    }

    /// Records of the net's dim, truncated to `limit`.
    fn select<'a>(&self, data: &'a [EditPair], limit: Option<usize>) -> CliResult<Vec<&'a EditPair>> {
        let pairs: Vec<&EditPair> =
            data.iter().filter(|p| p.dim() == self.net.dim()).take(limit.unwrap_or(usize::MAX)).collect();
        if pairs.is_empty() {
            return Err(CliError::Runtime(format!("dataset contract: no records of dim {}", self.net.dim())));
        }
        Ok(pairs)
    }

    fn sample(&self, pairs: &[&EditPair], spec: &SampleSpec, rng: &RngState) -> CliResult<Sampled> {
        let ctx = SampleContext::from_pairs(pairs)?;
        let cfg = self.sampler(spec);
        self.with_field(|f| Ok(sample_batch(f, &ctx, &cfg, rng, self.noise_ref())?))
    }
}

fn targets(pairs: &[&EditPair]) -> CliResult<Tensor> {
    let d = pairs[0].dim();
    Ok(Tensor::matrix(pairs.len(), d, pairs.iter().flat_map(|p| p.target.values().iter().copied()).collect())?)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[derive(Serialize)]
struct SampleLine<'a> {
    id: u64,
    x: &'a [f64],
}

pub fn sample(flags: &Flags) -> CliResult<()> {
    let spec: SampleSpec = config::load(flags.config.as_deref())?;
    let ckpt_path = flags.need(&flags.checkpoint, "--checkpoint")?;
    let data_path = flags.need(&flags.data, "--data")?;
    let mut manifest = flags.manifest("sample", config::as_value(&spec));
    let loaded = Loaded::open(flags, ckpt_path, &mut manifest)?;
    let data = read_data(data_path)?;
    manifest.input(data_path)?;
    flags.prepare_out()?;
    let pairs = loaded.select(&data, spec.limit)?;
    let s = loaded.sample(&pairs, &spec, &RngState::new(derive_seed(flags.seed, "sample")))?;
    let path = flags.out.join("samples.jsonl");
    let mut w = std::io::BufWriter::new(std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?);
    for (i, p) in pairs.iter().enumerate() {
        let line = serde_json::to_string(&SampleLine { id: p.id, x: s.x.row_slice(i) })
            .map_err(|e| CliError::Runtime(format!("sample encoding: {e}")))?;
        writeln!(w, "{line}").map_err(|e| CliError::io(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    drop(w);
    manifest.write(&flags.out, &[path])?;
    Ok(())
}

#[derive(Serialize)]
struct EvalSummary {
    records: usize,
    sampler: SamplerConfig,
    summary: Summary,
    rates: Rates,
    mean_endpoint_error: f64,
    evals_per_record: u64,
    cost: CostReport,
}

pub fn eval(flags: &Flags) -> CliResult<()> {
    let spec: SampleSpec = config::load(flags.config.as_deref())?;
    let ckpt_path = flags.need(&flags.checkpoint, "--checkpoint")?;
    let data_path = flags.need(&flags.data, "--data")?;
    let mut manifest = flags.manifest("eval", config::as_value(&spec));
    let loaded = Loaded::open(flags, ckpt_path, &mut manifest)?;
    let data = read_data(data_path)?;
    manifest.input(data_path)?;
    flags.prepare_out()?;
    let pairs = loaded.select(&data, spec.limit)?;
    let s = loaded.sample(&pairs, &spec, &RngState::new(derive_seed(flags.seed, "eval")))?;
    let fm = seedlab::toydata::FeatureMap::new(loaded.net.dim());
    let records: Vec<EvalRecord> = evaluate_batch(&fm, &pairs, &s.x)?;
    let errors = endpoint_errors(&s.x, &targets(&pairs)?)?;
    let rec_path = flags.out.join("eval_records.jsonl");
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r).map_err(|e| CliError::Runtime(format!("report encoding: {e}")))?);
        text.push('\n');
    }
    std::fs::write(&rec_path, text).map_err(|e| CliError::io(&rec_path, e))?;
    let summary = EvalSummary {
        records: records.len(),
        sampler: loaded.sampler(&spec),
        summary: summarize(&records),
        rates: rates(&records, USABLE_THRESHOLD, SATISFIED_THRESHOLD)?,
        mean_endpoint_error: mean(&errors),
        evals_per_record: s.eval_count,
        cost: loaded.cost(s.eval_count),
    };
    let sum_path = flags.out.join("eval_summary.json");
    write_json(&sum_path, &summary)?;
    info!("mean endpoint error {:.5}", summary.mean_endpoint_error);
    manifest.write(&flags.out, &[rec_path, sum_path])?;
    Ok(())
}

pub fn sweep(flags: &Flags) -> CliResult<()> {
    let cfg: SweepConfig = config::load(flags.config.as_deref())?;
    let ckpt_path = flags.need(&flags.checkpoint, "--checkpoint")?;
    let data_path = flags.need(&flags.data, "--data")?;
    let mut manifest = flags.manifest("sweep", config::as_value(&cfg));
    let loaded = Loaded::open(flags, ckpt_path, &mut manifest)?;
    let data = read_data(data_path)?;
    manifest.input(data_path)?;
    flags.prepare_out()?;
    let pairs: Vec<EditPair> = loaded.select(&data, cfg.limit)?.into_iter().cloned().collect();
    let spec = SampleSpec { steps: cfg.steps, noise: cfg.noise, ..SampleSpec::default() };
    let base = loaded.sampler(&spec);
    let rng = RngState::new(derive_seed(flags.seed, "sweep"));
    let rows = loaded.with_field(|f| Ok(sweep_cfg(f, &base, &pairs, &cfg.w_image, &cfg.w_text, &rng, loaded.noise_ref())?))?;
    let path = flags.out.join("sweep.csv");
    std::fs::write(&path, sweep_csv(&rows)).map_err(|e| CliError::io(&path, e))?;
    manifest.write(&flags.out, &[path])?;
    Ok(())
}

#[derive(Serialize)]
struct BenchSide {
    sampler: SamplerConfig,
    cost: CostReport,
    mean_endpoint_error: f64,
}

#[derive(Serialize)]
struct BenchReport {
    records: usize,
    teacher: BenchSide,
    candidate: BenchSide,
    eval_reduction: f64,
    weighted_mac_reduction: f64,
    wall_clock_speedup: f64,
}

/// Times the float teacher against the given checkpoint (optionally
/// quantized) on the same records and reports the cost-model ratios.
pub fn bench(flags: &Flags) -> CliResult<()> {
    let cfg: BenchConfig = config::load(flags.config.as_deref())?;
    let ckpt_path = flags.need(&flags.checkpoint, "--checkpoint")?;
    let teacher_path = flags.need(&flags.teacher, "--teacher")?;
    let data_path = flags.need(&flags.data, "--data")?;
    let mut manifest = flags.manifest("bench", config::as_value(&cfg));
    let candidate = Loaded::open(flags, ckpt_path, &mut manifest)?;
    let (teacher, _) = load_net(teacher_path)?;
    manifest.input(teacher_path)?;
    if teacher.config.guidance {
        return Err(CliError::Runtime("bench contract: --teacher must be an unguided teacher".into()));
    }
    let data = read_data(data_path)?;
    manifest.input(data_path)?;
    flags.prepare_out()?;
    let pairs = candidate.select(&data, cfg.sample.limit)?;
    let tgt = targets(&pairs)?;
    let rng = RngState::new(derive_seed(flags.seed, "bench"));
    let ctx = SampleContext::from_pairs(&pairs)?;

    let t_cfg = SamplerConfig::teacher(cfg.teacher_steps, cfg.sample.w_image, cfg.sample.w_text);
    let start = Instant::now();
    let ts = sample_batch(&teacher, &ctx, &t_cfg, &rng, None)?;
    let t_ms = start.elapsed().as_secs_f64() * 1e3;
    let start = Instant::now();
    let cs = candidate.sample(&pairs, &cfg.sample, &rng)?;
    let c_ms = start.elapsed().as_secs_f64() * 1e3;
    if candidate.exec.is_none() {
        warn!("benchmarking without --schemes: the candidate runs in float");
    }
    let n = pairs.len() as u64;
    let t_cost = CostReport::float(&teacher.config, ts.eval_count * n, t_ms);
    let mut c_cost = candidate.cost(cs.eval_count * n);
    c_cost.wall_clock_ms = c_ms;
    let report = BenchReport {
        records: pairs.len(),
        eval_reduction: ts.eval_count as f64 / cs.eval_count as f64,
        weighted_mac_reduction: t_cost.weighted_macs / c_cost.weighted_macs,
        wall_clock_speedup: t_ms / c_ms,
        teacher: BenchSide { sampler: t_cfg, cost: t_cost, mean_endpoint_error: mean(&endpoint_errors(&ts.x, &tgt)?) },
        candidate: BenchSide {
            sampler: candidate.sampler(&cfg.sample),
            cost: c_cost,
            mean_endpoint_error: mean(&endpoint_errors(&cs.x, &tgt)?),
        },
    };
    let path = flags.out.join("bench.json");
    write_json(&path, &report)?;
    manifest.write(&flags.out, &[path])?;
    Ok(())
}
