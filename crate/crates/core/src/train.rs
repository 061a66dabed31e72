//! Progressive training, evaluation and inference.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;

use log::{info, warn};
use posexfer_tensor::{Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{checkpoint_path, Checkpoint};
use crate::config::TrainConfig;
use crate::data::{load_manifest_with, sample_pair, DatasetManifest, ImageBuffer, KeypointSet};
use crate::descriptors::{build_descriptors_with, crop_window, Anchor, DescriptorSet, Rect, SegmentTable};
use crate::discriminator::{d_loss_var, g_adv_loss_var, DiscriminatorBank, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::heatmap::render_at;
use crate::losses::{batch_windows, global_perceptual_var, local_perceptual_var, Criterion, CriterionSchedule, FeatureExtractor};
use crate::metrics::{local_ssim_regions, ms_ssim, perceptual_distance, ssim, MetricsReport, MS_SSIM_MIN_SIDE};
use crate::network::{Autoencoder, BOTTLENECK_SIDE};
use crate::nn::{Adam, Ctx, Module};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Step within the level.
    pub step: u64,
    pub level: usize,
    pub criterion: Criterion,
    pub loss_global: f64,
    pub loss_local: f64,
    pub loss_adv: Option<f64>,
    pub lr: f64,
    pub global_step: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_d: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint.
    pub resume: Option<PathBuf>,
    /// Stop (with a checkpoint) once this many global steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log: Vec<LogRecord>,
    /// Levels reached by `grow`, in order.
    pub grown_to: Vec<usize>,
}

/// Inputs of one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub reference: Tensor<f32>,
    pub target: Tensor<f32>,
    pub pose: Tensor<f32>,
    /// Target-pose windows `(sample, rect)` for the local loss.
    pub windows: Vec<(usize, Rect)>,
    /// For the adversarial term: `(sample, reference rect, target rect, region)`
    /// for regions present in both poses.
    pub pairs: Vec<(usize, Rect, Rect, usize)>,
}

pub struct BatchSpec<'a> {
    pub level: usize,
    pub batch_size: usize,
    pub descriptors: usize,
    pub table: &'a SegmentTable,
    pub sigma: f32,
    pub seed: u64,
    pub with_reference_regions: bool,
}

/// Decodes samples `first .. first + batch_size` of the sampling order.
pub fn load_batch(manifest: &DatasetManifest, spec: &BatchSpec<'_>, first: u64) -> Result<Batch> {
    let mut refs = Vec::new();
    let mut tgts = Vec::new();
    let mut poses = Vec::new();
    let mut windows = Vec::new();
    let mut pairs = Vec::new();
    for b in 0..spec.batch_size {
        let p = sample_pair(manifest, spec.seed, first + b as u64, spec.level)?;
        let heat = render_at(&p.target_keypoints, (BOTTLENECK_SIDE, BOTTLENECK_SIDE), spec.sigma)?;
        poses.push(heat.to_tensor());
        let ds = build_descriptors_with(&p.target_keypoints, spec.level, spec.descriptors, spec.table)?;
        windows.extend(batch_windows(&[&ds]).into_iter().map(|(_, r)| (b, r)));
        if spec.with_reference_regions {
            let (a, _) = manifest.pair_indices(spec.seed, first + b as u64)?;
            let rk = manifest.load_keypoints(a)?.scale((spec.level, spec.level))?;
            let rs = build_descriptors_with(&rk, spec.level, spec.descriptors, spec.table)?;
            pairs.extend(matched_regions(&rs, &ds).into_iter().map(|(r, t, d)| (b, r, t, d)));
        }
        refs.push(p.reference);
        tgts.push(p.target);
    }
    let refs: Vec<_> = refs.iter().collect();
    let tgts: Vec<_> = tgts.iter().collect();
    let poses: Vec<_> = poses.iter().collect();
    Ok(Batch {
        reference: ImageBuffer::batch(&refs)?,
        target: ImageBuffer::batch(&tgts)?,
        pose: Tensor::stack_batch(&poses),
        windows,
        pairs,
    })
}

/// Regions present in both sets, as `(reference rect, target rect, index)`
/// where `index` numbers the region in the candidate order.
fn matched_regions(reference: &DescriptorSet, target: &DescriptorSet) -> Vec<(Rect, Rect, usize)> {
    let key = |a: &Anchor| match *a {
        Anchor::Keypoint(k) => (k, k, 0u32),
        Anchor::Segment { a, b, t } => (a, b, t.to_bits()),
    };
    let index: BTreeMap<_, _> = reference
        .descriptors
        .iter()
        .map(|d| (key(&d.anchor), crop_window((d.x, d.y), reference.level)))
        .collect();
    target
        .descriptors
        .iter()
        .enumerate()
        .filter_map(|(i, d)| {
            index
                .get(&key(&d.anchor))
                .map(|r| (*r, crop_window((d.x, d.y), target.level), i))
        })
        .collect()
}

/// Losses of one generator update.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepLosses {
    pub global: f64,
    pub local: f64,
    pub adv: Option<f64>,
    pub d: Option<f64>,
}

impl StepLosses {
    pub fn total(&self, lambda_adv: f64) -> f64 {
        match self.adv {
            Some(a) => self.global + lambda_adv * a,
            None => self.global + self.local,
        }
    }
}

pub struct Adversary {
    pub bank: DiscriminatorBank<f32>,
    pub opt: Adam<f32>,
    pub config: DiscriminatorConfig,
}

/// Mutable training state: everything a checkpoint stores.
pub struct Trainer {
    pub config: TrainConfig,
    pub manifest: DatasetManifest,
    pub extractor: FeatureExtractor<f32>,
    pub generator: Autoencoder<f32>,
    pub gen_opt: Adam<f32>,
    pub adversary: Option<Adversary>,
    pub step: u64,
    pub global_step: u64,
    pub sample_cursor: u64,
    table: SegmentTable,
    log_file: Option<BufWriter<File>>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let manifest = load_manifest_with(&config.data.manifest, config.pairing_policy())?;
        let extractor = FeatureExtractor::build(&config.extractor)?;
        let generator = Autoencoder::new(config.schedule.levels[0], config.model)?;
        let gen_opt = Adam::new(config.optimizer);
        let table = config.segments.segment_table();
        Ok(Self {
            config,
            manifest,
            extractor,
            generator,
            gen_opt,
            adversary: None,
            step: 0,
            global_step: 0,
            sample_cursor: 0,
            table,
            log_file: None,
        })
    }

    /// Restores state from a checkpoint written by a run with this config.
    pub fn resume(config: TrainConfig, path: &Path) -> Result<Self> {
        let mut t = Self::new(config)?;
        let c = Checkpoint::load(path)?;
        if !t.config.schedule.levels.contains(&c.level) {
            return Err(Error::LevelMismatch(format!(
                "checkpoint level {} is not on the configured ladder {:?}",
                c.level, t.config.schedule.levels
            )));
        }
        if *c.generator.config() != t.config.model {
            return Err(Error::Config(format!(
                "checkpoint model settings {:?} differ from the config {:?}",
                c.generator.config(),
                t.config.model
            )));
        }
        t.generator = c.generator;
        t.gen_opt = c.gen_opt;
        t.gen_opt.config = t.config.optimizer;
        t.adversary = c.discriminator.map(|(bank, mut opt, config)| {
            opt.config = t.config.optimizer;
            Adversary { bank, opt, config }
        });
        t.step = c.step;
        t.global_step = c.global_step;
        t.sample_cursor = c.sample_cursor;
        Ok(t)
    }

    pub fn level(&self) -> usize {
        self.generator.level()
    }

    fn is_final_level(&self) -> bool {
        self.level() == self.config.final_level()
    }

    pub fn adversarial(&self) -> bool {
        self.config.discriminator.active_at(self.level(), self.config.final_level())
    }

    pub fn batch_spec(&self) -> Result<BatchSpec<'_>> {
        let level = self.level();
        Ok(BatchSpec {
            level,
            batch_size: self.config.schedule.batch_size(level)?,
            descriptors: self.config.segments.schedule()?.count(level)?,
            table: &self.table,
            sigma: self.config.schedule.sigma,
            seed: self.config.schedule.seed,
            with_reference_regions: self.adversarial(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = BTreeMap::new();
        extra.insert("train_config".to_string(), self.config.to_toml());
        Checkpoint {
            generator: self.generator.clone(),
            gen_opt: self.gen_opt.clone(),
            discriminator: self
                .adversary
                .as_ref()
                .map(|a| (a.bank.clone(), a.opt.clone(), a.config)),
            level: self.level(),
            step: self.step,
            global_step: self.global_step,
            sigma: self.config.schedule.sigma,
            sample_cursor: self.sample_cursor,
            extra,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    fn ensure_adversary(&mut self) -> Result<()> {
        if self.adversarial() && self.adversary.is_none() {
            let side = self.level() / 8;
            self.adversary = Some(Adversary {
                bank: DiscriminatorBank::new(side, &self.config.discriminator)?,
                opt: Adam::new(self.config.optimizer),
                config: self.config.discriminator,
            });
        }
        Ok(())
    }

    /// One update (discriminator then generator when adversarial).
    pub fn train_step(&mut self, batch: &Batch, crit: Criterion) -> Result<StepLosses> {
        self.ensure_adversary()?;
        let lw = self.config.loss;
        let tape = Tape::new();
        let mut ctx = Ctx::new(&tape, true);
        let x = tape.constant_tensor(batch.reference.clone());
        let gt = tape.constant_tensor(batch.target.clone());
        let pose = tape.constant_tensor(batch.pose.clone());
        let out = self.generator.forward(&mut ctx, x, pose)?;
        let global = global_perceptual_var(&mut ctx, &self.extractor, gt, out, crit)?;
        let mut losses = StepLosses {
            global: global.value().item() as f64,
            ..Default::default()
        };
        let total = if let Some(adv) = self.adversary.as_mut() {
            let (d_val, g_adv) = adversarial_terms(adv, &mut ctx, batch, x, gt, out)?;
            losses.d = d_val;
            match g_adv {
                Some(g) => {
                    losses.adv = Some(g.value().item() as f64);
                    global
                        .scale(lw.global_weight as f32)
                        .add(&g.scale(adv.config.lambda_adv as f32))
                }
                None => global.scale(lw.global_weight as f32),
            }
        } else if batch.windows.is_empty() {
            global.scale(lw.global_weight as f32)
        } else {
            let local = local_perceptual_var(&mut ctx, &self.extractor, gt, out, &batch.windows, crit)?;
            losses.local = local.value().item() as f64;
            global
                .scale(lw.global_weight as f32)
                .add(&local.scale(lw.local_weight as f32))
        };
        let total_value = total.value().item();
        if !total_value.is_finite() {
            return Err(Error::Config(format!("non-finite loss {total_value}")));
        }
        let grads = tape.backward(total);
        let named = ctx.gradients(&grads);
        self.gen_opt.step(&mut self.generator, &named);
        self.generator.apply_updates(&ctx.updates);
        Ok(losses)
    }

    fn log(&mut self, rec: &LogRecord) -> Result<()> {
        if self.log_file.is_none() {
            let dir = &self.config.data.out_dir;
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join("train_log.jsonl");
            let f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            self.log_file = Some(BufWriter::new(f));
        }
        let w = self.log_file.as_mut().expect("opened above");
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(w, "{line}")
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(&self.config.data.out_dir, e))?;
        Ok(())
    }

    fn flush_log(&mut self) {
        if let Some(w) = self.log_file.as_mut() {
            let _ = w.flush();
        }
    }

    /// Runs the remaining schedule.
    pub fn run(&mut self, opts: &TrainOptions) -> Result<TrainReport> {
        let out_dir = self.config.data.out_dir.clone();
        let total = self.config.schedule.iterations_per_level;
        let sched = CriterionSchedule { total };
        let mut report = TrainReport {
            final_checkpoint: PathBuf::new(),
            checkpoints: Vec::new(),
            log: Vec::new(),
            grown_to: Vec::new(),
        };
        loop {
            self.ensure_adversary()?;
            let bsz = self.config.schedule.batch_size(self.level())?;
            let remaining = total.saturating_sub(self.step);
            let limit = opts
                .stop_after
                .map_or(remaining, |s| remaining.min(s.saturating_sub(self.global_step)));
            let batches = self.spawn_loader(limit)?;
            for batch in batches.iter().take(limit as usize) {
                let batch = batch?;
                let crit = sched.criterion(self.step)?;
                let losses = match self.train_step(&batch, crit) {
                    Ok(l) if l.total(self.config.discriminator.lambda_adv).is_finite() => l,
                    Ok(_) | Err(Error::Config(_)) => {
                        let snapshot = out_dir.join(format!(
                            "diagnostic_L{}_S{:08}.safetensors",
                            self.level(),
                            self.global_step
                        ));
                        self.flush_log();
                        self.save(&snapshot)?;
                        return Err(Error::NonFiniteLoss {
                            level: self.level(),
                            step: self.step,
                            snapshot,
                        });
                    }
                    Err(e) => return Err(e),
                };
                let rec = LogRecord {
                    step: self.step,
                    level: self.level(),
                    criterion: crit,
                    loss_global: losses.global,
                    loss_local: losses.local,
                    loss_adv: losses.adv,
                    lr: self.config.optimizer.lr,
                    global_step: self.global_step,
                    loss_d: losses.d,
                };
                self.step += 1;
                self.global_step += 1;
                self.sample_cursor += bsz as u64;
                if self.config.schedule.log_every > 0 && rec.step % self.config.schedule.log_every == 0 {
                    self.log(&rec)?;
                }
                if rec.step == sched.switch_point() && rec.step > 0 {
                    info!("level {}: criterion switches to {} at step {}", rec.level, crit.as_str(), rec.step);
                }
                report.log.push(rec);
                let every = self.config.schedule.checkpoint_every;
                if every > 0 && self.step % every == 0 && self.step < total {
                    let p = checkpoint_path(&out_dir, self.level(), self.global_step);
                    self.save(&p)?;
                    report.checkpoints.push(p);
                }
            }
            self.flush_log();
            let p = checkpoint_path(&out_dir, self.level(), self.global_step);
            if report.checkpoints.last() != Some(&p) {
                self.save(&p)?;
                report.checkpoints.push(p.clone());
            }
            report.final_checkpoint = p;
            if self.step < total {
                info!("stopped at global step {}", self.global_step);
                return Ok(report);
            }
            if self.is_final_level() {
                return Ok(report);
            }
            self.generator.grow()?;
            self.gen_opt.retain_for(&self.generator);
            self.step = 0;
            report.grown_to.push(self.level());
            info!("grew to level {}", self.level());
        }
    }

    /// Batches for the next `count` steps at the current level, in order.
    fn spawn_loader(&self, count: u64) -> Result<Loader> {
        let spec = self.batch_spec()?;
        let first = self.sample_cursor;
        let bsz = spec.batch_size as u64;
        if !self.config.data.prefetch || count <= 1 {
            let owned = OwnedSpec::from(&spec);
            let manifest = self.manifest.clone();
            let items = (0..count).map(move |i| load_batch(&manifest, &owned.spec(), first + i * bsz));
            return Ok(Loader::Inline(Box::new(items)));
        }
        let owned = OwnedSpec::from(&spec);
        let manifest = self.manifest.clone();
        let (tx, rx) = mpsc::sync_channel(2);
        thread::spawn(move || {
            for i in 0..count {
                let b = load_batch(&manifest, &owned.spec(), first + i * bsz);
                let stop = b.is_err();
                if tx.send(b).is_err() || stop {
                    break;
                }
            }
        });
        Ok(Loader::Thread(rx))
    }
}

fn adversarial_terms<'t>(
    adv: &mut Adversary,
    ctx: &mut Ctx<'t, f32>,
    batch: &Batch,
    x: Var<'t, f32>,
    gt: Var<'t, f32>,
    out: Var<'t, f32>,
) -> Result<(Option<f64>, Option<Var<'t, f32>>)> {
    if batch.pairs.is_empty() {
        return Ok((None, None));
    }
    let side = adv.bank.crop_side();
    let ref_o: Vec<_> = batch.pairs.iter().map(|(b, r, _, _)| (*b, r.y0, r.x0)).collect();
    let tgt_o: Vec<_> = batch.pairs.iter().map(|(b, _, t, _)| (*b, t.y0, t.x0)).collect();
    let regions: Vec<_> = batch.pairs.iter().map(|p| p.3).collect();

    // Discriminator update on its own tape; the generator output is a constant.
    let d_tape = Tape::new();
    let mut d_ctx = Ctx::new(&d_tape, true);
    let r = d_tape.constant(x.value()).crops(&ref_o, side, side);
    let real = d_tape.constant(gt.value()).crops(&tgt_o, side, side);
    let fake = d_tape.constant(out.value()).crops(&tgt_o, side, side);
    let s_real = adv.bank.score(&mut d_ctx, r, real, &regions)?;
    let s_fake = adv.bank.score(&mut d_ctx, r, fake, &regions)?;
    let d_loss = d_loss_var(&s_real, &s_fake);
    let d_value = d_loss.value().item() as f64;
    let grads = d_tape.backward(d_loss);
    let named = d_ctx.gradients(&grads);
    adv.opt.step(&mut adv.bank, &named);
    adv.bank.apply_updates(&d_ctx.updates);

    // Generator term through the updated, frozen discriminator.
    let r = x.crops(&ref_o, side, side);
    let fake = out.crops(&tgt_o, side, side);
    let scores = ctx.with_frozen(|ctx| adv.bank.score(ctx, r, fake, &regions))?;
    Ok((Some(d_value), Some(g_adv_loss_var(&scores))))
}

struct OwnedSpec {
    level: usize,
    batch_size: usize,
    descriptors: usize,
    table: SegmentTable,
    sigma: f32,
    seed: u64,
    with_reference_regions: bool,
}

impl OwnedSpec {
    fn from(s: &BatchSpec<'_>) -> Self {
        Self {
            level: s.level,
            batch_size: s.batch_size,
            descriptors: s.descriptors,
            table: s.table.clone(),
            sigma: s.sigma,
            seed: s.seed,
            with_reference_regions: s.with_reference_regions,
        }
    }

    fn spec(&self) -> BatchSpec<'_> {
        BatchSpec {
            level: self.level,
            batch_size: self.batch_size,
            descriptors: self.descriptors,
            table: &self.table,
            sigma: self.sigma,
            seed: self.seed,
            with_reference_regions: self.with_reference_regions,
        }
    }
}

enum Loader {
    Inline(Box<dyn Iterator<Item = Result<Batch>>>),
    Thread(mpsc::Receiver<Result<Batch>>),
}

impl Loader {
    fn iter(self) -> Box<dyn Iterator<Item = Result<Batch>>> {
        match self {
            Loader::Inline(it) => it,
            Loader::Thread(rx) => Box::new(rx.into_iter()),
        }
    }
}

/// Trains from scratch, or resumes, and returns the final checkpoint path.
pub fn train(config: TrainConfig) -> Result<PathBuf> {
    Ok(train_with(config, &TrainOptions::default())?.final_checkpoint)
}

pub fn train_with(config: TrainConfig, opts: &TrainOptions) -> Result<TrainReport> {
    let mut t = match &opts.resume {
        Some(p) => Trainer::resume(config, p)?,
        None => Trainer::new(config)?,
    };
    t.run(opts)
}

/// Single forward pass in evaluation mode. Keypoints may be in any
/// resolution; they are rescaled to the pose grid.
pub fn infer(ckpt: &Checkpoint, reference: &ImageBuffer, target: &KeypointSet) -> Result<ImageBuffer> {
    if reference.side() != ckpt.level {
        return Err(Error::LevelMismatch(format!(
            "reference is {}px but the checkpoint is at level {}",
            reference.side(),
            ckpt.level
        )));
    }
    let heat = render_at(target, (BOTTLENECK_SIDE, BOTTLENECK_SIDE), ckpt.sigma)?;
    let tape = Tape::new();
    let mut ctx = Ctx::new(&tape, false);
    let x = tape.constant_tensor(reference.to_tensor());
    let p = tape.constant_tensor(heat.to_tensor());
    let y = ckpt.generator.forward(&mut ctx, x, p)?;
    ImageBuffer::from_tensor(&y.value(), 0)
}

/// Frame-by-frame inference; no state is carried between frames.
pub fn infer_sequence(ckpt: &Checkpoint, reference: &ImageBuffer, frames: &[KeypointSet]) -> Result<Vec<ImageBuffer>> {
    frames.iter().map(|k| infer(ckpt, reference, k)).collect()
}

/// Scores of one evaluated pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairMetrics {
    pub subject_id: String,
    pub reference_frame: String,
    pub target_frame: String,
    pub ssim: f64,
    pub ms_ssim: Option<f64>,
    pub local_ssim: f64,
    pub perceptual_distance: f64,
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub level: usize,
    /// Regions for local SSIM (the densest descriptor set by default).
    pub descriptors: usize,
    pub table: SegmentTable,
    pub max_pairs: Option<usize>,
    /// Score the ground truth against itself instead of running the model.
    pub self_check: bool,
}

impl EvalOptions {
    pub fn at_level(level: usize) -> Self {
        let table = SegmentTable::default();
        Self {
            level,
            descriptors: table.max_count(),
            table,
            max_pairs: None,
            self_check: false,
        }
    }
}

/// Runs the model on every manifest pair and aggregates the metrics.
///
/// The model runs at its own level; when a lower level is requested the
/// output and ground truth are box-downsampled before scoring.
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    fx: &FeatureExtractor<f32>,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Vec<PairMetrics>)> {
    crate::data::check_level(opts.level)?;
    if opts.level > ckpt.level {
        return Err(Error::LevelMismatch(format!(
            "requested level {} is above the checkpoint level {}",
            opts.level, ckpt.level
        )));
    }
    let pairs: Vec<_> = manifest
        .all_pairs()
        .iter()
        .take(opts.max_pairs.unwrap_or(usize::MAX))
        .copied()
        .collect();
    let mut rows = Vec::with_capacity(pairs.len());
    let mut regions_all = Vec::new();
    for (a, b) in pairs {
        let (a, b) = (a as usize, b as usize);
        let (reference, _) = manifest.load_frame(a, ckpt.level)?;
        let (target, kp) = manifest.load_frame(b, ckpt.level)?;
        let output = if opts.self_check {
            target.clone()
        } else {
            infer(ckpt, &reference, &kp)?
        };
        let (output, target) = if opts.level < ckpt.level {
            (output.downsample(opts.level)?, target.downsample(opts.level)?)
        } else {
            (output, target)
        };
        let kp = kp.scale((opts.level, opts.level))?;
        let ds = build_descriptors_with(&kp, opts.level, opts.descriptors, &opts.table)?;
        let (local, regions) = if ds.is_empty() {
            warn!("pair {a}->{b}: no descriptor regions; local SSIM falls back to full-image SSIM");
            (ssim(&output, &target)?, Vec::new())
        } else {
            local_ssim_regions(&output, &target, &ds)?
        };
        regions_all.extend(regions);
        rows.push(PairMetrics {
            subject_id: manifest.records[a].subject_id.clone(),
            reference_frame: manifest.records[a].frame_id.clone(),
            target_frame: manifest.records[b].frame_id.clone(),
            ssim: ssim(&output, &target)?,
            ms_ssim: if opts.level >= MS_SSIM_MIN_SIDE {
                Some(ms_ssim(&output, &target)?)
            } else {
                None
            },
            local_ssim: local,
            perceptual_distance: perceptual_distance(&output, &target, fx)?,
        });
    }
    if rows.is_empty() {
        return Err(Error::EmptyManifest(PathBuf::from("<evaluation>")));
    }
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&PairMetrics) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let report = MetricsReport {
        ssim: mean(&|r| r.ssim),
        ms_ssim: rows
            .iter()
            .map(|r| r.ms_ssim)
            .collect::<Option<Vec<_>>>()
            .map(|v| v.iter().sum::<f64>() / n),
        local_ssim: mean(&|r| r.local_ssim),
        perceptual_distance: mean(&|r| r.perceptual_distance),
        n_pairs: rows.len(),
        per_region: None,
    };
    Ok((report, rows))
}
