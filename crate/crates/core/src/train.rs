//! L1 training with Adam and a cosine schedule, resumable from checkpoints,
//! plus the evaluation harness.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::data::{self, bicubic_downsample, crop_to_multiple, sample_patch_pair};
use crate::engine::{Tape, Var};
use crate::error::{CheckpointError, Error, Result};
use crate::metrics::{score, ImageScore};
use crate::model::{Mode, Model};
use crate::optim::{cosine_lr, AdamConfig, AdamState};
use crate::params::Bound;
use crate::tensor::Tensor;

/// Mean absolute difference over every element; with equal image sizes this
/// is the batch mean of per-image means.
pub fn l1_loss<'t>(sr: Var<'t, f32>, hr: &Tensor<f32>) -> Result<Var<'t, f32>> {
    if sr.shape() != hr.shape() {
        return Err(Error::Shape(format!(
            "l1 loss between {:?} and {:?}",
            sr.shape(),
            hr.shape()
        )));
    }
    Ok(sr.sub(sr.tape().constant(hr))?.abs().mean())
}

/// Stacks equally sized `[H, W, C]` images into `[N, H, W, C]`.
pub fn stack(images: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let mut data = Vec::with_capacity(first.numel() * images.len());
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::Shape(format!(
                "batch mixes {:?} and {:?}",
                first.shape(),
                im.shape()
            )));
        }
        data.extend_from_slice(im.data());
    }
    let mut shape = vec![images.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub lr: Tensor<f32>,
    pub hr: Tensor<f32>,
}

/// Forward in train mode, L1 loss, backward, one Adam update. Gradients are
/// cleared before returning.
pub fn train_step(
    model: &mut Model<f32>,
    adam: &mut AdamState<f32>,
    batch: &Batch,
    lr: f64,
    gumbel_seed: u64,
) -> Result<f32> {
    let (loss, grads) = {
        let tape = Tape::new();
        let p = Bound::new(&tape, &model.params);
        let sr = model.forward(&p, &batch.lr, Mode::Train { seed: gumbel_seed })?;
        let loss = l1_loss(sr, &batch.hr)?;
        let value = loss.item();
        if !value.is_finite() {
            let node = tape.first_non_finite().unwrap_or_else(|| "loss".into());
            return Err(Error::NonFinite { node });
        }
        let g = tape.backward(loss)?;
        (value, p.collect_grads(&g))
    };
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::NonFinite {
                node: format!("gradient of {name}"),
            });
        }
        model.params.get_mut(&name)?.grad = Some(g.into_data());
    }
    adam.step(model.params.tensors_mut(), lr)?;
    model.params.zero_grads();
    Ok(loss)
}

/// Learning rate of `epoch` (zero-based): `lr` at the first epoch, `lr_min`
/// at the last.
pub fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    if cfg.epochs == 1 {
        return Ok(cfg.lr);
    }
    cosine_lr(epoch, cfg.epochs - 1, cfg.lr, cfg.lr_min)
}

/// Independent stream for every global step, so a resumed run draws the
/// same patches and noise as an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

/// Draws `batch` patch pairs from randomly chosen images.
pub fn sample_batch(images: &[Tensor<f32>], cfg: &TrainConfig, r: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut lrs = Vec::with_capacity(cfg.batch);
    let mut hrs = Vec::with_capacity(cfg.batch);
    for _ in 0..cfg.batch {
        let img = &images[rng.gen_range(0..images.len())];
        let pair = sample_patch_pair(img, r, cfg.patch, rng, cfg.augment)?;
        lrs.push(pair.lr);
        hrs.push(pair.hr);
    }
    Ok(Batch {
        lr: stack(&lrs)?,
        hr: stack(&hrs)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f32,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!("{},{},{},{}", self.epoch, self.step, self.lr, self.loss)
    }

    pub fn parse(line: &str) -> Option<Self> {
        let mut it = line.trim().split(',');
        let rec = Self {
            epoch: it.next()?.parse().ok()?,
            step: it.next()?.parse().ok()?,
            lr: it.next()?.parse().ok()?,
            loss: it.next()?.parse().ok()?,
        };
        it.next().is_none().then_some(rec)
    }
}

pub const LOG_HEADER: &str = "epoch,step,lr,loss";

/// Model, optimizer and position in the schedule.
pub struct Trainer {
    pub run: RunConfig,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    /// Global index of the next step.
    pub step: u64,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.validate()?;
        let model = Model::init(run.model.clone(), run.train.seed)?;
        let adam = AdamState::new(model.params.tensors(), AdamConfig::default());
        Ok(Self { run, model, adam, step: 0 })
    }

    /// Restores model, optimizer and step; the network settings must agree
    /// with `run`.
    pub fn resume(run: RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        run.validate()?;
        let model = ckpt.model()?;
        if model.config != run.model {
            return Err(CheckpointError::Incompatible(
                "checkpoint network settings differ from the config".into(),
            )
            .into());
        }
        let adam = ckpt
            .adam(&model)?
            .ok_or_else(|| CheckpointError::Incompatible("no optimizer state to resume".into()))?;
        let step = ckpt.get_u64("step")?;
        Ok(Self { run, model, adam, step })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut extra = vec![("step", self.step.to_string())];
        let pairs = self.run.train.to_pairs();
        let named: Vec<(String, String)> = pairs.into_iter().map(|(k, v)| (format!("train.{k}"), v)).collect();
        extra.extend(named.iter().map(|(k, v)| (k.as_str(), v.clone())));
        Checkpoint::from_model(&self.model, Some(&self.adam), &extra)
    }

    pub fn finished(&self) -> bool {
        self.step >= self.run.train.total_steps()
    }

    /// Samples a batch for the current step and trains on it.
    pub fn run_step(&mut self, images: &[Tensor<f32>]) -> Result<StepRecord> {
        let cfg = &self.run.train;
        let epoch = (self.step / cfg.steps_per_epoch as u64) as usize;
        let lr = epoch_lr(cfg, epoch)?;
        let mut rng = step_rng(cfg.seed, self.step);
        let batch = sample_batch(images, cfg, self.run.model.scale, &mut rng)?;
        let gumbel_seed = rng.gen();
        let loss = train_step(&mut self.model, &mut self.adam, &batch, lr, gumbel_seed)?;
        let rec = StepRecord {
            epoch,
            step: self.step,
            lr,
            loss,
        };
        self.step += 1;
        Ok(rec)
    }
}

pub fn load_dataset(dir: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    data::list_pngs(dir)?
        .into_iter()
        .map(|p| {
            let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok((name, data::load_image(&p)?))
        })
        .collect()
}

/// Log path written next to a checkpoint.
pub fn log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log");
    PathBuf::from(s)
}

#[derive(Clone, Debug, Default)]
pub struct LoopOptions {
    pub resume: Option<PathBuf>,
    /// Save and stop once this many global steps have run.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: u64,
    pub last: Option<StepRecord>,
    pub log: PathBuf,
}

/// Trains on the PNGs in `data_dir`, appending `epoch,step,lr,loss` lines to
/// `<out>.log` and saving `out` at every save interval and at the end.
pub fn train_loop(
    run: &RunConfig,
    data_dir: &Path,
    out: &Path,
    opts: &LoopOptions,
    mut progress: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let images: Vec<Tensor<f32>> = load_dataset(data_dir)?.into_iter().map(|(_, t)| t).collect();
    let mut trainer = match &opts.resume {
        Some(p) => Trainer::resume(run.clone(), &Checkpoint::load(p)?)?,
        None => Trainer::new(run.clone())?,
    };
    let log = log_path(out);
    let mut file = if opts.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log)?
    } else {
        fs::File::create(&log)?
    };
    if file.metadata()?.len() == 0 {
        writeln!(file, "{LOG_HEADER}")?;
    }
    let spe = run.train.steps_per_epoch as u64;
    let mut last = None;
    while !trainer.finished() && opts.stop_after.is_none_or(|s| trainer.step < s) {
        let rec = trainer.run_step(&images)?;
        writeln!(file, "{}", rec.log_line())?;
        progress(&rec);
        last = Some(rec);
        let epoch_done = trainer.step % spe == 0;
        let epoch = (trainer.step / spe) as usize;
        if (epoch_done && epoch % run.train.save_every == 0) || trainer.finished() {
            file.flush()?;
            trainer.checkpoint().save(out)?;
        }
    }
    file.flush()?;
    trainer.checkpoint().save(out)?;
    Ok(TrainOutcome {
        steps: trainer.step,
        last,
        log,
    })
}

/// Crops `hr` to a multiple of `r` and returns it with its bicubic reduction.
pub fn degrade(hr: &Tensor<f32>, r: usize) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let hr = crop_to_multiple(hr, r)?;
    let lr = bicubic_downsample(&hr, r)?;
    Ok((hr, lr))
}

/// Scores `predict(lr)` against each HR image after degrading it by `r`.
pub fn evaluate_with(
    images: &[(String, Tensor<f32>)],
    r: usize,
    mut predict: impl FnMut(&Tensor<f32>) -> Result<Tensor<f32>>,
) -> Result<Vec<ImageScore>> {
    images
        .iter()
        .map(|(name, img)| {
            let (hr, lr) = degrade(img, r)?;
            let sr = predict(&lr)?;
            score(name, &sr, &hr)
        })
        .collect()
}

/// Eval-mode scores of a checkpoint on every PNG in `hr_dir`.
pub fn evaluate(ckpt: &Checkpoint, hr_dir: &Path, r: usize) -> Result<Vec<ImageScore>> {
    let model = ckpt.model_for_scale(r)?;
    let images = load_dataset(hr_dir)?;
    evaluate_with(&images, r, |lr| model.super_resolve(lr))
}

/// Same protocol with plain bicubic enlargement as the predictor.
pub fn evaluate_bicubic(images: &[(String, Tensor<f32>)], r: usize) -> Result<Vec<ImageScore>> {
    evaluate_with(images, r, |lr| data::bicubic_upsample(lr, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_image, synthetic_scene, SCENE_GRAIN};
    use crate::metrics::{csv_report, mean_scores};

    fn tiny_run() -> RunConfig {
        let mut run = RunConfig::toy(2);
        run.model.channels = 8;
        run.model.heads = 2;
        run.model.groups = 1;
        run.model.window = 4;
        run.train = TrainConfig {
            batch: 2,
            epochs: 3,
            steps_per_epoch: 2,
            patch: 8,
            save_every: 1,
            ..run.train
        };
        run
    }

    fn dataset(dir: &Path, n: usize, side: usize) {
        for i in 0..n {
            save_image(&synthetic_scene(side, side, i as u64, SCENE_GRAIN), &dir.join(format!("im{i}.png"))).unwrap();
        }
    }

    #[test]
    fn l1_values_and_gradient() {
        let tape = Tape::new();
        let hr = Tensor::from_fn(vec![2, 3, 3, 3], |i| (i % 7) as f32 * 0.1);
        let same = tape.leaf_with(&hr, true);
        assert_eq!(l1_loss(same, &hr).unwrap().item(), 0.0);
        let shifted = hr.map(|x| x + 0.5);
        let sr = tape.leaf_with(&shifted, true);
        let loss = l1_loss(sr, &hr).unwrap();
        assert!((loss.item() - 0.5).abs() < 1e-6);
        let g = tape.backward(loss).unwrap().wrt(sr);
        let n = hr.numel() as f32;
        assert!(g.data().iter().all(|&v| (v - 1.0 / n).abs() < 1e-9));
        assert!(l1_loss(sr, &Tensor::zeros(vec![2, 3, 3, 1])).is_err());
    }

    #[test]
    fn l1_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hr = Tensor::<f32>::uniform(vec![1, 4, 4, 3], 0.0, 1.0, &mut rng);
        // keep every residual well away from the kink at zero
        let sr = Tensor::from_fn(vec![1, 4, 4, 3], |i| hr.data()[i] + if i % 2 == 0 { 0.3 } else { -0.3 });
        let rep = crate::gradcheck::check(&[sr], 1e-3, 1, |_, v| l1_loss(v[0], &hr))
        .unwrap();
        assert!(rep.max_rel_err < 1e-2, "{rep:?}");
    }

    #[test]
    fn lr_schedule_endpoints_and_formula() {
        let cfg = TrainConfig::default();
        assert_eq!(epoch_lr(&cfg, 0).unwrap(), 4e-4);
        assert!((epoch_lr(&cfg, cfg.epochs - 1).unwrap() - 5e-7).abs() < 1e-20);
        for e in [1, 500, 999, 1500] {
            let phase = std::f64::consts::PI * e as f64 / (cfg.epochs - 1) as f64;
            let expect = 5e-7 + 0.5 * (4e-4 - 5e-7) * (1.0 + phase.cos());
            assert_eq!(epoch_lr(&cfg, e).unwrap(), expect);
        }
    }

    #[test]
    fn step_is_finite_and_deterministic() {
        let run = tiny_run();
        let images = vec![synthetic_scene(32, 32, 1, SCENE_GRAIN)];
        let mut a = Trainer::new(run.clone()).unwrap();
        let mut b = Trainer::new(run).unwrap();
        for _ in 0..3 {
            let (ra, rb) = (a.run_step(&images).unwrap(), b.run_step(&images).unwrap());
            assert!(ra.loss.is_finite());
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
        assert!(a.model.params.tensors().all(|t| t.grad.is_none()));
    }

    #[test]
    fn nan_input_aborts_with_diagnostic() {
        let mut t = Trainer::new(tiny_run()).unwrap();
        let mut lr = Tensor::full(vec![1, 8, 8, 3], 0.5f32);
        lr.data_mut()[5] = f32::NAN;
        let batch = Batch {
            lr,
            hr: Tensor::full(vec![1, 16, 16, 3], 0.5),
        };
        match train_step(&mut t.model, &mut t.adam, &batch, 1e-3, 0) {
            Err(Error::NonFinite { node }) => assert!(node.contains("node #"), "{node}"),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn log_lines_round_trip() {
        let rec = StepRecord {
            epoch: 3,
            step: 17,
            lr: 3.999e-4,
            loss: 0.123_456_79,
        };
        assert_eq!(StepRecord::parse(&rec.log_line()), Some(rec));
        assert_eq!(StepRecord::parse(LOG_HEADER), None);
    }

    #[test]
    fn loop_writes_log_and_resume_matches() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("hr");
        fs::create_dir(&data).unwrap();
        dataset(&data, 2, 24);
        let run = tiny_run();
        let full = dir.path().join("full.ckpt");
        train_loop(&run, &data, &full, &LoopOptions::default(), |_| {}).unwrap();
        let full_log: Vec<String> = fs::read_to_string(log_path(&full)).unwrap().lines().map(String::from).collect();
        assert_eq!(full_log[0], LOG_HEADER);
        assert_eq!(full_log.len(), 1 + 6);
        let recs: Vec<StepRecord> = full_log[1..].iter().map(|l| StepRecord::parse(l).unwrap()).collect();
        assert_eq!(recs[0].lr, 4e-4);
        assert_eq!(recs[5].lr, 5e-7);
        assert_eq!(recs.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);

        let part = dir.path().join("part.ckpt");
        let opts = LoopOptions {
            stop_after: Some(3),
            ..Default::default()
        };
        let out = train_loop(&run, &data, &part, &opts, |_| {}).unwrap();
        assert_eq!(out.steps, 3);
        let opts = LoopOptions {
            resume: Some(part.clone()),
            ..Default::default()
        };
        train_loop(&run, &data, &part, &opts, |_| {}).unwrap();
        let resumed: Vec<String> = fs::read_to_string(log_path(&part)).unwrap().lines().map(String::from).collect();
        assert_eq!(resumed, full_log);
        assert_eq!(
            Checkpoint::load(&part).unwrap().to_bytes().unwrap(),
            Checkpoint::load(&full).unwrap().to_bytes().unwrap()
        );
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("x.ckpt");
        let err = train_loop(&tiny_run(), dir.path(), &out, &LoopOptions::default(), |_| {});
        assert!(matches!(err, Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn identity_predictor_scores_perfectly() {
        let images: Vec<_> = (0..3).map(|i| (format!("{i}.png"), synthetic_scene(30, 26, i, SCENE_GRAIN))).collect();
        let hr: Vec<_> = images.iter().map(|(_, t)| crop_to_multiple(t, 2).unwrap()).collect();
        let mut k = 0;
        let rows = evaluate_with(&images, 2, |_| {
            k += 1;
            Ok(hr[k - 1].clone())
        })
        .unwrap();
        assert_eq!(mean_scores(&rows).1, 1.0);
        assert_eq!(csv_report(&rows).lines().count(), images.len() + 2);
    }

    #[test]
    fn evaluate_checks_scale() {
        let dir = tempfile::tempdir().unwrap();
        dataset(dir.path(), 1, 24);
        let t = Trainer::new(tiny_run()).unwrap();
        let ck = t.checkpoint();
        assert!(matches!(
            evaluate(&ck, dir.path(), 3),
            Err(Error::ScaleMismatch { checkpoint: 2, requested: 3 })
        ));
        let rows = evaluate(&ck, dir.path(), 2).unwrap();
        assert!(rows[0].psnr.is_finite() && rows[0].ssim <= 1.0);
    }
}
