//! Dice losses and the two-stage training procedure: nine independent 2D path trainings,
//! then the 3D post-processor on frozen, binarized path outputs.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::manifest::Manifest;
use crate::ninepath::{build_stack, check_volume_dims, path_inputs, stream_rng, NinePathModel, PostProcessor, TrainedPath, POST_STREAM};
use crate::optim::{sgd_nesterov_step, OptimizerConfig, ParamStore};
use crate::preprocess::{slice_volume, PathConfig};
use crate::tensor::{Scalar, Tensor};
use crate::unet::{InputMode, Params, PathModel};
use crate::volume::{read_volume, Volume};

/// Shuffling streams sit after the initialization streams.
const SHUFFLE_STREAM_BASE: u64 = 16;

fn dice_sums<T: Scalar>(p: &Tensor<T>, r: &Tensor<T>) -> Result<(f64, f64)> {
    if p.shape() != r.shape() {
        return Err(Error::dim(format!("dice: shapes {:?} and {:?} differ", p.shape(), r.shape())));
    }
    Ok(p.data().iter().zip(r.data()).fold((0.0, 0.0), |(num, den), (&a, &b)| {
        let (a, b) = (a.as_f64(), b.as_f64());
        (num + a * b, den + a * a + b * b)
    }))
}

/// `2·Σpr / (Σp² + Σr²)`, or 1 when both sums are zero.
pub fn dice_soft<T: Scalar>(p: &Tensor<T>, r: &Tensor<T>) -> Result<f64> {
    let (num, den) = dice_sums(p, r)?;
    Ok(if den == 0.0 { 1.0 } else { 2.0 * num / den })
}

pub fn loss_path<T: Scalar>(p: &Tensor<T>, r: &Tensor<T>) -> Result<f64> {
    Ok(1.0 - dice_soft(p, r)?)
}

/// `2 − (D(p, r) + D(q, 1 − r))`.
pub fn loss_post<T: Scalar>(p: &Tensor<T>, q: &Tensor<T>, r: &Tensor<T>) -> Result<f64> {
    let flipped = r.map(|v| T::one() - v);
    Ok(2.0 - (dice_soft(p, r)? + dice_soft(q, &flipped)?))
}

pub fn graph_loss_path<T: Scalar>(g: &mut Graph<T>, p: Var, r: Var) -> Result<Var> {
    let d = g.dice_soft(p, r)?;
    g.affine(d, -1.0, 1.0)
}

/// `lesion` and `complement` are the two softmax channels; `r_flipped` is `1 − r`.
pub fn graph_loss_post<T: Scalar>(g: &mut Graph<T>, lesion: Var, complement: Var, r: Var, r_flipped: Var) -> Result<Var> {
    let a = g.dice_soft(lesion, r)?;
    let b = g.dice_soft(complement, r_flipped)?;
    let s = g.add(a, b)?;
    g.affine(s, -1.0, 2.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    /// Slices per stage-1 step. Stage 2 always steps once per volume.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stage-2 epochs; `None` reuses `epochs`.
    pub post_epochs: Option<usize>,
    pub seed: u64,
    pub mode: InputMode,
    /// Train the nine paths concurrently. Results are identical either way.
    pub parallel: bool,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: OptimizerConfig::default(),
            batch_size: 32,
            epochs: 50,
            post_epochs: None,
            seed: 0,
            mode: InputMode::Flip,
            parallel: true,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.epochs == 0 || self.post_epochs == Some(0) {
            return Err(Error::config("epochs must be positive"));
        }
        Ok(())
    }

    pub fn stage2_epochs(&self) -> usize {
        self.post_epochs.unwrap_or(self.epochs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Stage 1: soft-Dice loss pooled over every slice seen in the epoch. Stage 2: mean
    /// per-volume loss.
    pub loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    /// `path{k}` for stage 1, `post` for stage 2.
    pub name: String,
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.records {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(format!("{}: {other:?}", path.display())),
    }
}

/// One training case loaded into memory.
#[derive(Clone, Debug)]
pub struct Case {
    pub case_id: String,
    pub t1: Volume,
    pub secondary: Option<Volume>,
    pub truth: Volume,
}

/// Read every volume a manifest references. Bimodal mode requires a second input per case.
pub fn load_cases(m: &Manifest, mode: InputMode) -> Result<Vec<Case>> {
    if m.is_empty() {
        return Err(Error::data("manifest has no cases"));
    }
    m.records
        .iter()
        .map(|r| {
            let secondary = match (mode, &r.second_input_path) {
                (InputMode::Bimodal, None) => {
                    return Err(Error::data(format!("case {}: bimodal mode needs second_input_path", r.case_id)))
                }
                (InputMode::Bimodal, Some(p)) => Some(read_volume(p).map_err(|e| name_case(&r.case_id, e))?),
                (InputMode::Flip, _) => None,
            };
            let t1 = read_volume(&r.input_volume_path).map_err(|e| name_case(&r.case_id, e))?;
            let truth = read_volume(&r.truth_mask_path).map_err(|e| name_case(&r.case_id, e))?;
            Ok(Case {
                case_id: r.case_id.clone(),
                t1,
                secondary,
                truth,
            })
        })
        .collect()
}

fn name_case(case_id: &str, e: Error) -> Error {
    match e {
        Error::Io { path, source } => Error::data(format!("case {case_id}: {}: {source}", path.display())),
        Error::Format { path, offset, msg } => Error::Format {
            path,
            offset,
            msg: format!("case {case_id}: {msg}"),
        },
        other => other,
    }
}

fn check_cases(cases: &[Case], mode: InputMode) -> Result<()> {
    let first = cases.first().ok_or_else(|| Error::data("no training cases"))?;
    for c in cases {
        if !c.t1.same_grid(&first.t1) || !c.truth.same_grid(&c.t1) {
            return Err(Error::dim(format!("case {}: volume dims differ from {:?}", c.case_id, first.t1.dims())));
        }
        if mode == InputMode::Bimodal && c.secondary.is_none() {
            return Err(Error::data(format!("case {}: bimodal mode needs a second input", c.case_id)));
        }
    }
    for config in PathConfig::all() {
        check_volume_dims(&config, first.t1.dims())?;
    }
    Ok(())
}

/// Slice triples `(primary, secondary, truth)` for one path, each `[1, rows, cols]`.
struct SliceSet {
    primary: Vec<Tensor<f32>>,
    secondary: Vec<Tensor<f32>>,
    truth: Vec<Tensor<f32>>,
}

impl SliceSet {
    fn build(config: &PathConfig, mode: InputMode, cases: &[Case]) -> Result<Self> {
        let mut set = SliceSet {
            primary: Vec::new(),
            secondary: Vec::new(),
            truth: Vec::new(),
        };
        for c in cases {
            let (a, b) = path_inputs(config, mode, &c.t1, c.secondary.as_ref())?;
            set.primary.extend(slice_volume(&a, config.plane));
            set.secondary.extend(slice_volume(&b, config.plane));
            set.truth.extend(slice_volume(&c.truth, config.plane));
        }
        Ok(set)
    }

    fn batch(parts: &[Tensor<f32>], idx: &[usize]) -> Result<Tensor<f32>> {
        let picked: Vec<Tensor<f32>> = idx.iter().map(|&i| parts[i].clone()).collect();
        let t = Tensor::stack(&picked)?;
        let s = t.shape().to_vec();
        t.reshape(&[s[0], 1, s[1], s[2]])
    }
}

/// One forward/backward pass; returns the batch loss and its Dice sums.
fn path_step(model: &PathModel, store: &mut ParamStore<f32>, a: Tensor<f32>, b: Tensor<f32>, r: Tensor<f32>) -> Result<(f64, (f64, f64))> {
    let mut g = Graph::new();
    let (y, rv, loss) = {
        let p = Params::trainable(&*store);
        let (av, bv, rv) = (g.constant(a), g.constant(b), g.constant(r));
        let y = model.forward(&mut g, &p, av, bv)?;
        (y, rv, graph_loss_path(&mut g, y, rv)?)
    };
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, store);
    let sums = dice_sums(g.value(y), g.value(rv))?;
    Ok((g.value(loss).data()[0] as f64, sums))
}

fn check_loss(name: &str, epoch: usize, loss: f64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{name}: loss is {loss} at epoch {epoch}")))
    }
}

/// Train one path from its seeded initialization.
pub fn train_path(config: &PathConfig, cases: &[Case], tc: &TrainConfig) -> Result<(TrainedPath, TrainLog)> {
    let mut store = ParamStore::new();
    let model = PathModel::init(config.index, &mut store, &mut stream_rng(tc.seed, config.index as u64))?;
    let data = SliceSet::build(config, tc.mode, cases)?;
    let mut shuffle = stream_rng(tc.seed, SHUFFLE_STREAM_BASE + config.index as u64);
    let name = format!("path{}", config.index);
    let mut order: Vec<usize> = (0..data.primary.len()).collect();
    let mut records = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let (mut num, mut den) = (0.0, 0.0);
        for idx in order.chunks(tc.batch_size) {
            let (loss, (n, d)) = path_step(
                &model,
                &mut store,
                SliceSet::batch(&data.primary, idx)?,
                SliceSet::batch(&data.secondary, idx)?,
                SliceSet::batch(&data.truth, idx)?,
            )?;
            check_loss(&name, epoch, loss)?;
            sgd_nesterov_step(&mut store, &tc.optimizer, epoch)?;
            num += n;
            den += d;
        }
        let rec = EpochRecord {
            epoch,
            loss: 1.0 - if den == 0.0 { 1.0 } else { 2.0 * num / den },
            lr: tc.optimizer.learning_rate(epoch),
            seconds: start.elapsed().as_secs_f64(),
        };
        if tc.verbose {
            eprintln!("{name} ({}) epoch {epoch}: loss {:.4} lr {:.5} {:.1}s", config.label(), rec.loss, rec.lr, rec.seconds);
        }
        records.push(rec);
    }
    Ok((
        TrainedPath {
            config: *config,
            model,
            store,
        },
        TrainLog { name, records },
    ))
}

/// Stage 1: the nine paths, trained independently in canonical order.
pub fn train_paths(cases: &[Case], tc: &TrainConfig) -> Result<(Vec<TrainedPath>, Vec<TrainLog>)> {
    tc.validate()?;
    check_cases(cases, tc.mode)?;
    let configs = PathConfig::all();
    let results: Vec<Result<(TrainedPath, TrainLog)>> = if tc.parallel {
        configs.par_iter().map(|c| train_path(c, cases, tc)).collect()
    } else {
        configs.iter().map(|c| train_path(c, cases, tc)).collect()
    };
    results.into_iter().collect::<Result<Vec<_>>>().map(|v| v.into_iter().unzip())
}

/// Cached stage-2 input of one case: the `[18, dz, dy, dx]` stack and its truth.
pub struct PostSample {
    pub stack: Tensor<f32>,
    pub truth: Tensor<f32>,
    pub truth_flipped: Tensor<f32>,
}

pub fn post_samples(model: &NinePathModel, cases: &[Case], parallel: bool) -> Result<Vec<PostSample>> {
    cases
        .iter()
        .map(|c| {
            let masks = model.path_masks(&c.t1, c.secondary.as_ref(), parallel)?;
            let stack = build_stack(&c.t1, &masks)?;
            let [dx, dy, dz] = c.truth.dims();
            let truth = Tensor::new(&[dz, dy, dx], c.truth.data().to_vec())?;
            let truth_flipped = truth.map(|v| 1.0 - v);
            Ok(PostSample {
                stack,
                truth,
                truth_flipped,
            })
        })
        .collect()
}

fn post_loss(post: &PostProcessor, store: &ParamStore<f32>, s: &PostSample, trainable: bool) -> Result<(Graph<f32>, Var)> {
    let mut g = Graph::new();
    let p = if trainable { Params::trainable(store) } else { Params::frozen(store) };
    let x = g.constant(s.stack.clone());
    let y = post.forward(&mut g, &p, x)?;
    let lesion = g.select(y, 0, 0)?;
    let complement = g.select(y, 0, 1)?;
    let r = g.constant(s.truth.clone());
    let rf = g.constant(s.truth_flipped.clone());
    let loss = graph_loss_post(&mut g, lesion, complement, r, rf)?;
    Ok((g, loss))
}

/// Mean `loss_post` over `samples` without updating anything.
pub fn evaluate_post_loss(post: &PostProcessor, store: &ParamStore<f32>, samples: &[PostSample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let (g, loss) = post_loss(post, store, s, false)?;
        total += g.value(loss).data()[0] as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Stage 2 on precomputed samples, from the seeded initialization. Returns the trained
/// post-processor and its log.
pub fn train_post_samples(samples: &[PostSample], tc: &TrainConfig) -> Result<(PostProcessor, ParamStore<f32>, TrainLog)> {
    if samples.is_empty() {
        return Err(Error::data("no stage-2 samples"));
    }
    let mut store = ParamStore::new();
    let post = PostProcessor::init(&mut store, &mut stream_rng(tc.seed, POST_STREAM))?;
    let mut shuffle = stream_rng(tc.seed, SHUFFLE_STREAM_BASE + POST_STREAM);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let epochs = tc.stage2_epochs();
    let mut records = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut total = 0.0;
        for &i in &order {
            let (g, loss) = post_loss(&post, &store, &samples[i], true)?;
            let value = g.value(loss).data()[0] as f64;
            check_loss("post", epoch, value)?;
            let grads = g.backward(loss)?;
            g.accumulate_param_grads(&grads, &mut store);
            sgd_nesterov_step(&mut store, &tc.optimizer, epoch)?;
            total += value;
        }
        let rec = EpochRecord {
            epoch,
            loss: total / samples.len() as f64,
            lr: tc.optimizer.learning_rate(epoch),
            seconds: start.elapsed().as_secs_f64(),
        };
        if tc.verbose {
            eprintln!("post epoch {epoch}: loss {:.4} lr {:.5} {:.1}s", rec.loss, rec.lr, rec.seconds);
        }
        records.push(rec);
    }
    Ok((
        post,
        store,
        TrainLog {
            name: "post".into(),
            records,
        },
    ))
}

/// Stage 2: paths in `model` stay frozen; its post-processor is replaced by a trained one.
pub fn train_post(model: &mut NinePathModel, cases: &[Case], tc: &TrainConfig) -> Result<TrainLog> {
    tc.validate()?;
    check_cases(cases, tc.mode)?;
    if model.mode != tc.mode {
        return Err(Error::config(format!(
            "model mode {} differs from training mode {}",
            model.mode.name(),
            tc.mode.name()
        )));
    }
    let samples = post_samples(model, cases, tc.parallel)?;
    let (post, store, log) = train_post_samples(&samples, tc)?;
    model.post = post;
    model.post_store = store;
    Ok(log)
}

/// Both stages. Logs are ordered path0..path8, post.
pub fn train_full(cases: &[Case], tc: &TrainConfig) -> Result<(NinePathModel, Vec<TrainLog>)> {
    let (paths, mut logs) = train_paths(cases, tc)?;
    let mut post_store = ParamStore::new();
    let post = PostProcessor::init(&mut post_store, &mut stream_rng(tc.seed, POST_STREAM))?;
    let mut model = NinePathModel {
        mode: tc.mode,
        paths,
        post,
        post_store,
    };
    logs.push(train_post(&mut model, cases, tc)?);
    Ok((model, logs))
}

/// Stage 1 from a manifest; the checkpoint holds path parameters, an untrained
/// post-processor and the mode entry.
pub fn train_paths_manifest(m: &Manifest, tc: &TrainConfig) -> Result<(ModelCheckpoint, Vec<TrainLog>)> {
    let cases = load_cases(m, tc.mode)?;
    let (paths, logs) = train_paths(&cases, tc)?;
    let mut post_store = ParamStore::new();
    let post = PostProcessor::init(&mut post_store, &mut stream_rng(tc.seed, POST_STREAM))?;
    let model = NinePathModel {
        mode: tc.mode,
        paths,
        post,
        post_store,
    };
    Ok((model.to_checkpoint()?, logs))
}

/// Stage 2 from a manifest and a stage-1 checkpoint.
pub fn train_post_manifest(m: &Manifest, paths: &ModelCheckpoint, tc: &TrainConfig) -> Result<(ModelCheckpoint, TrainLog)> {
    let cases = load_cases(m, tc.mode)?;
    let mut model = NinePathModel::from_checkpoint(paths)?;
    let log = train_post(&mut model, &cases, tc)?;
    Ok((model.to_checkpoint()?, log))
}
