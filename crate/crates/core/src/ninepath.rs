//! The full system: nine paths, binarization, 18-channel stacking and the three fusion
//! back-ends (3D CNN post-processor, majority vote, union).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::checkpoint::ModelCheckpoint;
use crate::error::{Error, Result};
use crate::optim::ParamStore;
use crate::preprocess::{flip_lr, normalize, restack, slice_volume, PathConfig};
use crate::tensor::{Scalar, Tensor};
use crate::unet::{InputMode, Layer, Params, PathModel, DIVISOR};
use crate::volume::{Modality, Volume};

/// Probabilities below this binarize to 0; everything else to 1.
pub const THRESHOLD: f32 = 0.5;
pub const NUM_PATHS: usize = 9;
pub const STACK_CHANNELS: usize = 2 * NUM_PATHS;
/// Slices per inference batch.
const INFER_BATCH: usize = 8;

pub(crate) const POST_STREAM: u64 = NUM_PATHS as u64;

/// Independent seeded generator per model component.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const META_MODE: &str = "meta.mode";
pub const META_CONFIG_HASH: &str = "meta.config_hash";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Cnn,
    Majority,
    Union,
}

impl Aggregation {
    pub const ALL: [Aggregation; 3] = [Aggregation::Cnn, Aggregation::Majority, Aggregation::Union];

    pub fn name(self) -> &'static str {
        match self {
            Aggregation::Cnn => "cnn",
            Aggregation::Majority => "majority",
            Aggregation::Union => "union",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }
}

/// Four 3×3×3 convolutions, 18→36→9→9→2, ReLU after the first three, softmax at the end.
#[derive(Clone, Debug)]
pub struct PostProcessor {
    pub layers: [Layer; 4],
}

pub const POST_CHANNELS: [usize; 5] = [STACK_CHANNELS, 36, 9, 9, 2];

/// Lesion probability the untrained post-processor starts from. Starting at 0.5 lets the
/// background term of the loss drive every voxel, lesions first, into saturation.
pub const POST_LESION_PRIOR: f64 = 0.01;

impl PostProcessor {
    pub fn init<T: Scalar>(store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        let mut layers = Vec::with_capacity(4);
        for l in 0..4 {
            let (cin, cout) = (POST_CHANNELS[l], POST_CHANNELS[l + 1]);
            let w = store.add_uniform(format!("post.{l}.w"), &[cout, cin, 3, 3, 3], cin * 27, rng)?;
            let b = if l == 3 {
                let logit = (POST_LESION_PRIOR / (1.0 - POST_LESION_PRIOR)).ln();
                store.add(format!("post.{l}.b"), Tensor::new(&[2], vec![T::from_f64(logit), T::zero()])?)?
            } else {
                store.add_zeros(format!("post.{l}.b"), &[cout])?
            };
            layers.push(Layer { w, b });
        }
        Ok(PostProcessor {
            layers: layers.try_into().unwrap(),
        })
    }

    pub fn bind<T: Scalar>(store: &ParamStore<T>) -> Result<Self> {
        let mut layers = Vec::with_capacity(4);
        for l in 0..4 {
            let find = |suffix: &str, shape: &[usize]| {
                let name = format!("post.{l}.{suffix}");
                let id = store
                    .find(&name)
                    .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
                if store.value(id).shape() != shape {
                    return Err(Error::data(format!("parameter {name} has the wrong shape")));
                }
                Ok(id)
            };
            let (cin, cout) = (POST_CHANNELS[l], POST_CHANNELS[l + 1]);
            layers.push(Layer {
                w: find("w", &[cout, cin, 3, 3, 3])?,
                b: find("b", &[cout])?,
            });
        }
        Ok(PostProcessor {
            layers: layers.try_into().unwrap(),
        })
    }

    /// `stack` is `[18, dz, dy, dx]`; returns the `[2, dz, dy, dx]` softmax (channel 0 =
    /// lesion, channel 1 = complement).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<'_, T>, stack: Var) -> Result<Var> {
        let mut x = stack;
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, b) = p.layer(g, *layer);
            x = g.conv3d(x, w, b, 1)?;
            if l < 3 {
                x = g.relu(x)?;
            }
        }
        g.softmax2(x, 0)
    }
}

/// `[18, dz, dy, dx]` (x fastest, matching volume layout): channel `2k` holds path `k`'s
/// binary mask, channel `2k+1` the raw primary input.
pub fn build_stack(t1: &Volume, masks: &[Volume]) -> Result<Tensor<f32>> {
    if masks.len() != NUM_PATHS {
        return Err(Error::dim(format!("expected {NUM_PATHS} path masks, got {}", masks.len())));
    }
    if let Some(m) = masks.iter().find(|m| !m.same_grid(t1)) {
        return Err(Error::dim(format!("mask dims {:?} differ from input {:?}", m.dims(), t1.dims())));
    }
    let [dx, dy, dz] = t1.dims();
    let mut data = Vec::with_capacity(STACK_CHANNELS * t1.len());
    for m in masks {
        data.extend_from_slice(m.data());
        data.extend_from_slice(t1.data());
    }
    Tensor::new(&[STACK_CHANNELS, dz, dy, dx], data)
}

/// Run the post-processor on a stack; returns `(lesion, complement)` probability tensors
/// shaped `[dz, dy, dx]`.
pub fn post_forward<T: Scalar>(post: &PostProcessor, store: &ParamStore<T>, stack: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if stack.rank() != 4 || stack.shape()[0] != STACK_CHANNELS {
        return Err(Error::dim(format!("post-processor input must be [18,D,H,W], got {:?}", stack.shape())));
    }
    let mut g = Graph::new();
    let s = g.constant(stack.clone());
    let y = post.forward(&mut g, &Params::frozen(store), s)?;
    let out = g.value(y);
    Ok((out.index_first(0)?, out.index_first(1)?))
}

fn check_same_dims(masks: &[Volume]) -> Result<&Volume> {
    let first = masks.first().ok_or_else(|| Error::data("no masks given"))?;
    if let Some(m) = masks.iter().find(|m| !m.same_grid(first)) {
        return Err(Error::dim(format!("mask dims {:?} differ from {:?}", m.dims(), first.dims())));
    }
    Ok(first)
}

fn vote(masks: &[Volume], min_votes: usize) -> Result<Volume> {
    let first = check_same_dims(masks)?;
    let data = (0..first.len())
        .map(|i| {
            let votes = masks.iter().filter(|m| m.data()[i] != 0.0).count();
            if votes >= min_votes {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    first.with_data(Modality::Mask, data)
}

/// Voxel is lesion iff a strict majority (5 of 9) of the path masks mark it.
pub fn aggregate_majority(masks: &[Volume]) -> Result<Volume> {
    if masks.len() != NUM_PATHS {
        return Err(Error::dim(format!("majority vote needs {NUM_PATHS} masks, got {}", masks.len())));
    }
    vote(masks, NUM_PATHS / 2 + 1)
}

/// Voxelwise OR.
pub fn aggregate_union(masks: &[Volume]) -> Result<Volume> {
    vote(masks, 1)
}

/// Voxelwise AND.
pub fn aggregate_intersection(masks: &[Volume]) -> Result<Volume> {
    vote(masks, masks.len())
}

pub fn binarize(values: &[f32]) -> Vec<f32> {
    values.iter().map(|&p| if p < THRESHOLD { 0.0 } else { 1.0 }).collect()
}

/// Normalized primary and secondary volumes for one path.
pub fn path_inputs(config: &PathConfig, mode: InputMode, t1: &Volume, secondary: Option<&Volume>) -> Result<(Volume, Volume)> {
    let primary = normalize(t1, config.plane, config.norm);
    let second = match mode {
        InputMode::Flip => flip_lr(&primary),
        InputMode::Bimodal => {
            let s = secondary.ok_or_else(|| Error::data("bimodal mode needs a second-modality volume"))?;
            if !s.same_grid(t1) {
                return Err(Error::dim(format!("second modality dims {:?} differ from {:?}", s.dims(), t1.dims())));
            }
            normalize(s, config.plane, config.norm)
        }
    };
    Ok((primary, second))
}

pub(crate) fn check_volume_dims(config: &PathConfig, dims: [usize; 3]) -> Result<()> {
    let (r, c) = config.plane.image_dims(dims);
    if r % DIVISOR != 0 || c % DIVISOR != 0 {
        return Err(Error::dim(format!(
            "{} slices of {dims:?} are {r}x{c}, not divisible by {DIVISOR}",
            config.plane.name()
        )));
    }
    Ok(())
}

/// Sigmoid probabilities of one path over the whole volume, x-fastest.
pub fn predict_path_probabilities(
    model: &PathModel,
    store: &ParamStore<f32>,
    config: &PathConfig,
    mode: InputMode,
    t1: &Volume,
    secondary: Option<&Volume>,
) -> Result<Volume> {
    check_volume_dims(config, t1.dims())?;
    let (primary, second) = path_inputs(config, mode, t1, secondary)?;
    let prim_slices = slice_volume(&primary, config.plane);
    let sec_slices = slice_volume(&second, config.plane);
    let (rows, cols) = config.plane.image_dims(t1.dims());
    let params = Params::frozen(store);
    let mut out_slices = Vec::with_capacity(prim_slices.len());
    for (pc, sc) in prim_slices.chunks(INFER_BATCH).zip(sec_slices.chunks(INFER_BATCH)) {
        let n = pc.len();
        let a = Tensor::stack(pc)?.reshape(&[n, 1, rows, cols])?;
        let b = Tensor::stack(sc)?.reshape(&[n, 1, rows, cols])?;
        let mut g = Graph::new();
        let (av, bv) = (g.constant(a), g.constant(b));
        let y = model.forward(&mut g, &params, av, bv)?;
        let y = g.value(y);
        for i in 0..n {
            out_slices.push(y.index_first(i)?);
        }
    }
    restack(&out_slices, config.plane, t1.dims(), t1.voxel_mm(), Modality::T1)
}

/// Binary mask of one path: normalize, slice, run the U-Net per slice, restack,
/// binarize (`< 0.5` → 0).
pub fn predict_path_volume(
    model: &PathModel,
    store: &ParamStore<f32>,
    config: &PathConfig,
    mode: InputMode,
    t1: &Volume,
    secondary: Option<&Volume>,
) -> Result<Volume> {
    let probs = predict_path_probabilities(model, store, config, mode, t1, secondary)?;
    probs.with_data(Modality::Mask, binarize(probs.data()))
}

/// One trained path with its parameters.
#[derive(Clone, Debug)]
pub struct TrainedPath {
    pub config: PathConfig,
    pub model: PathModel,
    pub store: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct NinePathModel {
    pub mode: InputMode,
    pub paths: Vec<TrainedPath>,
    pub post: PostProcessor,
    pub post_store: ParamStore<f32>,
}

/// Per-path masks plus the final fused mask.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub path_masks: Vec<Volume>,
    pub mask: Volume,
}

impl NinePathModel {
    /// Freshly initialized model. Path `k` draws from stream `k` of `seed`, the
    /// post-processor from stream 9, so each part can be re-created independently.
    pub fn init(mode: InputMode, seed: u64) -> Result<Self> {
        let mut paths = Vec::with_capacity(NUM_PATHS);
        for config in PathConfig::all() {
            let mut store = ParamStore::new();
            let model = PathModel::init(config.index, &mut store, &mut stream_rng(seed, config.index as u64))?;
            paths.push(TrainedPath { config, model, store });
        }
        let mut post_store = ParamStore::new();
        let post = PostProcessor::init(&mut post_store, &mut stream_rng(seed, POST_STREAM))?;
        Ok(NinePathModel {
            mode,
            paths,
            post,
            post_store,
        })
    }

    pub fn path_masks(&self, t1: &Volume, secondary: Option<&Volume>, parallel: bool) -> Result<Vec<Volume>> {
        let run = |p: &TrainedPath| predict_path_volume(&p.model, &p.store, &p.config, self.mode, t1, secondary);
        if parallel {
            self.paths.par_iter().map(run).collect()
        } else {
            self.paths.iter().map(run).collect()
        }
    }

    /// Final mask from path masks already computed for `t1`.
    pub fn fuse(&self, t1: &Volume, path_masks: &[Volume], aggregation: Aggregation) -> Result<Volume> {
        match aggregation {
            Aggregation::Majority => aggregate_majority(path_masks),
            Aggregation::Union => aggregate_union(path_masks),
            Aggregation::Cnn => {
                let stack = build_stack(t1, path_masks)?;
                let (lesion, _) = post_forward(&self.post, &self.post_store, &stack)?;
                t1.with_data(Modality::Mask, binarize(lesion.data()))
            }
        }
    }

    pub fn predict(&self, t1: &Volume, secondary: Option<&Volume>, aggregation: Aggregation, parallel: bool) -> Result<Prediction> {
        if self.mode == InputMode::Bimodal && secondary.is_none() {
            return Err(Error::data("bimodal model needs a second-modality input"));
        }
        let path_masks = self.path_masks(t1, secondary, parallel)?;
        let mask = self.fuse(t1, &path_masks, aggregation)?;
        Ok(Prediction { path_masks, mask })
    }

    /// All parameters plus `meta.mode`. Path parameters come first in canonical order.
    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        let mut c = ModelCheckpoint::new();
        for p in &self.paths {
            c.extend_from_store(&p.store)?;
        }
        c.extend_from_store(&self.post_store)?;
        c.insert(META_MODE, Tensor::scalar(self.mode.code() as f32))?;
        Ok(c)
    }

    pub fn from_checkpoint(c: &ModelCheckpoint) -> Result<Self> {
        let mode_t = c
            .get(META_MODE)
            .ok_or_else(|| Error::data("checkpoint has no meta.mode entry"))?;
        let mode = InputMode::from_code(mode_t.data()[0] as u8)
            .ok_or_else(|| Error::data(format!("unknown input mode {}", mode_t.data()[0])))?;
        let mut paths = Vec::with_capacity(NUM_PATHS);
        for config in PathConfig::all() {
            let prefix = format!("p{}.", config.index);
            let mut store = ParamStore::new();
            for (name, t) in c.entries().iter().filter(|(n, _)| n.starts_with(&prefix)) {
                store.add(name.clone(), t.clone())?;
            }
            let model = PathModel::bind(config.index, &store)?;
            paths.push(TrainedPath { config, model, store });
        }
        let mut post_store = ParamStore::new();
        for (name, t) in c.entries().iter().filter(|(n, _)| n.starts_with("post.")) {
            post_store.add(name.clone(), t.clone())?;
        }
        let post = PostProcessor::bind(&post_store)?;
        Ok(NinePathModel {
            mode,
            paths,
            post,
            post_store,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[usize]) -> Volume {
        let mut d = vec![0.0; dims[0] * dims[1] * dims[2]];
        for &i in on {
            d[i] = 1.0;
        }
        Volume::new(dims, [1.0; 3], Modality::Mask, d).unwrap()
    }

    #[test]
    fn majority_threshold() {
        let dims = [2, 1, 1];
        let mut masks: Vec<Volume> = (0..5).map(|_| mask(dims, &[0, 1])).collect();
        masks.extend((0..4).map(|_| mask(dims, &[1])));
        // voxel 0: five votes, voxel 1: nine votes
        assert_eq!(aggregate_majority(&masks).unwrap().data(), &[1.0, 1.0]);
        let mut masks: Vec<Volume> = (0..4).map(|_| mask(dims, &[0])).collect();
        masks.extend((0..5).map(|_| mask(dims, &[])));
        assert_eq!(aggregate_majority(&masks).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn union_single_vote_and_empty() {
        let dims = [3, 1, 1];
        let mut masks: Vec<Volume> = (0..8).map(|_| mask(dims, &[])).collect();
        masks.push(mask(dims, &[2]));
        assert_eq!(aggregate_union(&masks).unwrap().data(), &[0.0, 0.0, 1.0]);
        let empty: Vec<Volume> = (0..9).map(|_| mask(dims, &[])).collect();
        assert_eq!(aggregate_union(&empty).unwrap().count_nonzero(), 0);
    }

    #[test]
    fn dims_mismatch_rejected() {
        let mut masks: Vec<Volume> = (0..8).map(|_| mask([2, 1, 1], &[])).collect();
        masks.push(mask([1, 2, 1], &[]));
        assert!(matches!(aggregate_union(&masks), Err(Error::Dimension(_))));
        assert!(matches!(aggregate_majority(&masks), Err(Error::Dimension(_))));
    }

    #[test]
    fn half_binarizes_to_one() {
        assert_eq!(binarize(&[0.4999999, 0.5, 0.75, 0.0]), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn stack_layout() {
        let dims = [16, 16, 16];
        let t1 = Volume::new(dims, [1.0; 3], Modality::T1, (0..4096).map(|i| i as f32).collect()).unwrap();
        let masks: Vec<Volume> = (0..9).map(|k| mask(dims, &[k * 10])).collect();
        let s = build_stack(&t1, &masks).unwrap();
        assert_eq!(s.shape(), &[18, 16, 16, 16]);
        assert_eq!(s.index_first(0).unwrap().data(), masks[0].data());
        for k in 0..9 {
            assert_eq!(s.index_first(2 * k + 1).unwrap().data(), t1.data());
            assert_eq!(s.index_first(2 * k).unwrap().data(), masks[k].data());
        }
    }

    #[test]
    fn post_output_is_normalized() {
        let mut store = ParamStore::<f64>::new();
        let post = PostProcessor::init(&mut store, &mut stream_rng(2, 0)).unwrap();
        let mut rng = stream_rng(3, 0);
        let stack = Tensor::from_fn(&[18, 4, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let (p, q) = post_forward(&post, &store, &stack).unwrap();
        assert_eq!(p.shape(), &[4, 4, 4]);
        for (a, b) in p.data().iter().zip(q.data()) {
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn untrained_post_starts_at_the_prior() {
        let mut store = ParamStore::<f64>::new();
        let post = PostProcessor::init(&mut store, &mut stream_rng(2, 0)).unwrap();
        let (p, _) = post_forward(&post, &store, &Tensor::zeros(&[18, 4, 4, 4])).unwrap();
        assert!(p.data().iter().all(|&v| (v - POST_LESION_PRIOR).abs() < 1e-12));
    }

    #[test]
    fn saturated_head_gives_empty_mask() {
        let mut model = NinePathModel::init(InputMode::Flip, 4).unwrap();
        let p = &mut model.paths[0];
        let head_b = p.model.head.b;
        p.store.set_value(head_b, Tensor::full(&[1], -1e4)).unwrap();
        let t1 = Volume::new([16, 16, 16], [1.0; 3], Modality::T1, (0..4096).map(|i| (i % 7) as f32).collect()).unwrap();
        let p = &model.paths[0];
        let m = predict_path_volume(&p.model, &p.store, &p.config, InputMode::Flip, &t1, None).unwrap();
        assert_eq!(m.dims(), t1.dims());
        assert_eq!(m.count_nonzero(), 0);
    }

    #[test]
    fn checkpoint_roundtrip_rebinds() {
        let model = NinePathModel::init(InputMode::Bimodal, 5).unwrap();
        let c = model.to_checkpoint().unwrap();
        let back = NinePathModel::from_checkpoint(&c).unwrap();
        assert_eq!(back.mode, InputMode::Bimodal);
        assert_eq!(back.to_checkpoint().unwrap(), c);
    }
}
