//! Dual-encoder U-Net used by every path.
//!
//! Two five-level encoders (32 filters throughout, average pooling after levels 0–3) read
//! the primary slice and its secondary (left-right flip or second modality). Per level the
//! two feature maps are stacked on a new depth axis and merged by a 2×1×1 3D convolution.
//! The decoder upsamples four times, adds the fused skip, applies ReLU, then a
//! conv-relu-conv-relu block; a 1×1 convolution and sigmoid give the lesion probability.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::optim::{ParamId, ParamStore};
use crate::tensor::Scalar;

pub const WIDTH: usize = 32;
pub const LEVELS: usize = 5;
/// Spatial dims must be divisible by `2^(LEVELS-1)`.
pub const DIVISOR: usize = 16;
pub const HEAD_INIT_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    /// Second encoder reads the left-right-flipped primary slice.
    Flip,
    /// Second encoder reads the co-registered second-modality slice.
    Bimodal,
}

impl InputMode {
    pub fn code(self) -> u8 {
        match self {
            InputMode::Flip => 0,
            InputMode::Bimodal => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(InputMode::Flip),
            1 => Some(InputMode::Bimodal),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputMode::Flip => "flip",
            InputMode::Bimodal => "bimodal",
        }
    }
}

/// How decoder skips are merged with upsampled features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMerge {
    Add,
    /// Elementwise product; kept for comparison runs only.
    Multiply,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    A,
    B,
}

#[derive(Clone, Copy, Debug)]
pub struct Layer {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvBlock {
    pub first: Layer,
    pub second: Layer,
}

#[derive(Clone, Debug)]
pub struct PathModel {
    pub index: usize,
    pub enc_a: [ConvBlock; LEVELS],
    pub enc_b: [ConvBlock; LEVELS],
    pub fuse: [Layer; LEVELS],
    /// Decoder steps, ordered from the deepest upsampling (level 4 → 3) to the last (1 → 0).
    pub dec_up: [Layer; LEVELS - 1],
    pub dec_block: [ConvBlock; LEVELS - 1],
    pub head: Layer,
}

/// Whether a forward pass records parameter gradients.
#[derive(Clone, Copy)]
pub struct Params<'a, T> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Scalar> Params<'a, T> {
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Params {
            store,
            trainable: true,
        }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Params {
            store,
            trainable: false,
        }
    }

    pub(crate) fn bind(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        if self.trainable {
            g.param(self.store, id)
        } else {
            g.frozen_param(self.store, id)
        }
    }

    pub(crate) fn layer(&self, g: &mut Graph<T>, l: Layer) -> (Var, Var) {
        (self.bind(g, l.w), self.bind(g, l.b))
    }
}

/// Parameter factory: `(name, shape, fan_in) -> id`.
type Maker<'m> = dyn FnMut(&str, &[usize], usize) -> Result<ParamId> + 'm;

impl PathModel {
    /// Register freshly initialized parameters for path `index` in `store`. The head
    /// weights are drawn at a tenth of the usual bound so every path starts near p = 0.5.
    pub fn init<T: Scalar>(index: usize, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        Self::build(index, &mut |name, shape, fan_in| {
            if name.ends_with(".b") {
                store.add_zeros(name, shape)
            } else if name.ends_with("head.0.w") {
                let id = store.add_uniform(name, shape, fan_in, rng)?;
                let scaled = store.value(id).map(|v| v * T::from_f64(HEAD_INIT_SCALE));
                store.set_value(id, scaled)?;
                Ok(id)
            } else {
                store.add_uniform(name, shape, fan_in, rng)
            }
        })
    }

    /// Resolve parameters for path `index` that already exist in `store`.
    pub fn bind<T: Scalar>(index: usize, store: &ParamStore<T>) -> Result<Self> {
        Self::build(index, &mut |name, shape, _| {
            let id = store
                .find(name)
                .ok_or_else(|| Error::data(format!("missing parameter {name}")))?;
            if store.value(id).shape() != shape {
                return Err(Error::data(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    store.value(id).shape()
                )));
            }
            Ok(id)
        })
    }

    fn build(index: usize, make: &mut Maker<'_>) -> Result<Self> {
        let p = format!("p{index}");
        let mut layer = |name: String, w_shape: &[usize], fan_in: usize| -> Result<Layer> {
            let bias_len = if name.contains(".dec.") && name.ends_with("up") {
                w_shape[1]
            } else {
                w_shape[0]
            };
            Ok(Layer {
                w: make(&format!("{name}.w"), w_shape, fan_in)?,
                b: make(&format!("{name}.b"), &[bias_len], fan_in)?,
            })
        };
        let k3 = |cin: usize| ([WIDTH, cin, 3, 3], cin * 9);
        let mut block = |name: String, cin: usize| -> Result<ConvBlock> {
            let (s0, f0) = k3(cin);
            let (s1, f1) = k3(WIDTH);
            Ok(ConvBlock {
                first: layer(format!("{name}_0"), &s0, f0)?,
                second: layer(format!("{name}_1"), &s1, f1)?,
            })
        };
        let mut encoder = |tag: &str| -> Result<[ConvBlock; LEVELS]> {
            let mut v = Vec::with_capacity(LEVELS);
            for l in 0..LEVELS {
                v.push(block(format!("{p}.{tag}.{l}"), if l == 0 { 1 } else { WIDTH })?);
            }
            Ok(v.try_into().unwrap())
        };
        let enc_a = encoder("encA")?;
        let enc_b = encoder("encB")?;
        let mut fuse = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            fuse.push(layer(format!("{p}.fuse.{l}"), &[WIDTH, WIDTH, 2, 1, 1], 2 * WIDTH)?);
        }
        let mut dec_up = Vec::new();
        let mut dec_block = Vec::new();
        for l in (0..LEVELS - 1).rev() {
            dec_up.push(layer(format!("{p}.dec.{l}up"), &[WIDTH, WIDTH, 2, 2], WIDTH)?);
            let (s, f) = k3(WIDTH);
            dec_block.push(ConvBlock {
                first: layer(format!("{p}.dec.{l}_0"), &s, f)?,
                second: layer(format!("{p}.dec.{l}_1"), &k3(WIDTH).0, f)?,
            });
        }
        let head = layer(format!("{p}.head.0"), &[1, WIDTH, 1, 1], WIDTH)?;
        Ok(PathModel {
            index,
            enc_a,
            enc_b,
            fuse: fuse.try_into().unwrap(),
            dec_up: dec_up.try_into().unwrap(),
            dec_block: dec_block.try_into().unwrap(),
            head,
        })
    }

    fn conv_block<T: Scalar>(g: &mut Graph<T>, p: &Params<'_, T>, blk: &ConvBlock, x: Var) -> Result<Var> {
        let (w, b) = p.layer(g, blk.first);
        let y = g.conv2d(x, w, b)?;
        let y = g.relu(y)?;
        let (w, b) = p.layer(g, blk.second);
        let y = g.conv2d(y, w, b)?;
        g.relu(y)
    }

    /// Five feature maps, `32 × H/2^l × W/2^l` for `l = 0..4`. `x` is `[1,H,W]` or
    /// `[N,1,H,W]`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<'_, T>, x: Var, branch: Branch) -> Result<[Var; LEVELS]> {
        check_slice_dims(g.shape(x))?;
        let blocks = match branch {
            Branch::A => &self.enc_a,
            Branch::B => &self.enc_b,
        };
        let mut feats = Vec::with_capacity(LEVELS);
        let mut cur = x;
        for (l, blk) in blocks.iter().enumerate() {
            let f = Self::conv_block(g, p, blk, cur)?;
            feats.push(f);
            if l + 1 < LEVELS {
                cur = g.avg_pool2(f)?;
            }
        }
        Ok(feats.try_into().unwrap())
    }

    /// Stack `a` and `b` on a new depth axis, apply the level's 2×1×1 kernel, squeeze.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<'_, T>, level: usize, a: Var, b: Var) -> Result<Var> {
        if g.shape(a) != g.shape(b) {
            return Err(Error::dim(format!(
                "fusion inputs differ: {:?} vs {:?}",
                g.shape(a),
                g.shape(b)
            )));
        }
        let shape = g.shape(a).to_vec();
        let depth_axis = shape.len() - 2;
        let stacked = g.stack2(a, b, depth_axis)?;
        let (w, bias) = p.layer(g, self.fuse[level]);
        let merged = g.conv3d(stacked, w, bias, 0)?;
        g.reshape(merged, &shape)
    }

    /// Decoder from the five fused maps to the sigmoid probability map.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<'_, T>, fused: &[Var; LEVELS], merge: SkipMerge) -> Result<Var> {
        for l in 1..LEVELS {
            let (hi, lo) = (g.shape(fused[l - 1]).to_vec(), g.shape(fused[l]).to_vec());
            let r = hi.len();
            if lo.len() != r || lo[r - 2] * 2 != hi[r - 2] || lo[r - 1] * 2 != hi[r - 1] || lo[..r - 2] != hi[..r - 2] {
                return Err(Error::dim(format!("fused ladder mismatch at level {l}: {hi:?} vs {lo:?}")));
            }
        }
        let mut x = fused[LEVELS - 1];
        for step in 0..LEVELS - 1 {
            let level = LEVELS - 2 - step;
            let (w, b) = p.layer(g, self.dec_up[step]);
            let up = g.deconv2(x, w, b)?;
            let merged = match merge {
                SkipMerge::Add => g.add(up, fused[level])?,
                SkipMerge::Multiply => g.mul(up, fused[level])?,
            };
            let merged = g.relu(merged)?;
            x = Self::conv_block(g, p, &self.dec_block[step], merged)?;
        }
        let (w, b) = p.layer(g, self.head);
        let logits = g.conv2d(x, w, b)?;
        g.sigmoid(logits)
    }

    pub fn forward_with<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &Params<'_, T>,
        primary: Var,
        secondary: Var,
        merge: SkipMerge,
    ) -> Result<Var> {
        if g.shape(primary) != g.shape(secondary) {
            return Err(Error::dim(format!(
                "primary {:?} and secondary {:?} slices differ",
                g.shape(primary),
                g.shape(secondary)
            )));
        }
        let fa = self.encode(g, p, primary, Branch::A)?;
        let fb = self.encode(g, p, secondary, Branch::B)?;
        let mut fused = Vec::with_capacity(LEVELS);
        for l in 0..LEVELS {
            fused.push(self.fuse(g, p, l, fa[l], fb[l])?);
        }
        self.decode(g, p, &fused.try_into().unwrap(), merge)
    }

    /// Encode both slices, fuse per level, decode. Output has the primary's shape.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Params<'_, T>, primary: Var, secondary: Var) -> Result<Var> {
        self.forward_with(g, p, primary, secondary, SkipMerge::Add)
    }

    /// Every parameter id of this path.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        let mut push = |l: &Layer| {
            ids.push(l.w);
            ids.push(l.b);
        };
        for blk in self.enc_a.iter().chain(&self.enc_b).chain(&self.dec_block) {
            push(&blk.first);
            push(&blk.second);
        }
        self.fuse.iter().chain(&self.dec_up).for_each(&mut push);
        push(&self.head);
        ids
    }
}

fn check_slice_dims(shape: &[usize]) -> Result<()> {
    let r = shape.len();
    if r < 3 || shape[r - 3] != 1 {
        return Err(Error::dim(format!("path input must be [1,H,W] or [N,1,H,W], got {shape:?}")));
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if h % DIVISOR != 0 || w % DIVISOR != 0 {
        return Err(Error::dim(format!("slice {h}x{w} is not divisible by {DIVISOR}")));
    }
    Ok(())
}
