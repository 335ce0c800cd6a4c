//! Multimodal Dense U-Net and its single-input baseline.
//!
//! Layout for `depth = D`, `fuse_after_stages = F`, constant width `w`:
//!
//! ```text
//! stem (per modality)   level 0..F-1: conv3x3 -> dense block -> skip -> maxpool
//! fusion                channel concat of the stems (multimodal only)
//! shared encoder        level F..D:   conv3x3 -> dense block [-> skip -> maxpool]
//! decoder               level D-1..0: upsample -> concat skip -> conv3x3 -> dense block
//! head                  conv1x1 -> sigmoid
//! ```
//!
//! Skips at stem levels carry both modalities. The level-0 decoder dense
//! block followed by the 1x1 convolution is the reconstruction head.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use layers::{BnLayer, ConvLayer, Ctx, DenseBlock, ParamStore};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchStats, Graph, Var};
use crate::tensor::Tensor;

/// Dense block hyper-parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DenseBlockConfig {
    /// Channels added per layer. Zero gives a plain constant-width stack.
    pub growth_rate: usize,
    pub num_layers: usize,
    /// Channels entering the block.
    pub width: usize,
}

impl DenseBlockConfig {
    pub fn out_channels(&self) -> usize {
        self.width + self.num_layers * self.growth_rate
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of pooling stages.
    pub depth: usize,
    /// Channels produced by every entry convolution.
    pub base_width: usize,
    pub growth_rate: usize,
    pub num_layers: usize,
    /// Two input branches (subsampled T2 and FLAIR) when set.
    pub multimodal: bool,
    /// Pooling stages each stem runs before fusion.
    #[serde(default = "default_fuse")]
    pub fuse_after_stages: usize,
    pub height: usize,
    pub width: usize,
}

fn default_fuse() -> usize {
    1
}

impl ModelConfig {
    /// Small configuration used for quick experiments on 64x64 slices.
    pub fn desk(multimodal: bool) -> Self {
        Self {
            depth: 2,
            base_width: 8,
            growth_rate: 0,
            num_layers: 2,
            multimodal,
            fuse_after_stages: 1,
            height: 64,
            width: 64,
        }
    }

    /// 64 feature maps, five-layer zero-growth dense blocks, on 192x292
    /// slices. 292 = 4 * 73 limits the depth to two poolings.
    pub fn paper(multimodal: bool) -> Self {
        Self {
            depth: 2,
            base_width: 64,
            growth_rate: 0,
            num_layers: 5,
            multimodal,
            fuse_after_stages: 1,
            height: 192,
            width: 292,
        }
    }

    pub fn dense(&self) -> DenseBlockConfig {
        DenseBlockConfig {
            growth_rate: self.growth_rate,
            num_layers: self.num_layers,
            width: self.base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        if self.base_width == 0 || self.num_layers == 0 {
            return Err(Error::Config("base_width and num_layers must be positive".into()));
        }
        if self.fuse_after_stages == 0 || self.fuse_after_stages > self.depth {
            return Err(Error::Config(format!(
                "fuse_after_stages must lie in 1..={}, got {}",
                self.depth, self.fuse_after_stages
            )));
        }
        check_divisible(self.height, self.width, self.depth)
    }
}

fn check_divisible(h: usize, w: usize, depth: usize) -> Result<()> {
    let q = 1usize << depth;
    for (name, v) in [("height", h), ("width", w)] {
        if v == 0 || v % q != 0 {
            return Err(Error::Config(format!(
                "{name} {v} is not divisible by 2^{depth} = {q}"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
struct Stage {
    entry: ConvLayer,
    block: DenseBlock,
}

impl Stage {
    fn build(store: &mut ParamStore, name: &str, cin: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let entry = ConvLayer::build(store, &format!("{name}.entry"), cin, cfg.base_width, 3, rng);
        let block = DenseBlock::build(store, &format!("{name}.dense"), cfg.dense(), rng);
        Self { entry, block }
    }

    fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let x = self.entry.forward(cx, x)?;
        self.block.forward(cx, x)
    }
}

/// Network parameters plus the plan that wires them together.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    seed: u64,
    store: ParamStore,
    stems: Vec<Vec<Stage>>,
    encoder: Vec<Stage>,
    decoder: Vec<Stage>,
    head: ConvLayer,
}

/// Output of a forward pass.
pub struct Forward {
    pub output: Var,
    /// Parameter leaves in declaration order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (training mode only).
    pub batch_stats: Vec<(usize, BatchStats)>,
}

impl Model {
    /// He-uniform convolution weights, zero biases, unit/zero BN affine.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let n_stems = if config.multimodal { 2 } else { 1 };
        let dw = config.dense().out_channels();
        let f = config.fuse_after_stages;

        let mut stems = Vec::with_capacity(n_stems);
        for s in 0..n_stems {
            let mut stages = Vec::with_capacity(f);
            for level in 0..f {
                let cin = if level == 0 { 1 } else { dw };
                stages.push(Stage::build(&mut store, &format!("stem{s}.l{level}"), cin, config, &mut rng));
            }
            stems.push(stages);
        }
        let mut encoder = Vec::new();
        for level in f..=config.depth {
            let cin = if level == f { n_stems * dw } else { dw };
            encoder.push(Stage::build(&mut store, &format!("enc.l{level}"), cin, config, &mut rng));
        }
        let mut decoder = Vec::new();
        for level in (0..config.depth).rev() {
            let skip = if level < f { n_stems * dw } else { dw };
            decoder.push(Stage::build(&mut store, &format!("dec.l{level}"), dw + skip, config, &mut rng));
        }
        let head = ConvLayer::build(&mut store, "head", dw, 1, 1, &mut rng);
        Ok(Self {
            config: config.clone(),
            seed,
            store,
            stems,
            encoder,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn params(&self) -> &[Tensor] {
        &self.store.tensors
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.store.tensors
    }

    pub fn param_names(&self) -> &[String] {
        &self.store.names
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf of `g`, in declaration order.
    pub fn register(&self, g: &mut Graph, track_grads: bool) -> Vec<Var> {
        self.store
            .tensors
            .iter()
            .map(|t| if track_grads { g.param(t.clone()) } else { g.input(t.clone()) })
            .collect()
    }

    /// Forward pass with parameters already registered in `g`.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        params: &[Var],
        t2sub: Var,
        flair: Option<Var>,
        mode: Mode,
    ) -> Result<(Var, Vec<(usize, BatchStats)>)> {
        if params.len() != self.store.tensors.len() {
            return Err(Error::shape(
                "model",
                format!("expected {} parameter leaves, got {}", self.store.tensors.len(), params.len()),
            ));
        }
        let inputs: Vec<Var> = match (self.config.multimodal, flair) {
            (true, Some(f)) => vec![t2sub, f],
            (false, None) => vec![t2sub],
            (true, None) => {
                return Err(Error::Config("multimodal model needs a FLAIR input".into()));
            }
            (false, Some(_)) => {
                return Err(Error::Config("unimodal model takes no FLAIR input".into()));
            }
        };
        let (b, c, h, w) = g.value(t2sub).dims4()?;
        if c != 1 {
            return Err(Error::shape("model", format!("inputs must have one channel, got {c}")));
        }
        for &v in &inputs[1..] {
            if g.value(v).dims4()? != (b, c, h, w) {
                return Err(Error::shape(
                    "model",
                    format!("FLAIR {:?} does not match T2 {:?}", g.value(v).shape(), g.value(t2sub).shape()),
                ));
            }
        }
        check_divisible(h, w, self.config.depth)?;

        let mut cx = Ctx::new(g, params, &self.store.running, mode);
        let f = self.config.fuse_after_stages;
        let mut skips: Vec<Var> = Vec::with_capacity(self.config.depth);

        let mut branches = inputs;
        for level in 0..f {
            let mut feats = Vec::with_capacity(branches.len());
            for (stem, x) in self.stems.iter().zip(&branches) {
                feats.push(stem[level].forward(&mut cx, *x)?);
            }
            let mut skip = feats[0];
            for &other in &feats[1..] {
                skip = cx.g.concat_channels(skip, other)?;
            }
            skips.push(skip);
            branches = feats
                .into_iter()
                .map(|x| cx.g.maxpool2d(x))
                .collect::<Result<_>>()?;
        }
        let mut x = branches[0];
        for &other in &branches[1..] {
            x = cx.g.concat_channels(x, other)?;
        }
        for (i, stage) in self.encoder.iter().enumerate() {
            x = stage.forward(&mut cx, x)?;
            if f + i < self.config.depth {
                skips.push(x);
                x = cx.g.maxpool2d(x)?;
            }
        }
        for stage in &self.decoder {
            let up = cx.g.upsample_bilinear2x(x)?;
            let skip = skips.pop().expect("one skip per decoder level");
            let merged = cx.g.concat_channels(up, skip)?;
            x = stage.forward(&mut cx, merged)?;
        }
        let y = self.head.forward(&mut cx, x)?;
        let out = cx.g.sigmoid(y);
        let stats = cx.into_stats();
        Ok((out, stats))
    }

    /// Registers parameters (tracking gradients in training mode) and runs
    /// the network.
    pub fn forward(&self, g: &mut Graph, t2sub: Var, flair: Option<Var>, mode: Mode) -> Result<Forward> {
        let params = self.register(g, mode == Mode::Train);
        let (output, batch_stats) = self.forward_with(g, &params, t2sub, flair, mode)?;
        Ok(Forward {
            output,
            params,
            batch_stats,
        })
    }

    /// Evaluation-mode inference on `(B, 1, H, W)` inputs.
    pub fn predict(&self, t2sub: &Tensor, flair: Option<&Tensor>) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.input(t2sub.clone());
        let f = flair.map(|f| g.input(f.clone()));
        let params = self.register(&mut g, false);
        let (out, _) = self.forward_with(&mut g, &params, t, f, Mode::Eval)?;
        Ok(g.value(out).clone())
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn apply_batch_stats(&mut self, stats: &[(usize, BatchStats)], momentum: f64) {
        for (i, s) in stats {
            self.store.running[*i].update(s, momentum);
        }
    }
}
