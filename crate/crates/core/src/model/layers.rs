use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{DenseBlockConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::{BatchStats, BnMode, Graph, RunningStats, Var, BN_EPS};
use crate::tensor::Tensor;

/// Flat parameter storage. Layers refer to entries by index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub tensors: Vec<Tensor>,
    pub names: Vec<String>,
    pub running: Vec<RunningStats>,
}

impl ParamStore {
    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.tensors.push(t);
        self.names.push(name);
        self.tensors.len() - 1
    }

    /// Total scalar count of trainable tensors followed by running stats,
    /// the layout of a checkpoint blob.
    pub fn blob_len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum::<usize>()
            + self.running.iter().map(|r| 2 * r.channels()).sum::<usize>()
    }
}

/// Forward-pass context: the graph, registered parameter leaves, and the
/// batch-norm mode.
pub struct Ctx<'a> {
    pub g: &'a mut Graph,
    params: &'a [Var],
    running: &'a [RunningStats],
    mode: Mode,
    stats: Vec<(usize, BatchStats)>,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a mut Graph, params: &'a [Var], running: &'a [RunningStats], mode: Mode) -> Self {
        Self {
            g,
            params,
            running,
            mode,
            stats: Vec::new(),
        }
    }

    pub fn into_stats(self) -> Vec<(usize, BatchStats)> {
        self.stats
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    weight: usize,
    bias: usize,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvLayer {
    /// He-uniform weights with bound `sqrt(6 / fan_in)`, zero bias.
    pub fn build(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let w = Tensor::from_fn(&[cout, cin, kernel, kernel], |_| rng.random_range(-bound..bound));
        let weight = store.push(format!("{name}.weight"), w);
        let bias = store.push(format!("{name}.bias"), Tensor::zeros(&[cout]));
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (w, b) = (cx.params[self.weight], cx.params[self.bias]);
        cx.g.conv2d(x, w, b, 1, self.kernel / 2)
    }
}

#[derive(Clone, Debug)]
pub struct BnLayer {
    gamma: usize,
    beta: usize,
    stats: usize,
    pub channels: usize,
}

impl BnLayer {
    pub fn build(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        let gamma = store.push(format!("{name}.gamma"), Tensor::full(&[channels], 1.0));
        let beta = store.push(format!("{name}.beta"), Tensor::zeros(&[channels]));
        store.running.push(RunningStats::new(channels));
        Self {
            gamma,
            beta,
            stats: store.running.len() - 1,
            channels,
        }
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let (gm, bt) = (cx.params[self.gamma], cx.params[self.beta]);
        let mode = match cx.mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval(&cx.running[self.stats]),
        };
        let (y, stats) = cx.g.batchnorm2d(x, gm, bt, mode, BN_EPS)?;
        if let Some(s) = stats {
            cx.stats.push((self.stats, s));
        }
        Ok(y)
    }
}

/// `num_layers` repetitions of BN -> ELU -> 3x3 conv.
///
/// With zero growth every layer maps `width -> width` and the block output
/// is the last layer's output. With growth `k`, layer `i` reads the
/// concatenation of the block input and all earlier layer outputs
/// (`width + i*k` channels) and emits `k` channels; the block returns the
/// full concatenation.
#[derive(Clone, Debug)]
pub struct DenseBlock {
    cfg: DenseBlockConfig,
    layers: Vec<(BnLayer, ConvLayer)>,
}

impl DenseBlock {
    pub fn build(store: &mut ParamStore, name: &str, cfg: DenseBlockConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let (cin, cout) = if cfg.growth_rate == 0 {
                (cfg.width, cfg.width)
            } else {
                (cfg.width + i * cfg.growth_rate, cfg.growth_rate)
            };
            let bn = BnLayer::build(store, &format!("{name}.{i}.bn"), cin);
            let conv = ConvLayer::build(store, &format!("{name}.{i}.conv"), cin, cout, 3, rng);
            layers.push((bn, conv));
        }
        Self { cfg, layers }
    }

    pub fn config(&self) -> &DenseBlockConfig {
        &self.cfg
    }

    pub fn forward(&self, cx: &mut Ctx<'_>, x: Var) -> Result<Var> {
        let c = cx.g.value(x).dims4()?.1;
        if c != self.cfg.width {
            return Err(Error::shape(
                "dense_block",
                format!("block expects {} input channels, got {c}", self.cfg.width),
            ));
        }
        let mut x = x;
        for (bn, conv) in &self.layers {
            let y = bn.forward(cx, x)?;
            let y = cx.g.elu(y, 1.0);
            let y = conv.forward(cx, y)?;
            x = if self.cfg.growth_rate == 0 {
                y
            } else {
                cx.g.concat_channels(x, y)?
            };
        }
        Ok(x)
    }
}
