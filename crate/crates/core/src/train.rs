//! Adam training of the composite MSE + DSSIM objective with early
//! stopping, and corpus evaluation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{derive_seed, SampleTriple};
use crate::error::{Error, Result};
use crate::graph::{Graph, BN_MOMENTUM};
use crate::image::{Image, Role};
use crate::metrics::{self, composite_loss, MetricReport, SsimConstants};
use crate::model::{Mode, Model, ParamStore};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Smallest validation-loss decrease that counts as improvement.
    pub min_delta: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 4,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 10,
            min_delta: 1e-5,
            val_fraction: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("Adam eps must be positive");
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)");
        }
        Ok(())
    }
}

/// First and second moment estimates per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects the step, leaving everything
/// untouched, if any gradient is not finite.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    names: &[String],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!("{} params, {} grads, {} moments", params.len(), grads.len(), state.m.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("param {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                param: names.get(i).cloned().unwrap_or_else(|| format!("#{i}")),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for (((pv, &gv), mv), vv) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
            *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
            let mhat = *mv / c1;
            let vhat = *vv / c2;
            *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_ssim: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    /// Validation loss and SSIM before any update.
    pub initial_val_loss: Option<f64>,
    pub initial_val_ssim: Option<f64>,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_ssim\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_ssim));
        }
        s
    }

    pub fn parse_csv(text: &str) -> Result<Vec<EpochRecord>> {
        let mut out = Vec::new();
        for (n, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Config(format!("history.csv line {}: {line:?}", n + 1));
            if f.len() != 4 {
                return Err(bad());
            }
            out.push(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_loss: f[2].parse().map_err(|_| bad())?,
                val_ssim: f[3].parse().map_err(|_| bad())?,
            });
        }
        Ok(out)
    }

    pub fn last_epoch(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }
}

/// Deterministic split: sample `i` goes to validation when its hashed index
/// falls below `val_fraction`. Both sides are kept non-empty for `n >= 2`.
pub fn split_indices(n: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let (mut train, mut val): (Vec<usize>, Vec<usize>) = (0..n)
        .partition(|&i| (derive_seed(0x5eed_0f51_17, i as u64) >> 11) as f64 / (1u64 << 53) as f64 >= val_fraction);
    if n >= 2 && val.is_empty() {
        val.push(train.pop().expect("n >= 2"));
    }
    if n >= 2 && train.is_empty() {
        train.push(val.remove(0));
    }
    (train, val)
}

/// Stacked network inputs and targets for a set of samples.
pub struct Batch {
    pub t2sub: Tensor,
    pub flair: Option<Tensor>,
    pub target: Tensor,
}

impl Batch {
    pub fn new(samples: &[&SampleTriple], multimodal: bool) -> Result<Self> {
        let stack = |f: &dyn Fn(&SampleTriple) -> &Image| -> Result<Tensor> {
            let ts: Vec<Tensor> = samples.iter().map(|s| f(s).to_tensor()).collect();
            Tensor::stack_batch(&ts.iter().collect::<Vec<_>>())
        };
        Ok(Self {
            t2sub: stack(&|s| &s.t2sub)?,
            flair: if multimodal { Some(stack(&|s| &s.flair)?) } else { None },
            target: stack(&|s| &s.t2)?,
        })
    }
}

/// Forward, backward and one Adam update on `batch`. Returns the loss.
pub fn train_step(model: &mut Model, adam: &mut AdamState, batch: &Batch, cfg: &TrainConfig) -> Result<f64> {
    let mut g = Graph::new();
    let x = g.input(batch.t2sub.clone());
    let f = batch.flair.as_ref().map(|t| g.input(t.clone()));
    let y = g.input(batch.target.clone());
    let fw = model.forward(&mut g, x, f, Mode::Train)?;
    let loss = composite_loss(&mut g, y, fw.output, SsimConstants::default())?;
    let value = g.value(loss).data()[0];
    g.backward(loss)?;
    let grads: Vec<Tensor> = fw
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    let names = model.param_names().to_vec();
    adam_step(model.params_mut(), &grads, &names, adam, cfg)?;
    model.apply_batch_stats(&fw.batch_stats, BN_MOMENTUM);
    Ok(value)
}

/// Evaluation-mode predictions, one per sample, in order.
pub fn predict_all(model: &Model, samples: &[SampleTriple]) -> Result<Vec<Image>> {
    par::map_slice(samples, |s| {
        let b = Batch::new(&[s], model.config().multimodal)?;
        let out = model.predict(&b.t2sub, b.flair.as_ref())?;
        Ok(Image::from_tensor(&out, 0)?.with_role(Role::Prediction))
    })
    .into_iter()
    .collect()
}

/// Mean composite loss and mean SSIM of evaluation-mode predictions.
pub fn validation_metrics(model: &Model, samples: &[SampleTriple]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let k = SsimConstants::default();
    let preds = predict_all(model, samples)?;
    let (mut loss, mut ssim) = (0.0, 0.0);
    for (s, p) in samples.iter().zip(&preds) {
        let d = metrics::dssim(&s.t2, p, &k)?;
        loss += metrics::mse(&s.t2, p)? + d;
        ssim += 1.0 - 2.0 * d;
    }
    let n = samples.len() as f64;
    Ok((loss / n, ssim / n))
}

/// Training run state; persists across [`Trainer::run`] calls and resumes.
pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    adam: AdamState,
    history: History,
    best: Option<ParamStore>,
    wait: usize,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
}

impl Trainer {
    pub fn new(model: Model, n_samples: usize, cfg: TrainConfig) -> Result<Self> {
        let adam = AdamState::new(model.params());
        Self::resume(model, adam, History::default(), n_samples, cfg)
    }

    /// Continues after `history.last_epoch()`.
    pub fn resume(model: Model, adam: AdamState, history: History, n_samples: usize, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if n_samples == 0 {
            return Err(Error::EmptyDataset);
        }
        let (train_idx, val_idx) = split_indices(n_samples, cfg.val_fraction);
        let wait = match history.records.iter().position(|r| r.epoch == history.best_epoch) {
            Some(p) => history.records.len() - 1 - p,
            None => history.records.len(),
        };
        Ok(Self {
            cfg,
            model,
            adam,
            history,
            best: None,
            wait,
            train_idx,
            val_idx,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn adam(&self) -> &AdamState {
        &self.adam
    }

    pub fn history(&self) -> &History {
        &self.history
    }

    pub fn split(&self) -> (&[usize], &[usize]) {
        (&self.train_idx, &self.val_idx)
    }

    fn subset(data: &[SampleTriple], idx: &[usize]) -> Vec<SampleTriple> {
        idx.iter().map(|&i| data[i].clone()).collect()
    }

    /// Trains until `cfg.epochs` or early stopping. `on_epoch` sees each
    /// finished epoch and whether it is the new best.
    pub fn run<F>(&mut self, data: &[SampleTriple], mut on_epoch: F) -> Result<()>
    where
        F: FnMut(&Trainer, &EpochRecord, bool) -> Result<()>,
    {
        if data.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let val = Self::subset(data, &self.val_idx);
        if self.history.initial_val_loss.is_none() {
            let (l, s) = validation_metrics(&self.model, &val)?;
            self.history.initial_val_loss = Some(l);
            self.history.initial_val_ssim = Some(s);
            self.history.best_val_loss = Some(l);
            self.history.best_epoch = 0;
            self.best = Some(self.model.store().clone());
        }
        let multimodal = self.model.config().multimodal;
        let start = self.history.last_epoch() + 1;
        for epoch in start..=self.cfg.epochs {
            if self.wait >= self.cfg.patience {
                self.history.stopped_early = true;
                break;
            }
            let mut order = self.train_idx.clone();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, epoch as u64)));
            let (mut total, mut count) = (0.0, 0usize);
            for chunk in order.chunks(self.cfg.batch_size) {
                let samples: Vec<&SampleTriple> = chunk.iter().map(|&i| &data[i]).collect();
                let batch = Batch::new(&samples, multimodal)?;
                total += train_step(&mut self.model, &mut self.adam, &batch, &self.cfg)? * chunk.len() as f64;
                count += chunk.len();
            }
            let (val_loss, val_ssim) = validation_metrics(&self.model, &val)?;
            let rec = EpochRecord {
                epoch,
                train_loss: total / count.max(1) as f64,
                val_loss,
                val_ssim,
            };
            let best = self.history.best_val_loss.unwrap_or(f64::INFINITY);
            let improved = val_loss < best - self.cfg.min_delta;
            if improved {
                self.history.best_val_loss = Some(val_loss);
                self.history.best_epoch = epoch;
                self.best = Some(self.model.store().clone());
                self.wait = 0;
            } else {
                self.wait += 1;
            }
            self.history.records.push(rec.clone());
            on_epoch(self, &rec, improved)?;
        }
        if self.wait >= self.cfg.patience && self.history.last_epoch() < self.cfg.epochs {
            self.history.stopped_early = true;
        }
        Ok(())
    }

    /// The best-validation model (the current one if no snapshot was taken
    /// in this session) and the history.
    pub fn finish(self) -> (Model, History) {
        let mut model = self.model;
        if let Some(best) = self.best {
            *model.store_mut() = best;
        }
        (model, self.history)
    }
}

/// Trains `model` on `data` and returns the best-validation weights.
pub fn train(model: Model, data: &[SampleTriple], cfg: &TrainConfig) -> Result<(Model, History)> {
    let mut t = Trainer::new(model, data.len(), cfg.clone())?;
    t.run(data, |_, _, _| Ok(()))?;
    Ok(t.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean_ssim: f64,
    pub median_ssim: f64,
    pub mean_mse: f64,
    pub mean_dssim: f64,
    pub mean_ssim_windowed: Option<f64>,
}

pub fn aggregate(records: &[MetricReport]) -> Aggregate {
    let n = records.len();
    let mean = |f: &dyn Fn(&MetricReport) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
    let mut ssims: Vec<f64> = records.iter().map(|r| r.ssim).collect();
    ssims.sort_by(f64::total_cmp);
    let median = match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => ssims[n / 2],
        _ => 0.5 * (ssims[n / 2 - 1] + ssims[n / 2]),
    };
    let windowed = records
        .iter()
        .map(|r| r.ssim_windowed)
        .collect::<Option<Vec<f64>>>()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64);
    Aggregate {
        count: n,
        mean_ssim: mean(&|r| r.ssim),
        median_ssim: median,
        mean_mse: mean(&|r| r.mse),
        mean_dssim: mean(&|r| r.dssim),
        mean_ssim_windowed: windowed,
    }
}

/// Per-sample metrics of the network output and of the zero-filled input.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub records: Vec<MetricReport>,
    pub baseline: Vec<MetricReport>,
    pub summary: Aggregate,
    pub baseline_summary: Aggregate,
    pub predictions: Vec<Image>,
}

pub fn evaluate(model: &Model, samples: &[SampleTriple]) -> Result<EvalReport> {
    let k = SsimConstants::default();
    let predictions = predict_all(model, samples)?;
    let mut records = Vec::with_capacity(samples.len());
    let mut baseline = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&predictions) {
        records.push(MetricReport::compute(s.id.clone(), &s.t2, p, &k)?);
        baseline.push(MetricReport::compute(s.id.clone(), &s.t2, &s.t2sub, &k)?);
    }
    Ok(EvalReport {
        summary: aggregate(&records),
        baseline_summary: aggregate(&baseline),
        records,
        baseline,
        predictions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![Tensor::full(&[3], 0.5)];
        let g = vec![Tensor::zeros(&[3])];
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &["p".into()], &mut st, &cfg()).unwrap();
        assert_eq!(p[0], Tensor::full(&[3], 0.5));
        assert_eq!(st.t, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for g in [3.0, -0.2] {
            let mut p = vec![Tensor::scalar(1.0)];
            let mut st = AdamState::new(&p);
            adam_step(&mut p, &[Tensor::scalar(g)], &["w".into()], &mut st, &cfg()).unwrap();
            // m_hat = g, v_hat = g^2 at t = 1.
            let expect = 1.0 - 1e-3 * g / (g.abs() + 1e-8);
            assert!((p[0].data()[0] - expect).abs() < 1e-15);
            assert!(((p[0].data()[0] - 1.0) + 1e-3 * g.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = vec![Tensor::scalar(1.0), Tensor::scalar(2.0)];
        let mut st = AdamState::new(&p);
        let g = vec![Tensor::scalar(0.0), Tensor::scalar(f64::NAN)];
        let err = adam_step(&mut p, &g, &["a".into(), "dec.w".into()], &mut st, &cfg()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { ref param } if param == "dec.w"));
        assert_eq!(st.t, 0);
    }

    #[test]
    fn config_validation() {
        assert!(cfg().validate().is_ok());
        assert!(TrainConfig { batch_size: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { patience: 0, ..cfg() }.validate().is_err());
        assert!(TrainConfig { lr: -1.0, ..cfg() }.validate().is_err());
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let (t, v) = split_indices(200, 0.15);
        assert_eq!(t.len() + v.len(), 200);
        assert_eq!(split_indices(200, 0.15), (t.clone(), v.clone()));
        assert!((20..=40).contains(&v.len()), "{}", v.len());
        let (t2, v2) = split_indices(2, 0.15);
        assert_eq!((t2.len(), v2.len()), (1, 1));
    }

    #[test]
    fn csv_round_trip() {
        let h = History {
            records: vec![EpochRecord { epoch: 1, train_loss: 0.25, val_loss: 0.125, val_ssim: 0.5 }],
            ..Default::default()
        };
        assert_eq!(History::parse_csv(&h.to_csv()).unwrap(), h.records);
    }

    #[test]
    fn aggregate_median() {
        let r = |s: f64| MetricReport { id: String::new(), mse: 0.0, ssim: s, dssim: (1.0 - s) / 2.0, psnr: 0.0, ssim_windowed: None };
        let a = aggregate(&[r(0.2), r(0.9), r(0.5), r(0.7)]);
        assert!((a.median_ssim - 0.6).abs() < 1e-15);
        assert!((a.mean_ssim - 0.575).abs() < 1e-15);
        assert_eq!(a.mean_ssim_windowed, None);
    }
}
