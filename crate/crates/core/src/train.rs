//! Episodic training, evaluation, gradient checking and the ablation suite.

use std::fmt;
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::config::Config;
use crate::episodes::{foreground_iou, miou, precision, sample_spec, Episode, EpisodeConfig, EpisodeSpec, Split};
use crate::error::{Result, VineError};
use crate::exec::Execution;
use crate::model::{binarize, forward, init_params, predict, Topology};
use crate::optim::{cosine_lr, Adam, AdamConfig};
use crate::params::VineParams;
use crate::tensor::Tensor;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;
const GRADCHECK_SEED: u64 = 0x6772_6164;

pub fn episode_config(cfg: &Config) -> EpisodeConfig {
    EpisodeConfig {
        image_size: cfg.image_size,
        clutter: cfg.clutter,
    }
}

/// Specs of the training stream: base classes, seeded from `cfg.seed`.
pub fn train_specs(cfg: &Config) -> Result<Vec<EpisodeSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    (0..cfg.train_episodes)
        .map(|_| sample_spec(Split::Base, cfg.k_shot, cfg.train_view_shift, &mut rng))
        .collect()
}

/// Specs of the held-out stream: novel classes, seeded from `cfg.eval_seed`.
/// The class and seed sequence does not depend on `view_shift`.
pub fn eval_specs(cfg: &Config, episodes: usize, view_shift: f64) -> Result<Vec<EpisodeSpec>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.eval_seed);
    (0..episodes)
        .map(|_| sample_spec(Split::Novel, cfg.k_shot, view_shift, &mut rng))
        .collect()
}

/// One line of the metrics log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub proto_loss: f64,
    pub pred_loss: f64,
    pub miou: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub const HEADER: &'static str = "step loss proto_loss pred_loss miou lr";
}

impl fmt::Display for StepMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} {} {} {} {}",
            self.step, self.loss, self.proto_loss, self.pred_loss, self.miou, self.lr
        )
    }
}

/// Parameters plus optimizer state for sequential training.
pub struct Trainer {
    cfg: Config,
    topo: Topology,
    params: VineParams,
    adam: Adam,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: &Config, params: VineParams) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            topo: Topology::new(cfg)?,
            adam: Adam::new(AdamConfig {
                beta1: cfg.beta1,
                beta2: cfg.beta2,
                eps: cfg.adam_eps,
            }),
            cfg: cfg.clone(),
            params,
            step: 0,
        })
    }

    pub fn params(&self) -> &VineParams {
        &self.params
    }

    pub fn into_params(self) -> VineParams {
        self.params
    }

    /// Forward, backward and one Adam update on `ep`.
    pub fn step(&mut self, ep: &Episode) -> Result<StepMetrics> {
        let cfg = &self.cfg;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, |p| !cfg.is_frozen(p));
        let fwd = forward(&mut tape, &bound, cfg, &self.topo, ep)?;
        let grads = tape.backward(fwd.total);
        let loss = tape.value(fwd.total).item();

        let pairs: Vec<(&str, &Tensor)> = bound.iter().filter_map(|(p, v)| grads.get(v).map(|g| (p, g))).collect();
        if let Some((path, _)) = pairs.iter().find(|(_, g)| g.data().iter().any(|x| !x.is_finite())) {
            return Err(VineError::NonFinite { path: path.to_string() });
        }
        if !loss.is_finite() {
            return Err(VineError::NonFinite { path: "<loss>".into() });
        }
        let lr = cosine_lr(cfg.lr, self.step, cfg.train_episodes);
        self.adam.update(&mut self.params, pairs, lr, |p| !cfg.is_frozen(p))?;

        let pred = binarize(tape.value(fwd.logits));
        let metrics = StepMetrics {
            step: self.step,
            loss,
            proto_loss: tape.value(fwd.proto_loss).item(),
            pred_loss: tape.value(fwd.pred.total).item(),
            miou: miou(&pred, &ep.query_mask)?,
            lr,
        };
        self.step += 1;
        Ok(metrics)
    }
}

/// Trains for `cfg.train_episodes` steps on the base-class stream, starting
/// from `init_params(cfg)`. Episodes are rendered by a producer thread into a
/// bounded FIFO of capacity `cfg.prefetch`.
pub fn train(cfg: &Config, mut on_step: impl FnMut(&StepMetrics)) -> Result<VineParams> {
    let params = init_params(cfg)?;
    train_from(cfg, params, &mut on_step)
}

pub fn train_from(cfg: &Config, params: VineParams, on_step: &mut dyn FnMut(&StepMetrics)) -> Result<VineParams> {
    let mut trainer = Trainer::new(cfg, params)?;
    let specs = train_specs(cfg)?;
    let ec = episode_config(cfg);
    let (tx, rx) = sync_channel::<Result<Episode>>(cfg.prefetch);
    thread::scope(|s| {
        s.spawn(move || {
            for spec in &specs {
                if tx.send(spec.generate(&ec)).is_err() {
                    break;
                }
            }
        });
        for ep in rx.iter() {
            let m = trainer.step(&ep?)?;
            on_step(&m);
        }
        Ok::<(), VineError>(())
    })?;
    Ok(trainer.into_params())
}

/// Aggregate metrics over held-out episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub miou: f64,
    pub fg_iou: f64,
    pub precision: f64,
    pub per_episode: Vec<f64>,
}

/// Per-episode evaluation output.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub spec: EpisodeSpec,
    pub miou: f64,
    pub fg_iou: f64,
    pub precision: f64,
    pub pred_mask: Tensor,
    pub disc_prior: Option<Tensor>,
}

pub fn evaluate_items(params: &VineParams, cfg: &Config, specs: &[EpisodeSpec], exec: Execution) -> Result<Vec<EvalItem>> {
    let topo = Topology::new(cfg)?;
    let ec = episode_config(cfg);
    exec.map(specs, |spec| {
        let ep = spec.generate(&ec)?;
        let p = predict(params, cfg, &topo, &ep)?;
        Ok(EvalItem {
            spec: *spec,
            miou: miou(&p.mask, &ep.query_mask)?,
            fg_iou: foreground_iou(&p.mask, &ep.query_mask)?,
            precision: precision(&p.mask, &ep.query_mask)?,
            pred_mask: p.mask,
            disc_prior: p.disc_prior,
        })
    })
    .into_iter()
    .collect()
}

pub fn summarize(items: &[EvalItem]) -> EvalReport {
    let n = items.len().max(1) as f64;
    EvalReport {
        miou: items.iter().map(|i| i.miou).sum::<f64>() / n,
        fg_iou: items.iter().map(|i| i.fg_iou).sum::<f64>() / n,
        precision: items.iter().map(|i| i.precision).sum::<f64>() / n,
        per_episode: items.iter().map(|i| i.miou).collect(),
    }
}

/// Mean metrics over `episodes` novel-class episodes at `view_shift`.
pub fn evaluate(params: &VineParams, cfg: &Config, episodes: usize, view_shift: f64, exec: Execution) -> Result<EvalReport> {
    let specs = eval_specs(cfg, episodes, view_shift)?;
    Ok(summarize(&evaluate_items(params, cfg, &specs, exec)?))
}

/// Gradient-check outcome of one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub path: String,
    pub max_rel_err: f64,
    pub elements: usize,
    /// Elements whose probe crossed a non-differentiable point and was
    /// repeated with a smaller step.
    pub refined: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn failures(&self) -> impl Iterator<Item = &GradcheckEntry> {
        self.entries.iter().filter(move |e| !(e.max_rel_err < self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            let status = if e.max_rel_err < self.tolerance { "ok" } else { "FAIL" };
            writeln!(f, "{status}\t{:.3e}\t{}\t{}", e.max_rel_err, e.elements, e.path)?;
        }
        Ok(())
    }
}

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
/// Relative errors use `max(|analytic|, |numeric|, GRADCHECK_FLOOR)` as the
/// denominator so that vanishing gradients compare in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Parameters for gradient checking: `init_params` with every all-zero
/// tensor replaced by small random values, so no path is trivially zero.
pub fn gradcheck_params(cfg: &Config) -> Result<VineParams> {
    let mut params = init_params(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GRADCHECK_SEED);
    for (_, t) in params.iter_mut() {
        if t.data().iter().all(|&x| x == 0.0) {
            t.data_mut().iter_mut().for_each(|x| *x = rng.gen_range(-0.3..0.3));
        }
    }
    Ok(params)
}

/// The fixed episode used by [`gradcheck_all`].
pub fn gradcheck_episode(cfg: &Config) -> Result<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ GRADCHECK_SEED);
    sample_spec(Split::Base, cfg.k_shot, cfg.train_view_shift, &mut rng)?.generate(&episode_config(cfg))
}

/// Compares the analytic gradient of the total loss against central finite
/// differences for every element of every parameter. `fault` names an op
/// whose backward rule is deliberately corrupted (negative control).
pub fn gradcheck_all(cfg: &Config, fault: Option<&'static str>) -> Result<GradcheckReport> {
    let topo = Topology::new(cfg)?;
    let ep = gradcheck_episode(cfg)?;
    let mut params = gradcheck_params(cfg)?;

    let mut tape = Tape::new();
    if let Some(op) = fault {
        tape.inject_backward_fault(op);
    }
    let bound = params.bind(&mut tape, |_| true);
    let fwd = forward(&mut tape, &bound, cfg, &topo, &ep)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(fwd.total);
    let analytic: Vec<(String, Tensor)> = bound
        .iter()
        .map(|(p, v)| {
            let g = grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(params.get(p).unwrap().shape()));
            (p.to_string(), g)
        })
        .collect();
    drop(tape);

    let eval = |params: &VineParams| -> Result<(f64, u64)> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| false);
        let f = forward(&mut tape, &bound, cfg, &topo, &ep)?;
        Ok((tape.value(f.total).item(), tape.kink_signature()))
    };

    let mut entries = Vec::with_capacity(analytic.len());
    for (path, g) in &analytic {
        let mut max_rel_err = 0.0f64;
        let mut refined = 0;
        for i in 0..g.len() {
            let orig = params.get(path).unwrap().data()[i];
            let mut h = GRADCHECK_STEP;
            let mut numeric = 0.0;
            for attempt in 0..4 {
                params.get_mut(path).unwrap().data_mut()[i] = orig + h;
                let (lp, sp) = eval(&params)?;
                params.get_mut(path).unwrap().data_mut()[i] = orig - h;
                let (lm, sm) = eval(&params)?;
                numeric = (lp - lm) / (2.0 * h);
                if sp == base_sig && sm == base_sig {
                    break;
                }
                if attempt == 0 {
                    refined += 1;
                }
                h /= 10.0;
            }
            params.get_mut(path).unwrap().data_mut()[i] = orig;
            let a = g.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
            max_rel_err = max_rel_err.max(rel);
        }
        entries.push(GradcheckEntry {
            path: path.clone(),
            max_rel_err,
            elements: g.len(),
            refined,
        });
    }
    Ok(GradcheckReport {
        entries,
        tolerance: GRADCHECK_TOL,
    })
}

/// The six component variants, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ResOnly,
    SamOnly,
    DualEncoder,
    WithDfm,
    WithSvga,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::ResOnly,
        Variant::SamOnly,
        Variant::DualEncoder,
        Variant::WithDfm,
        Variant::WithSvga,
        Variant::Full,
    ];

    pub fn id(self) -> char {
        match self {
            Variant::ResOnly => 'a',
            Variant::SamOnly => 'b',
            Variant::DualEncoder => 'c',
            Variant::WithDfm => 'd',
            Variant::WithSvga => 'e',
            Variant::Full => 'f',
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::ResOnly => "res only",
            Variant::SamOnly => "sam only",
            Variant::DualEncoder => "res+sam",
            Variant::WithDfm => "+DFM",
            Variant::WithSvga => "+SVGA",
            Variant::Full => "full",
        }
    }

    /// `base` with this variant's component flags applied.
    pub fn apply(self, base: &Config) -> Config {
        let (sam, res, dfm, svga) = match self {
            Variant::ResOnly => (false, true, false, false),
            Variant::SamOnly => (true, false, false, false),
            Variant::DualEncoder => (true, true, false, false),
            Variant::WithDfm => (true, true, true, false),
            Variant::WithSvga => (true, true, false, true),
            Variant::Full => (true, true, true, true),
        };
        Config {
            use_sam: sam,
            use_res: res,
            dfm_enabled: dfm,
            svga_enabled: svga,
            ..base.clone()
        }
    }
}

/// mIoU per variant and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<(Variant, Vec<f64>)>,
}

impl AblationTable {
    pub fn mean(&self, v: Variant) -> Option<f64> {
        self.rows
            .iter()
            .find(|(r, _)| *r == v)
            .map(|(_, xs)| xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "id\tvariant")?;
        for s in &self.seeds {
            write!(f, "\tseed{s}")?;
        }
        writeln!(f, "\tmean")?;
        for (v, xs) in &self.rows {
            write!(f, "({})\t{}", v.id(), v.label())?;
            for x in xs {
                write!(f, "\t{x:.4}")?;
            }
            writeln!(f, "\t{:.4}", xs.iter().sum::<f64>() / xs.len() as f64)?;
        }
        Ok(())
    }
}

/// Trains and evaluates every variant for every seed. All variants of a seed
/// see the same training stream and the same held-out episodes. Runs are
/// independent and distributed with `exec`.
pub fn run_ablation_suite(cfg: &Config, seeds: &[u64], exec: Execution) -> Result<AblationTable> {
    let jobs: Vec<(Variant, u64)> = Variant::ALL
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    let scores = exec.map(&jobs, |&(v, seed)| -> Result<f64> {
        let c = Config { seed, ..v.apply(cfg) };
        let params = train(&c, |_| {})?;
        Ok(evaluate(&params, &c, c.eval_episodes, c.eval_view_shift, Execution::Sequential)?.miou)
    });
    let mut rows: Vec<(Variant, Vec<f64>)> = Variant::ALL.iter().map(|&v| (v, Vec::new())).collect();
    for ((v, _), s) in jobs.iter().zip(scores) {
        rows.iter_mut().find(|(r, _)| r == v).unwrap().1.push(s?);
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_line_format() {
        let m = StepMetrics {
            step: 3,
            loss: 0.5,
            proto_loss: 0.25,
            pred_loss: 0.5,
            miou: 0.75,
            lr: 0.001,
        };
        assert_eq!(m.to_string(), "3 0.5 0.25 0.5 0.75 0.001");
        assert_eq!(m.to_string().split(' ').count(), StepMetrics::HEADER.split(' ').count());
    }

    #[test]
    fn zero_objective_leaves_params() {
        let cfg = Config {
            lambda_proto: 0.0,
            lambda_pred: 0.0,
            train_episodes: 2,
            ..Config::tiny()
        };
        let p0 = init_params(&cfg).unwrap();
        let p1 = train(&cfg, |_| {}).unwrap();
        assert_eq!(p0, p1);
    }

    #[test]
    fn frozen_paths_are_bit_identical() {
        let cfg = Config {
            freeze: vec!["encoder_sam".into(), "svga".into()],
            train_episodes: 3,
            ..Config::tiny()
        };
        let p0 = init_params(&cfg).unwrap();
        let p1 = train(&cfg, |_| {}).unwrap();
        for (path, t) in p0.iter() {
            if cfg.is_frozen(path) {
                assert_eq!(Some(t), p1.get(path), "{path}");
            }
        }
        assert_ne!(p0.get("decoder.conv1.weight"), p1.get("decoder.conv1.weight"));
    }

    #[test]
    fn disabled_svga_has_no_gradient() {
        let cfg = Config {
            svga_enabled: false,
            ..Config::tiny()
        };
        let topo = Topology::new(&cfg).unwrap();
        let ep = gradcheck_episode(&cfg).unwrap();
        let params = gradcheck_params(&cfg).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, |_| true);
        let f = forward(&mut tape, &bound, &cfg, &topo, &ep).unwrap();
        let g = tape.backward(f.total);
        assert!(g.get(bound.get("decoder.conv1.weight")).is_some());
        for (p, v) in bound.iter() {
            let zero = g.get(v).is_none_or(|t| t.data().iter().all(|&x| x == 0.0));
            if p.starts_with("svga.") {
                assert!(zero, "{p}");
            }
        }
    }

    #[test]
    fn loss_decomposes() {
        let cfg = Config {
            train_episodes: 2,
            ..Config::tiny()
        };
        let mut seen = Vec::new();
        train(&cfg, |m| seen.push(*m)).unwrap();
        assert_eq!(seen.len(), 2);
        for m in seen {
            let expect = cfg.lambda_proto * m.proto_loss + cfg.lambda_pred * m.pred_loss;
            assert!((m.loss - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn variant_flags() {
        let base = Config::default();
        assert!(!Variant::ResOnly.apply(&base).use_sam);
        assert!(!Variant::SamOnly.apply(&base).use_res);
        let f = Variant::Full.apply(&base);
        assert!(f.dfm_enabled && f.svga_enabled && f.use_sam && f.use_res);
        let ids: String = Variant::ALL.iter().map(|v| v.id()).collect();
        assert_eq!(ids, "abcdef");
    }
}
