//! Two-phase training, checkpointing and evaluation.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{json_diff, RunConfig};
use crate::error::{Error, Result};
use crate::io::{Checkpoint, SavedMoments, SavedTensor};
use crate::loss::{census_loss, distill_loss, recon_loss, total_loss, LossReport, CSV_HEADER};
use crate::model::Model;
use crate::synth::{epe, overlay, stack, FrameTriplet, Metrics, MotionLevel};
use crate::tensor::optim::{AdamW, AdamWConfig, MomentState};
use crate::tensor::{Graph, ParamStore, Tensor};
use crate::warp::FlowField;

pub const CHECKPOINT_FILE: &str = "checkpoint.vfit";
pub const LOSS_FILE: &str = "loss.csv";

/// Which parameters a step updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Encoder and flow estimator, on the distillation loss.
    Flow,
    /// Everything, on the weighted objective.
    Joint,
}

/// One mini-batch, `[N,·,H,W]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub i0: Tensor<f32>,
    pub it: Tensor<f32>,
    pub i1: Tensor<f32>,
    pub flow_t0: Tensor<f32>,
    pub flow_t1: Tensor<f32>,
}

impl Batch {
    pub fn from_triplets(items: &[FrameTriplet]) -> Result<Self> {
        let flows = |f: &dyn Fn(&FrameTriplet) -> &FlowField<f32>| -> Result<Tensor<f32>> {
            let planes: Vec<Tensor<f32>> = items
                .iter()
                .map(|t| {
                    let ft = f(t).tensor();
                    ft.clone().reshape(ft.shape()[1..].to_vec())
                })
                .collect::<Result<_>>()?;
            stack(&planes.iter().collect::<Vec<_>>())
        };
        Ok(Batch {
            i0: stack(&items.iter().map(|t| &t.i0).collect::<Vec<_>>())?,
            it: stack(&items.iter().map(|t| &t.it).collect::<Vec<_>>())?,
            i1: stack(&items.iter().map(|t| &t.i1).collect::<Vec<_>>())?,
            flow_t0: flows(&|t| &t.flow_t0)?,
            flow_t1: flows(&|t| &t.flow_t1)?,
        })
    }
}

/// Random crop, horizontal flip and time reversal of one triplet.
pub fn augment(t: &FrameTriplet, crop: usize, rng: &mut ChaCha8Rng) -> Result<FrameTriplet> {
    let (h, w) = (t.height(), t.width());
    if crop > h || crop > w {
        return Err(Error::Input(format!("crop {crop} exceeds triplet size {h}x{w}")));
    }
    let y0 = rng.gen_range(0..=h - crop);
    let x0 = rng.gen_range(0..=w - crop);
    let mut out = t.crop(y0, x0, crop)?;
    if rng.gen_bool(0.5) {
        out = out.flipped();
    }
    if rng.gen_bool(0.5) {
        out = out.time_reversed();
    }
    Ok(out)
}

/// Model, parameters, optimizer and schedule position.
pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub step: u64,
    optimizer: AdamW<f32>,
    phase: Phase,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Self> {
        run.model.validate()?;
        let (model, store) = Model::init(&run.model, run.seed)?;
        let phase = Self::phase_at(&run, 0);
        let optimizer = Self::optimizer_for(&run, &model, &store, phase);
        Ok(Trainer {
            run,
            model,
            store,
            step: 0,
            optimizer,
            phase,
        })
    }

    fn phase_at(run: &RunConfig, step: u64) -> Phase {
        if step < run.steps_flow {
            Phase::Flow
        } else {
            Phase::Joint
        }
    }

    fn optimizer_for(run: &RunConfig, model: &Model, store: &ParamStore<f32>, phase: Phase) -> AdamW<f32> {
        let params = match phase {
            Phase::Flow => model.flow_params(store),
            Phase::Joint => store.ids().collect(),
        };
        let config = AdamWConfig {
            lr: run.model.lr,
            weight_decay: run.model.weight_decay,
            ..AdamWConfig::default()
        };
        AdamW::new(config, store, params)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.run.total_steps()
    }

    /// The augmented batch for `step`. Depends only on the seed, the step
    /// and the corpus.
    pub fn batch_for(&self, corpus: &[FrameTriplet], step: u64) -> Result<Batch> {
        if corpus.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.run.seed);
        rng.set_stream(step + 1);
        let size = match Self::phase_at(&self.run, step) {
            Phase::Flow => self.run.model.batch_flow,
            Phase::Joint => self.run.model.batch,
        };
        let items = (0..size)
            .map(|_| {
                let k = rng.gen_range(0..corpus.len());
                augment(&corpus[k], self.run.model.crop, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::from_triplets(&items)
    }

    /// Forward, backward and one optimizer update.
    pub fn train_step(&mut self, corpus: &[FrameTriplet]) -> Result<LossReport> {
        let phase = Self::phase_at(&self.run, self.step);
        if phase != self.phase {
            self.phase = phase;
            self.optimizer = Self::optimizer_for(&self.run, &self.model, &self.store, phase);
        }
        let batch = self.batch_for(corpus, self.step)?;
        let cfg = &self.run.model;
        let trainable: Vec<_> = self.optimizer.params().to_vec();
        let mut g = Graph::new();
        let i0 = g.constant(batch.i0);
        let i1 = g.constant(batch.i1);
        let it = g.constant(batch.it);
        let t0 = g.constant(batch.flow_t0);
        let t1 = g.constant(batch.flow_t1);
        let (terms, loss) = match phase {
            Phase::Flow => {
                let fo = self.model.forward_flow(&mut g, &self.store, i0, i1)?;
                let dis = distill_loss(&mut g, fo.flows, (t0, t1))?;
                let zero = g.scalar(0.0);
                let unit = crate::config::LossWeights {
                    rec: 0.0,
                    census: 0.0,
                    distill: 1.0,
                };
                let terms = total_loss(&mut g, zero, zero, dis, &unit)?;
                (terms, dis)
            }
            Phase::Joint => {
                let out = self.model.forward(&mut g, &self.store, i0, i1)?;
                let rec = recon_loss(&mut g, out.frame, it)?;
                let css = census_loss(&mut g, out.frame, it, &cfg.census)?;
                let dis = distill_loss(&mut g, out.flows, (t0, t1))?;
                let terms = total_loss(&mut g, rec, css, dis, &cfg.loss)?;
                (terms, terms.total)
            }
        };
        g.check_finite(loss, "training loss")?;
        let report = LossReport::read(&g, &terms);
        let grads = g.backward(loss)?;
        let mut map = grads.into_params();
        self.store.zero_grads();
        let grads: Vec<_> = trainable
            .iter()
            .map(|&id| (id, map.remove(&id).unwrap_or_else(|| vec![0.0; self.store.get(id).numel()])))
            .collect();
        self.store.accumulate_grads(grads);
        self.optimizer.step(&mut self.store)?;
        self.store.zero_grads();
        self.step += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self
            .store
            .iter()
            .map(|(_, p)| SavedTensor {
                name: p.name().to_string(),
                shape: p.shape().to_vec(),
                data: p.value().to_vec(),
            })
            .collect();
        let optimizer = self
            .optimizer
            .params()
            .iter()
            .zip(self.optimizer.state())
            .map(|(&id, st)| SavedMoments {
                name: self.store.get(id).name().to_string(),
                step: st.step,
                m: st.m.clone(),
                v: st.v.clone(),
            })
            .collect();
        Checkpoint {
            digest: self.run.digest(),
            config: serde_json::to_string(&self.run).expect("config serializes"),
            step: self.step,
            params,
            optimizer,
        }
    }

    /// Restores parameters, optimizer moments and step from a checkpoint
    /// written by a run with the same model configuration and seed.
    pub fn resume(run: RunConfig, ck: &Checkpoint) -> Result<Self> {
        if ck.digest != run.digest() {
            let stored: RunConfig = serde_json::from_str(&ck.config)
                .map_err(|e| Error::Format(format!("checkpoint config is unreadable: {e}")))?;
            let diff = json_diff(&stored.identity(), &run.identity());
            return Err(Error::Config(format!(
                "checkpoint was written by a different configuration: {}",
                diff.join("; ")
            )));
        }
        let mut t = Trainer::new(run)?;
        load_params(&mut t.store, &ck.params)?;
        t.step = ck.step;
        t.phase = Self::phase_at(&t.run, t.step);
        t.optimizer = Self::optimizer_for(&t.run, &t.model, &t.store, t.phase);
        let by_name: BTreeMap<&str, &SavedMoments> = ck.optimizer.iter().map(|m| (m.name.as_str(), m)).collect();
        // moments saved at a phase boundary belong to the previous phase's optimizer
        let same_phase = by_name.len() == t.optimizer.params().len()
            && t.optimizer.params().iter().all(|id| by_name.contains_key(t.store.get(*id).name()));
        if same_phase {
            let state = t
                .optimizer
                .params()
                .iter()
                .map(|&id| {
                    let name = t.store.get(id).name();
                    let m = by_name[name];
                    Ok(MomentState {
                        m: m.m.clone(),
                        v: m.v.clone(),
                        step: m.step,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            t.optimizer.restore_state(state)?;
        }
        Ok(t)
    }
}

/// Copies saved parameters into `store` by name.
pub fn load_params(store: &mut ParamStore<f32>, saved: &[SavedTensor]) -> Result<()> {
    if saved.len() != store.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            saved.len(),
            store.len()
        )));
    }
    for s in saved {
        let id = store
            .find(&s.name)
            .ok_or_else(|| Error::Format(format!("checkpoint parameter {} is not in the model", s.name)))?;
        if store.get(id).shape() != s.shape.as_slice() {
            return Err(Error::Format(format!(
                "parameter {}: checkpoint shape {:?}, model shape {:?}",
                s.name,
                s.shape,
                store.get(id).shape()
            )));
        }
        store.set(id, &Tensor::new(s.shape.clone(), s.data.clone())?)?;
    }
    Ok(())
}

/// Rebuilds a model and its parameters from a checkpoint file.
pub fn load_model(path: &Path) -> Result<(Model, ParamStore<f32>, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let run: RunConfig =
        serde_json::from_str(&ck.config).map_err(|e| Error::Format(format!("{}: bad config: {e}", path.display())))?;
    let (model, mut store) = Model::init(&run.model, run.seed)?;
    load_params(&mut store, &ck.params)?;
    Ok((model, store, run))
}

/// Progress callback: `(step, losses)`.
pub type Observer<'a> = dyn FnMut(u64, &LossReport) + 'a;

/// Trains to the end of the schedule, appending to `loss.csv` and writing
/// checkpoints under the run's output directory.
pub fn run_training(trainer: &mut Trainer, corpus: &[FrameTriplet], observe: &mut Observer) -> Result<PathBuf> {
    let out = trainer.run.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| Error::io(out.display(), e))?;
    let csv_path = out.join(LOSS_FILE);
    let ck_path = out.join(CHECKPOINT_FILE);
    let mut rows = vec![CSV_HEADER.to_string()];
    if trainer.step > 0 {
        if let Ok(text) = std::fs::read_to_string(&csv_path) {
            rows.extend(text.lines().skip(1).filter(|l| {
                l.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s < trainer.step)
            }).map(str::to_string));
        }
    }
    let mut csv = std::fs::File::create(&csv_path).map_err(|e| Error::io(csv_path.display(), e))?;
    for r in &rows {
        writeln!(csv, "{r}").map_err(|e| Error::io(csv_path.display(), e))?;
    }
    while !trainer.is_done() {
        let step = trainer.step;
        let report = trainer.train_step(corpus)?;
        writeln!(csv, "{}", report.csv_row(step)).map_err(|e| Error::io(csv_path.display(), e))?;
        observe(step, &report);
        let every = trainer.run.checkpoint_every;
        if every > 0 && trainer.step.is_multiple_of(every) {
            trainer.checkpoint().save(&ck_path)?;
        }
    }
    trainer.checkpoint().save(&ck_path)?;
    Ok(ck_path)
}

/// Mean metrics of the model and the overlay baseline for one motion level.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LevelReport {
    pub count: usize,
    pub model: Metrics,
    pub overlay: Metrics,
    pub epe: f64,
}

/// Evaluation broken down by motion level, plus the overall mean.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub levels: BTreeMap<MotionLevel, LevelReport>,
    pub overall: LevelReport,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("level,count,psnr,ssim,ie,epe,overlay_psnr,overlay_ssim,overlay_ie\n");
        let rows = self
            .levels
            .iter()
            .map(|(l, r)| (l.name(), r))
            .chain(std::iter::once(("all", &self.overall)));
        for (name, r) in rows {
            s.push_str(&format!(
                "{name},{},{:.4},{:.5},{:.4},{:.4},{:.4},{:.5},{:.4}\n",
                r.count, r.model.psnr, r.model.ssim, r.model.ie, r.epe, r.overlay.psnr, r.overlay.ssim, r.overlay.ie
            ));
        }
        s
    }
}

/// Predictions for a list of triplets: frames and the flow to frame 0.
pub fn predict(
    model: &Model,
    store: &ParamStore<f32>,
    items: &[FrameTriplet],
    batch: usize,
) -> Result<Vec<(Tensor<f32>, FlowField<f32>, FlowField<f32>)>> {
    let mut out = Vec::with_capacity(items.len());
    for chunk in items.chunks(batch.max(1)) {
        let b = Batch::from_triplets(chunk)?;
        let mut g = Graph::inference();
        let (i0, i1) = (g.constant(b.i0), g.constant(b.i1));
        let fo = model.forward(&mut g, store, i0, i1)?;
        let clamped = g.clamp(fo.frame, 0.0, 1.0);
        let frames = g.tensor(clamped);
        let f0 = g.tensor(fo.flows.0);
        let f1 = g.tensor(fo.flows.1);
        let (h, w) = (frames.shape()[2], frames.shape()[3]);
        for k in 0..chunk.len() {
            let slice = |t: &Tensor<f32>, c: usize| -> Result<Tensor<f32>> {
                let n = c * h * w;
                Tensor::new(vec![c, h, w], t.data()[k * n..(k + 1) * n].to_vec())
            };
            let flow = |t: &Tensor<f32>| -> Result<FlowField<f32>> { FlowField::new(slice(t, 2)?.reshape(vec![1, 2, h, w])?) };
            out.push((slice(&frames, 3)?, flow(&f0)?, flow(&f1)?));
        }
    }
    Ok(out)
}

/// Scores a model (or, with `model = None`, ground truth against itself).
pub fn evaluate(model: Option<(&Model, &ParamStore<f32>)>, corpus: &[FrameTriplet]) -> Result<EvalReport> {
    if corpus.is_empty() {
        return Err(Error::Input("evaluation corpus is empty".into()));
    }
    let preds = match model {
        Some((m, s)) => predict(m, s, corpus, 8)?,
        None => corpus.iter().map(|t| (t.it.clone(), t.flow_t0.clone(), t.flow_t1.clone())).collect(),
    };
    let mut per: BTreeMap<MotionLevel, Vec<(Metrics, Metrics, f64)>> = BTreeMap::new();
    for (t, (frame, f0, f1)) in corpus.iter().zip(&preds) {
        let m = Metrics::compute(frame, &t.it)?;
        let o = Metrics::compute(&overlay(&t.i0, &t.i1)?, &t.it)?;
        let e = 0.5 * (epe(f0, &t.flow_t0)? + epe(f1, &t.flow_t1)?);
        per.entry(t.level).or_default().push((m, o, e));
    }
    let summarize = |rows: &[(Metrics, Metrics, f64)]| LevelReport {
        count: rows.len(),
        model: Metrics::mean(&rows.iter().map(|r| r.0).collect::<Vec<_>>()),
        overlay: Metrics::mean(&rows.iter().map(|r| r.1).collect::<Vec<_>>()),
        epe: rows.iter().map(|r| r.2).sum::<f64>() / rows.len().max(1) as f64,
    };
    let all: Vec<_> = per.values().flatten().copied().collect();
    Ok(EvalReport {
        levels: per.iter().map(|(&l, rows)| (l, summarize(rows))).collect(),
        overall: summarize(&all),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synth::{corpus_plan, gen_triplet};

    fn tiny_run(dir: &Path) -> RunConfig {
        let mut model = ModelConfig::toy();
        model.crop = 16;
        model.batch = 2;
        model.batch_flow = 2;
        let mut run = RunConfig::new(model);
        run.out_dir = dir.to_path_buf();
        run.steps_flow = 2;
        run.steps_joint = 2;
        run.checkpoint_every = 2;
        run
    }

    fn corpus() -> Vec<FrameTriplet> {
        corpus_plan(1, 4).into_iter().map(|(s, l)| gen_triplet(s, l, 32).unwrap()).collect()
    }

    #[test]
    fn resume_reproduces_the_next_loss() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus();
        let mut a = Trainer::new(tiny_run(dir.path())).unwrap();
        let mut losses = Vec::new();
        for _ in 0..4 {
            losses.push(a.train_step(&data).unwrap());
        }
        for k in [1u64, 2, 3] {
            let mut b = Trainer::new(tiny_run(dir.path())).unwrap();
            for _ in 0..k {
                b.train_step(&data).unwrap();
            }
            let ck = Checkpoint::from_bytes(&b.checkpoint().to_bytes()).unwrap();
            let mut c = Trainer::resume(tiny_run(dir.path()), &ck).unwrap();
            assert_eq!(c.train_step(&data).unwrap(), losses[k as usize], "resumed at {k}");
        }
    }

    #[test]
    fn resume_refuses_a_different_config() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny_run(dir.path())).unwrap();
        let ck = t.checkpoint();
        let mut other = tiny_run(dir.path());
        other.model.lr = 0.5;
        let err = Trainer::resume(other, &ck).err().unwrap();
        assert_eq!(err.category(), "config");
        assert!(err.to_string().contains("model.lr"), "{err}");
    }

    #[test]
    fn flow_phase_leaves_synthesis_untouched() {
        let dir = tempfile::tempdir().unwrap();
        let data = corpus();
        let mut t = Trainer::new(tiny_run(dir.path())).unwrap();
        let head = t.store.tensor(t.model.head.weight);
        let enc = t.store.tensor(t.model.encoder.blocks[0][0].weight);
        t.train_step(&data).unwrap();
        assert_eq!(t.phase(), Phase::Flow);
        assert_eq!(t.store.tensor(t.model.head.weight), head);
        assert_ne!(t.store.tensor(t.model.encoder.blocks[0][0].weight), enc);
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let data = corpus();
        let r = evaluate(None, &data).unwrap();
        assert_eq!(r.overall.model.psnr, 99.0);
        assert_eq!(r.overall.model.ie, 0.0);
        assert!((r.overall.model.ssim - 1.0).abs() < 1e-12);
        assert_eq!(r.overall.epe, 0.0);
        assert_eq!(r.levels.len(), 4);
    }

    #[test]
    fn augmentation_keeps_batches_well_formed() {
        let t = gen_triplet(2, MotionLevel::Hard, 32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..8 {
            let a = augment(&t, 16, &mut rng).unwrap();
            assert_eq!(a.i0.shape(), &[3, 16, 16]);
            assert_eq!(a.flow_t0.tensor().shape(), &[1, 2, 16, 16]);
        }
        let b = Batch::from_triplets(&[t.clone(), t.time_reversed()]).unwrap();
        assert_eq!(b.flow_t0.shape(), &[2, 2, 32, 32]);
        assert_eq!(&b.flow_t0.data()[2 * 1024..], t.flow_t1.tensor().data());
    }
}
