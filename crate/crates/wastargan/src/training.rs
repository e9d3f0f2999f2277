//! Training: segment sampling, the alternating discriminator / generator +
//! encoder least-squares GAN step, structured loss logging, checkpointing,
//! and bit-exact resume.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_features, Manifest};
use crate::error::{Error, Result};
use crate::losses::{LossReport, LossWeights};
use crate::models::checkpoint::{load_checkpoint, save_checkpoint};
use crate::models::{Discriminator, Generator, ModelConfig, SpeakerEncoder};
use crate::nn::{Adam, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub segment_frames: usize,
    pub g_lr: f64,
    pub d_lr: f64,
    pub e_lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub total_iterations: u64,
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub seed: u64,
    pub weights: LossWeights,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 8,
            segment_frames: 256,
            g_lr: 2e-4,
            d_lr: 1e-4,
            e_lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            total_iterations: 250_000,
            checkpoint_every: 10_000,
            d_steps: 1,
            seed: 0,
            weights: LossWeights::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.batch_size == 0 || self.segment_frames == 0 || self.d_steps == 0 {
            return Err(Error::Config("batch, segment, d_steps must be positive".into()));
        }
        if self.g_lr < 0.0 || self.d_lr < 0.0 || self.e_lr < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if self.segment_frames % model.generator.temporal_downsample() != 0 {
            return Err(Error::Config(format!(
                "segment_frames {} not divisible by the generator downsampling {}",
                self.segment_frames,
                model.generator.temporal_downsample()
            )));
        }
        self.weights.validate()
    }
}

/// One sampled batch: source segments with their speakers, independently
/// drawn target segments with theirs (the pair may coincide).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub x_s: Array4<f64>,
    pub s_x: Vec<usize>,
    pub x_t: Array4<f64>,
    pub s_y: Vec<usize>,
}

/// Training features resident in memory, one `[D, T]` matrix per utterance.
pub struct FeatureSet {
    features: Vec<Array2<f64>>,
    speakers: Vec<usize>,
    utt_ids: Vec<String>,
    n_speakers: usize,
}

impl FeatureSet {
    /// Loads every training-split utterance of the manifest.
    pub fn load(manifest: &Manifest) -> Result<Self> {
        let mut features = Vec::new();
        let mut speakers = Vec::new();
        let mut utt_ids = Vec::new();
        for r in manifest.train_records() {
            let path = r
                .feature_cache_path
                .as_ref()
                .ok_or_else(|| Error::MissingFeatures(r.utt_id.clone()))?;
            let cached = load_features(path)
                .map_err(|e| Error::Manifest(format!("{}: {e}", r.utt_id)))?;
            // Stored [T, D]; the networks use [D, T].
            features.push(cached.mcep.coeffs.t().as_standard_layout().to_owned());
            speakers.push(r.speaker_index);
            utt_ids.push(r.utt_id.clone());
        }
        if features.is_empty() {
            return Err(Error::Manifest("no training utterances with features".into()));
        }
        Ok(FeatureSet {
            features,
            speakers,
            utt_ids,
            n_speakers: manifest.n_speakers(),
        })
    }

    pub fn from_arrays(features: Vec<(usize, Array2<f64>)>, n_speakers: usize) -> Self {
        let speakers: Vec<usize> = features.iter().map(|(s, _)| *s).collect();
        let utt_ids = (0..features.len()).map(|i| format!("mem/{i}")).collect();
        FeatureSet {
            features: features.into_iter().map(|(_, f)| f).collect(),
            speakers,
            utt_ids,
            n_speakers,
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.n_speakers
    }

    pub fn feature_dim(&self) -> usize {
        self.features[0].nrows()
    }

    pub fn utt_id(&self, i: usize) -> &str {
        &self.utt_ids[i]
    }

    pub fn speaker_of(&self, i: usize) -> usize {
        self.speakers[i]
    }

    pub fn feature(&self, i: usize) -> &Array2<f64> {
        &self.features[i]
    }

    /// Public crop used by classifier training as well.
    pub fn crop_segment(&self, index: usize, frames: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        self.crop(index, frames, rng)
    }

    /// Random contiguous crop of `frames`; shorter utterances wrap around.
    fn crop(&self, index: usize, frames: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
        let f = &self.features[index];
        let t_len = f.ncols();
        let d = f.nrows();
        let mut out = Array2::<f64>::zeros((d, frames));
        if t_len >= frames {
            let start = rng.gen_range(0..=t_len - frames);
            out.assign(&f.slice(ndarray::s![.., start..start + frames]));
        } else {
            let start = rng.gen_range(0..t_len);
            for j in 0..frames {
                let src = (start + j) % t_len;
                out.column_mut(j).assign(&f.column(src));
            }
        }
        out
    }

    fn draw(&self, cfg: &TrainingConfig, rng: &mut ChaCha8Rng) -> (Array3<f64>, Vec<usize>) {
        let b = cfg.batch_size;
        let d = self.feature_dim();
        let mut x = Array3::<f64>::zeros((b, d, cfg.segment_frames));
        let mut s = Vec::with_capacity(b);
        for bi in 0..b {
            let idx = rng.gen_range(0..self.features.len());
            let crop = self.crop(idx, cfg.segment_frames, rng);
            x.index_axis_mut(Axis(0), bi).assign(&crop);
            s.push(self.speakers[idx]);
        }
        (x, s)
    }
}

/// Uniformly samples source and target utterances with random crops;
/// deterministic given the RNG state.
pub fn sample_batch(
    set: &FeatureSet,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch> {
    if set.is_empty() {
        return Err(Error::Manifest("empty feature set".into()));
    }
    let (xs3, s_x) = set.draw(cfg, rng);
    let (xt3, s_y) = set.draw(cfg, rng);
    let (b, d, t) = xs3.dim();
    Ok(TrainBatch {
        x_s: xs3.into_shape_with_order((b, 1, d, t)).unwrap(),
        s_x,
        x_t: xt3.into_shape_with_order((b, 1, d, t)).unwrap(),
        s_y,
    })
}

pub struct Trainer {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: SpeakerEncoder,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub opt_e: Adam,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub model_config: ModelConfig,
    pub speaker_table: Vec<String>,
    pub cfg: TrainingConfig,
}

fn as_encoder_input(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.value(x).shape().to_vec();
    tape.reshape(x, &[shape[0], shape[2], shape[3]])
}

impl Trainer {
    pub fn new(
        model_config: ModelConfig,
        cfg: TrainingConfig,
        speaker_table: Vec<String>,
    ) -> Result<Self> {
        cfg.validate(&model_config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let generator = Generator::new(model_config.generator.clone(), &mut rng)?;
        let discriminator = Discriminator::new(model_config.discriminator.clone(), &mut rng)?;
        let encoder = SpeakerEncoder::new(model_config.encoder.clone(), &mut rng)?;
        let opt_g = Adam::new(generator.params(), cfg.g_lr, cfg.adam_beta1, cfg.adam_beta2);
        let opt_d = Adam::new(discriminator.params(), cfg.d_lr, cfg.adam_beta1, cfg.adam_beta2);
        let opt_e = Adam::new(encoder.params(), cfg.e_lr, cfg.adam_beta1, cfg.adam_beta2);
        Ok(Trainer {
            generator,
            discriminator,
            encoder,
            opt_g,
            opt_d,
            opt_e,
            rng,
            iteration: 0,
            model_config,
            speaker_table,
            cfg,
        })
    }

    pub fn from_checkpoint(
        path: &Path,
        expected: Option<&ModelConfig>,
        cfg: TrainingConfig,
    ) -> Result<Self> {
        let ck = load_checkpoint(path, expected)?;
        cfg.validate(&ck.model_config)?;
        Ok(Trainer {
            generator: ck.generator,
            discriminator: ck.discriminator,
            encoder: ck.encoder,
            opt_g: ck.opt_g,
            opt_d: ck.opt_d,
            opt_e: ck.opt_e,
            rng: ck.rng,
            iteration: ck.iteration,
            model_config: ck.model_config,
            speaker_table: ck.speaker_table,
            cfg,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(
            path,
            self.iteration,
            &self.model_config,
            &self.speaker_table,
            &self.rng,
            &self.generator,
            &self.discriminator,
            &self.encoder,
            &self.opt_g,
            &self.opt_d,
            &self.opt_e,
        )
    }

    /// One optimization iteration: `d_steps` discriminator updates on the
    /// least-squares loss with the generator output detached, then one joint
    /// generator + encoder update on the adversarial, cycle, speaker-embedding
    /// (and optionally identity) terms.
    pub fn step(&mut self, batch: &TrainBatch) -> Result<LossReport> {
        let started = Instant::now();
        let finite = |component: &'static str, v: f64, it: u64| -> Result<f64> {
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFiniteLoss {
                    component,
                    iteration: it,
                })
            }
        };
        let it = self.iteration;
        let w = self.cfg.weights;

        // Discriminator phase.
        let mut d_adv = 0.0;
        for _ in 0..self.cfg.d_steps {
            let mut tape = Tape::new();
            let x_t = tape.leaf(batch.x_t.clone().into_dyn());
            let x_s = tape.leaf(batch.x_s.clone().into_dyn());
            let x_t_enc = as_encoder_input(&mut tape, x_t);
            let e_t = self.encoder.forward(&mut tape, x_t_enc, Some(&batch.s_y))?;
            let fake = self.generator.forward(&mut tape, x_s, e_t)?;
            let fake = tape.detach(fake);

            let d_real = self.discriminator.forward(&mut tape, x_s, &batch.s_x)?;
            let d_fake = self.discriminator.forward(&mut tape, fake, &batch.s_y)?;
            let loss_real = tape.mse_pull(d_real, 1.0);
            let loss_fake = tape.mse_pull(d_fake, 0.0);
            let loss_d = tape.add(loss_real, loss_fake);
            d_adv = finite("d_adv", tape.scalar(loss_d), it)?;

            let grads = tape.backward(loss_d);
            let d_grads = grads.for_store(self.discriminator.params());
            self.opt_d.step(self.discriminator.params_mut(), &d_grads);
        }

        // Generator + encoder phase.
        let mut tape = Tape::new();
        let x_s = tape.leaf(batch.x_s.clone().into_dyn());
        let x_t = tape.leaf(batch.x_t.clone().into_dyn());
        let x_t_enc = as_encoder_input(&mut tape, x_t);
        let e_t = self.encoder.forward(&mut tape, x_t_enc, Some(&batch.s_y))?;
        let y = self.generator.forward(&mut tape, x_s, e_t)?;

        let d_fake = self.discriminator.forward(&mut tape, y, &batch.s_y)?;
        let g_adv_var = tape.mse_pull(d_fake, 1.0);
        let g_adv = finite("g_adv", tape.scalar(g_adv_var), it)?;
        let mut total = g_adv_var;

        let x_s_enc = as_encoder_input(&mut tape, x_s);
        let e_s = self.encoder.forward(&mut tape, x_s_enc, Some(&batch.s_x))?;

        let mut cyc = 0.0;
        if w.lambda_cyc > 0.0 {
            let x_cyc = self.generator.forward(&mut tape, y, e_s)?;
            let cyc_var = tape.l1_loss(x_s, x_cyc);
            cyc = finite("cyc", tape.scalar(cyc_var), it)?;
            let weighted = tape.scale(cyc_var, w.lambda_cyc);
            total = tape.add(total, weighted);
        }

        let mut spk_rec = 0.0;
        if w.lambda_spk > 0.0 {
            let y_enc = as_encoder_input(&mut tape, y);
            let e_y = self.encoder.forward(&mut tape, y_enc, Some(&batch.s_y))?;
            let spk_var = tape.l1_loss(e_t, e_y);
            spk_rec = finite("spk_rec", tape.scalar(spk_var), it)?;
            let weighted = tape.scale(spk_var, w.lambda_spk);
            total = tape.add(total, weighted);
        }

        let mut id_loss = None;
        if w.use_identity && w.lambda_id > 0.0 {
            let g_xx = self.generator.forward(&mut tape, x_s, e_s)?;
            let id_var = tape.l1_loss(x_s, g_xx);
            let id_val = finite("id", tape.scalar(id_var), it)?;
            id_loss = Some(id_val);
            let weighted = tape.scale(id_var, w.lambda_id);
            total = tape.add(total, weighted);
        }

        let weighted_total_g = finite("weighted_total_g", tape.scalar(total), it)?;
        let grads = tape.backward(total);
        let g_grads = grads.for_store(self.generator.params());
        self.opt_g.step(self.generator.params_mut(), &g_grads);
        let e_grads = grads.for_store(self.encoder.params());
        self.opt_e.step(self.encoder.params_mut(), &e_grads);

        self.iteration += 1;
        Ok(LossReport {
            iteration: self.iteration,
            g_adv,
            d_adv,
            cyc,
            spk_rec,
            id: id_loss,
            domain: None,
            weighted_total_g,
            weighted_total_d: d_adv,
            g_lr: self.opt_g.lr,
            d_lr: self.opt_d.lr,
            e_lr: self.opt_e.lr,
            wall_clock_ms: started.elapsed().as_secs_f64() * 1000.0,
        })
    }
}

fn checkpoint_path(out_dir: &Path, iteration: u64) -> PathBuf {
    out_dir.join(format!("checkpoint_{iteration:08}.vca"))
}

/// Runs (or resumes) training over a manifest, writing checkpoints and a
/// line-delimited loss log under `out_dir`. Returns the final checkpoint
/// path.
pub fn train(
    manifest: &Manifest,
    model_config: &ModelConfig,
    cfg: &TrainingConfig,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    if model_config.discriminator.n_speakers != manifest.n_speakers()
        || model_config.encoder.n_speakers != manifest.n_speakers()
    {
        return Err(Error::Config(format!(
            "model built for {} speakers but manifest has {}",
            model_config.discriminator.n_speakers,
            manifest.n_speakers()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let set = FeatureSet::load(manifest)?;
    if set.feature_dim() != model_config.generator.feature_dim() {
        return Err(Error::Config(format!(
            "feature dim {} vs generator {}",
            set.feature_dim(),
            model_config.generator.feature_dim()
        )));
    }

    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(path, Some(model_config), cfg.clone())?,
        None => Trainer::new(
            model_config.clone(),
            cfg.clone(),
            manifest.speaker_table.clone(),
        )?,
    };

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    if trainer.iteration == 0 {
        trainer.save(&checkpoint_path(out_dir, 0))?;
    }
    let mut last = checkpoint_path(out_dir, trainer.iteration.min(cfg.total_iterations));
    if resume.is_some() && !last.exists() {
        trainer.save(&last)?;
    }

    while trainer.iteration < cfg.total_iterations {
        let batch = sample_batch(&set, cfg, &mut trainer.rng)?;
        let report = trainer.step(&batch)?;
        let mut line = serde_json::to_string(&report)?;
        line.push('\n');
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        log.flush().map_err(|e| Error::io(&log_path, e))?;

        if trainer.iteration % cfg.checkpoint_every == 0
            || trainer.iteration == cfg.total_iterations
        {
            last = checkpoint_path(out_dir, trainer.iteration);
            trainer.save(&last)?;
        }
    }
    if !last.exists() {
        trainer.save(&last)?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Provenance, ProvenanceOp, Split, UtteranceRecord};
    use crate::models::{DiscriminatorConfig, EncoderConfig, GeneratorConfig};
    use ndarray::Array1;
    use std::collections::BTreeMap;

    fn tiny_model(n_speakers: usize) -> ModelConfig {
        ModelConfig {
            generator: GeneratorConfig {
                mcep_order: 7,
                base_channels: 4,
                n_bottleneck_blocks: 1,
                embedding_dim: 6,
                bottleneck_kernel: 3,
            },
            discriminator: DiscriminatorConfig {
                base_channels: 4,
                n_speakers,
            },
            encoder: EncoderConfig {
                in_dim: 8,
                channels: 8,
                embedding_dim: 6,
                n_speakers,
                kernel: 1,
            },
        }
    }

    fn tiny_cfg() -> TrainingConfig {
        TrainingConfig {
            batch_size: 2,
            segment_frames: 16,
            total_iterations: 4,
            checkpoint_every: 2,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    fn toy_set(rng: &mut ChaCha8Rng) -> FeatureSet {
        let mut feats = Vec::new();
        for s in 0..2usize {
            for _ in 0..3 {
                let f = Array2::from_shape_simple_fn((8, 40), || {
                    rng.gen::<f64>() - 0.5 + s as f64
                });
                feats.push((s, f));
            }
        }
        FeatureSet::from_arrays(feats, 2)
    }

    /// Manifest whose feature caches are synthetic containers on disk.
    fn fake_cached_manifest(
        dir: &Path,
        n_speakers: usize,
        per_speaker: usize,
        frames: usize,
        feat_dim: usize,
        seed: u64,
    ) -> Manifest {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table: Vec<String> = (0..n_speakers).map(|s| format!("spk{s}")).collect();
        let mut records = Vec::new();
        for (idx, label) in table.iter().enumerate() {
            for u in 0..per_speaker {
                let utt_id = format!("{label}/utt{u}");
                let path = dir.join(format!("{label}__utt{u}.vca"));
                let mcep = Array2::from_shape_simple_fn((frames, feat_dim), || {
                    (rng.gen::<f64>() - 0.5 + idx as f64 * 0.8) as f32
                });
                let f0 = Array1::from_elem(frames, 120.0 + 40.0 * idx as f64);
                let ap = Array2::from_elem((frames, 5), 0.5f32);
                let mut c = crate::container::Container::new(serde_json::json!({
                    "frame_period_ms": 5.0, "sample_rate": 22050, "content_hash": "x",
                }));
                c.insert_f32("mcep", mcep.into_dyn());
                c.insert_f64("f0", f0.into_dyn());
                c.insert_f32("ap", ap.into_dyn());
                c.write(&path).unwrap();
                records.push(UtteranceRecord {
                    utt_id,
                    speaker_label: label.clone(),
                    speaker_index: idx,
                    audio_path: PathBuf::from("/unused.wav"),
                    split: Split::Train,
                    n_frames: Some(frames),
                    feature_cache_path: Some(path),
                });
            }
        }
        Manifest {
            records,
            speaker_table: table,
            provenance: Provenance {
                audio_root: PathBuf::from("/unused"),
                ops: vec![ProvenanceOp::Build],
            },
            f0_stats: BTreeMap::new(),
            skipped: Vec::new(),
        }
    }

    #[test]
    fn exact_length_crop_is_the_whole_utterance() {
        let f = Array2::from_shape_fn((4, 16), |(i, j)| (i * 16 + j) as f64);
        let set = FeatureSet::from_arrays(vec![(0, f.clone())], 1);
        let cfg = TrainingConfig {
            batch_size: 1,
            segment_frames: 16,
            ..TrainingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&set, &cfg, &mut rng).unwrap();
        let got = batch.x_s.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
        assert_eq!(got, f);
    }

    #[test]
    fn short_utterances_wrap_pad() {
        let f = Array2::from_shape_fn((2, 5), |(_, j)| j as f64);
        let set = FeatureSet::from_arrays(vec![(0, f)], 1);
        let cfg = TrainingConfig {
            batch_size: 1,
            segment_frames: 12,
            ..TrainingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&set, &cfg, &mut rng).unwrap();
        let row = batch.x_s.index_axis(Axis(0), 0);
        // Consecutive columns differ by 1 modulo the utterance length 5.
        for j in 0..11 {
            let a = row[[0, 0, j]];
            let b = row[[0, 0, j + 1]];
            let expected = (a + 1.0) % 5.0;
            assert_eq!(b, expected, "column {j}");
        }
    }

    #[test]
    fn same_rng_state_gives_identical_batches() {
        let mut rng0 = ChaCha8Rng::seed_from_u64(77);
        let set = toy_set(&mut rng0);
        let cfg = tiny_cfg();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let b1 = sample_batch(&set, &cfg, &mut r1).unwrap();
        let b2 = sample_batch(&set, &cfg, &mut r2).unwrap();
        assert_eq!(b1.x_s, b2.x_s);
        assert_eq!(b1.x_t, b2.x_t);
        assert_eq!(b1.s_x, b2.s_x);
        assert_eq!(b1.s_y, b2.s_y);
    }

    #[test]
    fn utterance_sampling_is_uniform() {
        // 10k draws over 3 utterances: each count within 3 sigma of n/3.
        let feats: Vec<(usize, Array2<f64>)> = (0..3)
            .map(|i| (0usize, Array2::from_elem((2, 8), i as f64)))
            .collect();
        let set = FeatureSet::from_arrays(feats, 1);
        let cfg = TrainingConfig {
            batch_size: 1,
            segment_frames: 8,
            ..TrainingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            let b = sample_batch(&set, &cfg, &mut rng).unwrap();
            let tag = b.x_s[[0, 0, 0, 0]] as usize;
            counts[tag] += 1;
        }
        let expected = 10_000.0 / 3.0;
        let sigma = (10_000.0f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            assert!(
                (c as f64 - expected).abs() < 3.0 * sigma,
                "utterance {i} drawn {c} times"
            );
        }
    }

    #[test]
    fn one_step_updates_every_parameter_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(200);
        let set = toy_set(&mut rng);
        let cfg = tiny_cfg();
        let mut trainer = Trainer::new(tiny_model(2), cfg.clone(), vec!["a".into(), "b".into()])
            .unwrap();
        let before: Vec<(String, ndarray::ArrayD<f64>)> = trainer
            .generator
            .params()
            .iter()
            .chain(trainer.discriminator.params().iter())
            .chain(trainer.encoder.params().iter())
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();

        let mut srng = ChaCha8Rng::seed_from_u64(3);
        let mut batch = sample_batch(&set, &cfg, &mut srng).unwrap();
        batch.s_x = vec![0, 1];
        batch.s_y = vec![1, 0];
        let report = trainer.step(&batch).unwrap();
        assert!(report.weighted_total_g.is_finite());

        let after: Vec<(String, ndarray::ArrayD<f64>)> = trainer
            .generator
            .params()
            .iter()
            .chain(trainer.discriminator.params().iter())
            .chain(trainer.encoder.params().iter())
            .map(|(n, v)| (n.to_string(), v.clone()))
            .collect();
        for ((name, b), (_, a)) in before.iter().zip(after.iter()) {
            assert_ne!(b, a, "parameter {name} never moved");
        }
    }

    #[test]
    fn gating_disables_terms_and_zero_lr_freezes_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        let set = toy_set(&mut rng);
        let mut cfg = tiny_cfg();
        cfg.weights.lambda_cyc = 0.0;
        cfg.weights.lambda_spk = 0.0;
        cfg.d_lr = 0.0;
        let mut trainer =
            Trainer::new(tiny_model(2), cfg.clone(), vec!["a".into(), "b".into()]).unwrap();
        let d_before: Vec<ndarray::ArrayD<f64>> = trainer
            .discriminator
            .params()
            .iter()
            .map(|(_, v)| v.clone())
            .collect();
        let mut srng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_batch(&set, &cfg, &mut srng).unwrap();
        let report = trainer.step(&batch).unwrap();
        assert_eq!(report.cyc, 0.0);
        assert_eq!(report.spk_rec, 0.0);
        assert!(report.id.is_none());
        assert!((report.weighted_total_g - report.g_adv).abs() < 1e-15);
        for ((_, after), before) in trainer.discriminator.params().iter().zip(&d_before) {
            assert_eq!(after, before, "discriminator moved with zero lr");
        }
    }

    #[test]
    fn seeded_steps_are_bit_reproducible() {
        let run = || -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(300);
            let set = toy_set(&mut rng);
            let cfg = tiny_cfg();
            let mut trainer =
                Trainer::new(tiny_model(2), cfg.clone(), vec!["a".into(), "b".into()]).unwrap();
            let mut out = Vec::new();
            for _ in 0..3 {
                let batch = sample_batch(&set, &cfg, &mut trainer.rng).unwrap();
                let r = trainer.step(&batch).unwrap();
                out.push(r.weighted_total_g);
                out.push(r.d_adv);
            }
            out
        };
        let a = run();
        let b = run();
        assert_eq!(a, b, "loss trajectories differ between identical runs");
    }

    #[test]
    fn zero_iterations_writes_initial_checkpoint_only() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fake_cached_manifest(dir.path(), 2, 2, 24, 8, 7);
        let cfg = TrainingConfig {
            total_iterations: 0,
            ..tiny_cfg()
        };
        let out = dir.path().join("run");
        let final_ck = train(&manifest, &tiny_model(2), &cfg, &out, None).unwrap();
        assert!(final_ck.ends_with("checkpoint_00000000.vca"));
        let n_ck = std::fs::read_dir(&out)
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .path()
                    .extension()
                    .map(|x| x == "vca")
                    .unwrap_or(false)
            })
            .count();
        assert_eq!(n_ck, 1);
    }

    #[test]
    fn split_run_equals_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = fake_cached_manifest(dir.path(), 2, 2, 24, 8, 8);
        let model = tiny_model(2);

        let full_cfg = TrainingConfig {
            total_iterations: 8,
            checkpoint_every: 4,
            ..tiny_cfg()
        };
        let out_a = dir.path().join("a");
        let ck_a = train(&manifest, &model, &full_cfg, &out_a, None).unwrap();

        let half_cfg = TrainingConfig {
            total_iterations: 4,
            ..full_cfg.clone()
        };
        let out_b = dir.path().join("b");
        let ck_b_half = train(&manifest, &model, &half_cfg, &out_b, None).unwrap();
        let ck_b = train(&manifest, &model, &full_cfg, &out_b, Some(&ck_b_half)).unwrap();

        let a = crate::models::checkpoint::load_checkpoint(&ck_a, None).unwrap();
        let b = crate::models::checkpoint::load_checkpoint(&ck_b, None).unwrap();
        assert_eq!(a.iteration, 8);
        assert_eq!(b.iteration, 8);
        for ((n1, v1), (_, v2)) in a
            .generator
            .params()
            .iter()
            .chain(a.discriminator.params().iter())
            .chain(a.encoder.params().iter())
            .zip(
                b.generator
                    .params()
                    .iter()
                    .chain(b.discriminator.params().iter())
                    .chain(b.encoder.params().iter()),
            )
        {
            assert_eq!(v1, v2, "parameter {n1} differs after split run");
        }

        // Log completeness: one record per iteration.
        let log_a = std::fs::read_to_string(out_a.join("train_log.jsonl")).unwrap();
        assert_eq!(log_a.lines().count(), 8);
        let log_b = std::fs::read_to_string(out_b.join("train_log.jsonl")).unwrap();
        assert_eq!(log_b.lines().count(), 8);
    }
}
