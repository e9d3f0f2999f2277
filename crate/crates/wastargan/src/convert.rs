//! End-to-end conversion: cached source features through the generator under
//! a target-speaker embedding, log-F0 transform with the stored per-speaker
//! statistics, envelope decoding, vocoder synthesis, and loudness
//! normalization.

use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::audio::vocoder::{LiteVocoder, Vocoder};
use crate::audio::{
    f0::transform_logf0, loudness, mcep as mcep_mod, wav, FeatureConfig, McepSegment,
    VocoderAnalysis, Waveform,
};
use crate::container::Container;
use crate::data::{load_features, Manifest, UtteranceRecord};
use crate::error::{Error, Result};
use crate::models::{Generator, SpeakerEncoder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConvertOptions {
    pub target_lufs: f64,
    /// Carry the source energy coefficient (c0) through unchanged.
    pub preserve_energy: bool,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        ConvertOptions {
            target_lufs: loudness::TARGET_LUFS,
            preserve_energy: true,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConversionRecord {
    pub conv_id: String,
    pub source_utt: String,
    pub source_speaker: String,
    pub target_speaker: String,
    pub target_index: usize,
    pub feature_path: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wav_path: Option<PathBuf>,
}

/// Line-delimited manifest of conversions, consumed by evaluation.
#[derive(Debug, Clone, Default)]
pub struct ConversionManifest {
    pub records: Vec<ConversionRecord>,
}

impl ConversionManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            for r in &self.records {
                let mut line = serde_json::to_string(r)?;
                line.push('\n');
                f.write_all(line.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
            }
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(ConversionManifest { records })
    }
}

/// Pads `[D, T]` features along time with repeated edge frames, split evenly,
/// so `T` becomes a multiple of `factor`. Returns the padded array and the
/// left padding amount.
pub fn pad_to_multiple(features: &Array2<f64>, factor: usize) -> (Array2<f64>, usize) {
    let (d, t) = features.dim();
    let rem = t % factor;
    if rem == 0 {
        return (features.clone(), 0);
    }
    let total = factor - rem;
    let left = total / 2;
    let right = total - left;
    let mut out = Array2::<f64>::zeros((d, t + total));
    for j in 0..left {
        out.column_mut(j).assign(&features.column(0));
    }
    out.slice_mut(ndarray::s![.., left..left + t]).assign(features);
    for j in 0..right {
        out.column_mut(left + t + j).assign(&features.column(t - 1));
    }
    (out, left)
}

/// Runs the generator over full-length features `[T, D]` (frames x coeffs),
/// handling the length constraint by symmetric edge-padding and trimming.
pub fn convert_features(
    generator: &Generator,
    features: &McepSegment,
    embedding: &Array2<f64>,
) -> Result<McepSegment> {
    let dt = features.coeffs.t().as_standard_layout().to_owned(); // [D, T]
    let factor = generator.config.temporal_downsample();
    let (padded, left) = pad_to_multiple(&dt, factor);
    let (d, tp) = padded.dim();
    let x = padded.into_shape_with_order((1, 1, d, tp)).unwrap();
    let y: Array4<f64> = generator.infer(&x, embedding)?;
    let y2 = y.index_axis(Axis(0), 0).index_axis(Axis(0), 0).to_owned();
    let t = features.n_frames();
    let trimmed = y2.slice(ndarray::s![.., left..left + t]).to_owned();
    McepSegment::new(trimmed.t().to_owned())
}

/// Longest training utterance of a speaker: the default embedding reference.
pub fn default_reference<'m>(manifest: &'m Manifest, speaker: &str) -> Result<&'m UtteranceRecord> {
    manifest
        .train_records()
        .filter(|r| r.speaker_label == speaker)
        .max_by_key(|r| r.n_frames.unwrap_or(0))
        .ok_or_else(|| Error::UnknownSpeaker(speaker.to_string()))
}

pub struct ConversionOutput {
    pub mcep: McepSegment,
    pub waveform: Waveform,
    pub gain: f64,
}

/// Full conversion of one utterance. `manifest` supplies speaker table and
/// per-speaker F0 statistics; `reference` supplies the target embedding.
#[allow(clippy::too_many_arguments)]
pub fn convert_utterance(
    generator: &Generator,
    encoder: &SpeakerEncoder,
    manifest: &Manifest,
    source: &UtteranceRecord,
    target_speaker: &str,
    reference: &UtteranceRecord,
    feature_cfg: &FeatureConfig,
    opts: &ConvertOptions,
) -> Result<ConversionOutput> {
    let target_index = manifest.speaker_index(target_speaker)?;
    let src_stats = manifest
        .f0_stats
        .get(&source.speaker_label)
        .ok_or_else(|| Error::Manifest(format!("no F0 stats for {}", source.speaker_label)))?;
    let tgt_stats = manifest
        .f0_stats
        .get(target_speaker)
        .ok_or_else(|| Error::Manifest(format!("no F0 stats for {target_speaker}")))?;

    let src = load_features(
        source
            .feature_cache_path
            .as_ref()
            .ok_or_else(|| Error::MissingFeatures(source.utt_id.clone()))?,
    )?;
    let reference_feats = load_features(
        reference
            .feature_cache_path
            .as_ref()
            .ok_or_else(|| Error::MissingFeatures(reference.utt_id.clone()))?,
    )?;

    // Target embedding from the reference utterance.
    let (rt, rd) = reference_feats.mcep.coeffs.dim();
    let ref_input = reference_feats
        .mcep
        .coeffs
        .t()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((1, rd, rt))
        .unwrap();
    let embedding = encoder.infer(&ref_input, Some(&[target_index]))?;

    // Spectral conversion.
    let mut converted = convert_features(generator, &src.mcep, &embedding)?;
    if opts.preserve_energy {
        let c0 = src.mcep.coeffs.column(0).to_owned();
        converted.coeffs.column_mut(0).assign(&c0);
    }

    // Pitch conversion and synthesis.
    let f0_out = transform_logf0(&src.f0, src_stats, tgt_stats)?;
    let envelope = mcep_mod::mcep_to_envelope(
        &converted.coeffs,
        feature_cfg.bins(),
        feature_cfg.alpha(),
    )?;
    let analysis = VocoderAnalysis::new(
        ndarray::Array1::from(f0_out),
        envelope,
        src.aperiodicity.clone(),
        src.frame_period_ms,
    )?;
    let vocoder = LiteVocoder {
        fft_size: feature_cfg.fft_size,
        ..LiteVocoder::default()
    };
    let raw = vocoder.synthesize(&analysis, feature_cfg.sample_rate)?;
    let norm = loudness::normalize_loudness(&raw, opts.target_lufs)?;

    Ok(ConversionOutput {
        mcep: converted,
        waveform: norm.waveform,
        gain: norm.gain,
    })
}

/// Converts a set of source utterances to a set of target speakers, writing
/// WAVs and converted-feature containers plus a conversion manifest.
#[allow(clippy::too_many_arguments)]
pub fn convert_batch(
    generator: &Generator,
    encoder: &SpeakerEncoder,
    manifest: &Manifest,
    sources: &[&UtteranceRecord],
    targets: &[String],
    reference_override: Option<&str>,
    feature_cfg: &FeatureConfig,
    opts: &ConvertOptions,
    out_dir: &Path,
) -> Result<ConversionManifest> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut records = Vec::new();
    for target in targets {
        let reference = match reference_override {
            Some(utt_id) => manifest.record(utt_id)?,
            None => default_reference(manifest, target)?,
        };
        for source in sources {
            let out = convert_utterance(
                generator,
                encoder,
                manifest,
                source,
                target,
                reference,
                feature_cfg,
                opts,
            )?;
            let conv_id = format!("{}__to__{}", source.utt_id.replace('/', "_"), target);
            let wav_path = out_dir.join(format!("{conv_id}.wav"));
            wav::write_wav(&wav_path, &out.waveform)?;

            let feature_path = out_dir.join(format!("{conv_id}.vca"));
            let mut c = Container::new(serde_json::json!({
                "source_utt": source.utt_id,
                "target_speaker": target,
                "frame_period_ms": feature_cfg.frame_period_ms,
                "sample_rate": feature_cfg.sample_rate,
            }));
            c.insert_f32("mcep", out.mcep.coeffs.mapv(|v| v as f32).into_dyn());
            c.write(&feature_path)?;

            records.push(ConversionRecord {
                conv_id,
                source_utt: source.utt_id.clone(),
                source_speaker: source.speaker_label.clone(),
                target_speaker: target.clone(),
                target_index: manifest.speaker_index(target)?,
                feature_path,
                wav_path: Some(wav_path),
            });
        }
    }
    Ok(ConversionManifest { records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_is_symmetric_and_edge_replicated() {
        let f = Array2::from_shape_fn((2, 6), |(_, j)| j as f64);
        let (padded, left) = pad_to_multiple(&f, 4);
        assert_eq!(padded.ncols(), 8);
        assert_eq!(left, 1);
        assert_eq!(padded[[0, 0]], 0.0); // replicated first frame
        assert_eq!(padded[[0, 7]], 5.0); // replicated last frame
        assert_eq!(padded[[0, 1]], 0.0);
        assert_eq!(padded[[0, 6]], 5.0);

        let (unchanged, l0) = pad_to_multiple(&f.slice(ndarray::s![.., ..4]).to_owned(), 4);
        assert_eq!(unchanged.ncols(), 4);
        assert_eq!(l0, 0);
    }

    #[test]
    fn convert_features_preserves_length_on_awkward_sizes() {
        use crate::models::GeneratorConfig;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let cfg = GeneratorConfig {
            mcep_order: 7,
            base_channels: 4,
            n_bottleneck_blocks: 1,
            embedding_dim: 4,
            bottleneck_kernel: 3,
        };
        let g = Generator::new(cfg, &mut rng).unwrap();
        for t in [9usize, 16, 21, 30] {
            let mc = McepSegment::new(Array2::from_shape_fn((t, 8), |(i, j)| {
                ((i + j) as f64).sin()
            }))
            .unwrap();
            let e = Array2::<f64>::zeros((1, 4));
            let out = convert_features(&g, &mc, &e).unwrap();
            assert_eq!(out.n_frames(), t, "length not preserved for T={t}");
            assert_eq!(out.order(), 7);
        }
    }

    #[test]
    fn conversion_manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("conv.jsonl");
        let m = ConversionManifest {
            records: vec![ConversionRecord {
                conv_id: "a__to__b".into(),
                source_utt: "a/u0".into(),
                source_speaker: "a".into(),
                target_speaker: "b".into(),
                target_index: 1,
                feature_path: PathBuf::from("/x.vca"),
                wav_path: None,
            }],
        };
        m.save(&path).unwrap();
        let r = ConversionManifest::load(&path).unwrap();
        assert_eq!(r.records.len(), 1);
        assert_eq!(r.records[0].target_speaker, "b");
    }
}
