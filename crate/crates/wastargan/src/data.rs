//! Dataset bookkeeping: manifests, train/eval holdout, low-resource
//! subsetting, and the per-utterance feature cache.
//!
//! A manifest file is a JSON header line (speaker table, provenance, per
//! speaker F0 statistics, skip list) followed by one JSON record per line,
//! so manifests diff cleanly. Every derived manifest carries the provenance
//! chain needed to re-derive it from the audio root.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::audio::vocoder::{LiteVocoder, Vocoder};
use crate::audio::{f0::logf0_stats, mcep, wav, FeatureConfig, LogF0Stats, McepSegment};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::parallel::par_map_slice;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub speaker_label: String,
    pub speaker_index: usize,
    pub audio_path: PathBuf,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_cache_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProvenanceOp {
    Build,
    Holdout { fraction: f64, seed: u64 },
    Subset {
        n_speakers: usize,
        /// `None` means "full": every training utterance of the selected
        /// speakers.
        m_samples: Option<usize>,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub audio_root: PathBuf,
    pub ops: Vec<ProvenanceOp>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkipRecord {
    pub path: PathBuf,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    speaker_table: Vec<String>,
    provenance: Provenance,
    f0_stats: BTreeMap<String, LogF0Stats>,
    skipped: Vec<SkipRecord>,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<UtteranceRecord>,
    /// Index -> label; indices are contiguous from 0.
    pub speaker_table: Vec<String>,
    pub provenance: Provenance,
    /// Per speaker label, over that speaker's training split.
    pub f0_stats: BTreeMap<String, LogF0Stats>,
    pub skipped: Vec<SkipRecord>,
}

impl Manifest {
    pub fn n_speakers(&self) -> usize {
        self.speaker_table.len()
    }

    pub fn speaker_index(&self, label: &str) -> Result<usize> {
        self.speaker_table
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownSpeaker(label.to_string()))
    }

    pub fn train_records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &UtteranceRecord> {
        self.records.iter().filter(|r| r.split == Split::Eval)
    }

    pub fn record(&self, utt_id: &str) -> Result<&UtteranceRecord> {
        self.records
            .iter()
            .find(|r| r.utt_id == utt_id)
            .ok_or_else(|| Error::Manifest(format!("unknown utterance {utt_id:?}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = ManifestHeader {
            speaker_table: self.speaker_table.clone(),
            provenance: self.provenance.clone(),
            f0_stats: self.f0_stats.clone(),
            skipped: self.skipped.clone(),
        };
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
            let mut line = serde_json::to_string(&header)?;
            line.push('\n');
            f.write_all(line.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
            for r in &self.records {
                let mut line = serde_json::to_string(r)?;
                line.push('\n');
                f.write_all(line.as_bytes()).map_err(|e| Error::io(&tmp, e))?;
            }
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Manifest(format!("{}: empty manifest", path.display())))?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str::<UtteranceRecord>(&line)?);
        }
        let m = Manifest {
            records,
            speaker_table: header.speaker_table,
            provenance: header.provenance,
            f0_stats: header.f0_stats,
            skipped: header.skipped,
        };
        m.check_invariants()?;
        Ok(m)
    }

    fn check_invariants(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(&r.utt_id) {
                return Err(Error::Manifest(format!("duplicate utt_id {:?}", r.utt_id)));
            }
            if r.speaker_index >= self.speaker_table.len()
                || self.speaker_table[r.speaker_index] != r.speaker_label
            {
                return Err(Error::Manifest(format!(
                    "record {:?}: speaker index {} does not match table",
                    r.utt_id, r.speaker_index
                )));
            }
        }
        Ok(())
    }

    /// Replays the provenance chain from the audio root. The result equals
    /// this manifest's record set exactly (feature-cache fields aside).
    pub fn rederive(&self, cfg: &FeatureConfig) -> Result<Manifest> {
        let mut m: Option<Manifest> = None;
        for op in self.provenance.ops.clone() {
            m = Some(match op {
                ProvenanceOp::Build => build_manifest(&self.provenance.audio_root, cfg)?,
                ProvenanceOp::Holdout { fraction, seed } => split_holdout(
                    m.as_ref()
                        .ok_or_else(|| Error::Manifest("holdout before build".into()))?,
                    fraction,
                    seed,
                ),
                ProvenanceOp::Subset {
                    n_speakers,
                    m_samples,
                    seed,
                } => subset_low_resource(
                    m.as_ref()
                        .ok_or_else(|| Error::Manifest("subset before build".into()))?,
                    n_speakers,
                    m_samples,
                    seed,
                )?,
            });
        }
        m.ok_or_else(|| Error::Manifest("empty provenance chain".into()))
    }
}

/// Scans `audio_root/<speaker>/<utterance>.wav` into a manifest with
/// deterministic lexicographic ordering. Unreadable or unsupported files go
/// to the skip list; the scan continues.
pub fn build_manifest(audio_root: &Path, cfg: &FeatureConfig) -> Result<Manifest> {
    cfg.validate()?;
    let mut speakers: Vec<String> = Vec::new();
    let read_dir = fs::read_dir(audio_root).map_err(|e| Error::io(audio_root, e))?;
    for entry in read_dir {
        let entry = entry.map_err(|e| Error::io(audio_root, e))?;
        if entry.path().is_dir() {
            speakers.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    speakers.sort();
    if speakers.is_empty() {
        return Err(Error::Manifest(format!(
            "{}: no speaker directories",
            audio_root.display()
        )));
    }

    let mut records = Vec::new();
    let mut skipped = Vec::new();
    let mut table = Vec::new();
    for label in &speakers {
        let dir = audio_root.join(label);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().map(|e| e == "wav").unwrap_or(false))
            .collect();
        files.sort();
        let mut any = false;
        for path in files {
            match wav::read_wav(&path) {
                Ok(w) if w.sample_rate != cfg.sample_rate => {
                    skipped.push(SkipRecord {
                        path,
                        reason: format!(
                            "unsupported sample rate {} (expected {})",
                            w.sample_rate, cfg.sample_rate
                        ),
                    });
                }
                Ok(w) if w.samples.is_empty() => {
                    skipped.push(SkipRecord {
                        path,
                        reason: "empty audio".into(),
                    });
                }
                Ok(_) => {
                    let stem = path.file_stem().unwrap().to_string_lossy().into_owned();
                    records.push(UtteranceRecord {
                        utt_id: format!("{label}/{stem}"),
                        speaker_label: label.clone(),
                        speaker_index: 0, // fixed up below
                        audio_path: path,
                        split: Split::Train,
                        n_frames: None,
                        feature_cache_path: None,
                    });
                    any = true;
                }
                Err(e) => skipped.push(SkipRecord {
                    path,
                    reason: e.to_string(),
                }),
            }
        }
        if any {
            table.push(label.clone());
        }
    }
    if records.is_empty() {
        return Err(Error::Manifest(format!(
            "{}: no usable audio files",
            audio_root.display()
        )));
    }
    for r in &mut records {
        r.speaker_index = table.iter().position(|l| *l == r.speaker_label).unwrap();
    }
    Ok(Manifest {
        records,
        speaker_table: table,
        provenance: Provenance {
            audio_root: audio_root.to_path_buf(),
            ops: vec![ProvenanceOp::Build],
        },
        f0_stats: BTreeMap::new(),
        skipped,
    })
}

/// Marks a per-speaker holdout fraction (at least one utterance) as the
/// evaluation split. Seeded and deterministic.
pub fn split_holdout(m: &Manifest, fraction: f64, seed: u64) -> Manifest {
    let mut out = m.clone();
    for r in &mut out.records {
        r.split = Split::Train;
    }
    for (idx, _) in m.speaker_table.iter().enumerate() {
        let mut positions: Vec<usize> = out
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.speaker_index == idx)
            .map(|(i, _)| i)
            .collect();
        if positions.len() < 2 {
            continue; // keep a lone utterance in training
        }
        let n_eval = ((positions.len() as f64 * fraction).round() as usize)
            .max(1)
            .min(positions.len() - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (idx as u64).wrapping_mul(0x9e3779b9));
        positions.shuffle(&mut rng);
        for &p in positions.iter().take(n_eval) {
            out.records[p].split = Split::Eval;
        }
    }
    out.provenance.ops.push(ProvenanceOp::Holdout { fraction, seed });
    out
}

/// Uniformly samples `n_speakers` speakers, then `m_samples` training
/// utterances each (`None` takes all). Selected speakers are re-indexed
/// contiguously; a speaker with too few training utterances is an error.
pub fn subset_low_resource(
    m: &Manifest,
    n_speakers: usize,
    m_samples: Option<usize>,
    seed: u64,
) -> Result<Manifest> {
    if n_speakers == 0 || n_speakers > m.speaker_table.len() {
        return Err(Error::Manifest(format!(
            "cannot select {n_speakers} of {} speakers",
            m.speaker_table.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<String> = m
        .speaker_table
        .choose_multiple(&mut rng, n_speakers)
        .cloned()
        .collect();
    chosen.sort();

    let mut records = Vec::new();
    for label in &chosen {
        let mut train: Vec<&UtteranceRecord> = m
            .train_records()
            .filter(|r| &r.speaker_label == label)
            .collect();
        train.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
        let picked: Vec<&UtteranceRecord> = match m_samples {
            None => train,
            Some(k) => {
                if train.len() < k {
                    return Err(Error::InsufficientSamples {
                        speaker: label.clone(),
                        available: train.len(),
                        requested: k,
                    });
                }
                let mut sel: Vec<&UtteranceRecord> =
                    train.choose_multiple(&mut rng, k).copied().collect();
                sel.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
                sel
            }
        };
        records.extend(picked.into_iter().cloned());
    }
    for r in &mut records {
        r.speaker_index = chosen.iter().position(|l| *l == r.speaker_label).unwrap();
    }
    let f0_stats = m
        .f0_stats
        .iter()
        .filter(|(k, _)| chosen.contains(k))
        .map(|(k, v)| (k.clone(), *v))
        .collect();
    let mut provenance = m.provenance.clone();
    provenance.ops.push(ProvenanceOp::Subset {
        n_speakers,
        m_samples,
        seed,
    });
    Ok(Manifest {
        records,
        speaker_table: chosen,
        provenance,
        f0_stats,
        skipped: Vec::new(),
    })
}

/// Companion manifest holding the evaluation-split utterances of the same
/// speakers as `subset`, with matching speaker indices.
pub fn eval_companion(original: &Manifest, subset: &Manifest) -> Manifest {
    let mut records: Vec<UtteranceRecord> = original
        .eval_records()
        .filter(|r| subset.speaker_table.contains(&r.speaker_label))
        .cloned()
        .collect();
    for r in &mut records {
        r.speaker_index = subset
            .speaker_table
            .iter()
            .position(|l| *l == r.speaker_label)
            .unwrap();
    }
    records.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Manifest {
        records,
        speaker_table: subset.speaker_table.clone(),
        provenance: subset.provenance.clone(),
        f0_stats: subset.f0_stats.clone(),
        skipped: Vec::new(),
    }
}

fn content_hash(audio_bytes: &[u8], cfg: &FeatureConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(audio_bytes);
    hasher.update(serde_json::to_vec(cfg).unwrap());
    hex_string(&hasher.finalize())
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Cached features of one utterance.
pub struct CachedFeatures {
    pub mcep: McepSegment,
    pub f0: Vec<f64>,
    pub aperiodicity: ndarray::Array2<f64>,
    pub frame_period_ms: f64,
    pub sample_rate: u32,
}

pub fn load_features(path: &Path) -> Result<CachedFeatures> {
    let c = Container::read(path)?;
    let bad = |what: &str| Error::Container {
        path: path.to_path_buf(),
        detail: format!("missing {what}"),
    };
    let mcep32 = c.get_f32("mcep").ok_or_else(|| bad("mcep"))?;
    let f0 = c.get_f64("f0").ok_or_else(|| bad("f0"))?;
    let ap32 = c.get_f32("ap").ok_or_else(|| bad("ap"))?;
    let mcep = McepSegment::new(
        mcep32
            .mapv(|v| v as f64)
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| bad(&e.to_string()))?,
    )?;
    let ap = ap32
        .mapv(|v| v as f64)
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| bad(&e.to_string()))?;
    Ok(CachedFeatures {
        mcep,
        f0: f0.iter().copied().collect(),
        aperiodicity: ap,
        frame_period_ms: c.meta["frame_period_ms"].as_f64().unwrap_or(0.0),
        sample_rate: c.meta["sample_rate"].as_u64().unwrap_or(0) as u32,
    })
}

/// Runs vocoder analysis and mel-cepstral encoding for every record, writing
/// one container per utterance under `cache_dir`. Idempotent: an existing
/// cache whose content hash matches is not recomputed. Afterwards the
/// per-speaker F0 statistics are recomputed over the training split.
pub fn cache_features(m: &mut Manifest, cfg: &FeatureConfig, cache_dir: &Path) -> Result<usize> {
    cfg.validate()?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let vocoder = LiteVocoder {
        fft_size: cfg.fft_size,
        ..LiteVocoder::default()
    };
    let alpha = cfg.alpha();

    struct Job {
        index: usize,
        utt_id: String,
        audio_path: PathBuf,
        cache_path: PathBuf,
    }
    let jobs: Vec<Job> = m
        .records
        .iter()
        .enumerate()
        .map(|(index, r)| Job {
            index,
            utt_id: r.utt_id.clone(),
            audio_path: r.audio_path.clone(),
            cache_path: cache_dir.join(format!("{}.vca", r.utt_id.replace('/', "__"))),
        })
        .collect();

    let results = par_map_slice(&jobs, |job| -> Result<(usize, PathBuf, usize, bool)> {
        let analysis_err = |detail: String| Error::Analysis {
            utt_id: job.utt_id.clone(),
            detail,
        };
        let audio_bytes =
            fs::read(&job.audio_path).map_err(|e| analysis_err(e.to_string()))?;
        let hash = content_hash(&audio_bytes, cfg);

        if job.cache_path.exists() {
            if let Ok(existing) = Container::read(&job.cache_path) {
                if existing.meta["content_hash"].as_str() == Some(hash.as_str()) {
                    let frames = existing
                        .get_f64("f0")
                        .map(|a| a.len())
                        .ok_or_else(|| analysis_err("cache missing f0".into()))?;
                    return Ok((job.index, job.cache_path.clone(), frames, false));
                }
            }
        }

        let w = wav::read_wav(&job.audio_path).map_err(|e| analysis_err(e.to_string()))?;
        if w.sample_rate != cfg.sample_rate {
            return Err(analysis_err(format!(
                "sample rate {} != configured {}",
                w.sample_rate, cfg.sample_rate
            )));
        }
        let analysis = vocoder
            .analyze(&w, cfg.frame_period_ms)
            .map_err(|e| analysis_err(e.to_string()))?;
        let mcep_arr = mcep::envelope_to_mcep(&analysis.spectral_envelope, cfg.mcep_order, alpha)
            .map_err(|e| analysis_err(e.to_string()))?;
        let frames = mcep_arr.nrows();

        let mut c = Container::new(serde_json::json!({
            "utt_id": job.utt_id,
            "frame_period_ms": cfg.frame_period_ms,
            "sample_rate": cfg.sample_rate,
            "fft_size": cfg.fft_size,
            "mcep_order": cfg.mcep_order,
            "alpha": alpha,
            "content_hash": hash,
        }));
        c.insert_f32("mcep", mcep_arr.mapv(|v| v as f32).into_dyn());
        c.insert_f64("f0", ndarray::Array1::from(analysis.f0.to_vec()).into_dyn());
        c.insert_f32(
            "ap",
            analysis.aperiodicity.mapv(|v| v as f32).into_dyn(),
        );
        c.write(&job.cache_path)?;
        Ok((job.index, job.cache_path.clone(), frames, true))
    });

    let mut analyzed = 0usize;
    for res in results {
        let (index, path, frames, fresh) = res?;
        m.records[index].feature_cache_path = Some(path);
        m.records[index].n_frames = Some(frames);
        if fresh {
            analyzed += 1;
        }
    }
    recompute_f0_stats(m)?;
    Ok(analyzed)
}

/// Per-speaker log-F0 statistics over the training split only.
pub fn recompute_f0_stats(m: &mut Manifest) -> Result<()> {
    let mut per_speaker: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in m.records.iter().filter(|r| r.split == Split::Train) {
        let path = r
            .feature_cache_path
            .as_ref()
            .ok_or_else(|| Error::MissingFeatures(r.utt_id.clone()))?;
        let c = Container::read(path)?;
        let f0 = c.get_f64("f0").ok_or_else(|| Error::Container {
            path: path.clone(),
            detail: "missing f0".into(),
        })?;
        per_speaker
            .entry(r.speaker_label.clone())
            .or_default()
            .extend(f0.iter().copied());
    }
    m.f0_stats = per_speaker
        .into_iter()
        .map(|(label, contour)| {
            let stats = logf0_stats(&contour);
            (label, stats)
        })
        .collect();
    Ok(())
}
