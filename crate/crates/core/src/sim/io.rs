use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::Partition;
use crate::error::{Error, Result};
use crate::nnet::Tensor;
use crate::vocab::{Lang, Vocabulary};

pub const FEATURE_MAGIC: &[u8; 4] = b"LAEF";

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub utt_id: String,
    pub partition: Option<Partition>,
    pub frames: usize,
    pub feat_dim: usize,
    /// Row-major `frames x feat_dim`.
    pub features: Vec<f32>,
    pub ids: Vec<usize>,
    pub tags: Vec<Lang>,
    /// Per-token frame span `[start, end)`.
    pub boundaries: Vec<(usize, usize)>,
}

impl Utterance {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.feat_dim..(t + 1) * self.feat_dim]
    }

    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::matrix(self.frames, self.feat_dim, self.features.clone())
    }

    pub fn is_mono(&self, lang: Lang) -> bool {
        self.tags.iter().all(|&t| t == lang)
    }

    /// Utterance-level language class: 0 mono-A, 1 mono-B, 2 code-switched.
    pub fn language_class(&self) -> usize {
        if self.is_mono(Lang::A) {
            0
        } else if self.is_mono(Lang::B) {
            1
        } else {
            2
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &Utterance> {
        self.utterances.iter().filter(move |u| u.partition == Some(p))
    }

    pub fn get(&self, utt_id: &str) -> Option<&Utterance> {
        self.utterances.iter().find(|u| u.utt_id == utt_id)
    }

    /// Reads `vocab.tsv`, `manifest.tsv` and the referenced feature files.
    pub fn load(dir: &Path) -> Result<Self> {
        let vpath = dir.join("vocab.tsv");
        let vocab = Vocabulary::from_tsv(&fs::read_to_string(&vpath).map_err(|e| Error::io(&vpath, e))?)?;
        let records = read_manifest(&dir.join("manifest.tsv"))?;
        let mut utterances = Vec::with_capacity(records.len());
        for r in records {
            for (&id, &tag) in r.ids.iter().zip(&r.tags) {
                if vocab.lang(id) != Some(tag) {
                    return Err(Error::Data(format!("{}: token {id} is not tagged {tag} in the vocabulary", r.utt_id)));
                }
            }
            let (frames, feat_dim, features) = read_features(&dir.join(&r.path))?;
            if r.boundaries.last().is_some_and(|b| b.1 > frames) {
                return Err(Error::Data(format!("{}: boundary beyond {frames} frames", r.utt_id)));
            }
            utterances.push(Utterance {
                utt_id: r.utt_id,
                partition: Some(r.partition),
                frames,
                feat_dim,
                features,
                ids: r.ids,
                tags: r.tags,
                boundaries: r.boundaries,
            });
        }
        Ok(Corpus { vocab, utterances })
    }
}

pub fn write_features(path: &Path, frames: usize, feat_dim: usize, data: &[f32]) -> Result<()> {
    assert_eq!(data.len(), frames * feat_dim);
    let mut buf = Vec::with_capacity(12 + 4 * data.len());
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&(frames as u32).to_le_bytes());
    buf.extend_from_slice(&(feat_dim as u32).to_le_bytes());
    for x in data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    if bytes.len() < 12 || &bytes[..4] != FEATURE_MAGIC {
        return Err(bad("not a feature file"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (t, f) = (u32_at(4), u32_at(8));
    if bytes.len() != 12 + 4 * t * f {
        return Err(bad(&format!("expected {t}x{f} values")));
    }
    let data = bytes[12..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((t, f, data))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub utt_id: String,
    pub partition: Partition,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
    pub ids: Vec<usize>,
    pub tags: Vec<Lang>,
    pub boundaries: Vec<(usize, usize)>,
}

fn join<T: ToString>(xs: impl Iterator<Item = T>) -> String {
    xs.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Tab-separated: utt_id, partition, path, ids, tags, token spans `start:end`.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.utt_id,
            r.partition.name(),
            r.path.display(),
            join(r.ids.iter()),
            join(r.tags.iter()),
            join(r.boundaries.iter().map(|(s, e)| format!("{s}:{e}")))
        )
        .expect("write to Vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |m: &str| Error::Data(format!("{} line {}: {m}", path.display(), i + 1));
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 tab-separated fields"));
        }
        let ids = f[3]
            .split_whitespace()
            .map(|s| s.parse::<usize>().map_err(|_| bad("bad token id")))
            .collect::<Result<Vec<_>>>()?;
        let tags = f[4].split_whitespace().map(str::parse).collect::<Result<Vec<Lang>>>()?;
        let boundaries = f[5]
            .split_whitespace()
            .map(|s| {
                let (a, b) = s.split_once(':').ok_or_else(|| bad("bad span"))?;
                Ok((a.parse().map_err(|_| bad("bad span"))?, b.parse().map_err(|_| bad("bad span"))?))
            })
            .collect::<Result<Vec<(usize, usize)>>>()?;
        if ids.len() != tags.len() || ids.len() != boundaries.len() {
            return Err(bad("ids, tags and spans differ in length"));
        }
        if boundaries.iter().any(|&(s, e)| s >= e) || boundaries.windows(2).any(|w| w[0].1 > w[1].0) {
            return Err(bad("spans must be nonempty and increasing"));
        }
        out.push(ManifestRecord {
            utt_id: f[0].to_string(),
            partition: Partition::parse(f[1])?,
            path: PathBuf::from(f[2]),
            ids,
            tags,
            boundaries,
        });
    }
    Ok(out)
}

pub(super) fn write_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    let feats = dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
    let vpath = dir.join("vocab.tsv");
    fs::write(&vpath, corpus.vocab.to_tsv()).map_err(|e| Error::io(&vpath, e))?;
    let mut records = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let rel = PathBuf::from("feats").join(format!("{}.laef", u.utt_id));
        write_features(&dir.join(&rel), u.frames, u.feat_dim, &u.features)?;
        records.push(ManifestRecord {
            utt_id: u.utt_id.clone(),
            partition: u.partition.ok_or_else(|| Error::Data(format!("{} has no partition", u.utt_id)))?,
            path: rel,
            ids: u.ids.clone(),
            tags: u.tags.clone(),
            boundaries: u.boundaries.clone(),
        });
    }
    write_manifest(&dir.join("manifest.tsv"), &records)
}
