//! Utterances with reference transcripts, and their on-disk container.
//!
//! A corpus file uses the same container as model files (magic `ZPCORPUS`).
//! Each utterance contributes one `meta utt <id> <comma-separated ids>` line
//! and one `feats.<id>` tensor.

use std::path::Path;

use crate::ctc::{TokenId, TokenSeq};
use crate::linalg::Matrix;
use crate::tensorfile::{FormatError, TensorFile};

pub const CORPUS_MAGIC: &str = "ZPCORPUS";

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `frames × feat_dim`.
    pub feats: Matrix,
    pub reference: TokenSeq,
}

pub fn to_tensor_file(utts: &[Utterance]) -> Result<TensorFile, FormatError> {
    let mut f = TensorFile::new(CORPUS_MAGIC, 1);
    for u in utts {
        if u.id.is_empty() || u.id.contains(char::is_whitespace) {
            return Err(FormatError::Header(format!("bad utterance id {:?}", u.id)));
        }
        let ids: Vec<String> = u.reference.iter().map(|t| t.to_string()).collect();
        f.push_meta("utt", format!("{} {}", u.id, ids.join(",")));
        f.tensors.push((format!("feats.{}", u.id), u.feats.clone()));
    }
    Ok(f)
}

pub fn from_tensor_file(f: &TensorFile) -> Result<Vec<Utterance>, FormatError> {
    let mut out = Vec::new();
    for (key, value) in &f.meta {
        if key != "utt" {
            continue;
        }
        let (id, refs) = value.split_once(' ').unwrap_or((value.as_str(), ""));
        let reference: Result<Vec<TokenId>, _> = refs
            .split(',')
            .filter(|s| !s.is_empty())
            .map(str::parse)
            .collect();
        let reference = reference
            .map_err(|_| FormatError::Header(format!("bad reference for {id}: {refs:?}")))?;
        let feats = f
            .tensor(&format!("feats.{id}"))
            .ok_or_else(|| FormatError::Tensor {
                name: format!("feats.{id}"),
                msg: "missing".into(),
            })?
            .clone();
        out.push(Utterance {
            id: id.to_string(),
            feats,
            reference: TokenSeq(reference),
        });
    }
    Ok(out)
}

pub fn save(utts: &[Utterance], path: &Path) -> Result<(), FormatError> {
    std::fs::write(path, to_tensor_file(utts)?.to_bytes()?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<Utterance>, FormatError> {
    let bytes = std::fs::read(path)?;
    from_tensor_file(&TensorFile::from_bytes(&bytes, CORPUS_MAGIC)?)
}
