//! One checkpoint container for everything the trainer reads or writes:
//! backbone weights, context banks, and sampled class-prior sequences.
//!
//! File layout, all integers little endian:
//!
//! ```text
//! magic   8 bytes  "COARCKPT"
//! version u32      currently 1
//! mlen    u32      manifest byte length
//! manifest         JSON: kind tag, kind fields, tensor name/shape/dtype list
//! payload          each tensor's f64 values, flat, in manifest order
//! check   u64      FNV-1a over the payload bytes
//! ```
//!
//! Loads are strict: wrong magic, a bad checksum, truncation, or trailing
//! bytes all report `Corrupt`; a version other than 1 reports
//! `UnsupportedVersion`. A round trip through disk is bit-exact because the
//! payload stores the raw f64 bits.

use std::collections::VecDeque;
use std::fs;
use std::path::Path;

use coar_core::backbone::LayerParams;
use coar_core::mat::Mat;
use coar_core::rng::fnv1a;
use coar_core::{BackboneConfig, BackboneParams, BankKind, ContextBank, TokenSequence};
use serde::{Deserialize, Serialize};

pub const MAGIC: &[u8; 8] = b"COARCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CkptError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid checkpoint request: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, CkptError>;

fn corrupt(what: impl Into<String>) -> CkptError {
    CkptError::Corrupt(what.into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    dtype: String,
}

/// Structural half of a stored [`TokenSequence`]; the ids travel as a tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct SeqMeta {
    text_span: (usize, usize),
    image_span: (usize, usize),
    v_positions: Vec<usize>,
    s_positions: Vec<usize>,
    ctx_img_positions: Vec<usize>,
    labels_mask: Vec<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Body {
    Backbone {
        dim: usize,
        n_heads: usize,
        n_layers: usize,
        vocab_size: usize,
        max_seq: usize,
        frozen: bool,
        seed: u64,
    },
    Bank {
        bank_kind: String,
        n_layers: usize,
        dim: usize,
        class_name: usize,
        seed: u64,
        anchored: bool,
    },
    Priors {
        seqs: Vec<SeqMeta>,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    #[serde(flatten)]
    body: Body,
    tensors: Vec<TensorMeta>,
}

// ---------------------------------------------------------------------------
// Container plumbing.

fn write_container(path: &Path, manifest: &Manifest, tensors: &[&[f64]]) -> Result<u64> {
    assert_eq!(manifest.tensors.len(), tensors.len());
    for (meta, data) in manifest.tensors.iter().zip(tensors) {
        assert_eq!(meta.shape.iter().product::<usize>(), data.len(), "{}", meta.name);
    }
    let mjson = serde_json::to_vec(manifest)
        .map_err(|e| CkptError::Invalid(format!("manifest encode: {e}")))?;
    let payload_len: usize = tensors.iter().map(|t| t.len() * 8).sum();
    let mut bytes = Vec::with_capacity(8 + 4 + 4 + mjson.len() + payload_len + 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(mjson.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&mjson);
    let payload_start = bytes.len();
    for t in tensors {
        for v in *t {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let check = fnv1a(&bytes[payload_start..]);
    bytes.extend_from_slice(&check.to_le_bytes());
    fs::write(path, &bytes)?;
    Ok(check)
}

fn read_container(path: &Path) -> Result<(Manifest, VecDeque<Vec<f64>>)> {
    let bytes = fs::read(path)?;
    let mut at = 0usize;
    let take = |at: &mut usize, n: usize| -> Result<&[u8]> {
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated"))?;
        let s = &bytes[*at..end];
        *at = end;
        Ok(s)
    };
    if take(&mut at, 8)? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(CkptError::UnsupportedVersion(version));
    }
    let mlen = u32::from_le_bytes(take(&mut at, 4)?.try_into().unwrap()) as usize;
    let manifest: Manifest = serde_json::from_slice(take(&mut at, mlen)?)
        .map_err(|e| corrupt(format!("manifest: {e}")))?;
    let payload_start = at;
    let mut tensors = VecDeque::with_capacity(manifest.tensors.len());
    for meta in &manifest.tensors {
        if meta.dtype != "f64" {
            return Err(corrupt(format!("tensor {} dtype {}", meta.name, meta.dtype)));
        }
        let n = meta.shape.iter().product::<usize>();
        let raw = take(&mut at, n * 8)?;
        tensors.push_back(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        );
    }
    let payload_end = at;
    let stored = u64::from_le_bytes(take(&mut at, 8)?.try_into().unwrap());
    if at != bytes.len() {
        return Err(corrupt("trailing bytes"));
    }
    if fnv1a(&bytes[payload_start..payload_end]) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    Ok((manifest, tensors))
}

fn take_tensor(
    tensors: &mut VecDeque<Vec<f64>>,
    metas: &mut VecDeque<TensorMeta>,
    name: &str,
    shape: &[usize],
) -> Result<Vec<f64>> {
    let meta = metas
        .pop_front()
        .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
    if meta.name != name || meta.shape != shape {
        return Err(corrupt(format!(
            "expected tensor {name} {shape:?}, found {} {:?}",
            meta.name, meta.shape
        )));
    }
    Ok(tensors.pop_front().expect("tensor data tracks metas"))
}

fn take_mat(
    tensors: &mut VecDeque<Vec<f64>>,
    metas: &mut VecDeque<TensorMeta>,
    name: &str,
    rows: usize,
    cols: usize,
) -> Result<Mat> {
    Ok(Mat::from_vec(
        rows,
        cols,
        take_tensor(tensors, metas, name, &[rows, cols])?,
    ))
}

fn meta(name: impl Into<String>, shape: Vec<usize>) -> TensorMeta {
    TensorMeta { name: name.into(), shape, dtype: "f64".into() }
}

// ---------------------------------------------------------------------------
// Backbone.

/// Tensor order matches `BackboneParams::visit`: embed, pos, per-layer
/// weights, final gain.
fn backbone_tensors(p: &BackboneParams) -> (Vec<TensorMeta>, Vec<&[f64]>) {
    let mut metas = Vec::new();
    let mut data: Vec<&[f64]> = Vec::new();
    metas.push(meta("embed", vec![p.embed.rows, p.embed.cols]));
    data.push(&p.embed.data);
    metas.push(meta("pos", vec![p.pos.rows, p.pos.cols]));
    data.push(&p.pos.data);
    for (i, l) in p.layers.iter().enumerate() {
        for (tag, m) in [
            ("wq", &l.wq),
            ("wk", &l.wk),
            ("wv", &l.wv),
            ("wo", &l.wo),
            ("w1", &l.w1),
            ("w2", &l.w2),
        ] {
            metas.push(meta(format!("layer{i}.{tag}"), vec![m.rows, m.cols]));
            data.push(&m.data);
        }
        metas.push(meta(format!("layer{i}.g1"), vec![l.g1.len()]));
        data.push(&l.g1);
        metas.push(meta(format!("layer{i}.g2"), vec![l.g2.len()]));
        data.push(&l.g2);
    }
    metas.push(meta("gf", vec![p.gf.len()]));
    data.push(&p.gf);
    (metas, data)
}

pub fn save_backbone(path: &Path, params: &BackboneParams, seed: u64) -> Result<u64> {
    let (metas, data) = backbone_tensors(params);
    let manifest = Manifest {
        body: Body::Backbone {
            dim: params.config.dim,
            n_heads: params.config.n_heads,
            n_layers: params.config.n_layers,
            vocab_size: params.config.vocab_size,
            max_seq: params.config.max_seq,
            frozen: params.frozen,
            seed,
        },
        tensors: metas,
    };
    write_container(path, &manifest, &data)
}

/// Returns the rebuilt parameters and the seed recorded at save time.
pub fn load_backbone(path: &Path) -> Result<(BackboneParams, u64)> {
    let (manifest, mut tensors) = read_container(path)?;
    let Body::Backbone { dim, n_heads, n_layers, vocab_size, max_seq, frozen, seed } =
        manifest.body
    else {
        return Err(corrupt("not a backbone checkpoint"));
    };
    let config = BackboneConfig { dim, n_heads, n_layers, vocab_size, max_seq };
    config
        .validate()
        .map_err(|e| corrupt(format!("backbone config: {e}")))?;
    let mut metas: VecDeque<TensorMeta> = manifest.tensors.into();
    let embed = take_mat(&mut tensors, &mut metas, "embed", vocab_size, dim)?;
    let pos = take_mat(&mut tensors, &mut metas, "pos", max_seq, dim)?;
    let d_ff = config.d_ff();
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        layers.push(LayerParams {
            wq: take_mat(&mut tensors, &mut metas, &format!("layer{i}.wq"), dim, dim)?,
            wk: take_mat(&mut tensors, &mut metas, &format!("layer{i}.wk"), dim, dim)?,
            wv: take_mat(&mut tensors, &mut metas, &format!("layer{i}.wv"), dim, dim)?,
            wo: take_mat(&mut tensors, &mut metas, &format!("layer{i}.wo"), dim, dim)?,
            w1: take_mat(&mut tensors, &mut metas, &format!("layer{i}.w1"), dim, d_ff)?,
            w2: take_mat(&mut tensors, &mut metas, &format!("layer{i}.w2"), d_ff, dim)?,
            g1: take_tensor(&mut tensors, &mut metas, &format!("layer{i}.g1"), &[dim])?,
            g2: take_tensor(&mut tensors, &mut metas, &format!("layer{i}.g2"), &[dim])?,
        });
    }
    let gf = take_tensor(&mut tensors, &mut metas, "gf", &[dim])?;
    if let Some(extra) = metas.pop_front() {
        return Err(corrupt(format!("unexpected tensor {}", extra.name)));
    }
    Ok((BackboneParams { config, embed, pos, layers, gf, frozen }, seed))
}

// ---------------------------------------------------------------------------
// Context banks.

pub fn save_bank(path: &Path, bank: &ContextBank) -> Result<u64> {
    let n = bank.n_layers;
    let d = bank.dim;
    let mut metas = vec![meta("p_v", vec![n, d]), meta("p_i", vec![n, d])];
    let mut data: Vec<&[f64]> = vec![&bank.p_v.data, &bank.p_i.data];
    if let Some(anchor) = &bank.casr_anchor {
        metas.push(meta("casr_anchor", vec![n, d]));
        data.push(&anchor.data);
    }
    let manifest = Manifest {
        body: Body::Bank {
            bank_kind: bank.kind.name().into(),
            n_layers: n,
            dim: d,
            class_name: bank.class_name,
            seed: bank.seed,
            anchored: bank.casr_anchor.is_some(),
        },
        tensors: metas,
    };
    write_container(path, &manifest, &data)
}

pub fn load_bank(path: &Path) -> Result<ContextBank> {
    let (manifest, mut tensors) = read_container(path)?;
    let Body::Bank { bank_kind, n_layers, dim, class_name, seed, anchored } = manifest.body
    else {
        return Err(corrupt("not a bank checkpoint"));
    };
    let kind = match bank_kind.as_str() {
        "subject" => BankKind::Subject,
        "style" => BankKind::Style,
        other => return Err(corrupt(format!("unknown bank kind {other}"))),
    };
    if n_layers == 0 || dim == 0 {
        return Err(corrupt("bank dimensions must be nonzero"));
    }
    let mut metas: VecDeque<TensorMeta> = manifest.tensors.into();
    let p_v = take_mat(&mut tensors, &mut metas, "p_v", n_layers, dim)?;
    let p_i = take_mat(&mut tensors, &mut metas, "p_i", n_layers, dim)?;
    let casr_anchor = if anchored {
        Some(take_mat(&mut tensors, &mut metas, "casr_anchor", n_layers, dim)?)
    } else {
        None
    };
    if let Some(extra) = metas.pop_front() {
        return Err(corrupt(format!("unexpected tensor {}", extra.name)));
    }
    Ok(ContextBank { kind, n_layers, dim, class_name, p_v, p_i, casr_anchor, seed })
}

// ---------------------------------------------------------------------------
// Prior sequences. Ids ride as f64 tensors; token ids are tiny integers so
// the conversion is exact, and the loader rejects noninteger values.

pub fn save_priors(path: &Path, seqs: &[TokenSequence]) -> Result<u64> {
    let mut metas = Vec::with_capacity(seqs.len());
    let mut owned: Vec<Vec<f64>> = Vec::with_capacity(seqs.len());
    let mut seq_metas = Vec::with_capacity(seqs.len());
    for (i, s) in seqs.iter().enumerate() {
        metas.push(meta(format!("seq{i}.ids"), vec![s.ids.len()]));
        owned.push(s.ids.iter().map(|&id| id as f64).collect());
        seq_metas.push(SeqMeta {
            text_span: s.text_span,
            image_span: s.image_span,
            v_positions: s.v_positions.clone(),
            s_positions: s.s_positions.clone(),
            ctx_img_positions: s.ctx_img_positions.clone(),
            labels_mask: s.labels_mask.clone(),
        });
    }
    let data: Vec<&[f64]> = owned.iter().map(|v| v.as_slice()).collect();
    let manifest = Manifest { body: Body::Priors { seqs: seq_metas }, tensors: metas };
    write_container(path, &manifest, &data)
}

pub fn load_priors(path: &Path) -> Result<Vec<TokenSequence>> {
    let (manifest, mut tensors) = read_container(path)?;
    let Body::Priors { seqs } = manifest.body else {
        return Err(corrupt("not a priors checkpoint"));
    };
    let mut metas: VecDeque<TensorMeta> = manifest.tensors.into();
    let mut out = Vec::with_capacity(seqs.len());
    for (i, sm) in seqs.into_iter().enumerate() {
        let raw = {
            let name = format!("seq{i}.ids");
            let m = metas
                .pop_front()
                .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
            if m.name != name || m.shape.len() != 1 {
                return Err(corrupt(format!("expected tensor {name}, found {}", m.name)));
            }
            tensors.pop_front().expect("tensor data tracks metas")
        };
        let mut ids = Vec::with_capacity(raw.len());
        for v in raw {
            if v.fract() != 0.0 || !(0.0..=u32::MAX as f64).contains(&v) {
                return Err(corrupt(format!("seq{i} has a noninteger token id {v}")));
            }
            ids.push(v as usize);
        }
        if sm.labels_mask.len() != ids.len() {
            return Err(corrupt(format!("seq{i} labels mask length mismatch")));
        }
        out.push(TokenSequence {
            ids,
            text_span: sm.text_span,
            image_span: sm.image_span,
            v_positions: sm.v_positions,
            s_positions: sm.s_positions,
            ctx_img_positions: sm.ctx_img_positions,
            labels_mask: sm.labels_mask,
        });
    }
    if let Some(extra) = metas.pop_front() {
        return Err(corrupt(format!("unexpected tensor {}", extra.name)));
    }
    Ok(out)
}
