//! Binary artifacts: model checkpoints (`LGCK`), projection sets (`LGPJ`)
//! and fitted statistics (`LGST`).
//!
//! Each artifact is a flat little-endian record that starts with a four byte
//! magic and a `u32` version. Derived artifacts carry a 32 byte SHA-256
//! fingerprint of whatever they were derived from.

use std::fs;
use std::path::Path;

use logra_core::nn::{Activation, LinearLayer, LossKind, Model};
use logra_core::projection::{InitKind, ProjectionPair, ProjectionSet};
use logra_core::stats::{HessianBlock, KroneckerFactors, ProjectedHessian};
use logra_core::EigenDecomposition;
use sha2::{Digest as _, Sha256};

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};

pub type Digest = [u8; 32];

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LGCK";
pub const PROJECTION_MAGIC: &[u8; 4] = b"LGPJ";
pub const STATISTICS_MAGIC: &[u8; 4] = b"LGST";
const VERSION: u32 = 1;

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

/// SHA-256 over the concatenation of several parts, each length-prefixed so
/// that part boundaries matter.
pub fn combine(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

pub fn hex(d: &Digest) -> String {
    d.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn check_name(name: &str) -> Result<()> {
    if name.len() > u16::MAX as usize {
        return Err(Error::Config(format!("layer name of {} bytes is too long", name.len())));
    }
    Ok(())
}

// ---- checkpoints ----

pub fn encode_checkpoint(model: &Model) -> Result<Vec<u8>> {
    let mut e = Encoder::new(CHECKPOINT_MAGIC, VERSION);
    e.u32(model.layers().len() as u32);
    for layer in model.layers() {
        check_name(&layer.name)?;
        e.name(&layer.name);
        e.u32(layer.n_out() as u32);
        e.u32(layer.n_in() as u32);
        e.u8(layer.has_bias() as u8);
        e.f64s(layer.weight.as_slice());
        if let Some(b) = &layer.bias {
            e.f64s(b);
        }
    }
    // Trailer: activation per layer, then the loss.
    for act in model.activations() {
        e.u8(match act {
            Activation::Identity => 0,
            Activation::Relu => 1,
        });
    }
    e.u8(match model.loss_kind() {
        LossKind::CrossEntropy => 0,
        LossKind::MeanSquaredError => 1,
    });
    Ok(e.buf)
}

pub fn decode_checkpoint(path: &Path, bytes: &[u8]) -> Result<Model> {
    let mut d = Decoder::open(path, bytes, CHECKPOINT_MAGIC, VERSION)?;
    let n = d.u32()? as usize;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = d.name()?;
        let rows = d.u32()? as usize;
        let cols = d.u32()? as usize;
        let has_bias = match d.u8()? {
            0 => false,
            1 => true,
            other => return Err(d.err(format!("bad bias flag {other}"))),
        };
        let weight = logra_core::Matrix::new(rows, cols, d.f64s(rows * cols)?)
            .map_err(|e| d.err(e.to_string()))?;
        let bias = if has_bias { Some(d.f64s(rows)?) } else { None };
        layers.push(LinearLayer { name, weight, bias });
    }
    let mut activations = Vec::with_capacity(n);
    for _ in 0..n {
        activations.push(match d.u8()? {
            0 => Activation::Identity,
            1 => Activation::Relu,
            other => return Err(d.err(format!("unknown activation code {other}"))),
        });
    }
    let loss = match d.u8()? {
        0 => LossKind::CrossEntropy,
        1 => LossKind::MeanSquaredError,
        other => return Err(d.err(format!("unknown loss code {other}"))),
    };
    d.finish()?;
    Model::new(layers, activations, loss).map_err(|e| d.err(e.to_string()))
}

/// Writes the checkpoint and returns the digest of the written bytes.
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<Digest> {
    let bytes = encode_checkpoint(model)?;
    write_file(path, &bytes)?;
    Ok(sha256(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, Digest)> {
    let bytes = read_file(path)?;
    let model = decode_checkpoint(path, &bytes)?;
    Ok((model, sha256(&bytes)))
}

// ---- projections ----

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionFile {
    /// Fingerprint of the configuration and checkpoint the projections were built for.
    pub source: Digest,
    pub set: ProjectionSet,
}

pub fn encode_projections(p: &ProjectionFile) -> Result<Vec<u8>> {
    let mut e = Encoder::new(PROJECTION_MAGIC, VERSION);
    e.bytes(&p.source);
    e.u32(p.set.pairs().len() as u32);
    for pair in p.set.pairs() {
        check_name(&pair.layer_name)?;
        e.name(&pair.layer_name);
        e.u8(match pair.init {
            InitKind::Random => 0,
            InitKind::Pca => 1,
        });
        e.matrix(&pair.p_in);
        e.matrix(&pair.p_out);
    }
    Ok(e.buf)
}

pub fn decode_projections(path: &Path, bytes: &[u8]) -> Result<ProjectionFile> {
    let mut d = Decoder::open(path, bytes, PROJECTION_MAGIC, VERSION)?;
    let source = d.array32()?;
    let n = d.u32()? as usize;
    let mut pairs = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let name = d.name()?;
        let init = match d.u8()? {
            0 => InitKind::Random,
            1 => InitKind::Pca,
            other => return Err(d.err(format!("unknown init code {other}"))),
        };
        let p_in = d.matrix()?;
        let p_out = d.matrix()?;
        pairs.push(ProjectionPair::new(name, p_in, p_out, init).map_err(|e| d.err(e.to_string()))?);
    }
    d.finish()?;
    let set = ProjectionSet::new(pairs).map_err(|e| d.err(e.to_string()))?;
    Ok(ProjectionFile { source, set })
}

pub fn save_projections(path: &Path, p: &ProjectionFile) -> Result<Digest> {
    let bytes = encode_projections(p)?;
    write_file(path, &bytes)?;
    Ok(sha256(&bytes))
}

pub fn load_projections(path: &Path) -> Result<(ProjectionFile, Digest)> {
    let bytes = read_file(path)?;
    let p = decode_projections(path, &bytes)?;
    Ok((p, sha256(&bytes)))
}

// ---- statistics ----

#[derive(Debug, Clone, PartialEq)]
pub struct Statistics {
    /// Fingerprint of (configuration, checkpoint, projections).
    pub fingerprint: Digest,
    pub factors: Vec<KroneckerFactors>,
    pub hessian: ProjectedHessian,
}

fn put_eig(e: &mut Encoder, eig: &EigenDecomposition) {
    e.f64s(&eig.eigenvalues);
    e.matrix(&eig.eigenvectors);
}

fn get_eig(d: &mut Decoder<'_>, n: usize) -> Result<EigenDecomposition> {
    let eigenvalues = d.f64s(n)?;
    let eigenvectors = d.matrix()?;
    if eigenvectors.shape() != (n, n) {
        return Err(d.err("eigenvector matrix does not match the factor size"));
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

pub fn encode_statistics(s: &Statistics) -> Result<Vec<u8>> {
    let mut e = Encoder::new(STATISTICS_MAGIC, VERSION);
    e.bytes(&s.fingerprint);
    e.u32(s.factors.len() as u32);
    for f in &s.factors {
        check_name(&f.layer_name)?;
        e.name(&f.layer_name);
        e.u64(f.token_count);
        e.matrix(&f.c_fwd);
        put_eig(&mut e, &f.eig_fwd);
        e.matrix(&f.c_bwd);
        put_eig(&mut e, &f.eig_bwd);
    }
    e.u64(s.hessian.sample_count);
    e.u32(s.hessian.blocks.len() as u32);
    for b in &s.hessian.blocks {
        check_name(&b.layer_name)?;
        e.name(&b.layer_name);
        e.u32(b.offset as u32);
        e.matrix(&b.h);
        put_eig(&mut e, &b.eig);
        e.f64(b.damping);
    }
    Ok(e.buf)
}

pub fn decode_statistics(path: &Path, bytes: &[u8]) -> Result<Statistics> {
    let mut d = Decoder::open(path, bytes, STATISTICS_MAGIC, VERSION)?;
    let fingerprint = d.array32()?;
    let n = d.u32()? as usize;
    let mut factors = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let layer_name = d.name()?;
        let token_count = d.u64()?;
        let c_fwd = d.matrix()?;
        let eig_fwd = get_eig(&mut d, c_fwd.rows())?;
        let c_bwd = d.matrix()?;
        let eig_bwd = get_eig(&mut d, c_bwd.rows())?;
        factors.push(KroneckerFactors {
            layer_name,
            c_fwd,
            c_bwd,
            eig_fwd,
            eig_bwd,
            token_count,
        });
    }
    let sample_count = d.u64()?;
    let nb = d.u32()? as usize;
    let mut blocks = Vec::with_capacity(nb.min(1024));
    let mut expected_offset = 0;
    for _ in 0..nb {
        let layer_name = d.name()?;
        let offset = d.u32()? as usize;
        if offset != expected_offset {
            return Err(d.err(format!("block {layer_name} at offset {offset}, expected {expected_offset}")));
        }
        let h = d.matrix()?;
        let eig = get_eig(&mut d, h.rows())?;
        let damping = d.f64()?;
        expected_offset += h.rows();
        blocks.push(HessianBlock {
            layer_name,
            offset,
            h,
            eig,
            damping,
        });
    }
    d.finish()?;
    Ok(Statistics {
        fingerprint,
        factors,
        hessian: ProjectedHessian { blocks, sample_count },
    })
}

pub fn save_statistics(path: &Path, s: &Statistics) -> Result<()> {
    write_file(path, &encode_statistics(s)?)
}

pub fn load_statistics(path: &Path) -> Result<Statistics> {
    decode_statistics(path, &read_file(path)?)
}
