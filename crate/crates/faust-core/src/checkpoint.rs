//! Versioned binary model checkpoints.
//!
//! Layout (all integers little-endian, all floats f64 LE, matrices
//! row-major): an 8-byte magic with version, run metadata, then every
//! weight matrix in layer order. Write/read round-trips are bit-exact.

use crate::config::Variant;
use crate::error::{Error, Result};
use crate::model::{ForwardSource, LinearHead, LocalLayer, Model};
use crate::norm::NormMode;
use crate::tensor::{AdamState, DenseMatrix};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"FAUSTCK1";

/// A trained model plus what evaluation needs to rebuild its references.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub variant: Variant,
    /// Dataset row of each class representative (representative variant).
    pub representative_indices: Option<Vec<usize>>,
    /// Centroid construction parameters (centroid variants).
    pub centroid_k: usize,
    pub centroid_seed: u64,
}

fn write_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_matrix(w: &mut impl Write, m: &DenseMatrix) -> Result<()> {
    write_u32(w, m.rows() as u32)?;
    write_u32(w, m.cols() as u32)?;
    for &v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_matrix(r: &mut impl Read) -> Result<DenseMatrix> {
    let rows = read_u32(r)? as usize;
    let cols = read_u32(r)? as usize;
    if rows == 0 || cols == 0 || rows.saturating_mul(cols) > (1 << 31) {
        return Err(Error::Checkpoint(format!("implausible matrix shape {rows}x{cols}")));
    }
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in &mut data {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    DenseMatrix::from_vec(rows, cols, data).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn variant_tag(v: Variant) -> u8 {
    match v {
        Variant::FaustTriplet => 0,
        Variant::FaustTuplet => 1,
        Variant::FaustRepresentative => 2,
        Variant::Ff => 3,
        Variant::Bp => 4,
    }
}

fn variant_from_tag(t: u8) -> Result<Variant> {
    Ok(match t {
        0 => Variant::FaustTriplet,
        1 => Variant::FaustTuplet,
        2 => Variant::FaustRepresentative,
        3 => Variant::Ff,
        4 => Variant::Bp,
        _ => return Err(Error::Checkpoint(format!("unknown variant tag {t}"))),
    })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u8(&mut w, variant_tag(ckpt.variant))?;
    let m = &ckpt.model;
    write_u8(
        &mut w,
        match m.layers[0].norm_mode {
            NormMode::Length => 0,
            NormMode::LayerNorm => 1,
        },
    )?;
    write_u8(
        &mut w,
        match m.forward_source {
            ForwardSource::Activation => 0,
            ForwardSource::Embedding => 1,
        },
    )?;
    write_u32(&mut w, m.num_classes as u32)?;
    write_u32(&mut w, m.emb_dim as u32)?;
    write_u64(&mut w, m.init_seed)?;
    write_u32(&mut w, m.arch.len() as u32)?;
    for &d in &m.arch {
        write_u32(&mut w, d as u32)?;
    }
    for layer in &m.layers {
        write_matrix(&mut w, &layer.w1)?;
        write_matrix(&mut w, &layer.b1)?;
        write_matrix(&mut w, &layer.w2)?;
    }
    match &m.head {
        Some(head) => {
            write_u8(&mut w, 1)?;
            write_matrix(&mut w, &head.w)?;
            write_matrix(&mut w, &head.b)?;
        }
        None => write_u8(&mut w, 0)?,
    }
    match &ckpt.representative_indices {
        Some(idx) => {
            write_u8(&mut w, 1)?;
            write_u32(&mut w, idx.len() as u32)?;
            for &i in idx {
                write_u64(&mut w, i as u64)?;
            }
        }
        None => write_u8(&mut w, 0)?,
    }
    write_u32(&mut w, ckpt.centroid_k as u32)?;
    write_u64(&mut w, ckpt.centroid_seed)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint or unsupported version)",
            path.display()
        )));
    }
    let variant = variant_from_tag(read_u8(&mut r)?)?;
    let norm_mode = match read_u8(&mut r)? {
        0 => NormMode::Length,
        1 => NormMode::LayerNorm,
        t => return Err(Error::Checkpoint(format!("unknown norm mode tag {t}"))),
    };
    let forward_source = match read_u8(&mut r)? {
        0 => ForwardSource::Activation,
        1 => ForwardSource::Embedding,
        t => return Err(Error::Checkpoint(format!("unknown forward source tag {t}"))),
    };
    let num_classes = read_u32(&mut r)? as usize;
    let emb_dim = read_u32(&mut r)? as usize;
    let init_seed = read_u64(&mut r)?;
    let arch_len = read_u32(&mut r)? as usize;
    let mut arch = Vec::with_capacity(arch_len);
    for _ in 0..arch_len {
        arch.push(read_u32(&mut r)? as usize);
    }
    if arch.len() < 2 {
        return Err(Error::Checkpoint("arch must list input plus layers".into()));
    }
    let mut layers = Vec::with_capacity(arch.len() - 1);
    for _ in 0..arch.len() - 1 {
        let w1 = read_matrix(&mut r)?;
        let b1 = read_matrix(&mut r)?;
        let w2 = read_matrix(&mut r)?;
        layers.push(LocalLayer {
            adam_w1: AdamState::new(w1.rows(), w1.cols(), 0.0),
            adam_b1: AdamState::new(b1.rows(), b1.cols(), 0.0),
            adam_w2: AdamState::new(w2.rows(), w2.cols(), 0.0),
            w1,
            b1,
            w2,
            norm_mode,
        });
    }
    let head = if read_u8(&mut r)? == 1 {
        let w = read_matrix(&mut r)?;
        let b = read_matrix(&mut r)?;
        Some(LinearHead {
            adam_w: AdamState::new(w.rows(), w.cols(), 0.0),
            adam_b: AdamState::new(b.rows(), b.cols(), 0.0),
            w,
            b,
        })
    } else {
        None
    };
    let representative_indices = if read_u8(&mut r)? == 1 {
        let n = read_u32(&mut r)? as usize;
        let mut idx = Vec::with_capacity(n);
        for _ in 0..n {
            idx.push(read_u64(&mut r)? as usize);
        }
        Some(idx)
    } else {
        None
    };
    let centroid_k = read_u32(&mut r)? as usize;
    let centroid_seed = read_u64(&mut r)?;
    Ok(Checkpoint {
        model: Model {
            layers,
            head,
            forward_source,
            arch,
            emb_dim,
            num_classes,
            init_seed,
        },
        variant,
        representative_indices,
        centroid_k,
        centroid_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tmp(name: &str) -> PathBuf {
        let mut p = std::env::temp_dir();
        p.push(format!("faust-ckpt-test-{}-{name}", std::process::id()));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::new(
            &[6, 5, 4],
            3,
            3,
            0.01,
            NormMode::Length,
            ForwardSource::Activation,
            77,
        )
        .unwrap();
        let ckpt = Checkpoint {
            model,
            variant: Variant::FaustRepresentative,
            representative_indices: Some(vec![4, 0, 9]),
            centroid_k: 100,
            centroid_seed: 5,
        };
        let path = tmp("roundtrip.ckpt");
        save(&ckpt, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.variant, Variant::FaustRepresentative);
        assert_eq!(loaded.representative_indices, Some(vec![4, 0, 9]));
        assert_eq!(loaded.model.arch, ckpt.model.arch);
        assert_eq!(loaded.model.init_seed, 77);
        for (a, b) in loaded.model.layers.iter().zip(&ckpt.model.layers) {
            assert_eq!(a.w1, b.w1);
            assert_eq!(a.b1, b.b1);
            assert_eq!(a.w2, b.w2);
        }
        // write again: byte-identical files
        let path2 = tmp("roundtrip2.ckpt");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
        std::fs::remove_file(path).ok();
        std::fs::remove_file(path2).ok();
    }

    #[test]
    fn head_survives_round_trip() {
        let model = Model::new_with_head(
            &[4, 3],
            2,
            5,
            0.01,
            NormMode::LayerNorm,
            ForwardSource::Activation,
            1,
        )
        .unwrap();
        let ckpt = Checkpoint {
            model,
            variant: Variant::Bp,
            representative_indices: None,
            centroid_k: 100,
            centroid_seed: 0,
        };
        let path = tmp("head.ckpt");
        save(&ckpt, &path).unwrap();
        let loaded = load(&path).unwrap();
        let h0 = ckpt.model.head.as_ref().unwrap();
        let h1 = loaded.model.head.as_ref().unwrap();
        assert_eq!(h0.w, h1.w);
        assert_eq!(h0.b, h1.b);
        assert_eq!(loaded.model.layers[0].norm_mode, NormMode::LayerNorm);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn garbage_file_is_a_checkpoint_error() {
        let path = tmp("garbage.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        match load(&path) {
            Err(Error::Checkpoint(_)) => {}
            other => panic!("expected checkpoint error, got {other:?}"),
        }
        std::fs::remove_file(path).ok();
    }
}
