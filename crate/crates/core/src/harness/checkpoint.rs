//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic `ICKPT001`, little-endian u64 JSON length, a JSON
//! header (config, progress counters, parameter names/shapes, memory bank,
//! RNG stream states), then raw little-endian f64 blobs: every parameter in
//! header order followed by every optimizer velocity in the same order.

use ndarray::{ArrayD, IxDyn};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use super::config::TrainConfig;
use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;

const MAGIC: &[u8; 8] = b"ICKPT001";

/// Serialized RNG stream states so resumed runs replay exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngStates {
    pub data_order: ChaCha8Rng,
    pub rpn: ChaCha8Rng,
    pub roi: ChaCha8Rng,
    pub augment: ChaCha8Rng,
    pub bank: ChaCha8Rng,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub config: TrainConfig,
    /// Next epoch to run (== epochs when training finished).
    pub epoch_next: usize,
    pub step: usize,
    pub best_ap50: Option<f64>,
    pub num_classes: usize,
    /// `(name, shape)` for every parameter, in storage order.
    pub params: Vec<(String, Vec<usize>)>,
    pub bank: MemoryBank,
    pub rng: RngStates,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<ArrayD<f64>>,
    pub velocities: Vec<ArrayD<f64>>,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &[Rc<ArrayD<f64>>],
    velocities: &[ArrayD<f64>],
) -> Result<()> {
    let header = serde_json::to_vec(meta).expect("checkpoint header serializes");
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    let mut write_blob = |arr: &ArrayD<f64>| -> Result<()> {
        for v in arr.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for p in params {
        write_blob(p)?;
    }
    for v in velocities {
        write_blob(v)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic (not a checkpoint, or incompatible version)",
            path.display()
        )));
    }
    let mut len = [0u8; 8];
    f.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    f.read_exact(&mut header)?;
    let meta: CheckpointMeta = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("{}: header: {e}", path.display())))?;
    let mut read_blob = |shape: &[usize]| -> Result<ArrayD<f64>> {
        let n: usize = shape.iter().product();
        let mut data = vec![0f64; n];
        let mut buf = [0u8; 8];
        for v in &mut data {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        ArrayD::from_shape_vec(IxDyn(shape), data)
            .map_err(|e| Error::Checkpoint(format!("bad blob shape: {e}")))
    };
    let mut params = Vec::with_capacity(meta.params.len());
    for (_, shape) in &meta.params {
        params.push(read_blob(shape)?);
    }
    let mut velocities = Vec::with_capacity(meta.params.len());
    for (_, shape) in &meta.params {
        velocities.push(read_blob(shape)?);
    }
    Ok(Checkpoint {
        meta,
        params,
        velocities,
    })
}

/// Rebuild the detector a checkpoint was saved from.
pub fn detector_from_checkpoint(ckpt: &Checkpoint) -> Result<Detector> {
    let mut det = Detector::new(ckpt.meta.config.detector.clone(), ckpt.meta.config.seed);
    let expected: Vec<(String, Vec<usize>)> = det
        .named_params()
        .iter()
        .map(|(n, p)| (n.clone(), p.shape().to_vec()))
        .collect();
    if expected != ckpt.meta.params {
        return Err(Error::Checkpoint(
            "checkpoint parameter layout does not match its config".into(),
        ));
    }
    for (slot, value) in det.params_mut().into_iter().zip(ckpt.params.iter()) {
        *slot = Rc::new(value.clone());
    }
    Ok(det)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, stream};

    #[test]
    fn round_trip() {
        let cfg = TrainConfig {
            detector: crate::detector::DetectorConfig {
                num_classes: 2,
                backbone_widths: [4, 4, 8, 8],
                roi_channels: 8,
                roi_pool: 3,
                head_hidden: 8,
                class_embed_dim: 16,
                anchor_scales: vec![16.0],
                rpn_channels: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        let det = Detector::new(cfg.detector.clone(), 5);
        let params: Vec<_> = det.named_params().iter().map(|(_, p)| Rc::clone(p)).collect();
        let velocities: Vec<ArrayD<f64>> =
            params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        let mut bank = MemoryBank::new(2, 4, 16, vec![0.7, 0.7]).unwrap();
        bank.insert_confident(&vec![0.5; 16], 1, 0.9).unwrap();
        let meta = CheckpointMeta {
            version: 1,
            config: cfg,
            epoch_next: 3,
            step: 42,
            best_ap50: Some(0.5),
            num_classes: 2,
            params: det
                .named_params()
                .iter()
                .map(|(n, p)| (n.clone(), p.shape().to_vec()))
                .collect(),
            bank,
            rng: RngStates {
                data_order: rng_stream(1, stream::DATA_ORDER),
                rpn: rng_stream(1, stream::RPN_SAMPLE),
                roi: rng_stream(1, stream::ROI_SAMPLE),
                augment: rng_stream(1, stream::AUGMENT),
                bank: rng_stream(1, stream::BANK_SAMPLE),
            },
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("test.ckpt");
        save_checkpoint(&path, &meta, &params, &velocities).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.step, 42);
        assert_eq!(loaded.meta.epoch_next, 3);
        assert_eq!(loaded.meta.bank.len(), 1);
        for (a, b) in params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.as_ref(), b);
        }
        let det2 = detector_from_checkpoint(&loaded).unwrap();
        for ((_, a), b) in det2.named_params().iter().zip(params.iter()) {
            assert_eq!(a.as_ref(), b.as_ref());
        }
        // corrupt magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(Error::Checkpoint(_))
        ));
    }
}
