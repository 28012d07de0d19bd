//! `MUN1` checkpoint files.
//!
//! Layout (little endian): magic `MUN1`, u32 format version, u64 config
//! hash, u32 epoch, f32 validation loss, u32 tensor count, then per tensor
//! u16 name length + name bytes, u8 rank, u32 dims, f32 data.

use std::io::{Read, Write};
use std::path::Path;

use softseg_core::model::{Checkpoint, TensorData};

use super::FormatError;

pub const MAGIC: &[u8; 4] = b"MUN1";

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), FormatError> {
    let mut buffer = Vec::new();
    buffer.extend_from_slice(MAGIC);
    buffer.extend_from_slice(&ckpt.format_version.to_le_bytes());
    buffer.extend_from_slice(&ckpt.config_hash.to_le_bytes());
    buffer.extend_from_slice(&ckpt.epoch.to_le_bytes());
    buffer.extend_from_slice(&ckpt.val_loss.to_le_bytes());
    buffer.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for tensor in &ckpt.tensors {
        let name = tensor.name.as_bytes();
        buffer.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buffer.extend_from_slice(name);
        buffer.push(tensor.shape.len() as u8);
        for &dim in &tensor.shape {
            buffer.extend_from_slice(&dim.to_le_bytes());
        }
        for &v in &tensor.data {
            buffer.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    file.write_all(&buffer).map_err(|e| FormatError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, FormatError> {
    let mut file = std::fs::File::open(path).map_err(|e| FormatError::io(path, e))?;
    let mut data = Vec::new();
    file.read_to_end(&mut data).map_err(|e| FormatError::io(path, e))?;
    if data.len() < 28 || &data[0..4] != MAGIC {
        return Err(FormatError::BadMagic {
            path: path.display().to_string(),
            expected: "MUN1",
        });
    }

    struct Cursor<'a> {
        data: &'a [u8],
        off: usize,
    }
    impl<'a> Cursor<'a> {
        fn take(&mut self, n: usize, path: &Path) -> Result<&'a [u8], FormatError> {
            if self.off + n > self.data.len() {
                return Err(FormatError::Truncated {
                    path: path.display().to_string(),
                });
            }
            let slice = &self.data[self.off..self.off + n];
            self.off += n;
            Ok(slice)
        }
    }

    let mut cur = Cursor { data: &data, off: 4 };
    let format_version = u32::from_le_bytes(cur.take(4, path)?.try_into().unwrap());
    let config_hash = u64::from_le_bytes(cur.take(8, path)?.try_into().unwrap());
    let epoch = u32::from_le_bytes(cur.take(4, path)?.try_into().unwrap());
    let val_loss = f32::from_le_bytes(cur.take(4, path)?.try_into().unwrap());
    let count = u32::from_le_bytes(cur.take(4, path)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(cur.take(2, path)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(cur.take(name_len, path)?.to_vec())
            .map_err(|_| FormatError::parse(path, "tensor name is not utf-8"))?;
        let rank = cur.take(1, path)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(cur.take(4, path)?.try_into().unwrap()));
        }
        let len: usize = shape.iter().map(|&d| d as usize).product();
        let mut values = Vec::with_capacity(len);
        for chunk in cur.take(len * 4, path)?.chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push(TensorData {
            name,
            shape,
            data: values,
        });
    }
    Ok(Checkpoint {
        format_version,
        config_hash,
        epoch,
        val_loss,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use softseg_core::model::{
        make_checkpoint, MiniUNet, OptimizerState, PlateauScheduler, TrainerConfig,
    };

    #[test]
    fn checkpoint_file_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainerConfig::default();
        let model = MiniUNet::new(4, 11);
        let opt = OptimizerState {
            m: model.zero_gradients(),
            v: model.zero_gradients(),
            t: 42,
        };
        let sched = PlateauScheduler::new(5e-5, 1.0 / 3.0, 2, 1e-7);
        let ckpt = make_checkpoint(&model, &opt, &sched, &config, 7, 0.1234);

        let path = dir.path().join("model.mun1");
        save_checkpoint(&path, &ckpt).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let path2 = dir.path().join("model2.mun1");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.mun1");
        std::fs::write(&path, b"SLT1aaaaaaaaaaaaaaaaaaaaaaaaaaaa").unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            FormatError::BadMagic { .. }
        ));
    }
}
