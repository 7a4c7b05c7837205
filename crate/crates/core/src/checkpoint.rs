//! Model checkpoints: every parameter and batch-norm buffer as little-endian
//! f32 tensors in a safetensors container, with the model configuration and
//! training metadata in the header.

use std::collections::HashMap;
use std::path::Path;

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::loss::LossBreakdown;
use crate::nn::Real;
use crate::vae::{Vae, VaeConfig};
use crate::{Error, Result};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
const FORMAT: &str = "dfcvae-checkpoint-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vae_config: VaeConfig,
    /// Zero-based epoch whose weights were saved.
    pub epoch: usize,
    pub validation: LossBreakdown,
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Writes `model` to `path` (via a temporary file and rename).
pub fn save<F: Real>(model: &Vae<F>, meta: &CheckpointMeta, path: &Path) -> Result<()> {
    if meta.vae_config != *model.config() {
        return Err(ckpt_err(path, "metadata config differs from the model's"));
    }
    let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for p in model.params() {
        blobs.push((p.name.clone(), p.shape.clone(), f32_bytes(&p.value)));
    }
    for b in model.buffers() {
        blobs.push((b.name.clone(), vec![b.value.len()], f32_bytes(&b.value)));
    }
    let views = blobs
        .iter()
        .map(|(n, s, d)| {
            TensorView::new(Dtype::F32, s.clone(), d)
                .map(|v| (n.clone(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut header = HashMap::new();
    header.insert("format".to_string(), FORMAT.to_string());
    header.insert(
        "meta".to_string(),
        serde_json::to_string(meta).map_err(|e| ckpt_err(path, e))?,
    );
    let bytes = safetensors::serialize(views, Some(header)).map_err(|e| ckpt_err(path, e))?;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let tmp = path.with_extension("bin.tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn f32_bytes<F: Real>(values: &[F]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|v| (v.as_f64() as f32).to_le_bytes())
        .collect()
}

/// Metadata only; the tensor payload is parsed but not materialised.
pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let (_, st_meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    parse_meta(path, st_meta.metadata().as_ref())
}

fn parse_meta(path: &Path, header: Option<&HashMap<String, String>>) -> Result<CheckpointMeta> {
    let header = header.ok_or_else(|| ckpt_err(path, "missing metadata header"))?;
    if header.get("format").map(String::as_str) != Some(FORMAT) {
        return Err(ckpt_err(path, "not a model checkpoint"));
    }
    let meta = header
        .get("meta")
        .ok_or_else(|| ckpt_err(path, "missing model metadata"))?;
    let meta: CheckpointMeta = serde_json::from_str(meta).map_err(|e| ckpt_err(path, e))?;
    meta.vae_config.validate()?;
    Ok(meta)
}

/// Loads a checkpoint, checking every tensor name and shape against the
/// stored configuration.
pub fn load<F: Real>(path: &Path) -> Result<(Vae<F>, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| ckpt_err(path, e))?;
    let (_, st_meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let meta = parse_meta(path, st_meta.metadata().as_ref())?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut model = Vae::<F>::new(meta.vae_config.clone(), 0)?;
    let fetch = |name: &str, shape: &[usize]| -> Result<Vec<F>> {
        let view = st.tensor(name).map_err(|e| ckpt_err(path, format!("{name}: {e}")))?;
        if view.dtype() != Dtype::F32 || view.shape() != shape {
            return Err(ckpt_err(
                path,
                format!("{name}: stored {:?} {:?}, expected F32 {shape:?}", view.dtype(), view.shape()),
            ));
        }
        Ok(view
            .data()
            .chunks_exact(4)
            .map(|c| F::from_f64v(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect())
    };
    let mut expected = 0;
    for p in model.params_mut() {
        p.value = fetch(&p.name, &p.shape)?;
        expected += 1;
    }
    for b in model.buffers_mut() {
        b.value = fetch(&b.name, &[b.value.len()])?;
        expected += 1;
    }
    if st.len() != expected {
        return Err(ckpt_err(path, format!("{} tensors stored, {expected} expected", st.len())));
    }
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn tiny() -> VaeConfig {
        VaeConfig {
            latent_size: 4,
            image_size: 16,
            encoder_widths: vec![4, 8],
            decoder_widths: vec![8, 4],
            kl_weight: 1.0,
        }
    }

    fn meta(config: VaeConfig) -> CheckpointMeta {
        CheckpointMeta {
            vae_config: config,
            epoch: 3,
            validation: LossBreakdown::combine(0.5, 0.25, 1.0),
        }
    }

    #[test]
    fn roundtrip_is_exact_for_f32() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(CHECKPOINT_FILE);
        let mut model = Vae::<f32>::new(tiny(), 9).unwrap();
        model.buffers_mut()[0].value[0] = 0.125;
        save(&model, &meta(tiny()), &path).unwrap();
        let (loaded, m) = load::<f32>(&path).unwrap();
        assert_eq!(m, meta(tiny()));
        assert_eq!(read_meta(&path).unwrap(), m);
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.value, b.value);
        }
        for (a, b) in model.buffers().iter().zip(loaded.buffers()) {
            assert_eq!(a.value, b.value);
        }
        let x = Tensor::from_vec([1, 3, 16, 16], vec![0.5f32; 768]);
        assert_eq!(model.reconstruct(&x).unwrap(), loaded.reconstruct(&x).unwrap());
    }

    #[test]
    fn rejects_garbage_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(matches!(load::<f32>(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(load::<f32>(&dir.path().join("missing.bin")), Err(Error::Checkpoint(_))));

        let model = Vae::<f32>::new(tiny(), 1).unwrap();
        let other = VaeConfig {
            latent_size: 8,
            ..tiny()
        };
        assert!(save(&model, &meta(other.clone()), &path).is_err());

        // Header claims a different latent size than the stored tensors.
        let mut views = Vec::new();
        let blobs: Vec<(String, Vec<usize>, Vec<u8>)> = model
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), f32_bytes(&p.value)))
            .collect();
        for (n, s, d) in &blobs {
            views.push((n.clone(), TensorView::new(Dtype::F32, s.clone(), d).unwrap()));
        }
        let mut header = HashMap::new();
        header.insert("format".to_string(), FORMAT.to_string());
        header.insert("meta".to_string(), serde_json::to_string(&meta(other)).unwrap());
        std::fs::write(&path, safetensors::serialize(views, Some(header)).unwrap()).unwrap();
        let err = load::<f32>(&path).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }
}
