//! On-disk checkpoints: a directory holding `manifest.json` and `params.bin`.
//!
//! `params.bin` layout (little-endian): magic `EXFP`, u32 version, u32 tensor
//! count, then per tensor: u32 name length, UTF-8 name, u32 rank, u64 dims,
//! f32 values. The manifest pins the blob length and SHA-256 so a truncated or
//! swapped blob is rejected before any state is built.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Model, ModelConfig, ModelKind};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::face::RobotConfig;
use crate::nn::{ParamLayout, Params};

const MAGIC: &[u8; 4] = b"EXFP";
const BLOB_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const BLOB_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub robot: String,
    pub dof: usize,
    pub blendshape_dim: usize,
    pub schedule: ScheduleConfig,
    pub training_steps: u64,
    #[serde(default)]
    pub plant_seed: Option<u64>,
    pub tensors: Vec<TensorInfo>,
    pub blob_bytes: u64,
    pub blob_sha256: String,
}

/// A trained parameter set with the metadata needed to rebuild its model.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub robot: String,
    pub schedule: ScheduleConfig,
    pub training_steps: u64,
    pub plant_seed: Option<u64>,
    pub params: Params<f32>,
}

impl Checkpoint {
    /// Freshly initialised parameters, e.g. for timing runs.
    pub fn untrained(
        kind: ModelKind,
        model: ModelConfig,
        robot: &str,
        schedule: ScheduleConfig,
        seed: u64,
    ) -> Result<Self> {
        use rand::SeedableRng;
        let m = Model::new(kind, model)?;
        let params = m.init(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            kind,
            model,
            robot: robot.to_string(),
            schedule,
            training_steps: 0,
            plant_seed: None,
            params,
        })
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::new(self.kind, self.model)
    }

    /// Short content hash used to identify the checkpoint in reports.
    pub fn id(&self) -> String {
        let digest = Sha256::digest(encode_blob(&self.params));
        hex(&digest[..6])
    }

    fn manifest(&self, blob: &[u8]) -> Manifest {
        Manifest {
            format_version: BLOB_VERSION,
            kind: self.kind,
            model: self.model,
            robot: self.robot.clone(),
            dof: self.model.dof,
            blendshape_dim: self.model.blendshape_dim,
            schedule: self.schedule,
            training_steps: self.training_steps,
            plant_seed: self.plant_seed,
            tensors: self
                .params
                .layout()
                .entries()
                .iter()
                .map(|e| TensorInfo {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                })
                .collect(),
            blob_bytes: blob.len() as u64,
            blob_sha256: hex(&Sha256::digest(blob)),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_blob(params: &Params<f32>) -> Vec<u8> {
    let layout = params.layout();
    let mut out = Vec::with_capacity(16 + 4 * layout.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.extend_from_slice(&(layout.entries().len() as u32).to_le_bytes());
    for e in layout.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &params.data()[e.offset..e.offset + e.len] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("parameter blob is truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a blob against the tensor layout the manifest's model expects.
fn decode_blob(blob: &[u8], layout: &Arc<ParamLayout>) -> Result<Params<f32>> {
    let mut r = Reader { buf: blob, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic in parameter blob".into()));
    }
    let version = r.u32()?;
    if version != BLOB_VERSION {
        return Err(Error::Checkpoint(format!("unsupported blob version {version}")));
    }
    let count = r.u32()? as usize;
    if count != layout.entries().len() {
        return Err(Error::Checkpoint(format!(
            "blob holds {count} tensors, model expects {}",
            layout.entries().len()
        )));
    }
    let mut data = Vec::with_capacity(layout.len());
    for e in layout.entries() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if name != e.name || shape != e.shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name} {shape:?} does not match expected {} {:?}",
                e.name, e.shape
            )));
        }
        let bytes = r.take(4 * e.len)?;
        data.extend(
            bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))),
        );
    }
    if r.pos != blob.len() {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Params::from_vec(Arc::clone(layout), data)
        .ok_or_else(|| Error::Checkpoint("parameter count mismatch".into()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `dir/params.bin` then `dir/manifest.json`, each via rename, so a
/// crash never leaves a manifest pointing at a partial blob.
pub fn save_checkpoint(dir: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let blob = encode_blob(&ckpt.params);
    let manifest = ckpt.manifest(&blob);
    write_atomic(&dir.join(BLOB_FILE), &blob)?;
    write_atomic(
        &dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(())
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path: PathBuf = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("corrupt manifest {}: {e}", path.display())))
}

/// Loads a checkpoint, refusing it when `robot` is given and its dof or
/// blendshape dimension disagrees with the manifest.
pub fn load_checkpoint(dir: impl AsRef<Path>, robot: Option<&RobotConfig>) -> Result<Checkpoint> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.dof != manifest.model.dof || manifest.blendshape_dim != manifest.model.blendshape_dim
    {
        return Err(Error::Checkpoint("manifest dimensions are inconsistent".into()));
    }
    if let Some(robot) = robot {
        if robot.dof != manifest.dof {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} motors but robot {} has {}",
                manifest.dof, robot.name, robot.dof
            )));
        }
        if robot.blendshape_dim != manifest.blendshape_dim {
            return Err(Error::Checkpoint(format!(
                "checkpoint expects {} blendshape channels but robot {} uses {}",
                manifest.blendshape_dim, robot.name, robot.blendshape_dim
            )));
        }
    }
    let blob = fs::read(dir.join(BLOB_FILE))?;
    if blob.len() as u64 != manifest.blob_bytes {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, manifest records {}",
            blob.len(),
            manifest.blob_bytes
        )));
    }
    if hex(&Sha256::digest(&blob)) != manifest.blob_sha256 {
        return Err(Error::Checkpoint("blob checksum mismatch".into()));
    }
    let model = Model::new(manifest.kind, manifest.model)
        .map_err(|e| Error::Checkpoint(format!("invalid model config: {e}")))?;
    let expected: Vec<TensorInfo> = model
        .layout()
        .entries()
        .iter()
        .map(|e| TensorInfo {
            name: e.name.clone(),
            shape: e.shape.clone(),
        })
        .collect();
    if expected != manifest.tensors {
        return Err(Error::Checkpoint("manifest tensor list does not match the model".into()));
    }
    let params = decode_blob(&blob, model.layout())?;
    Ok(Checkpoint {
        kind: manifest.kind,
        model: manifest.model,
        robot: manifest.robot,
        schedule: manifest.schedule,
        training_steps: manifest.training_steps,
        plant_seed: manifest.plant_seed,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ckpt(kind: ModelKind) -> Checkpoint {
        let cfg = ModelConfig {
            dof: 4,
            blendshape_dim: 6,
            seq_len: 8,
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            d_ff: 16,
            mlp_hidden: 8,
            final_norm: false,
        };
        let model = Model::new(kind, cfg).unwrap();
        let mut params: Params<f32> = model.init(&mut ChaCha8Rng::seed_from_u64(9));
        // include values whose bit patterns must survive exactly
        params.data_mut()[0] = f32::MIN_POSITIVE;
        params.data_mut()[1] = -0.0;
        Checkpoint {
            kind,
            model: cfg,
            robot: "tiny".into(),
            schedule: ScheduleConfig::default(),
            training_steps: 17,
            plant_seed: Some(3),
            params,
        }
    }

    fn bits(p: &Params<f32>) -> Vec<u32> {
        p.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn round_trip_is_bitwise() {
        for kind in [ModelKind::Exface, ModelKind::Transformer, ModelKind::Mlp] {
            let dir = tempfile::tempdir().unwrap();
            let c = ckpt(kind);
            save_checkpoint(dir.path(), &c).unwrap();
            let back = load_checkpoint(dir.path(), None).unwrap();
            assert_eq!(bits(&back.params), bits(&c.params));
            assert_eq!(back.kind, kind);
            assert_eq!(back.model, c.model);
            assert_eq!(back.training_steps, 17);
            assert_eq!(back.plant_seed, Some(3));
            assert_eq!(back.id(), c.id());
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt(ModelKind::Exface)).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint(dir.path(), None),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn flipped_byte_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt(ModelKind::Mlp)).unwrap();
        let path = dir.path().join(BLOB_FILE);
        let mut blob = fs::read(&path).unwrap();
        let last = blob.len() - 1;
        blob[last] ^= 0x40;
        fs::write(&path, &blob).unwrap();
        assert!(load_checkpoint(dir.path(), None).is_err());
    }

    #[test]
    fn decoder_checks_structure_independently_of_checksum() {
        let c = ckpt(ModelKind::Exface);
        let blob = encode_blob(&c.params);
        assert!(decode_blob(&blob, c.params.layout()).is_ok());
        assert!(decode_blob(&blob[..blob.len() - 1], c.params.layout()).is_err());
        let mut bad = blob.clone();
        bad[0] = b'X';
        assert!(decode_blob(&bad, c.params.layout()).is_err());
    }

    #[test]
    fn robot_dof_mismatch_refuses_to_load() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &ckpt(ModelKind::Exface)).unwrap();
        let robot = RobotConfig::micheal();
        assert!(matches!(
            load_checkpoint(dir.path(), Some(&robot)),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_checkpoint(dir.path(), None).is_err());
    }
}
