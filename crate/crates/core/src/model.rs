//! The full codec model: every network, the parameter store, the noise
//! schedule, and checkpoint persistence. One model is trained per lambda.

use crate::config::{ModelConfig, ScheduleConfig};
use crate::context::{ContextNet, FeatureExtractor};
use crate::diffusion::{DenoisingUNet, NoiseSchedule};
use crate::entropy::{crc32, CdfStore};
use crate::error::{CodecError, Result};
use crate::latent::{ContextualCoder, PixelCoder};
use crate::motion::{FlowNet, MotionCoder};
use crate::tca::{init_tca, TcaNetwork};
use dvco_autograd::nn::ParamStore;
use dvco_autograd::serialize::{read_params, write_params};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::Read;
use std::path::Path;

const CKPT_MAGIC: &[u8; 4] = b"DVCK";
const CKPT_VERSION: u8 = 1;

/// Training progress marker stored in checkpoints; the pipeline refuses to
/// encode with a model that never finished any stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainStage {
    Untrained,
    Base,
    Eight,
    Nine,
}

/// Where LoRA pairs are attached.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoraPlacement {
    UnetOnly,
    EncoderToo,
    DecoderToo,
}

impl LoraPlacement {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "unet_only" => Ok(LoraPlacement::UnetOnly),
            "encoder_too" => Ok(LoraPlacement::EncoderToo),
            "decoder_too" => Ok(LoraPlacement::DecoderToo),
            other => Err(CodecError::config(format!("unknown LoRA placement: {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LoraPlacement::UnetOnly => "unet_only",
            LoraPlacement::EncoderToo => "encoder_too",
            LoraPlacement::DecoderToo => "decoder_too",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LoraSpec {
    pub placement: LoraPlacement,
    pub rank: usize,
    pub alpha: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    schedule: ScheduleConfig,
    lambda_index: usize,
    stage: TrainStage,
    lora: Option<LoraSpec>,
    seed: u64,
}

pub struct CodecModel {
    pub cfg: ModelConfig,
    pub schedule_cfg: ScheduleConfig,
    pub lambda_index: usize,
    pub store: ParamStore,
    pub flow: FlowNet,
    pub motion: MotionCoder,
    pub feature: FeatureExtractor,
    pub context: ContextNet,
    pub pixel: PixelCoder,
    pub coder: ContextualCoder,
    pub unet: DenoisingUNet,
    pub tca: TcaNetwork,
    pub schedule: NoiseSchedule,
    pub cdfs: CdfStore,
    stage: TrainStage,
    lora: Option<LoraSpec>,
    seed: u64,
}

impl CodecModel {
    /// Build a freshly initialized model. All weights derive from `seed`.
    pub fn new(
        cfg: ModelConfig,
        schedule_cfg: ScheduleConfig,
        lambda_index: usize,
        seed: u64,
    ) -> Result<Self> {
        if lambda_index >= crate::config::LAMBDA_SET.len() {
            return Err(CodecError::config(format!(
                "lambda index {lambda_index} outside 0..{}",
                crate::config::LAMBDA_SET.len()
            )));
        }
        let schedule = NoiseSchedule::from_config(&schedule_cfg)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let flow = FlowNet::new(&mut store, &mut rng, &cfg);
        let motion = MotionCoder::new(&mut store, &mut rng, &cfg);
        let feature = FeatureExtractor::new(&mut store, &mut rng, &cfg);
        let context = ContextNet::new(&mut store, &mut rng, &cfg);
        let pixel = PixelCoder::new(&mut store, &mut rng, &cfg);
        let coder = ContextualCoder::new(&mut store, &mut rng, &cfg);
        let unet = DenoisingUNet::new(&mut store, &mut rng, &cfg);
        let tca = init_tca(&mut store, &mut rng, &unet, &cfg)?;
        Ok(CodecModel {
            cfg,
            schedule_cfg,
            lambda_index,
            store,
            flow,
            motion,
            feature,
            context,
            pixel,
            coder,
            unet,
            tca,
            schedule,
            cdfs: CdfStore::new(),
            stage: TrainStage::Untrained,
            lora: None,
            seed,
        })
    }

    pub fn lambda(&self) -> f64 {
        crate::config::LAMBDA_SET[self.lambda_index]
    }

    pub fn stage(&self) -> TrainStage {
        self.stage
    }

    pub fn set_stage(&mut self, stage: TrainStage) {
        self.stage = stage;
    }

    pub fn lora_spec(&self) -> Option<LoraSpec> {
        self.lora
    }

    /// Attach LoRA pairs per the placement. Idempotence is not supported:
    /// attaching twice is a configuration error.
    pub fn apply_lora(&mut self, spec: LoraSpec) -> Result<()> {
        if self.lora.is_some() {
            return Err(CodecError::config("LoRA already applied to this model"));
        }
        if spec.rank == 0 {
            return Err(CodecError::config("LoRA rank must be at least 1"));
        }
        // A dedicated stream keeps LoRA init independent of build order.
        let mut rng = ChaCha12Rng::seed_from_u64(self.seed ^ 0x4C6F_5241);
        self.unet
            .attach_lora(&mut self.store, &mut rng, spec.rank, spec.alpha);
        match spec.placement {
            LoraPlacement::UnetOnly => {}
            LoraPlacement::EncoderToo => {
                for c in self.pixel.encoder_convs() {
                    c.attach_lora(&mut self.store, &mut rng, spec.rank, spec.alpha);
                }
            }
            LoraPlacement::DecoderToo => {
                for c in self.pixel.decoder_convs() {
                    c.attach_lora(&mut self.store, &mut rng, spec.rank, spec.alpha);
                }
            }
        }
        self.lora = Some(spec);
        Ok(())
    }

    /// 16-byte identifier binding bitstreams to the exact weights that
    /// produced them: a truncated SHA-256 of the serialized parameters.
    pub fn model_id(&self) -> Result<[u8; 16]> {
        let mut buf = Vec::new();
        write_params(&mut buf, &self.store)?;
        let digest = Sha256::digest(&buf);
        let mut id = [0u8; 16];
        id.copy_from_slice(&digest[..16]);
        Ok(id)
    }

    /// Serialize the full checkpoint (config, stage, weights) to bytes.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = CheckpointMeta {
            model: self.cfg.clone(),
            schedule: self.schedule_cfg.clone(),
            lambda_index: self.lambda_index,
            stage: self.stage,
            lora: self.lora,
            seed: self.seed,
        };
        let meta_toml =
            toml::to_string(&meta).map_err(|e| CodecError::config(format!("meta encode: {e}")))?;
        let mut body = Vec::new();
        body.extend_from_slice(CKPT_MAGIC);
        body.push(CKPT_VERSION);
        body.extend_from_slice(&(meta_toml.len() as u32).to_le_bytes());
        body.extend_from_slice(meta_toml.as_bytes());
        write_params(&mut body, &self.store)?;
        body.extend_from_slice(&crc32(&body).to_le_bytes());
        Ok(body)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 {
            return Err(CodecError::format("checkpoint too short"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        if crc32(body) != stored {
            return Err(CodecError::format("checkpoint checksum mismatch"));
        }
        let mut r = body;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(CodecError::format("not a checkpoint file"));
        }
        let mut ver = [0u8; 1];
        r.read_exact(&mut ver)?;
        if ver[0] != CKPT_VERSION {
            return Err(CodecError::format(format!(
                "unsupported checkpoint version {}",
                ver[0]
            )));
        }
        let mut len4 = [0u8; 4];
        r.read_exact(&mut len4)?;
        let mlen = u32::from_le_bytes(len4) as usize;
        if r.len() < mlen {
            return Err(CodecError::format("checkpoint meta truncated"));
        }
        let (meta_bytes, rest) = r.split_at(mlen);
        let meta: CheckpointMeta = toml::from_str(
            std::str::from_utf8(meta_bytes)
                .map_err(|_| CodecError::format("checkpoint meta not UTF-8"))?,
        )
        .map_err(|e| CodecError::format(format!("checkpoint meta: {e}")))?;

        let mut model = CodecModel::new(meta.model, meta.schedule, meta.lambda_index, meta.seed)?;
        if let Some(spec) = meta.lora {
            model.apply_lora(spec)?;
        }
        let mut pr = rest;
        read_params(&mut pr, &model.store)?;
        model.stage = meta.stage;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use dvco_autograd::nn::uniform_init;
    use dvco_autograd::tensor::Tensor;

    fn tiny_model(seed: u64) -> CodecModel {
        CodecModel::new(
            ModelConfig::tiny(),
            ScheduleConfig { steps: 50, ..Default::default() },
            1,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn build_is_deterministic() {
        let a = tiny_model(5);
        let b = tiny_model(5);
        assert_eq!(a.model_id().unwrap(), b.model_id().unwrap());
        let c = tiny_model(6);
        assert_ne!(a.model_id().unwrap(), c.model_id().unwrap());
    }

    #[test]
    fn save_load_roundtrip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut m = tiny_model(7);
        m.apply_lora(LoraSpec {
            placement: LoraPlacement::UnetOnly,
            rank: 2,
            alpha: 2.0,
        })
        .unwrap();
        m.set_stage(TrainStage::Eight);
        m.save(&path).unwrap();
        let l = CodecModel::load(&path).unwrap();
        assert_eq!(l.stage(), TrainStage::Eight);
        assert_eq!(l.lora_spec().unwrap().rank, 2);
        assert_eq!(m.model_id().unwrap(), l.model_id().unwrap());

        // Loaded model computes identically.
        let mut rng = <ChaCha12Rng as SeedableRng>::seed_from_u64(8);
        let f = Tensor::constant(uniform_init(&mut rng, &[1, 3, 32, 32], 0.5));
        let a = m.pixel.encode(&f);
        let b = l.pixel.encode(&f);
        for (x, y) in a.data().iter().zip(b.data().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = tiny_model(9);
        m.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(CodecModel::load(&path), Err(CodecError::Format(_))));
    }

    #[test]
    fn double_lora_rejected() {
        let mut m = tiny_model(10);
        let spec = LoraSpec { placement: LoraPlacement::DecoderToo, rank: 2, alpha: 2.0 };
        m.apply_lora(spec).unwrap();
        assert!(matches!(m.apply_lora(spec), Err(CodecError::Config(_))));
    }

    #[test]
    fn bad_lambda_rejected() {
        let err = CodecModel::new(ModelConfig::tiny(), ScheduleConfig::default(), 4, 0);
        assert!(matches!(err, Err(CodecError::Config(_))));
    }
}
