//! Run configuration: one JSON document covering the world, the model
//! dims, and the three training stages. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bridge::{BridgeConfig, ConnectorKind};
use crate::maskhead::MaskHeadConfig;
use crate::numerics::ScheduleKind;
use crate::policy::PolicyConfig;
use crate::rewards::Lambdas;
use crate::synthworld::WorldConfig;
use crate::{LensError, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub patch: usize,
    pub max_prompt: usize,
    pub max_completion: usize,
    pub queries: usize,
    pub seg_dim: usize,
    pub connector: ConnectorKind,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 2,
            heads: 4,
            max_seq: 256,
            patch: 4,
            max_prompt: 160,
            max_completion: 96,
            queries: 64,
            seg_dim: 64,
            connector: ConnectorKind::Vit,
            enc_blocks: 2,
            dec_blocks: 2,
        }
    }
}

/// Stage 0: supervised bootstrap of the policy (template language modeling)
/// and the mask head (oracle box prompts), standing in for the pretrained
/// backbones the full-scale system starts from. The two phases run
/// separately: the language templates converge in a few hundred steps while
/// the box-to-mask decoder wants a longer schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapConfig {
    pub policy_epochs: usize,
    pub mask_epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub scheduler: ScheduleKind,
    pub warmup: u64,
    pub weight_decay: f64,
    /// Weight of the auxiliary box-regression term that makes the policy's
    /// hidden states carry target localization (the property a pretrained
    /// backbone would bring).
    pub aux_box_weight: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            policy_epochs: 3,
            mask_epochs: 5,
            batch: 16,
            lr: 2e-3,
            scheduler: ScheduleKind::Cosine,
            warmup: 0,
            weight_decay: 0.0,
            aux_box_weight: 2.0,
        }
    }
}

/// Stage 1: context-module alignment. Backbones frozen; cosine schedule.
/// Toy-scaled from the reference settings (lr 3e-4 vs 3e-5, batch 32 vs 128).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub scheduler: ScheduleKind,
    pub warmup: u64,
    pub weight_decay: f64,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch: 32,
            lr: 3e-4,
            scheduler: ScheduleKind::Cosine,
            warmup: 0,
            weight_decay: 0.0,
        }
    }
}

/// Stage 2: GRPO with unified rewards plus the supervised segmentation
/// term; linear schedule. Toy-scaled lr 3e-5 vs the reference 3e-6; the
/// schedule is step-based with a small per-step batch so a desk-scale run
/// finishes in minutes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub scheduler: ScheduleKind,
    pub warmup: u64,
    pub weight_decay: f64,
    pub group_size: usize,
    pub lambda_format: f64,
    pub lambda_box: f64,
    pub lambda_seg: f64,
    pub alpha: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub beta: f64,
    pub inner_epochs: usize,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            lr: 3e-5,
            scheduler: ScheduleKind::Linear,
            warmup: 0,
            weight_decay: 0.0,
            group_size: 8,
            lambda_format: 1.0,
            lambda_box: 1.0,
            lambda_seg: 1.0,
            alpha: 1.0,
            delta: 1e-4,
            epsilon: 0.2,
            beta: 0.04,
            inner_epochs: 1,
            temperature: 1.0,
            max_new_tokens: 48,
        }
    }
}

/// Budgets for the ablation harnesses (every arm gets the same budget).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub align_epochs: usize,
    pub rl_steps: u64,
    pub seeds: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            align_epochs: 2,
            rl_steps: 60,
            seeds: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// 1 = fully sequential; any other value = parallel rollout/eval phases
    /// (results are bit-identical either way).
    pub threads: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub bootstrap: BootstrapConfig,
    pub align: AlignConfig,
    pub rl: RlConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            threads: 0,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            bootstrap: BootstrapConfig::default(),
            align: AlignConfig::default(),
            rl: RlConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reference-scale hyperparameters (the full-size training recipe):
    /// stage-1 cosine, 25 epochs, batch 128, lr 3e-5; stage-2 linear,
    /// 16 epochs (as steps), batch 64, lr 3e-6, G=8, lambdas 1.0, alpha 1.0,
    /// prompt/completion budgets 2048/768. Model dims stay desk-scale;
    /// the full-size backbones are out of scope.
    pub fn paper_scale() -> Self {
        let mut cfg = Self::default();
        cfg.align.epochs = 25;
        cfg.align.batch = 128;
        cfg.align.lr = 3e-5;
        cfg.align.scheduler = ScheduleKind::Cosine;
        let steps_per_epoch = cfg.world.train_size.div_ceil(64) as u64;
        cfg.rl.steps = 16 * steps_per_epoch;
        cfg.rl.batch = 64;
        cfg.rl.lr = 3e-6;
        cfg.rl.scheduler = ScheduleKind::Linear;
        cfg.rl.group_size = 8;
        cfg.model.max_prompt = 2048;
        cfg.model.max_completion = 768;
        cfg.model.max_seq = 2048 + 768 + cfg.model.queries + 1;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| {
            LensError::Config(format!("{}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.model.dim % self.model.heads != 0 {
            return Err(LensError::Config("dim must be divisible by heads".into()));
        }
        if self.model.queries < 1 {
            return Err(LensError::Config("need at least one context query".into()));
        }
        if self.world.width % self.model.patch != 0 || self.world.height % self.model.patch != 0 {
            return Err(LensError::Config("image size must be divisible by patch".into()));
        }
        if self.rl.group_size < 2 {
            return Err(LensError::Config("rl.group_size must be >= 2".into()));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> Lambdas {
        Lambdas {
            format: self.rl.lambda_format,
            boxr: self.rl.lambda_box,
            seg: self.rl.lambda_seg,
        }
    }

    pub fn policy_config(&self) -> PolicyConfig {
        PolicyConfig {
            dim: self.model.dim,
            layers: self.model.layers,
            heads: self.model.heads,
            max_seq: self.model.max_seq,
            patch: self.model.patch,
            max_prompt: self.model.max_prompt,
            max_completion: self.model.max_completion,
        }
    }

    pub fn bridge_config(&self) -> BridgeConfig {
        BridgeConfig {
            queries: self.model.queries,
            dim: self.model.dim,
            seg_dim: self.model.seg_dim,
            connector: self.model.connector,
        }
    }

    pub fn maskhead_config(&self) -> MaskHeadConfig {
        MaskHeadConfig {
            seg_dim: self.model.seg_dim,
            enc_blocks: self.model.enc_blocks,
            dec_blocks: self.model.dec_blocks,
        }
    }

    /// SHA-256 of the canonical JSON serialization; stored in checkpoints
    /// so stages refuse mismatched configurations unless overridden.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }

    pub fn parallel(&self) -> bool {
        self.threads != 1
    }
}
