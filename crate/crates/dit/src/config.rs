use serde::{Deserialize, Serialize};

use crate::error::{DitError, Result};

/// Shape and training hyperparameters of the toy transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    pub mlp_ratio: usize,
    pub cue_resolution: usize,
    pub lora_rank_content: usize,
    /// Requested control-branch rank; the effective rank is capped at `d_model`.
    pub lora_rank_control: usize,
    pub learning_rate: f64,
    pub denoise_steps: usize,
    pub task_tokens: usize,
    pub num_tasks: usize,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 2,
            d_model: 64,
            heads: 2,
            blocks: 2,
            mlp_ratio: 4,
            cue_resolution: 16,
            lora_rank_content: 32,
            lora_rank_control: 128,
            learning_rate: 1e-4,
            denoise_steps: 20,
            task_tokens: 8,
            num_tasks: 4,
        }
    }
}

impl ToyModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DitError::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return fail(format!("patch size {} must divide image size {}", self.patch_size, self.image_size));
        }
        if self.cue_resolution == 0 || self.cue_resolution % self.patch_size != 0 {
            return fail(format!("patch size {} must divide cue resolution {}", self.patch_size, self.cue_resolution));
        }
        if self.cue_resolution > self.image_size {
            return fail("cue resolution cannot exceed the image size".into());
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("{} heads do not split d_model {}", self.heads, self.d_model));
        }
        if self.d_model % 4 != 0 {
            return fail("d_model must be a multiple of 4 for the 2-D position encoding".into());
        }
        if self.lora_rank_content == 0 || self.lora_rank_content > self.d_model {
            return fail(format!("content LoRA rank {} must be in 1..={}", self.lora_rank_content, self.d_model));
        }
        if self.lora_rank_control == 0 {
            return fail("control LoRA rank must be positive".into());
        }
        if self.blocks == 0 || self.mlp_ratio == 0 || self.task_tokens == 0 || self.num_tasks == 0 || self.channels == 0 {
            return fail("blocks, mlp_ratio, task_tokens, num_tasks and channels must be positive".into());
        }
        if !(self.learning_rate >= 0.0) || self.denoise_steps == 0 {
            return fail("learning rate must be ≥ 0 and denoise steps ≥ 1".into());
        }
        Ok(())
    }

    pub fn control_rank(&self) -> usize {
        self.lora_rank_control.min(self.d_model)
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn cue_grid(&self) -> usize {
        self.cue_resolution / self.patch_size
    }

    pub fn image_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_model * self.mlp_ratio
    }
}
