use std::path::Path;

use super::{ModelConfig, VLModel};
use crate::error::{Error, Result};
use crate::tensorfile::{self, Bundle, PayloadKind};

/// Config block stored in the checkpoint header: one `key=value` per line.
fn encode_header(model: &VLModel) -> Vec<u8> {
    let c = &model.config;
    let lines = [
        format!("d={}", c.d),
        format!("width={}", c.width),
        format!("vocab_size={}", c.vocab_size),
        format!("text_context_len={}", c.text_context_len),
        format!("num_patches={}", c.num_patches),
        format!("patch_dim={}", c.patch_dim),
        format!("layers={}", c.layers),
        format!("heads={}", c.heads),
        format!("hidden_dim={}", c.hidden_dim),
        format!("init_temperature={}", c.init_temperature.to_bits()),
        format!("siglip_bias={}", c.siglip_bias.to_bits()),
        format!("seed={}", c.seed),
        format!("temperature={}", model.temperature.to_bits()),
        format!("current_siglip_bias={}", model.siglip_bias.to_bits()),
    ];
    lines.join("\n").into_bytes()
}

fn decode_header(raw: &[u8]) -> Result<(ModelConfig, f64, f64)> {
    let text = std::str::from_utf8(raw).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let mut fields = std::collections::HashMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("bad header line {line:?}")))?;
        let v: u64 = v
            .parse()
            .map_err(|_| Error::Format(format!("bad header value {line:?}")))?;
        fields.insert(k.to_string(), v);
    }
    let get = |k: &str| {
        fields
            .get(k)
            .copied()
            .ok_or_else(|| Error::Format(format!("header missing {k}")))
    };
    let n = |k: &str| get(k).map(|v| v as usize);
    let f = |k: &str| get(k).map(f64::from_bits);
    let config = ModelConfig {
        d: n("d")?,
        width: n("width")?,
        vocab_size: n("vocab_size")?,
        text_context_len: n("text_context_len")?,
        num_patches: n("num_patches")?,
        patch_dim: n("patch_dim")?,
        layers: n("layers")?,
        heads: n("heads")?,
        hidden_dim: n("hidden_dim")?,
        init_temperature: f("init_temperature")?,
        siglip_bias: f("siglip_bias")?,
        seed: get("seed")?,
    };
    Ok((config, f("temperature")?, f("current_siglip_bias")?))
}

pub fn save_checkpoint(model: &VLModel, path: &Path) -> Result<()> {
    let bundle = Bundle {
        kind: PayloadKind::Checkpoint,
        header: encode_header(model),
        tensors: model
            .names()
            .iter()
            .cloned()
            .zip(model.tensors().iter().cloned())
            .collect(),
    };
    tensorfile::save(path, &bundle)
}

/// Reads a checkpoint; any structural problem is an error and no partial
/// model is returned.
pub fn load_checkpoint(path: &Path) -> Result<VLModel> {
    let bundle = tensorfile::load(path)?;
    if bundle.kind != PayloadKind::Checkpoint {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    let (config, temperature, bias) = decode_header(&bundle.header)?;
    VLModel::from_named(config, temperature, bias, bundle.tensors)
}
