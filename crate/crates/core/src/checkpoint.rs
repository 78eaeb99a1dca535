//! Model checkpoints: a directory holding one SDTN dump per parameter, a
//! `manifest.txt` (name, shape, role per line) and `config.txt`.

use std::fs;
use std::path::Path;

use crate::error::{Result, SdanError};
use crate::io::{read_sdtn, write_sdtn};
use crate::model::{ModelConfig, SdanModel};
use crate::tensor::Shape;

pub const MANIFEST: &str = "manifest.txt";
pub const CONFIG: &str = "config.txt";

fn role(name: &str) -> &'static str {
    if name.contains("attention") {
        "attention"
    } else if name.ends_with(".bias") {
        "bias"
    } else {
        "weight"
    }
}

pub fn save(model: &SdanModel<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| SdanError::io(dir, e))?;
    let mut manifest = String::new();
    for p in model.params.named() {
        let t = crate::tensor::Tensor::from_vec(p.shape, p.data.to_vec())?;
        write_sdtn(&dir.join(format!("{}.sdtn", p.name)), &t)?;
        let s = p.shape;
        manifest.push_str(&format!("{}\t{} {} {} {}\t{}\n", p.name, s.n, s.c, s.h, s.w, role(&p.name)));
    }
    let write = |name: &str, text: &str| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| SdanError::io(&path, e))
    };
    write(MANIFEST, &manifest)?;
    write(CONFIG, &format!("{}seed = {}\n", model.config.to_text(), model.seed))
}

pub fn load(dir: &Path) -> Result<SdanModel<f32>> {
    let cfg_path = dir.join(CONFIG);
    let text = fs::read_to_string(&cfg_path).map_err(|e| SdanError::io(&cfg_path, e))?;
    let mut seed = 0;
    let mut model_lines = String::new();
    for line in text.lines() {
        match line.split_once('=') {
            Some((k, v)) if k.trim() == "seed" => {
                seed = v
                    .trim()
                    .parse()
                    .map_err(|_| SdanError::decode(&cfg_path, "bad seed"))?;
            }
            _ => {
                model_lines.push_str(line);
                model_lines.push('\n');
            }
        }
    }
    let config = ModelConfig::from_text(&model_lines)?;
    let mut model = SdanModel::<f32>::new(config, seed)?;

    let man_path = dir.join(MANIFEST);
    let manifest = fs::read_to_string(&man_path).map_err(|e| SdanError::io(&man_path, e))?;
    let entries: Vec<(String, Shape)> = manifest
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cols: Vec<&str> = l.split('\t').collect();
            let dims: Vec<usize> = cols
                .get(1)
                .map(|d| d.split_whitespace().filter_map(|v| v.parse().ok()).collect())
                .unwrap_or_default();
            if cols.len() != 3 || dims.len() != 4 {
                return Err(SdanError::decode(&man_path, format!("malformed line '{l}'")));
            }
            Ok((cols[0].to_string(), Shape::new(dims[0], dims[1], dims[2], dims[3])))
        })
        .collect::<Result<_>>()?;
    let expected: Vec<(String, Shape)> = model.params.named().iter().map(|p| (p.name.clone(), p.shape)).collect();
    if entries != expected {
        return Err(SdanError::decode(&man_path, "parameter list does not match the stored config"));
    }
    for ((name, shape), dst) in expected.iter().zip(model.params.slices_mut()) {
        let path = dir.join(format!("{name}.sdtn"));
        let t = read_sdtn(&path)?;
        if t.shape() != *shape {
            return Err(SdanError::decode(&path, format!("expected {shape}, found {}", t.shape())));
        }
        dst.copy_from_slice(t.data());
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AttentionKind;

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        for att in [AttentionKind::Cpa, AttentionKind::None] {
            let cfg = ModelConfig {
                base_channels: 4,
                num_res_blocks: 2,
                attention: att,
                pack_size: 2,
                ..ModelConfig::default()
            };
            let model = SdanModel::<f32>::new(cfg, 17).unwrap();
            let d = dir.path().join(att.to_string());
            save(&model, &d).unwrap();
            assert_eq!(load(&d).unwrap(), model);
            let manifest = fs::read_to_string(d.join(MANIFEST)).unwrap();
            assert!(manifest.starts_with("feat.weight\t4 3 3 3\tweight\nfeat.bias\t1 4 1 1\tbias\n"));
        }
    }

    #[test]
    fn corrupted_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            base_channels: 4,
            num_res_blocks: 1,
            ..ModelConfig::default()
        };
        let model = SdanModel::<f32>::new(cfg, 1).unwrap();
        save(&model, dir.path()).unwrap();
        fs::write(dir.path().join("tail.bias.sdtn"), b"SDTN").unwrap();
        assert!(matches!(load(dir.path()), Err(SdanError::Decode { .. })));
    }
}
