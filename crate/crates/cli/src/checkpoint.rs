//! Checkpoint directories: the model config as JSON plus every parameter
//! and optimizer moment as a toolkit tensor file (named parameter list).

use kmoe_core::autodiff::{AdamState, ParamSet, Params};
use kmoe_core::error::{Error, Result};
use kmoe_core::model::{CascadeConfig, CascadeParams};
use kmoe_core::phantom_io::{read_tensor, write_tensor};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: u16,
    step: u64,
    adam_step: u64,
}

const FORMAT: u16 = 1;

pub fn save_checkpoint(
    dir: &Path,
    params: &CascadeParams<f32>,
    adam: &AdamState<f32>,
    step: u64,
) -> Result<()> {
    std::fs::create_dir_all(dir.join("params"))?;
    std::fs::create_dir_all(dir.join("adam_m"))?;
    std::fs::create_dir_all(dir.join("adam_v"))?;
    let config_json = serde_json::to_string_pretty(&params.config)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    std::fs::write(dir.join("config.json"), config_json)?;
    let meta = Meta {
        format: FORMAT,
        step,
        adam_step: adam.step,
    };
    std::fs::write(
        dir.join("meta.json"),
        serde_json::to_string_pretty(&meta).map_err(|e| Error::InvalidArgument(e.to_string()))?,
    )?;

    let mut err = None;
    params.visit(&mut |name, t| {
        if err.is_none() {
            if let Err(e) = write_tensor(&dir.join("params").join(format!("{name}.kmoe")), t) {
                err = Some(e);
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    for (sub, map) in [("adam_m", &adam.m), ("adam_v", &adam.v)] {
        for (name, t) in map {
            write_tensor(&dir.join(sub).join(format!("{name}.kmoe")), t)?;
        }
    }
    Ok(())
}

/// First differing field path between two JSON values, depth-first.
fn first_diff(
    a: &serde_json::Value,
    b: &serde_json::Value,
    path: &str,
) -> Option<(String, String, String)> {
    use serde_json::Value;
    match (a, b) {
        (Value::Object(ma), Value::Object(mb)) => {
            let mut keys: Vec<&String> = ma.keys().chain(mb.keys()).collect();
            keys.sort();
            keys.dedup();
            for k in keys {
                let sub = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match (ma.get(k), mb.get(k)) {
                    (Some(va), Some(vb)) => {
                        if let Some(d) = first_diff(va, vb, &sub) {
                            return Some(d);
                        }
                    }
                    (va, vb) => {
                        return Some((
                            sub,
                            va.map_or("<absent>".into(), |v| v.to_string()),
                            vb.map_or("<absent>".into(), |v| v.to_string()),
                        ))
                    }
                }
            }
            None
        }
        _ if a == b => None,
        _ => Some((path.to_string(), a.to_string(), b.to_string())),
    }
}

/// Verifies the checkpoint was produced by the same model config, naming
/// the first divergent field otherwise.
pub fn check_config_match(checkpoint: &CascadeConfig, config: &CascadeConfig) -> Result<()> {
    if checkpoint == config {
        return Ok(());
    }
    let a = serde_json::to_value(checkpoint).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let b = serde_json::to_value(config).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (field, cv, gv) =
        first_diff(&a, &b, "").unwrap_or(("<unknown>".into(), String::new(), String::new()));
    Err(Error::CheckpointMismatch {
        field,
        checkpoint: cv,
        config: gv,
    })
}

pub struct LoadedCheckpoint {
    pub params: CascadeParams<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
}

pub fn load_checkpoint(dir: &Path, expect: Option<&CascadeConfig>) -> Result<LoadedCheckpoint> {
    let config_text = std::fs::read_to_string(dir.join("config.json"))?;
    let config: CascadeConfig = serde_json::from_str(&config_text)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint config: {e}")))?;
    if let Some(expect) = expect {
        check_config_match(&config, expect)?;
    }
    let meta_text = std::fs::read_to_string(dir.join("meta.json"))?;
    let meta: Meta = serde_json::from_str(&meta_text)
        .map_err(|e| Error::InvalidArgument(format!("checkpoint meta: {e}")))?;
    if meta.format != FORMAT {
        return Err(Error::InvalidArgument(format!(
            "unsupported checkpoint format {}",
            meta.format
        )));
    }

    // init-to-shape, then assign every tensor from disk
    let mut params = CascadeParams::<f32>::init(&config, 0)?;
    let mut loaded = Params::new();
    params.visit(&mut |name, _| {
        loaded.insert(name, kmoe_core::numerics::Tensor::<f32>::zeros(&[1]));
    });
    let names: Vec<String> = loaded.iter().map(|(n, _)| n.clone()).collect();
    let mut store = Params::new();
    for name in &names {
        let t = read_tensor::<f32>(&dir.join("params").join(format!("{name}.kmoe")))?;
        store.insert(name, t);
    }
    params.assign_from(&store)?;

    let mut adam = AdamState::new();
    adam.step = meta.adam_step;
    for (sub, map) in [("adam_m", &mut adam.m), ("adam_v", &mut adam.v)] {
        let sdir = dir.join(sub);
        if !sdir.exists() {
            continue;
        }
        let mut names: Vec<String> = Vec::new();
        for entry in std::fs::read_dir(&sdir)? {
            let p = entry?.path();
            if p.extension().and_then(|e| e.to_str()) == Some("kmoe") {
                names.push(p.file_stem().unwrap().to_string_lossy().into_owned());
            }
        }
        names.sort();
        let mut m: BTreeMap<String, kmoe_core::numerics::Tensor<f32>> = BTreeMap::new();
        for name in names {
            m.insert(
                name.clone(),
                read_tensor(&sdir.join(format!("{name}.kmoe")))?,
            );
        }
        *map = m;
    }
    Ok(LoadedCheckpoint {
        params,
        adam,
        step: meta.step,
    })
}
