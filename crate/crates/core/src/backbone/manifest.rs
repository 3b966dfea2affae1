//! Plain-text `key=value` model manifest stored next to the checkpoint.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AmcModel, ArchConfig, BackboneError, ExitPoint};
use crate::tensornet::{Checkpoint, Parameters};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelManifest {
    pub arch: ArchConfig,
    pub version: u64,
    pub params: usize,
    pub checksum: String,
}

impl ModelManifest {
    pub fn of(model: &AmcModel) -> Self {
        Self {
            arch: model.arch().clone(),
            version: model.version(),
            params: model.num_params(),
            checksum: model.checksum(),
        }
    }

    pub fn render(&self) -> String {
        let a = &self.arch;
        let w = a.stage_widths;
        format!(
            "format=beacon-model\nexit_point={}\nstem_channels={}\nstage_widths={},{},{}\n\
             blocks_per_stage={}\nstem_kernel={}\nblock_kernel={}\nversion={}\nparams={}\nchecksum={}\n",
            a.exit_point,
            a.stem_channels,
            w[0],
            w[1],
            w[2],
            a.blocks_per_stage,
            a.stem_kernel,
            a.block_kernel,
            self.version,
            self.params,
            self.checksum
        )
    }
}

pub fn parse_manifest(text: &str) -> Result<ModelManifest, BackboneError> {
    let bad = |m: String| BackboneError::Manifest(m);
    let mut kv = std::collections::BTreeMap::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("line without '=': {line:?}")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key {k}")));
    let num = |k: &str| -> Result<usize, BackboneError> {
        get(k)?
            .parse()
            .map_err(|_| bad(format!("{k} is not an integer")))
    };
    if get("format")? != "beacon-model" {
        return Err(bad("unknown format tag".into()));
    }
    let widths: Vec<usize> = get("stage_widths")?
        .split(',')
        .map(|s| s.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| bad("stage_widths must be integers".into()))?;
    let stage_widths: [usize; 3] = widths
        .try_into()
        .map_err(|_| bad("stage_widths needs three entries".into()))?;
    let arch = ArchConfig {
        stem_channels: num("stem_channels")?,
        stage_widths,
        blocks_per_stage: num("blocks_per_stage")?,
        stem_kernel: num("stem_kernel")?,
        block_kernel: num("block_kernel")?,
        exit_point: get("exit_point")?.parse::<ExitPoint>().map_err(bad)?,
    };
    arch.validate()?;
    Ok(ModelManifest {
        arch,
        version: num("version")? as u64,
        params: num("params")?,
        checksum: get("checksum")?.clone(),
    })
}

pub fn save_model(
    model: &AmcModel,
    checkpoint: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
) -> Result<(), BackboneError> {
    Checkpoint::capture(model, "").save(checkpoint)?;
    fs::write(manifest, ModelManifest::of(model).render())?;
    Ok(())
}

/// Loads a model and checks its parameters against the manifest checksum.
pub fn load_model(
    checkpoint: impl AsRef<Path>,
    manifest: impl AsRef<Path>,
) -> Result<AmcModel, BackboneError> {
    let m = parse_manifest(&fs::read_to_string(manifest)?)?;
    let ck = Checkpoint::load(checkpoint)?;
    // weights are overwritten by the checkpoint, the seed is irrelevant
    let mut model = AmcModel::new(m.arch.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    ck.restore(&mut model, "")?;
    let (trunk, ee_head) = (model.trunk().clone(), model.ee_head().clone());
    let model = AmcModel::from_parts(m.arch, trunk, ee_head, m.version);
    if model.checksum() != m.checksum {
        return Err(BackboneError::Manifest(
            "checkpoint does not match manifest checksum".into(),
        ));
    }
    Ok(model)
}
