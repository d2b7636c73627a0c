//! Checkpoints: one fixture file per parameter path plus `config.txt`.

use std::fs;
use std::path::Path;

use super::{build_stack, Model, ModelConfig};
use crate::error::{Error, Result, ResultExt};
use crate::params::Parameters;
use crate::tensor::{read_fixture, write_fixture};

pub const CONFIG_FILE: &str = "config.txt";

pub fn save_checkpoint(model: &Model, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    fs::write(dir.join(CONFIG_FILE), model.config.to_text())?;
    let mut result = Ok(());
    model.params.visit("", &mut |name, t| {
        if result.is_ok() {
            result = write_fixture(dir.join(name), t).context(|| format!("writing {name}"));
        }
    });
    result
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<Model> {
    let dir = dir.as_ref();
    let config = ModelConfig::from_text(&fs::read_to_string(dir.join(CONFIG_FILE))?)?;
    let mut model = build_stack(&config, 0)?;
    let mut result = Ok(());
    model.params.visit_mut("", &mut |name, t| {
        if result.is_err() {
            return;
        }
        result = read_fixture(dir.join(name))
            .and_then(|loaded| {
                if loaded.shape() != t.shape() {
                    return Err(Error::dimension("checkpoint tensor", loaded.shape(), t.shape()));
                }
                *t = loaded;
                Ok(())
            })
            .context(|| format!("reading {name}"));
    });
    result.map(|_| model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::EmimConfig;

    #[test]
    fn saved_model_loads_identically() {
        let cfg = ModelConfig {
            channels: 4,
            emim: EmimConfig { radius: 1, heads: 2, ..Default::default() },
            num_classes: 3,
            ..Default::default()
        };
        let model = build_stack(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model, dir.path()).unwrap();
        assert!(dir.path().join("blocks.0.attn.q.weight").is_file());
        assert_eq!(load_checkpoint(dir.path()).unwrap(), model);

        fs::remove_file(dir.path().join("head.bias")).unwrap();
        assert!(load_checkpoint(dir.path()).is_err());
    }
}
