//! Named-parameter checkpoints: one flat binary tensor dump per parameter
//! plus a JSON manifest listing names and shapes.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{ParamMap, Tensor};

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

fn file_name(name: &str) -> String {
    let sanitized: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    format!("{sanitized}.bin")
}

pub fn save_checkpoint(dir: &Path, model: &dyn ParamMap) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = Vec::new();
    let mut result = Ok(());
    model.visit(&mut |name, tensor| {
        if result.is_err() {
            return;
        }
        let file = file_name(name);
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            file: file.clone(),
        });
        let mut buf = Vec::new();
        if let Err(e) = tensor.write_binary(&mut buf) {
            result = Err(e);
            return;
        }
        result = fs::write(dir.join(file), buf);
    });
    result?;
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )
}

pub fn load_checkpoint(dir: &Path, model: &mut dyn ParamMap) -> io::Result<()> {
    let manifest: Vec<ManifestEntry> =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut result = Ok(());
    model.visit_mut(&mut |name, tensor| {
        if result.is_err() {
            return;
        }
        let Some(entry) = manifest.iter().find(|e| e.name == name) else {
            result = Err(io::Error::new(
                io::ErrorKind::NotFound,
                format!("parameter {name} missing from checkpoint manifest"),
            ));
            return;
        };
        let bytes = match fs::read(dir.join(&entry.file)) {
            Ok(b) => b,
            Err(e) => {
                result = Err(e);
                return;
            }
        };
        match Tensor::read_binary(&mut bytes.as_slice()) {
            Ok(t) if t.shape() == tensor.shape() => *tensor = t,
            Ok(t) => {
                result = Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!(
                        "parameter {name}: checkpoint shape {:?} does not match model shape {:?}",
                        t.shape(),
                        tensor.shape()
                    ),
                ));
            }
            Err(e) => result = Err(e),
        }
    });
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::taxonomy::Vocabulary;

    #[test]
    fn checkpoint_round_trip_restores_every_parameter() {
        let mut rng = SeededRng::new(8);
        let model = crate::tag_encoder::TagEncoder::new(Vocabulary::shipped_default(), 8, &mut rng);
        let dir = std::env::temp_dir().join(format!("anicond-ckpt-{}", std::process::id()));
        save_checkpoint(&dir, &model).unwrap();

        let mut restored =
            crate::tag_encoder::TagEncoder::new(Vocabulary::shipped_default(), 8, &mut rng);
        assert_ne!(restored.params_flat(), model.params_flat());
        load_checkpoint(&dir, &mut restored).unwrap();
        assert_eq!(restored.params_flat(), model.params_flat());
        std::fs::remove_dir_all(&dir).ok();
    }
}
