//! Checkpoints: a directory of MMT1 tensor files plus a `manifest.txt`
//! listing parameter names and shapes in storage order.

use std::fs;
use std::path::Path;

use crate::elem::Element;
use crate::error::{Error, Result};
use crate::model::ParamSet;
use crate::tensor::{load_mmt1, save_mmt1, Tensor};

const MANIFEST: &str = "manifest.txt";

/// Writes every parameter as `<name>.mmt` (32-bit floats) plus the manifest.
pub fn save<E: Element>(dir: &Path, params: &ParamSet<E>) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for (name, tensor) in params.iter() {
        save_mmt1(&dir.join(format!("{name}.mmt")), tensor)?;
        let dims: Vec<String> = tensor.shape().iter().map(|d| d.to_string()).collect();
        manifest.push_str(&format!("{name}\t{}\n", dims.join(" ")));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a checkpoint back in manifest order, validating shapes.
pub fn load<E: Element>(dir: &Path) -> Result<ParamSet<E>> {
    let manifest = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.display())))?;
    let mut params = ParamSet::new();
    for (ln, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (name, dims) = line
            .split_once('\t')
            .ok_or_else(|| Error::Checkpoint(format!("manifest line {}: missing tab", ln + 1)))?;
        let shape: Vec<usize> = dims
            .split_whitespace()
            .map(|d| {
                d.parse()
                    .map_err(|_| Error::Checkpoint(format!("manifest line {}: bad extent {d}", ln + 1)))
            })
            .collect::<Result<_>>()?;
        let tensor: Tensor<E> = load_mmt1(&dir.join(format!("{name}.mmt")))?;
        if tensor.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: manifest shape {shape:?} but file holds {:?}",
                tensor.shape()
            )));
        }
        params.add(name, tensor);
    }
    if params.is_empty() {
        return Err(Error::Checkpoint(format!("{}: empty manifest", dir.display())));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::random_tensor;

    #[test]
    fn round_trip_preserves_values_and_order() {
        let dir = std::env::temp_dir().join(format!("mmnet-ckpt-{}", std::process::id()));
        let mut params = ParamSet::<f64>::new();
        params.add("a.weight", random_tensor(vec![2, 3], 1, 1.0).cast());
        params.add("a.bias", random_tensor(vec![3], 2, 1.0).cast());
        params.add("b.weight", random_tensor(vec![4, 1, 2, 2], 3, 1.0).cast());
        save(&dir, &params).unwrap();
        let loaded: ParamSet<f64> = load(&dir).unwrap();
        assert_eq!(params.names(), loaded.names());
        for ((_, a), (_, b)) in params.iter().zip(loaded.iter()) {
            // storage is 32-bit
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn missing_manifest_is_an_error() {
        let dir = std::env::temp_dir().join("mmnet-ckpt-none");
        assert!(load::<f32>(&dir).is_err());
    }
}
