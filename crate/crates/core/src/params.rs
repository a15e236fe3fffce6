//! Parameter bookkeeping shared by every network: seeded initialisation,
//! checksums and safetensors persistence.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_core::Var;
use candle_nn::VarMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

fn fnv1a(h: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *h ^= b as u64;
        *h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

fn name_seed(seed: u64, name: &str) -> u64 {
    let mut h = FNV_OFFSET;
    fnv1a(&mut h, &seed.to_le_bytes());
    fnv1a(&mut h, name.as_bytes());
    h
}

fn is_running_stat(name: &str) -> bool {
    name.ends_with("running_mean") || name.ends_with("running_var")
}

/// Overwrite every variable of `varmap` with a reproducible draw: Kaiming
/// normal for weight matrices/kernels, ones for norm scales, zeros for
/// biases and running means, ones for running variances.
pub fn seeded_init(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    for (name, var) in data.iter() {
        let dims = var.dims().to_vec();
        let numel: usize = dims.iter().product();
        let values: Vec<f32> = if name.ends_with("running_var") {
            vec![1.0; numel]
        } else if name.ends_with("running_mean") || name.ends_with("bias") {
            vec![0.0; numel]
        } else if dims.len() == 1 {
            vec![1.0; numel]
        } else {
            let fan_in = (numel / dims[0]).max(1);
            let std = (2.0 / fan_in as f64).sqrt() as f32;
            let normal = Normal::new(0.0f32, std).expect("positive std");
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, name));
            (0..numel).map(|_| normal.sample(&mut rng)).collect()
        };
        let t = Tensor::from_vec(values, dims, var.device())?.to_dtype(var.dtype())?;
        var.set(&t)?;
    }
    Ok(())
}

/// Multiply every variable whose name starts with `prefix` by `factor`.
pub fn scale_vars(varmap: &VarMap, prefix: &str, factor: f64) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    for (_, var) in data.iter().filter(|(n, _)| n.starts_with(prefix)) {
        var.set(&var.as_tensor().affine(factor, 0.0)?)?;
    }
    Ok(())
}

/// Variables an optimiser should update (batch-norm running statistics excluded).
pub fn trainable_vars(varmap: &VarMap) -> Vec<Var> {
    let data = varmap.data().lock().expect("varmap lock");
    let mut named: Vec<_> = data
        .iter()
        .filter(|(n, _)| !is_running_stat(n))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    named.sort_by(|a, b| a.0.cmp(&b.0));
    named.into_iter().map(|(_, v)| v).collect()
}

/// Detached copies of all variables, optionally filtered by name prefix.
pub fn snapshot(varmap: &VarMap, exclude_prefix: Option<&str>) -> Result<HashMap<String, Tensor>> {
    let data = varmap.data().lock().expect("varmap lock");
    data.iter()
        .filter(|(n, _)| exclude_prefix.is_none_or(|p| !n.starts_with(p)))
        .map(|(n, v)| Ok((n.clone(), v.as_tensor().detach().copy()?)))
        .collect()
}

/// Load named tensors into an existing varmap (all names must exist).
pub fn restore(varmap: &VarMap, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let data = varmap.data().lock().expect("varmap lock");
    for (name, var) in data.iter() {
        let t = tensors
            .get(name)
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks parameter `{name}`")))?;
        var.set(&t.to_dtype(var.dtype())?)?;
    }
    Ok(())
}

/// Order-independent FNV-1a digest over parameter names and f32 bytes.
pub fn checksum(tensors: &HashMap<String, Tensor>) -> Result<u64> {
    let sorted: BTreeMap<_, _> = tensors.iter().collect();
    let mut h = FNV_OFFSET;
    for (name, t) in sorted {
        fnv1a(&mut h, name.as_bytes());
        let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        for x in v {
            fnv1a(&mut h, &x.to_le_bytes());
        }
    }
    Ok(h)
}

pub fn save_tensors(tensors: &HashMap<String, Tensor>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    candle_core::safetensors::save(tensors, path)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<HashMap<String, Tensor>> {
    candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::WeightsLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::VarBuilder;

    fn build(seed: u64) -> VarMap {
        let vm = VarMap::new();
        let vb = VarBuilder::from_varmap(&vm, DType::F32, &Device::Cpu);
        candle_nn::linear(4, 3, vb.pp("fc")).unwrap();
        candle_nn::batch_norm(3, candle_nn::BatchNormConfig::default(), vb.pp("bn")).unwrap();
        seeded_init(&vm, seed).unwrap();
        vm
    }

    #[test]
    fn seeded_init_reproducible() {
        let a = checksum(&snapshot(&build(7), None).unwrap()).unwrap();
        let b = checksum(&snapshot(&build(7), None).unwrap()).unwrap();
        let c = checksum(&snapshot(&build(8), None).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn running_stats_not_trainable() {
        let vm = build(1);
        // fc.weight, fc.bias, bn.weight, bn.bias
        assert_eq!(trainable_vars(&vm).len(), 4);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let vm = build(3);
        let snap = snapshot(&vm, None).unwrap();
        let p = dir.path().join("w.safetensors");
        save_tensors(&snap, &p).unwrap();
        let back = load_tensors(&p).unwrap();
        assert_eq!(checksum(&snap).unwrap(), checksum(&back).unwrap());
        assert!(matches!(load_tensors(&dir.path().join("missing")), Err(Error::WeightsLoad { .. })));
    }
}
