//! Model checkpoints.
//!
//! Layout, all little-endian after the magic:
//!
//! ```text
//! "ADVMS\x01"            6-byte magic
//! arch tag               u8 (0 mnist, 1 cifar10, 2 synthetic)
//! train_epsilon          f64
//! init_seed              u64
//! per parameter layer:   weight tensor, then bias tensor
//!   tensor := rank u8, dims u32 * rank, data f32 * prod(dims)
//! ```
//!
//! Parameters are stored as raw f32 bits, so save followed by load is
//! bit-exact. The synthetic stack's geometry is recovered from the stored
//! dims (which is why synthetic inputs must be square with an even side:
//! side = 2 * sqrt(flatten / filters) + 2 inverts the conv + pool chain).

use std::path::Path;

use crate::arch::{build_architecture, Architecture, DatasetId};
use crate::error::{Error, Result};
use crate::model::{LayerParams, Model};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"ADVMS\x01";

/// Serializes a model of one of the canonical architectures.
pub fn save_model(model: &Model<f32>, path: &Path) -> Result<()> {
    let id = model.arch().id().ok_or_else(|| {
        Error::Argument("custom architectures are not checkpointable".into())
    })?;
    let mut buf = Vec::with_capacity(16 + model.param_count() * 4);
    buf.extend_from_slice(MAGIC);
    buf.push(id.tag());
    buf.extend_from_slice(&model.train_epsilon().to_le_bytes());
    buf.extend_from_slice(&model.init_seed().to_le_bytes());
    for p in model.params() {
        write_tensor(&mut buf, &p.weight);
        write_tensor(&mut buf, &p.bias);
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Loads a checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model<f32>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(6)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let id = DatasetId::from_tag(r.u8()?)?;
    let train_epsilon = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let init_seed = u64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
    let mut tensors = Vec::new();
    while !r.done() {
        tensors.push(r.tensor()?);
    }
    if tensors.len() % 2 != 0 {
        return Err(Error::Format("odd tensor count: weights and biases must pair up".into()));
    }
    let params: Vec<LayerParams<f32>> = tensors
        .chunks_exact(2)
        .map(|pair| LayerParams {
            weight: pair[0].clone(),
            bias: pair[1].clone(),
        })
        .collect();
    let arch = match id {
        DatasetId::Mnist | DatasetId::Cifar10 => build_architecture(id),
        DatasetId::Synthetic => infer_synthetic_arch(&params)?,
    };
    Model::from_parts(arch, params, init_seed, train_epsilon).map_err(|e| match e {
        Error::Shape(msg) => Error::Format(format!("checkpoint does not fit {id}: {msg}")),
        other => other,
    })
}

/// Reconstructs the synthetic stack's input geometry from parameter shapes.
fn infer_synthetic_arch(params: &[LayerParams<f32>]) -> Result<Architecture> {
    if params.len() != 3 {
        return Err(Error::Format(format!(
            "synthetic checkpoint must have 3 parameter layers, got {}",
            params.len()
        )));
    }
    let conv_w = params[0].weight.shape();
    let dense_w = params[1].weight.shape();
    let out_w = params[2].weight.shape();
    let (filters, in_c) = match conv_w {
        &[f, c, 3, 3] => (f, c),
        other => {
            return Err(Error::Format(format!(
                "synthetic conv weight has unexpected shape {other:?}"
            )))
        }
    };
    let flat = match dense_w {
        &[_, flat] => flat,
        other => {
            return Err(Error::Format(format!(
                "synthetic dense weight has unexpected shape {other:?}"
            )))
        }
    };
    if flat % filters != 0 {
        return Err(Error::Format(format!(
            "synthetic flatten {flat} not divisible by {filters} filters"
        )));
    }
    let q2 = flat / filters;
    let q = (q2 as f64).sqrt().round() as usize;
    if q * q != q2 {
        return Err(Error::Format(format!(
            "synthetic flatten {flat} is not filters * square"
        )));
    }
    let side = 2 * q + 2;
    let classes = match out_w {
        &[c, _] => c,
        other => {
            return Err(Error::Format(format!(
                "synthetic output weight has unexpected shape {other:?}"
            )))
        }
    };
    Architecture::synthetic((in_c, side, side), classes)
        .map_err(|e| Error::Format(format!("synthetic geometry does not reconstruct: {e}")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "checkpoint truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let rank = self.u8()? as usize;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("tensor rank {rank} out of range")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize;
            if d == 0 {
                return Err(Error::Format("zero tensor dimension".into()));
            }
            shape.push(d);
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite parameter value".into()));
        }
        Tensor::from_vec(&shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::build_architecture;
    use crate::model::init_params;

    fn roundtrip(model: &Model<f32>) -> Model<f32> {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(model, &p).unwrap();
        load_model(&p).unwrap()
    }

    #[test]
    fn mnist_round_trip_is_bit_exact() {
        let mut model = init_params::<f32>(&build_architecture(DatasetId::Mnist), 99);
        model.params_mut()[0].bias.data_mut()[3] = 0.25;
        let back = roundtrip(&model);
        assert_eq!(back.init_seed(), 99);
        assert_eq!(back.train_epsilon(), 0.0);
        for (a, b) in model.params().iter().zip(back.params()) {
            assert_eq!(a.weight.data(), b.weight.data());
            assert_eq!(a.bias.data(), b.bias.data());
        }
    }

    #[test]
    fn synthetic_geometry_survives_round_trip() {
        let arch = Architecture::synthetic((2, 10, 10), 5).unwrap();
        let mut model = init_params::<f32>(&arch, 7);
        model.set_train_epsilon(0.3);
        let back = roundtrip(&model);
        assert_eq!(back.arch().input_shape(), (2, 10, 10));
        assert_eq!(back.arch().class_count(), 5);
        assert_eq!(back.train_epsilon(), 0.3);
        assert_eq!(model.params()[1].weight.data(), back.params()[1].weight.data());
    }

    #[test]
    fn custom_architecture_is_rejected() {
        let arch = Architecture::from_layers(
            (1, 4, 4),
            vec![crate::arch::Layer::Output { units: 2 }],
        )
        .unwrap();
        let model = init_params::<f32>(&arch, 0);
        let dir = tempfile::tempdir().unwrap();
        let err = save_model(&model, &dir.path().join("x.ckpt")).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn truncated_and_corrupt_files_are_format_errors() {
        let model = init_params::<f32>(&build_architecture(DatasetId::Mnist), 1);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&model, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();

        let cut = dir.path().join("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_model(&cut).unwrap_err(), Error::Format(_)));

        let grown = dir.path().join("grown.ckpt");
        let mut extended = bytes.clone();
        extended.push(0);
        std::fs::write(&grown, &extended).unwrap();
        assert!(matches!(load_model(&grown).unwrap_err(), Error::Format(_)));

        let magic = dir.path().join("magic.ckpt");
        let mut bad = bytes;
        bad[0] = b'X';
        std::fs::write(&magic, &bad).unwrap();
        assert!(matches!(load_model(&magic).unwrap_err(), Error::Format(_)));
    }

    #[test]
    fn wrong_arch_dims_are_rejected() {
        // A synthetic checkpoint whose tag claims mnist must not load.
        let arch = Architecture::synthetic((1, 8, 8), 4).unwrap();
        let model = init_params::<f32>(&arch, 3);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save_model(&model, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[6] = 0;
        let forged = dir.path().join("forged.ckpt");
        std::fs::write(&forged, &bytes).unwrap();
        assert!(matches!(load_model(&forged).unwrap_err(), Error::Format(_)));
    }
}
