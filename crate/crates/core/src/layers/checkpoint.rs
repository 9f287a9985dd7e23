//! Versioned little-endian binary checkpoint.
//!
//! ```text
//! magic    8 bytes  "CDROPCKP"
//! version  u32      1
//! layers   u32      number of mean-path layers
//! head     u8       1 when a log-variance head follows the layers
//! log_tau  f64
//! per layer:
//!   fan_in u32, fan_out u32, activation u8 (0 relu, 1 identity)
//!   has_dropout u8, p_logit f64, temperature f64
//!   weight_reg f64, dropout_reg f64
//!   weight f64 × fan_out·fan_in (row-major), bias f64 × fan_out
//! ```
//! Floats are stored as raw IEEE-754 bits, so a round trip is bit-exact.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::layers::concrete::{Activation, ConcreteDropout, ConcreteDropoutLayer, DenseLayer};
use crate::layers::model::Model;
use crate::ndcore::Tensor;

const MAGIC: &[u8; 8] = b"CDROPCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_bits().to_le_bytes())?;
    Ok(())
}

fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    Ok(get_bytes::<1>(r)?[0])
}

fn get_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_bits(u64::from_le_bytes(get_bytes(r)?)))
}

fn write_layer(w: &mut impl Write, layer: &ConcreteDropoutLayer) -> Result<()> {
    put_u32(w, layer.input_dim() as u32)?;
    put_u32(w, layer.output_dim() as u32)?;
    w.write_all(&[match layer.dense.activation {
        Activation::Relu => 0,
        Activation::Identity => 1,
    }])?;
    let (flag, logit, temp) = match layer.dropout {
        Some(d) => (1u8, d.p_logit, d.temperature),
        None => (0u8, 0.0, 0.0),
    };
    w.write_all(&[flag])?;
    put_f64(w, logit)?;
    put_f64(w, temp)?;
    put_f64(w, layer.weight_reg)?;
    put_f64(w, layer.dropout_reg)?;
    for &v in layer.dense.weight.data().iter().chain(layer.dense.bias.data()) {
        put_f64(w, v)?;
    }
    Ok(())
}

fn read_floats(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    (0..n).map(|_| get_f64(r)).collect()
}

fn read_layer(r: &mut impl Read) -> Result<ConcreteDropoutLayer> {
    let fan_in = get_u32(r)? as usize;
    let fan_out = get_u32(r)? as usize;
    let activation = match get_u8(r)? {
        0 => Activation::Relu,
        1 => Activation::Identity,
        other => return Err(Error::Format(format!("unknown activation tag {other}"))),
    };
    let has_dropout = get_u8(r)?;
    let logit = get_f64(r)?;
    let temp = get_f64(r)?;
    let weight_reg = get_f64(r)?;
    let dropout_reg = get_f64(r)?;
    let weight = Tensor::new(vec![fan_out, fan_in], read_floats(r, fan_in * fan_out)?)?;
    let bias = Tensor::new(vec![fan_out], read_floats(r, fan_out)?)?;
    let dropout = match has_dropout {
        0 => None,
        1 => Some(ConcreteDropout::new(logit, temp)?),
        other => return Err(Error::Format(format!("bad dropout flag {other}"))),
    };
    let mut layer = ConcreteDropoutLayer::new(DenseLayer::new(weight, bias, activation)?, dropout);
    layer.weight_reg = weight_reg;
    layer.dropout_reg = dropout_reg;
    Ok(layer)
}

pub fn write_checkpoint(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, CHECKPOINT_VERSION)?;
    put_u32(w, model.layers.len() as u32)?;
    w.write_all(&[u8::from(model.var_head.is_some())])?;
    put_f64(w, model.log_tau)?;
    for layer in model.all_layers() {
        write_layer(w, layer)?;
    }
    Ok(())
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    let magic: [u8; 8] = get_bytes(r)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = get_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let n = get_u32(r)? as usize;
    if n == 0 {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let has_head = get_u8(r)? == 1;
    let log_tau = get_f64(r)?;
    let layers = (0..n).map(|_| read_layer(r)).collect::<Result<Vec<_>>>()?;
    for pair in layers.windows(2) {
        if pair[0].output_dim() != pair[1].input_dim() {
            return Err(Error::Format("layer shapes do not chain".into()));
        }
    }
    let var_head = if has_head { Some(read_layer(r)?) } else { None };
    Ok(Model {
        layers,
        var_head,
        log_tau,
    })
}

pub fn save_checkpoint(model: &Model, path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(model, &mut f)?;
    f.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<Model> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut f)
}
