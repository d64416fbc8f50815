//! `HNSC` checkpoint files.
//!
//! ```text
//! magic      4 bytes  "HNSC"
//! version    u32      1
//! encoders   u32      number of encoders (image first, then text)
//! per encoder:
//!   kind       u8     0 fc, 1 mlp, 2 rmlp
//!   pooling    u8     0 mean, 1 max
//!   activation u8     1 if a ReLU follows the first MLP layer
//!   reserved   u8     0
//!   input_dim  u32
//!   embed_dim  u32
//!   bn_eps     f64
//!   bn_moment. f64
//!   tensors    f64*   row-major, in declaration order:
//!                     fc.w (D x d), fc.b (d)
//!                     mlp only: bn1.γ, bn1.β, bn1.mean, bn1.var (d),
//!                               fc1.w (d x d/2), fc1.b (d/2),
//!                               bn2.γ, bn2.β, bn2.mean, bn2.var (d/2),
//!                               fc2.w (d/2 x d), fc2.b (d)
//! ```
//!
//! All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use crate::binio::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

use super::{Encoder, EncoderArch, EncoderKind, Pooling};

pub const MAGIC: &[u8; 4] = b"HNSC";
pub const VERSION: u32 = 1;

fn stored_tensors<T: Scalar>(e: &Encoder<T>) -> Vec<&Matrix<T>> {
    let mut out = vec![&e.fc.weight, &e.fc.bias];
    if let Some(m) = &e.mlp {
        out.extend([
            &m.bn1.gamma,
            &m.bn1.beta,
            &m.bn1.running_mean,
            &m.bn1.running_var,
            &m.fc1.weight,
            &m.fc1.bias,
            &m.bn2.gamma,
            &m.bn2.beta,
            &m.bn2.running_mean,
            &m.bn2.running_var,
            &m.fc2.weight,
            &m.fc2.bias,
        ]);
    }
    out
}

fn stored_tensors_mut<T: Scalar>(e: &mut Encoder<T>) -> Vec<&mut Matrix<T>> {
    let mut out = vec![&mut e.fc.weight, &mut e.fc.bias];
    if let Some(m) = &mut e.mlp {
        out.extend([
            &mut m.bn1.gamma,
            &mut m.bn1.beta,
            &mut m.bn1.running_mean,
            &mut m.bn1.running_var,
            &mut m.fc1.weight,
            &mut m.fc1.bias,
            &mut m.bn2.gamma,
            &mut m.bn2.beta,
            &mut m.bn2.running_mean,
            &mut m.bn2.running_var,
            &mut m.fc2.weight,
            &mut m.fc2.bias,
        ]);
    }
    out
}

pub fn encode_checkpoint<T: Scalar>(encoders: &[&Encoder<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(encoders.len() as u32).to_le_bytes());
    for e in encoders {
        let a = e.arch();
        out.push(match a.kind {
            EncoderKind::Fc => 0,
            EncoderKind::Mlp => 1,
            EncoderKind::Rmlp => 2,
        });
        out.push(match a.pooling {
            Pooling::Mean => 0,
            Pooling::Max => 1,
        });
        out.push(a.mlp_activation as u8);
        out.push(0);
        out.extend_from_slice(&(a.input_dim as u32).to_le_bytes());
        out.extend_from_slice(&(a.embed_dim as u32).to_le_bytes());
        out.extend_from_slice(&a.bn_eps.to_le_bytes());
        out.extend_from_slice(&a.bn_momentum.to_le_bytes());
        for t in stored_tensors(e) {
            for &x in t.as_slice() {
                out.extend_from_slice(&x.as_f64().to_le_bytes());
            }
        }
    }
    out
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<Vec<Encoder<T>>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected \"HNSC\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32("encoder count")?;
    let mut encoders = Vec::with_capacity(count as usize);
    for idx in 0..count {
        let at = r.offset();
        let kind = match r.u8("encoder kind")? {
            0 => EncoderKind::Fc,
            1 => EncoderKind::Mlp,
            2 => EncoderKind::Rmlp,
            k => return Err(Error::format(at, format!("encoder {idx}: unknown kind tag {k}"))),
        };
        let pooling = match r.u8("pooling")? {
            0 => Pooling::Mean,
            1 => Pooling::Max,
            p => return Err(Error::format(at + 1, format!("encoder {idx}: unknown pooling tag {p}"))),
        };
        let mlp_activation = r.u8("activation flag")? != 0;
        r.u8("reserved")?;
        let input_dim = r.u32("input_dim")? as usize;
        let embed_dim = r.u32("embed_dim")? as usize;
        let bn_eps = r.f64("bn_eps")?;
        let bn_momentum = r.f64("bn_momentum")?;
        let arch = EncoderArch {
            kind,
            input_dim,
            embed_dim,
            pooling,
            mlp_activation,
            bn_eps,
            bn_momentum,
        };
        arch.validate()
            .map_err(|e| Error::format(at, format!("encoder {idx}: invalid architecture: {e}")))?;
        let mut enc = Encoder::<T>::init(arch, 0)?;
        for t in stored_tensors_mut(&mut enc) {
            for x in t.as_mut_slice() {
                *x = T::of(r.f64("parameter tensor")?);
            }
        }
        encoders.push(enc);
    }
    if r.remaining() != 0 {
        return Err(Error::format(r.offset(), format!("{} trailing bytes", r.remaining())));
    }
    Ok(encoders)
}

pub fn save_checkpoint<T: Scalar>(path: &Path, encoders: &[&Encoder<T>]) -> Result<()> {
    fs::write(path, encode_checkpoint(encoders))?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Vec<Encoder<T>>> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_every_tensor() {
        let mut a = EncoderArch::new(EncoderKind::Rmlp, 5, 4);
        a.pooling = Pooling::Max;
        a.mlp_activation = true;
        let img = Encoder::<f64>::init(a, 1).unwrap();
        let txt = Encoder::<f64>::init(EncoderArch::new(EncoderKind::Fc, 3, 4), 2).unwrap();
        let bytes = encode_checkpoint(&[&img, &txt]);
        let back = decode_checkpoint::<f64>(&bytes).unwrap();
        assert_eq!(back, vec![img, txt]);
    }

    #[test]
    fn header_layout() {
        let e = Encoder::<f64>::init(EncoderArch::new(EncoderKind::Fc, 2, 2), 1).unwrap();
        let bytes = encode_checkpoint(&[&e]);
        assert_eq!(&bytes[..4], b"HNSC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        // header 12 + descriptor 28 + (4 + 2) f64
        assert_eq!(bytes.len(), 12 + 28 + 6 * 8);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let e = Encoder::<f64>::init(EncoderArch::new(EncoderKind::Mlp, 2, 2), 1).unwrap();
        let bytes = encode_checkpoint(&[&e]);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&bad), Err(Error::Format { offset: 0, .. })));
        let short = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_checkpoint::<f64>(short), Err(Error::Format { .. })));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::Format { .. })));
    }
}
