//! Binary container for 4-axis arrays (latents and raw clips).
//!
//! Layout, all little-endian:
//!
//! | offset | size | field                      |
//! |--------|------|----------------------------|
//! | 0      | 4    | magic `OXLT`               |
//! | 4      | 2    | version (u16, currently 1) |
//! | 6      | 4×4  | f, h, w, channels (u32)    |
//! | 22     | 1    | dtype (1 = f32, 2 = f64)   |
//! | 23     | ..   | row-major payload          |

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Array, DType, Scalar};

pub const LATENT_MAGIC: [u8; 4] = *b"OXLT";
pub const LATENT_VERSION: u16 = 1;
const HEADER_LEN: usize = 23;

pub fn encode_array<T: Scalar>(a: &Array<T>) -> Result<Vec<u8>> {
    let &[f, h, w, c] = a.shape() else {
        return Err(Error::Format(format!("only 4-axis arrays are serialised, got {:?}", a.shape())));
    };
    let mut out = Vec::with_capacity(HEADER_LEN + a.len() * T::DTYPE.size_in_bytes());
    out.extend_from_slice(&LATENT_MAGIC);
    out.extend_from_slice(&LATENT_VERSION.to_le_bytes());
    for dim in [f, h, w, c] {
        let dim = u32::try_from(dim).map_err(|_| Error::Format(format!("extent {dim} exceeds u32")))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }
    out.push(T::DTYPE.code());
    out.extend_from_slice(&a.to_le_bytes());
    Ok(out)
}

/// Parses a container, converting the stored precision to `T` if needed.
pub fn decode_array<T: Scalar>(bytes: &[u8]) -> Result<Array<T>> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != LATENT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != LATENT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for (i, d) in dims.iter_mut().enumerate() {
        let off = 6 + 4 * i;
        *d = u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
    }
    let dtype = DType::from_code(bytes[22]).ok_or_else(|| Error::Format(format!("unknown dtype code {}", bytes[22])))?;
    let payload = &bytes[HEADER_LEN..];
    match dtype {
        DType::F32 => Ok(Array::<f32>::from_le_bytes(dims, payload)?.cast()),
        DType::F64 => Ok(Array::<f64>::from_le_bytes(dims, payload)?.cast()),
    }
}

pub fn write_array<T: Scalar>(path: impl AsRef<Path>, a: &Array<T>) -> Result<()> {
    fs::write(path, encode_array(a)?)?;
    Ok(())
}

pub fn read_array<T: Scalar>(path: impl AsRef<Path>) -> Result<Array<T>> {
    decode_array(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_normal, Rng};

    #[test]
    fn header_layout() {
        let a = Array::<f32>::zeros([2, 3, 4, 5]);
        let bytes = encode_array(&a).unwrap();
        assert_eq!(&bytes[..4], b"OXLT");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 5);
        assert_eq!(bytes[22], 1);
        assert_eq!(bytes.len(), 23 + 120 * 4);
    }

    #[test]
    fn roundtrip_and_cast() {
        let a = seeded_normal::<f64>([1, 2, 2, 3], &mut Rng::new(1));
        let bytes = encode_array(&a).unwrap();
        assert_eq!(decode_array::<f64>(&bytes).unwrap(), a);
        assert_eq!(decode_array::<f32>(&bytes).unwrap(), a.cast::<f32>());
    }

    #[test]
    fn rejects_corruption() {
        let a = Array::<f32>::zeros([1, 1, 1, 2]);
        let mut bytes = encode_array(&a).unwrap();
        assert!(decode_array::<f32>(&bytes[..10]).is_err());
        bytes.pop();
        assert!(decode_array::<f32>(&bytes).is_err());
        let mut bad = encode_array(&a).unwrap();
        bad[0] = b'X';
        assert!(decode_array::<f32>(&bad).is_err());
        assert!(encode_array(&Array::<f32>::zeros([2, 2])).is_err());
    }
}
