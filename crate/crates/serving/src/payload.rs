//! Feature payload codec.
//!
//! ```text
//! "MXF1" | u8 dtype (1 = f32, 2 = f64) | u8 ndim | u32 dims[ndim] | data
//! ```
//!
//! Integers and elements are little-endian, data row-major.

use mixlm_core::scalar::{decode_elems, encode_elems};
use mixlm_core::{DType, Scalar, Tensor};

use crate::error::{Result, ServeError};

pub const MAGIC: &[u8; 4] = b"MXF1";

pub fn encode_payload<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    if t.shape().len() > u8::MAX as usize {
        return Err(ServeError::Input("too many dimensions".into()));
    }
    if !t.is_finite() {
        return Err(ServeError::Input("payload values must be finite".into()));
    }
    let mut out = Vec::with_capacity(header_len(t.shape().len()) + t.len() * T::DTYPE.size());
    out.extend_from_slice(MAGIC);
    out.push(T::DTYPE.code());
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| ServeError::Input(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    encode_elems(t.data(), &mut out);
    Ok(out)
}

fn header_len(ndim: usize) -> usize {
    6 + 4 * ndim
}

/// Parsed header plus a borrowed body.
#[derive(Debug, Clone, PartialEq)]
pub struct PayloadView<'a> {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data: &'a [u8],
}

pub fn parse_payload(bytes: &[u8]) -> Result<PayloadView<'_>> {
    if bytes.len() < 4 {
        return Err(ServeError::payload("magic", "truncated"));
    }
    if &bytes[..4] != MAGIC {
        return Err(ServeError::payload("magic", "bad magic"));
    }
    let dtype = *bytes.get(4).ok_or_else(|| ServeError::payload("dtype", "truncated"))?;
    let dtype = DType::from_code(dtype).ok_or_else(|| ServeError::payload("dtype", format!("unknown code {dtype}")))?;
    let ndim = *bytes.get(5).ok_or_else(|| ServeError::payload("ndim", "truncated"))? as usize;
    let head = header_len(ndim);
    if bytes.len() < head {
        return Err(ServeError::payload("dims", "truncated"));
    }
    let mut shape = Vec::with_capacity(ndim);
    let mut count: usize = 1;
    for i in 0..ndim {
        let d = u32::from_le_bytes(bytes[6 + 4 * i..10 + 4 * i].try_into().expect("4 bytes")) as usize;
        count = count
            .checked_mul(d)
            .ok_or_else(|| ServeError::payload("dims", "element count overflows"))?;
        shape.push(d);
    }
    let body = count
        .checked_mul(dtype.size())
        .ok_or_else(|| ServeError::payload("dims", "byte length overflows"))?;
    let data = &bytes[head..];
    if data.len() < body {
        return Err(ServeError::payload("data", format!("truncated: {} of {body} bytes", data.len())));
    }
    if data.len() > body {
        return Err(ServeError::payload("data", format!("{} trailing bytes", data.len() - body)));
    }
    Ok(PayloadView { dtype, shape, data })
}

/// Decodes a payload whose dtype must be `T`'s.
pub fn decode_payload<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let v = parse_payload(bytes)?;
    if v.dtype != T::DTYPE {
        return Err(ServeError::payload("dtype", format!("{:?} payload, expected {:?}", v.dtype, T::DTYPE)));
    }
    Ok(Tensor::new(v.shape, decode_elems::<T>(v.dtype, v.data))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_layout() {
        let t = Tensor::<f32>::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = encode_payload(&t).unwrap();
        assert_eq!(
            b,
            [
                0x4D, 0x58, 0x46, 0x31, 0x01, 0x02, 0x01, 0x00, 0x00, 0x00, 0x02, 0x00, 0x00, 0x00, 0x00, 0x00, 0x80,
                0x3F, 0x00, 0x00, 0x00, 0x40
            ]
        );
        assert_eq!(decode_payload::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn errors_name_the_field() {
        let t = Tensor::<f64>::new(vec![2], vec![1.0, -0.5]).unwrap();
        let mut b = encode_payload(&t).unwrap();
        b[3] = b'2';
        let e = decode_payload::<f64>(&b).unwrap_err().to_string();
        assert!(e.contains("bad magic"), "{e}");
        let b = encode_payload(&t).unwrap();
        assert!(decode_payload::<f64>(&b[..b.len() - 1]).unwrap_err().to_string().contains("data"));
        assert!(decode_payload::<f32>(&b).unwrap_err().to_string().contains("dtype"));
        let mut huge = b"MXF1\x02\x02".to_vec();
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        huge.extend_from_slice(&u32::MAX.to_le_bytes());
        assert!(parse_payload(&huge).is_err());
    }

    #[test]
    fn rejects_non_finite() {
        let t = Tensor::<f64>::new(vec![1], vec![f64::NAN]).unwrap();
        assert!(encode_payload(&t).is_err());
    }
}
