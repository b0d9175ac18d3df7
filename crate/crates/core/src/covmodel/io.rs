//! Binary container for symmetric matrices with covariance provenance.
//!
//! Layout (all little-endian):
//!
//! | field | type |
//! |---|---|
//! | magic `OFMMCOV\0` | 8 bytes |
//! | version | u32 |
//! | role (0 covariance, 1 inverse weighting) | u8 |
//! | correlation kind (0 none) | u8 |
//! | reconditioning method (0 none, 1 rr, 2 me) | u8 |
//! | reconditioning applied | u8 |
//! | m | u64 |
//! | lengthscale km | f64 |
//! | κ_req | f64 |
//! | δ or T | f64 |
//! | standard deviations | m × f64 |
//! | lower triangle, row-major | m(m+1)/2 × f64 |

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::{CorrelationFunction, CorrelationKind, CovarianceModel, ReconditionMethod, ReconditionRecord};
use crate::numkernel::DenseMatrix;

pub const MAGIC: [u8; 8] = *b"OFMMCOV\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("not a covariance container (bad magic)")]
    BadMagic,

    #[error("unsupported container version {0}")]
    BadVersion(u32),

    #[error("invalid header field `{0}`")]
    BadHeader(&'static str),
}

/// Whether a stored matrix is `R` or its inverse `A`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatrixRole {
    Covariance,
    InverseWeighting,
}

pub(crate) fn write_u8(w: &mut impl Write, v: u8) -> io::Result<()> {
    w.write_all(&[v])
}

pub(crate) fn write_u32(w: &mut impl Write, v: u32) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn write_f64(w: &mut impl Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

pub(crate) fn read_u8(r: &mut impl Read) -> io::Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

pub(crate) fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64(r: &mut impl Read) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_model(w: &mut impl Write, role: MatrixRole, model: &CovarianceModel) -> Result<(), FormatError> {
    let m = model.dim();
    w.write_all(&MAGIC)?;
    write_u32(w, VERSION)?;
    write_u8(w, matches!(role, MatrixRole::InverseWeighting) as u8)?;
    let func = model.correlation_function();
    write_u8(w, func.map_or(0, |f| f.kind().code()))?;
    let rec = model.recondition_record();
    write_u8(
        w,
        match rec.map(|r| r.method) {
            None => 0,
            Some(ReconditionMethod::RidgeRegression) => 1,
            Some(ReconditionMethod::MinimumEigenvalue) => 2,
        },
    )?;
    write_u8(w, rec.is_some_and(|r| r.applied) as u8)?;
    write_u64(w, m as u64)?;
    write_f64(w, func.map_or(0.0, |f| f.lengthscale()))?;
    write_f64(w, rec.map_or(0.0, |r| r.kappa))?;
    write_f64(w, rec.map_or(0.0, |r| r.parameter))?;
    for &s in model.stddevs() {
        write_f64(w, s)?;
    }
    let a = model.matrix();
    for i in 0..m {
        for j in 0..=i {
            write_f64(w, a[(i, j)])?;
        }
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<(MatrixRole, CovarianceModel), FormatError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let role = match read_u8(r)? {
        0 => MatrixRole::Covariance,
        1 => MatrixRole::InverseWeighting,
        _ => return Err(FormatError::BadHeader("role")),
    };
    let kind_code = read_u8(r)?;
    let method_code = read_u8(r)?;
    let applied = match read_u8(r)? {
        0 => false,
        1 => true,
        _ => return Err(FormatError::BadHeader("applied")),
    };
    let m = read_u64(r)? as usize;
    if m == 0 || m > 1 << 20 {
        return Err(FormatError::BadHeader("m"));
    }
    let lengthscale = read_f64(r)?;
    let kappa = read_f64(r)?;
    let parameter = read_f64(r)?;
    let correlation = match kind_code {
        0 => None,
        code => {
            let kind = CorrelationKind::from_code(code).ok_or(FormatError::BadHeader("kind"))?;
            Some(CorrelationFunction::new(kind, lengthscale).map_err(|_| FormatError::BadHeader("lengthscale"))?)
        }
    };
    let method = match method_code {
        0 => None,
        1 => Some(ReconditionMethod::RidgeRegression),
        2 => Some(ReconditionMethod::MinimumEigenvalue),
        _ => return Err(FormatError::BadHeader("method")),
    };
    let recondition = method.map(|method| ReconditionRecord {
        method,
        kappa,
        parameter,
        applied,
    });
    let stddevs = (0..m).map(|_| read_f64(r)).collect::<io::Result<Vec<_>>>()?;
    let mut matrix = DenseMatrix::zeros(m, m);
    for i in 0..m {
        for j in 0..=i {
            let v = read_f64(r)?;
            matrix[(i, j)] = v;
            matrix[(j, i)] = v;
        }
    }
    Ok((role, CovarianceModel::from_parts(matrix, correlation, stddevs, recondition)))
}

pub fn save_model(path: impl AsRef<Path>, role: MatrixRole, model: &CovarianceModel) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, role, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(MatrixRole, CovarianceModel), FormatError> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxtree::{GeoPoint, ObservationSet};
    use crate::covmodel::recondition_rr;

    fn model() -> CovarianceModel {
        let obs = ObservationSet::new((0..7).map(|i| GeoPoint::new(55.0 + 0.1 * i as f64, -1.0 + 0.2 * i as f64)).collect())
            .unwrap();
        let func = CorrelationFunction::new(CorrelationKind::Soar, 80.0).unwrap();
        recondition_rr(&CovarianceModel::uniform(func, &obs, 1.5).unwrap(), 20.0).unwrap()
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&mut buf, MatrixRole::InverseWeighting, &m).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 4 + 8 * 4 + 8 * 7 + 8 * 28);
        let (role, back) = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(role, MatrixRole::InverseWeighting);
        assert_eq!(back, m);
    }

    #[test]
    fn header_validation() {
        let mut buf = Vec::new();
        write_model(&mut buf, MatrixRole::Covariance, &model()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_model(&mut bad.as_slice()), Err(FormatError::BadMagic)));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(FormatError::BadVersion(9))));
        let mut bad = buf.clone();
        bad[13] = 77;
        assert!(matches!(read_model(&mut bad.as_slice()), Err(FormatError::BadHeader("kind"))));
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_model(&mut buf.as_slice()), Err(FormatError::Io(_))));
    }
}
