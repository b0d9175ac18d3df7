//! Binary serialization of [`FmmPlan`].
//!
//! Little-endian throughout. After the magic `OFMMPLAN` and a u32 version come
//! the rank, the tree (bounds, level count, observation count, membership of
//! every box), then per box id the factors, M2M, M2L and L2L operators, and
//! finally the near-field block of every leaf. Optional records start with a
//! presence byte; matrices are stored as rows, cols, row-major data.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BoxFactors, FmmPlan, NearBlock};
use crate::boxtree::{level_offset, BoxId, BoxTree, Bounds, MAX_LEVELS};
use crate::covmodel::io::{read_f64, read_u32, read_u64, read_u8, write_f64, write_u32, write_u64, write_u8, FormatError};
use crate::numkernel::{DenseMatrix, TruncatedSvd};

pub const MAGIC: [u8; 8] = *b"OFMMPLAN";
pub const VERSION: u32 = 1;

/// Guard against absurd lengths in corrupt input.
const MAX_LEN: u64 = 1 << 32;

fn write_len(w: &mut impl Write, n: usize) -> io::Result<()> {
    write_u64(w, n as u64)
}

fn read_len(r: &mut impl Read, field: &'static str) -> Result<usize, FormatError> {
    let n = read_u64(r)?;
    if n > MAX_LEN {
        return Err(FormatError::BadHeader(field));
    }
    Ok(n as usize)
}

fn read_flag(r: &mut impl Read) -> Result<bool, FormatError> {
    match read_u8(r)? {
        0 => Ok(false),
        1 => Ok(true),
        _ => Err(FormatError::BadHeader("presence flag")),
    }
}

fn write_matrix(w: &mut impl Write, m: &DenseMatrix) -> io::Result<()> {
    write_len(w, m.nrows())?;
    write_len(w, m.ncols())?;
    m.as_slice().iter().try_for_each(|&v| write_f64(w, v))
}

fn read_matrix(r: &mut impl Read) -> Result<DenseMatrix, FormatError> {
    let rows = read_len(r, "matrix rows")?;
    let cols = read_len(r, "matrix cols")?;
    let data = (0..rows * cols).map(|_| read_f64(r)).collect::<io::Result<Vec<_>>>()?;
    DenseMatrix::from_row_major(rows, cols, data).map_err(|_| FormatError::BadHeader("matrix shape"))
}

fn write_indices(w: &mut impl Write, idx: &[usize]) -> io::Result<()> {
    write_len(w, idx.len())?;
    idx.iter().try_for_each(|&i| write_len(w, i))
}

fn read_indices(r: &mut impl Read) -> Result<Vec<usize>, FormatError> {
    let n = read_len(r, "index count")?;
    (0..n).map(|_| read_len(r, "index")).collect()
}

fn write_svd(w: &mut impl Write, s: &TruncatedSvd) -> io::Result<()> {
    write_matrix(w, &s.left)?;
    write_len(w, s.values.len())?;
    s.values.iter().try_for_each(|&v| write_f64(w, v))?;
    write_matrix(w, &s.right)
}

fn read_svd(r: &mut impl Read) -> Result<TruncatedSvd, FormatError> {
    let left = read_matrix(r)?;
    let n = read_len(r, "singular value count")?;
    let values = (0..n).map(|_| read_f64(r)).collect::<io::Result<Vec<_>>>()?;
    let right = read_matrix(r)?;
    if left.ncols() != n || right.ncols() != n {
        return Err(FormatError::BadHeader("factor rank"));
    }
    Ok(TruncatedSvd { left, values, right })
}

fn write_optional<W: Write, T>(
    w: &mut W,
    item: Option<&T>,
    body: impl FnOnce(&mut W, &T) -> io::Result<()>,
) -> io::Result<()> {
    match item {
        None => write_u8(w, 0),
        Some(x) => {
            write_u8(w, 1)?;
            body(w, x)
        }
    }
}

pub fn write_plan(w: &mut impl Write, plan: &FmmPlan) -> Result<(), FormatError> {
    w.write_all(&MAGIC)?;
    write_u32(w, VERSION)?;
    write_len(w, plan.rank())?;

    let tree = plan.tree();
    let b = tree.bounds();
    for v in [b.lon_min, b.lon_max, b.lat_min, b.lat_max] {
        write_f64(w, v)?;
    }
    write_len(w, tree.levels())?;
    write_len(w, tree.observation_count())?;
    for id in 0..tree.box_count() {
        write_indices(w, tree.members(BoxId(id)))?;
    }

    for f in plan.boxes() {
        write_optional(w, f.as_ref(), |w, f| {
            write_svd(w, &f.source)?;
            write_optional(w, f.target.as_ref(), |w, t| write_svd(w, t))
        })?;
    }
    for op in plan.m2m_all() {
        write_optional(w, op.as_ref(), |w, m| write_matrix(w, m))?;
    }
    for list in plan.m2l_all() {
        write_len(w, list.len())?;
        for (src, op) in list {
            write_len(w, src.0)?;
            write_matrix(w, op)?;
        }
    }
    for op in plan.l2l_all() {
        write_optional(w, op.as_ref(), |w, m| write_matrix(w, m))?;
    }
    for nb in plan.near_all() {
        write_optional(w, nb.as_ref(), |w, nb| {
            write_indices(w, &nb.columns)?;
            write_matrix(w, &nb.block)
        })?;
    }
    Ok(())
}

fn read_operators(r: &mut impl Read, n: usize) -> Result<Vec<Option<DenseMatrix>>, FormatError> {
    (0..n)
        .map(|_| if read_flag(r)? { read_matrix(r).map(Some) } else { Ok(None) })
        .collect()
}

pub fn read_plan(r: &mut impl Read) -> Result<FmmPlan, FormatError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic);
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(FormatError::BadVersion(version));
    }
    let rank = read_len(r, "rank")?;
    let bounds = Bounds {
        lon_min: read_f64(r)?,
        lon_max: read_f64(r)?,
        lat_min: read_f64(r)?,
        lat_max: read_f64(r)?,
    };
    let levels = read_len(r, "levels")?;
    if levels > MAX_LEVELS {
        return Err(FormatError::BadHeader("levels"));
    }
    let observations = read_len(r, "observations")?;
    let n = level_offset(levels + 1);
    let members = (0..n).map(|_| read_indices(r)).collect::<Result<Vec<_>, _>>()?;
    let tree = BoxTree::from_parts(bounds, levels, observations, members).map_err(|_| FormatError::BadHeader("tree"))?;

    let mut boxes = Vec::with_capacity(n);
    for id in 0..n {
        let f = if read_flag(r)? {
            let source = read_svd(r)?;
            let target = if read_flag(r)? { Some(read_svd(r)?) } else { None };
            Some(BoxFactors {
                id: BoxId(id),
                source,
                target,
            })
        } else {
            None
        };
        boxes.push(f);
    }
    let m2m = read_operators(r, n)?;
    let mut m2l = Vec::with_capacity(n);
    for _ in 0..n {
        let count = read_len(r, "interaction count")?;
        let list = (0..count)
            .map(|_| Ok((BoxId(read_len(r, "source id")?), read_matrix(r)?)))
            .collect::<Result<Vec<_>, FormatError>>()?;
        m2l.push(list);
    }
    let l2l = read_operators(r, n)?;
    let leaves = n - level_offset(levels);
    let mut near = Vec::with_capacity(leaves);
    for _ in 0..leaves {
        near.push(if read_flag(r)? {
            let columns = read_indices(r)?;
            let block = read_matrix(r)?;
            Some(NearBlock { columns, block })
        } else {
            None
        });
    }
    Ok(FmmPlan::from_parts(rank, tree, boxes, m2m, m2l, l2l, near))
}

pub fn save_plan(path: impl AsRef<Path>, plan: &FmmPlan) -> Result<(), FormatError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_plan(&mut w, plan)?;
    w.flush()?;
    Ok(())
}

pub fn load_plan(path: impl AsRef<Path>) -> Result<FmmPlan, FormatError> {
    read_plan(&mut BufReader::new(File::open(path)?))
}
