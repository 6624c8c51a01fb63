//! Binary tensor file formats.
//!
//! `MXT1` holds a block-quantized tensor: a little-endian header (magic
//! `MXT1`, `rows: u32`, `cols: u32`, `orientation: u8`) followed by the
//! blocks in row-major grid order, each block 16 bytes of packed element
//! nibbles plus 1 scale byte.
//!
//! `F64M` holds a dense matrix: magic `F64M`, `rows: u32`, `cols: u32`,
//! then row-major `f64` values, all little-endian.

use crate::block::MxBlock;
use crate::error::Error;
use crate::fp4::E8m0Scale;
use crate::tensor::{Mat, MxTensor, Orientation};
use crate::Result;
use std::io::{Read, Write};
use std::path::Path;

const MXT1_MAGIC: &[u8; 4] = b"MXT1";
const F64M_MAGIC: &[u8; 4] = b"F64M";

/// Serializes a quantized tensor to the `MXT1` byte layout.
pub fn write_mxt1(tensor: &MxTensor, mut w: impl Write) -> Result<()> {
    w.write_all(MXT1_MAGIC)?;
    w.write_all(&(tensor.rows() as u32).to_le_bytes())?;
    w.write_all(&(tensor.cols() as u32).to_le_bytes())?;
    w.write_all(&[tensor.orientation().to_byte()])?;
    for block in tensor.blocks() {
        w.write_all(&block.packed_elements())?;
        w.write_all(&[block.scale.to_bits()])?;
    }
    Ok(())
}

/// Reads a quantized tensor from the `MXT1` byte layout.
pub fn read_mxt1(mut r: impl Read) -> Result<MxTensor> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format("MXT1", "truncated header"))?;
    if &magic != MXT1_MAGIC {
        return Err(Error::format("MXT1", format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::format("MXT1", "truncated header"))?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(|_| Error::format("MXT1", "truncated header"))?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut ob = [0u8; 1];
    r.read_exact(&mut ob).map_err(|_| Error::format("MXT1", "truncated header"))?;
    let orientation = Orientation::from_byte(ob[0])?;

    let n_blocks = MxTensor::expected_block_count(rows, cols, orientation);
    let mut blocks = Vec::with_capacity(n_blocks);
    let mut buf = [0u8; 17];
    for i in 0..n_blocks {
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("MXT1", format!("truncated at block {i} of {n_blocks}")))?;
        let packed: [u8; 16] = buf[..16].try_into().expect("fixed split");
        blocks.push(MxBlock::from_packed(&packed, E8m0Scale::from_bits(buf[16])));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(Error::format("MXT1", "trailing bytes after final block"));
    }
    MxTensor::from_blocks(rows, cols, orientation, blocks)
}

/// Writes a dense `f64` matrix to the `F64M` byte layout.
pub fn write_f64m(mat: &Mat<f64>, mut w: impl Write) -> Result<()> {
    w.write_all(F64M_MAGIC)?;
    w.write_all(&(mat.rows() as u32).to_le_bytes())?;
    w.write_all(&(mat.cols() as u32).to_le_bytes())?;
    for i in 0..mat.rows() {
        for v in mat.row(i) {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dense `f64` matrix from the `F64M` byte layout.
pub fn read_f64m(mut r: impl Read) -> Result<Mat<f64>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| Error::format("F64M", "truncated header"))?;
    if &magic != F64M_MAGIC {
        return Err(Error::format("F64M", format!("bad magic {magic:?}")));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word).map_err(|_| Error::format("F64M", "truncated header"))?;
    let rows = u32::from_le_bytes(word) as usize;
    r.read_exact(&mut word).map_err(|_| Error::format("F64M", "truncated header"))?;
    let cols = u32::from_le_bytes(word) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut buf = [0u8; 8];
    for i in 0..rows * cols {
        r.read_exact(&mut buf)
            .map_err(|_| Error::format("F64M", format!("truncated at value {i}")))?;
        let v = f64::from_le_bytes(buf);
        if v.is_nan() {
            return Err(Error::format("F64M", format!("NaN at value {i}")));
        }
        data.push(v);
    }
    Ok(Mat::from_vec(rows, cols, data))
}

/// Convenience wrapper writing `MXT1` to a filesystem path.
pub fn save_mxt1(tensor: &MxTensor, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_mxt1(tensor, std::io::BufWriter::new(file))
}

/// Convenience wrapper reading `MXT1` from a filesystem path.
pub fn load_mxt1(path: impl AsRef<Path>) -> Result<MxTensor> {
    let file = std::fs::File::open(path)?;
    read_mxt1(std::io::BufReader::new(file))
}

/// Convenience wrapper writing `F64M` to a filesystem path.
pub fn save_f64m(mat: &Mat<f64>, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_f64m(mat, std::io::BufWriter::new(file))
}

/// Convenience wrapper reading `F64M` from a filesystem path.
pub fn load_f64m(path: impl AsRef<Path>) -> Result<Mat<f64>> {
    let file = std::fs::File::open(path)?;
    read_f64m(std::io::BufReader::new(file))
}
