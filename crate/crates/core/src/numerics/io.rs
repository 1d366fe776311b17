//! Binary tensor files: 8-byte magic `SHLDTNSR`, `u32` LE rank, `rank` LE `u32`
//! dims, then row-major LE `f64` values.

use std::io::{Read, Write};

use super::{NumericsError, Tensor};

pub const MAGIC: &[u8; 8] = b"SHLDTNSR";

pub fn write_tensor<W: Write>(t: &Tensor, mut w: W) -> Result<(), NumericsError> {
    w.write_all(MAGIC)?;
    let rank = u32::try_from(t.rank()).map_err(|_| NumericsError::Format("rank overflow".into()))?;
    w.write_all(&rank.to_le_bytes())?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| NumericsError::Format("dim overflow".into()))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, NumericsError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(NumericsError::Format("bad magic".into()));
    }
    let rank = read_u32(&mut r)? as usize;
    if rank > 8 {
        return Err(NumericsError::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(&mut r)? as usize);
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(NumericsError::Format("trailing bytes".into()));
    }
    Tensor::new(shape, data)
}

pub fn save_tensor(t: &Tensor, path: &std::path::Path) -> Result<(), NumericsError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_tensor(t, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &std::path::Path) -> Result<Tensor, NumericsError> {
    let f = std::fs::File::open(path)?;
    read_tensor(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        let mut expect = b"SHLDTNSR".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.5f64).to_le_bytes());
        assert_eq!(buf, expect);
        assert_eq!(read_tensor(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn truncated_and_bad_magic() {
        let t = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&t, &mut buf).unwrap();
        assert!(read_tensor(&buf[..buf.len() - 1]).is_err());
        buf[0] = b'X';
        assert!(matches!(read_tensor(buf.as_slice()), Err(NumericsError::Format(_))));
    }
}
