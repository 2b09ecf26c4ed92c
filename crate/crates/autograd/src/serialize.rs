//! Flat binary parameter serialization.
//!
//! Layout: `u32` count, then per parameter (sorted by name)
//! name-len `u16` + UTF-8 name, rank `u8`, dims as `u32`, values as `f64`.
//! All integers and floats little-endian.

use crate::nn::ParamStore;
use crate::tensor::Arr;
use ndarray::IxDyn;
use std::io::{self, Read, Write};

pub fn write_params<W: Write>(out: &mut W, store: &ParamStore) -> io::Result<()> {
    let mut named: Vec<_> = store.params().iter().collect();
    named.sort_by(|a, b| a.name().cmp(b.name()));
    out.write_all(&(named.len() as u32).to_le_bytes())?;
    for p in named {
        let name = p.name().as_bytes();
        out.write_all(&(name.len() as u16).to_le_bytes())?;
        out.write_all(name)?;
        let value = p.value();
        let shape = value.shape();
        out.write_all(&[shape.len() as u8])?;
        for &d in shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in value.iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Load values into an existing store. Every stored name must exist with a
/// matching shape; params absent from the stream are left as initialized.
pub fn read_params<R: Read>(input: &mut R, store: &ParamStore) -> io::Result<()> {
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4)?;
    let count = u32::from_le_bytes(b4);
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        input.read_exact(&mut b2)?;
        let name_len = u16::from_le_bytes(b2) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        let mut b1 = [0u8; 1];
        input.read_exact(&mut b1)?;
        let rank = b1[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input.read_exact(&mut b4)?;
            shape.push(u32::from_le_bytes(b4) as usize);
        }
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            input.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        let param = store.get(&name).ok_or_else(|| {
            io::Error::new(io::ErrorKind::InvalidData, format!("unknown parameter {name}"))
        })?;
        if param.shape() != shape {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("shape mismatch for {name}: file {shape:?} vs model {:?}", param.shape()),
            ));
        }
        let arr = Arr::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        param.set_value(arr);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::uniform_init;
    use ndarray::IxDyn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn roundtrip_preserves_values_and_bytes() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        // register out of sorted order to exercise the sort
        store.register("z.weight", uniform_init(&mut rng, &[2, 3], 1.0));
        store.register("a.bias", uniform_init(&mut rng, &[4], 1.0));
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();

        let mut store2 = ParamStore::new();
        store2.register("z.weight", Arr::zeros(IxDyn(&[2, 3])));
        store2.register("a.bias", Arr::zeros(IxDyn(&[4])));
        read_params(&mut buf.as_slice(), &store2).unwrap();
        for p in store.params() {
            let q = store2.get(p.name()).unwrap();
            assert_eq!(*p.value(), *q.value());
        }

        let mut buf2 = Vec::new();
        write_params(&mut buf2, &store2).unwrap();
        assert_eq!(buf, buf2, "re-serialization must be byte-identical");
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut store = ParamStore::new();
        store.register("w", Arr::zeros(IxDyn(&[2, 2])));
        let mut buf = Vec::new();
        write_params(&mut buf, &store).unwrap();

        let mut store2 = ParamStore::new();
        store2.register("w", Arr::zeros(IxDyn(&[2, 3])));
        assert!(read_params(&mut buf.as_slice(), &store2).is_err());
    }
}
