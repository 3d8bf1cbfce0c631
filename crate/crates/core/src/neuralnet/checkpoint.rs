//! M5 checkpoint format, version 1.
//!
//! Layout (little-endian):
//! - magic `M5CKPT\0\0` (8 bytes)
//! - u32 format version
//! - u32 JSON length, then the M5Config as JSON
//! - per block, in order: conv weights, conv bias, gamma, beta,
//!   running mean, running variance
//! - the fully-connected weights, then its bias
//!
//! Every array is stored as a u32 rank, u64 dimensions, then row-major
//! f32 values. Loaded models start in eval mode.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array1, Array2, Array3};

use super::{M5Config, M5Model, Mode};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"M5CKPT\0\0";
const VERSION: u32 = 1;

fn write_array<W: Write>(w: &mut W, dims: &[usize], data: &[f32]) -> std::io::Result<()> {
    w.write_u32::<LittleEndian>(dims.len() as u32)?;
    for &d in dims {
        w.write_u64::<LittleEndian>(d as u64)?;
    }
    for &v in data {
        w.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_array<R: Read>(r: &mut R, path: &Path, want_rank: usize) -> Result<(Vec<usize>, Vec<f32>)> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let rank = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if rank != want_rank {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("array rank {rank}, expected {want_rank}"),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut count = 1usize;
    for _ in 0..rank {
        let d = r.read_u64::<LittleEndian>().map_err(io_err)? as usize;
        count = count.saturating_mul(d);
        dims.push(d);
    }
    if count > 1 << 30 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("array of {count} values is implausibly large"),
        });
    }
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        data.push(r.read_f32::<LittleEndian>().map_err(io_err)?);
    }
    Ok((dims, data))
}

pub fn save_model(model: &M5Model<f32>, path: &Path) -> Result<()> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    (|| -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let json = serde_json::to_vec(&model.config).expect("config serializes");
        w.write_u32::<LittleEndian>(json.len() as u32)?;
        w.write_all(&json)?;
        for blk in &model.blocks {
            let (c_out, c_in, k) = blk.conv.w.dim();
            write_array(
                &mut w,
                &[c_out, c_in, k],
                blk.conv.w.as_slice().expect("contiguous"),
            )?;
            write_array(&mut w, &[c_out], blk.conv.b.as_slice().expect("contiguous"))?;
            write_array(&mut w, &[c_out], blk.bn.gamma.as_slice().expect("contiguous"))?;
            write_array(&mut w, &[c_out], blk.bn.beta.as_slice().expect("contiguous"))?;
            write_array(
                &mut w,
                &[c_out],
                blk.bn.running_mean.as_slice().expect("contiguous"),
            )?;
            write_array(
                &mut w,
                &[c_out],
                blk.bn.running_var.as_slice().expect("contiguous"),
            )?;
        }
        let (rows, cols) = model.fc_w.dim();
        write_array(&mut w, &[rows, cols], model.fc_w.as_slice().expect("contiguous"))?;
        write_array(&mut w, &[2], model.fc_b.as_slice().expect("contiguous"))?;
        w.flush()
    })()
    .map_err(io_err)
}

pub fn load_model(path: &Path) -> Result<M5Model<f32>> {
    let io_err = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let format = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = BufReader::new(File::open(path).map_err(io_err)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(format("not an M5 checkpoint (bad magic)".to_string()));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(format(format!("unsupported checkpoint version {version}")));
    }
    let json_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    if json_len > 1 << 20 {
        return Err(format(format!("config header of {json_len} bytes")));
    }
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(io_err)?;
    let config: M5Config =
        serde_json::from_slice(&json).map_err(|e| format(format!("bad config header: {e}")))?;
    config.validate()?;

    // Build from the config, then overwrite every parameter.
    let mut model = M5Model::<f32>::new(&config, 0)?;
    let specs = config.effective_blocks();
    let mut in_ch = 1usize;
    for (blk, spec) in model.blocks.iter_mut().zip(&specs) {
        let (dims, data) = read_array(&mut r, path, 3)?;
        let want = [spec.out_channels, in_ch, spec.kernel];
        if dims != want {
            return Err(format(format!(
                "conv weight dims {dims:?}, expected {want:?}"
            )));
        }
        blk.conv.w = Array3::from_shape_vec((want[0], want[1], want[2]), data)
            .expect("checked dims");
        for target in [
            &mut blk.conv.b,
            &mut blk.bn.gamma,
            &mut blk.bn.beta,
            &mut blk.bn.running_mean,
            &mut blk.bn.running_var,
        ] {
            let (dims, data) = read_array(&mut r, path, 1)?;
            if dims != [spec.out_channels] {
                return Err(format(format!(
                    "vector dims {dims:?}, expected [{}]",
                    spec.out_channels
                )));
            }
            *target = Array1::from_vec(data);
        }
        in_ch = spec.out_channels;
    }
    let (dims, data) = read_array(&mut r, path, 2)?;
    if dims != [2, in_ch] {
        return Err(format(format!("fc weight dims {dims:?}, expected [2, {in_ch}]")));
    }
    model.fc_w = Array2::from_shape_vec((2, in_ch), data).expect("checked dims");
    let (dims, data) = read_array(&mut r, path, 1)?;
    if dims != [2] {
        return Err(format(format!("fc bias dims {dims:?}, expected [2]")));
    }
    model.fc_b = Array1::from_vec(data);
    model.mode = Mode::Eval;
    Ok(model)
}
