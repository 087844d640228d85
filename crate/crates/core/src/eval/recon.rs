use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{join_vertical, MultiViewDataset};
use crate::error::{Error, Result};
use crate::model::Model;

/// Clamps to `[0, 1]` and rounds half up to a byte.
pub fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Binary PGM (P5) encoding of a `[h, w]` image in `[0, 1]`.
pub fn encode_pgm(pixels: &[f64], h: usize, w: usize) -> Result<Vec<u8>> {
    if pixels.len() != h * w {
        return Err(Error::Dimension(format!(
            "{} pixels for a {h}x{w} image",
            pixels.len()
        )));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn file_names(i: usize) -> [String; 3] {
    [
        format!("{i:04}_original.pgm"),
        format!("{i:04}_l2r.pgm"),
        format!("{i:04}_r2l.pgm"),
    ]
}

/// Writes, for each of the first `count` samples, the original image, the
/// left half with the right half decoded from the left alone (`l2r`), and
/// the right half with the left half decoded from the right alone (`r2l`).
///
/// All files are staged under temporary names and renamed only once every
/// write succeeded.
pub fn emit_reconstructions(model: &Model, data: &MultiViewDataset, count: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if count == 0 {
        return Err(Error::Config("reconstruction count must be at least 1".into()));
    }
    if data.dims() != (392, 392) {
        return Err(Error::Dimension(format!(
            "reconstruction images need 28x14 half views, dataset has {:?}",
            data.dims()
        )));
    }
    let count = count.min(data.len());
    let idx: Vec<usize> = (0..count).collect();
    let b = data.select(&idx);
    let (_, right_from_x) = model.decode(&model.encode(Some(&b.x), None)?)?;
    let (left_from_y, _) = model.decode(&model.encode(None, Some(&b.y))?)?;
    let original = join_vertical(&b.x, &b.y)?;
    let l2r = join_vertical(&b.x, &right_from_x)?;
    let r2l = join_vertical(&left_from_y, &b.y)?;

    fs::create_dir_all(out_dir).map_err(|e| io_at(out_dir, e))?;
    let mut staged: Vec<(PathBuf, PathBuf)> = Vec::new();
    let result = (|| -> Result<()> {
        for i in 0..count {
            for (name, img) in file_names(i).iter().zip([&original, &l2r, &r2l]) {
                let bytes = encode_pgm(&img.data()[i * 784..(i + 1) * 784], 28, 28)?;
                let path = out_dir.join(name);
                let tmp = out_dir.join(format!(".{name}.tmp"));
                fs::write(&tmp, bytes).map_err(|e| io_at(&tmp, e))?;
                staged.push((tmp, path));
            }
        }
        Ok(())
    })();
    if let Err(e) = result {
        for (tmp, _) in &staged {
            let _ = fs::remove_file(tmp);
        }
        return Err(e);
    }
    let mut written = Vec::with_capacity(staged.len());
    for (tmp, path) in staged {
        fs::rename(&tmp, &path).map_err(|e| io_at(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}
