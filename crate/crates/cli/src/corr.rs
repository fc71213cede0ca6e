//! Correspondence-field export format.
//!
//! A flat binary per group and stage:
//!
//! ```text
//! CONDA-CORR-1
//! stage <s> n <N> h <H> w <W>
//! <payload: refined coordinates [N,H,W,N,2] as little-endian f32>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};

pub const FORMAT_TAG: &str = "CONDA-CORR-1";

pub struct CorrFile {
    pub stage: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    /// `[N, H, W, N, 2]` row-major.
    pub coords: Vec<f32>,
}

pub fn write_corr(path: &Path, stage: usize, n: usize, h: usize, w: usize, refined: &[f64]) -> Result<()> {
    if refined.len() != n * h * w * n * 2 {
        bail!("refined field has {} values, expected {}", refined.len(), n * h * w * n * 2);
    }
    let mut file = std::fs::File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))?;
    writeln!(file, "{FORMAT_TAG}")?;
    writeln!(file, "stage {stage} n {n} h {h} w {w}")?;
    for v in refined {
        file.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_corr(path: &Path) -> Result<CorrFile> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let mut pos = 0usize;
    let line = |pos: &mut usize| -> Result<String> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            bail!("truncated correspondence file header");
        }
        let s = String::from_utf8(bytes[start..*pos].to_vec())?;
        *pos += 1;
        Ok(s)
    };
    if line(&mut pos)? != FORMAT_TAG {
        bail!("not a {FORMAT_TAG} file");
    }
    let meta = line(&mut pos)?;
    let fields: Vec<&str> = meta.split(' ').collect();
    let [_, stage, _, n, _, h, _, w] = fields.as_slice() else {
        bail!("bad metadata line: {meta}");
    };
    let (stage, n, h, w): (usize, usize, usize, usize) =
        (stage.parse()?, n.parse()?, h.parse()?, w.parse()?);
    let count = n * h * w * n * 2;
    let payload = &bytes[pos..];
    if payload.len() != count * 4 {
        bail!("payload holds {} bytes, expected {}", payload.len(), count * 4);
    }
    let coords = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(CorrFile { stage, n, h, w, coords })
}
