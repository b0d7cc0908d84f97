// Raw corpus dump: one binary file per video plus a tab-separated manifest.
//
// Video file layout (all integers little-endian):
//   magic   8 bytes  "IIVCLVID"
//   version u32      1
//   ndim    u32      4
//   dims    u32 × 4  C, T, H, W
//   class   u32
//   id      u64
//   data    f32 × C·T·H·W

use std::fs;
use std::path::{Path, PathBuf};

use super::synth::SyntheticVideo;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"IIVCLVID";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.tsv";

pub fn write_video(path: &Path, video: &SyntheticVideo) -> Result<()> {
    let mut buf = Vec::with_capacity(48 + 4 * video.frames.numel());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(video.frames.ndim() as u32).to_le_bytes());
    for &d in video.frames.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&video.class_id.to_le_bytes());
    buf.extend_from_slice(&video.video_id.to_le_bytes());
    for &v in video.frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads `(frames, class_id, video_id)` back from a video file.
pub fn read_video(path: &Path) -> Result<(Tensor<f32>, u32, u64)> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Data(format!("{}: {msg}", path.display()));
    if buf.len() < 20 || &buf[..8] != MAGIC {
        return Err(bad("not a video dump"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
    if u32_at(8) != VERSION {
        return Err(bad("unsupported version"));
    }
    let ndim = u32_at(12) as usize;
    let header = 16 + 4 * ndim + 4 + 8;
    if buf.len() < header {
        return Err(bad("truncated header"));
    }
    let dims: Vec<usize> = (0..ndim).map(|i| u32_at(16 + 4 * i) as usize).collect();
    let class_id = u32_at(16 + 4 * ndim);
    let o = 20 + 4 * ndim;
    let video_id = u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    let n: usize = dims.iter().product();
    if buf.len() != header + 4 * n {
        return Err(bad("payload length does not match shape"));
    }
    let data = buf[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::new(&dims, data)?, class_id, video_id))
}

/// Writes every video and a manifest of `video_id  class_id  file` rows.
pub fn dump_corpus(videos: &[SyntheticVideo], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("video_id\tclass_id\tfile\n");
    for v in videos {
        let name = format!("video_{:06}.bin", v.video_id);
        write_video(&dir.join(&name), v)?;
        manifest.push_str(&format!("{}\t{}\t{name}\n", v.video_id, v.class_id));
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Parses a manifest into `(video_id, class_id, file)` rows.
pub fn read_manifest(path: &Path) -> Result<Vec<(u64, u32, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(parse_err("expected 3 tab-separated columns"));
        }
        let id = cols[0].parse().map_err(|_| parse_err("bad video_id"))?;
        let class = cols[1].parse().map_err(|_| parse_err("bad class_id"))?;
        rows.push((id, class, cols[2].to_string()));
    }
    Ok(rows)
}
