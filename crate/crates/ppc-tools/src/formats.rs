//! Persistent file formats.
//!
//! Everything is a text header (or pure text) so files stay diffable;
//! bulk voxel/pixel payloads are raw little-endian `f32`. Floats in text
//! are written with 17 significant digits, which `f64` parsing inverts
//! exactly, so every writer/reader pair round-trips bit-exactly.

use anyhow::{anyhow, bail, Context, Result};
use nalgebra::{Matrix3, Vector3};
use ppc_core::{
    format_correspondences, parse_correspondences, CaseRecord, CaseStatus, ContourSet,
    CorrespondenceSet, Image2D, RigidTransform, Volume,
};
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

const VOLUME_MAGIC: &str = "VOL1";
const IMAGE_MAGIC: &str = "IMG1";

fn write_f64(x: f64) -> String {
    format!("{x:.17e}")
}

/// Splits a header from the binary payload at the `data\n` marker.
fn split_header(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let marker = b"data\n";
    let pos = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| anyhow!("missing `data` marker"))?;
    let header = std::str::from_utf8(&bytes[..pos]).context("header is not UTF-8")?;
    Ok((header, &bytes[pos + marker.len()..]))
}

fn parse_vector3(s: &str) -> Result<Vector3<f64>> {
    let parts: Vec<f64> = s
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|_| anyhow!("bad number `{t}`")))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        bail!("expected 3 numbers, found {}", parts.len());
    }
    Ok(Vector3::new(parts[0], parts[1], parts[2]))
}

fn payload_f32le(bytes: &[u8], expected: usize) -> Result<Vec<f32>> {
    if bytes.len() != expected * 4 {
        bail!("payload is {} bytes, expected {}", bytes.len(), expected * 4);
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_volume(path: &Path, v: &Volume) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let dims = v.dims();
    let sp = v.spacing();
    let o = v.origin();
    writeln!(w, "{VOLUME_MAGIC}")?;
    writeln!(w, "dims {} {} {}", dims[0], dims[1], dims[2])?;
    writeln!(w, "spacing {} {} {}", write_f64(sp.x), write_f64(sp.y), write_f64(sp.z))?;
    writeln!(w, "origin {} {} {}", write_f64(o.x), write_f64(o.y), write_f64(o.z))?;
    writeln!(w, "dtype f32le")?;
    writeln!(w, "data")?;
    for value in v.data() {
        w.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let (header, payload) = split_header(&bytes)?;

    let mut dims: Option<[usize; 3]> = None;
    let mut spacing = None;
    let mut origin = None;
    let mut dtype_ok = false;
    for (idx, line) in header.lines().enumerate() {
        let line = line.trim();
        if idx == 0 {
            if line != VOLUME_MAGIC {
                bail!("not a volume file (magic `{line}`)");
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "dims" => {
                let parts: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| anyhow!("bad dimension `{t}`")))
                    .collect::<Result<_>>()?;
                if parts.len() != 3 {
                    bail!("dims needs 3 entries");
                }
                dims = Some([parts[0], parts[1], parts[2]]);
            }
            "spacing" => spacing = Some(parse_vector3(rest)?),
            "origin" => origin = Some(parse_vector3(rest)?),
            "dtype" => {
                if rest != "f32le" {
                    bail!("unsupported dtype `{rest}`");
                }
                dtype_ok = true;
            }
            other => bail!("unknown volume header key `{other}`"),
        }
    }
    let dims = dims.ok_or_else(|| anyhow!("volume header missing dims"))?;
    if !dtype_ok {
        bail!("volume header missing dtype");
    }
    let data = payload_f32le(payload, dims[0] * dims[1] * dims[2])?;
    Volume::new(
        dims,
        spacing.ok_or_else(|| anyhow!("volume header missing spacing"))?,
        origin.ok_or_else(|| anyhow!("volume header missing origin"))?,
        data,
    )
    .map_err(|e| anyhow!("{e}"))
}

pub fn write_image_raw(path: &Path, img: &Image2D) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{IMAGE_MAGIC}")?;
    writeln!(w, "dims {} {}", img.width(), img.height())?;
    writeln!(w, "pixel_spacing {}", write_f64(img.pixel_spacing()))?;
    writeln!(w, "dtype f32le")?;
    writeln!(w, "data")?;
    for value in img.data() {
        w.write_all(&value.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_image_raw(path: &Path) -> Result<Image2D> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .with_context(|| format!("opening {}", path.display()))?
        .read_to_end(&mut bytes)?;
    let (header, payload) = split_header(&bytes)?;

    let mut dims: Option<(usize, usize)> = None;
    let mut pixel_spacing = None;
    for (idx, line) in header.lines().enumerate() {
        let line = line.trim();
        if idx == 0 {
            if line != IMAGE_MAGIC {
                bail!("not an image file (magic `{line}`)");
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "dims" => {
                let parts: Vec<usize> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| anyhow!("bad dimension `{t}`")))
                    .collect::<Result<_>>()?;
                if parts.len() != 2 {
                    bail!("dims needs 2 entries");
                }
                dims = Some((parts[0], parts[1]));
            }
            "pixel_spacing" => {
                pixel_spacing = Some(rest.parse::<f64>().map_err(|_| anyhow!("bad spacing"))?)
            }
            "dtype" => {
                if rest != "f32le" {
                    bail!("unsupported dtype `{rest}`");
                }
            }
            other => bail!("unknown image header key `{other}`"),
        }
    }
    let (width, height) = dims.ok_or_else(|| anyhow!("image header missing dims"))?;
    let data = payload_f32le(payload, width * height)?;
    Image2D::new(width, height, pixel_spacing.ok_or_else(|| anyhow!("missing pixel_spacing"))?, data)
        .map_err(|e| anyhow!("{e}"))
}

/// 16-bit PGM export, min-max normalized for viewing. Lossy by design.
pub fn write_image_pgm16(path: &Path, img: &Image2D) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let lo = img.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = img.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    writeln!(w, "P5")?;
    writeln!(w, "{} {}", img.width(), img.height())?;
    writeln!(w, "65535")?;
    for value in img.data() {
        let q = (((value - lo) / span) as f64 * 65535.0).round() as u16;
        w.write_all(&q.to_be_bytes())?; // PGM samples are big-endian
    }
    Ok(())
}

/// Text 3×4 row-major pose: three lines of `r r r t`.
pub fn write_pose(path: &Path, t: &RigidTransform) -> Result<()> {
    fs::write(path, pose_to_string(t)).with_context(|| format!("writing {}", path.display()))
}

pub fn pose_to_string(t: &RigidTransform) -> String {
    let r = t.rotation();
    let tr = t.translation();
    let mut out = String::new();
    for row in 0..3 {
        out.push_str(&format!(
            "{} {} {} {}\n",
            write_f64(r[(row, 0)]),
            write_f64(r[(row, 1)]),
            write_f64(r[(row, 2)]),
            write_f64(tr[row]),
        ));
    }
    out
}

pub fn read_pose(path: &Path) -> Result<RigidTransform> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    pose_from_string(&text)
}

pub fn pose_from_string(text: &str) -> Result<RigidTransform> {
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let parts: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| anyhow!("bad pose number `{t}`")))
            .collect::<Result<_>>()?;
        if parts.len() != 4 {
            bail!("pose rows need 4 numbers, found {}", parts.len());
        }
        rows.push(parts);
    }
    if rows.len() != 3 {
        bail!("pose needs 3 rows, found {}", rows.len());
    }
    let rotation = Matrix3::new(
        rows[0][0], rows[0][1], rows[0][2], rows[1][0], rows[1][1], rows[1][2], rows[2][0],
        rows[2][1], rows[2][2],
    );
    let translation = Vector3::new(rows[0][3], rows[1][3], rows[2][3]);
    RigidTransform::new(rotation, translation).map_err(|e| anyhow!("{e}"))
}

pub fn write_correspondences(path: &Path, c: &CorrespondenceSet) -> Result<()> {
    fs::write(path, format_correspondences(c))
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_correspondences(path: &Path, contours: &ContourSet) -> Result<CorrespondenceSet> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_correspondences(&text, contours)
        .map_err(|e| anyhow!("{}: {e}", path.display()))
}

pub const RECORDS_HEADER: &str =
    "case_id,view,mtre_init_mm,mrpd_final_mm,status,iterations,wall_time_s";

/// One record as a CSV line; failed cases leave the mRPD field empty.
pub fn record_to_line(r: &CaseRecord) -> String {
    format!(
        "{},{},{},{},{},{},{}",
        r.case_id,
        r.view,
        write_f64(r.mtre_init_mm),
        r.mrpd_final_mm.map(write_f64).unwrap_or_default(),
        r.status.as_str(),
        r.iterations,
        write_f64(r.wall_time_s),
    )
}

pub fn records_to_string(records: &[CaseRecord], footer: &str) -> String {
    let mut out = String::from(RECORDS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&record_to_line(r));
        out.push('\n');
    }
    out.push_str(footer);
    out
}

pub fn write_records(path: &Path, records: &[CaseRecord], footer: &str) -> Result<()> {
    fs::write(path, records_to_string(records, footer))
        .with_context(|| format!("writing {}", path.display()))
}

/// Reads per-case records back, skipping the `#`-prefixed aggregate footer.
pub fn read_records(path: &Path) -> Result<Vec<CaseRecord>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RECORDS_HEADER => {}
        other => bail!("bad records header {other:?}"),
    }
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            bail!("line {}: expected 7 fields, found {}", idx + 2, fields.len());
        }
        let status = match fields[4] {
            "converged" => CaseStatus::Converged,
            "max-iterations" => CaseStatus::MaxIterations,
            "failed" => CaseStatus::Failed,
            other => bail!("line {}: unknown status `{other}`", idx + 2),
        };
        records.push(CaseRecord {
            case_id: fields[0].to_string(),
            view: fields[1].to_string(),
            mtre_init_mm: fields[2].parse().map_err(|_| anyhow!("line {}: bad mTRE", idx + 2))?,
            mrpd_final_mm: if fields[3].is_empty() {
                None
            } else {
                Some(fields[3].parse().map_err(|_| anyhow!("line {}: bad mRPD", idx + 2))?)
            },
            status,
            iterations: fields[5].parse().map_err(|_| anyhow!("line {}: bad iterations", idx + 2))?,
            wall_time_s: fields[6].parse().map_err(|_| anyhow!("line {}: bad wall time", idx + 2))?,
        });
    }
    Ok(records)
}
