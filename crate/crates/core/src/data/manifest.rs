use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GrayImage, Labels, Sample};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    opacity: u8,
    left: u8,
    right: u8,
    large: u8,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestRecord {
    image: String,
    report: String,
    labels: LabelRecord,
}

fn data_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

/// Binary PGM (P5), maxval 255.
pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", img.size, img.size).into_bytes();
    bytes.extend_from_slice(&img.pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads a square P5 PGM with maxval 255.
pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(data_err(path, "empty image file"));
    }
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(data_err(path, "truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    if fields[0] != "P5" {
        return Err(data_err(path, format!("not a binary PGM (magic {:?})", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| data_err(path, format!("bad PGM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(data_err(path, format!("unsupported maxval {maxval}")));
    }
    if w != h {
        return Err(data_err(path, format!("image is {w}x{h}, expected square")));
    }
    let raster = bytes.get(pos..).unwrap_or(&[]);
    if raster.len() != w * h {
        return Err(data_err(
            path,
            format!("raster has {} bytes, expected {}", raster.len(), w * h),
        ));
    }
    Ok(GrayImage {
        size: w,
        pixels: raster.to_vec(),
    })
}

/// Writes `images/NNNNN.pgm` plus `manifest.jsonl` under `dir`; returns the manifest path.
pub fn save_manifest(samples: &[Sample], dir: &Path) -> Result<PathBuf> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let manifest = dir.join(MANIFEST_FILE);
    let mut out = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let rel = format!("images/{i:05}.pgm");
        write_pgm(&dir.join(&rel), &s.image)?;
        let rec = ManifestRecord {
            image: rel,
            report: s.report.clone(),
            labels: LabelRecord {
                opacity: s.labels.opacity as u8,
                left: s.labels.left as u8,
                right: s.labels.right as u8,
                large: s.labels.large as u8,
            },
        };
        serde_json::to_writer(&mut out, &rec).map_err(|e| Error::Format(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Loads a manifest file, or `DIR/manifest.jsonl` when given a directory.
/// Image paths resolve relative to the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<Sample>> {
    let manifest = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let base = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let f = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut samples = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        let lineno = n + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| data_err(&manifest, format!("line {lineno}: {e}")))?;
        let l = &rec.labels;
        if [l.opacity, l.left, l.right, l.large].iter().any(|&v| v > 1) {
            return Err(data_err(&manifest, format!("line {lineno}: labels must be 0 or 1")));
        }
        let labels = Labels {
            opacity: l.opacity == 1,
            left: l.left == 1,
            right: l.right == 1,
            large: l.large == 1,
        };
        let image = read_pgm(&base.join(&rec.image))?;
        samples.push(Sample {
            image,
            report: rec.report,
            side: labels.side(),
            severity: labels.severity(),
            labels,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_corpus, SynthSpec};

    #[test]
    fn save_then_load_reproduces_corpus() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&SynthSpec::new(12, 4)).unwrap();
        let manifest = save_manifest(&corpus, dir.path()).unwrap();
        assert_eq!(load_manifest(&manifest).unwrap(), corpus);
        assert_eq!(load_manifest(dir.path()).unwrap(), corpus);
    }

    #[test]
    fn missing_report_key_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&SynthSpec::new(3, 4)).unwrap();
        let manifest = save_manifest(&corpus, dir.path()).unwrap();
        let text = fs::read_to_string(&manifest).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[1] = r#"{"image":"images/00001.pgm","labels":{"opacity":0,"left":0,"right":0,"large":0}}"#.into();
        fs::write(&manifest, lines.join("\n")).unwrap();
        let err = load_manifest(&manifest).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("report"), "{err}");
    }

    #[test]
    fn empty_image_file_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = synth_corpus(&SynthSpec::new(2, 4)).unwrap();
        save_manifest(&corpus, dir.path()).unwrap();
        let victim = dir.path().join("images/00001.pgm");
        fs::write(&victim, b"").unwrap();
        let err = load_manifest(dir.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        assert!(err.to_string().contains("00001.pgm"), "{err}");
    }

    #[test]
    fn pgm_header_with_comment_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        let mut bytes = b"P5\n# made by hand\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 64, 128, 255]);
        fs::write(&p, bytes).unwrap();
        assert_eq!(read_pgm(&p).unwrap().pixels, vec![0, 64, 128, 255]);
    }

    #[test]
    fn wrong_raster_length_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.pgm");
        fs::write(&p, b"P5\n2 2\n255\n\x00\x01\x02").unwrap();
        assert!(read_pgm(&p).is_err());
    }
}
