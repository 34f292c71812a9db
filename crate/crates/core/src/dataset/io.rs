use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use super::{DatasetManifest, ManifestRecord, TactileSweep, TextureImage, CHANNELS};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
const SWEEP_HEADER: &str = "t,ax,ay,az,px,py,pz";

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

/// Sweep as CSV text. Floats use the shortest representation that parses back
/// to the same value.
pub fn write_sweep_csv(sweep: &TactileSweep) -> String {
    let mut out = String::with_capacity(sweep.len() * 120);
    out.push_str(SWEEP_HEADER);
    out.push('\n');
    for (t, row) in sweep.times.iter().zip(&sweep.samples) {
        write!(out, "{t}").unwrap();
        for v in row {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_sweep_csv(text: &str, source: &str) -> Result<TactileSweep> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == SWEEP_HEADER => {}
        _ => return Err(Error::parse(source, "line 1", format!("expected header `{SWEEP_HEADER}`"))),
    }
    let mut sweep = TactileSweep {
        times: Vec::new(),
        samples: Vec::new(),
    };
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let at = format!("line {}", i + 1);
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != CHANNELS + 1 {
            return Err(Error::parse(
                source,
                at,
                format!("expected {CHANNELS} data columns after t, found {}", fields.len().saturating_sub(1)),
            ));
        }
        let mut values = [0.0; CHANNELS + 1];
        for (k, (v, f)) in values.iter_mut().zip(&fields).enumerate() {
            *v = f
                .trim()
                .parse()
                .map_err(|_| Error::parse(source, format!("{at}, column {}", k + 1), format!("bad number `{f}`")))?;
        }
        sweep.times.push(values[0]);
        sweep.samples.push(values[1..].try_into().expect("6 values"));
    }
    Ok(sweep)
}

pub fn save_sweep_csv(sweep: &TactileSweep, path: &Path) -> Result<()> {
    create_parent(path)?;
    fs::write(path, write_sweep_csv(sweep)).map_err(|e| Error::io(path, e))
}

pub fn load_sweep_csv(path: &Path) -> Result<TactileSweep> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_sweep_csv(&text, &path.display().to_string())
}

/// Binary PPM (P6). A known pixel pitch is kept in a `# pitch <rows> <cols>` comment.
pub fn write_ppm(img: &TextureImage) -> Vec<u8> {
    let mut header = String::from("P6\n");
    if let Some([a, b]) = img.pixel_pitch {
        header.push_str(&format!("# pitch {a} {b}\n"));
    }
    header.push_str(&format!("{} {}\n255\n", img.width, img.height));
    let mut out = header.into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

pub fn parse_ppm(bytes: &[u8], source: &str) -> Result<TextureImage> {
    let mut pos = 0usize;
    let mut pitch = None;
    let mut tokens: Vec<(usize, &str)> = Vec::with_capacity(4);
    while tokens.len() < 4 {
        match bytes.get(pos) {
            None => return Err(Error::parse(source, format!("byte {pos}"), "truncated PPM header")),
            Some(b'#') => {
                let end = bytes[pos..].iter().position(|&b| b == b'\n').map_or(bytes.len(), |e| pos + e);
                let comment = String::from_utf8_lossy(&bytes[pos + 1..end]);
                let parts: Vec<&str> = comment.split_whitespace().collect();
                if let ["pitch", a, b] = parts[..] {
                    match (a.parse(), b.parse()) {
                        (Ok(a), Ok(b)) => pitch = Some([a, b]),
                        _ => return Err(Error::parse(source, format!("byte {pos}"), "bad pitch comment")),
                    }
                }
                pos = end;
            }
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            Some(_) => {
                let start = pos;
                while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
                    pos += 1;
                }
                let tok = std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| Error::parse(source, format!("byte {start}"), "non-ASCII header token"))?;
                tokens.push((start, tok));
            }
        }
    }
    if tokens[0].1 != "P6" {
        return Err(Error::parse(source, "byte 0", "expected P6 magic"));
    }
    let num = |(at, tok): (usize, &str), what: &str| -> Result<usize> {
        tok.parse()
            .map_err(|_| Error::parse(source, format!("byte {at}"), format!("bad {what} `{tok}`")))
    };
    let width = num(tokens[1], "width")?;
    let height = num(tokens[2], "height")?;
    if num(tokens[3], "maxval")? != 255 {
        return Err(Error::parse(source, format!("byte {}", tokens[3].0), "only maxval 255 is supported"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * 3;
    let data = bytes.get(pos..pos + need).ok_or_else(|| {
        Error::parse(
            source,
            format!("byte {pos}"),
            format!("expected {need} raster bytes, found {}", bytes.len().saturating_sub(pos)),
        )
    })?;
    let mut img = TextureImage::new(height, width, data.to_vec())
        .map_err(|e| Error::parse(source, "header", e.to_string()))?;
    img.pixel_pitch = pitch;
    Ok(img)
}

pub fn save_image(img: &TextureImage, path: &Path) -> Result<()> {
    create_parent(path)?;
    fs::write(path, write_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn load_image(path: &Path) -> Result<TextureImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_ppm(&bytes, &path.display().to_string())
}

/// Writes `<dir>/manifest.jsonl`, one record per line.
pub fn save_manifest(manifest: &DatasetManifest, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut text = String::new();
    for r in &manifest.records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads `<dir>/manifest.jsonl` and checks every referenced file exists.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let source = path.display().to_string();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| Error::parse(&source, format!("line {}, column {}", i + 1, e.column()), e.to_string()))?;
        for f in r.images.iter().chain(&r.sweeps) {
            let p = dir.join(f);
            if !p.is_file() {
                return Err(Error::io(
                    p,
                    io::Error::new(io::ErrorKind::NotFound, format!("referenced by item {}", r.item_id)),
                ));
            }
        }
        records.push(r);
    }
    let m = DatasetManifest { records };
    m.validate()?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_roundtrip_exact() {
        let s = TactileSweep {
            times: vec![0.0, 0.1, 0.2],
            samples: vec![
                [1.0 / 3.0, -0.0, 1e-310, 6.02e23, -1.5, 2.0],
                [0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                [f64::MAX, f64::MIN_POSITIVE, 7.0, 8.0, 9.0, 10.0],
            ],
        };
        let back = parse_sweep_csv(&write_sweep_csv(&s), "mem").unwrap();
        assert_eq!(back, s);
        assert!(write_sweep_csv(&s).starts_with("t,ax,ay,az,px,py,pz\n"));
    }

    #[test]
    fn five_channel_csv_is_rejected() {
        let text = "t,ax,ay,az,px,py,pz\n0,1,2,3,4,5,6\n0.1,1,2,3,4,5\n";
        match parse_sweep_csv(text, "s.csv") {
            Err(Error::Parse { position, message, .. }) => {
                assert_eq!(position, "line 3");
                assert!(message.contains("expected 6 data columns"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_sweep_csv("a,b\n", "x").is_err());
        assert!(parse_sweep_csv("t,ax,ay,az,px,py,pz\n0,1,2,x,4,5,6\n", "x").is_err());
    }

    #[test]
    fn ppm_roundtrip_with_and_without_pitch() {
        let mut img = TextureImage::new(2, 3, (0..18).map(|v| (v * 14) as u8).collect()).unwrap();
        assert_eq!(parse_ppm(&write_ppm(&img), "m").unwrap(), img);
        img.pixel_pitch = Some([32.44, 35.97]);
        assert_eq!(parse_ppm(&write_ppm(&img), "m").unwrap(), img);
        // raster that begins with whitespace and '#' bytes
        img.pixels[0] = b'\n';
        img.pixels[1] = b'#';
        assert_eq!(parse_ppm(&write_ppm(&img), "m").unwrap(), img);
        let bytes = write_ppm(&img);
        assert!(matches!(parse_ppm(&bytes[..bytes.len() - 1], "m"), Err(Error::Parse { .. })));
        assert!(parse_ppm(b"P3\n1 1\n255\n", "m").is_err());
    }

    #[test]
    fn manifest_missing_file_names_path() {
        let dir = tempfile::tempdir().unwrap();
        let m = DatasetManifest {
            records: vec![ManifestRecord {
                item_id: "a".into(),
                class_id: 0,
                class_name: "H-320".into(),
                specimen_id: "a".into(),
                images: vec!["images/nope.ppm".into()],
                sweeps: vec![],
                seed: 1,
            }],
        };
        save_manifest(&m, dir.path()).unwrap();
        match load_manifest(dir.path()) {
            Err(Error::Io { path, .. }) => assert!(path.ends_with("images/nope.ppm")),
            other => panic!("{other:?}"),
        }
        fs::create_dir_all(dir.path().join("images")).unwrap();
        fs::write(dir.path().join("images/nope.ppm"), b"").unwrap();
        assert_eq!(load_manifest(dir.path()).unwrap(), m);
    }
}
