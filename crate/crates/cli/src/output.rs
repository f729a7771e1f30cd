//! File writers shared by the subcommands.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use dkgp_core::numerics::DenseMatrix;
use serde::Serialize;

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// CSV with a `# config_hash=...` line, a header row and `rows`.
pub fn write_csv(path: &Path, hash: &str, header: &[String], rows: &[Vec<String>]) -> anyhow::Result<()> {
    let mut text = format!("# config_hash={hash}\n");
    let line = |cells: &[String]| cells.iter().map(|c| field(c)).collect::<Vec<_>>().join(",");
    writeln!(text, "{}", line(header))?;
    for r in rows {
        writeln!(text, "{}", line(r))?;
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> anyhow::Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in values {
        serde_json::to_writer(&mut out, v)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Binary PGM of a correlation matrix: -1 is black, +1 white.
pub fn pgm_bytes(corr: &DenseMatrix) -> Vec<u8> {
    let (h, w) = (corr.rows(), corr.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        corr.as_slice()
            .iter()
            .map(|&c| (((c.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8),
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let c = DenseMatrix::from_rows(&[vec![1.0, -1.0], vec![0.0, 1.0]]).unwrap();
        let b = pgm_bytes(&c);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[255, 0, 128, 255]);
    }

    #[test]
    fn csv_quoting() {
        assert_eq!(field("a,b"), "\"a,b\"");
        assert_eq!(field("q\"x"), "\"q\"\"x\"");
        assert_eq!(field("plain"), "plain");
    }
}
