//! File formats: plain-text 0/1 grids and PBM images, covariate CSV with
//! an optional node mask, labelled phi/beta vectors, and JSON state
//! documents. All writes go through a temp-file-plus-rename helper so
//! interrupted runs leave no partial outputs.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::configsets::ConfigCatalog;
use crate::error::{Error, Result};
use crate::lattice::{Boundary, LatticeSpec};
use crate::model::{BinaryImage, CovariateField, PartitionState};
use crate::param::{BetaVector, PhiVector};

/// Writes atomically: to a temporary sibling first, then rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = PathBuf::from(dir);
    let name = path
        .file_name()
        .ok_or_else(|| Error::validation(format!("invalid output path {path:?}")))?;
    tmp.push(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads an image from a plain-text grid of 0/1 characters or a PBM file
/// (P1 ascii or P4 binary); the format is detected from the content.
pub fn read_image(path: &Path, boundary: Boundary) -> Result<BinaryImage> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(b"P1") || bytes.starts_with(b"P4") {
        return parse_pbm(&bytes, boundary);
    }
    let text = String::from_utf8(bytes)
        .map_err(|_| Error::parse(format!("{path:?} is neither text nor PBM")))?;
    parse_text_grid(&text, boundary)
}

pub fn parse_text_grid(text: &str, boundary: Boundary) -> Result<BinaryImage> {
    let mut rows: Vec<Vec<u8>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut row = Vec::with_capacity(line.len());
        for ch in line.chars() {
            match ch {
                '0' => row.push(0),
                '1' => row.push(1),
                ' ' | '\t' => {}
                other => {
                    return Err(Error::parse(format!(
                        "unexpected character '{other}' in image row {}",
                        lineno + 1
                    )))
                }
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::parse("image file contains no rows"));
    }
    let m = rows[0].len();
    if rows.iter().any(|r| r.len() != m) {
        return Err(Error::parse("image rows have unequal lengths"));
    }
    let spec = LatticeSpec::new(rows.len(), m, boundary)?;
    BinaryImage::from_data(spec, rows.into_iter().flatten().collect())
}

fn parse_pbm(bytes: &[u8], boundary: Boundary) -> Result<BinaryImage> {
    let binary = bytes.starts_with(b"P4");
    // header tokens: magic, width, height (comments start with '#')
    let mut pos = 0usize;
    let mut tokens: Vec<String> = Vec::new();
    while tokens.len() < 3 && pos < bytes.len() {
        let b = bytes[pos];
        if b == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            pos += 1;
        } else {
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
    }
    if tokens.len() < 3 {
        return Err(Error::parse("truncated PBM header"));
    }
    let width: usize = tokens[1]
        .parse()
        .map_err(|_| Error::parse("bad PBM width"))?;
    let height: usize = tokens[2]
        .parse()
        .map_err(|_| Error::parse("bad PBM height"))?;
    let spec = LatticeSpec::new(height, width, boundary)?;
    let mut data = Vec::with_capacity(width * height);
    if binary {
        pos += 1; // single whitespace after the header
        let row_bytes = width.div_ceil(8);
        if bytes.len() < pos + row_bytes * height {
            return Err(Error::parse("truncated PBM payload"));
        }
        for row in 0..height {
            for col in 0..width {
                let byte = bytes[pos + row * row_bytes + col / 8];
                data.push(byte >> (7 - col % 8) & 1);
            }
        }
    } else {
        for &b in &bytes[pos..] {
            match b {
                b'0' => data.push(0),
                b'1' => data.push(1),
                _ if b.is_ascii_whitespace() => {}
                other => {
                    return Err(Error::parse(format!(
                        "unexpected byte {other:#x} in P1 payload"
                    )))
                }
            }
        }
        if data.len() != width * height {
            return Err(Error::parse(format!(
                "P1 payload has {} bits, expected {}",
                data.len(),
                width * height
            )));
        }
    }
    BinaryImage::from_data(spec, data)
}

pub fn write_image_text(path: &Path, image: &BinaryImage) -> Result<()> {
    let mut out = String::with_capacity(image.spec.sites() + image.spec.n);
    for i in 0..image.spec.n {
        for j in 0..image.spec.m {
            out.push(if image.at(i, j) == 1 { '1' } else { '0' });
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())
}

pub fn write_image_pbm(path: &Path, image: &BinaryImage) -> Result<()> {
    let mut out = format!("P1\n{} {}\n", image.spec.m, image.spec.n).into_bytes();
    for i in 0..image.spec.n {
        for j in 0..image.spec.m {
            out.push(if image.at(i, j) == 1 { b'1' } else { b'0' });
            out.push(if j + 1 == image.spec.m { b'\n' } else { b' ' });
        }
    }
    atomic_write(path, &out)
}

/// Covariate CSV with header `i,j,y1,...,yK` and an optional `mask`
/// column (0 marks unobserved nodes). Every lattice node must appear
/// exactly once.
pub struct CovariateTable {
    pub field: CovariateField,
    pub mask: Option<Vec<bool>>,
}

pub fn read_covariates(path: &Path, spec: &LatticeSpec) -> Result<CovariateTable> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = lines
        .next()
        .ok_or_else(|| Error::parse("covariate file is empty"))?;
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    if columns.len() < 3 || columns[0] != "i" || columns[1] != "j" {
        return Err(Error::parse(
            "covariate header must start with 'i,j' followed by covariate columns",
        ));
    }
    let mask_col = columns.iter().position(|&c| c == "mask");
    let y_cols: Vec<usize> = (2..columns.len())
        .filter(|&c| Some(c) != mask_col)
        .collect();
    let k = y_cols.len();
    if k == 0 && mask_col.is_none() {
        return Err(Error::parse("covariate file has no covariate columns"));
    }
    let mut data = vec![f64::NAN; spec.sites() * k.max(1)];
    let mut mask = vec![false; spec.sites()];
    let mut seen = vec![false; spec.sites()];
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != columns.len() {
            return Err(Error::parse(format!(
                "covariate row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                columns.len()
            )));
        }
        let parse_num = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| {
                Error::parse(format!("bad {what} '{s}' in covariate row {}", lineno + 2))
            })
        };
        let i = parse_num(fields[0], "row index")? as usize;
        let j = parse_num(fields[1], "column index")? as usize;
        if i >= spec.n || j >= spec.m {
            return Err(Error::parse(format!(
                "covariate node ({i},{j}) outside the {}x{} lattice",
                spec.n, spec.m
            )));
        }
        let site = spec.index(i, j);
        if seen[site] {
            return Err(Error::parse(format!("covariate node ({i},{j}) repeated")));
        }
        seen[site] = true;
        mask[site] = match mask_col {
            Some(col) => parse_num(fields[col], "mask value")? != 0.0,
            None => true,
        };
        for (slot, &col) in y_cols.iter().enumerate() {
            data[site * k + slot] = parse_num(fields[col], "covariate value")?;
        }
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::parse("covariate file does not cover every node"));
    }
    let field = CovariateField::new(spec.n, spec.m, k, if k == 0 { vec![] } else { data })?;
    Ok(CovariateTable {
        field,
        mask: if mask_col.is_some() { Some(mask) } else { None },
    })
}

pub fn write_covariates(
    path: &Path,
    field: &CovariateField,
    mask: Option<&[bool]>,
) -> Result<()> {
    let mut out = String::from("i,j");
    for c in 0..field.k {
        out.push_str(&format!(",y{}", c + 1));
    }
    if mask.is_some() {
        out.push_str(",mask");
    }
    out.push('\n');
    for i in 0..field.n {
        for j in 0..field.m {
            let site = i * field.m + j;
            out.push_str(&format!("{i},{j}"));
            for c in 0..field.k {
                out.push_str(&format!(",{}", field.at(site, c)));
            }
            if let Some(mask) = mask {
                out.push_str(if mask[site] { ",1" } else { ",0" });
            }
            out.push('\n');
        }
    }
    atomic_write(path, out.as_bytes())
}

/// Labelled vector file: `class-id value` per line, '#' comments allowed.
fn parse_labelled_vector(text: &str, class_count: usize) -> Result<Vec<f64>> {
    let mut values = vec![f64::NAN; class_count];
    let mut seen = vec![false; class_count];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let id: usize = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(format!("bad class id on line {}", lineno + 1)))?;
        let value: f64 = parts
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::parse(format!("bad value on line {}", lineno + 1)))?;
        if parts.next().is_some() {
            return Err(Error::parse(format!("trailing tokens on line {}", lineno + 1)));
        }
        if id >= class_count {
            return Err(Error::parse(format!(
                "class id {id} out of range (catalog has {class_count} classes)"
            )));
        }
        if seen[id] {
            return Err(Error::parse(format!("class id {id} repeated")));
        }
        seen[id] = true;
        values[id] = value;
    }
    if !seen.iter().all(|&s| s) {
        return Err(Error::parse("vector file does not cover every class"));
    }
    Ok(values)
}

pub fn read_phi(path: &Path, cat: &ConfigCatalog) -> Result<PhiVector> {
    let text = fs::read_to_string(path)?;
    Ok(PhiVector {
        values: parse_labelled_vector(&text, cat.class_count())?,
    })
}

pub fn read_beta(path: &Path, cat: &ConfigCatalog) -> Result<BetaVector> {
    let text = fs::read_to_string(path)?;
    Ok(BetaVector {
        values: parse_labelled_vector(&text, cat.class_count())?,
    })
}

pub fn format_labelled_vector(values: &[f64]) -> String {
    let mut out = String::new();
    for (id, value) in values.iter().enumerate() {
        out.push_str(&format!("{id} {value:.17e}\n"));
    }
    out
}

pub fn write_labelled_vector(path: &Path, values: &[f64]) -> Result<()> {
    atomic_write(path, format_labelled_vector(values).as_bytes())
}

/// JSON document for one partition state snapshot.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateDoc {
    pub iteration: u64,
    pub groups: Vec<Vec<usize>>,
    pub values: Vec<f64>,
    pub theta: Vec<f64>,
}

impl StateDoc {
    pub fn to_state(&self, class_count: usize) -> Result<PartitionState> {
        PartitionState::new(self.groups.clone(), self.values.clone(), class_count)
    }
}

/// Reads a states.jsonl file: one JSON state document per line.
pub fn read_states_jsonl(path: &Path) -> Result<Vec<StateDoc>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let doc: StateDoc = serde_json::from_str(line).map_err(|e| {
            Error::parse(format!("bad state document on line {}: {e}", lineno + 1))
        })?;
        out.push(doc);
    }
    if out.is_empty() {
        return Err(Error::parse("states file contains no documents"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::TemplateClique;
    use tempfile::tempdir;

    #[test]
    fn text_grid_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.txt");
        let spec = LatticeSpec::torus(3, 4).unwrap();
        let image =
            BinaryImage::from_data(spec, vec![0, 1, 0, 1, 1, 1, 0, 0, 0, 0, 1, 1]).unwrap();
        write_image_text(&path, &image).unwrap();
        let back = read_image(&path, Boundary::Torus).unwrap();
        assert_eq!(back, image);
    }

    #[test]
    fn pbm_p1_roundtrip_and_p4() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("img.pbm");
        let spec = LatticeSpec::free(3, 5).unwrap();
        let data: Vec<u8> = (0..15).map(|v| (v % 3 == 0) as u8).collect();
        let image = BinaryImage::from_data(spec, data).unwrap();
        write_image_pbm(&path, &image).unwrap();
        let back = read_image(&path, Boundary::Free).unwrap();
        assert_eq!(back, image);

        // hand-built P4 with 5 columns: row bits padded to one byte
        let mut p4 = b"P4\n5 2\n".to_vec();
        p4.push(0b10110_000);
        p4.push(0b01001_000);
        let parsed = parse_pbm(&p4, Boundary::Free).unwrap();
        assert_eq!(parsed.data(), &[1, 0, 1, 1, 0, 0, 1, 0, 0, 1]);
    }

    #[test]
    fn bad_image_inputs_rejected() {
        assert!(parse_text_grid("01\n0", Boundary::Torus).is_err());
        assert!(parse_text_grid("0x\n01", Boundary::Torus).is_err());
        assert!(parse_text_grid("", Boundary::Torus).is_err());
    }

    #[test]
    fn covariates_roundtrip_with_mask() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cov.csv");
        let spec = LatticeSpec::free(2, 2).unwrap();
        let field = CovariateField::new(2, 2, 2, vec![
            0.1, 1.0, 0.2, 2.0, 0.3, 3.0, 0.4, 4.0,
        ])
        .unwrap();
        let mask = vec![true, true, false, true];
        write_covariates(&path, &field, Some(&mask)).unwrap();
        let table = read_covariates(&path, &spec).unwrap();
        assert_eq!(table.field.k, 2);
        assert_eq!(table.mask, Some(mask));
        for site in 0..4 {
            for c in 0..2 {
                assert_eq!(table.field.at(site, c), field.at(site, c));
            }
        }
    }

    #[test]
    fn covariates_must_cover_lattice() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("cov.csv");
        atomic_write(&path, b"i,j,y1\n0,0,1.0\n0,1,2.0\n").unwrap();
        let spec = LatticeSpec::free(2, 2).unwrap();
        assert!(read_covariates(&path, &spec).is_err());
    }

    #[test]
    fn labelled_vector_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("phi.txt");
        let cat = ConfigCatalog::build(TemplateClique::block(2, 2).unwrap()).unwrap();
        let phi = crate::param::ising_phi(0.4, &cat).unwrap();
        write_labelled_vector(&path, &phi.values).unwrap();
        let back = read_phi(&path, &cat).unwrap();
        assert_eq!(back.values, phi.values);

        atomic_write(&path, b"0 1.0\n0 2.0\n").unwrap();
        assert!(read_phi(&path, &cat).is_err());
        atomic_write(&path, b"0 1.0\n").unwrap();
        assert!(read_phi(&path, &cat).is_err());
    }

    #[test]
    fn states_jsonl_roundtrip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("states.jsonl");
        let docs = vec![
            StateDoc {
                iteration: 0,
                groups: vec![vec![0, 1, 2]],
                values: vec![0.0],
                theta: vec![],
            },
            StateDoc {
                iteration: 5,
                groups: vec![vec![0, 2], vec![1]],
                values: vec![0.3, -0.3],
                theta: vec![0.1],
            },
        ];
        let mut text = String::new();
        for doc in &docs {
            text.push_str(&serde_json::to_string(doc).unwrap());
            text.push('\n');
        }
        atomic_write(&path, text.as_bytes()).unwrap();
        let back = read_states_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].groups, docs[1].groups);
        back[1].to_state(3).unwrap();
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"hello").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "hello");
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| e.as_ref().unwrap().file_name() != "out.txt")
            .collect();
        assert!(leftovers.is_empty());
    }
}
