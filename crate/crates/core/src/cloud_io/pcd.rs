// SPDX-License-Identifier: Apache-2.0

//! PCD v0.7, `ascii` and `binary` bodies.

use std::fmt::Write as _;

use super::{pack_rgb, unpack_rgb, CloudError, HeaderLines, PointCloud, RawCloud, Rgb, Scalar};

const FRAME_COMMENT: &str = "# frame_id ";

#[derive(Debug, Clone)]
struct Field {
    name: String,
    scalar: Scalar,
    /// 'F', 'I' or 'U'.
    kind: u8,
    byte_offset: usize,
    column: usize,
}

#[derive(Debug, PartialEq, Eq)]
enum DataKind {
    Ascii,
    Binary,
}

fn scalar_for(kind: u8, size: usize) -> Option<Scalar> {
    Some(match (kind, size) {
        (b'F', 4) => Scalar::F32,
        (b'F', 8) => Scalar::F64,
        (b'I', 1) => Scalar::I8,
        (b'I', 2) => Scalar::I16,
        (b'I', 4) => Scalar::I32,
        (b'I', 8) => Scalar::I64,
        (b'U', 1) => Scalar::U8,
        (b'U', 2) => Scalar::U16,
        (b'U', 4) => Scalar::U32,
        (b'U', 8) => Scalar::U64,
        _ => return None,
    })
}

pub(super) fn parse(bytes: &[u8]) -> Result<RawCloud, CloudError> {
    let mut lines = HeaderLines::new(bytes);
    let mut names: Option<(usize, Vec<String>)> = None;
    let mut sizes: Option<(usize, Vec<usize>)> = None;
    let mut types: Option<(usize, Vec<u8>)> = None;
    let mut counts: Option<(usize, Vec<usize>)> = None;
    let mut width: Option<usize> = None;
    let mut height: usize = 1;
    let mut points: Option<usize> = None;
    let mut frame_id = None;
    let mut data: Option<(usize, DataKind)> = None;

    while let Some(line) = lines.next_line() {
        let (offset, line) = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(id) = line.strip_prefix(FRAME_COMMENT) {
            frame_id = Some(id.trim().to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let key = tokens.next().unwrap_or_default();
        let values: Vec<&str> = tokens.collect();
        let parse_usizes = |vals: &[&str]| -> Result<Vec<usize>, CloudError> {
            vals.iter()
                .map(|v| {
                    v.parse::<usize>()
                        .map_err(|_| CloudError::format(offset, format!("{key}: '{v}' is not a count")))
                })
                .collect()
        };
        let single = |vals: &[&str]| -> Result<usize, CloudError> {
            match parse_usizes(vals)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(CloudError::format(offset, format!("{key} takes one value"))),
            }
        };
        match key {
            "VERSION" => {
                let v = values.first().copied().unwrap_or_default();
                if v != "0.7" && v != ".7" {
                    return Err(CloudError::Unsupported(format!("PCD version '{v}'")));
                }
            }
            "FIELDS" => names = Some((offset, values.iter().map(|s| s.to_string()).collect())),
            "SIZE" => sizes = Some((offset, parse_usizes(&values)?)),
            "TYPE" => {
                let kinds = values
                    .iter()
                    .map(|v| match v.as_bytes() {
                        [k @ (b'F' | b'I' | b'U')] => Ok(*k),
                        _ => Err(CloudError::format(offset, format!("unknown TYPE '{v}'"))),
                    })
                    .collect::<Result<_, _>>()?;
                types = Some((offset, kinds));
            }
            "COUNT" => counts = Some((offset, parse_usizes(&values)?)),
            "WIDTH" => width = Some(single(&values)?),
            "HEIGHT" => height = single(&values)?,
            "VIEWPOINT" => {}
            "POINTS" => points = Some(single(&values)?),
            "DATA" => {
                let kind = match values.first().copied() {
                    Some("ascii") => DataKind::Ascii,
                    Some("binary") => DataKind::Binary,
                    Some("binary_compressed") => {
                        return Err(CloudError::Unsupported(
                            "compressed PCD (binary_compressed)".into(),
                        ))
                    }
                    other => {
                        return Err(CloudError::format(
                            offset,
                            format!("unknown DATA encoding '{}'", other.unwrap_or("")),
                        ))
                    }
                };
                data = Some((offset, kind));
                break;
            }
            other => {
                return Err(CloudError::format(
                    offset,
                    format!("unknown header key '{other}'"),
                ))
            }
        }
    }

    let body_offset = lines.body_offset();
    let Some((_, data)) = data else {
        return Err(CloudError::format(body_offset, "missing DATA line"));
    };
    let Some((fields_offset, names)) = names else {
        return Err(CloudError::format(0, "missing FIELDS line"));
    };
    let (sizes_offset, sizes) =
        sizes.ok_or_else(|| CloudError::format(fields_offset, "missing SIZE line"))?;
    let (types_offset, types) =
        types.ok_or_else(|| CloudError::format(fields_offset, "missing TYPE line"))?;
    let (counts_offset, counts) = counts.unwrap_or((fields_offset, vec![1; names.len()]));
    for (len, off, what) in [
        (sizes.len(), sizes_offset, "SIZE"),
        (types.len(), types_offset, "TYPE"),
        (counts.len(), counts_offset, "COUNT"),
    ] {
        if len != names.len() {
            return Err(CloudError::format(
                off,
                format!("{what} has {len} entries for {} fields", names.len()),
            ));
        }
    }

    let mut fields = Vec::with_capacity(names.len());
    let (mut byte_offset, mut column) = (0, 0);
    for (i, name) in names.iter().enumerate() {
        let scalar = scalar_for(types[i], sizes[i]).ok_or_else(|| {
            CloudError::format(
                types_offset,
                format!("TYPE {} with SIZE {} is not valid", types[i] as char, sizes[i]),
            )
        })?;
        if counts[i] == 0 {
            return Err(CloudError::format(counts_offset, "COUNT must be positive"));
        }
        fields.push(Field {
            name: name.clone(),
            scalar,
            kind: types[i],
            byte_offset,
            column,
        });
        byte_offset += sizes[i] * counts[i];
        column += counts[i];
    }
    let stride = byte_offset;
    let n_columns = column;

    let find = |n: &str| fields.iter().find(|f| f.name == n).cloned();
    let xyz = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => [x, y, z],
        _ => return Err(CloudError::format(fields_offset, "FIELDS lacks x, y and z")),
    };
    let color = find("rgb").or_else(|| find("rgba"));

    let expected = match (points, width) {
        (Some(p), _) => p,
        (None, Some(w)) => w * height,
        (None, None) => return Err(CloudError::format(fields_offset, "missing POINTS and WIDTH")),
    };

    let body = &bytes[body_offset..];
    let mut out_xyz = Vec::with_capacity(expected);
    let mut out_rgb: Option<Vec<Rgb>> = color.as_ref().map(|_| Vec::with_capacity(expected));

    match data {
        DataKind::Binary => {
            let available = body.len().checked_div(stride).unwrap_or(0);
            if available < expected {
                return Err(CloudError::Truncated {
                    expected,
                    found: available,
                });
            }
            for rec in body.chunks_exact(stride).take(expected) {
                let read = |f: &Field| f.scalar.read_le(&rec[f.byte_offset..]);
                out_xyz.push([read(&xyz[0]), read(&xyz[1]), read(&xyz[2])]);
                if let (Some(c), Some(out)) = (&color, out_rgb.as_mut()) {
                    out.push(unpack_rgb(c.scalar.read_bits_le(&rec[c.byte_offset..])));
                }
            }
        }
        DataKind::Ascii => {
            let mut found = 0;
            let mut pos = 0;
            while found < expected && pos < body.len() {
                let rest = &body[pos..];
                let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
                let line_offset = body_offset + pos;
                pos += end + 1;
                let line = std::str::from_utf8(&rest[..end])
                    .map_err(|_| CloudError::format(line_offset, "body line is not UTF-8"))?;
                let tokens: Vec<&str> = line.split_whitespace().collect();
                if tokens.is_empty() {
                    continue;
                }
                if tokens.len() < n_columns {
                    return Err(CloudError::format(
                        line_offset,
                        format!("expected {n_columns} values, found {}", tokens.len()),
                    ));
                }
                let num = |f: &Field| -> Result<f64, CloudError> {
                    f.scalar.parse_text(tokens[f.column]).ok_or_else(|| {
                        CloudError::format(line_offset, format!("'{}' is not a number", tokens[f.column]))
                    })
                };
                out_xyz.push([num(&xyz[0])?, num(&xyz[1])?, num(&xyz[2])?]);
                if let (Some(c), Some(out)) = (&color, out_rgb.as_mut()) {
                    let tok = tokens[c.column];
                    let packed = if c.kind == b'F' {
                        let v: f32 = tok.parse().map_err(|_| {
                            CloudError::format(line_offset, format!("'{tok}' is not a color"))
                        })?;
                        u64::from(v.to_bits())
                    } else {
                        tok.parse::<u64>()
                            .map_err(|_| CloudError::format(line_offset, format!("'{tok}' is not a color")))?
                    };
                    out.push(unpack_rgb(packed));
                }
                found += 1;
            }
            if found < expected {
                return Err(CloudError::Truncated { expected, found });
            }
        }
    }

    Ok(RawCloud {
        xyz: out_xyz,
        colors: out_rgb,
        frame_id,
    })
}

pub(super) fn write(cloud: &PointCloud, binary: bool) -> Vec<u8> {
    let n = cloud.len();
    let colors = cloud.colors();
    let (fields, size, ty, count) = if colors.is_some() {
        ("x y z rgb", "4 4 4 4", "F F F U", "1 1 1 1")
    } else {
        ("x y z", "4 4 4", "F F F", "1 1 1")
    };
    let mut out = String::new();
    out.push_str("# .PCD v0.7 - Point Cloud Data file format\n");
    let _ = writeln!(out, "{FRAME_COMMENT}{}", cloud.frame_id());
    let _ = writeln!(out, "VERSION 0.7");
    let _ = writeln!(out, "FIELDS {fields}");
    let _ = writeln!(out, "SIZE {size}");
    let _ = writeln!(out, "TYPE {ty}");
    let _ = writeln!(out, "COUNT {count}");
    let _ = writeln!(out, "WIDTH {n}");
    let _ = writeln!(out, "HEIGHT 1");
    let _ = writeln!(out, "VIEWPOINT 0 0 0 1 0 0 0");
    let _ = writeln!(out, "POINTS {n}");
    let _ = writeln!(out, "DATA {}", if binary { "binary" } else { "ascii" });

    if binary {
        let stride = if colors.is_some() { 16 } else { 12 };
        let mut bytes = out.into_bytes();
        bytes.reserve(n * stride);
        for (i, p) in cloud.points().iter().enumerate() {
            for c in [p.x, p.y, p.z] {
                bytes.extend_from_slice(&(c as f32).to_le_bytes());
            }
            if let Some(colors) = colors {
                bytes.extend_from_slice(&pack_rgb(colors[i]).to_le_bytes());
            }
        }
        bytes
    } else {
        for (i, p) in cloud.points().iter().enumerate() {
            let _ = write!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
            if let Some(colors) = colors {
                let _ = write!(out, " {}", pack_rgb(colors[i]));
            }
            out.push('\n');
        }
        out.into_bytes()
    }
}
