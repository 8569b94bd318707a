// SPDX-License-Identifier: Apache-2.0

//! PLY `ascii` and `binary_little_endian` vertex data.

use std::fmt::Write as _;

use super::{CloudError, HeaderLines, PointCloud, RawCloud, Rgb, Scalar};

#[derive(Debug, Clone)]
enum Property {
    Scalar {
        name: String,
        ty: Scalar,
    },
    List {
        name: String,
        count_ty: Scalar,
        item_ty: Scalar,
    },
}

impl Property {
    fn name(&self) -> &str {
        match self {
            Property::Scalar { name, .. } | Property::List { name, .. } => name,
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn scalar_named(s: &str) -> Option<Scalar> {
    Some(match s {
        "char" | "int8" => Scalar::I8,
        "uchar" | "uint8" => Scalar::U8,
        "short" | "int16" => Scalar::I16,
        "ushort" | "uint16" => Scalar::U16,
        "int" | "int32" => Scalar::I32,
        "uint" | "uint32" => Scalar::U32,
        "float" | "float32" => Scalar::F32,
        "double" | "float64" => Scalar::F64,
        _ => return None,
    })
}

/// Where x, y, z and the color channels sit inside a vertex record.
struct VertexLayout {
    xyz: [usize; 3],
    rgb: Option<[usize; 3]>,
}

impl VertexLayout {
    fn new(vertex: &Element, offset: usize) -> Result<Self, CloudError> {
        let index = |names: &[&str]| {
            vertex
                .props
                .iter()
                .position(|p| matches!(p, Property::Scalar { .. }) && names.contains(&p.name()))
        };
        let xyz = match (index(&["x"]), index(&["y"]), index(&["z"])) {
            (Some(x), Some(y), Some(z)) => [x, y, z],
            _ => return Err(CloudError::format(offset, "vertex element lacks x, y and z")),
        };
        let rgb = match (
            index(&["red", "diffuse_red", "r"]),
            index(&["green", "diffuse_green", "g"]),
            index(&["blue", "diffuse_blue", "b"]),
        ) {
            (Some(r), Some(g), Some(b)) => Some([r, g, b]),
            _ => None,
        };
        Ok(Self { xyz, rgb })
    }
}

fn channel(ty: Scalar, v: f64) -> u8 {
    match ty {
        Scalar::F32 | Scalar::F64 => (v * 255.0).round().clamp(0.0, 255.0) as u8,
        _ => v.clamp(0.0, 255.0) as u8,
    }
}

pub(super) fn parse(bytes: &[u8]) -> Result<RawCloud, CloudError> {
    let mut lines = HeaderLines::new(bytes);
    match lines.next_line() {
        Some(Ok((_, l))) if l.trim() == "ply" => {}
        _ => return Err(CloudError::format(0, "missing 'ply' magic")),
    }
    let mut binary = None;
    let mut elements: Vec<Element> = Vec::new();
    let mut frame_id = None;
    let mut vertex_offset = 0;
    let mut ended = false;
    while let Some(line) = lines.next_line() {
        let (offset, line) = line?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["end_header"] => {
                ended = true;
                break;
            }
            ["format", fmt, _version] => {
                binary = Some(match *fmt {
                    "ascii" => false,
                    "binary_little_endian" => true,
                    "binary_big_endian" => {
                        return Err(CloudError::Unsupported("PLY binary_big_endian".into()))
                    }
                    other => {
                        return Err(CloudError::format(
                            offset,
                            format!("unknown PLY format '{other}'"),
                        ))
                    }
                });
            }
            ["comment", "frame_id", id, ..] => frame_id = Some(id.to_string()),
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| {
                    CloudError::format(offset, format!("element count '{count}' is not a number"))
                })?;
                if *name == "vertex" {
                    vertex_offset = offset;
                }
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: Vec::new(),
                });
            }
            ["property", "list", count_ty, item_ty, name] => {
                let (Some(count_ty), Some(item_ty)) = (scalar_named(count_ty), scalar_named(item_ty)) else {
                    return Err(CloudError::format(offset, "unknown list property type"));
                };
                let el = elements
                    .last_mut()
                    .ok_or_else(|| CloudError::format(offset, "property before element"))?;
                el.props.push(Property::List {
                    name: name.to_string(),
                    count_ty,
                    item_ty,
                });
            }
            ["property", ty, name] => {
                let ty = scalar_named(ty)
                    .ok_or_else(|| CloudError::format(offset, format!("unknown property type '{ty}'")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| CloudError::format(offset, "property before element"))?;
                el.props.push(Property::Scalar {
                    name: name.to_string(),
                    ty,
                });
            }
            _ => {
                return Err(CloudError::format(
                    offset,
                    format!("unrecognized header line '{line}'"),
                ))
            }
        }
    }
    let body_offset = lines.body_offset();
    if !ended {
        return Err(CloudError::format(body_offset, "missing end_header"));
    }
    let binary = binary.ok_or_else(|| CloudError::format(0, "missing format line"))?;
    let vertex_idx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| CloudError::format(body_offset, "no vertex element"))?;
    let vertex = &elements[vertex_idx];
    let layout = VertexLayout::new(vertex, vertex_offset)?;
    let body = &bytes[body_offset..];
    if binary {
        parse_binary(body, &elements, vertex_idx, &layout, frame_id)
    } else {
        parse_ascii(body, body_offset, &elements, vertex_idx, &layout, frame_id)
    }
}

fn parse_binary(
    body: &[u8],
    elements: &[Element],
    vertex_idx: usize,
    layout: &VertexLayout,
    frame_id: Option<String>,
) -> Result<RawCloud, CloudError> {
    let vertex = &elements[vertex_idx];
    let expected = vertex.count;
    let truncated = |found| CloudError::Truncated { expected, found };
    let mut pos = 0;
    // Skip any elements stored ahead of the vertices.
    for el in &elements[..vertex_idx] {
        for _ in 0..el.count {
            pos = skip_record(body, pos, &el.props).ok_or_else(|| truncated(0))?;
        }
    }
    let mut xyz = Vec::with_capacity(expected);
    let mut rgb: Option<Vec<Rgb>> = layout.rgb.map(|_| Vec::with_capacity(expected));
    let mut values = vec![0.0; vertex.props.len()];
    for found in 0..expected {
        for (k, prop) in vertex.props.iter().enumerate() {
            match prop {
                Property::Scalar { ty, .. } => {
                    let end = pos + ty.size();
                    let raw = body.get(pos..end).ok_or_else(|| truncated(found))?;
                    values[k] = ty.read_le(raw);
                    pos = end;
                }
                Property::List { .. } => {
                    pos =
                        skip_record(body, pos, std::slice::from_ref(prop)).ok_or_else(|| truncated(found))?;
                }
            }
        }
        xyz.push(layout.xyz.map(|i| values[i]));
        if let (Some(idx), Some(out)) = (layout.rgb, rgb.as_mut()) {
            out.push(idx.map(|i| channel(prop_scalar(&vertex.props[i]), values[i])));
        }
    }
    Ok(RawCloud {
        xyz,
        colors: rgb,
        frame_id,
    })
}

fn prop_scalar(p: &Property) -> Scalar {
    match p {
        Property::Scalar { ty, .. } => *ty,
        Property::List { item_ty, .. } => *item_ty,
    }
}

/// Advances past one record; `None` when the body ends early.
fn skip_record(body: &[u8], mut pos: usize, props: &[Property]) -> Option<usize> {
    for p in props {
        match p {
            Property::Scalar { ty, .. } => pos += ty.size(),
            Property::List {
                count_ty, item_ty, ..
            } => {
                let raw = body.get(pos..pos + count_ty.size())?;
                let n = count_ty.read_le(raw) as usize;
                pos += count_ty.size() + n * item_ty.size();
            }
        }
        if pos > body.len() {
            return None;
        }
    }
    Some(pos)
}

fn parse_ascii(
    body: &[u8],
    body_offset: usize,
    elements: &[Element],
    vertex_idx: usize,
    layout: &VertexLayout,
    frame_id: Option<String>,
) -> Result<RawCloud, CloudError> {
    let vertex = &elements[vertex_idx];
    let expected = vertex.count;
    let mut skip: usize = elements[..vertex_idx].iter().map(|e| e.count).sum();
    let mut xyz = Vec::with_capacity(expected);
    let mut rgb: Option<Vec<Rgb>> = layout.rgb.map(|_| Vec::with_capacity(expected));
    let mut values = vec![0.0; vertex.props.len()];
    let mut pos = 0;
    while xyz.len() < expected && pos < body.len() {
        let rest = &body[pos..];
        let end = rest.iter().position(|&b| b == b'\n').unwrap_or(rest.len());
        let line_offset = body_offset + pos;
        pos += end + 1;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| CloudError::format(line_offset, "body line is not UTF-8"))?;
        let mut tokens = line.split_whitespace().peekable();
        if tokens.peek().is_none() {
            continue;
        }
        if skip > 0 {
            skip -= 1;
            continue;
        }
        let mut next = |ty: Scalar| -> Result<f64, CloudError> {
            let tok = tokens
                .next()
                .ok_or_else(|| CloudError::format(line_offset, "too few values on vertex line"))?;
            ty.parse_text(tok)
                .ok_or_else(|| CloudError::format(line_offset, format!("'{tok}' is not a number")))
        };
        for (k, prop) in vertex.props.iter().enumerate() {
            match prop {
                Property::Scalar { ty, .. } => values[k] = next(*ty)?,
                Property::List {
                    count_ty, item_ty, ..
                } => {
                    let n = next(*count_ty)? as usize;
                    for _ in 0..n {
                        next(*item_ty)?;
                    }
                }
            }
        }
        xyz.push(layout.xyz.map(|i| values[i]));
        if let (Some(idx), Some(out)) = (layout.rgb, rgb.as_mut()) {
            out.push(idx.map(|i| channel(prop_scalar(&vertex.props[i]), values[i])));
        }
    }
    if xyz.len() < expected {
        return Err(CloudError::Truncated {
            expected,
            found: xyz.len(),
        });
    }
    Ok(RawCloud {
        xyz,
        colors: rgb,
        frame_id,
    })
}

pub(super) fn write(cloud: &PointCloud, binary: bool) -> Vec<u8> {
    let colors = cloud.colors();
    let mut out = String::new();
    out.push_str("ply\n");
    let _ = writeln!(
        out,
        "format {} 1.0",
        if binary { "binary_little_endian" } else { "ascii" }
    );
    let _ = writeln!(out, "comment frame_id {}", cloud.frame_id());
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if colors.is_some() {
        out.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    out.push_str("end_header\n");
    if binary {
        let mut bytes = out.into_bytes();
        for (i, p) in cloud.points().iter().enumerate() {
            for c in [p.x, p.y, p.z] {
                bytes.extend_from_slice(&(c as f32).to_le_bytes());
            }
            if let Some(colors) = colors {
                bytes.extend_from_slice(&colors[i]);
            }
        }
        bytes
    } else {
        for (i, p) in cloud.points().iter().enumerate() {
            let _ = write!(out, "{} {} {}", p.x as f32, p.y as f32, p.z as f32);
            if let Some(colors) = colors {
                let [r, g, b] = colors[i];
                let _ = write!(out, " {r} {g} {b}");
            }
            out.push('\n');
        }
        out.into_bytes()
    }
}
