//! Minimal PLY reader/writer for point clouds and surfel maps.
//!
//! Maps are written as `binary_little_endian` with the vertex properties
//! `x y z nx ny nz radius`, all `float`. Reading accepts ASCII and both binary
//! encodings with any scalar property types.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::surfel_map::{surfel_radius_for_voxel, GridIndex, Surfel, SurfelMap};

const MAP_PROPERTIES: [&str; 7] = ["x", "y", "z", "nx", "ny", "nz", "radius"];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Encoding {
    Ascii,
    BinaryLe,
    BinaryBe,
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
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

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn decode(self, b: &[u8], le: bool) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let mut a = [0u8; $n];
                a.copy_from_slice(&b[..$n]);
                if le {
                    <$t>::from_le_bytes(a) as f64
                } else {
                    <$t>::from_be_bytes(a) as f64
                }
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

struct Header {
    encoding: Encoding,
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    comments: Vec<String>,
    data_offset: usize,
}

fn parse_header(path: &Path, bytes: &[u8]) -> Result<Header> {
    let mut offset = 0;
    let mut lines = Vec::new();
    loop {
        let Some(end) = bytes[offset..].iter().position(|&b| b == b'\n') else {
            return Err(Error::parse(path, 0, "header is not terminated by end_header"));
        };
        let line = String::from_utf8_lossy(&bytes[offset..offset + end]).trim().to_string();
        offset += end + 1;
        let done = line == "end_header";
        lines.push(line);
        if done {
            break;
        }
    }
    if lines.first().map(String::as_str) != Some("ply") {
        return Err(Error::parse(path, 0, "missing 'ply' magic"));
    }
    let mut encoding = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    let mut comments = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    for (i, line) in lines.iter().enumerate().skip(1) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["format", fmt, _] => {
                encoding = Some(match *fmt {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::BinaryLe,
                    "binary_big_endian" => Encoding::BinaryBe,
                    other => {
                        return Err(Error::parse(path, 0, format!("unknown format {other} (header line {i})")))
                    }
                })
            }
            ["comment", rest @ ..] => comments.push(rest.join(" ")),
            ["obj_info", ..] => {}
            ["element", name, count] => {
                let count: usize = count
                    .parse()
                    .map_err(|_| Error::parse(path, 0, format!("bad element count on header line {i}")))?;
                if *name == "vertex" {
                    if seen_vertex {
                        return Err(Error::parse(path, 0, "duplicate vertex element"));
                    }
                    vertex_count = Some(count);
                    in_vertex = true;
                    seen_vertex = true;
                } else {
                    if !seen_vertex {
                        return Err(Error::parse(
                            path,
                            0,
                            format!("element {name} precedes the vertex element"),
                        ));
                    }
                    in_vertex = false;
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::parse(path, 0, "list properties on vertices are not supported"));
            }
            ["property", ty, name] => {
                if in_vertex {
                    let scalar = Scalar::parse(ty).ok_or_else(|| {
                        Error::parse(path, 0, format!("unknown property type {ty} (header line {i})"))
                    })?;
                    properties.push((name.to_string(), scalar));
                }
            }
            ["property", ..] => {}
            ["end_header"] => {}
            [] => {}
            _ => return Err(Error::parse(path, 0, format!("malformed header line {i}: {line:?}"))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| Error::parse(path, 0, "missing format line"))?,
        vertex_count: vertex_count.ok_or_else(|| Error::parse(path, 0, "no vertex element"))?,
        properties,
        comments,
        data_offset: offset,
    })
}

/// Vertex records of a PLY file, one `Vec<f64>` per vertex in property order.
pub struct VertexTable {
    pub names: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub comments: Vec<String>,
}

impl VertexTable {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

pub fn read_vertices(path: &Path) -> Result<VertexTable> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header = parse_header(path, &bytes)?;
    let data = &bytes[header.data_offset..];
    let nprop = header.properties.len();
    let mut rows = Vec::with_capacity(header.vertex_count);
    match header.encoding {
        Encoding::Ascii => {
            let text = String::from_utf8_lossy(data);
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for record in 0..header.vertex_count {
                let line = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, record, "unexpected end of data"))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .take(nprop)
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(path, record, format!("bad number: {e}")))?;
                if vals.len() != nprop {
                    return Err(Error::parse(
                        path,
                        record,
                        format!("expected {nprop} values, found {}", vals.len()),
                    ));
                }
                rows.push(vals);
            }
        }
        Encoding::BinaryLe | Encoding::BinaryBe => {
            let le = header.encoding == Encoding::BinaryLe;
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            for record in 0..header.vertex_count {
                let start = record * stride;
                if start + stride > data.len() {
                    return Err(Error::parse(path, record, "unexpected end of data"));
                }
                let mut off = start;
                let mut vals = Vec::with_capacity(nprop);
                for (_, s) in &header.properties {
                    vals.push(s.decode(&data[off..], le));
                    off += s.size();
                }
                rows.push(vals);
            }
        }
    }
    Ok(VertexTable {
        names: header.properties.into_iter().map(|(n, _)| n).collect(),
        rows,
        comments: header.comments,
    })
}

pub fn read_points(path: &Path) -> Result<Vec<Vector3<f64>>> {
    let table = read_vertices(path)?;
    let cols = ["x", "y", "z"].map(|n| table.column(n));
    let [Some(x), Some(y), Some(z)] = cols else {
        return Err(Error::parse(path, 0, "vertex element lacks x/y/z"));
    };
    Ok(table.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect())
}

pub fn write_points(path: &Path, points: &[Vector3<f64>]) -> Result<()> {
    let mut out = format!(
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )
    .into_bytes();
    for p in points {
        for v in p.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_surfels(path: &Path, map: &SurfelMap) -> Result<()> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    header.push_str(&format!("comment voxel_size {}\n", map.voxel_size));
    header.push_str(&format!("element vertex {}\n", map.surfels.len()));
    for p in MAP_PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(map.surfels.len() * 28);
    for s in &map.surfels {
        let vals = [
            s.position.x,
            s.position.y,
            s.position.z,
            s.normal.x,
            s.normal.y,
            s.normal.z,
            s.radius,
        ];
        for v in vals {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

/// Loads a surfel map. Files without a `radius` property get the footprint
/// radius of their median nearest-neighbour spacing.
pub fn read_surfels(path: &Path) -> Result<SurfelMap> {
    let table = read_vertices(path)?;
    let col = |n: &str| table.column(n).ok_or_else(|| Error::parse(path, 0, format!("missing property {n}")));
    let (x, y, z) = (col("x")?, col("y")?, col("z")?);
    let (nx, ny, nz) = (col("nx")?, col("ny")?, col("nz")?);
    let radius_col = table.column("radius");
    let mut surfels = Vec::with_capacity(table.rows.len());
    for (record, r) in table.rows.iter().enumerate() {
        let normal = Vector3::new(r[nx], r[ny], r[nz]);
        let norm = normal.norm();
        if !(norm > 1e-6) {
            return Err(Error::parse(path, record, "zero-length normal"));
        }
        let radius = radius_col.map(|c| r[c]).unwrap_or(f64::NAN);
        if radius_col.is_some() && !(radius > 0.0) {
            return Err(Error::parse(path, record, format!("non-positive radius {radius}")));
        }
        surfels.push(Surfel {
            position: Vector3::new(r[x], r[y], r[z]),
            normal: normal / norm,
            radius,
        });
    }
    let voxel_from_comment = table
        .comments
        .iter()
        .find_map(|c| c.strip_prefix("voxel_size ").and_then(|v| v.trim().parse::<f64>().ok()));
    if radius_col.is_none() {
        let positions: Vec<Vector3<f64>> = surfels.iter().map(|s| s.position).collect();
        let spacing = voxel_from_comment.unwrap_or_else(|| median_spacing(&positions));
        let radius = surfel_radius_for_voxel(spacing);
        for s in &mut surfels {
            s.radius = radius;
        }
    }
    let voxel = voxel_from_comment.unwrap_or_else(|| {
        surfels.first().map(|s| s.radius * std::f64::consts::SQRT_2).unwrap_or(0.0)
    });
    Ok(SurfelMap::new(surfels, voxel))
}

fn median_spacing(points: &[Vector3<f64>]) -> f64 {
    if points.len() < 2 {
        return 1.0;
    }
    let index = GridIndex::new(points, 0.25);
    let mut d: Vec<f64> = points
        .iter()
        .map(|p| {
            let nn = index.knn(p, 2);
            (points[nn[1]] - p).norm()
        })
        .collect();
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    d[d.len() / 2].max(1e-6)
}
