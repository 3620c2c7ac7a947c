//! Plain-text mesh format.
//!
//! ```text
//! eikorec-mesh v1
//! V T B
//! x y          (V lines, 17 significant digits)
//! i j k        (T lines, counterclockwise)
//! i j TAG      (B lines, TAG is OUTER or HOLE:<n>)
//! ```
//!
//! Hole interfaces of a full mesh are written as `HOLE:<n>` lines too; on load a
//! `HOLE` edge shared by two triangles marks the mesh as full.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{edge_key, orient, BoundaryEdge, BoundaryTag, DomainKind, HoleSpec, Mesh, MeshError, Point, Rectangle};

const HEADER: &str = "eikorec-mesh v1";

pub fn write_mesh<W: Write>(mesh: &Mesh, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{HEADER}")?;
    writeln!(
        w,
        "{} {} {}",
        mesh.num_vertices(),
        mesh.num_triangles(),
        mesh.boundary_edges().len()
    )?;
    for p in mesh.vertices() {
        writeln!(w, "{:.16e} {:.16e}", p[0], p[1])?;
    }
    for t in mesh.triangles() {
        writeln!(w, "{} {} {}", t[0], t[1], t[2])?;
    }
    for e in mesh.boundary_edges() {
        writeln!(w, "{} {} {}", e.vertices[0], e.vertices[1], e.tag)?;
    }
    Ok(())
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let f = fs::File::create(path)?;
    let mut w = BufWriter::new(f);
    write_mesh(mesh, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    read_mesh(fs::File::open(path)?)
}

fn format_err(line: usize, message: impl Into<String>) -> MeshError {
    MeshError::Format {
        line,
        message: message.into(),
    }
}

pub fn read_mesh<R: Read>(r: R) -> Result<Mesh, MeshError> {
    let mut lines = BufReader::new(r).lines();
    let mut lineno = 0usize;
    let mut next = |what: &str| -> Result<(usize, String), MeshError> {
        lineno += 1;
        match lines.next() {
            Some(Ok(l)) => Ok((lineno, l)),
            Some(Err(e)) => Err(MeshError::Io(e)),
            None => Err(format_err(lineno, format!("unexpected end of file, expected {what}"))),
        }
    };

    let (ln, header) = next("header")?;
    if header.trim() != HEADER {
        return Err(format_err(ln, format!("expected header `{HEADER}`")));
    }
    let (ln, counts) = next("counts line")?;
    let counts: Vec<usize> = counts
        .split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|_| format_err(ln, format!("bad count `{t}`"))))
        .collect::<Result<_, _>>()?;
    let [nv, nt, nb] = counts[..] else {
        return Err(format_err(ln, "counts line must hold `V T B`"));
    };

    let mut vertices: Vec<Point> = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (ln, l) = next("vertex line")?;
        let vals: Vec<f64> = l
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| format_err(ln, format!("bad coordinate `{t}`"))))
            .collect::<Result<_, _>>()?;
        match vals[..] {
            [x, y] if x.is_finite() && y.is_finite() => vertices.push([x, y]),
            _ => return Err(format_err(ln, "vertex line must hold two finite numbers")),
        }
    }
    let mut triangles: Vec<[usize; 3]> = Vec::with_capacity(nt);
    for _ in 0..nt {
        let (ln, l) = next("triangle line")?;
        let idx: Vec<usize> = l
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| format_err(ln, format!("bad index `{t}`"))))
            .collect::<Result<_, _>>()?;
        let [a, b, c] = idx[..] else {
            return Err(format_err(ln, "triangle line must hold three indices"));
        };
        if a >= nv || b >= nv || c >= nv {
            return Err(format_err(ln, "triangle index out of range"));
        }
        if orient(vertices[a], vertices[b], vertices[c]) <= 0.0 {
            return Err(format_err(ln, "triangle is not counterclockwise"));
        }
        triangles.push([a, b, c]);
    }
    let mut boundary: Vec<BoundaryEdge> = Vec::with_capacity(nb);
    for _ in 0..nb {
        let (ln, l) = next("boundary line")?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let [a, b, tag] = toks[..] else {
            return Err(format_err(ln, "boundary line must hold `i j TAG`"));
        };
        let a: usize = a.parse().map_err(|_| format_err(ln, format!("bad index `{a}`")))?;
        let b: usize = b.parse().map_err(|_| format_err(ln, format!("bad index `{b}`")))?;
        if a >= nv || b >= nv {
            return Err(format_err(ln, "boundary index out of range"));
        }
        let tag = if tag == "OUTER" {
            BoundaryTag::Outer
        } else if let Some(n) = tag.strip_prefix("HOLE:") {
            BoundaryTag::Hole(n.parse().map_err(|_| format_err(ln, format!("bad hole tag `{tag}`")))?)
        } else {
            return Err(format_err(ln, format!("unknown tag `{tag}`")));
        };
        boundary.push(BoundaryEdge { vertices: [a, b], tag });
    }

    assemble_loaded(vertices, triangles, boundary).map_err(|e| match e {
        MeshError::Invalid(m) | MeshError::UnresolvedInterface(m) => format_err(lineno, m),
        other => other,
    })
}

fn assemble_loaded(
    vertices: Vec<Point>,
    triangles: Vec<[usize; 3]>,
    boundary: Vec<BoundaryEdge>,
) -> Result<Mesh, MeshError> {
    let (mut xmax, mut ymax) = (0.0f64, 0.0f64);
    for p in &vertices {
        if p[0] < 0.0 || p[1] < 0.0 {
            return Err(MeshError::Invalid("vertices must lie in the positive quadrant".into()));
        }
        xmax = xmax.max(p[0]);
        ymax = ymax.max(p[1]);
    }
    let domain = Rectangle {
        width: xmax,
        height: ymax,
    };

    let mut owners: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            owners.entry(edge_key(tri[k], tri[(k + 1) % 3])).or_default().push(t);
        }
    }
    let n_holes = boundary
        .iter()
        .filter_map(|e| match e.tag {
            BoundaryTag::Hole(i) => Some(i + 1),
            BoundaryTag::Outer => None,
        })
        .max()
        .unwrap_or(0);
    let mut hole_edges: Vec<Vec<[usize; 2]>> = vec![Vec::new(); n_holes];
    let mut interface: HashMap<(usize, usize), usize> = HashMap::new();
    let mut full = false;
    for e in &boundary {
        let key = edge_key(e.vertices[0], e.vertices[1]);
        let n = owners.get(&key).map_or(0, Vec::len);
        if n == 0 {
            return Err(MeshError::Invalid(format!("boundary edge {:?} is not a mesh edge", e.vertices)));
        }
        if let BoundaryTag::Hole(i) = e.tag {
            hole_edges[i].push(e.vertices);
            interface.insert(key, i);
            if n == 2 {
                full = true;
            }
        }
    }
    // polygon centroid of the circle polyline; radius from its farthest vertex
    let holes: Vec<HoleSpec> = hole_edges
        .iter()
        .map(|edges| {
            let (mut a2, mut cx, mut cy) = (0.0, 0.0, 0.0);
            for &[i, j] in edges {
                let (p, q) = (vertices[i], vertices[j]);
                let cross = p[0] * q[1] - q[0] * p[1];
                a2 += cross;
                cx += (p[0] + q[0]) * cross;
                cy += (p[1] + q[1]) * cross;
            }
            let center = if a2 != 0.0 { [cx / (3.0 * a2), cy / (3.0 * a2)] } else { [0.0, 0.0] };
            let radius = edges
                .iter()
                .flatten()
                .map(|&v| (vertices[v][0] - center[0]).hypot(vertices[v][1] - center[1]))
                .fold(0.0, f64::max);
            HoleSpec { center, radius }
        })
        .collect();

    let regions = if full {
        flood_regions(&triangles, &owners, &interface, &boundary)?
    } else {
        vec![None; triangles.len()]
    };
    let kind = if full { DomainKind::Full } else { DomainKind::Holed };
    let mut h_est = 0.0f64;
    for tri in &triangles {
        for k in 0..3 {
            let (a, b) = (vertices[tri[k]], vertices[tri[(k + 1) % 3]]);
            h_est = h_est.max((a[0] - b[0]).hypot(a[1] - b[1]));
        }
    }
    let mesh = Mesh::from_parts(vertices, triangles, boundary, holes, domain, kind, regions, h_est);
    mesh.validate()?;
    Ok(mesh)
}

/// Region labels for a full mesh: tissue is whatever is reachable from an OUTER edge
/// without crossing an interface; each remaining component takes the label of the
/// interface that bounds it.
fn flood_regions(
    triangles: &[[usize; 3]],
    owners: &HashMap<(usize, usize), Vec<usize>>,
    interface: &HashMap<(usize, usize), usize>,
    boundary: &[BoundaryEdge],
) -> Result<Vec<Option<usize>>, MeshError> {
    const UNSET: usize = usize::MAX;
    let n = triangles.len();
    let mut label = vec![UNSET; n];
    let neighbours = |t: usize| {
        let tri = triangles[t];
        (0..3).filter_map(move |k| {
            let key = edge_key(tri[k], tri[(k + 1) % 3]);
            if interface.contains_key(&key) {
                return None;
            }
            owners[&key].iter().copied().find(|&o| o != t)
        })
    };
    let fill = |seed: usize, value: usize, label: &mut Vec<usize>| {
        let mut stack = vec![seed];
        label[seed] = value;
        while let Some(t) = stack.pop() {
            for o in neighbours(t) {
                if label[o] == UNSET {
                    label[o] = value;
                    stack.push(o);
                }
            }
        }
    };
    // 0 marks tissue, i + 1 marks disk i
    for e in boundary.iter().filter(|e| e.tag == BoundaryTag::Outer) {
        let t = owners[&edge_key(e.vertices[0], e.vertices[1])][0];
        if label[t] == UNSET {
            fill(t, 0, &mut label);
        }
    }
    for (&key, &i) in interface {
        for &t in &owners[&key] {
            if label[t] == UNSET {
                fill(t, i + 1, &mut label);
            }
        }
    }
    if label.iter().any(|&l| l == UNSET) {
        return Err(MeshError::UnresolvedInterface("triangles not reachable from any boundary".into()));
    }
    Ok(label.into_iter().map(|l| (l > 0).then(|| l - 1)).collect())
}
