use std::f64::consts::PI;

use spade::{AngleLimit, ConstrainedDelaunayTriangulation, Point2, RefinementParameters, Triangulation};

use super::{extract_submesh, orient, tag_boundary, DomainKind, HoleSpec, Mesh, MeshError, Point, Rectangle};

const MIN_ANGLE_DEG: f64 = 20.0;
// requested from the refiner; the margin absorbs round-off in the final check
const REFINE_ANGLE_DEG: f64 = 21.0;

/// Checks the placement rules for disks in `domain`: each center at least 1.5 radii
/// from the outer boundary, and every pair separated by at least the smallest radius.
pub fn validate_holes(domain: Rectangle, holes: &[HoleSpec]) -> Result<(), MeshError> {
    for (i, h) in holes.iter().enumerate() {
        if !(h.radius > 0.0) || !h.center.iter().all(|c| c.is_finite()) {
            return Err(MeshError::Geometry(format!("hole {i} has invalid center or radius")));
        }
        let clearance = h.radius * 1.5;
        let [x, y] = h.center;
        if x < clearance || y < clearance || x > domain.width - clearance || y > domain.height - clearance {
            return Err(MeshError::Geometry(format!(
                "hole {i} at ({x}, {y}) with radius {} is closer than radius/2 to the outer boundary",
                h.radius
            )));
        }
    }
    let min_r = holes.iter().map(|h| h.radius).fold(f64::INFINITY, f64::min);
    for i in 0..holes.len() {
        for j in i + 1..holes.len() {
            let (a, b) = (holes[i], holes[j]);
            let gap = (a.center[0] - b.center[0]).hypot(a.center[1] - b.center[1]) - a.radius - b.radius;
            if gap < min_r {
                return Err(MeshError::Geometry(format!(
                    "holes {i} and {j} are {gap:.4} apart, less than the smallest radius {min_r}"
                )));
            }
        }
    }
    Ok(())
}

/// Builds a conforming Delaunay-refined triangulation of `domain` with the given disks.
///
/// The rectangle sides and the circles are sampled at spacing at most `target_h`
/// (circles as inscribed polygons), triangulated as a constrained Delaunay
/// triangulation, and refined until every angle is at least 20° and every triangle
/// is no larger than an equilateral triangle of side `target_h`.
pub fn generate_mesh(
    domain: Rectangle,
    holes: &[HoleSpec],
    target_h: f64,
    kind: DomainKind,
) -> Result<Mesh, MeshError> {
    if !(domain.width > 0.0 && domain.height > 0.0) {
        return Err(MeshError::Geometry("rectangle must have positive extent".into()));
    }
    if !(target_h > 0.0 && target_h <= domain.width.min(domain.height)) {
        return Err(MeshError::Geometry(format!(
            "target_h = {target_h} must be positive and no larger than the shorter side"
        )));
    }
    validate_holes(domain, holes)?;

    let mut points: Vec<Point> = Vec::new();
    let mut edges: Vec<[usize; 2]> = Vec::new();

    let corners = domain.corners();
    for k in 0..4 {
        let (a, b) = (corners[k], corners[(k + 1) % 4]);
        let len = (b[0] - a[0]).hypot(b[1] - a[1]);
        let m = (len / target_h).ceil().max(1.0) as usize;
        for s in 0..m {
            let t = s as f64 / m as f64;
            points.push([a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1])]);
        }
    }
    let n_outer = points.len();
    for k in 0..n_outer {
        edges.push([k, (k + 1) % n_outer]);
    }
    for h in holes {
        let m = ((2.0 * PI * h.radius / target_h).ceil() as usize).max(8);
        let start = points.len();
        for s in 0..m {
            let theta = 2.0 * PI * s as f64 / m as f64;
            points.push([
                h.center[0] + h.radius * theta.cos(),
                h.center[1] + h.radius * theta.sin(),
            ]);
        }
        for s in 0..m {
            edges.push([start + s, start + (s + 1) % m]);
        }
    }

    let input: Vec<Point2<f64>> = points.iter().map(|p| Point2::new(p[0], p[1])).collect();
    let mut cdt: ConstrainedDelaunayTriangulation<Point2<f64>> =
        ConstrainedDelaunayTriangulation::bulk_load_cdt(input, edges)
            .map_err(|e| MeshError::Refinement(format!("constrained triangulation failed: {e:?}")))?;

    let max_area = 3f64.sqrt() / 4.0 * target_h * target_h;
    let budget = (20.0 * domain.area() / max_area) as usize + 100 * points.len() + 1000;
    let result = cdt.refine(
        RefinementParameters::<f64>::new()
            .with_angle_limit(AngleLimit::from_deg(REFINE_ANGLE_DEG))
            .with_max_allowed_area(max_area)
            .with_max_additional_vertices(budget),
    );
    if !result.refinement_complete {
        return Err(MeshError::Refinement(format!(
            "ran out of the {budget} additional vertices allowed"
        )));
    }

    let all_vertices: Vec<Point> = cdt.vertices().map(|v| [v.position().x, v.position().y]).collect();
    let mut all_triangles: Vec<[usize; 3]> = Vec::with_capacity(cdt.num_inner_faces());
    for face in cdt.inner_faces() {
        let vs = face.vertices().map(|v| v.fix().index());
        let tri = if orient(all_vertices[vs[0]], all_vertices[vs[1]], all_vertices[vs[2]]) > 0.0 {
            vs
        } else {
            [vs[0], vs[2], vs[1]]
        };
        all_triangles.push(tri);
    }

    // circle polylines after refinement, per hole
    let mut hole_segments: Vec<Vec<[Point; 2]>> = vec![Vec::new(); holes.len()];
    for edge in cdt.undirected_edges() {
        if !cdt.is_constraint_edge(edge.fix()) {
            continue;
        }
        let [a, b] = edge.positions();
        let (p, q) = ([a.x, a.y], [b.x, b.y]);
        let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0];
        if domain.on_boundary(mid, 1e-12) {
            continue;
        }
        let i = super::nearest_hole(mid, holes);
        hole_segments[i].push([p, q]);
    }

    let regions: Vec<Option<usize>> = all_triangles
        .iter()
        .map(|tri| {
            let c = [
                (all_vertices[tri[0]][0] + all_vertices[tri[1]][0] + all_vertices[tri[2]][0]) / 3.0,
                (all_vertices[tri[0]][1] + all_vertices[tri[1]][1] + all_vertices[tri[2]][1]) / 3.0,
            ];
            holes.iter().enumerate().find_map(|(i, h)| {
                let d = (c[0] - h.center[0]).hypot(c[1] - h.center[1]);
                if d > h.radius + target_h {
                    return None;
                }
                point_in_polyline(c, &hole_segments[i]).then_some(i)
            })
        })
        .collect();

    // tissue vertices first so the holed submesh keeps their indices
    let mut in_tissue = vec![false; all_vertices.len()];
    for (tri, r) in all_triangles.iter().zip(&regions) {
        if r.is_none() {
            for &v in tri {
                in_tissue[v] = true;
            }
        }
    }
    let mut order: Vec<usize> = (0..all_vertices.len()).filter(|&v| in_tissue[v]).collect();
    order.extend((0..all_vertices.len()).filter(|&v| !in_tissue[v]));
    let mut new_index = vec![0usize; all_vertices.len()];
    for (n, &old) in order.iter().enumerate() {
        new_index[old] = n;
    }
    let vertices: Vec<Point> = order.iter().map(|&v| all_vertices[v]).collect();
    let triangles: Vec<[usize; 3]> = all_triangles.iter().map(|t| t.map(|v| new_index[v])).collect();

    let boundary = tag_boundary(&vertices, &triangles, &regions, holes, domain);
    let full = Mesh::from_parts(
        vertices,
        triangles,
        boundary,
        holes.to_vec(),
        domain,
        DomainKind::Full,
        regions,
        target_h,
    );
    let min_angle = full.min_angle_deg();
    if min_angle < MIN_ANGLE_DEG {
        return Err(MeshError::Refinement(format!(
            "minimum angle {min_angle:.2}° below {MIN_ANGLE_DEG}°"
        )));
    }
    full.validate()?;
    match kind {
        DomainKind::Full => Ok(full),
        DomainKind::Holed => {
            let (sub, _) = extract_submesh(&full)?;
            sub.validate()?;
            Ok(sub)
        }
    }
}

/// Even-odd crossing test against a closed set of segments.
fn point_in_polyline(p: Point, segments: &[[Point; 2]]) -> bool {
    let mut inside = false;
    for [a, b] in segments {
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if x > p[0] {
                inside = !inside;
            }
        }
    }
    inside
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{extract_submesh, BoundaryTag};
    use std::f64::consts::PI;

    fn reference_holes() -> Vec<HoleSpec> {
        vec![
            HoleSpec::new([0.5, 0.8], 0.1),
            HoleSpec::new([0.2, 0.2], 0.1),
            HoleSpec::new([0.8, 0.4], 0.1),
        ]
    }

    #[test]
    fn square_without_holes_has_unit_area() {
        let m = generate_mesh(Rectangle::unit(), &[], 0.5, DomainKind::Holed).unwrap();
        assert!((m.total_area() - 1.0).abs() < 1e-14);
        assert!(m.min_angle_deg() >= 20.0);
        assert!(m.hole_vertices(0).is_empty());
    }

    #[test]
    fn single_hole_area_within_polygon_bound() {
        // inscribed polygon with n sides: area deficit r²(π - n/2 sin(2π/n)) ≤ 4e-4 here
        let m = generate_mesh(Rectangle::unit(), &[HoleSpec::new([0.5, 0.5], 0.1)], 0.02, DomainKind::Holed).unwrap();
        let exact = 1.0 - PI * 0.01;
        assert!((m.total_area() - exact).abs() <= 4e-4, "area {}", m.total_area());
        let n = (2.0 * PI * 0.1 / 0.02f64).ceil();
        let polygon = 0.5 * n * 0.01 * (2.0 * PI / n).sin();
        assert!((m.total_area() - (1.0 - polygon)).abs() < 1e-12);
    }

    #[test]
    fn euler_characteristic_of_holed_meshes() {
        for k in 0..=3 {
            let holes = &reference_holes()[..k];
            let m = generate_mesh(Rectangle::unit(), holes, 0.05, DomainKind::Holed).unwrap();
            let chi = m.num_vertices() as i64 - m.num_edges() as i64 + m.num_triangles() as i64;
            assert_eq!(chi, 1 - k as i64);
        }
    }

    #[test]
    fn mesh_quality_and_tags() {
        let h = 0.03;
        let m = generate_mesh(Rectangle::unit(), &reference_holes(), h, DomainKind::Holed).unwrap();
        m.validate().unwrap();
        assert!(m.min_angle_deg() >= 20.0);
        assert!(m.max_edge_length() <= 2.5 * h);
        for (i, hole) in reference_holes().iter().enumerate() {
            for v in m.hole_vertices(i) {
                let p = m.vertices()[v];
                let d = (p[0] - hole.center[0]).hypot(p[1] - hole.center[1]);
                assert!((d - hole.radius).abs() <= 0.2 * h);
            }
        }
        // every boundary vertex has one tag class
        let outer = m.outer_vertices();
        for i in 0..3 {
            assert!(m.hole_vertices(i).iter().all(|v| !outer.contains(v)));
        }
    }

    #[test]
    fn refinement_scales_triangle_count() {
        let a = generate_mesh(Rectangle::unit(), &reference_holes(), 0.04, DomainKind::Holed).unwrap();
        let b = generate_mesh(Rectangle::unit(), &reference_holes(), 0.02, DomainKind::Holed).unwrap();
        let ratio = b.num_triangles() as f64 / a.num_triangles() as f64;
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn full_mesh_contains_holed_submesh() {
        let full = generate_mesh(Rectangle::unit(), &reference_holes(), 0.04, DomainKind::Full).unwrap();
        let holed = generate_mesh(Rectangle::unit(), &reference_holes(), 0.04, DomainKind::Holed).unwrap();
        let (sub, map) = extract_submesh(&full).unwrap();
        assert_eq!(sub.vertices(), holed.vertices());
        assert_eq!(sub.triangles(), holed.triangles());
        assert!(map.iter().enumerate().all(|(i, &j)| i == j));
        let hole_area: f64 = (0..3)
            .flat_map(|i| full.hole_triangles(i))
            .map(|t| full.triangle_area(t))
            .sum();
        assert!((sub.total_area() + hole_area - full.total_area()).abs() < 1e-13);
        for i in 0..3 {
            let a: Vec<_> = full.edges_with_tag(BoundaryTag::Hole(i)).map(|e| e.vertices).collect();
            let b: Vec<_> = sub.edges_with_tag(BoundaryTag::Hole(i)).map(|e| e.vertices.map(|v| map[v])).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn full_mesh_without_holes_is_identity() {
        let full = generate_mesh(Rectangle::unit(), &[], 0.1, DomainKind::Full).unwrap();
        let (sub, map) = extract_submesh(&full).unwrap();
        assert_eq!(sub.vertices(), full.vertices());
        assert_eq!(sub.triangles(), full.triangles());
        assert_eq!(map, (0..full.num_vertices()).collect::<Vec<_>>());
    }

    #[test]
    fn rejects_holes_too_close_to_boundary_or_each_other() {
        let r = Rectangle::unit();
        assert!(matches!(
            generate_mesh(r, &[HoleSpec::new([0.12, 0.5], 0.1)], 0.05, DomainKind::Holed),
            Err(MeshError::Geometry(_))
        ));
        assert!(matches!(
            generate_mesh(r, &[HoleSpec::new([0.4, 0.5], 0.1), HoleSpec::new([0.65, 0.5], 0.1)], 0.05, DomainKind::Holed),
            Err(MeshError::Geometry(_))
        ));
        assert!(matches!(generate_mesh(r, &[], 1.5, DomainKind::Holed), Err(MeshError::Geometry(_))));
        assert!(matches!(generate_mesh(r, &[], 0.0, DomainKind::Holed), Err(MeshError::Geometry(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_mesh(Rectangle::unit(), &reference_holes(), 0.05, DomainKind::Full).unwrap();
        let b = generate_mesh(Rectangle::unit(), &reference_holes(), 0.05, DomainKind::Full).unwrap();
        assert_eq!(a.vertices(), b.vertices());
        assert_eq!(a.triangles(), b.triangles());
    }
}
