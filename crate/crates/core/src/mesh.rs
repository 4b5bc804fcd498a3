//! Admissible two-dimensional meshes for cell-centered two-point flux schemes.
//!
//! A [`Mesh`] stores the cells (center point `x_K`, area `m(K)`), the edges
//! (length `m(σ)`, distance `d_σ`, transmissibility `τ_σ = m(σ)/d_σ`) and the
//! per-cell edge lists. Interior edges are stored once and shared by both
//! adjacent cells.
//!
//! Meshes are either generated ([`Mesh::cartesian`]) or read from the plain
//! text format handled by [`load_mesh`] / [`write_mesh`]. Orthogonality of
//! loaded meshes is not checked: the file carries no face normals, so loaded
//! meshes are trusted to be admissible.

use std::fmt;

use thiserror::Error;

/// Relative tolerance used when checking `τ = m(σ)/d` and the area sum.
const GEOMETRY_RTOL: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid mesh: {0}")]
    Validation(Violation),
    #[error("invalid grid parameters: {0}")]
    InvalidGrid(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub id: usize,
    pub center: Point,
    pub area: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeKind {
    Interior,
    Exterior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub id: usize,
    pub kind: EdgeKind,
    /// Owning cell `K` and, for interior edges, the neighbor `L`.
    pub cells: (usize, Option<usize>),
    pub length: f64,
    /// `d_σ`: center-to-center distance (interior) or center-to-edge distance (exterior).
    pub distance: f64,
    pub transmissibility: f64,
    /// `d(x_K, σ)` for the owner and, on interior edges, `d(x_L, σ)` for the neighbor.
    pub center_distances: (f64, Option<f64>),
}

impl Edge {
    pub fn is_interior(&self) -> bool {
        self.kind == EdgeKind::Interior
    }

    /// The cell on the other side of `cell`, if the edge is interior.
    pub fn other(&self, cell: usize) -> Option<usize> {
        match self.cells {
            (k, Some(l)) if k == cell => Some(l),
            (k, Some(l)) if l == cell => Some(k),
            _ => None,
        }
    }
}

/// Edge lists `E_K = E_int,K ∪ E_ext,K` of one cell.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellEdges {
    pub interior: Vec<usize>,
    pub exterior: Vec<usize>,
}

impl CellEdges {
    pub fn all(&self) -> impl Iterator<Item = usize> + '_ {
        self.interior.iter().chain(self.exterior.iter()).copied()
    }
}

/// Parameters of a uniform Cartesian grid on `[0, lx] × [0, ly]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CartesianGrid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl CartesianGrid {
    pub fn cell_index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    pub fn dx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn dy(&self) -> f64 {
        self.ly / self.ny as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub cells: Vec<Cell>,
    pub edges: Vec<Edge>,
    pub cell_edges: Vec<CellEdges>,
    /// `Δx`, the largest cell diameter.
    pub size: f64,
    /// Regularity constant `ξ = min d(x_K, σ) / d_σ`.
    pub xi: f64,
    pub total_area: f64,
    /// Present for meshes generated by [`Mesh::cartesian`].
    pub grid: Option<CartesianGrid>,
}

impl Mesh {
    /// Uniform `nx × ny` grid of `[0, lx] × [0, ly]`, cells numbered row-major
    /// (x fastest). Edges: all vertical interior faces, then horizontal interior
    /// faces, then the boundary (bottom, top, left, right).
    pub fn cartesian(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self, MeshError> {
        if nx == 0 || ny == 0 {
            return Err(MeshError::InvalidGrid(format!("nx = {nx}, ny = {ny} must be >= 1")));
        }
        if !(lx > 0.0 && ly > 0.0 && lx.is_finite() && ly.is_finite()) {
            return Err(MeshError::InvalidGrid(format!("lx = {lx}, ly = {ly} must be positive")));
        }
        let grid = CartesianGrid { nx, ny, lx, ly };
        let (hx, hy) = (grid.dx(), grid.dy());

        let mut cells = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                cells.push(Cell {
                    id: grid.cell_index(ix, iy),
                    center: Point::new((ix as f64 + 0.5) * hx, (iy as f64 + 0.5) * hy),
                    area: hx * hy,
                });
            }
        }

        let mut raw = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx.saturating_sub(1) {
                raw.push(RawEdge {
                    owner: grid.cell_index(ix, iy),
                    neighbor: Some(grid.cell_index(ix + 1, iy)),
                    length: hy,
                    distance: hx,
                    owner_distance: 0.5 * hx,
                    neighbor_distance: Some(0.5 * hx),
                });
            }
        }
        for iy in 0..ny.saturating_sub(1) {
            for ix in 0..nx {
                raw.push(RawEdge {
                    owner: grid.cell_index(ix, iy),
                    neighbor: Some(grid.cell_index(ix, iy + 1)),
                    length: hx,
                    distance: hy,
                    owner_distance: 0.5 * hy,
                    neighbor_distance: Some(0.5 * hy),
                });
            }
        }
        let boundary = |owner: usize, length: f64, distance: f64| RawEdge {
            owner,
            neighbor: None,
            length,
            distance,
            owner_distance: distance,
            neighbor_distance: None,
        };
        for ix in 0..nx {
            raw.push(boundary(grid.cell_index(ix, 0), hx, 0.5 * hy));
        }
        for ix in 0..nx {
            raw.push(boundary(grid.cell_index(ix, ny - 1), hx, 0.5 * hy));
        }
        for iy in 0..ny {
            raw.push(boundary(grid.cell_index(0, iy), hy, 0.5 * hx));
        }
        for iy in 0..ny {
            raw.push(boundary(grid.cell_index(nx - 1, iy), hy, 0.5 * hx));
        }

        let mut mesh = Self::assemble(cells, raw)?;
        mesh.total_area = lx * ly;
        mesh.grid = Some(grid);
        Ok(mesh)
    }

    fn assemble(cells: Vec<Cell>, raw: Vec<RawEdge>) -> Result<Self, MeshError> {
        let ncells = cells.len();
        let mut cell_edges = vec![CellEdges::default(); ncells];
        let mut edges = Vec::with_capacity(raw.len());
        for (id, r) in raw.into_iter().enumerate() {
            if r.owner >= ncells || r.neighbor.is_some_and(|l| l >= ncells) {
                return Err(MeshError::Validation(Violation::EdgeCellMissing { edge: id }));
            }
            let kind = if r.neighbor.is_some() { EdgeKind::Interior } else { EdgeKind::Exterior };
            match r.neighbor {
                Some(l) => {
                    cell_edges[r.owner].interior.push(id);
                    if l != r.owner {
                        cell_edges[l].interior.push(id);
                    }
                }
                None => cell_edges[r.owner].exterior.push(id),
            }
            edges.push(Edge {
                id,
                kind,
                cells: (r.owner, r.neighbor),
                length: r.length,
                distance: r.distance,
                transmissibility: r.length / r.distance,
                center_distances: (r.owner_distance, r.neighbor_distance),
            });
        }
        let total_area = cells.iter().map(|c| c.area).sum();
        let mut mesh = Mesh {
            cells,
            edges,
            cell_edges,
            size: 0.0,
            xi: 0.0,
            total_area,
            grid: None,
        };
        mesh.size = mesh.cell_diameters().into_iter().fold(0.0, f64::max);
        mesh.xi = regularity_xi(&mesh);
        Ok(mesh)
    }

    pub fn num_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn interior_edges(&self) -> impl Iterator<Item = &Edge> {
        self.edges.iter().filter(|e| e.is_interior())
    }

    pub fn areas(&self) -> Vec<f64> {
        self.cells.iter().map(|c| c.area).collect()
    }

    /// Cell diameters, taken as the diagonal of the cell's bounding box.
    ///
    /// Only edge lengths and center-to-edge distances are known, so every edge
    /// is treated as centered on the foot of the perpendicular from `x_K`; the
    /// farthest edge endpoint then lies at `sqrt(d² + (m(σ)/2)²)`. This is
    /// exact for rectangles.
    pub fn cell_diameters(&self) -> Vec<f64> {
        self.cell_edges
            .iter()
            .enumerate()
            .map(|(k, ce)| {
                ce.all()
                    .map(|e| {
                        let edge = &self.edges[e];
                        let d = center_to_edge(edge, k);
                        2.0 * d.hypot(0.5 * edge.length)
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
    }
}

fn center_to_edge(edge: &Edge, cell: usize) -> f64 {
    match (edge.cells, edge.center_distances) {
        ((_, Some(l)), (_, Some(dl))) if l == cell => dl,
        (_, (dk, _)) => dk,
    }
}

/// `ξ = min over K, σ ∈ E_K of d(x_K, σ) / d_σ`.
pub fn regularity_xi(mesh: &Mesh) -> f64 {
    let mut xi = f64::INFINITY;
    for edge in &mesh.edges {
        let (dk, dl) = edge.center_distances;
        xi = xi.min(dk / edge.distance);
        if let Some(dl) = dl {
            xi = xi.min(dl / edge.distance);
        }
    }
    if xi.is_finite() {
        xi
    } else {
        // a cell without edges imposes no constraint
        1.0
    }
}

struct RawEdge {
    owner: usize,
    neighbor: Option<usize>,
    length: f64,
    distance: f64,
    owner_distance: f64,
    neighbor_distance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NonPositiveArea { cell: usize, area: f64 },
    CenterOutsideDomain { cell: usize },
    CellIdMismatch { index: usize, id: usize },
    NonPositiveLength { edge: usize, length: f64 },
    NonPositiveDistance { edge: usize, distance: f64 },
    Transmissibility { edge: usize, stored: f64, expected: f64 },
    EdgeCellMissing { edge: usize },
    DegenerateInteriorEdge { edge: usize },
    CenterDistanceMismatch { edge: usize, given: f64, centers: f64 },
    EdgeListMismatch { edge: usize, cell: usize },
    AreaSum { sum: f64, total: f64 },
    Regularity { xi: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonPositiveArea { cell, area } => {
                write!(f, "cell {cell} has non-positive area {area}")
            }
            Violation::CenterOutsideDomain { cell } => {
                write!(f, "cell {cell} center lies outside the domain")
            }
            Violation::CellIdMismatch { index, id } => {
                write!(f, "cell at position {index} has id {id}")
            }
            Violation::NonPositiveLength { edge, length } => {
                write!(f, "edge {edge} has non-positive length {length}")
            }
            Violation::NonPositiveDistance { edge, distance } => {
                write!(f, "edge {edge} has non-positive distance {distance}")
            }
            Violation::Transmissibility { edge, stored, expected } => {
                write!(f, "edge {edge} transmissibility {stored} != length/distance = {expected}")
            }
            Violation::EdgeCellMissing { edge } => {
                write!(f, "edge {edge} references a cell that does not exist")
            }
            Violation::DegenerateInteriorEdge { edge } => {
                write!(f, "interior edge {edge} references the same cell twice")
            }
            Violation::CenterDistanceMismatch { edge, given, centers } => write!(
                f,
                "interior edge {edge} distance {given} differs from center distance {centers}"
            ),
            Violation::EdgeListMismatch { edge, cell } => {
                write!(f, "edge {edge} is missing from the edge list of cell {cell}")
            }
            Violation::AreaSum { sum, total } => {
                write!(f, "cell areas sum to {sum}, total area is {total}")
            }
            Violation::Regularity { xi } => write!(f, "regularity constant {xi} not in (0, 1]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<(), MeshError> {
        match self.violations.into_iter().next() {
            None => Ok(()),
            Some(v) => Err(MeshError::Validation(v)),
        }
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_ok() {
            return write!(f, "ok");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Checks every structural invariant of `mesh`; never fails, the report
/// carries the violations.
pub fn validate_mesh(mesh: &Mesh) -> ValidationReport {
    let mut out = Vec::new();
    let ncells = mesh.cells.len();

    for (index, cell) in mesh.cells.iter().enumerate() {
        if cell.id != index {
            out.push(Violation::CellIdMismatch { index, id: cell.id });
        }
        if !(cell.area > 0.0) {
            out.push(Violation::NonPositiveArea { cell: cell.id, area: cell.area });
        }
        if let Some(g) = mesh.grid {
            let c = cell.center;
            if !(0.0..=g.lx).contains(&c.x) || !(0.0..=g.ly).contains(&c.y) {
                out.push(Violation::CenterOutsideDomain { cell: cell.id });
            }
        }
    }

    for edge in &mesh.edges {
        let id = edge.id;
        if !(edge.length > 0.0) {
            out.push(Violation::NonPositiveLength { edge: id, length: edge.length });
        }
        if !(edge.distance > 0.0) {
            out.push(Violation::NonPositiveDistance { edge: id, distance: edge.distance });
        }
        let expected = edge.length / edge.distance;
        if !((edge.transmissibility - expected).abs() <= GEOMETRY_RTOL * expected.abs())
            || !(edge.transmissibility > 0.0)
        {
            out.push(Violation::Transmissibility {
                edge: id,
                stored: edge.transmissibility,
                expected,
            });
        }
        let (k, l) = edge.cells;
        if k >= ncells || l.is_some_and(|l| l >= ncells) {
            out.push(Violation::EdgeCellMissing { edge: id });
            continue;
        }
        if l == Some(k) {
            out.push(Violation::DegenerateInteriorEdge { edge: id });
        }
        if let Some(l) = l {
            let centers = mesh.cells[k].center.distance(&mesh.cells[l].center);
            if (centers - edge.distance).abs() > 1e-9 * edge.distance.abs().max(centers) {
                out.push(Violation::CenterDistanceMismatch {
                    edge: id,
                    given: edge.distance,
                    centers,
                });
            }
        }
        for cell in std::iter::once(k).chain(l) {
            let listed = mesh
                .cell_edges
                .get(cell)
                .is_some_and(|ce| ce.all().any(|e| e == id));
            if !listed {
                out.push(Violation::EdgeListMismatch { edge: id, cell });
            }
        }
    }

    let sum: f64 = mesh.cells.iter().map(|c| c.area).sum();
    if !((sum - mesh.total_area).abs() <= GEOMETRY_RTOL * mesh.total_area.abs()) {
        out.push(Violation::AreaSum { sum, total: mesh.total_area });
    }
    if !(mesh.xi > 0.0 && mesh.xi <= 1.0) {
        out.push(Violation::Regularity { xi: mesh.xi });
    }

    ValidationReport { violations: out }
}

/// Parses the `MESH2D` text format and returns a validated mesh.
///
/// Transmissibilities, `Δx` and `ξ` are recomputed. The file does not locate
/// interior edges along the center segment, so `d(x_K, σ) = d(x_L, σ) = d_σ/2`
/// is assumed for them (exact for Cartesian and Voronoi meshes).
pub fn load_mesh(text: &str) -> Result<Mesh, MeshError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let mut last_line = 0;

    let mut next = |what: &str| -> Result<(usize, Vec<&str>), MeshError> {
        match lines.next() {
            Some((n, l)) => {
                last_line = n;
                Ok((n, l.split_whitespace().collect()))
            }
            None => Err(MeshError::Parse {
                line: last_line + 1,
                message: format!("unexpected end of file, expected {what}"),
            }),
        }
    };

    let (n, header) = next("MESH2D header")?;
    if header != ["MESH2D"] {
        return Err(perr(n, "expected MESH2D header"));
    }
    let (n, toks) = next("NCELLS")?;
    let ncells = match toks.as_slice() {
        ["NCELLS", c] => parse_num::<usize>(n, c)?,
        _ => return Err(perr(n, "expected `NCELLS <n>`")),
    };
    let mut cells = Vec::with_capacity(ncells);
    for _ in 0..ncells {
        let (n, t) = next("cell line")?;
        if t.len() != 4 {
            return Err(perr(n, "cell line needs `<id> <cx> <cy> <area>`"));
        }
        cells.push(Cell {
            id: parse_num(n, t[0])?,
            center: Point::new(parse_num(n, t[1])?, parse_num(n, t[2])?),
            area: parse_num(n, t[3])?,
        });
    }
    let (n, toks) = next("NEDGES")?;
    let nedges = match toks.as_slice() {
        ["NEDGES", c] => parse_num::<usize>(n, c)?,
        _ => return Err(perr(n, "expected `NEDGES <m>`")),
    };
    let mut raw = Vec::with_capacity(nedges);
    for expected_id in 0..nedges {
        let (n, t) = next("edge line")?;
        if t.len() != 5 {
            return Err(perr(n, "edge line needs `<id> <K> <L|-1> <length> <d>`"));
        }
        let id: usize = parse_num(n, t[0])?;
        if id != expected_id {
            return Err(perr(n, &format!("edge id {id} out of order, expected {expected_id}")));
        }
        let owner: usize = parse_num(n, t[1])?;
        let neighbor: i64 = parse_num(n, t[2])?;
        let length: f64 = parse_num(n, t[3])?;
        let distance: f64 = parse_num(n, t[4])?;
        if owner >= ncells {
            return Err(perr(n, &format!("edge {id} references missing cell {owner}")));
        }
        let neighbor = match neighbor {
            -1 => None,
            l if l >= 0 && (l as usize) < ncells => Some(l as usize),
            l => return Err(perr(n, &format!("edge {id} references missing cell {l}"))),
        };
        let (owner_distance, neighbor_distance) = match neighbor {
            Some(_) => (0.5 * distance, Some(0.5 * distance)),
            None => (distance, None),
        };
        raw.push(RawEdge { owner, neighbor, length, distance, owner_distance, neighbor_distance });
    }
    if let Some((n, _)) = lines.next() {
        return Err(perr(n, "trailing content after edge list"));
    }

    let mesh = Mesh::assemble(cells, raw)?;
    validate_mesh(&mesh).into_result()?;
    Ok(mesh)
}

/// Writes `mesh` in the `MESH2D` format with round-trip float formatting.
pub fn write_mesh(mesh: &Mesh) -> String {
    let mut s = String::from("MESH2D\n");
    s.push_str(&format!("NCELLS {}\n", mesh.cells.len()));
    for c in &mesh.cells {
        s.push_str(&format!("{} {:?} {:?} {:?}\n", c.id, c.center.x, c.center.y, c.area));
    }
    s.push_str(&format!("NEDGES {}\n", mesh.edges.len()));
    for e in &mesh.edges {
        let l = e.cells.1.map_or(-1, |l| l as i64);
        s.push_str(&format!("{} {} {} {:?} {:?}\n", e.id, e.cells.0, l, e.length, e.distance));
    }
    s
}

fn perr(line: usize, message: &str) -> MeshError {
    MeshError::Parse { line, message: message.to_string() }
}

fn parse_num<T: std::str::FromStr>(line: usize, tok: &str) -> Result<T, MeshError> {
    tok.parse()
        .map_err(|_| perr(line, &format!("cannot parse `{tok}` as a number")))
}
