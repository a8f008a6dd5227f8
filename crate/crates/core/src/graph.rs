//! Areal units and their contiguity graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Areal units with undirected contiguity edges.
///
/// Units are indexed `0..n_units` in lexicographic order of their
/// identifiers. Edges are stored once as `(i, j)` with `i < j`, sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct ArealGraph {
    unit_ids: Vec<String>,
    edges: Vec<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

impl ArealGraph {
    /// Builds a graph from identifiers and index pairs. Identifiers are
    /// re-sorted lexicographically; pairs refer to positions in `unit_ids`
    /// as given.
    pub fn new(unit_ids: Vec<String>, pairs: &[(usize, usize)]) -> Result<Self> {
        let n = unit_ids.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| unit_ids[a].cmp(&unit_ids[b]));
        for w in order.windows(2) {
            if unit_ids[w[0]] == unit_ids[w[1]] {
                return Err(Error::DuplicateUnit(unit_ids[w[0]].clone()));
            }
        }
        let mut rank = vec![0usize; n];
        for (new, &old) in order.iter().enumerate() {
            rank[old] = new;
        }
        let mut set = BTreeSet::new();
        for (row, &(a, b)) in pairs.iter().enumerate() {
            if a >= n || b >= n {
                return Err(Error::invalid(format!(
                    "edge {row} references unit index out of range"
                )));
            }
            if a == b {
                return Err(Error::SelfLoop {
                    row: row + 1,
                    id: unit_ids[a].clone(),
                });
            }
            let (i, j) = (rank[a], rank[b]);
            set.insert((i.min(j), i.max(j)));
        }
        let sorted_ids = order.iter().map(|&o| unit_ids[o].clone()).collect();
        Ok(Self::from_sorted(sorted_ids, set.into_iter().collect()))
    }

    fn from_sorted(unit_ids: Vec<String>, edges: Vec<(usize, usize)>) -> Self {
        let mut neighbors = vec![Vec::new(); unit_ids.len()];
        for &(i, j) in &edges {
            neighbors[i].push(j);
            neighbors[j].push(i);
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Self {
            unit_ids,
            edges,
            neighbors,
        }
    }

    /// Rectangular lattice with rook contiguity. Units are named `r{row}c{col}`
    /// with zero-padded indices so lexicographic order is row-major.
    pub fn lattice(rows: usize, cols: usize) -> Self {
        let width = (rows.max(cols).max(2) - 1).to_string().len();
        let name = |r: usize, c: usize| format!("r{r:0width$}c{c:0width$}");
        let ids = (0..rows)
            .flat_map(|r| (0..cols).map(move |c| (r, c)))
            .map(|(r, c)| name(r, c))
            .collect();
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let k = r * cols + c;
                if c + 1 < cols {
                    edges.push((k, k + 1));
                }
                if r + 1 < rows {
                    edges.push((k, k + cols));
                }
            }
        }
        edges.sort_unstable();
        Self::from_sorted(ids, edges)
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, unit: usize) -> &[usize] {
        &self.neighbors[unit]
    }

    pub fn degree(&self, unit: usize) -> usize {
        self.neighbors[unit].len()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.unit_ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
    }

    /// `src,dst` edge list in the format read by [`load_edge_list`].
    /// Isolated units do not appear.
    pub fn to_edge_csv(&self) -> String {
        let mut out = String::from("src,dst\n");
        for &(i, j) in &self.edges {
            out.push_str(&format!("{},{}\n", self.unit_ids[i], self.unit_ids[j]));
        }
        out
    }

    /// Connected components, each sorted, listed in order of their smallest
    /// member.
    pub fn connected_components(&self) -> Vec<Vec<usize>> {
        let n = self.n_units();
        let mut label = vec![usize::MAX; n];
        let mut components = Vec::new();
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut members = vec![start];
            label[start] = id;
            let mut head = 0;
            while head < members.len() {
                let u = members[head];
                head += 1;
                for &w in &self.neighbors[u] {
                    if label[w] == usize::MAX {
                        label[w] = id;
                        members.push(w);
                    }
                }
            }
            members.sort_unstable();
            components.push(members);
        }
        components
    }
}

/// Parses a `src,dst` edge list.
///
/// Without a `universe`, the units are exactly the identifiers that appear
/// in the table. With one, the units are the universe and any identifier
/// outside it is rejected.
pub fn load_edge_list(text: &str, universe: Option<&[String]>) -> Result<ArealGraph> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() < 2 || &headers[0] != "src" || &headers[1] != "dst" {
        return Err(Error::parse(1, "expected header `src,dst`"));
    }
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record?;
        let line = k + 2;
        if record.len() != 2 {
            return Err(Error::parse(line, "expected two columns"));
        }
        let (a, b) = (record[0].to_string(), record[1].to_string());
        if a.is_empty() || b.is_empty() {
            return Err(Error::parse(line, "empty identifier"));
        }
        if a == b {
            return Err(Error::SelfLoop { row: line, id: a });
        }
        rows.push((a, b));
    }

    let ids: Vec<String> = match universe {
        Some(u) => {
            let set: BTreeSet<&String> = u.iter().collect();
            if set.len() != u.len() {
                let mut seen = BTreeSet::new();
                for id in u {
                    if !seen.insert(id) {
                        return Err(Error::DuplicateUnit(id.clone()));
                    }
                }
            }
            for (a, b) in &rows {
                for id in [a, b] {
                    if !set.contains(id) {
                        return Err(Error::UnknownUnit(id.clone()));
                    }
                }
            }
            set.into_iter().cloned().collect()
        }
        None => rows
            .iter()
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    let index: HashMap<&str, usize> = ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    let pairs: Vec<(usize, usize)> = rows
        .iter()
        .map(|(a, b)| (index[a.as_str()], index[b.as_str()]))
        .collect();
    ArealGraph::new(ids, &pairs)
}

/// One closed ring of vertex coordinates.
pub type Ring = Vec<(f64, f64)>;

/// Polygon geometry for a single areal unit.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitGeometry {
    pub unit_id: String,
    pub rings: Vec<Ring>,
}

fn vertex_key(x: f64, y: f64) -> (u64, u64) {
    // +0.0 and -0.0 are the same vertex
    let norm = |v: f64| if v == 0.0 { 0.0f64 } else { v };
    (norm(x).to_bits(), norm(y).to_bits())
}

/// Queen contiguity: two units are adjacent when they share at least one
/// vertex with exactly equal coordinates.
pub fn derive_queen_adjacency(units: &[UnitGeometry]) -> Result<ArealGraph> {
    let mut owners: BTreeMap<(u64, u64), BTreeSet<usize>> = BTreeMap::new();
    for (k, unit) in units.iter().enumerate() {
        if unit.rings.iter().all(|r| r.is_empty()) {
            return Err(Error::EmptyGeometry(unit.unit_id.clone()));
        }
        for &(x, y) in unit.rings.iter().flatten() {
            if !x.is_finite() || !y.is_finite() {
                return Err(Error::invalid(format!(
                    "non-finite coordinate in unit `{}`",
                    unit.unit_id
                )));
            }
            owners.entry(vertex_key(x, y)).or_default().insert(k);
        }
    }
    let mut pairs = BTreeSet::new();
    for members in owners.values() {
        let members: Vec<usize> = members.iter().copied().collect();
        for (a, &i) in members.iter().enumerate() {
            for &j in &members[a + 1..] {
                pairs.insert((i, j));
            }
        }
    }
    let ids = units.iter().map(|u| u.unit_id.clone()).collect();
    ArealGraph::new(ids, &pairs.into_iter().collect::<Vec<_>>())
}

/// Parses the minimal geometry format: one record per line,
/// `unit_id; x1 y1, x2 y2, ...[; x1 y1, ...]` with one `;`-separated
/// field per ring. Repeated identifiers append rings. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_polygons(text: &str) -> Result<Vec<UnitGeometry>> {
    let mut units: Vec<UnitGeometry> = Vec::new();
    let mut position: HashMap<String, usize> = HashMap::new();
    for (k, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(';');
        let id = fields.next().unwrap_or("").trim().to_string();
        if id.is_empty() {
            return Err(Error::parse(k + 1, "missing unit identifier"));
        }
        let mut rings = Vec::new();
        for field in fields {
            let field = field.trim();
            if field.is_empty() {
                continue;
            }
            let mut ring = Vec::new();
            for pair in field.split(',') {
                let mut it = pair.split_whitespace();
                let parse = |s: Option<&str>| -> Result<f64> {
                    s.ok_or_else(|| Error::parse(k + 1, "incomplete coordinate pair"))?
                        .parse::<f64>()
                        .map_err(|e| Error::parse(k + 1, e.to_string()))
                };
                let x = parse(it.next())?;
                let y = parse(it.next())?;
                if it.next().is_some() {
                    return Err(Error::parse(k + 1, "coordinate pair has extra values"));
                }
                ring.push((x, y));
            }
            rings.push(ring);
        }
        match position.get(&id) {
            Some(&p) => units[p].rings.extend(rings),
            None => {
                position.insert(id.clone(), units.len());
                units.push(UnitGeometry { unit_id: id, rings });
            }
        }
    }
    Ok(units)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(id: &str, x0: f64, y0: f64) -> UnitGeometry {
        UnitGeometry {
            unit_id: id.to_string(),
            rings: vec![vec![
                (x0, y0),
                (x0 + 1.0, y0),
                (x0 + 1.0, y0 + 1.0),
                (x0, y0 + 1.0),
                (x0, y0),
            ]],
        }
    }

    #[test]
    fn edge_list_builds_path() {
        let g = load_edge_list("src,dst\nA,B\nB,C\n", None).unwrap();
        assert_eq!(g.n_units(), 3);
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
    }

    #[test]
    fn edge_list_dedups_reversed_pair() {
        let g = load_edge_list("src,dst\nA,B\nB,A\n", None).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
    }

    #[test]
    fn edge_list_rejects_self_loop() {
        let err = load_edge_list("src,dst\nA,B\nA,A\n", None).unwrap_err();
        assert!(matches!(err, Error::SelfLoop { row: 3, .. }), "{err}");
        assert!(err.to_string().contains("self-loop"));
    }

    #[test]
    fn edge_list_checks_universe() {
        let universe: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let g = load_edge_list("src,dst\nA,B\n", Some(&universe)).unwrap();
        assert_eq!(g.n_units(), 3);
        assert_eq!(g.degree(2), 0);
        let err = load_edge_list("src,dst\nA,Z\n", Some(&universe)).unwrap_err();
        assert!(matches!(err, Error::UnknownUnit(ref id) if id == "Z"));
    }

    #[test]
    fn ordering_is_lexicographic() {
        let g = load_edge_list("src,dst\nzeta,alpha\n", None).unwrap();
        assert_eq!(g.unit_ids(), &["alpha".to_string(), "zeta".to_string()]);
        assert_eq!(g.index_of("zeta"), Some(1));
    }

    #[test]
    fn components_examples() {
        let path = load_edge_list("src,dst\nA,B\nB,C\n", None).unwrap();
        assert_eq!(path.connected_components(), vec![vec![0, 1, 2]]);

        let ids: Vec<String> = ["A", "B", "C"].iter().map(|s| s.to_string()).collect();
        let empty = ArealGraph::new(ids, &[]).unwrap();
        assert_eq!(empty.connected_components().len(), 3);

        let two = load_edge_list("src,dst\nA,B\nC,D\n", None).unwrap();
        assert_eq!(two.connected_components(), vec![vec![0, 1], vec![2, 3]]);
    }

    #[test]
    fn queen_shared_edge_corner_and_disjoint() {
        let g = derive_queen_adjacency(&[square("a", 0.0, 0.0), square("b", 1.0, 0.0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        let g = derive_queen_adjacency(&[square("a", 0.0, 0.0), square("b", 1.0, 1.0)]).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        let g = derive_queen_adjacency(&[square("a", 0.0, 0.0), square("b", 5.0, 5.0)]).unwrap();
        assert!(g.edges().is_empty());
    }

    #[test]
    fn queen_rejects_empty_geometry() {
        let empty = UnitGeometry {
            unit_id: "x".into(),
            rings: vec![],
        };
        assert!(matches!(
            derive_queen_adjacency(&[square("a", 0.0, 0.0), empty]),
            Err(Error::EmptyGeometry(_))
        ));
    }

    #[test]
    fn lattice_ids_are_row_major() {
        let g = ArealGraph::lattice(3, 4);
        assert_eq!(g.n_units(), 12);
        assert_eq!(g.edges().len(), 3 * 3 + 2 * 4);
        assert_eq!(g.unit_ids()[5], "r1c1");
        assert_eq!(g.neighbors(5), &[1, 4, 6, 9]);
    }

    #[test]
    fn polygon_file_round() {
        let text = "# two squares\nA; 0 0, 1 0, 1 1, 0 1, 0 0\nB; 1 0, 2 0, 2 1, 1 1, 1 0\n";
        let units = parse_polygons(text).unwrap();
        assert_eq!(units.len(), 2);
        assert_eq!(units[1].rings[0][2], (2.0, 1.0));
        let g = derive_queen_adjacency(&units).unwrap();
        assert_eq!(g.edges(), &[(0, 1)]);
        assert!(parse_polygons("A; 0 0, 1\n").is_err());
    }
}
