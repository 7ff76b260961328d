//! Nested border regions around a bidding-zone boundary.
//!
//! Depth 1 on each side holds the units that share a land border with the
//! other side, or with a split unit sitting on the boundary. Each further
//! depth adds the same-side neighbours of the previous one.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::panel::{PanelDataset, Variable, YearRange, Zone};

#[derive(Debug, Error)]
pub enum RegionError {
    #[error("self-loop on unit {0}")]
    SelfLoop(String),
    #[error("graph node {0} is not a panel unit")]
    UnknownGraphNode(String),
    #[error("unit {0} is not in the panel")]
    UnknownUnit(String),
    #[error("no edge crosses the {0} boundary")]
    EmptyBorder(Boundary),
    #[error("invalid boundary {north}|{south}")]
    InvalidBoundary { north: Zone, south: Zone },
    #[error("depth must be at least 1")]
    InvalidDepth,
    #[error("member set for {0} is empty")]
    EmptyMemberSet(String),
    #[error("{path}: {message}")]
    Input { path: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Undirected simple graph of shared land borders.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AdjacencyGraph {
    adj: BTreeMap<String, BTreeSet<String>>,
}

impl AdjacencyGraph {
    /// Repeated edges (in either orientation) are merged.
    pub fn from_edges<S, I>(edges: I) -> Result<Self, RegionError>
    where
        S: Into<String>,
        I: IntoIterator<Item = (S, S)>,
    {
        let mut g = Self::default();
        for (a, b) in edges {
            g.add_edge(a.into(), b.into())?;
        }
        Ok(g)
    }

    pub fn add_node(&mut self, id: impl Into<String>) {
        self.adj.entry(id.into()).or_default();
    }

    pub fn add_edge(&mut self, a: String, b: String) -> Result<(), RegionError> {
        if a == b {
            return Err(RegionError::SelfLoop(a));
        }
        self.adj.entry(a.clone()).or_default().insert(b.clone());
        self.adj.entry(b).or_default().insert(a);
        Ok(())
    }

    pub fn nodes(&self) -> impl Iterator<Item = &str> {
        self.adj.keys().map(String::as_str)
    }

    pub fn neighbors<'a>(&'a self, id: &str) -> impl Iterator<Item = &'a str> + 'a {
        self.adj.get(id).into_iter().flatten().map(String::as_str)
    }

    /// Edges as ordered pairs `(a, b)` with `a < b`.
    pub fn edges(&self) -> Vec<(String, String)> {
        self.adj
            .iter()
            .flat_map(|(a, ns)| ns.iter().filter(move |b| a < *b).map(move |b| (a.clone(), b.clone())))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.values().map(BTreeSet::len).sum::<usize>() / 2
    }
}

/// Reads an adjacency CSV with header `unit_a,unit_b`.
pub fn load_adjacency(path: &Path) -> Result<AdjacencyGraph, RegionError> {
    let input = |message: String| RegionError::Input {
        path: path.display().to_string(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|source| RegionError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers().map_err(|e| input(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["unit_a", "unit_b"] {
        return Err(input(format!(
            "expected header unit_a,unit_b, found {}",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut g = AdjacencyGraph::default();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input(e.to_string()))?;
        g.add_edge(rec[0].to_string(), rec[1].to_string())?;
    }
    Ok(g)
}

pub fn write_adjacency(graph: &AdjacencyGraph, path: &Path) -> Result<(), RegionError> {
    let io = |source| RegionError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut body = String::from("unit_a,unit_b\n");
    for (a, b) in graph.edges() {
        body.push_str(&format!("{a},{b}\n"));
    }
    std::fs::write(path, body).map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    North,
    South,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::North => "north",
            Side::South => "south",
        })
    }
}

/// Zone pair whose shared border defines the regions. Zones at or north of
/// `north` form the north side, zones at or south of `south` the south side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Boundary {
    pub north: Zone,
    pub south: Zone,
}

impl Default for Boundary {
    fn default() -> Self {
        Self {
            north: Zone::SE2,
            south: Zone::SE3,
        }
    }
}

impl fmt::Display for Boundary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}|{}", self.north, self.south)
    }
}

impl Boundary {
    pub fn validate(&self) -> Result<(), RegionError> {
        match (self.north.ordinal(), self.south.ordinal()) {
            (Some(n), Some(s)) if n < s => Ok(()),
            _ => Err(RegionError::InvalidBoundary {
                north: self.north,
                south: self.south,
            }),
        }
    }

    pub fn side_of(&self, zone: Zone) -> Option<Side> {
        let z = zone.ordinal()?;
        let (n, s) = (self.north.ordinal()?, self.south.ordinal()?);
        if z <= n {
            Some(Side::North)
        } else if z >= s {
            Some(Side::South)
        } else {
            None
        }
    }

    /// Zones on one side of the boundary.
    pub fn zones(&self, side: Side) -> Vec<Zone> {
        [Zone::SE1, Zone::SE2, Zone::SE3, Zone::SE4]
            .into_iter()
            .filter(|z| self.side_of(*z) == Some(side))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionSet {
    pub boundary: Boundary,
    north: Vec<BTreeSet<String>>,
    south: Vec<BTreeSet<String>>,
    /// All split units in the panel.
    pub excluded: BTreeSet<String>,
    /// Split units counted as lying on the boundary.
    pub boundary_split: BTreeSet<String>,
}

/// One exported region: members of a side at a depth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub depth: usize,
    pub side: Side,
    pub members: Vec<String>,
    pub excluded: Vec<String>,
}

impl RegionSet {
    pub fn max_depth(&self) -> usize {
        self.north.len()
    }

    /// Members at `depth` (1-based).
    pub fn members(&self, depth: usize, side: Side) -> &BTreeSet<String> {
        assert!(depth >= 1 && depth <= self.max_depth(), "depth {depth} out of range");
        match side {
            Side::North => &self.north[depth - 1],
            Side::South => &self.south[depth - 1],
        }
    }

    pub fn label(depth: usize, side: Side) -> String {
        format!("border{depth}_{side}")
    }

    pub fn records(&self) -> Vec<RegionRecord> {
        let excluded: Vec<String> = self.excluded.iter().cloned().collect();
        (1..=self.max_depth())
            .flat_map(|d| {
                let excluded = excluded.clone();
                [Side::North, Side::South].into_iter().map(move |side| RegionRecord {
                    depth: d,
                    side,
                    members: self.members(d, side).iter().cloned().collect(),
                    excluded: excluded.clone(),
                })
            })
            .collect()
    }
}

/// Builds the nested border regions on both sides of `boundary`.
pub fn build_border_regions(
    graph: &AdjacencyGraph,
    panel: &PanelDataset,
    boundary: Boundary,
    max_depth: usize,
) -> Result<RegionSet, RegionError> {
    boundary.validate()?;
    if max_depth == 0 {
        return Err(RegionError::InvalidDepth);
    }
    for node in graph.nodes() {
        if panel.unit(node).is_none() {
            return Err(RegionError::UnknownGraphNode(node.to_string()));
        }
    }
    let zone = |id: &str| panel.unit(id).expect("checked above").zone;
    let side = |id: &str| boundary.side_of(zone(id));

    let excluded: BTreeSet<String> = panel
        .units()
        .iter()
        .filter(|u| u.zone == Zone::Split)
        .map(|u| u.unit_id.clone())
        .collect();

    // Split units on the boundary: connected components of the split-only
    // subgraph that touch both sides.
    let mut boundary_split = BTreeSet::new();
    let mut visited = BTreeSet::new();
    for start in &excluded {
        if !visited.insert(start.clone()) {
            continue;
        }
        let mut component = vec![start.clone()];
        let mut queue = VecDeque::from([start.clone()]);
        let (mut touches_n, mut touches_s) = (false, false);
        while let Some(u) = queue.pop_front() {
            for v in graph.neighbors(&u) {
                match side(v) {
                    Some(Side::North) => touches_n = true,
                    Some(Side::South) => touches_s = true,
                    None if zone(v) == Zone::Split && visited.insert(v.to_string()) => {
                        component.push(v.to_string());
                        queue.push_back(v.to_string());
                    }
                    None => {}
                }
            }
        }
        if touches_n && touches_s {
            boundary_split.extend(component);
        }
    }

    let frontier = |s: Side| -> BTreeSet<String> {
        graph
            .nodes()
            .filter(|u| side(u) == Some(s))
            .filter(|u| {
                graph
                    .neighbors(u)
                    .any(|v| matches!(side(v), Some(o) if o != s) || boundary_split.contains(v))
            })
            .map(str::to_string)
            .collect()
    };
    let expand = |s: Side, first: BTreeSet<String>| -> Vec<BTreeSet<String>> {
        let mut levels = vec![first];
        while levels.len() < max_depth {
            let prev = levels.last().expect("non-empty");
            let mut next = prev.clone();
            for u in prev {
                next.extend(graph.neighbors(u).filter(|v| side(v) == Some(s)).map(str::to_string));
            }
            levels.push(next);
        }
        levels
    };

    let north1 = frontier(Side::North);
    let south1 = frontier(Side::South);
    if north1.is_empty() || south1.is_empty() {
        return Err(RegionError::EmptyBorder(boundary));
    }
    Ok(RegionSet {
        boundary,
        north: expand(Side::North, north1),
        south: expand(Side::South, south1),
        excluded,
        boundary_split,
    })
}

/// A group of units collapsed into one series by unweighted averaging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSeries {
    pub label: String,
    pub members: Vec<String>,
    pub years: YearRange,
    pub outcome: Vec<f64>,
    /// Covariate windows may extend beyond `years` (lag history).
    pub covariates: BTreeMap<Variable, (YearRange, Vec<f64>)>,
}

impl AggregateSeries {
    /// Series of a single panel unit.
    pub fn from_unit(panel: &PanelDataset, unit: usize) -> Self {
        let id = panel.units()[unit].unit_id.clone();
        aggregate_indices(panel, &[unit], id.clone(), vec![id])
    }

    pub fn outcome_at(&self, year: i32) -> Option<f64> {
        self.years.index_of(year).map(|t| self.outcome[t])
    }

    pub fn value_at(&self, var: Variable, year: i32) -> Option<f64> {
        match var {
            Variable::Outcome => self.outcome_at(year),
            v => {
                let (range, vals) = self.covariates.get(&v)?;
                range.index_of(year).map(|t| vals[t])
            }
        }
    }

    /// Shifts time-variant covariates by `lag` years, as
    /// [`crate::panel::lag_covariates`] does for unit series.
    pub fn lag_covariates(&self, lag: i32) -> Option<AggregateSeries> {
        let mut out = self.clone();
        for (var, (range, _)) in out.covariates.iter_mut() {
            if var.is_time_variant() {
                *range = YearRange::new(range.first + lag, range.last + lag);
                if !range.covers(&self.years) {
                    return None;
                }
            }
        }
        Some(out)
    }

    /// Copy with the outcome replaced elementwise.
    pub fn map_outcome(&self, f: impl Fn(i32, f64) -> f64) -> Self {
        let mut out = self.clone();
        for (t, y) in self.years.iter().enumerate() {
            out.outcome[t] = f(y, self.outcome[t]);
        }
        out
    }
}

fn aggregate_indices(panel: &PanelDataset, idx: &[usize], label: String, members: Vec<String>) -> AggregateSeries {
    let k = idx.len() as f64;
    let mean = |var: Variable, year: i32| idx.iter().map(|&u| panel.value(var, u, year)).sum::<f64>() / k;
    let years = panel.years();
    let outcome = years.iter().map(|y| mean(Variable::Outcome, y)).collect();
    let covariates = panel
        .variables()
        .into_iter()
        .skip(1)
        .map(|var| {
            let window = panel.matrix(var).expect("listed").years();
            (var, (window, window.iter().map(|y| mean(var, y)).collect()))
        })
        .collect();
    AggregateSeries {
        label,
        members,
        years,
        outcome,
        covariates,
    }
}

/// Unweighted mean of every variable over `members`, year by year.
pub fn aggregate_region<'a, I>(panel: &PanelDataset, members: I, label: &str) -> Result<AggregateSeries, RegionError>
where
    I: IntoIterator<Item = &'a String>,
{
    let mut ids: Vec<String> = Vec::new();
    let mut idx = Vec::new();
    for id in members {
        if ids.contains(id) {
            continue;
        }
        let u = panel
            .unit_index(id)
            .ok_or_else(|| RegionError::UnknownUnit(id.clone()))?;
        ids.push(id.clone());
        idx.push(u);
    }
    if idx.is_empty() {
        return Err(RegionError::EmptyMemberSet(label.to_string()));
    }
    Ok(aggregate_indices(panel, &idx, label.to_string(), ids))
}
