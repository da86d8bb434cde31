//! Desk-scale mobility simulation.
//!
//! Agents follow a day plan. For every planned trip they pick a mode and a
//! duration bin from the preference chain, search reachable points of
//! interest of the trip's purpose, pick one, and move along the shortest
//! street path. Edge traversals and POI visits are tallied per hour.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write;

use petgraph::graph::{NodeIndex, UnGraph};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::calibration::{GenerationParams, LlmProvider};
use crate::metrics::{kld_cells, MetricsError};
use crate::pipeline::PreferenceChain;
use crate::preference::PreferenceDistribution;
use crate::retrieval::QueryAgent;
use crate::rng::{substream, StreamRng};
use crate::schema::{duration_upper_minutes, AgentProfile, Attribute, Desire, Output, PRIMARY_MODES, TRIP_PURPOSES};

pub const DEFAULT_GRID_SIZE: u32 = 20;
pub const DEFAULT_SPACING_METERS: f64 = 100.0;
pub const DEFAULT_POIS_PER_CATEGORY: u32 = 8;
pub const MINUTES_PER_DAY: u32 = 24 * 60;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MobilityError {
    #[error("invalid city: {0}")]
    InvalidCity(String),
    #[error("street graph is not connected")]
    Disconnected,
    #[error("unknown street node {0}")]
    UnknownNode(u32),
    #[error("no POI of category {0:?}")]
    UnknownCategory(String),
    #[error("no speed for mode {0:?}")]
    UnknownMode(String),
    #[error("invalid day plan: {0}")]
    InvalidPlan(String),
    #[error("tallies cover different cities")]
    AxisMismatch,
    #[error("{what} {id} is not in the city")]
    OutOfRange { what: &'static str, id: u32 },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetNode {
    pub id: u32,
    pub x: f64,
    pub y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreetEdge {
    pub id: u32,
    pub source: u32,
    pub target: u32,
    /// Meters.
    pub length: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: u32,
    /// One of the trip purpose categories.
    pub category: String,
    pub node: u32,
}

/// Serialized form of a [`CityModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CityData {
    pub nodes: Vec<StreetNode>,
    pub edges: Vec<StreetEdge>,
    pub pois: Vec<Poi>,
    /// Mode key → meters per minute.
    pub speeds: BTreeMap<String, f64>,
}

/// Meters per minute for every mode.
pub fn default_speeds() -> BTreeMap<String, f64> {
    [
        ("walking", 80.0),
        ("biking", 250.0),
        ("auto_passenger", 500.0),
        ("public_transit", 400.0),
        ("private_auto", 500.0),
        ("on_demand_auto", 500.0),
        ("other_travel_mode", 250.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// Validated street network with POIs and mode speeds.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(try_from = "CityData", into = "CityData")]
pub struct CityModel {
    data: CityData,
    graph: UnGraph<u32, u32>,
}

impl PartialEq for CityModel {
    fn eq(&self, other: &Self) -> bool {
        self.data == other.data
    }
}

impl From<CityModel> for CityData {
    fn from(city: CityModel) -> Self {
        city.data
    }
}

impl TryFrom<CityData> for CityModel {
    type Error = MobilityError;

    fn try_from(data: CityData) -> Result<Self, MobilityError> {
        CityModel::new(data)
    }
}

impl CityModel {
    pub fn new(data: CityData) -> Result<Self, MobilityError> {
        let invalid = |m: String| Err(MobilityError::InvalidCity(m));
        if data.nodes.is_empty() {
            return invalid("no street nodes".into());
        }
        for (i, n) in data.nodes.iter().enumerate() {
            if n.id as usize != i {
                return invalid(format!("node ids must be 0..n in order, found {} at {i}", n.id));
            }
            if !n.x.is_finite() || !n.y.is_finite() {
                return invalid(format!("node {} has non-finite coordinates", n.id));
            }
        }
        let n = data.nodes.len() as u32;
        let mut graph = UnGraph::with_capacity(data.nodes.len(), data.edges.len());
        for node in &data.nodes {
            graph.add_node(node.id);
        }
        for (i, e) in data.edges.iter().enumerate() {
            if e.id as usize != i {
                return invalid(format!("edge ids must be 0..m in order, found {} at {i}", e.id));
            }
            if e.source >= n || e.target >= n {
                return Err(MobilityError::UnknownNode(e.source.max(e.target)));
            }
            if !(e.length > 0.0 && e.length.is_finite()) {
                return invalid(format!("edge {} has non-positive length", e.id));
            }
            graph.add_edge(NodeIndex::new(e.source as usize), NodeIndex::new(e.target as usize), e.id);
        }
        if petgraph::algo::connected_components(&graph) != 1 {
            return Err(MobilityError::Disconnected);
        }
        for (i, p) in data.pois.iter().enumerate() {
            if p.id as usize != i {
                return invalid(format!("POI ids must be 0..p in order, found {} at {i}", p.id));
            }
            if p.node >= n {
                return Err(MobilityError::UnknownNode(p.node));
            }
            if !TRIP_PURPOSES.contains(&p.category.as_str()) {
                return invalid(format!("POI {} has unknown category {:?}", p.id, p.category));
            }
        }
        for mode in PRIMARY_MODES {
            match data.speeds.get(*mode) {
                Some(s) if *s > 0.0 && s.is_finite() => {}
                Some(_) => return invalid(format!("speed of {mode} must be positive")),
                None => return Err(MobilityError::UnknownMode(mode.to_string())),
            }
        }
        if let Some(extra) = data.speeds.keys().find(|k| !PRIMARY_MODES.contains(&k.as_str())) {
            return Err(MobilityError::UnknownMode(extra.clone()));
        }
        Ok(Self { data, graph })
    }

    pub fn data(&self) -> &CityData {
        &self.data
    }

    pub fn node_count(&self) -> usize {
        self.data.nodes.len()
    }

    pub fn edges(&self) -> &[StreetEdge] {
        &self.data.edges
    }

    pub fn pois(&self) -> &[Poi] {
        &self.data.pois
    }

    pub fn speed(&self, mode: &str) -> Result<f64, MobilityError> {
        self.data.speeds.get(mode).copied().ok_or_else(|| MobilityError::UnknownMode(mode.to_string()))
    }

    fn check_node(&self, node: u32) -> Result<NodeIndex, MobilityError> {
        if (node as usize) < self.data.nodes.len() {
            Ok(NodeIndex::new(node as usize))
        } else {
            Err(MobilityError::UnknownNode(node))
        }
    }

    /// Shortest-path distance in meters from `from` to every node.
    pub fn distances_from(&self, from: u32) -> Result<Vec<f64>, MobilityError> {
        let start = self.check_node(from)?;
        let edges = &self.data.edges;
        let found = petgraph::algo::dijkstra(&self.graph, start, None, |e| edges[*e.weight() as usize].length);
        Ok((0..self.data.nodes.len())
            .map(|i| found.get(&NodeIndex::new(i)).copied().unwrap_or(f64::INFINITY))
            .collect())
    }

    /// Shortest route as (meters, edge ids in travel order).
    pub fn route(&self, from: u32, to: u32) -> Result<(f64, Vec<u32>), MobilityError> {
        let (a, b) = (self.check_node(from)?, self.check_node(to)?);
        let edges = &self.data.edges;
        let (cost, path) =
            petgraph::algo::astar(&self.graph, a, |n| n == b, |e| edges[*e.weight() as usize].length, |_| 0.0)
                .ok_or(MobilityError::Disconnected)?;
        let ids = path
            .windows(2)
            .map(|w| {
                self.graph
                    .edges_connecting(w[0], w[1])
                    .map(|e| *e.weight())
                    .min_by(|x, y| edges[*x as usize].length.total_cmp(&edges[*y as usize].length).then(x.cmp(y)))
                    .unwrap_or_default()
            })
            .collect();
        Ok((cost, ids))
    }
}

/// A `width × height` lattice with `spacing`-meter edges and
/// `pois_per_category` POIs of every purpose on seeded random nodes.
pub fn grid_city(
    width: u32,
    height: u32,
    spacing: f64,
    pois_per_category: u32,
    seed: u64,
) -> Result<CityModel, MobilityError> {
    let at = |x: u32, y: u32| y * width + x;
    let mut nodes = Vec::new();
    let mut edges = Vec::new();
    for y in 0..height {
        for x in 0..width {
            nodes.push(StreetNode { id: at(x, y), x: f64::from(x) * spacing, y: f64::from(y) * spacing });
        }
    }
    for y in 0..height {
        for x in 0..width {
            let mut link = |target: u32| {
                edges.push(StreetEdge { id: edges.len() as u32, source: at(x, y), target, length: spacing })
            };
            if x + 1 < width {
                link(at(x + 1, y));
            }
            if y + 1 < height {
                link(at(x, y + 1));
            }
        }
    }
    let mut rng = substream(seed, "poi-placement", 0);
    let mut pois = Vec::new();
    for category in TRIP_PURPOSES {
        for _ in 0..pois_per_category {
            pois.push(Poi {
                id: pois.len() as u32,
                category: category.to_string(),
                node: rng.random_range(0..width * height),
            });
        }
    }
    CityModel::new(CityData { nodes, edges, pois, speeds: default_speeds() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PlanEntry {
    pub hour: u8,
    pub purpose: &'static str,
}

/// Planned trips in time order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DayPlan {
    entries: Vec<PlanEntry>,
}

impl DayPlan {
    pub fn new(entries: Vec<PlanEntry>) -> Result<Self, MobilityError> {
        for w in entries.windows(2) {
            if w[1].hour <= w[0].hour {
                return Err(MobilityError::InvalidPlan(format!(
                    "hours must strictly increase ({} then {})",
                    w[0].hour, w[1].hour
                )));
            }
        }
        if let Some(e) = entries.iter().find(|e| e.hour > 23) {
            return Err(MobilityError::InvalidPlan(format!("hour {} is past the day", e.hour)));
        }
        if let Some(e) = entries.iter().find(|e| !TRIP_PURPOSES.contains(&e.purpose)) {
            return Err(MobilityError::InvalidPlan(format!("unknown purpose {:?}", e.purpose)));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }
}

pub trait ScheduleProvider: Send + Sync {
    fn id(&self) -> &str;
    fn schedule(&self, profile: &AgentProfile, rng: &mut StreamRng) -> Result<DayPlan, MobilityError>;
}

/// Fixed skeletons keyed on employment and education, with jittered hours.
#[derive(Debug, Clone, Copy, Default)]
pub struct TemplateSchedule;

impl ScheduleProvider for TemplateSchedule {
    fn id(&self) -> &str {
        "template"
    }

    fn schedule(&self, profile: &AgentProfile, rng: &mut StreamRng) -> Result<DayPlan, MobilityError> {
        let e = |hour: u8, purpose: &'static str| PlanEntry { hour, purpose };
        let student = profile.employment_status == "under_16"
            || profile.age_group == "Under 18"
            || (profile.employment_status != "employed" && profile.education == "k_12");
        let entries = if student {
            let school = rng.random_range(7..=8);
            let home = rng.random_range(15..=16);
            alloc::vec![e(school, "school"), e(home, "home")]
        } else if profile.employment_status == "employed" {
            let work = rng.random_range(7..=9);
            let lunch = rng.random_range(12..=13);
            let home = rng.random_range(17..=19);
            alloc::vec![e(work, "work"), e(lunch, "eat"), e(lunch + 1, "work"), e(home, "home")]
        } else {
            const ERRANDS: [&str; 5] = ["shop", "eat", "recreation", "social", "maintenance"];
            let first = ERRANDS[rng.random_range(0..ERRANDS.len())];
            let second = ERRANDS[rng.random_range(0..ERRANDS.len())];
            alloc::vec![
                e(rng.random_range(9..=11), first),
                e(rng.random_range(13..=15), second),
                e(rng.random_range(17..=20), "home"),
            ]
        };
        DayPlan::new(entries)
    }
}

/// Asks a language model for a JSON array of `[hour, purpose]` entries.
pub struct LlmSchedule<'a> {
    pub llm: &'a dyn LlmProvider,
    pub params: GenerationParams,
}

pub fn schedule_prompt(profile: &AgentProfile) -> String {
    let mut p = String::new();
    p.push_str("Plan one weekday of trips for this person.\n");
    let _ = writeln!(p, "Profile: {}", profile.to_text());
    let _ = writeln!(p, "Allowed purposes: {}", TRIP_PURPOSES.join(", "));
    p.push_str(
        "Answer with a single JSON array of [hour, purpose] pairs in increasing hour order, \
         hours 0 to 23, and nothing else.\n",
    );
    p
}

pub fn parse_schedule(raw: &str) -> Result<DayPlan, MobilityError> {
    let bad = |m: &str| MobilityError::InvalidPlan(m.to_string());
    let array = raw
        .match_indices('[')
        .find_map(|(i, _)| {
            let mut stream = serde_json::Deserializer::from_str(&raw[i..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Array(items))) if items.iter().all(|v| v.is_array() || v.is_object()) => Some(items),
                _ => None,
            }
        })
        .ok_or_else(|| bad("no JSON array of entries"))?;
    let mut entries = Vec::new();
    for item in &array {
        let (hour, purpose) = match item {
            Value::Array(pair) if pair.len() == 2 => (pair[0].as_u64(), pair[1].as_str()),
            Value::Object(map) => (map.get("hour").and_then(Value::as_u64), map.get("purpose").and_then(Value::as_str)),
            _ => (None, None),
        };
        let hour = hour.filter(|h| *h <= 23).ok_or_else(|| bad("entry without a valid hour"))?;
        let purpose = Attribute::TripPurpose
            .parse(purpose.ok_or_else(|| bad("entry without a purpose"))?)
            .map_err(|_| bad("unknown purpose"))?;
        entries.push(PlanEntry { hour: hour as u8, purpose });
    }
    DayPlan::new(entries)
}

impl ScheduleProvider for LlmSchedule<'_> {
    fn id(&self) -> &str {
        self.llm.id()
    }

    fn schedule(&self, profile: &AgentProfile, _: &mut StreamRng) -> Result<DayPlan, MobilityError> {
        let raw = self
            .llm
            .complete(&schedule_prompt(profile), &self.params)
            .map_err(|e| MobilityError::InvalidPlan(e.to_string()))?;
        parse_schedule(&raw)
    }
}

/// The provider's plan, or the template plan when the provider fails.
pub fn generate_schedule(profile: &AgentProfile, provider: &dyn ScheduleProvider, seed: u64, agent: u32) -> DayPlan {
    let mut rng = substream(seed, "schedule", u64::from(agent));
    provider.schedule(profile, &mut rng).unwrap_or_else(|_| {
        let mut rng = substream(seed, "schedule-fallback", u64::from(agent));
        TemplateSchedule.schedule(profile, &mut rng).unwrap_or(DayPlan { entries: Vec::new() })
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Depart,
    Arrive,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemoryEvent {
    pub minute: u32,
    pub kind: EventKind,
    pub activity: &'static str,
    pub node: u32,
    pub poi: Option<u32>,
    pub mode: Option<&'static str>,
    pub duration: Option<&'static str>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgentState {
    pub id: u32,
    pub profile: AgentProfile,
    pub home: u32,
    /// Purpose → POI id, for purposes visited at a fixed place.
    pub important: BTreeMap<String, u32>,
    memory: Vec<MemoryEvent>,
    pub node: u32,
    minute: u32,
}

impl AgentState {
    pub fn new(id: u32, profile: AgentProfile, home: u32) -> Self {
        Self { id, profile, home, important: BTreeMap::new(), memory: Vec::new(), node: home, minute: 0 }
    }

    pub fn memory(&self) -> &[MemoryEvent] {
        &self.memory
    }

    pub fn minute(&self) -> u32 {
        self.minute
    }

    fn remember(&mut self, event: MemoryEvent) {
        self.minute = self.minute.max(event.minute);
        self.memory.push(event);
    }

    fn advance_to(&mut self, minute: u32) {
        self.minute = self.minute.max(minute);
    }
}

/// One agent per profile, each at a seeded random home node.
pub fn spawn_agents(profiles: &[AgentProfile], city: &CityModel, seed: u64) -> Vec<AgentState> {
    profiles
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let home = substream(seed, "home", i as u64).random_range(0..city.node_count() as u32);
            AgentState::new(i as u32, *p, home)
        })
        .collect()
}

/// Samples mode then duration from the calibrated chain output and records
/// the departure.
pub fn choose_mode_and_duration(
    agent: &mut AgentState,
    purpose: &'static str,
    hour: u8,
    chain: &PreferenceChain<'_>,
    context: &str,
    rng: &mut StreamRng,
) -> (&'static str, &'static str) {
    let desire = Desire { trip_purpose: purpose, start_time: hour.min(23) };
    let mut query = QueryAgent::new(agent.profile, desire);
    query.context = context.to_string();
    let dists: Vec<PreferenceDistribution> = match chain.predict(&query, &Output::ALL) {
        Ok(p) => p.outputs.into_iter().map(|o| o.calibration.posterior).collect(),
        Err(_) => Output::ALL.iter().map(|o| PreferenceDistribution::degenerate_uniform(o.choice_set())).collect(),
    };
    let mode = Output::PrimaryMode.parse(dists[0].sample(rng)).unwrap_or(PRIMARY_MODES[0]);
    let duration = Output::DurationMinutes.parse(dists[1].sample(rng)).unwrap_or(crate::schema::DURATION_BINS[0]);
    let event = MemoryEvent {
        minute: agent.minute,
        kind: EventKind::Depart,
        activity: purpose,
        node: agent.node,
        poi: None,
        mode: Some(mode),
        duration: Some(duration),
    };
    agent.remember(event);
    (mode, duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PoiCandidate {
    pub poi: u32,
    pub distance: f64,
}

/// POIs of `category` whose shortest-path distance from `from` is within
/// `speed(mode) × upper bound of the duration bin`, nearest first.
pub fn search_pois(
    city: &CityModel,
    from: u32,
    category: &str,
    mode: &str,
    duration: &str,
) -> Result<Vec<PoiCandidate>, MobilityError> {
    let radius = city.speed(mode)?
        * f64::from(
            duration_upper_minutes(duration)
                .ok_or_else(|| MobilityError::InvalidPlan(format!("unknown duration bin {duration:?}")))?,
        );
    Ok(pois_by_distance(city, from, category)?.into_iter().filter(|c| c.distance <= radius).collect())
}

fn pois_by_distance(city: &CityModel, from: u32, category: &str) -> Result<Vec<PoiCandidate>, MobilityError> {
    if !city.pois().iter().any(|p| p.category == category) {
        return Err(MobilityError::UnknownCategory(category.to_string()));
    }
    let dist = city.distances_from(from)?;
    let mut found: Vec<PoiCandidate> = city
        .pois()
        .iter()
        .filter(|p| p.category == category)
        .map(|p| PoiCandidate { poi: p.id, distance: dist[p.node as usize] })
        .collect();
    found.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.poi.cmp(&b.poi)));
    Ok(found)
}

pub fn poi_prompt(candidates: &[PoiCandidate], agent: &AgentState, purpose: &str) -> String {
    let mut p = String::new();
    p.push_str("Choose the destination for this person's next trip.\n");
    let _ = writeln!(p, "Profile: {}", agent.profile.to_text());
    let _ = writeln!(p, "Purpose: {purpose}");
    p.push_str("Recent activity:\n");
    for e in agent.memory.iter().rev().take(6).rev() {
        let _ = writeln!(p, "- minute {}: {:?} {} at node {}", e.minute, e.kind, e.activity, e.node);
    }
    p.push_str("Candidates:\n");
    for c in candidates {
        let _ = writeln!(p, "- id {}: {:.0} m", c.poi, c.distance);
    }
    p.push_str("Answer with the id of exactly one candidate and nothing else.\n");
    p
}

/// Candidate named by the provider; the nearest one when the answer does not
/// name a candidate. `candidates` must be non-empty and nearest first.
pub fn select_poi(
    candidates: &[PoiCandidate],
    agent: &AgentState,
    purpose: &str,
    llm: &dyn LlmProvider,
    params: &GenerationParams,
) -> u32 {
    let nearest = candidates.first().map(|c| c.poi).unwrap_or_default();
    let Ok(raw) = llm.complete(&poi_prompt(candidates, agent, purpose), params) else {
        return nearest;
    };
    raw.split(|c: char| !c.is_ascii_digit())
        .find(|t| !t.is_empty())
        .and_then(|t| t.parse::<u32>().ok())
        .filter(|id| candidates.iter().any(|c| c.poi == *id))
        .unwrap_or(nearest)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Destination {
    pub node: u32,
    pub poi: Option<u32>,
}

const FIXED_PLACES: [&str; 2] = ["work", "school"];

/// Where the next trip goes. `None` when the city has no POI of the purpose.
pub fn select_destination(
    agent: &mut AgentState,
    purpose: &'static str,
    mode: &str,
    duration: &str,
    city: &CityModel,
    llm: &dyn LlmProvider,
    params: &GenerationParams,
) -> Result<Option<Destination>, MobilityError> {
    if purpose == "home" {
        return Ok(Some(Destination { node: agent.home, poi: None }));
    }
    let poi_node = |id: u32| city.pois()[id as usize].node;
    if let Some(&id) = agent.important.get(purpose) {
        return Ok(Some(Destination { node: poi_node(id), poi: Some(id) }));
    }
    let mut candidates = match search_pois(city, agent.node, purpose, mode, duration) {
        Ok(c) => c,
        Err(MobilityError::UnknownCategory(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    if candidates.is_empty() {
        candidates = pois_by_distance(city, agent.node, purpose)?;
        candidates.truncate(1);
    }
    let id = select_poi(&candidates, agent, purpose, llm, params);
    if FIXED_PLACES.contains(&purpose) {
        agent.important.insert(purpose.to_string(), id);
    }
    Ok(Some(Destination { node: poi_node(id), poi: Some(id) }))
}

/// Per-hour edge traversal and POI visit counts over one city.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficTally {
    edge_count: u32,
    poi_count: u32,
    edges: BTreeMap<(u32, u8), u64>,
    pois: BTreeMap<(u32, u8), u64>,
}

impl TrafficTally {
    pub fn new(city: &CityModel) -> Self {
        Self {
            edge_count: city.edges().len() as u32,
            poi_count: city.pois().len() as u32,
            edges: BTreeMap::new(),
            pois: BTreeMap::new(),
        }
    }

    pub fn add_traversal(&mut self, edge: u32, hour: u8) {
        *self.edges.entry((edge, hour)).or_insert(0) += 1;
    }

    pub fn add_visit(&mut self, poi: u32, hour: u8) {
        *self.pois.entry((poi, hour)).or_insert(0) += 1;
    }

    /// Adds `count` traversals, checking the edge id and hour.
    pub fn add_edge_count(&mut self, edge: u32, hour: u8, count: u64) -> Result<(), MobilityError> {
        check_cell("edge", edge, self.edge_count, hour)?;
        if count > 0 {
            *self.edges.entry((edge, hour)).or_insert(0) += count;
        }
        Ok(())
    }

    /// Adds `count` visits, checking the POI id and hour.
    pub fn add_poi_count(&mut self, poi: u32, hour: u8, count: u64) -> Result<(), MobilityError> {
        check_cell("poi", poi, self.poi_count, hour)?;
        if count > 0 {
            *self.pois.entry((poi, hour)).or_insert(0) += count;
        }
        Ok(())
    }

    /// Adds `other` into `self`. Merging is commutative and associative.
    pub fn merge(&mut self, other: &TrafficTally) -> Result<(), MobilityError> {
        if (self.edge_count, self.poi_count) != (other.edge_count, other.poi_count) {
            return Err(MobilityError::AxisMismatch);
        }
        for (k, v) in &other.edges {
            *self.edges.entry(*k).or_insert(0) += v;
        }
        for (k, v) in &other.pois {
            *self.pois.entry(*k).or_insert(0) += v;
        }
        Ok(())
    }

    /// `(edge id, hour, count)` for every non-zero cell, ascending.
    pub fn edge_rows(&self) -> impl Iterator<Item = (u32, u8, u64)> + '_ {
        self.edges.iter().map(|(&(e, h), &c)| (e, h, c))
    }

    /// `(poi id, hour, count)` for every non-zero cell, ascending.
    pub fn poi_rows(&self) -> impl Iterator<Item = (u32, u8, u64)> + '_ {
        self.pois.iter().map(|(&(p, h), &c)| (p, h, c))
    }

    pub fn total_traversals(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn total_visits(&self) -> u64 {
        self.pois.values().sum()
    }

    /// Hour-summed traversals per edge id.
    pub fn edge_totals(&self) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.edge_count as usize];
        for (&(e, _), &c) in &self.edges {
            v[e as usize] += c as f64;
        }
        v
    }

    /// Hour-summed visits per POI id.
    pub fn poi_totals(&self) -> Vec<f64> {
        let mut v = alloc::vec![0.0; self.poi_count as usize];
        for (&(p, _), &c) in &self.pois {
            v[p as usize] += c as f64;
        }
        v
    }
}

fn check_cell(what: &'static str, id: u32, len: u32, hour: u8) -> Result<(), MobilityError> {
    if id >= len {
        return Err(MobilityError::OutOfRange { what, id });
    }
    if hour > 23 {
        return Err(MobilityError::OutOfRange { what: "hour", id: u32::from(hour) });
    }
    Ok(())
}

/// KLD of the reference edge-flow distribution from the simulated one.
pub fn flow_kld(sim: &TrafficTally, reference: &TrafficTally, epsilon: f64) -> Result<f64, MobilityError> {
    if sim.edge_count != reference.edge_count {
        return Err(MobilityError::AxisMismatch);
    }
    Ok(kld_cells(&reference.edge_totals(), &sim.edge_totals(), epsilon)?)
}

/// KLD of the reference POI-visit distribution from the simulated one.
pub fn visit_kld(sim: &TrafficTally, reference: &TrafficTally, epsilon: f64) -> Result<f64, MobilityError> {
    if sim.poi_count != reference.poi_count {
        return Err(MobilityError::AxisMismatch);
    }
    Ok(kld_cells(&reference.poi_totals(), &sim.poi_totals(), epsilon)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TripLog {
    pub agent: u32,
    pub purpose: &'static str,
    pub depart_minute: u32,
    pub arrive_minute: u32,
    pub mode: &'static str,
    pub duration: &'static str,
    pub from: u32,
    pub to: u32,
    pub poi: Option<u32>,
    pub edges: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentDay {
    pub tally: TrafficTally,
    pub trips: Vec<TripLog>,
}

/// Everything shared by the agents of one simulated day.
pub struct SimulationContext<'a> {
    pub city: &'a CityModel,
    pub chain: &'a PreferenceChain<'a>,
    pub llm: &'a dyn LlmProvider,
    pub params: GenerationParams,
    /// Free-text conditions passed to calibration.
    pub context: String,
    pub seed: u64,
}

/// Runs one agent's plan. Depends only on the agent, its plan and `ctx`.
pub fn simulate_agent(
    agent: &mut AgentState,
    plan: &DayPlan,
    ctx: &SimulationContext<'_>,
) -> Result<AgentDay, MobilityError> {
    let mut rng = substream(ctx.seed, "agent", u64::from(agent.id));
    let mut tally = TrafficTally::new(ctx.city);
    let mut trips = Vec::new();
    for entry in plan.entries() {
        agent.advance_to(u32::from(entry.hour) * 60);
        let depart = agent.minute;
        let (mode, duration) =
            choose_mode_and_duration(agent, entry.purpose, entry.hour, ctx.chain, &ctx.context, &mut rng);
        let Some(dest) = select_destination(agent, entry.purpose, mode, duration, ctx.city, ctx.llm, &ctx.params)?
        else {
            continue;
        };
        let (meters, edges) = ctx.city.route(agent.node, dest.node)?;
        let travel = libm::ceil(meters / ctx.city.speed(mode)?) as u32;
        let hour = (depart / 60).min(23) as u8;
        for &e in &edges {
            tally.add_traversal(e, hour);
        }
        let arrive = depart + travel;
        if let Some(poi) = dest.poi {
            tally.add_visit(poi, (arrive / 60).min(23) as u8);
        }
        trips.push(TripLog {
            agent: agent.id,
            purpose: entry.purpose,
            depart_minute: depart,
            arrive_minute: arrive,
            mode,
            duration,
            from: agent.node,
            to: dest.node,
            poi: dest.poi,
            edges,
        });
        agent.node = dest.node;
        agent.remember(MemoryEvent {
            minute: arrive,
            kind: EventKind::Arrive,
            activity: entry.purpose,
            node: dest.node,
            poi: dest.poi,
            mode: Some(mode),
            duration: Some(duration),
        });
    }
    Ok(AgentDay { tally, trips })
}

/// Runs every agent in order and merges their tallies.
pub fn run_day(
    agents: &mut [AgentState],
    plans: &[DayPlan],
    ctx: &SimulationContext<'_>,
) -> Result<AgentDay, MobilityError> {
    let mut total = AgentDay { tally: TrafficTally::new(ctx.city), trips: Vec::new() };
    for (agent, plan) in agents.iter_mut().zip(plans) {
        let day = simulate_agent(agent, plan, ctx)?;
        total.tally.merge(&day.tally)?;
        total.trips.extend(day.trips);
    }
    Ok(total)
}
