//! Categorized trip schema: traveler attributes, trip context, and the two
//! output choice families (primary mode and duration bin).
//!
//! All categorical values are interned as `&'static str` slices pointing into
//! the category tables below, so a constructed [`AgentProfile`] or
//! [`TripRecord`] is valid by construction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const AGE_GROUPS: &[&str] = &["Under 18", "18-24", "25-34", "35-44", "45-54", "55-64", "65+"];
pub const INCOME_GROUPS: &[&str] =
    &["Under $10k", "$10k-$50k", "$50k-$100k", "$100k-$150k", "$150k-$200k", "$200k-$300k", "$300k+"];
pub const EMPLOYMENT_STATUSES: &[&str] = &["under_16", "not_in_labor_force", "unemployed", "employed"];
pub const HOUSEHOLD_SIZES: &[&str] = &["1", "2", "3", "4", "5", "6", "7", "8"];
pub const AVAILABLE_VEHICLES: &[&str] = &["zero", "one", "two", "three_plus", "unknown_num_vehicles"];
pub const EDUCATION_LEVELS: &[&str] =
    &["no_school", "k_12", "high_school", "bachelors_degree", "advanced_degree", "some_college"];
pub const TRIP_PURPOSES: &[&str] =
    &["eat", "work", "home", "school", "shop", "maintenance", "social", "recreation", "other_activity_type"];
pub const START_HOURS: &[&str] = &[
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "10", "11", "12", "13", "14", "15", "16", "17", "18", "19", "20",
    "21", "22", "23",
];
pub const PRIMARY_MODES: &[&str] =
    &["walking", "biking", "auto_passenger", "public_transit", "private_auto", "on_demand_auto", "other_travel_mode"];
pub const DURATION_BINS: &[&str] = &["0-10", "10-20", "20-30", "30-40", "40-50", "50-60"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("invalid value {value:?} for column {column}")]
    InvalidValue { column: String, value: String },
    #[error("missing field {0}")]
    MissingField(String),
    #[error("unknown field {0}")]
    UnknownField(String),
    #[error("choice set {0:?} is empty")]
    EmptyChoiceSet(String),
    #[error("choice set {set:?} repeats option {option:?}")]
    DuplicateOption { set: String, option: String },
}

/// Input attributes, in canonical column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    AgeGroup,
    IncomeGroup,
    EmploymentStatus,
    HouseholdSize,
    AvailableVehicles,
    Education,
    TripPurpose,
    StartTime,
}

impl Attribute {
    /// The six traveler attributes that make up a profile.
    pub const PROFILE: [Attribute; 6] = [
        Attribute::AgeGroup,
        Attribute::IncomeGroup,
        Attribute::EmploymentStatus,
        Attribute::HouseholdSize,
        Attribute::AvailableVehicles,
        Attribute::Education,
    ];

    /// All input attributes: profile plus trip context.
    pub const INPUTS: [Attribute; 8] = [
        Attribute::AgeGroup,
        Attribute::IncomeGroup,
        Attribute::EmploymentStatus,
        Attribute::HouseholdSize,
        Attribute::AvailableVehicles,
        Attribute::Education,
        Attribute::TripPurpose,
        Attribute::StartTime,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::AgeGroup => "age_group",
            Attribute::IncomeGroup => "income_group",
            Attribute::EmploymentStatus => "employment_status",
            Attribute::HouseholdSize => "household_size",
            Attribute::AvailableVehicles => "available_vehicles",
            Attribute::Education => "education",
            Attribute::TripPurpose => "trip_purpose",
            Attribute::StartTime => "start_time",
        }
    }

    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Attribute::AgeGroup => AGE_GROUPS,
            Attribute::IncomeGroup => INCOME_GROUPS,
            Attribute::EmploymentStatus => EMPLOYMENT_STATUSES,
            Attribute::HouseholdSize => HOUSEHOLD_SIZES,
            Attribute::AvailableVehicles => AVAILABLE_VEHICLES,
            Attribute::Education => EDUCATION_LEVELS,
            Attribute::TripPurpose => TRIP_PURPOSES,
            Attribute::StartTime => START_HOURS,
        }
    }

    pub fn from_name(name: &str) -> Option<Attribute> {
        Attribute::INPUTS.iter().copied().find(|a| a.name() == name)
    }

    /// Interns `value` if it is one of this attribute's categories.
    pub fn parse(self, value: &str) -> Result<&'static str, SchemaError> {
        intern(self.categories(), self.name(), value)
    }
}

/// The two output choice families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    PrimaryMode,
    DurationMinutes,
}

impl Output {
    pub const ALL: [Output; 2] = [Output::PrimaryMode, Output::DurationMinutes];

    pub fn name(self) -> &'static str {
        match self {
            Output::PrimaryMode => "primary_mode",
            Output::DurationMinutes => "duration_minutes",
        }
    }

    pub fn categories(self) -> &'static [&'static str] {
        match self {
            Output::PrimaryMode => PRIMARY_MODES,
            Output::DurationMinutes => DURATION_BINS,
        }
    }

    pub fn from_name(name: &str) -> Option<Output> {
        Output::ALL.iter().copied().find(|o| o.name() == name)
    }

    pub fn parse(self, value: &str) -> Result<&'static str, SchemaError> {
        intern(self.categories(), self.name(), value)
    }

    pub fn choice_set(self) -> ChoiceCategorySet {
        ChoiceCategorySet::from_static(self.name(), self.categories())
    }
}

fn intern(table: &'static [&'static str], column: &str, value: &str) -> Result<&'static str, SchemaError> {
    table
        .iter()
        .copied()
        .find(|c| *c == value)
        .ok_or_else(|| SchemaError::InvalidValue { column: column.to_string(), value: value.to_string() })
}

/// Upper bound of a duration bin in minutes (`"20-30"` → 30).
pub fn duration_upper_minutes(bin: &str) -> Option<u32> {
    bin.split('-').nth(1).and_then(|s| s.parse().ok())
}

/// A named, ordered set of mutually exclusive options.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceCategorySet {
    name: String,
    options: Vec<String>,
}

impl ChoiceCategorySet {
    pub fn new(name: impl Into<String>, options: Vec<String>) -> Result<Self, SchemaError> {
        let name = name.into();
        if options.is_empty() {
            return Err(SchemaError::EmptyChoiceSet(name));
        }
        for (i, opt) in options.iter().enumerate() {
            if options[..i].contains(opt) {
                return Err(SchemaError::DuplicateOption { set: name, option: opt.clone() });
            }
        }
        Ok(Self { name, options })
    }

    fn from_static(name: &str, options: &[&str]) -> Self {
        Self { name: name.to_string(), options: options.iter().map(|s| s.to_string()).collect() }
    }

    pub fn primary_mode() -> Self {
        Output::PrimaryMode.choice_set()
    }

    pub fn duration_minutes() -> Self {
        Output::DurationMinutes.choice_set()
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn options(&self) -> &[String] {
        &self.options
    }

    pub fn len(&self) -> usize {
        self.options.len()
    }

    pub fn is_empty(&self) -> bool {
        self.options.is_empty()
    }

    pub fn index_of(&self, option: &str) -> Option<usize> {
        self.options.iter().position(|o| o == option)
    }

    pub fn contains(&self, option: &str) -> bool {
        self.index_of(option).is_some()
    }
}

/// Categorized demographic profile of one traveler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(into = "BTreeMap<String, String>")]
pub struct AgentProfile {
    pub age_group: &'static str,
    pub income_group: &'static str,
    pub employment_status: &'static str,
    pub household_size: &'static str,
    pub available_vehicles: &'static str,
    pub education: &'static str,
}

impl AgentProfile {
    /// Builds a profile from `(attribute name, value)` pairs. Every profile
    /// attribute must be present exactly once; unknown names are rejected.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self, SchemaError>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut slots: [Option<&'static str>; 6] = [None; 6];
        for (name, value) in pairs {
            let pos = Attribute::PROFILE
                .iter()
                .position(|a| a.name() == name)
                .ok_or_else(|| SchemaError::UnknownField(name.to_string()))?;
            slots[pos] = Some(Attribute::PROFILE[pos].parse(value)?);
        }
        let get =
            |i: usize| slots[i].ok_or_else(|| SchemaError::MissingField(Attribute::PROFILE[i].name().to_string()));
        Ok(Self {
            age_group: get(0)?,
            income_group: get(1)?,
            employment_status: get(2)?,
            household_size: get(3)?,
            available_vehicles: get(4)?,
            education: get(5)?,
        })
    }

    /// Value of a profile attribute; `None` for trip-context attributes.
    pub fn get(&self, attribute: Attribute) -> Option<&'static str> {
        match attribute {
            Attribute::AgeGroup => Some(self.age_group),
            Attribute::IncomeGroup => Some(self.income_group),
            Attribute::EmploymentStatus => Some(self.employment_status),
            Attribute::HouseholdSize => Some(self.household_size),
            Attribute::AvailableVehicles => Some(self.available_vehicles),
            Attribute::Education => Some(self.education),
            Attribute::TripPurpose | Attribute::StartTime => None,
        }
    }

    pub fn values(&self) -> [&'static str; 6] {
        [
            self.age_group,
            self.income_group,
            self.employment_status,
            self.household_size,
            self.available_vehicles,
            self.education,
        ]
    }

    /// Canonical `key: value` rendering in schema order.
    pub fn to_text(&self) -> String {
        profile_to_text(self)
    }
}

impl TryFrom<BTreeMap<String, String>> for AgentProfile {
    type Error = SchemaError;

    fn try_from(map: BTreeMap<String, String>) -> Result<Self, Self::Error> {
        AgentProfile::from_pairs(map.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }
}

// Hand-written: derived impls of types holding `&'static str` require
// `'de: 'static`.
impl<'de> Deserialize<'de> for AgentProfile {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, String>::deserialize(deserializer)?;
        AgentProfile::try_from(map).map_err(serde::de::Error::custom)
    }
}

impl From<AgentProfile> for BTreeMap<String, String> {
    fn from(p: AgentProfile) -> Self {
        Attribute::PROFILE.iter().zip(p.values()).map(|(a, v)| (a.name().to_string(), v.to_string())).collect()
    }
}

/// Canonical, order-stable rendering of a profile. Equal profiles render to
/// equal strings.
pub fn profile_to_text(profile: &AgentProfile) -> String {
    let mut out = String::new();
    for (i, (attr, value)) in Attribute::PROFILE.iter().zip(profile.values()).enumerate() {
        if i > 0 {
            out.push_str("; ");
        }
        out.push_str(attr.name());
        out.push_str(": ");
        out.push_str(value);
    }
    out
}

/// A travel need: what the trip is for and when it starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct Desire {
    pub trip_purpose: &'static str,
    pub start_time: u8,
}

impl Desire {
    pub fn new(trip_purpose: &str, start_time: u8) -> Result<Self, SchemaError> {
        if start_time > 23 {
            return Err(SchemaError::InvalidValue { column: "start_time".to_string(), value: start_time.to_string() });
        }
        Ok(Self { trip_purpose: Attribute::TripPurpose.parse(trip_purpose)?, start_time })
    }

    pub fn text(&self) -> String {
        format!("purpose: {}; start_time: {}", self.trip_purpose, self.start_time)
    }
}

#[derive(Deserialize)]
struct RawDesire {
    trip_purpose: String,
    start_time: u8,
}

impl<'de> Deserialize<'de> for Desire {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = RawDesire::deserialize(deserializer)?;
        Desire::try_from(raw).map_err(serde::de::Error::custom)
    }
}

impl TryFrom<RawDesire> for Desire {
    type Error = SchemaError;

    fn try_from(raw: RawDesire) -> Result<Self, Self::Error> {
        Desire::new(&raw.trip_purpose, raw.start_time)
    }
}

/// One categorized trip observation: who travelled, why and when, and what
/// they chose.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TripRecord {
    pub profile: AgentProfile,
    pub trip_purpose: &'static str,
    pub start_time: u8,
    pub primary_mode: &'static str,
    pub duration_minutes: &'static str,
    /// Explicit household/link key; records sharing a key are relatives.
    pub household: Option<String>,
}

impl TripRecord {
    pub fn desire(&self) -> Desire {
        Desire { trip_purpose: self.trip_purpose, start_time: self.start_time }
    }

    pub fn choice(&self, output: Output) -> &'static str {
        match output {
            Output::PrimaryMode => self.primary_mode,
            Output::DurationMinutes => self.duration_minutes,
        }
    }

    /// Value of any input attribute, rendered as its category string.
    pub fn input(&self, attribute: Attribute) -> &'static str {
        match attribute {
            Attribute::TripPurpose => self.trip_purpose,
            Attribute::StartTime => START_HOURS[usize::from(self.start_time.min(23))],
            other => self.profile.get(other).unwrap_or_default(),
        }
    }

    /// Re-checks every field against the category tables. Records built by
    /// hand can carry values that did not come from the tables.
    pub fn validate(&self) -> Result<(), SchemaError> {
        for attr in Attribute::PROFILE {
            let value = self.profile.get(attr).unwrap_or_default();
            attr.parse(value)?;
        }
        Attribute::TripPurpose.parse(self.trip_purpose)?;
        if self.start_time > 23 {
            return Err(SchemaError::InvalidValue {
                column: "start_time".to_string(),
                value: self.start_time.to_string(),
            });
        }
        Output::PrimaryMode.parse(self.primary_mode)?;
        Output::DurationMinutes.parse(self.duration_minutes)?;
        Ok(())
    }
}
