//! Seeded synthetic trip populations with known conditionals.
//!
//! One input attribute is the *bucket*. Its value is drawn first; every other
//! input is drawn from a bucket-specific distribution when one is given,
//! otherwise from its global marginal. Mode and duration come from the
//! bucket's conditional table, so the ground truth P(choice | bucket) is known.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;
use crate::schema::{AgentProfile, Attribute, Output, TripRecord};

pub const SPEC_VERSION: u32 = 1;

/// Category → probability. Missing categories have probability zero.
pub type Categorical = BTreeMap<String, f64>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported spec_version {0}")]
    UnsupportedVersion(u32),
    #[error("requested {requested} records but only {available} exist")]
    NotEnoughRecords { requested: usize, available: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub spec_version: u32,
    pub size: usize,
    pub seed: u64,
    /// Name of the input attribute whose value selects the conditionals.
    pub bucket_attribute: String,
    /// Attribute name → distribution.
    #[serde(default)]
    pub marginals: BTreeMap<String, Categorical>,
    /// Bucket value → attribute name → distribution.
    #[serde(default)]
    pub bucket_marginals: BTreeMap<String, BTreeMap<String, Categorical>>,
    /// Bucket value → output name → distribution.
    pub conditionals: BTreeMap<String, BTreeMap<String, Categorical>>,
}

/// Weights in schema category order.
fn weights(dist: &Categorical, categories: &[&str], what: &str) -> Result<Vec<f64>, SynthError> {
    if let Some(bad) = dist.keys().find(|k| !categories.contains(&k.as_str())) {
        return Err(SynthError::InvalidSpec(format!("{what}: unknown category {bad:?}")));
    }
    let w: Vec<f64> = categories.iter().map(|c| dist.get(*c).copied().unwrap_or(0.0)).collect();
    if w.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(SynthError::InvalidSpec(format!("{what}: negative or non-finite probability")));
    }
    let sum: f64 = w.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(SynthError::InvalidSpec(format!("{what}: probabilities sum to {sum}")));
    }
    Ok(w)
}

struct Sampler {
    categories: &'static [&'static str],
    index: WeightedIndex<f64>,
}

impl Sampler {
    fn new(dist: &Categorical, categories: &'static [&'static str], what: &str) -> Result<Self, SynthError> {
        let w = weights(dist, categories, what)?;
        let index = WeightedIndex::new(&w).map_err(|e| SynthError::InvalidSpec(format!("{what}: {e}")))?;
        Ok(Self { categories, index })
    }

    fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> &'static str {
        self.categories[self.index.sample(rng)]
    }
}

/// Validated samplers, indexed by bucket category position.
struct Compiled {
    bucket: Attribute,
    bucket_sampler: Sampler,
    /// Per bucket: one sampler per entry of `Attribute::INPUTS` (None for the bucket itself).
    inputs: Vec<Option<Vec<Option<Sampler>>>>,
    outputs: Vec<Option<[Sampler; 2]>>,
}

impl SyntheticSpec {
    fn compile(&self) -> Result<Compiled, SynthError> {
        if self.spec_version != SPEC_VERSION {
            return Err(SynthError::UnsupportedVersion(self.spec_version));
        }
        let bucket = Attribute::from_name(&self.bucket_attribute)
            .ok_or_else(|| SynthError::InvalidSpec(format!("unknown bucket attribute {:?}", self.bucket_attribute)))?;
        for name in self.marginals.keys() {
            if Attribute::from_name(name).is_none() {
                return Err(SynthError::InvalidSpec(format!("unknown attribute {name:?} in marginals")));
            }
        }
        for (b, per) in self.bucket_marginals.iter().chain(&self.conditionals) {
            if !bucket.categories().contains(&b.as_str()) {
                return Err(SynthError::InvalidSpec(format!("unknown bucket value {b:?}")));
            }
            for name in per.keys() {
                if Attribute::from_name(name).is_none() && Output::from_name(name).is_none() {
                    return Err(SynthError::InvalidSpec(format!("unknown field {name:?} for bucket {b:?}")));
                }
            }
        }
        let bucket_dist = self.marginals.get(bucket.name()).ok_or_else(|| {
            SynthError::InvalidSpec(format!("missing marginal for bucket attribute {}", bucket.name()))
        })?;
        let bucket_sampler = Sampler::new(bucket_dist, bucket.categories(), bucket.name())?;
        let bucket_weights = weights(bucket_dist, bucket.categories(), bucket.name())?;

        let mut inputs = Vec::new();
        let mut outputs = Vec::new();
        for (&b, &w) in bucket.categories().iter().zip(&bucket_weights) {
            if w == 0.0 {
                inputs.push(None);
                outputs.push(None);
                continue;
            }
            let overrides = self.bucket_marginals.get(b);
            let mut per_input = Vec::new();
            for attr in Attribute::INPUTS {
                if attr == bucket {
                    per_input.push(None);
                    continue;
                }
                let dist =
                    overrides.and_then(|o| o.get(attr.name())).or_else(|| self.marginals.get(attr.name())).ok_or_else(
                        || SynthError::InvalidSpec(format!("no distribution for {} in bucket {b:?}", attr.name())),
                    )?;
                per_input.push(Some(Sampler::new(dist, attr.categories(), &format!("{}[{b}]", attr.name()))?));
            }
            inputs.push(Some(per_input));
            let cond = self
                .conditionals
                .get(b)
                .ok_or_else(|| SynthError::InvalidSpec(format!("missing conditionals for bucket {b:?}")))?;
            let out = |o: Output| {
                let dist = cond.get(o.name()).ok_or_else(|| {
                    SynthError::InvalidSpec(format!("missing {} conditional for bucket {b:?}", o.name()))
                })?;
                Sampler::new(dist, o.categories(), &format!("{}[{b}]", o.name()))
            };
            outputs.push(Some([out(Output::PrimaryMode)?, out(Output::DurationMinutes)?]));
        }
        Ok(Compiled { bucket, bucket_sampler, inputs, outputs })
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.compile().map(|_| ())
    }

    /// A population where every input dimension is informative about mode
    /// and duration, bucketed on vehicle availability.
    pub fn strong_default(size: usize, seed: u64) -> Self {
        fn d(pairs: &[(&str, f64)]) -> Categorical {
            pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
        }
        let mut marginals = BTreeMap::new();
        marginals.insert(
            "available_vehicles".to_string(),
            d(&[("zero", 0.2), ("one", 0.2), ("two", 0.2), ("three_plus", 0.2), ("unknown_num_vehicles", 0.2)]),
        );
        let mut bucket_marginals = BTreeMap::new();
        let mut conditionals = BTreeMap::new();
        let mut bucket = |name: &str, attrs: [(&str, Categorical); 7], mode: Categorical, duration: Categorical| {
            bucket_marginals.insert(name.to_string(), attrs.into_iter().map(|(k, v)| (k.to_string(), v)).collect());
            let mut c = BTreeMap::new();
            c.insert("primary_mode".to_string(), mode);
            c.insert("duration_minutes".to_string(), duration);
            conditionals.insert(name.to_string(), c);
        };
        bucket(
            "zero",
            [
                ("age_group", d(&[("Under 18", 0.2), ("18-24", 0.5), ("65+", 0.3)])),
                ("income_group", d(&[("Under $10k", 0.6), ("$10k-$50k", 0.4)])),
                ("employment_status", d(&[("under_16", 0.3), ("not_in_labor_force", 0.3), ("unemployed", 0.4)])),
                ("household_size", d(&[("1", 0.6), ("2", 0.4)])),
                ("education", d(&[("no_school", 0.2), ("k_12", 0.3), ("high_school", 0.5)])),
                ("trip_purpose", d(&[("eat", 0.3), ("school", 0.4), ("shop", 0.3)])),
                ("start_time", d(&[("7", 0.3), ("8", 0.4), ("10", 0.3)])),
            ],
            d(&[("walking", 0.5), ("public_transit", 0.5)]),
            d(&[("10-20", 0.5), ("20-30", 0.5)]),
        );
        bucket(
            "one",
            [
                ("age_group", d(&[("18-24", 0.3), ("25-34", 0.7)])),
                ("income_group", d(&[("$10k-$50k", 0.5), ("$50k-$100k", 0.5)])),
                ("employment_status", d(&[("unemployed", 0.2), ("employed", 0.8)])),
                ("household_size", d(&[("2", 0.5), ("3", 0.5)])),
                ("education", d(&[("bachelors_degree", 0.4), ("some_college", 0.6)])),
                ("trip_purpose", d(&[("work", 0.6), ("home", 0.4)])),
                ("start_time", d(&[("8", 0.5), ("17", 0.5)])),
            ],
            d(&[("public_transit", 0.4), ("private_auto", 0.6)]),
            d(&[("20-30", 0.6), ("30-40", 0.4)]),
        );
        bucket(
            "two",
            [
                ("age_group", d(&[("35-44", 0.6), ("45-54", 0.4)])),
                ("income_group", d(&[("$100k-$150k", 0.6), ("$150k-$200k", 0.4)])),
                ("employment_status", d(&[("employed", 1.0)])),
                ("household_size", d(&[("4", 0.6), ("5", 0.4)])),
                ("education", d(&[("bachelors_degree", 0.5), ("advanced_degree", 0.5)])),
                ("trip_purpose", d(&[("work", 0.4), ("shop", 0.3), ("maintenance", 0.3)])),
                ("start_time", d(&[("9", 0.3), ("12", 0.4), ("15", 0.3)])),
            ],
            d(&[("auto_passenger", 0.4), ("private_auto", 0.6)]),
            d(&[("0-10", 0.6), ("10-20", 0.4)]),
        );
        bucket(
            "three_plus",
            [
                ("age_group", d(&[("45-54", 0.5), ("55-64", 0.5)])),
                ("income_group", d(&[("$200k-$300k", 0.5), ("$300k+", 0.5)])),
                ("employment_status", d(&[("not_in_labor_force", 0.3), ("employed", 0.7)])),
                ("household_size", d(&[("6", 0.4), ("7", 0.3), ("8", 0.3)])),
                ("education", d(&[("bachelors_degree", 0.3), ("advanced_degree", 0.7)])),
                ("trip_purpose", d(&[("eat", 0.3), ("social", 0.3), ("recreation", 0.4)])),
                ("start_time", d(&[("18", 0.5), ("19", 0.3), ("20", 0.2)])),
            ],
            d(&[("auto_passenger", 0.3), ("private_auto", 0.7)]),
            d(&[("0-10", 0.7), ("10-20", 0.3)]),
        );
        bucket(
            "unknown_num_vehicles",
            [
                ("age_group", d(&[("55-64", 0.4), ("65+", 0.6)])),
                ("income_group", d(&[("Under $10k", 0.5), ("$50k-$100k", 0.5)])),
                ("employment_status", d(&[("not_in_labor_force", 1.0)])),
                ("household_size", d(&[("1", 0.5), ("2", 0.5)])),
                ("education", d(&[("high_school", 0.5), ("some_college", 0.5)])),
                ("trip_purpose", d(&[("home", 0.4), ("other_activity_type", 0.6)])),
                ("start_time", d(&[("13", 0.5), ("14", 0.5)])),
            ],
            d(&[("walking", 0.5), ("biking", 0.5)]),
            d(&[("40-50", 0.5), ("50-60", 0.5)]),
        );
        Self {
            spec_version: SPEC_VERSION,
            size,
            seed,
            bucket_attribute: "available_vehicles".to_string(),
            marginals,
            bucket_marginals,
            conditionals,
        }
    }

    /// Ground-truth probability of `option` for records in bucket `value`.
    pub fn conditional(&self, value: &str, output: Output, option: &str) -> Option<f64> {
        let dist = self.conditionals.get(value)?.get(output.name())?;
        Some(dist.get(option).copied().unwrap_or(0.0))
    }
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<TripRecord>, SynthError> {
    let compiled = spec.compile()?;
    let mut rng = substream(spec.seed, "synthetic", 0);
    let mut records = Vec::with_capacity(spec.size);
    for _ in 0..spec.size {
        let b = compiled.bucket_sampler.index.sample(&mut rng);
        let (Some(samplers), Some([mode, duration])) = (&compiled.inputs[b], &compiled.outputs[b]) else {
            unreachable!("zero-weight bucket drawn");
        };
        let mut values = [""; 8];
        for (i, attr) in Attribute::INPUTS.iter().enumerate() {
            values[i] = match &samplers[i] {
                Some(s) => s.draw(&mut rng),
                None => compiled.bucket.categories()[b],
            };
            debug_assert!(attr.categories().contains(&values[i]));
        }
        let profile = AgentProfile::from_pairs(Attribute::PROFILE.iter().map(|a| {
            let i = Attribute::INPUTS.iter().position(|x| x == a).unwrap_or(0);
            (a.name(), values[i])
        }))
        .map_err(|e| SynthError::InvalidSpec(e.to_string()))?;
        let purpose = values[6];
        let start_time =
            values[7].parse::<u8>().map_err(|_| SynthError::InvalidSpec(format!("start_time {:?}", values[7])))?;
        records.push(TripRecord {
            profile,
            trip_purpose: purpose,
            start_time,
            primary_mode: mode.draw(&mut rng),
            duration_minutes: duration.draw(&mut rng),
            household: None,
        });
    }
    Ok(records)
}

/// Profiles of `n` synthetic travelers drawn from `spec` with `seed`.
pub fn generate_profiles(n: usize, spec: &SyntheticSpec, seed: u64) -> Result<Vec<AgentProfile>, SynthError> {
    let spec = SyntheticSpec { size: n, seed, ..spec.clone() };
    Ok(generate_synthetic(&spec)?.into_iter().map(|r| r.profile).collect())
}

/// Disjoint seeded random subsets of exact sizes.
pub fn split_reference_validation(
    records: &[TripRecord],
    n_ref: usize,
    n_val: usize,
    seed: u64,
) -> Result<(Vec<TripRecord>, Vec<TripRecord>), SynthError> {
    let requested = n_ref.saturating_add(n_val);
    if requested > records.len() {
        return Err(SynthError::NotEnoughRecords { requested, available: records.len() });
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut substream(seed, "split", 0));
    let pick = |range: core::ops::Range<usize>| order[range].iter().map(|&i| records[i].clone()).collect();
    Ok((pick(0..n_ref), pick(n_ref..requested)))
}
