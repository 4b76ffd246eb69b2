//! Scenario files: TOML with one table per module and ordered arrays of
//! tables for the scripted parts. Unknown keys are rejected everywhere.
//!
//! ```toml
//! [scenario]
//! name = "example"
//! seed = 7
//!
//! [ledger]
//! accounts = ["alice", "bob", "ops"]
//! mint = [{ account = "alice", class = "credit", amount = 100 }]
//!
//! [data_market]
//! threshold = "1/2"
//! initiator_endowment = 0
//!
//! [simnet]
//! bandwidth = 125000000
//!
//! [[workers]]
//! owner = "ops"
//! trusted = true
//!
//! [[databases]]
//! name = "images"
//! initiator = "alice"
//!
//! [[actions]]
//! kind = "propose"
//! id = "p1"
//! contributor = "bob"
//! database = "images"
//! dataset = "bob/images-v1"
//!
//! [[jobs]]
//! name = "train"
//! user = "alice"
//! database = "images"
//! layers = [8, 16, 4]
//! epochs = 2
//! batch_size = 8
//! shards = 20
//! price = 100
//!
//! [[faults]]
//! kind = "corrupt_result"
//! job = "train"
//! group = 1
//! epoch = 0
//! step = 3
//! ```
//!
//! Fractions are strings (`"1/20"` or `"0.05"`) so they stay exact.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;
use thiserror::Error;

use crate::fraction::{parse_fraction, Fraction};
use crate::ledger::TokenClass;
use crate::model_split::{validate_cut_points, Activation, Loss, ModelSpec};
use crate::simnet::{FaultKind, LatencyModel};

/// Names taken by the system accounts.
pub const RESERVED_ACCOUNTS: [&str; 2] = ["treasury", "escrow"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScenarioError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario: Meta,
    #[serde(default)]
    pub ledger: LedgerSection,
    #[serde(default)]
    pub data_market: DataMarketSection,
    #[serde(default)]
    pub compute_market: ComputeMarketSection,
    #[serde(default)]
    pub simnet: SimnetSection,
    #[serde(default)]
    pub workers: Vec<WorkerDef>,
    #[serde(default)]
    pub databases: Vec<DatabaseDef>,
    #[serde(default)]
    pub actions: Vec<Action>,
    #[serde(default)]
    pub jobs: Vec<JobDef>,
    #[serde(default)]
    pub faults: Vec<FaultDef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Meta {
    pub name: String,
    pub seed: u64,
    #[serde(default)]
    pub description: String,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedgerSection {
    #[serde(default)]
    pub accounts: Vec<String>,
    #[serde(default)]
    pub mint: Vec<MintDef>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MintDef {
    pub account: String,
    pub class: String,
    pub amount: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMarketSection {
    pub threshold: Option<String>,
    #[serde(default)]
    pub initiator_endowment: u64,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeMarketSection {
    /// Default exposure cap for jobs that do not set one.
    pub exposure_cap: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimnetSection {
    pub bandwidth: Option<u64>,
    pub per_message_fixed_ns: Option<u64>,
    pub sgx_scheduling_overhead_ns: Option<u64>,
}

impl SimnetSection {
    pub fn latency(&self) -> LatencyModel {
        let d = LatencyModel::default();
        LatencyModel {
            bandwidth: self.bandwidth.unwrap_or(d.bandwidth),
            per_message_fixed_ns: self.per_message_fixed_ns.unwrap_or(d.per_message_fixed_ns),
            sgx_scheduling_overhead_ns: self
                .sgx_scheduling_overhead_ns
                .unwrap_or(d.sgx_scheduling_overhead_ns),
        }
    }
}

fn one() -> u32 {
    1
}

fn default_rate() -> f64 {
    1000.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerDef {
    pub owner: String,
    #[serde(default)]
    pub trusted: bool,
    #[serde(default = "one")]
    pub count: u32,
    /// Work units per simulated second.
    #[serde(default = "default_rate")]
    pub rate: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatabaseDef {
    pub name: String,
    pub initiator: String,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub expected_shards: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    Propose {
        id: String,
        contributor: String,
        database: String,
        /// Content label; the dataset reference is its SHA-256.
        dataset: String,
    },
    Delegate {
        from: String,
        to: String,
        expiry: u64,
    },
    Vote {
        proposal: String,
        voters: Vec<String>,
        approve: bool,
    },
    Finalize {
        proposal: String,
    },
    Transfer {
        class: String,
        from: String,
        to: String,
        amount: u64,
    },
}

fn default_lr() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobDef {
    pub name: String,
    pub user: String,
    pub database: String,
    pub layers: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub loss: Loss,
    pub init_seed: Option<u64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub shards: usize,
    pub price: u64,
    /// ρ, the data side's share of the price.
    pub data_share: Option<String>,
    #[serde(default)]
    pub tmr: bool,
    #[serde(default)]
    pub cut_points: Vec<usize>,
    pub exposure_cap: Option<String>,
}

/// A fault on a worker given by id, or by its slot in a job's first plan.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultDef {
    pub kind: FaultKind,
    pub epoch: u32,
    pub step: u32,
    pub worker: Option<u32>,
    pub job: Option<String>,
    #[serde(default)]
    pub group: usize,
    #[serde(default)]
    pub segment: usize,
    #[serde(default)]
    pub block: usize,
}

/// 1-based (line, column) of a byte offset.
fn locate(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

pub fn parse_class(s: &str) -> Result<TokenClass, ScenarioError> {
    s.parse()
        .map_err(|_| ScenarioError::Validation(format!("unknown token class {s:?}")))
}

pub fn fraction(what: &str, s: &str) -> Result<Fraction, ScenarioError> {
    parse_fraction(s).map_err(|e| ScenarioError::Validation(format!("{what}: {e}")))
}

fn invalid(msg: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation(msg.into())
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let scenario: Scenario = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((1, 1), |s| locate(text, s.start));
            ScenarioError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn threshold(&self) -> Result<Option<Fraction>, ScenarioError> {
        self.data_market
            .threshold
            .as_deref()
            .map(|t| fraction("data_market.threshold", t))
            .transpose()
    }

    pub fn job_exposure_cap(&self, job: &JobDef) -> Result<Fraction, ScenarioError> {
        let text = job
            .exposure_cap
            .as_deref()
            .or(self.compute_market.exposure_cap.as_deref())
            .unwrap_or("1/20");
        fraction(&format!("job {}: exposure_cap", job.name), text)
    }

    pub fn job_data_share(&self, job: &JobDef) -> Result<Fraction, ScenarioError> {
        fraction(
            &format!("job {}: data_share", job.name),
            job.data_share.as_deref().unwrap_or("1/2"),
        )
    }

    pub fn model_spec(&self, index: usize) -> ModelSpec {
        let job = &self.jobs[index];
        ModelSpec {
            layer_dims: job.layers.clone(),
            activation: job.activation,
            loss: job.loss,
            init_seed: job.init_seed.unwrap_or(self.scenario.seed ^ index as u64),
            learning_rate: job.learning_rate,
        }
    }

    /// Checks every reference and parameter without executing anything.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut accounts = BTreeSet::new();
        for name in &self.ledger.accounts {
            if RESERVED_ACCOUNTS.contains(&name.as_str()) {
                return Err(invalid(format!("account name {name:?} is reserved")));
            }
            if !accounts.insert(name.as_str()) {
                return Err(invalid(format!("duplicate account {name:?}")));
            }
        }
        let account = |name: &str, what: &str| {
            if accounts.contains(name) || RESERVED_ACCOUNTS.contains(&name) {
                Ok(())
            } else {
                Err(invalid(format!("{what}: unknown account {name:?}")))
            }
        };
        for m in &self.ledger.mint {
            account(&m.account, "mint")?;
            match parse_class(&m.class)? {
                TokenClass::Share(_) => {
                    return Err(invalid("shares are minted by the data market only"))
                }
                TokenClass::Curator | TokenClass::Credit => {}
            }
        }
        if let Some(theta) = self.threshold()? {
            if theta >= Fraction::new(1, 1) {
                return Err(invalid("data_market.threshold must be below 1"));
            }
        }
        for w in &self.workers {
            account(&w.owner, "worker")?;
            if !(w.rate.is_finite() && w.rate > 0.0) {
                return Err(invalid(format!("worker rate {} must be positive", w.rate)));
            }
        }
        let mut databases = BTreeSet::new();
        for d in &self.databases {
            account(&d.initiator, "database")?;
            if !databases.insert(d.name.as_str()) {
                return Err(invalid(format!("duplicate database {:?}", d.name)));
            }
        }
        let database = |name: &str| {
            if databases.contains(name) {
                Ok(())
            } else {
                Err(invalid(format!("unknown database {name:?}")))
            }
        };
        let mut proposals = BTreeSet::new();
        for (i, a) in self.actions.iter().enumerate() {
            let ctx = format!("action {}", i + 1);
            match a {
                Action::Propose {
                    id,
                    contributor,
                    database: db,
                    ..
                } => {
                    account(contributor, &ctx)?;
                    database(db)?;
                    if !proposals.insert(id.as_str()) {
                        return Err(invalid(format!("{ctx}: duplicate proposal id {id:?}")));
                    }
                }
                Action::Delegate { from, to, .. } => {
                    account(from, &ctx)?;
                    account(to, &ctx)?;
                }
                Action::Vote {
                    proposal, voters, ..
                } => {
                    if !proposals.contains(proposal.as_str()) {
                        return Err(invalid(format!("{ctx}: unknown proposal {proposal:?}")));
                    }
                    if voters.is_empty() {
                        return Err(invalid(format!("{ctx}: no voters")));
                    }
                    for v in voters {
                        account(v, &ctx)?;
                    }
                }
                Action::Finalize { proposal } => {
                    if !proposals.contains(proposal.as_str()) {
                        return Err(invalid(format!("{ctx}: unknown proposal {proposal:?}")));
                    }
                }
                Action::Transfer {
                    class, from, to, ..
                } => {
                    parse_class(class)?;
                    account(from, &ctx)?;
                    account(to, &ctx)?;
                }
            }
        }
        let mut jobs = BTreeMap::new();
        for (i, j) in self.jobs.iter().enumerate() {
            let ctx = format!("job {}", j.name);
            if jobs.insert(j.name.as_str(), i).is_some() {
                return Err(invalid(format!("duplicate job {:?}", j.name)));
            }
            account(&j.user, &ctx)?;
            database(&j.database)?;
            let spec = self.model_spec(i);
            spec.validate()
                .map_err(|e| invalid(format!("{ctx}: {e}")))?;
            validate_cut_points(&j.cut_points, spec.num_layers())
                .map_err(|e| invalid(format!("{ctx}: {e}")))?;
            if j.epochs == 0 || j.batch_size == 0 || j.shards == 0 {
                return Err(invalid(format!(
                    "{ctx}: epochs, batch_size and shards must be >= 1"
                )));
            }
            let eps = self.job_exposure_cap(j)?;
            if *eps.numer() == 0 || eps > Fraction::new(1, 1) {
                return Err(invalid(format!("{ctx}: exposure_cap must be in (0, 1]")));
            }
            if self.job_data_share(j)? > Fraction::new(1, 1) {
                return Err(invalid(format!("{ctx}: data_share must be at most 1")));
            }
        }
        let total_workers: u32 = self.workers.iter().map(|w| w.count).sum();
        for (i, f) in self.faults.iter().enumerate() {
            let ctx = format!("fault {}", i + 1);
            match (&f.worker, &f.job) {
                (Some(w), None) if *w < total_workers => {}
                (Some(w), None) => return Err(invalid(format!("{ctx}: no worker {w}"))),
                (None, Some(job)) => {
                    let Some(&index) = jobs.get(job.as_str()) else {
                        return Err(invalid(format!("{ctx}: unknown job {job:?}")));
                    };
                    let j = &self.jobs[index];
                    let groups = if j.tmr { 3 } else { 1 };
                    if f.group >= groups || f.segment > j.cut_points.len() {
                        return Err(invalid(format!(
                            "{ctx}: no such group/segment in job {job:?}"
                        )));
                    }
                }
                _ => {
                    return Err(invalid(format!(
                        "{ctx}: give exactly one of `worker` or `job`"
                    )))
                }
            }
        }
        Ok(())
    }
}
