//! Worker pool, job intake, initial scheduling onto redundancy groups and
//! model segments, and settlement of job payments.
//!
//! Scheduling model: the training set is cut into `shards` shards, and the
//! shards into contiguous blocks of `cap = floor(ε·shards)` shards. Every
//! (group, segment, block) slot is served by its own untrusted worker, so a
//! worker sees at most one block of the data and holds at most one segment
//! of the model. A job therefore needs
//!
//! ```text
//! groups × segments × ceil(shards / cap)
//! ```
//!
//! distinct eligible workers, with `groups = 3` under TMR and `1` otherwise.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data_market::{DataAssociation, DatabaseId, MarketError};
use crate::fraction::{self, Fraction};
use crate::ledger::{sha256, AccountId, Ledger, LedgerError, TokenClass};
use crate::model_split::{validate_cut_points, ModelError, ModelSpec};
use crate::simnet::WorkerId;

pub type JobId = u64;
pub type ShardId = u32;

/// Number of redundancy groups under TMR.
pub const TMR_GROUPS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ComputeError {
    #[error("unknown account {0:?}")]
    UnknownAccount(AccountId),
    #[error("compute rate must be positive and finite")]
    InvalidRate,
    #[error("unknown worker {0}")]
    UnknownWorker(WorkerId),
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("insufficient balance: {balance} available, price {price}")]
    InsufficientBalance { balance: u64, price: u64 },
    #[error("database {0} has no accepted entries")]
    EmptyDatabase(DatabaseId),
    #[error("invalid cut points {0:?}")]
    InvalidCutPoints(Vec<usize>),
    #[error("invalid job: {0}")]
    InvalidJob(String),
    #[error(
        "infeasible schedule for job {job}: need {needed} workers ({per_group} per group), {available} eligible"
    )]
    InfeasibleSchedule {
        job: JobId,
        needed: usize,
        per_group: usize,
        available: usize,
    },
    #[error("job {0} is already settled")]
    AlreadySettled(JobId),
    #[error("job {0} has not finished")]
    JobNotTerminal(JobId),
    #[error(transparent)]
    Market(#[from] MarketError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ComputeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkerStatus {
    Idle,
    Busy,
    Blacklisted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Worker {
    pub worker_id: WorkerId,
    pub owner: AccountId,
    pub trusted: bool,
    /// Work units per simulated second.
    pub compute_rate: f64,
    pub status: WorkerStatus,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Protections {
    pub tmr: bool,
    pub cut_points: Vec<usize>,
    /// Exposure cap ε: largest fraction of the training set one worker may see.
    pub exposure_cap: Fraction,
}

impl Default for Protections {
    fn default() -> Self {
        Self {
            tmr: false,
            cut_points: Vec::new(),
            exposure_cap: Fraction::new(1, 20),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JobSpec {
    pub database_id: DatabaseId,
    pub model: ModelSpec,
    pub epochs: u32,
    /// Samples per shard; one shard is one training batch.
    pub batch_size: usize,
    pub shards: usize,
    pub price: u64,
    /// Fraction ρ of the price paid to data shareholders.
    pub data_share: Fraction,
    pub protections: Protections,
    /// Seeds data synthesis, shard order and worker sampling.
    pub seed: u64,
}

/// Slot counts derived from a job's protections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub groups: usize,
    pub segments: usize,
    /// Shards one worker may see over the whole job.
    pub cap: usize,
    pub blocks: usize,
}

impl Shape {
    pub fn of(spec: &JobSpec) -> Self {
        let cap = fraction::mul_floor(spec.protections.exposure_cap, spec.shards as u64) as usize;
        Self {
            groups: if spec.protections.tmr { TMR_GROUPS } else { 1 },
            segments: spec.protections.cut_points.len() + 1,
            cap,
            blocks: if cap == 0 {
                0
            } else {
                spec.shards.div_ceil(cap)
            },
        }
    }

    pub fn feasible(&self) -> bool {
        self.cap > 0
    }

    pub fn per_group(&self) -> usize {
        self.segments * self.blocks
    }

    /// Distinct workers needed to fill every slot once.
    pub fn workers_needed(&self) -> usize {
        self.groups * self.per_group()
    }

    /// Workers occupied on every training step: one per segment per group.
    pub fn slots_per_step(&self) -> usize {
        self.groups * self.segments
    }

    /// Shard ids of `block`.
    pub fn block_shards(&self, block: usize, total: usize) -> Vec<ShardId> {
        let start = block * self.cap;
        (start..((block + 1) * self.cap).min(total))
            .map(|s| s as ShardId)
            .collect()
    }

    pub fn block_of(&self, shard: ShardId) -> usize {
        shard as usize / self.cap
    }
}

/// Shard processing order for one epoch: blocks in a seeded random order,
/// shards shuffled within each block. Every group uses the same order.
pub fn epoch_order(shape: &Shape, total: usize, job_seed: u64, epoch: u32) -> Vec<ShardId> {
    let mut rng =
        ChaCha8Rng::seed_from_u64(derive_seed("shard-order", &[job_seed, u64::from(epoch)]));
    let mut blocks: Vec<usize> = (0..shape.blocks).collect();
    blocks.shuffle(&mut rng);
    let mut order = Vec::with_capacity(total);
    for b in blocks {
        let mut shards = shape.block_shards(b, total);
        shards.shuffle(&mut rng);
        order.extend(shards);
    }
    order
}

/// Position of one worker in a job's schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub group: usize,
    pub segment: usize,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssignment {
    pub job_id: JobId,
    pub group_index: usize,
    pub segment_index: usize,
    pub block: usize,
    pub worker_id: WorkerId,
    pub shard_ids: Vec<ShardId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Running,
    Verified,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Job {
    pub job_id: JobId,
    pub user: AccountId,
    pub spec: JobSpec,
    pub state: JobState,
    pub settled: bool,
    /// Current worker for every slot.
    pub bindings: BTreeMap<Slot, WorkerId>,
    /// (group, segment) role each worker has held in this job. Never reassigned.
    pub roles: BTreeMap<WorkerId, (usize, usize)>,
    /// Layer-batches processed per worker (one layer on one batch = 1).
    pub work: BTreeMap<WorkerId, u64>,
}

impl Job {
    pub fn shape(&self) -> Shape {
        Shape::of(&self.spec)
    }

    pub fn total_layer_units(&self) -> u64 {
        self.work.values().sum()
    }

    /// Work units performed: layer-batches divided by the layer count.
    pub fn work_units(&self) -> f64 {
        self.total_layer_units() as f64 / self.spec.model.num_layers() as f64
    }

    /// Work of one unprotected, unsplit run: one unit per batch per epoch.
    pub fn baseline_work_units(&self) -> f64 {
        (u64::from(self.spec.epochs) * self.spec.shards as u64) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerPayment {
    pub owner: AccountId,
    pub work: u64,
    pub amount: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SettlementRecord {
    pub job_id: JobId,
    pub user: AccountId,
    pub verified: bool,
    pub price: u64,
    pub refund: u64,
    pub data_pool: u64,
    pub compute_pool: u64,
    pub worker_payments: BTreeMap<WorkerId, WorkerPayment>,
    pub dividends: BTreeMap<AccountId, u64>,
    pub treasury_remainder: u64,
}

impl SettlementRecord {
    /// Everything paid out of escrow.
    pub fn total_paid(&self) -> u64 {
        self.refund
            + self.worker_payments.values().map(|p| p.amount).sum::<u64>()
            + self.dividends.values().sum::<u64>()
            + self.treasury_remainder
    }
}

/// `floor(pool·w_i/Σw)` per entry; returns the shares and the remainder.
pub fn split_proportional<K: Ord + Copy>(
    pool: u64,
    weights: &BTreeMap<K, u64>,
) -> (BTreeMap<K, u64>, u64) {
    let total: u128 = weights.values().map(|w| u128::from(*w)).sum();
    if total == 0 {
        return (BTreeMap::new(), pool);
    }
    let mut paid = 0;
    let shares = weights
        .iter()
        .map(|(k, w)| {
            let amount = (u128::from(pool) * u128::from(*w) / total) as u64;
            paid += amount;
            (*k, amount)
        })
        .collect();
    (shares, pool - paid)
}

/// Mixes labelled integers into a 64-bit seed.
pub fn derive_seed(label: &str, parts: &[u64]) -> u64 {
    let mut bytes = label.as_bytes().to_vec();
    for p in parts {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    let d = sha256(&[&bytes]);
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone)]
pub struct ComputeMarket {
    workers: BTreeMap<WorkerId, Worker>,
    jobs: BTreeMap<JobId, Job>,
    escrow: AccountId,
    treasury: AccountId,
}

impl ComputeMarket {
    pub fn new(escrow: AccountId, treasury: AccountId) -> Self {
        Self {
            workers: BTreeMap::new(),
            jobs: BTreeMap::new(),
            escrow,
            treasury,
        }
    }

    pub fn escrow(&self) -> AccountId {
        self.escrow
    }

    pub fn treasury(&self) -> AccountId {
        self.treasury
    }

    pub fn register_worker(
        &mut self,
        ledger: &Ledger,
        owner: AccountId,
        trusted: bool,
        compute_rate: f64,
    ) -> Result<WorkerId> {
        if !ledger.account_exists(&owner) {
            return Err(ComputeError::UnknownAccount(owner));
        }
        if !(compute_rate.is_finite() && compute_rate > 0.0) {
            return Err(ComputeError::InvalidRate);
        }
        let worker_id = WorkerId(self.workers.len() as u32);
        self.workers.insert(
            worker_id,
            Worker {
                worker_id,
                owner,
                trusted,
                compute_rate,
                status: WorkerStatus::Idle,
            },
        );
        Ok(worker_id)
    }

    pub fn workers(&self) -> impl Iterator<Item = &Worker> {
        self.workers.values()
    }

    pub fn worker(&self, id: WorkerId) -> Result<&Worker> {
        self.workers.get(&id).ok_or(ComputeError::UnknownWorker(id))
    }

    pub fn set_status(&mut self, id: WorkerId, status: WorkerStatus) -> Result<()> {
        let w = self
            .workers
            .get_mut(&id)
            .ok_or(ComputeError::UnknownWorker(id))?;
        if w.status != WorkerStatus::Blacklisted {
            w.status = status;
        }
        Ok(())
    }

    pub fn blacklist(&mut self, id: WorkerId) -> Result<()> {
        self.workers
            .get_mut(&id)
            .ok_or(ComputeError::UnknownWorker(id))?
            .status = WorkerStatus::Blacklisted;
        Ok(())
    }

    pub fn blacklisted(&self) -> Vec<WorkerId> {
        self.workers
            .values()
            .filter(|w| w.status == WorkerStatus::Blacklisted)
            .map(|w| w.worker_id)
            .collect()
    }

    /// Untrusted, idle workers in id order.
    pub fn eligible_pool(&self) -> Vec<WorkerId> {
        self.workers
            .values()
            .filter(|w| !w.trusted && w.status == WorkerStatus::Idle)
            .map(|w| w.worker_id)
            .collect()
    }

    pub fn trusted_workers(&self) -> Vec<WorkerId> {
        self.workers
            .values()
            .filter(|w| w.trusted)
            .map(|w| w.worker_id)
            .collect()
    }

    pub fn job(&self, id: JobId) -> Result<&Job> {
        self.jobs.get(&id).ok_or(ComputeError::UnknownJob(id))
    }

    pub fn job_mut(&mut self, id: JobId) -> Result<&mut Job> {
        self.jobs.get_mut(&id).ok_or(ComputeError::UnknownJob(id))
    }

    pub fn jobs(&self) -> impl Iterator<Item = &Job> {
        self.jobs.values()
    }

    /// Validates the job, escrows its price and queues it.
    pub fn submit_job(
        &mut self,
        ledger: &mut Ledger,
        assoc: &DataAssociation,
        user: AccountId,
        spec: JobSpec,
    ) -> Result<JobId> {
        if !ledger.account_exists(&user) {
            return Err(ComputeError::UnknownAccount(user));
        }
        spec.model.validate()?;
        validate_cut_points(&spec.protections.cut_points, spec.model.num_layers())
            .map_err(|_| ComputeError::InvalidCutPoints(spec.protections.cut_points.clone()))?;
        if spec.epochs == 0 || spec.batch_size == 0 || spec.shards == 0 {
            return Err(ComputeError::InvalidJob(
                "epochs, batch_size and shards must be >= 1".into(),
            ));
        }
        if spec.data_share > Fraction::new(1, 1) {
            return Err(ComputeError::InvalidJob("data_share above 1".into()));
        }
        let eps = spec.protections.exposure_cap;
        if *eps.numer() == 0 || eps > Fraction::new(1, 1) {
            return Err(ComputeError::InvalidJob(
                "exposure cap must be in (0, 1]".into(),
            ));
        }
        if assoc
            .database(spec.database_id)?
            .accepted_entries
            .is_empty()
        {
            return Err(ComputeError::EmptyDatabase(spec.database_id));
        }
        let balance = ledger.balance(TokenClass::Credit, &user);
        if balance < spec.price {
            return Err(ComputeError::InsufficientBalance {
                balance,
                price: spec.price,
            });
        }
        ledger.transfer(TokenClass::Credit, user, self.escrow, spec.price)?;
        let job_id = self.jobs.len() as JobId + 1;
        self.jobs.insert(
            job_id,
            Job {
                job_id,
                user,
                spec,
                state: JobState::Queued,
                settled: false,
                bindings: BTreeMap::new(),
                roles: BTreeMap::new(),
                work: BTreeMap::new(),
            },
        );
        Ok(job_id)
    }

    /// Fills every slot of a queued job with distinct workers sampled
    /// uniformly without replacement from the eligible pool.
    pub fn schedule(&mut self, job_id: JobId, rng_seed: u64) -> Result<Vec<TaskAssignment>> {
        let job = self.job(job_id)?;
        let shape = job.shape();
        let pool = self.eligible_pool();
        let needed = shape.workers_needed();
        if !shape.feasible() || pool.len() < needed {
            return Err(ComputeError::InfeasibleSchedule {
                job: job_id,
                needed: if shape.feasible() { needed } else { usize::MAX },
                per_group: if shape.feasible() {
                    shape.per_group()
                } else {
                    usize::MAX
                },
                available: pool.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        let chosen: Vec<WorkerId> = pool.choose_multiple(&mut rng, needed).copied().collect();
        let total = job.spec.shards;
        let mut assignments = Vec::with_capacity(needed);
        let mut picks = chosen.into_iter();
        for group in 0..shape.groups {
            for segment in 0..shape.segments {
                for block in 0..shape.blocks {
                    let worker_id = picks.next().expect("sampled enough");
                    assignments.push(TaskAssignment {
                        job_id,
                        group_index: group,
                        segment_index: segment,
                        block,
                        worker_id,
                        shard_ids: shape.block_shards(block, total),
                    });
                }
            }
        }
        self.bind(job_id, &assignments)?;
        self.job_mut(job_id)?.state = JobState::Running;
        Ok(assignments)
    }

    /// Records `assignments` as the job's current bindings.
    pub fn bind(&mut self, job_id: JobId, assignments: &[TaskAssignment]) -> Result<()> {
        for a in assignments {
            self.set_status(a.worker_id, WorkerStatus::Busy)?;
        }
        let job = self.job_mut(job_id)?;
        for a in assignments {
            let slot = Slot {
                group: a.group_index,
                segment: a.segment_index,
                block: a.block,
            };
            job.bindings.insert(slot, a.worker_id);
            job.roles
                .entry(a.worker_id)
                .or_insert((a.group_index, a.segment_index));
        }
        Ok(())
    }

    pub fn record_work(&mut self, job_id: JobId, worker: WorkerId, layer_units: u64) -> Result<()> {
        *self.job_mut(job_id)?.work.entry(worker).or_insert(0) += layer_units;
        Ok(())
    }

    /// Marks the job terminal and frees its non-blacklisted workers.
    pub fn finish(&mut self, job_id: JobId, state: JobState) -> Result<()> {
        let workers: BTreeSet<WorkerId> = self.job(job_id)?.roles.keys().copied().collect();
        for w in workers {
            self.set_status(w, WorkerStatus::Idle)?;
        }
        self.job_mut(job_id)?.state = state;
        Ok(())
    }

    /// Pays out a terminal job's escrow.
    ///
    /// On success the price is split by [`DataAssociation::distribute_dividend`];
    /// the compute portion goes to the owners of non-blacklisted workers in
    /// proportion to work performed, with integer remainders to the treasury.
    /// On failure the user is refunded in full.
    pub fn settle(
        &mut self,
        ledger: &mut Ledger,
        assoc: &DataAssociation,
        job_id: JobId,
        verified: bool,
    ) -> Result<SettlementRecord> {
        let job = self.job(job_id)?;
        if job.settled {
            return Err(ComputeError::AlreadySettled(job_id));
        }
        if matches!(job.state, JobState::Queued | JobState::Running) {
            return Err(ComputeError::JobNotTerminal(job_id));
        }
        let (user, price) = (job.user, job.spec.price);
        let mut record = SettlementRecord {
            job_id,
            user,
            verified,
            price,
            refund: 0,
            data_pool: 0,
            compute_pool: 0,
            worker_payments: BTreeMap::new(),
            dividends: BTreeMap::new(),
            treasury_remainder: 0,
        };
        if verified {
            let split = assoc.distribute_dividend(
                ledger,
                job.spec.database_id,
                price,
                job.spec.data_share,
            )?;
            let paid_work: BTreeMap<WorkerId, u64> = job
                .work
                .iter()
                .filter(|(w, units)| {
                    **units > 0 && self.workers[*w].status != WorkerStatus::Blacklisted
                })
                .map(|(w, units)| (*w, *units))
                .collect();
            let (shares, compute_rest) = split_proportional(split.compute_portion, &paid_work);
            record.data_pool = split.data_pool;
            record.compute_pool = split.compute_portion;
            record.treasury_remainder = split.treasury_remainder + compute_rest;
            for (w, amount) in shares {
                let owner = self.workers[&w].owner;
                record.worker_payments.insert(
                    w,
                    WorkerPayment {
                        owner,
                        work: paid_work[&w],
                        amount,
                    },
                );
            }
            record.dividends = split.payouts;
        } else {
            record.refund = price;
        }
        debug_assert_eq!(record.total_paid(), price);

        let escrow = self.escrow;
        ledger.transfer(TokenClass::Credit, escrow, user, record.refund)?;
        for (account, amount) in &record.dividends {
            ledger.transfer(TokenClass::Credit, escrow, *account, *amount)?;
        }
        for p in record.worker_payments.values() {
            ledger.transfer(TokenClass::Credit, escrow, p.owner, p.amount)?;
        }
        ledger.transfer(
            TokenClass::Credit,
            escrow,
            self.treasury,
            record.treasury_remainder,
        )?;
        self.job_mut(job_id)?.settled = true;
        Ok(record)
    }
}
