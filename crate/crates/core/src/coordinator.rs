//! Trusted-scheduler protocol: runs one job over the simulated network.
//!
//! Each epoch attempt starts with a scheduling run on the trusted worker
//! (charged at the fixed SGX overhead), after which every redundancy group
//! trains through its worker chain independently:
//!
//! * shards are staged on workers when a plan is issued, so feeding a batch
//!   to the first segment costs no network time;
//! * segment `s` forwards the batch and ships its output, together with the
//!   targets, to segment `s + 1`; the last segment computes the loss and
//!   the gradients flow back the same way;
//! * each segment updates right after its own backward pass, then hands its
//!   parameters to the worker serving the next batch if that is a different
//!   worker (a block change);
//! * after the last batch every segment holder sends its parameters to the
//!   scheduler, whose digest over their concatenation is the group result.
//!
//! Segment compute time is `layers / L / rate` seconds per batch, half of it
//! forward. A watchdog bounds every attempt at ten times the expected step
//! time per step; a group with no result by then counts as crashed.
//!
//! Divergent attempts are retried from the last verified checkpoint, which
//! the scheduler hands to every group's first worker.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_market::{
    derive_seed, epoch_order, ComputeError, ComputeMarket, JobId, JobState, Shape, ShardId, Slot,
    TaskAssignment,
};
use crate::ledger::{sha256, Digest};
use crate::model_split::data::Dataset;
use crate::model_split::{
    apply_update, backward_segment, forward_segment, init_model, split_model, ForwardCache,
    ModelError, Segment, Tensor,
};
use crate::simnet::{
    Event, EventId, EventKind, FaultKind, Handler, Message, MessageKind, SimError, SimTime,
    Simulator, WorkerId,
};
use crate::verification::{
    handle_divergence, reallocate, replace_groups, verify_results, DivergenceDecision,
    ExposureTracker, ResultDigest, Verdict, VerificationError,
};

/// Watchdog slack over the expected step time.
pub const WATCHDOG_FACTOR: u64 = 10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("no trusted worker registered to run the scheduler")]
    NoTrustedWorker,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Compute(#[from] ComputeError),
    #[error(transparent)]
    Verification(#[from] VerificationError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = ProtocolError> = std::result::Result<T, E>;

#[derive(Debug, Clone)]
pub enum Payload {
    Activation {
        attempt: u32,
        group: usize,
        step: usize,
        input: Tensor,
        targets: Tensor,
    },
    Gradient {
        attempt: u32,
        group: usize,
        step: usize,
        grad: Tensor,
    },
    Handoff {
        attempt: u32,
        group: usize,
        segment: usize,
        params: Vec<u8>,
    },
    Digest {
        attempt: u32,
        group: usize,
        segment: usize,
        params: Vec<u8>,
    },
    PlanReady {
        attempt: u32,
    },
    ForwardDone {
        attempt: u32,
        group: usize,
        segment: usize,
        step: usize,
    },
    BackwardDone {
        attempt: u32,
        group: usize,
        segment: usize,
        step: usize,
    },
    Deadline {
        attempt: u32,
    },
}

impl Payload {
    fn attempt(&self) -> u32 {
        match self {
            Payload::Activation { attempt, .. }
            | Payload::Gradient { attempt, .. }
            | Payload::Handoff { attempt, .. }
            | Payload::Digest { attempt, .. }
            | Payload::PlanReady { attempt }
            | Payload::ForwardDone { attempt, .. }
            | Payload::BackwardDone { attempt, .. }
            | Payload::Deadline { attempt } => *attempt,
        }
    }
}

/// One worker processing one batch for one segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcessRecord {
    pub attempt: u32,
    pub epoch: u32,
    pub step: u32,
    pub group: usize,
    pub segment: usize,
    pub worker: WorkerId,
    pub shard: ShardId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub epoch: u32,
    pub attempt: u32,
    pub issued_ns: SimTime,
    pub assignments: Vec<TaskAssignment>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub attempt: u32,
    pub start_ns: SimTime,
    pub end_ns: SimTime,
    pub timed_out: bool,
    pub results: Vec<ResultDigest>,
    pub verdict: Verdict,
    pub decision: Option<DivergenceDecision>,
    /// Mean batch loss per group; `None` for groups that did not finish.
    pub mean_loss: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub worker: WorkerId,
    pub kind: FaultKind,
    pub epoch: u32,
    pub step: u32,
    pub at_ns: SimTime,
}

/// Everything the protocol observed while running one job.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRun {
    pub job_id: JobId,
    pub shape: Shape,
    pub verified: bool,
    pub failure: Option<String>,
    #[serde(with = "opt_digest")]
    pub final_digest: Option<Digest>,
    pub start_ns: SimTime,
    pub end_ns: SimTime,
    pub plans: Vec<PlanRecord>,
    pub epochs: Vec<EpochRecord>,
    pub faults_fired: Vec<FaultEvent>,
    /// Shards logged by exfiltrating workers.
    pub exfiltrated: BTreeMap<WorkerId, BTreeSet<ShardId>>,
    #[serde(skip)]
    pub processed: Vec<ProcessRecord>,
}

mod opt_digest {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<[u8; 32]>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&hex::encode(d)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[u8; 32]>, D::Error> {
        Option::<String>::deserialize(d)?
            .map(|text| {
                let mut out = [0u8; 32];
                hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
                Ok(out)
            })
            .transpose()
    }
}

/// Work waiting at a segment for its parameters to arrive.
#[derive(Debug, Clone)]
enum Waiting {
    Input {
        step: usize,
        input: Tensor,
        targets: Tensor,
    },
}

#[derive(Debug, Clone)]
struct Chain {
    /// Worker that holds the parameters, or will once a handoff lands.
    holder: WorkerId,
    params: Option<Segment>,
    waiting: Option<Waiting>,
    cache: Option<ForwardCache>,
    output: Option<Tensor>,
    targets: Option<Tensor>,
}

#[derive(Debug, Clone)]
struct Attempt {
    number: u32,
    epoch: u32,
    order: Vec<ShardId>,
    plan: BTreeMap<Slot, WorkerId>,
    chains: Vec<Vec<Chain>>,
    received: Vec<Vec<Option<Vec<u8>>>>,
    loss_sum: Vec<f64>,
    deadline: Option<EventId>,
    start: SimTime,
    /// Whether chain parameters must come from the scheduler's checkpoint.
    from_checkpoint: bool,
}

struct JobDriver<'a> {
    market: &'a mut ComputeMarket,
    tracker: &'a mut ExposureTracker,
    job_id: JobId,
    scheduler: WorkerId,
    shape: Shape,
    epochs: u32,
    job_seed: u64,
    lr: f64,
    loss: crate::model_split::Loss,
    total_layers: usize,
    shards: usize,
    data: Dataset,
    batch_size: usize,
    templates: Vec<Segment>,
    checkpoint: Vec<Vec<u8>>,
    attempt: Option<Attempt>,
    next_attempt: u32,
    crashed: BTreeSet<WorkerId>,
    corrupted: BTreeSet<WorkerId>,
    done: bool,
    run: JobRun,
}

/// Seed of a job's first scheduling run.
pub fn schedule_seed(job_seed: u64, job_id: JobId) -> u64 {
    derive_seed("schedule", &[job_seed, job_id])
}

/// Runs `job_id` to completion on `sim`. Scheduling failures surface as
/// errors before anything runs; later failures end the job and are recorded
/// in the returned [`JobRun`].
pub fn run_job(
    sim: &mut Simulator<Payload>,
    market: &mut ComputeMarket,
    tracker: &mut ExposureTracker,
    job_id: JobId,
    registry_digest: Digest,
) -> Result<JobRun> {
    let scheduler = *market
        .trusted_workers()
        .first()
        .ok_or(ProtocolError::NoTrustedWorker)?;
    let job = market.job(job_id)?;
    let spec = job.spec.clone();
    let shape = job.shape();
    let data_seed = {
        let d = sha256(&[&spec.seed.to_le_bytes(), &registry_digest]);
        u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
    };
    let data = Dataset::synthetic(
        data_seed,
        spec.shards * spec.batch_size,
        spec.model.input_width(),
        spec.model.output_width(),
        spec.model.loss,
    );
    let templates = split_model(&init_model(&spec.model)?, &spec.protections.cut_points)?;
    let checkpoint = templates.iter().map(Segment::to_bytes).collect();
    tracker.set_cap(job_id, shape.cap);

    let plan = market.schedule(job_id, schedule_seed(spec.seed, job_id))?;
    let start = sim.now();
    let mut driver = JobDriver {
        market,
        tracker,
        job_id,
        scheduler,
        shape,
        epochs: spec.epochs,
        job_seed: spec.seed,
        lr: spec.model.learning_rate,
        loss: spec.model.loss,
        total_layers: spec.model.num_layers(),
        shards: spec.shards,
        data,
        batch_size: spec.batch_size,
        templates,
        checkpoint,
        attempt: None,
        next_attempt: 0,
        crashed: BTreeSet::new(),
        corrupted: BTreeSet::new(),
        done: false,
        run: JobRun {
            job_id,
            shape,
            verified: false,
            failure: None,
            final_digest: None,
            start_ns: start,
            end_ns: start,
            plans: Vec::new(),
            epochs: Vec::new(),
            faults_fired: Vec::new(),
            exfiltrated: BTreeMap::new(),
            processed: Vec::new(),
        },
    };
    driver.issue_plan(sim, 0, plan, false)?;
    sim.run_until_idle(&mut driver)?;
    let mut run = driver.run;
    run.end_ns = sim.now();
    Ok(run)
}

impl JobDriver<'_> {
    fn job(&self) -> u64 {
        self.job_id
    }

    fn worker_at(&self, a: &Attempt, group: usize, segment: usize, step: usize) -> WorkerId {
        let block = self.shape.block_of(a.order[step]);
        a.plan[&Slot {
            group,
            segment,
            block,
        }]
    }

    fn segment_compute_ns(&self, segment: usize, worker: WorkerId) -> u64 {
        let rate = self
            .market
            .worker(worker)
            .map(|w| w.compute_rate)
            .unwrap_or(1.0);
        let layers = self.templates[segment].layer_count() as f64;
        (layers / self.total_layers as f64 / rate * 1e9).round() as u64
    }

    /// Upper estimate of one training step through a group's chain.
    fn expected_step_ns(&self, sim: &Simulator<Payload>, plan: &BTreeMap<Slot, WorkerId>) -> u64 {
        let mut worst = 0;
        for g in 0..self.shape.groups {
            let mut t = 0;
            for (s, seg) in self.templates.iter().enumerate() {
                let slowest = (0..self.shape.blocks)
                    .filter_map(|b| {
                        plan.get(&Slot {
                            group: g,
                            segment: s,
                            block: b,
                        })
                    })
                    .map(|w| self.segment_compute_ns(s, *w))
                    .max()
                    .unwrap_or(0);
                t += slowest + sim.latency().transit(seg.to_bytes().len() as u64);
                if !seg.is_last() {
                    let act = Tensor::wire_size(self.batch_size, seg.output_width());
                    let tgt = Tensor::wire_size(self.batch_size, self.data.targets.cols());
                    t += 2 * sim.latency().transit(act + tgt);
                }
            }
            worst = worst.max(t);
        }
        worst.max(1)
    }

    /// Records exposure for a freshly issued plan and schedules its start
    /// after one scheduling run.
    fn issue_plan(
        &mut self,
        sim: &mut Simulator<Payload>,
        epoch: u32,
        assignments: Vec<TaskAssignment>,
        from_checkpoint: bool,
    ) -> Result<()> {
        for a in &assignments {
            self.tracker
                .record_exposure(a.worker_id, self.job_id, &a.shard_ids)?;
        }
        let number = self.next_attempt;
        self.next_attempt += 1;
        let plan = assignments
            .iter()
            .map(|a| {
                (
                    Slot {
                        group: a.group_index,
                        segment: a.segment_index,
                        block: a.block,
                    },
                    a.worker_id,
                )
            })
            .collect();
        self.run.plans.push(PlanRecord {
            epoch,
            attempt: number,
            issued_ns: sim.now(),
            assignments,
        });
        let previous = self.attempt.take();
        let segments = self.templates.len();
        let groups = self.shape.groups;
        let chains = match previous {
            Some(prev) if !from_checkpoint => prev.chains,
            _ => Vec::new(),
        };
        self.attempt = Some(Attempt {
            number,
            epoch,
            order: epoch_order(&self.shape, self.shards, self.job_seed, epoch),
            plan,
            chains,
            received: vec![vec![None; segments]; groups],
            loss_sum: vec![0.0; groups],
            deadline: None,
            start: 0,
            from_checkpoint,
        });
        let overhead = sim.latency().sgx_scheduling_overhead_ns;
        sim.charge_scheduling(self.job(), overhead);
        sim.set_timer(
            self.scheduler,
            sim.now() + overhead,
            self.job(),
            Payload::PlanReady { attempt: number },
        );
        Ok(())
    }

    fn plan_ready(&mut self, sim: &mut Simulator<Payload>) -> Result<()> {
        let mut a = self.attempt.take().expect("attempt in progress");
        a.start = sim.now();
        let fresh = a.chains.is_empty();
        let mut chains = Vec::with_capacity(self.shape.groups);
        for g in 0..self.shape.groups {
            let mut row = Vec::with_capacity(self.templates.len());
            for s in 0..self.templates.len() {
                let first = self.worker_at(&a, g, s, 0);
                let mut chain = Chain {
                    holder: first,
                    params: None,
                    waiting: None,
                    cache: None,
                    output: None,
                    targets: None,
                };
                if a.from_checkpoint {
                    self.send(
                        sim,
                        self.scheduler,
                        first,
                        MessageKind::Handoff,
                        Payload::Handoff {
                            attempt: a.number,
                            group: g,
                            segment: s,
                            params: self.checkpoint[s].clone(),
                        },
                    )?;
                } else if fresh {
                    // Initial parameters are derived locally from the seed.
                    chain.params = Some(self.templates[s].clone());
                } else {
                    let prev = &a.chains[g][s];
                    let params = prev.params.clone().expect("verified holder keeps params");
                    if prev.holder == first {
                        chain.params = Some(params);
                    } else {
                        self.send(
                            sim,
                            prev.holder,
                            first,
                            MessageKind::Handoff,
                            Payload::Handoff {
                                attempt: a.number,
                                group: g,
                                segment: s,
                                params: params.to_bytes(),
                            },
                        )?;
                    }
                }
                row.push(chain);
            }
            chains.push(row);
        }
        a.chains = chains;
        let steps = a.order.len() as u64;
        let budget = steps * WATCHDOG_FACTOR * self.expected_step_ns(sim, &a.plan);
        a.deadline = Some(sim.set_timer(
            self.scheduler,
            sim.now() + budget,
            self.job(),
            Payload::Deadline { attempt: a.number },
        ));
        self.attempt = Some(a);
        for g in 0..self.shape.groups {
            self.begin_step(sim, g, 0)?;
        }
        Ok(())
    }

    fn send(
        &self,
        sim: &mut Simulator<Payload>,
        src: WorkerId,
        dst: WorkerId,
        kind: MessageKind,
        payload: Payload,
    ) -> Result<()> {
        let size_bytes = match &payload {
            Payload::Activation { input, targets, .. } => {
                Tensor::wire_size(input.rows(), input.cols())
                    + Tensor::wire_size(targets.rows(), targets.cols())
            }
            Payload::Gradient { grad, .. } => Tensor::wire_size(grad.rows(), grad.cols()),
            Payload::Handoff { params, .. } | Payload::Digest { params, .. } => params.len() as u64,
            _ => 0,
        };
        sim.send(Message {
            src,
            dst,
            kind,
            job: self.job(),
            size_bytes,
            send_time: sim.now(),
            payload,
        })?;
        Ok(())
    }

    fn attempt_ref(&self) -> &Attempt {
        self.attempt.as_ref().expect("attempt in progress")
    }

    fn chain(&mut self, group: usize, segment: usize) -> &mut Chain {
        &mut self.attempt.as_mut().expect("attempt in progress").chains[group][segment]
    }

    /// Feeds the staged batch for `step` into the group's first segment.
    fn begin_step(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        step: usize,
    ) -> Result<()> {
        let shard = self.attempt_ref().order[step] as usize;
        let (input, targets) = self.data.batch(shard, self.batch_size);
        let chain = self.chain(group, 0);
        if chain.params.is_none() {
            chain.waiting = Some(Waiting::Input {
                step,
                input,
                targets,
            });
            return Ok(());
        }
        self.start_forward(sim, group, 0, step, input, targets)
    }

    /// Applies any fault configured for `worker` at this batch. Returns
    /// `None` if the worker has stopped responding, otherwise whether its
    /// forward output must be corrupted.
    fn check_fault(
        &mut self,
        sim: &Simulator<Payload>,
        worker: WorkerId,
        step: usize,
    ) -> Option<bool> {
        if self.crashed.contains(&worker) {
            return None;
        }
        let epoch = self.attempt_ref().epoch;
        let Some(fault) = sim.fault(worker).copied() else {
            return Some(false);
        };
        if (epoch, step as u32) < fault.trigger() {
            return Some(false);
        }
        let event = FaultEvent {
            worker,
            kind: fault.kind,
            epoch,
            step: step as u32,
            at_ns: sim.now(),
        };
        match fault.kind {
            FaultKind::Crash => {
                self.crashed.insert(worker);
                self.run.faults_fired.push(event);
                None
            }
            FaultKind::ExfiltrateAttempt => {
                let shard = self.attempt_ref().order[step];
                let log = self.run.exfiltrated.entry(worker).or_default();
                if log.is_empty() {
                    self.run.faults_fired.push(event);
                }
                log.insert(shard);
                Some(false)
            }
            FaultKind::CorruptResult => {
                let fresh = self.corrupted.insert(worker);
                if fresh {
                    self.run.faults_fired.push(event);
                }
                Some(fresh)
            }
        }
    }

    fn start_forward(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        segment: usize,
        step: usize,
        input: Tensor,
        targets: Tensor,
    ) -> Result<()> {
        let worker = self.chain(group, segment).holder;
        let Some(corrupt) = self.check_fault(sim, worker, step) else {
            return Ok(());
        };
        let a = self.attempt_ref();
        let record = ProcessRecord {
            attempt: a.number,
            epoch: a.epoch,
            step: step as u32,
            group,
            segment,
            worker,
            shard: a.order[step],
        };
        let number = a.number;
        self.run.processed.push(record);
        let chain = self.chain(group, segment);
        let (mut output, cache) =
            forward_segment(chain.params.as_ref().expect("params present"), &input)?;
        if corrupt {
            output.data_mut()[0] += 1.0;
        }
        let chain = self.chain(group, segment);
        chain.cache = Some(cache);
        chain.output = Some(output);
        chain.targets = Some(targets);
        let ns = self.segment_compute_ns(segment, worker) / 2;
        sim.charge_compute(self.job(), ns);
        sim.set_timer(
            worker,
            sim.now() + ns,
            self.job(),
            Payload::ForwardDone {
                attempt: number,
                group,
                segment,
                step,
            },
        );
        Ok(())
    }

    fn forward_done(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        segment: usize,
        step: usize,
    ) -> Result<()> {
        let last = segment + 1 == self.templates.len();
        let number = self.attempt_ref().number;
        let chain = self.chain(group, segment);
        let output = chain.output.take().expect("forward output");
        let targets = chain.targets.take().expect("targets");
        let src = chain.holder;
        if last {
            let (value, grad) = self.loss.evaluate(&output, &targets)?;
            self.attempt.as_mut().expect("attempt").loss_sum[group] += value;
            return self.start_backward(sim, group, segment, step, grad);
        }
        let dst = self.chain(group, segment + 1).holder;
        self.send(
            sim,
            src,
            dst,
            MessageKind::Activation,
            Payload::Activation {
                attempt: number,
                group,
                step,
                input: output,
                targets,
            },
        )
    }

    fn start_backward(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        segment: usize,
        step: usize,
        grad: Tensor,
    ) -> Result<()> {
        let worker = self.chain(group, segment).holder;
        if self.crashed.contains(&worker) {
            return Ok(());
        }
        let number = self.attempt_ref().number;
        self.chain(group, segment).output = Some(grad);
        let total = self.segment_compute_ns(segment, worker);
        let ns = total - total / 2;
        sim.charge_compute(self.job(), ns);
        sim.set_timer(
            worker,
            sim.now() + ns,
            self.job(),
            Payload::BackwardDone {
                attempt: number,
                group,
                segment,
                step,
            },
        );
        Ok(())
    }

    fn backward_done(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        segment: usize,
        step: usize,
    ) -> Result<()> {
        let lr = self.lr;
        let number = self.attempt_ref().number;
        let chain = self.chain(group, segment);
        let grad = chain.output.take().expect("upstream gradient");
        let cache = chain.cache.take().expect("forward cache");
        let params = chain.params.as_mut().expect("params present");
        let (grads, down) = backward_segment(params, &cache, &grad)?;
        apply_update(params, &grads, lr);
        let layers = params.layer_count() as u64;
        let worker = chain.holder;
        self.market.record_work(self.job_id, worker, layers)?;
        if segment > 0 {
            let dst = self.chain(group, segment - 1).holder;
            self.send(
                sim,
                worker,
                dst,
                MessageKind::Gradient,
                Payload::Gradient {
                    attempt: number,
                    group,
                    step,
                    grad: down,
                },
            )?;
        }
        let next = step + 1;
        if next == self.attempt_ref().order.len() {
            let params = self
                .chain(group, segment)
                .params
                .as_ref()
                .expect("params")
                .to_bytes();
            return self.send(
                sim,
                worker,
                self.scheduler,
                MessageKind::Digest,
                Payload::Digest {
                    attempt: number,
                    group,
                    segment,
                    params,
                },
            );
        }
        let successor = self.worker_at(self.attempt_ref(), group, segment, next);
        if successor != worker {
            let chain = self.chain(group, segment);
            let params = chain.params.take().expect("params").to_bytes();
            chain.holder = successor;
            self.send(
                sim,
                worker,
                successor,
                MessageKind::Handoff,
                Payload::Handoff {
                    attempt: number,
                    group,
                    segment,
                    params,
                },
            )?;
        }
        if segment == 0 {
            self.begin_step(sim, group, next)?;
        }
        Ok(())
    }

    fn receive_handoff(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        segment: usize,
        params: &[u8],
    ) -> Result<()> {
        let mut seg = self.templates[segment].clone();
        seg.load_bytes(params)?;
        let chain = self.chain(group, segment);
        chain.params = Some(seg);
        if let Some(Waiting::Input {
            step,
            input,
            targets,
        }) = chain.waiting.take()
        {
            self.start_forward(sim, group, segment, step, input, targets)?;
        }
        Ok(())
    }

    fn receive_digest(
        &mut self,
        sim: &mut Simulator<Payload>,
        group: usize,
        segment: usize,
        params: Vec<u8>,
    ) -> Result<()> {
        let a = self.attempt.as_mut().expect("attempt");
        a.received[group][segment] = Some(params);
        if a.received.iter().flatten().all(Option::is_some) {
            if let Some(id) = a.deadline.take() {
                sim.cancel(id);
            }
            self.conclude(sim, false)?;
        }
        Ok(())
    }

    fn group_bytes(received: &[Option<Vec<u8>>]) -> Option<Vec<Vec<u8>>> {
        received.iter().cloned().collect()
    }

    /// Verifies the attempt's results and decides what runs next.
    fn conclude(&mut self, sim: &mut Simulator<Payload>, timed_out: bool) -> Result<()> {
        let a = self.attempt.as_ref().expect("attempt");
        let steps = a.order.len() as f64;
        let results: Vec<ResultDigest> = a
            .received
            .iter()
            .enumerate()
            .map(|(g, segs)| ResultDigest {
                job_id: self.job_id,
                group_index: g,
                epoch: a.epoch,
                digest: Self::group_bytes(segs).map(|parts| sha256(&[&parts.concat()])),
            })
            .collect();
        let mean_loss = a
            .received
            .iter()
            .zip(&a.loss_sum)
            .map(|(segs, sum)| segs.iter().all(Option::is_some).then(|| sum / steps))
            .collect();
        let verdict = verify_results(&results)?;
        let (epoch, number, start) = (a.epoch, a.number, a.start);
        let mut record = EpochRecord {
            epoch,
            attempt: number,
            start_ns: start,
            end_ns: sim.now(),
            timed_out,
            results,
            verdict: verdict.clone(),
            decision: None,
            mean_loss,
        };
        match verdict {
            Verdict::Accepted { digest } => {
                let segs = &self.attempt_ref().received[0];
                self.checkpoint = Self::group_bytes(segs).expect("accepted results are complete");
                self.run.epochs.push(record);
                let next = epoch + 1;
                if next == self.epochs {
                    self.run.verified = true;
                    self.run.final_digest = Some(digest);
                    self.market.finish(self.job_id, JobState::Verified)?;
                    self.done = true;
                    return Ok(());
                }
                self.retry_or_fail(sim, next, false)
            }
            Verdict::Divergence { groups } => {
                let decision = if self.shape.groups > 1 {
                    handle_divergence(self.market, self.job_id, &groups)?
                } else {
                    // Without redundancy only a missing result is observable;
                    // the group is replaced and the epoch rerun.
                    DivergenceDecision::Retry {
                        blacklisted: replace_groups(self.market, self.job_id, &groups)?,
                    }
                };
                let fail = matches!(decision, DivergenceDecision::Fail { .. });
                record.decision = Some(decision);
                self.run.epochs.push(record);
                if fail {
                    self.run.failure = Some("all groups diverged".into());
                    self.done = true;
                    return Ok(());
                }
                self.retry_or_fail(sim, epoch, true)
            }
        }
    }

    fn retry_or_fail(
        &mut self,
        sim: &mut Simulator<Payload>,
        epoch: u32,
        from_checkpoint: bool,
    ) -> Result<()> {
        let seed = derive_seed(
            "reallocate",
            &[self.job_seed, self.job_id, u64::from(self.next_attempt)],
        );
        match reallocate(self.market, self.tracker, self.job_id, seed) {
            Ok(plan) => self.issue_plan(sim, epoch, plan, from_checkpoint),
            Err(VerificationError::Compute(e @ ComputeError::InfeasibleSchedule { .. })) => {
                self.run.failure = Some(e.to_string());
                self.market
                    .finish(self.job_id, JobState::Failed(e.to_string()))?;
                self.done = true;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Whether `worker` has stopped responding.
    fn is_down(&self, worker: WorkerId) -> bool {
        self.crashed.contains(&worker)
    }
}

impl Handler<Payload> for JobDriver<'_> {
    type Error = ProtocolError;

    fn handle(&mut self, sim: &mut Simulator<Payload>, event: Event<Payload>) -> Result<()> {
        let (node, payload) = match event.kind {
            EventKind::Deliver(m) => (m.dst, m.payload),
            EventKind::Timer { node, payload, .. } => (node, payload),
        };
        let current = self.attempt.as_ref().map(|a| a.number);
        if self.done || current != Some(payload.attempt()) || self.is_down(node) {
            return Ok(());
        }
        match payload {
            Payload::PlanReady { .. } => self.plan_ready(sim),
            Payload::Deadline { .. } => {
                self.attempt.as_mut().expect("attempt").deadline = None;
                self.conclude(sim, true)
            }
            Payload::ForwardDone {
                group,
                segment,
                step,
                ..
            } => self.forward_done(sim, group, segment, step),
            Payload::BackwardDone {
                group,
                segment,
                step,
                ..
            } => self.backward_done(sim, group, segment, step),
            Payload::Activation {
                group,
                step,
                input,
                targets,
                ..
            } => {
                // The sender is segment `s`; find which segment `node` serves.
                let segment = (1..self.templates.len())
                    .find(|s| self.attempt_ref().chains[group][*s].holder == node)
                    .expect("activation routed to a segment holder");
                let chain = self.chain(group, segment);
                if chain.params.is_none() {
                    chain.waiting = Some(Waiting::Input {
                        step,
                        input,
                        targets,
                    });
                    return Ok(());
                }
                self.start_forward(sim, group, segment, step, input, targets)
            }
            Payload::Gradient {
                group, step, grad, ..
            } => {
                let segment = (0..self.templates.len() - 1)
                    .find(|s| self.attempt_ref().chains[group][*s].holder == node)
                    .expect("gradient routed to a segment holder");
                self.start_backward(sim, group, segment, step, grad)
            }
            Payload::Handoff {
                group,
                segment,
                params,
                ..
            } => self.receive_handoff(sim, group, segment, &params),
            Payload::Digest {
                group,
                segment,
                params,
                ..
            } => self.receive_digest(sim, group, segment, params),
        }
    }

    fn unfinished(&self) -> Option<String> {
        (!self.done).then(|| {
            let epoch = self.attempt.as_ref().map(|a| a.epoch).unwrap_or(0);
            format!("job {} stalled in epoch {epoch}", self.job_id)
        })
    }
}
