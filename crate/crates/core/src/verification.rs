//! Result verification across redundancy groups, per-worker exposure
//! tracking and epoch-to-epoch reallocation.
//!
//! Groups are numbered from 0. A group that produced no digest (crashed or
//! timed out) is treated as holding a digest no other group shares.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compute_market::{
    ComputeError, ComputeMarket, JobId, JobState, ShardId, Slot, TaskAssignment, WorkerStatus,
};
use crate::ledger::Digest;
use crate::simnet::WorkerId;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerificationError {
    #[error("no results to verify")]
    NoResults,
    #[error("results mix jobs or epochs")]
    MismatchedJob,
    #[error("worker {worker} would see {seen} shards of job {job}, cap is {cap}")]
    ExposureExceeded {
        worker: WorkerId,
        job: JobId,
        seen: usize,
        cap: usize,
    },
    #[error(transparent)]
    Compute(#[from] ComputeError),
}

pub type Result<T, E = VerificationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultDigest {
    pub job_id: JobId,
    pub group_index: usize,
    pub epoch: u32,
    /// `None` if the group produced nothing before the deadline.
    #[serde(with = "opt_hex")]
    pub digest: Option<Digest>,
}

mod opt_hex {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Option<[u8; 32]>, s: S) -> Result<S::Ok, S::Error> {
        match d {
            Some(d) => s.serialize_some(&hex::encode(d)),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<[u8; 32]>, D::Error> {
        let Some(text) = Option::<String>::deserialize(d)? else {
            return Ok(None);
        };
        let mut out = [0u8; 32];
        hex::decode_to_slice(&text, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Some(out))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum Verdict {
    Accepted {
        #[serde(with = "hex::serde")]
        digest: Digest,
    },
    Divergence {
        groups: BTreeSet<usize>,
    },
}

/// Strict unanimity check.
///
/// Accepts only if every group reported the same digest. Otherwise names
/// the groups outside the modal digest (one held by at least two groups),
/// or every group if there is no such digest. A single result is accepted
/// as is.
pub fn verify_results(results: &[ResultDigest]) -> Result<Verdict> {
    let first = results.first().ok_or(VerificationError::NoResults)?;
    if results
        .iter()
        .any(|r| r.job_id != first.job_id || r.epoch != first.epoch)
    {
        return Err(VerificationError::MismatchedJob);
    }
    if let Some(d) = first.digest {
        if results.iter().all(|r| r.digest == Some(d)) {
            return Ok(Verdict::Accepted { digest: d });
        }
    }
    let mut counts: BTreeMap<Digest, usize> = BTreeMap::new();
    for d in results.iter().filter_map(|r| r.digest) {
        *counts.entry(d).or_insert(0) += 1;
    }
    let modal = counts
        .iter()
        .filter(|(_, n)| **n >= 2)
        .max_by_key(|(_, n)| **n)
        .map(|(d, _)| *d);
    let groups = results
        .iter()
        .filter(|r| modal.is_none() || r.digest != modal)
        .map(|r| r.group_index)
        .collect();
    Ok(Verdict::Divergence { groups })
}

/// Shards each worker has received, per job.
#[derive(Debug, Clone, Default)]
pub struct ExposureTracker {
    caps: BTreeMap<JobId, usize>,
    seen: BTreeMap<(JobId, WorkerId), BTreeSet<ShardId>>,
}

impl ExposureTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_cap(&mut self, job: JobId, cap: usize) {
        self.caps.insert(job, cap);
    }

    pub fn cap(&self, job: JobId) -> usize {
        self.caps.get(&job).copied().unwrap_or(0)
    }

    pub fn seen(&self, job: JobId, worker: WorkerId) -> Option<&BTreeSet<ShardId>> {
        self.seen.get(&(job, worker))
    }

    /// Size of `seen ∪ shards` for the worker.
    pub fn exposure_with(&self, job: JobId, worker: WorkerId, shards: &[ShardId]) -> usize {
        let empty = BTreeSet::new();
        let seen = self.seen(job, worker).unwrap_or(&empty);
        seen.len() + shards.iter().filter(|s| !seen.contains(s)).count()
    }

    /// Adds `shards` to the worker's cumulative exposure, refusing any
    /// update that would exceed the job's cap.
    pub fn record_exposure(
        &mut self,
        worker: WorkerId,
        job: JobId,
        shards: &[ShardId],
    ) -> Result<()> {
        let seen = self.exposure_with(job, worker, shards);
        let cap = self.cap(job);
        if seen > cap {
            return Err(VerificationError::ExposureExceeded {
                worker,
                job,
                seen,
                cap,
            });
        }
        self.seen
            .entry((job, worker))
            .or_default()
            .extend(shards.iter().copied());
        Ok(())
    }

    pub fn records(&self) -> impl Iterator<Item = (JobId, WorkerId, &BTreeSet<ShardId>)> {
        self.seen.iter().map(|((j, w), s)| (*j, *w, s))
    }

    pub fn max_exposure(&self, job: JobId) -> usize {
        self.seen
            .iter()
            .filter(|((j, _), _)| *j == job)
            .map(|(_, s)| s.len())
            .max()
            .unwrap_or(0)
    }
}

/// Plan for the next epoch of a running job.
///
/// Workers keep their slot while they are not blacklisted and the slot stays
/// within their exposure budget. Vacant slots are refilled, in slot order,
/// by uniform draws from idle untrusted workers that have never held a role
/// in this job.
pub fn reallocate(
    market: &mut ComputeMarket,
    tracker: &ExposureTracker,
    job_id: JobId,
    rng_seed: u64,
) -> Result<Vec<TaskAssignment>> {
    let job = market.job(job_id)?;
    let shape = job.shape();
    let total = job.spec.shards;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut pool: Vec<WorkerId> = market
        .eligible_pool()
        .into_iter()
        .filter(|w| !job.roles.contains_key(w))
        .collect();
    let fresh = pool.len();
    let mut plan = Vec::with_capacity(shape.workers_needed());
    let mut vacancies = 0;
    for group in 0..shape.groups {
        for segment in 0..shape.segments {
            for block in 0..shape.blocks {
                let slot = Slot {
                    group,
                    segment,
                    block,
                };
                let shards = shape.block_shards(block, total);
                let incumbent = job.bindings.get(&slot).copied().filter(|w| {
                    market.worker(*w).map(|w| w.status) != Ok(WorkerStatus::Blacklisted)
                        && tracker.exposure_with(job_id, *w, &shards) <= shape.cap
                });
                let worker_id = match incumbent {
                    Some(w) => w,
                    None => {
                        vacancies += 1;
                        if pool.is_empty() {
                            continue;
                        }
                        pool.remove(rng.gen_range(0..pool.len()))
                    }
                };
                plan.push(TaskAssignment {
                    job_id,
                    group_index: group,
                    segment_index: segment,
                    block,
                    worker_id,
                    shard_ids: shards,
                });
            }
        }
    }
    if plan.len() < shape.workers_needed() {
        return Err(ComputeError::InfeasibleSchedule {
            job: job_id,
            needed: vacancies,
            per_group: shape.per_group(),
            available: fresh,
        }
        .into());
    }
    market.bind(job_id, &plan)?;
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum DivergenceDecision {
    /// Retry the epoch from the last verified checkpoint.
    Retry { blacklisted: Vec<WorkerId> },
    /// No majority survives; the job fails.
    Fail { blacklisted: Vec<WorkerId> },
}

/// Blacklists every worker that has held a role in one of `groups` and
/// vacates their slots. Returns the blacklisted workers.
pub fn replace_groups(
    market: &mut ComputeMarket,
    job_id: JobId,
    groups: &BTreeSet<usize>,
) -> Result<Vec<WorkerId>> {
    let blacklisted: Vec<WorkerId> = market
        .job(job_id)?
        .roles
        .iter()
        .filter(|(_, (g, _))| groups.contains(g))
        .map(|(w, _)| *w)
        .collect();
    for w in &blacklisted {
        market.blacklist(*w)?;
    }
    market
        .job_mut(job_id)?
        .bindings
        .retain(|slot, _| !groups.contains(&slot.group));
    Ok(blacklisted)
}

/// Blacklists the `minority` groups' workers. Fails the job when no group
/// is left in good standing.
///
/// Groups outside the minority keep their workers even though unanimity
/// failed; majority voting is deliberately not used to accept the epoch.
pub fn handle_divergence(
    market: &mut ComputeMarket,
    job_id: JobId,
    minority: &BTreeSet<usize>,
) -> Result<DivergenceDecision> {
    let groups = market.job(job_id)?.shape().groups;
    let blacklisted = replace_groups(market, job_id, minority)?;
    if (0..groups).all(|g| minority.contains(&g)) {
        market.finish(job_id, JobState::Failed("all groups diverged".into()))?;
        Ok(DivergenceDecision::Fail { blacklisted })
    } else {
        Ok(DivergenceDecision::Retry { blacklisted })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute_market::{JobSpec, Protections};
    use crate::data_market::{AssociationConfig, DataAssociation, FinalizeOutcome};
    use crate::fraction::Fraction;
    use crate::ledger::{Ledger, TokenClass};
    use crate::model_split::{Activation, Loss, ModelSpec};

    fn rd(group: usize, d: Option<u8>) -> ResultDigest {
        ResultDigest {
            job_id: 1,
            group_index: group,
            epoch: 0,
            digest: d.map(|b| [b; 32]),
        }
    }

    fn div(groups: &[usize]) -> Verdict {
        Verdict::Divergence {
            groups: groups.iter().copied().collect(),
        }
    }

    #[test]
    fn unanimity_and_minorities() {
        let ok = verify_results(&[rd(0, Some(1)), rd(1, Some(1)), rd(2, Some(1))]).unwrap();
        assert_eq!(ok, Verdict::Accepted { digest: [1; 32] });
        assert_eq!(
            verify_results(&[rd(0, Some(1)), rd(1, Some(1)), rd(2, Some(2))]).unwrap(),
            div(&[2])
        );
        assert_eq!(
            verify_results(&[rd(0, Some(1)), rd(1, Some(2)), rd(2, Some(3))]).unwrap(),
            div(&[0, 1, 2])
        );
        assert_eq!(
            verify_results(&[rd(0, Some(1)), rd(1, None), rd(2, Some(1))]).unwrap(),
            div(&[1])
        );
        assert_eq!(
            verify_results(&[rd(0, None), rd(1, None), rd(2, None)]).unwrap(),
            div(&[0, 1, 2])
        );
        assert_eq!(
            verify_results(&[rd(0, Some(4))]).unwrap(),
            Verdict::Accepted { digest: [4; 32] }
        );
        assert_eq!(verify_results(&[rd(0, None)]).unwrap(), div(&[0]));
        let mut other = rd(1, Some(1));
        other.epoch = 1;
        assert_eq!(
            verify_results(&[rd(0, Some(1)), other]).unwrap_err(),
            VerificationError::MismatchedJob
        );
        assert_eq!(
            verify_results(&[]).unwrap_err(),
            VerificationError::NoResults
        );
    }

    #[test]
    fn exposure_is_cumulative_and_capped() {
        let mut t = ExposureTracker::new();
        t.set_cap(1, 5);
        t.record_exposure(WorkerId(3), 1, &[0, 1, 2]).unwrap();
        t.record_exposure(WorkerId(3), 1, &[1, 2, 3, 4]).unwrap();
        assert_eq!(t.seen(1, WorkerId(3)).unwrap().len(), 5);
        assert_eq!(
            t.record_exposure(WorkerId(3), 1, &[5]).unwrap_err(),
            VerificationError::ExposureExceeded {
                worker: WorkerId(3),
                job: 1,
                seen: 6,
                cap: 5
            }
        );
        // The rejected update leaves no trace.
        assert_eq!(t.max_exposure(1), 5);
    }

    fn running_job(
        untrusted: usize,
        tmr: bool,
        shards: usize,
        eps: Fraction,
    ) -> (ComputeMarket, JobId) {
        let mut ledger = Ledger::new(2);
        let treasury = ledger.create_account();
        let escrow = ledger.create_account();
        let user = ledger.create_account();
        let curator = ledger.create_account();
        ledger.mint(TokenClass::Credit, user, 10).unwrap();
        ledger.mint(TokenClass::Curator, curator, 1).unwrap();
        let mut assoc = DataAssociation::new(AssociationConfig::default(), treasury).unwrap();
        let db = assoc.create_database(&mut ledger, user, "d", 1).unwrap();
        let p = assoc
            .submit_proposal(&mut ledger, curator, db, [7; 32])
            .unwrap();
        assoc.cast_vote(&mut ledger, curator, p, true).unwrap();
        assert!(matches!(
            assoc.tally_and_finalize(&mut ledger, p).unwrap(),
            FinalizeOutcome::Accepted(_)
        ));
        let mut market = ComputeMarket::new(escrow, treasury);
        for _ in 0..untrusted {
            market.register_worker(&ledger, user, false, 1.0).unwrap();
        }
        let spec = JobSpec {
            database_id: db,
            model: ModelSpec {
                layer_dims: vec![2, 2],
                activation: Activation::Tanh,
                loss: Loss::Mse,
                init_seed: 0,
                learning_rate: 0.1,
            },
            epochs: 3,
            batch_size: 1,
            shards,
            price: 10,
            data_share: Fraction::new(1, 2),
            protections: Protections {
                tmr,
                cut_points: vec![],
                exposure_cap: eps,
            },
            seed: 0,
        };
        let job = market.submit_job(&mut ledger, &assoc, user, spec).unwrap();
        (market, job)
    }

    #[test]
    fn full_exposure_single_worker_plan_is_stable() {
        let (mut market, job) = running_job(1, false, 4, Fraction::new(1, 1));
        let mut tracker = ExposureTracker::new();
        tracker.set_cap(job, 4);
        let first = market.schedule(job, 0).unwrap();
        for a in &first {
            tracker
                .record_exposure(a.worker_id, job, &a.shard_ids)
                .unwrap();
        }
        for epoch in 1..3 {
            let next = reallocate(&mut market, &tracker, job, epoch).unwrap();
            assert_eq!(next, first);
        }
    }

    #[test]
    fn divergence_blacklists_minority_and_refills() {
        let (mut market, job) = running_job(8, true, 4, Fraction::new(1, 2));
        let mut tracker = ExposureTracker::new();
        tracker.set_cap(job, 2);
        let first = market.schedule(job, 11).unwrap();
        assert_eq!(first.len(), 6);
        for a in &first {
            tracker
                .record_exposure(a.worker_id, job, &a.shard_ids)
                .unwrap();
        }
        let bad: Vec<_> = first
            .iter()
            .filter(|a| a.group_index == 1)
            .map(|a| a.worker_id)
            .collect();
        let decision = handle_divergence(&mut market, job, &BTreeSet::from([1])).unwrap();
        assert_eq!(
            decision,
            DivergenceDecision::Retry {
                blacklisted: bad.clone()
            }
        );
        let next = reallocate(&mut market, &tracker, job, 12).unwrap();
        for a in &next {
            if a.group_index == 1 {
                assert!(!bad.contains(&a.worker_id));
                assert!(!first.iter().any(|f| f.worker_id == a.worker_id));
            } else {
                assert!(first.contains(a));
            }
        }
        // Only two fresh workers remain; another divergence cannot be refilled.
        handle_divergence(&mut market, job, &BTreeSet::from([0])).unwrap();
        assert!(matches!(
            reallocate(&mut market, &tracker, job, 13).unwrap_err(),
            VerificationError::Compute(ComputeError::InfeasibleSchedule { .. })
        ));
    }

    #[test]
    fn total_divergence_fails_job() {
        let (mut market, job) = running_job(3, true, 1, Fraction::new(1, 1));
        market.schedule(job, 0).unwrap();
        let d = handle_divergence(&mut market, job, &BTreeSet::from([0, 1, 2])).unwrap();
        assert!(
            matches!(d, DivergenceDecision::Fail { ref blacklisted } if blacklisted.len() == 3)
        );
        assert!(matches!(
            market.job(job).unwrap().state,
            JobState::Failed(_)
        ));
        assert_eq!(market.blacklisted().len(), 3);
    }
}
