//! Offline re-check of a run report. Every invariant is recomputed from the
//! recorded data; nothing from the human-readable part is trusted.

use std::collections::{BTreeMap, BTreeSet};

use super::report::{JobReport, RunReport};
use crate::compute_market::{JobState, ShardId};
use crate::data_market::ProposalStatus;
use crate::fraction::{self, parse_fraction};
use crate::ledger::{Ledger, TokenClass};
use crate::simnet::WorkerId;
use crate::verification::{verify_results, DivergenceDecision, Verdict};

/// Returns every violated invariant; empty means the report checks out.
pub fn verify_report(report: &RunReport) -> Vec<String> {
    let mut v = Vec::new();
    check_ledger(report, &mut v);
    check_registry(report, &mut v);
    let trusted: BTreeSet<WorkerId> = report
        .workers
        .iter()
        .filter(|w| w.trusted)
        .map(|w| w.worker_id)
        .collect();
    let blacklist: BTreeSet<WorkerId> = report.blacklist.iter().copied().collect();
    for job in &report.jobs {
        check_settlement(job, &mut v);
        check_exposure(job, &mut v);
        check_plans(job, &trusted, &mut v);
        check_verdicts(job, &blacklist, &mut v);
    }
    if report
        .balances
        .get("credit")
        .and_then(|b| b.get("escrow"))
        .is_some_and(|&n| n > 0)
    {
        v.push("escrow still holds credits".into());
    }
    v
}

fn check_ledger(report: &RunReport, v: &mut Vec<String>) {
    let text = report.ledger.log.join("\n");
    let ledger = match Ledger::import_log(report.seed, &text) {
        Ok(l) => l,
        Err(e) => {
            v.push(format!("ledger: replay failed: {e}"));
            return;
        }
    };
    if ledger.height() != report.ledger.height {
        v.push(format!(
            "ledger: replayed height {} != reported {}",
            ledger.height(),
            report.ledger.height
        ));
    }
    if ledger.head_hash() != report.ledger.head_hash {
        v.push("ledger: replayed head hash differs from the reported one".into());
    }
    let mut balances: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for (class, account, amount) in ledger.balances() {
        if amount > 0 {
            balances
                .entry(class.to_string())
                .or_default()
                .insert(report.account_name(&account), amount);
        }
    }
    if balances != report.balances {
        v.push("ledger: replayed balances differ from the reported ones".into());
    }
    let supplies: BTreeMap<String, u64> =
        ledger.classes().map(|(c, s)| (c.to_string(), s)).collect();
    if supplies != report.supplies {
        v.push("ledger: replayed supplies differ from the reported ones".into());
    }
    if ledger.registry() != report.registry.as_slice() {
        v.push("ledger: replayed registry differs from the reported one".into());
    }
}

fn check_registry(report: &RunReport, v: &mut Vec<String>) {
    let accepted: BTreeSet<u64> = report
        .proposals
        .iter()
        .filter(|p| p.status == ProposalStatus::Accepted)
        .map(|p| p.proposal_id)
        .collect();
    let registered: BTreeSet<u64> = report.registry.iter().map(|e| e.proposal_id).collect();
    if registered.len() != report.registry.len() {
        v.push("registry: a proposal has more than one entry".into());
    }
    if accepted != registered {
        v.push(format!(
            "registry: accepted proposals {accepted:?} but entries for {registered:?}"
        ));
    }
    for d in &report.databases {
        let class = TokenClass::Share(d.database_id).to_string();
        let supply = report.supplies.get(&class).copied().unwrap_or(0);
        let expected = d.initiator_endowment + d.accepted_entries.len() as u64;
        if supply != expected {
            v.push(format!(
                "registry: {} share supply {supply} != endowment {} + {} accepted",
                d.name,
                d.initiator_endowment,
                d.accepted_entries.len()
            ));
        }
    }
}

fn check_settlement(job: &JobReport, v: &mut Vec<String>) {
    let s = &job.settlement;
    let name = &job.name;
    if s.total_paid() != job.price {
        v.push(format!(
            "job {name}: settlement pays {} of price {}",
            s.total_paid(),
            job.price
        ));
    }
    let verified = job.state == JobState::Verified;
    if s.verified != verified || job.run.verified != verified {
        v.push(format!("job {name}: settlement and job state disagree"));
    }
    if verified {
        let rho = match parse_fraction(&job.data_share) {
            Ok(r) => r,
            Err(e) => {
                v.push(format!("job {name}: bad data share: {e}"));
                return;
            }
        };
        if s.data_pool != fraction::mul_floor(rho, job.price) {
            v.push(format!("job {name}: data pool is not floor(rho * price)"));
        }
        if s.data_pool + s.compute_pool != job.price || s.refund != 0 {
            v.push(format!("job {name}: pools do not sum to the price"));
        }
        let workers: u64 = s.worker_payments.values().map(|p| p.amount).sum();
        let dividends: u64 = s.dividends.values().sum();
        if workers > s.compute_pool || dividends > s.data_pool {
            v.push(format!("job {name}: payouts exceed their pool"));
        }
    } else if s.refund != job.price {
        v.push(format!("job {name}: failed job was not fully refunded"));
    }
}

fn check_exposure(job: &JobReport, v: &mut Vec<String>) {
    let name = &job.name;
    let eps = match parse_fraction(&job.exposure_cap) {
        Ok(e) => e,
        Err(e) => {
            v.push(format!("job {name}: bad exposure cap: {e}"));
            return;
        }
    };
    let cap = fraction::mul_floor(eps, job.total_shards as u64) as usize;
    if cap != job.shape.cap {
        v.push(format!(
            "job {name}: shape cap {} != floor(eps * N) = {cap}",
            job.shape.cap
        ));
    }
    let mut max = 0;
    for (w, shards) in &job.exposure {
        max = max.max(shards.len());
        if shards.len() > cap {
            v.push(format!(
                "job {name}: {w} saw {} shards, cap {cap}",
                shards.len()
            ));
        }
    }
    if max != job.max_exposure {
        v.push(format!(
            "job {name}: max exposure {} != recorded {max}",
            job.max_exposure
        ));
    }
    for (w, leaked) in &job.run.exfiltrated {
        let seen: BTreeSet<ShardId> = job
            .exposure
            .get(w)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        if !leaked.is_subset(&seen) {
            v.push(format!(
                "job {name}: {w} exfiltrated shards it was never sent"
            ));
        }
        if leaked.len() > cap {
            v.push(format!(
                "job {name}: {w} exfiltrated {} shards, cap {cap}",
                leaked.len()
            ));
        }
    }
}

fn check_plans(job: &JobReport, trusted: &BTreeSet<WorkerId>, v: &mut Vec<String>) {
    let name = &job.name;
    let shape = job.shape;
    let all: BTreeSet<ShardId> = (0..job.total_shards as ShardId).collect();
    let mut roles: BTreeMap<WorkerId, (usize, usize)> = BTreeMap::new();
    for plan in &job.run.plans {
        let at = format!("job {name} epoch {} attempt {}", plan.epoch, plan.attempt);
        if plan.assignments.len() != shape.workers_needed() {
            v.push(format!(
                "{at}: {} assignments for {} slots",
                plan.assignments.len(),
                shape.workers_needed()
            ));
        }
        let mut covered: BTreeMap<(usize, usize), Vec<ShardId>> = BTreeMap::new();
        let mut workers = BTreeSet::new();
        for a in &plan.assignments {
            if trusted.contains(&a.worker_id) {
                v.push(format!(
                    "{at}: trusted {} holds a training slot",
                    a.worker_id
                ));
            }
            if !workers.insert(a.worker_id) {
                v.push(format!("{at}: {} holds two slots", a.worker_id));
            }
            let role = (a.group_index, a.segment_index);
            if *roles.entry(a.worker_id).or_insert(role) != role {
                v.push(format!("{at}: {} changed role", a.worker_id));
            }
            covered.entry(role).or_default().extend(&a.shard_ids);
        }
        for g in 0..shape.groups {
            for s in 0..shape.segments {
                let mut shards = covered.remove(&(g, s)).unwrap_or_default();
                let n = shards.len();
                shards.sort_unstable();
                shards.dedup();
                if n != shards.len() || shards.into_iter().collect::<BTreeSet<_>>() != all {
                    v.push(format!(
                        "{at}: group {g} segment {s} does not cover every shard once"
                    ));
                }
            }
        }
        if !covered.is_empty() {
            v.push(format!("{at}: assignments outside the job shape"));
        }
    }
    for (w, role) in &job.roles {
        if roles.get(w).is_some_and(|r| r != role) {
            v.push(format!(
                "job {name}: recorded role of {w} differs from its plans"
            ));
        }
    }
}

fn check_verdicts(job: &JobReport, blacklist: &BTreeSet<WorkerId>, v: &mut Vec<String>) {
    let name = &job.name;
    let mut last_accepted = None;
    let mut accepted = 0;
    let mut banned = BTreeSet::new();
    for e in &job.run.epochs {
        let at = format!("job {name} epoch {} attempt {}", e.epoch, e.attempt);
        match verify_results(&e.results) {
            Ok(verdict) if verdict == e.verdict => {}
            Ok(verdict) => v.push(format!(
                "{at}: recorded {:?}, recomputed {verdict:?}",
                e.verdict
            )),
            Err(err) => v.push(format!("{at}: {err}")),
        }
        match &e.verdict {
            Verdict::Accepted { digest } => {
                accepted += 1;
                last_accepted = Some(*digest);
                if e.decision.is_some() {
                    v.push(format!(
                        "{at}: accepted epoch carries a divergence decision"
                    ));
                }
            }
            Verdict::Divergence { .. } => match &e.decision {
                Some(DivergenceDecision::Retry { blacklisted })
                | Some(DivergenceDecision::Fail { blacklisted }) => banned.extend(blacklisted),
                None => v.push(format!("{at}: divergence without a decision")),
            },
        }
    }
    if job.run.verified {
        if accepted != job.epochs as usize {
            v.push(format!(
                "job {name}: {accepted} accepted epochs of {}",
                job.epochs
            ));
        }
        if job.run.final_digest != last_accepted {
            v.push(format!(
                "job {name}: final digest is not the last accepted digest"
            ));
        }
    }
    for w in &banned {
        if !blacklist.contains(w) {
            v.push(format!(
                "job {name}: {w} was blacklisted but is missing from the blacklist"
            ));
        }
        if job.settlement.worker_payments.contains_key(w) {
            v.push(format!("job {name}: blacklisted {w} was paid"));
        }
    }
}
