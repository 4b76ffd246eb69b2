//! Run report: a human-readable summary followed by a marker line and the
//! full machine-readable record as JSON.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::scenario::{JobDef, Scenario};
use super::CliError;
use crate::compute_market::{
    ComputeMarket, JobState, SettlementRecord, Shape, ShardId, WorkerStatus,
};
use crate::coordinator::{FaultEvent, JobRun, Payload};
use crate::data_market::{DataAssociation, DatabaseId, MarketEvent, ProposalId, ProposalStatus};
use crate::fraction;
use crate::ledger::{AccountId, Ledger, RegistryEntry};
use crate::simnet::{ns_to_ms, Simulator, WorkerId};
use crate::verification::{DivergenceDecision, ExposureTracker, Verdict};

/// Separates the human-readable part from the JSON record.
pub const JSON_MARKER: &str = "--- machine-readable report (json) ---";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    pub end_ns: u64,
    pub accounts: BTreeMap<String, AccountId>,
    pub ledger: LedgerReport,
    /// Non-zero balances: class → account name → amount.
    pub balances: BTreeMap<String, BTreeMap<String, u64>>,
    pub supplies: BTreeMap<String, u64>,
    pub databases: Vec<DatabaseReport>,
    pub proposals: Vec<ProposalReport>,
    pub registry: Vec<RegistryEntry>,
    pub workers: Vec<WorkerReport>,
    pub jobs: Vec<JobReport>,
    pub blacklist: Vec<WorkerId>,
    pub events: Vec<TimedEvent>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub height: u64,
    #[serde(with = "hex::serde")]
    pub head_hash: [u8; 32],
    /// Exported log lines, `height hex(canonical tx)`.
    pub log: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseReport {
    pub name: String,
    pub database_id: u64,
    pub initiator_endowment: u64,
    pub accepted_entries: Vec<u64>,
    pub shareholders: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalReport {
    pub label: String,
    pub proposal_id: u64,
    pub database: String,
    pub contributor: String,
    pub status: ProposalStatus,
    pub yes_power: u64,
    pub no_power: u64,
    pub supply_snapshot: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker_id: WorkerId,
    pub owner: String,
    pub trusted: bool,
    pub rate: f64,
    pub status: WorkerStatus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountingReport {
    pub compute_ms: f64,
    pub comm_ms: f64,
    pub scheduling_ms: f64,
    pub compute_ns: u64,
    pub comm_ns: u64,
    pub scheduling_ns: u64,
    pub messages: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobReport {
    pub name: String,
    pub job_id: u64,
    pub user: String,
    pub database: String,
    pub tmr: bool,
    pub cut_points: Vec<usize>,
    pub exposure_cap: String,
    pub data_share: String,
    pub epochs: u32,
    pub total_shards: usize,
    pub price: u64,
    pub state: JobState,
    pub shape: Shape,
    pub slots_per_step: usize,
    pub work_units: f64,
    pub baseline_work_units: f64,
    pub overhead_factor: f64,
    pub accounting: AccountingReport,
    /// Layer-batches processed per worker.
    pub work: BTreeMap<WorkerId, u64>,
    /// (group, segment) held by each worker.
    pub roles: BTreeMap<WorkerId, (usize, usize)>,
    pub exposure: BTreeMap<WorkerId, Vec<ShardId>>,
    pub max_exposure: usize,
    pub run: JobRun,
    pub settlement: SettlementRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub at_ns: u64,
    pub event: ReportEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ReportEvent {
    Market {
        record: MarketEvent,
    },
    PlanIssued {
        job: u64,
        epoch: u32,
        attempt: u32,
        workers: usize,
    },
    EpochConcluded {
        job: u64,
        epoch: u32,
        attempt: u32,
        timed_out: bool,
        verdict: Verdict,
    },
    Blacklisted {
        job: u64,
        workers: Vec<WorkerId>,
    },
    FaultFired {
        job: u64,
        fault: FaultEvent,
    },
    JobFinished {
        job: u64,
        verified: bool,
        failure: Option<String>,
    },
}

fn ms(ns: u64) -> String {
    format!("{:.3}", ns_to_ms(ns))
}

impl RunReport {
    pub fn account_name(&self, id: &AccountId) -> String {
        self.accounts
            .iter()
            .find(|(_, a)| *a == id)
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| id.short())
    }

    /// Human-readable summary, the marker line, then pretty JSON.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let w = &mut out;
        let _ = writeln!(
            w,
            "scenario {}  seed {}  simulated end {} ms",
            self.scenario,
            self.seed,
            ms(self.end_ns)
        );
        let _ = writeln!(
            w,
            "ledger height {}  head {}",
            self.ledger.height,
            hex::encode(self.ledger.head_hash)
        );

        let _ = writeln!(w, "\n== proposals ==");
        let _ = writeln!(
            w,
            "{:<10} {:>4} {:<12} {:<12} {:>5} {:>5} {:>8}",
            "label", "id", "contributor", "status", "yes", "no", "snapshot"
        );
        for p in &self.proposals {
            let _ = writeln!(
                w,
                "{:<10} {:>4} {:<12} {:<12} {:>5} {:>5} {:>8}",
                p.label,
                p.proposal_id,
                p.contributor,
                format!("{:?}", p.status).to_lowercase(),
                p.yes_power,
                p.no_power,
                p.supply_snapshot
            );
        }

        let _ = writeln!(w, "\n== shareholders ==");
        for d in &self.databases {
            let holders: Vec<String> = d
                .shareholders
                .iter()
                .map(|(n, s)| format!("{n}:{s}"))
                .collect();
            let _ = writeln!(
                w,
                "{} (db {}): {}",
                d.name,
                d.database_id,
                holders.join(" ")
            );
        }

        let _ = writeln!(w, "\n== jobs ==");
        let _ = writeln!(
            w,
            "{:<12} {:>3} {:>6} {:>10} {:>10} {:>8} {:>10} {:>12} {:>12} {:>12} {:>8}  result",
            "job",
            "tmr",
            "cuts",
            "work",
            "baseline",
            "overhead",
            "slots/step",
            "compute_ms",
            "comm_ms",
            "sched_ms",
            "max_exp"
        );
        for j in &self.jobs {
            let result = match &j.state {
                JobState::Verified => "verified".to_string(),
                JobState::Failed(why) => format!("failed: {why}"),
                other => format!("{other:?}").to_lowercase(),
            };
            let _ = writeln!(
                w,
                "{:<12} {:>3} {:>6} {:>10} {:>10} {:>8} {:>10} {:>12} {:>12} {:>12} {:>8}  {}",
                j.name,
                if j.tmr { "on" } else { "off" },
                format!("{:?}", j.cut_points),
                j.work_units,
                j.baseline_work_units,
                format!("{:.1}", j.overhead_factor),
                j.slots_per_step,
                format!("{:.3}", j.accounting.compute_ms),
                format!("{:.3}", j.accounting.comm_ms),
                format!("{:.3}", j.accounting.scheduling_ms),
                format!("{}/{}", j.max_exposure, j.shape.cap),
                result
            );
        }

        let _ = writeln!(w, "\n== verification ==");
        for j in &self.jobs {
            for e in &j.run.epochs {
                let verdict = match &e.verdict {
                    Verdict::Accepted { digest } => {
                        format!("accepted {}", &hex::encode(digest)[..16])
                    }
                    Verdict::Divergence { groups } => format!("divergence groups {groups:?}"),
                };
                let timeout = if e.timed_out { " (watchdog)" } else { "" };
                let _ = writeln!(
                    w,
                    "{} epoch {} attempt {}: {}{}  [{} .. {} ms]",
                    j.name,
                    e.epoch,
                    e.attempt,
                    verdict,
                    timeout,
                    ms(e.start_ns),
                    ms(e.end_ns)
                );
            }
            for (worker, shards) in &j.run.exfiltrated {
                let _ = writeln!(
                    w,
                    "{}: {} leaked {} shards (cap {})",
                    j.name,
                    worker,
                    shards.len(),
                    j.shape.cap
                );
            }
        }

        let _ = writeln!(w, "\n== settlements ==");
        for j in &self.jobs {
            let s = &j.settlement;
            let _ = writeln!(
                w,
                "{}: price {} refund {} dividends {} workers {} treasury {}",
                j.name,
                s.price,
                s.refund,
                s.dividends.values().sum::<u64>(),
                s.worker_payments.values().map(|p| p.amount).sum::<u64>(),
                s.treasury_remainder
            );
        }

        let _ = writeln!(w, "\n== balances ==");
        for (class, holders) in &self.balances {
            let list: Vec<String> = holders.iter().map(|(n, v)| format!("{n}:{v}")).collect();
            let _ = writeln!(w, "{class}: {}", list.join(" "));
        }
        let blacklist: Vec<String> = self.blacklist.iter().map(|w| w.to_string()).collect();
        let _ = writeln!(
            w,
            "\nblacklist: {}",
            if blacklist.is_empty() {
                "none".into()
            } else {
                blacklist.join(" ")
            }
        );

        let _ = writeln!(w, "\n{JSON_MARKER}");
        out.push_str(&serde_json::to_string_pretty(self).expect("report serializes"));
        out.push('\n');
        out
    }

    /// Reads the JSON record back out of a rendered report.
    pub fn parse(text: &str) -> Result<Self, String> {
        let json = text
            .split_once(JSON_MARKER)
            .map(|(_, j)| j)
            .ok_or_else(|| "report has no machine-readable section".to_string())?;
        serde_json::from_str(json).map_err(|e| format!("malformed report json: {e}"))
    }
}

fn name_in(names: &BTreeMap<String, AccountId>, id: &AccountId) -> String {
    names
        .iter()
        .find(|(_, a)| *a == id)
        .map(|(n, _)| n.clone())
        .unwrap_or_else(|| id.short())
}

pub(crate) fn job_report(
    def: &JobDef,
    names: &BTreeMap<String, AccountId>,
    market: &ComputeMarket,
    tracker: &ExposureTracker,
    sim: &Simulator<Payload>,
    run: JobRun,
    settlement: SettlementRecord,
) -> Result<JobReport, CliError> {
    let job = market
        .job(run.job_id)
        .map_err(|e| CliError::Protocol(e.to_string()))?;
    let acct = sim.accounting(run.job_id);
    let exposure: BTreeMap<WorkerId, Vec<ShardId>> = tracker
        .records()
        .filter(|(j, _, _)| *j == run.job_id)
        .map(|(_, w, s)| (w, s.iter().copied().collect()))
        .collect();
    let work_units = job.work_units();
    let baseline = job.baseline_work_units();
    Ok(JobReport {
        name: def.name.clone(),
        job_id: run.job_id,
        user: name_in(names, &job.user),
        database: def.database.clone(),
        tmr: job.spec.protections.tmr,
        cut_points: job.spec.protections.cut_points.clone(),
        exposure_cap: fraction::display(job.spec.protections.exposure_cap),
        data_share: fraction::display(job.spec.data_share),
        epochs: job.spec.epochs,
        total_shards: job.spec.shards,
        price: job.spec.price,
        state: job.state.clone(),
        shape: run.shape,
        slots_per_step: run.shape.slots_per_step(),
        work_units,
        baseline_work_units: baseline,
        overhead_factor: work_units / baseline,
        accounting: AccountingReport {
            compute_ms: ns_to_ms(acct.compute_ns),
            comm_ms: ns_to_ms(acct.comm_ns),
            scheduling_ms: ns_to_ms(acct.scheduling_ns),
            compute_ns: acct.compute_ns,
            comm_ns: acct.comm_ns,
            scheduling_ns: acct.scheduling_ns,
            messages: acct.messages,
            bytes: acct.bytes,
        },
        work: job.work.clone(),
        roles: job.roles.clone(),
        max_exposure: exposure.values().map(Vec::len).max().unwrap_or(0),
        exposure,
        run,
        settlement,
    })
}

fn job_events(run: &JobRun) -> Vec<TimedEvent> {
    let job = run.job_id;
    let mut out = Vec::new();
    for p in &run.plans {
        out.push(TimedEvent {
            at_ns: p.issued_ns,
            event: ReportEvent::PlanIssued {
                job,
                epoch: p.epoch,
                attempt: p.attempt,
                workers: p.assignments.len(),
            },
        });
    }
    for f in &run.faults_fired {
        out.push(TimedEvent {
            at_ns: f.at_ns,
            event: ReportEvent::FaultFired { job, fault: *f },
        });
    }
    for e in &run.epochs {
        out.push(TimedEvent {
            at_ns: e.end_ns,
            event: ReportEvent::EpochConcluded {
                job,
                epoch: e.epoch,
                attempt: e.attempt,
                timed_out: e.timed_out,
                verdict: e.verdict.clone(),
            },
        });
        if let Some(
            DivergenceDecision::Retry { blacklisted } | DivergenceDecision::Fail { blacklisted },
        ) = &e.decision
        {
            out.push(TimedEvent {
                at_ns: e.end_ns,
                event: ReportEvent::Blacklisted {
                    job,
                    workers: blacklisted.clone(),
                },
            });
        }
    }
    out.push(TimedEvent {
        at_ns: run.end_ns,
        event: ReportEvent::JobFinished {
            job,
            verified: run.verified,
            failure: run.failure.clone(),
        },
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn build(
    sc: &Scenario,
    ledger: &Ledger,
    assoc: &DataAssociation,
    market: &ComputeMarket,
    names: &BTreeMap<String, AccountId>,
    databases: &BTreeMap<String, DatabaseId>,
    proposals: &[(String, ProposalId, String, String)],
    jobs: Vec<JobReport>,
    end_ns: u64,
) -> RunReport {
    let mut balances: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for (class, account, amount) in ledger.balances() {
        if amount > 0 {
            balances
                .entry(class.to_string())
                .or_default()
                .insert(name_in(names, &account), amount);
        }
    }
    let supplies = ledger
        .classes()
        .map(|(class, supply)| (class.to_string(), supply))
        .collect();
    let database_reports = databases
        .iter()
        .map(|(name, id)| {
            let db = assoc.database(*id).expect("created above");
            DatabaseReport {
                name: name.clone(),
                database_id: *id,
                initiator_endowment: db.initiator_endowment,
                accepted_entries: db.accepted_entries.clone(),
                shareholders: ledger
                    .holders(db.share_class())
                    .into_iter()
                    .map(|(a, s)| (name_in(names, &a), s))
                    .collect(),
            }
        })
        .collect();
    let proposal_reports = proposals
        .iter()
        .map(|(label, pid, database, contributor)| {
            let p = assoc.proposal(*pid).expect("submitted above");
            ProposalReport {
                label: label.clone(),
                proposal_id: *pid,
                database: database.clone(),
                contributor: contributor.clone(),
                status: p.status,
                yes_power: p.yes_power,
                no_power: p.no_power,
                supply_snapshot: p.supply_snapshot,
            }
        })
        .collect();
    let workers = market
        .workers()
        .map(|w| WorkerReport {
            worker_id: w.worker_id,
            owner: name_in(names, &w.owner),
            trusted: w.trusted,
            rate: w.compute_rate,
            status: w.status,
        })
        .collect();
    let mut events: Vec<TimedEvent> = assoc
        .events()
        .iter()
        .map(|e| TimedEvent {
            at_ns: 0,
            event: ReportEvent::Market { record: e.clone() },
        })
        .collect();
    for j in &jobs {
        let mut mine = job_events(&j.run);
        mine.sort_by_key(|e| e.at_ns);
        events.extend(mine);
    }
    RunReport {
        scenario: sc.scenario.name.clone(),
        seed: sc.scenario.seed,
        end_ns,
        accounts: names.clone(),
        ledger: LedgerReport {
            height: ledger.height(),
            head_hash: ledger.head_hash(),
            log: ledger.export_log().lines().map(str::to_owned).collect(),
        },
        balances,
        supplies,
        databases: database_reports,
        proposals: proposal_reports,
        registry: ledger.registry().to_vec(),
        workers,
        jobs,
        blacklist: market.blacklisted(),
        events,
    }
}
