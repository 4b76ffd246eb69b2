//! Scenario runner behind the `databright` binary.

pub mod report;
pub mod scenario;
pub mod verify;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::compute_market::{derive_seed, ComputeMarket, JobSpec, Protections};
use crate::coordinator::{run_job, schedule_seed, Payload};
use crate::data_market::{AssociationConfig, DataAssociation, DatabaseId, ProposalId};
use crate::ledger::{sha256, AccountId, Ledger};
use crate::simnet::{FaultSpec, Simulator, WorkerId};
use crate::verification::ExposureTracker;

pub use report::RunReport;
pub use scenario::{Scenario, ScenarioError};
pub use verify::verify_report;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CliError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Scenario(_) | CliError::Io(_) => 1,
            CliError::Protocol(_) => 2,
        }
    }
}

fn protocol(ctx: impl std::fmt::Display, e: impl std::fmt::Display) -> CliError {
    CliError::Protocol(format!("{ctx}: {e}"))
}

fn invalid(msg: String) -> CliError {
    CliError::Scenario(ScenarioError::Validation(msg))
}

/// Dataset reference for a scenario dataset label.
pub fn dataset_ref(label: &str) -> [u8; 32] {
    sha256(&[b"databright/dataset/v1", label.as_bytes()])
}

/// Parses, validates and executes a scenario.
pub fn run_scenario(text: &str, seed_override: Option<u64>) -> Result<RunReport, CliError> {
    let mut sc = Scenario::parse(text)?;
    if let Some(seed) = seed_override {
        sc.scenario.seed = seed;
    }
    let seed = sc.scenario.seed;
    let mut ledger = Ledger::new(seed);
    let mut names: BTreeMap<String, AccountId> = BTreeMap::new();
    let treasury = ledger.create_account();
    let escrow = ledger.create_account();
    names.insert("treasury".into(), treasury);
    names.insert("escrow".into(), escrow);
    for name in &sc.ledger.accounts {
        names.insert(name.clone(), ledger.create_account());
    }
    for m in &sc.ledger.mint {
        let class = scenario::parse_class(&m.class)?;
        ledger
            .mint(class, names[&m.account], m.amount)
            .map_err(|e| protocol("mint", e))?;
    }

    let mut config = AssociationConfig {
        initiator_endowment: sc.data_market.initiator_endowment,
        ..AssociationConfig::default()
    };
    if let Some(theta) = sc.threshold()? {
        config.threshold = theta;
    }
    let mut assoc =
        DataAssociation::new(config, treasury).map_err(|e| invalid(format!("data_market: {e}")))?;
    let mut market = ComputeMarket::new(escrow, treasury);
    let mut sim: Simulator<Payload> = Simulator::new(sc.simnet.latency());
    for def in &sc.workers {
        for _ in 0..def.count {
            let id = market
                .register_worker(&ledger, names[&def.owner], def.trusted, def.rate)
                .map_err(|e| invalid(format!("worker: {e}")))?;
            sim.register(id, def.trusted);
        }
    }

    let mut databases: BTreeMap<String, DatabaseId> = BTreeMap::new();
    for d in &sc.databases {
        let id = assoc
            .create_database(
                &mut ledger,
                names[&d.initiator],
                &d.description,
                d.expected_shards,
            )
            .map_err(|e| protocol(format!("database {}", d.name), e))?;
        databases.insert(d.name.clone(), id);
    }

    let mut proposals: BTreeMap<String, ProposalId> = BTreeMap::new();
    let mut proposal_meta = Vec::new();
    for (i, action) in sc.actions.iter().enumerate() {
        let ctx = format!("action {}", i + 1);
        use scenario::Action;
        match action {
            Action::Propose {
                id,
                contributor,
                database,
                dataset,
            } => {
                let pid = assoc
                    .submit_proposal(
                        &mut ledger,
                        names[contributor],
                        databases[database],
                        dataset_ref(dataset),
                    )
                    .map_err(|e| protocol(&ctx, e))?;
                proposals.insert(id.clone(), pid);
                proposal_meta.push((id.clone(), pid, database.clone(), contributor.clone()));
            }
            Action::Delegate { from, to, expiry } => assoc
                .delegate_votes(&mut ledger, names[from], names[to], *expiry)
                .map_err(|e| protocol(&ctx, e))?,
            Action::Vote {
                proposal,
                voters,
                approve,
            } => {
                for v in voters {
                    assoc
                        .cast_vote(&mut ledger, names[v], proposals[proposal], *approve)
                        .map_err(|e| protocol(format!("{ctx} ({v})"), e))?;
                }
            }
            Action::Finalize { proposal } => {
                assoc
                    .tally_and_finalize(&mut ledger, proposals[proposal])
                    .map_err(|e| protocol(&ctx, e))?;
            }
            Action::Transfer {
                class,
                from,
                to,
                amount,
            } => {
                let class = scenario::parse_class(class)?;
                ledger
                    .transfer(class, names[from], names[to], *amount)
                    .map_err(|e| protocol(&ctx, e))?;
            }
        }
    }

    for f in sc.faults.iter().filter(|f| f.worker.is_some()) {
        let spec = FaultSpec {
            worker: WorkerId(f.worker.expect("filtered")),
            kind: f.kind,
            epoch: f.epoch,
            step: f.step,
        };
        sim.inject_fault(spec)
            .map_err(|e| invalid(format!("fault: {e}")))?;
    }

    let mut tracker = ExposureTracker::new();
    let mut job_reports = Vec::new();
    for (i, def) in sc.jobs.iter().enumerate() {
        let ctx = format!("job {}", def.name);
        let spec = JobSpec {
            database_id: databases[&def.database],
            model: sc.model_spec(i),
            epochs: def.epochs,
            batch_size: def.batch_size,
            shards: def.shards,
            price: def.price,
            data_share: sc.job_data_share(def)?,
            protections: Protections {
                tmr: def.tmr,
                cut_points: def.cut_points.clone(),
                exposure_cap: sc.job_exposure_cap(def)?,
            },
            seed: derive_seed("job", &[seed, i as u64]),
        };
        let job_seed = spec.seed;
        let job_id = market
            .submit_job(&mut ledger, &assoc, names[&def.user], spec)
            .map_err(|e| protocol(&ctx, e))?;

        // Role-addressed faults resolve against the job's first plan.
        let role_faults: Vec<_> = sc
            .faults
            .iter()
            .filter(|f| f.job.as_deref() == Some(def.name.as_str()))
            .collect();
        if !role_faults.is_empty() {
            let plan = market
                .clone()
                .schedule(job_id, schedule_seed(job_seed, job_id))
                .map_err(|e| protocol(&ctx, e))?;
            for f in role_faults {
                let worker = plan
                    .iter()
                    .find(|a| {
                        (a.group_index, a.segment_index, a.block) == (f.group, f.segment, f.block)
                    })
                    .map(|a| a.worker_id)
                    .ok_or_else(|| {
                        invalid(format!(
                            "fault: {ctx} has no slot (group {}, segment {}, block {})",
                            f.group, f.segment, f.block
                        ))
                    })?;
                sim.inject_fault(FaultSpec {
                    worker,
                    kind: f.kind,
                    epoch: f.epoch,
                    step: f.step,
                })
                .map_err(|e| invalid(format!("fault: {e}")))?;
            }
        }

        let run = run_job(
            &mut sim,
            &mut market,
            &mut tracker,
            job_id,
            ledger.registry_digest(),
        )
        .map_err(|e| protocol(&ctx, e))?;
        let settlement = market
            .settle(&mut ledger, &assoc, job_id, run.verified)
            .map_err(|e| protocol(&ctx, e))?;
        job_reports.push(report::job_report(
            def, &names, &market, &tracker, &sim, run, settlement,
        )?);
    }

    ledger.verify_chain().map_err(|e| protocol("ledger", e))?;
    Ok(report::build(
        &sc,
        &ledger,
        &assoc,
        &market,
        &names,
        &databases,
        &proposal_meta,
        job_reports,
        sim.now(),
    ))
}
