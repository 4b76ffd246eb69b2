//! World builder and monolithic oracle shared by the protocol-level tests.
#![allow(dead_code)]

pub mod fd;

use databright::compute_market::{epoch_order, ComputeMarket, JobId, JobSpec, Shape};
use databright::coordinator::{run_job, JobRun, Payload};
use databright::data_market::{AssociationConfig, DataAssociation, FinalizeOutcome};
use databright::ledger::{sha256, Ledger, TokenClass};
use databright::model_split::data::Dataset;
use databright::model_split::{init_model, monolithic, Tensor};
use databright::simnet::{LatencyModel, Simulator};
use databright::verification::ExposureTracker;

pub struct Setup {
    pub ledger: Ledger,
    pub assoc: DataAssociation,
    pub market: ComputeMarket,
    pub sim: Simulator<Payload>,
    pub tracker: ExposureTracker,
    pub job: JobId,
}

pub fn setup(untrusted: usize, job: JobSpec, latency: LatencyModel) -> Setup {
    let mut ledger = Ledger::new(3);
    let treasury = ledger.create_account();
    let escrow = ledger.create_account();
    let user = ledger.create_account();
    let curator = ledger.create_account();
    ledger.mint(TokenClass::Credit, user, job.price).unwrap();
    ledger.mint(TokenClass::Curator, curator, 1).unwrap();
    let mut assoc = DataAssociation::new(AssociationConfig::default(), treasury).unwrap();
    let db = assoc.create_database(&mut ledger, user, "d", 1).unwrap();
    let p = assoc
        .submit_proposal(&mut ledger, curator, db, [9; 32])
        .unwrap();
    assoc.cast_vote(&mut ledger, curator, p, true).unwrap();
    assert!(matches!(
        assoc.tally_and_finalize(&mut ledger, p).unwrap(),
        FinalizeOutcome::Accepted(_)
    ));
    let mut market = ComputeMarket::new(escrow, treasury);
    let mut sim = Simulator::new(latency);
    let owner = ledger.create_account();
    let id = market
        .register_worker(&ledger, owner, true, 1000.0)
        .unwrap();
    sim.register(id, true);
    for _ in 0..untrusted {
        let id = market
            .register_worker(&ledger, owner, false, 1000.0)
            .unwrap();
        sim.register(id, false);
    }
    let job = market.submit_job(&mut ledger, &assoc, user, job).unwrap();
    Setup {
        ledger,
        assoc,
        market,
        sim,
        tracker: ExposureTracker::new(),
        job,
    }
}

pub fn run(s: &mut Setup) -> JobRun {
    let digest = s.ledger.registry_digest();
    run_job(&mut s.sim, &mut s.market, &mut s.tracker, s.job, digest).unwrap()
}

/// Monolithic training over the same data and shard order.
pub fn oracle(s: &Setup) -> [u8; 32] {
    let job = s.market.job(s.job).unwrap();
    let spec = &job.spec;
    let shape = Shape::of(spec);
    let seed = sha256(&[&spec.seed.to_le_bytes(), &s.ledger.registry_digest()]);
    let data = Dataset::synthetic(
        u64::from_le_bytes(seed[..8].try_into().unwrap()),
        spec.shards * spec.batch_size,
        spec.model.input_width(),
        spec.model.output_width(),
        spec.model.loss,
    );
    let mut params = init_model(&spec.model).unwrap();
    let mut digest = params.digest();
    for epoch in 0..spec.epochs {
        let batches: Vec<(Tensor, Tensor)> = epoch_order(&shape, spec.shards, spec.seed, epoch)
            .into_iter()
            .map(|k| data.batch(k as usize, spec.batch_size))
            .collect();
        digest = monolithic::train_epoch(
            &mut params,
            batches.iter().map(|(x, t)| (x, t)),
            spec.model.loss,
            spec.model.learning_rate,
        )
        .unwrap()
        .1;
    }
    digest
}
