//! The data association: databases, proposals, token-weighted curation with
//! delegation to oracles, shareholder minting and dividend payout.
//!
//! Rules enforced here:
//!
//! * Voting power is measured against curator balances captured when the
//!   proposal is submitted. Tokens minted or moved afterwards do not enter
//!   that proposal's tally.
//! * A proposal is accepted when `yes > θ·snapshot` (strict) and rejected
//!   when `no >= (1-θ)·snapshot`; both outcomes are terminal.
//! * While a delegation is active the delegator cannot vote; the delegate
//!   votes with its own snapshot balance plus the snapshot balances of its
//!   active delegators. Delegated power is never forwarded a second hop.
//! * Acceptance appends one registry entry, mints one curator token and one
//!   database share to the contributor.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fraction::{self, Fraction};
use crate::ledger::{AccountId, Digest, Encoder, Ledger, LedgerError, RegistryEntry, TokenClass};

pub type DatabaseId = u64;
pub type ProposalId = u64;
pub type RequestId = u64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MarketError {
    #[error("unknown account {0:?}")]
    UnknownAccount(AccountId),
    #[error("unknown database {0}")]
    UnknownDatabase(DatabaseId),
    #[error("unknown proposal {0}")]
    UnknownProposal(ProposalId),
    #[error("dataset reference is empty")]
    EmptyDatasetRef,
    #[error("dataset {} is already pending or accepted in database {database}", hex::encode(&.dataset_ref[..8]))]
    DuplicateDatasetRef {
        database: DatabaseId,
        dataset_ref: Digest,
    },
    #[error("{0:?} already has an active delegation")]
    AlreadyDelegated(AccountId),
    #[error("{0:?} holds no curator tokens")]
    NoTokens(AccountId),
    #[error("an account cannot delegate to itself")]
    SelfDelegation,
    #[error("delegation expiry {expiry} is below the current height {height}")]
    ExpiryInPast { expiry: u64, height: u64 },
    #[error("{voter:?} already voted on proposal {proposal}")]
    AlreadyVoted {
        voter: AccountId,
        proposal: ProposalId,
    },
    #[error("{0:?} has no voting power on this proposal")]
    NoVotingPower(AccountId),
    #[error("proposal {0} is closed")]
    ProposalClosed(ProposalId),
    #[error("{0:?} delegated its votes away")]
    DelegatedAway(AccountId),
    #[error("database {0} has no shareholders")]
    NoShareholders(DatabaseId),
    #[error("fraction {0} outside [0, 1]")]
    InvalidFraction(String),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

pub type Result<T, E = MarketError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataRequest {
    pub request_id: RequestId,
    pub initiator: AccountId,
    pub description: String,
    pub shard_count_expected: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposalStatus {
    Pending,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataProposal {
    pub proposal_id: ProposalId,
    pub request_id: RequestId,
    pub database_id: DatabaseId,
    pub contributor_wallet: AccountId,
    pub dataset_ref: Digest,
    pub status: ProposalStatus,
    pub yes_power: u64,
    pub no_power: u64,
    pub supply_snapshot: u64,
    /// Accounts that cast a vote.
    pub voters: BTreeSet<AccountId>,
    /// Accounts whose snapshot balance has entered the tally, directly or
    /// through a delegate.
    counted: BTreeSet<AccountId>,
    snapshot: BTreeMap<AccountId, u64>,
}

impl DataProposal {
    pub fn snapshot_balance(&self, account: &AccountId) -> u64 {
        self.snapshot.get(account).copied().unwrap_or(0)
    }

    pub fn is_counted(&self, account: &AccountId) -> bool {
        self.counted.contains(account)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delegation {
    pub delegator: AccountId,
    pub delegate: AccountId,
    pub expiry_height: u64,
}

impl Delegation {
    /// Active up to and including `expiry_height`.
    pub fn is_active(&self, height: u64) -> bool {
        height <= self.expiry_height
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Database {
    pub database_id: DatabaseId,
    pub request: DataRequest,
    /// Registry entry ids of accepted proposals, in acceptance order.
    pub accepted_entries: Vec<u64>,
    pub proposals: Vec<ProposalId>,
    pub initiator_endowment: u64,
}

impl Database {
    pub fn share_class(&self) -> TokenClass {
        TokenClass::Share(self.database_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AssociationConfig {
    /// Acceptance threshold θ in (0, 1].
    pub threshold: Fraction,
    /// Shares minted to a database's initiator on creation.
    pub initiator_endowment: u64,
}

impl Default for AssociationConfig {
    fn default() -> Self {
        Self {
            threshold: Fraction::new(1, 2),
            initiator_endowment: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteReceipt {
    pub proposal_id: ProposalId,
    pub voter: AccountId,
    pub approve: bool,
    pub power: u64,
    pub yes_power: u64,
    pub no_power: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FinalizeOutcome {
    Accepted(RegistryEntry),
    Rejected,
    StillPending,
}

/// Records emitted for the run report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarketEvent {
    DatabaseCreated {
        height: u64,
        database_id: DatabaseId,
        initiator: AccountId,
    },
    ProposalSubmitted {
        height: u64,
        proposal_id: ProposalId,
        database_id: DatabaseId,
        contributor: AccountId,
        supply_snapshot: u64,
    },
    Delegated {
        height: u64,
        delegator: AccountId,
        delegate: AccountId,
        expiry_height: u64,
    },
    VoteCast {
        height: u64,
        proposal_id: ProposalId,
        voter: AccountId,
        approve: bool,
        power: u64,
        yes_power: u64,
        no_power: u64,
    },
    Finalized {
        height: u64,
        proposal_id: ProposalId,
        status: ProposalStatus,
        yes_power: u64,
        no_power: u64,
        supply_snapshot: u64,
        entry_id: Option<u64>,
    },
}

/// Integer partition of one payment between data shareholders, the
/// association treasury and the compute side.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DividendSplit {
    pub data_pool: u64,
    pub payouts: BTreeMap<AccountId, u64>,
    pub treasury_remainder: u64,
    pub compute_portion: u64,
}

impl DividendSplit {
    pub fn total(&self) -> u64 {
        self.payouts.values().sum::<u64>() + self.treasury_remainder + self.compute_portion
    }
}

/// `data_pool = floor(ρ·payment)`, each holder gets
/// `floor(data_pool·shares_i/Σshares)`, the data-pool remainder goes to the
/// treasury and `payment - data_pool` is the compute portion.
pub fn split_dividend(
    shares: &[(AccountId, u64)],
    payment: u64,
    data_share: Fraction,
) -> Option<DividendSplit> {
    if data_share > Fraction::new(1, 1) {
        return None;
    }
    let total: u128 = shares.iter().map(|(_, s)| u128::from(*s)).sum();
    if total == 0 {
        return None;
    }
    let data_pool = fraction::mul_floor(data_share, payment);
    let mut payouts = BTreeMap::new();
    let mut paid = 0u64;
    for (account, s) in shares {
        let amount = (u128::from(data_pool) * u128::from(*s) / total) as u64;
        paid += amount;
        *payouts.entry(*account).or_insert(0) += amount;
    }
    Some(DividendSplit {
        data_pool,
        payouts,
        treasury_remainder: data_pool - paid,
        compute_portion: payment - data_pool,
    })
}

#[derive(Debug, Clone)]
pub struct DataAssociation {
    config: AssociationConfig,
    treasury: AccountId,
    databases: BTreeMap<DatabaseId, Database>,
    proposals: BTreeMap<ProposalId, DataProposal>,
    delegations: BTreeMap<AccountId, Delegation>,
    events: Vec<MarketEvent>,
}

impl DataAssociation {
    /// `threshold` must lie in (0, 1].
    pub fn new(config: AssociationConfig, treasury: AccountId) -> Result<Self> {
        let t = config.threshold;
        if *t.numer() == 0 || t > Fraction::new(1, 1) {
            return Err(MarketError::InvalidFraction(fraction::display(t)));
        }
        Ok(Self {
            config,
            treasury,
            databases: BTreeMap::new(),
            proposals: BTreeMap::new(),
            delegations: BTreeMap::new(),
            events: Vec::new(),
        })
    }

    pub fn config(&self) -> &AssociationConfig {
        &self.config
    }

    pub fn treasury(&self) -> AccountId {
        self.treasury
    }

    pub fn databases(&self) -> impl Iterator<Item = &Database> {
        self.databases.values()
    }

    pub fn database(&self, id: DatabaseId) -> Result<&Database> {
        self.databases
            .get(&id)
            .ok_or(MarketError::UnknownDatabase(id))
    }

    pub fn proposal(&self, id: ProposalId) -> Result<&DataProposal> {
        self.proposals
            .get(&id)
            .ok_or(MarketError::UnknownProposal(id))
    }

    pub fn proposals(&self) -> impl Iterator<Item = &DataProposal> {
        self.proposals.values()
    }

    pub fn delegation(&self, delegator: &AccountId) -> Option<&Delegation> {
        self.delegations.get(delegator)
    }

    pub fn events(&self) -> &[MarketEvent] {
        &self.events
    }

    fn require_account(ledger: &Ledger, id: &AccountId) -> Result<()> {
        if ledger.account_exists(id) {
            Ok(())
        } else {
            Err(MarketError::UnknownAccount(*id))
        }
    }

    pub fn create_database(
        &mut self,
        ledger: &mut Ledger,
        initiator: AccountId,
        description: &str,
        shard_count_expected: u64,
    ) -> Result<DatabaseId> {
        Self::require_account(ledger, &initiator)?;
        let database_id = self.databases.len() as DatabaseId + 1;
        let mut body = Encoder::new();
        body.u64(database_id)
            .digest(initiator.as_bytes())
            .str(description)
            .u64(shard_count_expected);
        let (height, _) = ledger.note("market/database", body.finish())?;
        let endowment = self.config.initiator_endowment;
        if endowment > 0 {
            ledger.mint(TokenClass::Share(database_id), initiator, endowment)?;
        }
        self.databases.insert(
            database_id,
            Database {
                database_id,
                request: DataRequest {
                    request_id: database_id,
                    initiator,
                    description: description.to_owned(),
                    shard_count_expected,
                },
                accepted_entries: Vec::new(),
                proposals: Vec::new(),
                initiator_endowment: endowment,
            },
        );
        self.events.push(MarketEvent::DatabaseCreated {
            height,
            database_id,
            initiator,
        });
        Ok(database_id)
    }

    pub fn submit_proposal(
        &mut self,
        ledger: &mut Ledger,
        contributor: AccountId,
        database_id: DatabaseId,
        dataset_ref: Digest,
    ) -> Result<ProposalId> {
        Self::require_account(ledger, &contributor)?;
        let db = self.database(database_id)?;
        if dataset_ref == [0u8; 32] {
            return Err(MarketError::EmptyDatasetRef);
        }
        let duplicate = db.proposals.iter().any(|pid| {
            let p = &self.proposals[pid];
            p.dataset_ref == dataset_ref && p.status != ProposalStatus::Rejected
        });
        if duplicate {
            return Err(MarketError::DuplicateDatasetRef {
                database: database_id,
                dataset_ref,
            });
        }
        let request_id = db.request.request_id;
        let proposal_id = self.proposals.len() as ProposalId + 1;
        let snapshot: BTreeMap<_, _> = ledger.holders(TokenClass::Curator).into_iter().collect();
        let supply_snapshot = ledger.total_supply(TokenClass::Curator);

        let mut body = Encoder::new();
        body.u64(proposal_id)
            .u64(database_id)
            .digest(contributor.as_bytes())
            .digest(&dataset_ref)
            .u64(supply_snapshot);
        let (height, _) = ledger.note("market/proposal", body.finish())?;

        self.proposals.insert(
            proposal_id,
            DataProposal {
                proposal_id,
                request_id,
                database_id,
                contributor_wallet: contributor,
                dataset_ref,
                status: ProposalStatus::Pending,
                yes_power: 0,
                no_power: 0,
                supply_snapshot,
                voters: BTreeSet::new(),
                counted: BTreeSet::new(),
                snapshot,
            },
        );
        self.databases
            .get_mut(&database_id)
            .expect("checked above")
            .proposals
            .push(proposal_id);
        self.events.push(MarketEvent::ProposalSubmitted {
            height,
            proposal_id,
            database_id,
            contributor,
            supply_snapshot,
        });
        Ok(proposal_id)
    }

    pub fn delegate_votes(
        &mut self,
        ledger: &mut Ledger,
        delegator: AccountId,
        oracle: AccountId,
        expiry_height: u64,
    ) -> Result<()> {
        Self::require_account(ledger, &delegator)?;
        Self::require_account(ledger, &oracle)?;
        if delegator == oracle {
            return Err(MarketError::SelfDelegation);
        }
        let height = ledger.height();
        if self
            .delegations
            .get(&delegator)
            .is_some_and(|d| d.is_active(height))
        {
            return Err(MarketError::AlreadyDelegated(delegator));
        }
        if ledger.balance(TokenClass::Curator, &delegator) == 0 {
            return Err(MarketError::NoTokens(delegator));
        }
        if expiry_height < height {
            return Err(MarketError::ExpiryInPast {
                expiry: expiry_height,
                height,
            });
        }
        let mut body = Encoder::new();
        body.digest(delegator.as_bytes())
            .digest(oracle.as_bytes())
            .u64(expiry_height);
        let (height, _) = ledger.note("market/delegate", body.finish())?;
        self.delegations.insert(
            delegator,
            Delegation {
                delegator,
                delegate: oracle,
                expiry_height,
            },
        );
        self.events.push(MarketEvent::Delegated {
            height,
            delegator,
            delegate: oracle,
            expiry_height,
        });
        Ok(())
    }

    /// Delegators whose delegation to `delegate` is active at `height`.
    fn inbound(&self, delegate: &AccountId, height: u64) -> Vec<AccountId> {
        self.delegations
            .values()
            .filter(|d| d.delegate == *delegate && d.is_active(height))
            .map(|d| d.delegator)
            .collect()
    }

    /// Power `voter` would cast on `proposal_id` right now, and the accounts
    /// whose snapshot balances make it up.
    pub fn effective_power(
        &self,
        ledger: &Ledger,
        voter: &AccountId,
        proposal_id: ProposalId,
    ) -> Result<(u64, Vec<AccountId>)> {
        let proposal = self.proposal(proposal_id)?;
        let height = ledger.height();
        if proposal.status != ProposalStatus::Pending {
            return Err(MarketError::ProposalClosed(proposal_id));
        }
        if proposal.counted.contains(voter) {
            return Err(MarketError::AlreadyVoted {
                voter: *voter,
                proposal: proposal_id,
            });
        }
        if self
            .delegations
            .get(voter)
            .is_some_and(|d| d.is_active(height))
        {
            return Err(MarketError::DelegatedAway(*voter));
        }
        let mut sources = vec![*voter];
        sources.extend(
            self.inbound(voter, height)
                .into_iter()
                .filter(|d| !proposal.counted.contains(d)),
        );
        let power = sources.iter().map(|a| proposal.snapshot_balance(a)).sum();
        Ok((power, sources))
    }

    pub fn cast_vote(
        &mut self,
        ledger: &mut Ledger,
        voter: AccountId,
        proposal_id: ProposalId,
        approve: bool,
    ) -> Result<VoteReceipt> {
        Self::require_account(ledger, &voter)?;
        let (power, sources) = self.effective_power(ledger, &voter, proposal_id)?;
        if power == 0 {
            return Err(MarketError::NoVotingPower(voter));
        }
        let mut body = Encoder::new();
        body.u64(proposal_id)
            .digest(voter.as_bytes())
            .u8(approve as u8)
            .u64(power);
        let (height, _) = ledger.note("market/vote", body.finish())?;

        let p = self.proposals.get_mut(&proposal_id).expect("checked");
        if approve {
            p.yes_power += power;
        } else {
            p.no_power += power;
        }
        debug_assert!(p.yes_power + p.no_power <= p.supply_snapshot);
        p.voters.insert(voter);
        p.counted.extend(sources);
        let receipt = VoteReceipt {
            proposal_id,
            voter,
            approve,
            power,
            yes_power: p.yes_power,
            no_power: p.no_power,
        };
        self.events.push(MarketEvent::VoteCast {
            height,
            proposal_id,
            voter,
            approve,
            power,
            yes_power: p.yes_power,
            no_power: p.no_power,
        });
        Ok(receipt)
    }

    pub fn tally_and_finalize(
        &mut self,
        ledger: &mut Ledger,
        proposal_id: ProposalId,
    ) -> Result<FinalizeOutcome> {
        let p = self.proposal(proposal_id)?;
        if p.status != ProposalStatus::Pending {
            return Err(MarketError::ProposalClosed(proposal_id));
        }
        let theta = self.config.threshold;
        let (yes, no, snap) = (p.yes_power, p.no_power, p.supply_snapshot);
        let (contributor, dataset_ref, database_id) =
            (p.contributor_wallet, p.dataset_ref, p.database_id);

        let outcome = if fraction::exceeds(yes, theta, snap) {
            let entry = ledger.append_registry_entry(dataset_ref, contributor, proposal_id)?;
            ledger.mint(TokenClass::Curator, contributor, 1)?;
            ledger.mint(TokenClass::Share(database_id), contributor, 1)?;
            FinalizeOutcome::Accepted(entry)
        } else if fraction::at_least(no, Fraction::new(1, 1) - theta, snap) {
            FinalizeOutcome::Rejected
        } else {
            return Ok(FinalizeOutcome::StillPending);
        };

        let (status, entry_id) = match &outcome {
            FinalizeOutcome::Accepted(e) => (ProposalStatus::Accepted, Some(e.entry_id)),
            _ => (ProposalStatus::Rejected, None),
        };
        let mut body = Encoder::new();
        body.u64(proposal_id)
            .u8(status as u8)
            .u64(yes)
            .u64(no)
            .u64(snap);
        let (height, _) = ledger.note("market/finalize", body.finish())?;
        self.proposals
            .get_mut(&proposal_id)
            .expect("checked")
            .status = status;
        if let Some(id) = entry_id {
            self.databases
                .get_mut(&database_id)
                .expect("proposal database exists")
                .accepted_entries
                .push(id);
        }
        self.events.push(MarketEvent::Finalized {
            height,
            proposal_id,
            status,
            yes_power: yes,
            no_power: no,
            supply_snapshot: snap,
            entry_id,
        });
        Ok(outcome)
    }

    /// Computes the dividend partition of `payment` over the current
    /// shareholders of `database_id`. Moves no funds.
    pub fn distribute_dividend(
        &self,
        ledger: &Ledger,
        database_id: DatabaseId,
        payment: u64,
        data_share: Fraction,
    ) -> Result<DividendSplit> {
        let db = self.database(database_id)?;
        if data_share > Fraction::new(1, 1) {
            return Err(MarketError::InvalidFraction(fraction::display(data_share)));
        }
        split_dividend(&ledger.holders(db.share_class()), payment, data_share)
            .ok_or(MarketError::NoShareholders(database_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixture {
        ledger: Ledger,
        assoc: DataAssociation,
        accounts: Vec<AccountId>,
        db: DatabaseId,
    }

    /// `curators[i]` curator tokens for account i; account 0 is the initiator.
    fn fixture(curators: &[u64]) -> Fixture {
        let mut ledger = Ledger::new(9);
        let treasury = ledger.create_account();
        let accounts: Vec<_> = curators.iter().map(|_| ledger.create_account()).collect();
        for (a, n) in accounts.iter().zip(curators) {
            if *n > 0 {
                ledger.mint(TokenClass::Curator, *a, *n).unwrap();
            }
        }
        let mut assoc = DataAssociation::new(AssociationConfig::default(), treasury).unwrap();
        let db = assoc
            .create_database(&mut ledger, accounts[0], "images", 4)
            .unwrap();
        Fixture {
            ledger,
            assoc,
            accounts,
            db,
        }
    }

    fn dref(n: u8) -> Digest {
        [n; 32]
    }

    #[test]
    fn databases_get_sequential_ids() {
        let mut f = fixture(&[0]);
        let second = f
            .assoc
            .create_database(&mut f.ledger, f.accounts[0], "text", 0)
            .unwrap();
        assert_eq!((f.db, second), (1, 2));
        let ids: Vec<_> = f.assoc.databases().map(|d| d.database_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert!(f.ledger.holders(TokenClass::Share(1)).is_empty());
    }

    #[test]
    fn snapshot_tracks_supply_at_submission() {
        let mut f = fixture(&[10, 0]);
        let a = f.accounts[1];
        let p1 = f
            .assoc
            .submit_proposal(&mut f.ledger, a, f.db, dref(1))
            .unwrap();
        assert_eq!(f.assoc.proposal(p1).unwrap().supply_snapshot, 10);
        f.ledger.mint(TokenClass::Curator, a, 1).unwrap();
        let p2 = f
            .assoc
            .submit_proposal(&mut f.ledger, a, f.db, dref(2))
            .unwrap();
        assert_eq!(f.assoc.proposal(p2).unwrap().supply_snapshot, 11);
        assert!(matches!(
            f.assoc.submit_proposal(&mut f.ledger, a, f.db, dref(1)),
            Err(MarketError::DuplicateDatasetRef { .. })
        ));
        assert_eq!(
            f.assoc.submit_proposal(&mut f.ledger, a, 99, dref(3)),
            Err(MarketError::UnknownDatabase(99))
        );
        assert_eq!(
            f.assoc.submit_proposal(&mut f.ledger, a, f.db, [0; 32]),
            Err(MarketError::EmptyDatasetRef)
        );
    }

    #[test]
    fn delegation_adds_power_and_blocks_delegator() {
        // A holds 3, oracle O holds 2.
        let mut f = fixture(&[0, 3, 2]);
        let (a, o) = (f.accounts[1], f.accounts[2]);
        f.assoc.delegate_votes(&mut f.ledger, a, o, 100).unwrap();
        let p = f
            .assoc
            .submit_proposal(&mut f.ledger, f.accounts[0], f.db, dref(1))
            .unwrap();
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, a, p, true),
            Err(MarketError::DelegatedAway(a))
        );
        let r = f.assoc.cast_vote(&mut f.ledger, o, p, true).unwrap();
        assert_eq!((r.power, r.yes_power), (5, 5));
        assert_eq!(
            f.assoc.delegate_votes(&mut f.ledger, a, o, 200),
            Err(MarketError::AlreadyDelegated(a))
        );
    }

    #[test]
    fn expired_delegation_is_excluded() {
        let mut f = fixture(&[0, 3, 2]);
        let (a, o) = (f.accounts[1], f.accounts[2]);
        let h = f.ledger.height() + 1;
        f.assoc.delegate_votes(&mut f.ledger, a, o, h).unwrap();
        assert_eq!(f.ledger.height(), h);
        let p = f
            .assoc
            .submit_proposal(&mut f.ledger, f.accounts[0], f.db, dref(1))
            .unwrap();
        assert_eq!(f.ledger.height(), h + 1);
        let r = f.assoc.cast_vote(&mut f.ledger, o, p, false).unwrap();
        assert_eq!(r.power, 2);
        // A's delegation lapsed, so A may now vote directly.
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, a, p, false).unwrap().power,
            3
        );
    }

    #[test]
    fn delegation_preconditions() {
        let mut f = fixture(&[0, 0, 2]);
        let (a, o) = (f.accounts[1], f.accounts[2]);
        assert_eq!(
            f.assoc.delegate_votes(&mut f.ledger, a, o, 10),
            Err(MarketError::NoTokens(a))
        );
        assert_eq!(
            f.assoc.delegate_votes(&mut f.ledger, o, o, 10),
            Err(MarketError::SelfDelegation)
        );
    }

    #[test]
    fn own_plus_delegated_power_votes_no() {
        // voter V has 2 own, A and B delegate 1 and 2.
        let mut f = fixture(&[0, 2, 1, 2]);
        let v = f.accounts[1];
        for d in [f.accounts[2], f.accounts[3]] {
            f.assoc.delegate_votes(&mut f.ledger, d, v, 1_000).unwrap();
        }
        let p = f
            .assoc
            .submit_proposal(&mut f.ledger, f.accounts[0], f.db, dref(4))
            .unwrap();
        let r = f.assoc.cast_vote(&mut f.ledger, v, p, false).unwrap();
        assert_eq!((r.power, r.no_power, r.yes_power), (5, 5, 0));
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, v, p, true),
            Err(MarketError::AlreadyVoted {
                voter: v,
                proposal: p
            })
        );
    }

    #[test]
    fn delegated_power_is_not_forwarded_twice() {
        // A -> O1, O1 -> O2. O2 only gets O1's own balance.
        let mut f = fixture(&[0, 4, 1, 1]);
        let (a, o1, o2) = (f.accounts[1], f.accounts[2], f.accounts[3]);
        f.assoc.delegate_votes(&mut f.ledger, a, o1, 1_000).unwrap();
        f.assoc
            .delegate_votes(&mut f.ledger, o1, o2, 1_000)
            .unwrap();
        let p = f
            .assoc
            .submit_proposal(&mut f.ledger, f.accounts[0], f.db, dref(1))
            .unwrap();
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, o2, p, true).unwrap().power,
            2
        );
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, o1, p, true),
            Err(MarketError::AlreadyVoted {
                voter: o1,
                proposal: p
            })
        );
    }

    #[test]
    fn voter_without_snapshot_power_is_refused() {
        let mut f = fixture(&[0, 1]);
        let late = f.accounts[0];
        let p = f
            .assoc
            .submit_proposal(&mut f.ledger, late, f.db, dref(1))
            .unwrap();
        f.ledger.mint(TokenClass::Curator, late, 5).unwrap();
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, late, p, true),
            Err(MarketError::NoVotingPower(late))
        );
    }

    /// Ten curators with one token each; `yes` of them approve, `no` reject.
    fn ten_curator_vote(yes: usize, no: usize) -> (Fixture, ProposalId, FinalizeOutcome) {
        let mut f = fixture(&[0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0]);
        let contributor = f.accounts[11];
        let p = f
            .assoc
            .submit_proposal(&mut f.ledger, contributor, f.db, dref(7))
            .unwrap();
        for (i, v) in f.accounts[1..=10].iter().copied().enumerate() {
            if i < yes {
                f.assoc.cast_vote(&mut f.ledger, v, p, true).unwrap();
            } else if i < yes + no {
                f.assoc.cast_vote(&mut f.ledger, v, p, false).unwrap();
            }
        }
        let out = f.assoc.tally_and_finalize(&mut f.ledger, p).unwrap();
        (f, p, out)
    }

    #[test]
    fn acceptance_mints_token_share_and_entry() {
        let (f, p, out) = ten_curator_vote(6, 0);
        let FinalizeOutcome::Accepted(entry) = out else {
            panic!("expected acceptance, got {out:?}");
        };
        let contributor = f.accounts[11];
        assert_eq!(entry.entry_id, 1);
        assert_eq!(entry.proposal_id, p);
        assert_eq!(f.ledger.total_supply(TokenClass::Curator), 11);
        assert_eq!(f.ledger.balance(TokenClass::Curator, &contributor), 1);
        assert_eq!(f.ledger.balance(TokenClass::Share(f.db), &contributor), 1);
        assert_eq!(f.assoc.database(f.db).unwrap().accepted_entries, vec![1]);
    }

    #[test]
    fn threshold_boundary_is_strict() {
        let (mut f, p, out) = ten_curator_vote(5, 0);
        assert_eq!(out, FinalizeOutcome::StillPending);
        assert_eq!(f.assoc.proposal(p).unwrap().status, ProposalStatus::Pending);
        let (_, _, out) = ten_curator_vote(5, 5);
        assert_eq!(out, FinalizeOutcome::Rejected);
        let (_, _, out) = ten_curator_vote(0, 5);
        assert_eq!(out, FinalizeOutcome::Rejected);
        // Still-pending proposals keep accepting votes and may finalize later.
        let v = f.accounts[6];
        f.assoc.cast_vote(&mut f.ledger, v, p, true).unwrap();
        assert!(matches!(
            f.assoc.tally_and_finalize(&mut f.ledger, p).unwrap(),
            FinalizeOutcome::Accepted(_)
        ));
        assert_eq!(
            f.assoc.tally_and_finalize(&mut f.ledger, p),
            Err(MarketError::ProposalClosed(p))
        );
    }

    #[test]
    fn rejected_dataset_may_be_resubmitted() {
        let (mut f, p, out) = ten_curator_vote(0, 5);
        assert_eq!(out, FinalizeOutcome::Rejected);
        let v = f.accounts[9];
        assert_eq!(
            f.assoc.cast_vote(&mut f.ledger, v, p, true),
            Err(MarketError::ProposalClosed(p))
        );
        let again = f
            .assoc
            .submit_proposal(&mut f.ledger, f.accounts[11], f.db, dref(7))
            .unwrap();
        assert_ne!(again, p);
    }

    #[test]
    fn dividend_examples() {
        let (a, b) = (AccountId([1; 32]), AccountId([2; 32]));
        let half = Fraction::new(1, 2);
        let s = split_dividend(&[(a, 1), (b, 1)], 100, half).unwrap();
        assert_eq!((s.payouts[&a], s.payouts[&b]), (25, 25));
        assert_eq!((s.compute_portion, s.treasury_remainder), (50, 0));

        let s = split_dividend(&[(a, 1)], 100, Fraction::new(1, 1)).unwrap();
        assert_eq!((s.payouts[&a], s.compute_portion), (100, 0));

        let s = split_dividend(&[(a, 1), (b, 2)], 101, half).unwrap();
        assert_eq!(s.data_pool, 50);
        assert_eq!((s.payouts[&a], s.payouts[&b]), (16, 33));
        assert_eq!((s.treasury_remainder, s.compute_portion), (1, 51));
        assert_eq!(s.total(), 101);

        assert!(split_dividend(&[], 10, half).is_none());
        assert!(split_dividend(&[(a, 1)], 10, Fraction::new(3, 2)).is_none());
    }

    #[test]
    fn distribute_requires_shareholders() {
        let f = fixture(&[1]);
        assert_eq!(
            f.assoc
                .distribute_dividend(&f.ledger, f.db, 10, Fraction::new(1, 2)),
            Err(MarketError::NoShareholders(f.db))
        );
    }

    #[test]
    fn initiator_endowment_mints_shares() {
        let mut ledger = Ledger::new(1);
        let treasury = ledger.create_account();
        let init = ledger.create_account();
        let cfg = AssociationConfig {
            initiator_endowment: 2,
            ..AssociationConfig::default()
        };
        let mut assoc = DataAssociation::new(cfg, treasury).unwrap();
        let db = assoc.create_database(&mut ledger, init, "x", 0).unwrap();
        assert_eq!(ledger.balance(TokenClass::Share(db), &init), 2);
        assert!(DataAssociation::new(
            AssociationConfig {
                threshold: Fraction::new(0, 1),
                initiator_endowment: 0
            },
            treasury
        )
        .is_err());
    }
}
