//! Append-only, hash-chained transaction log standing in for the chain.
//!
//! The ledger owns account balances for every [`TokenClass`] and the data
//! registry. Every state change is a [`Tx`] appended to the log; the head
//! hash after appending `tx` at height `n` is
//!
//! ```text
//! head[n] = SHA-256(head[n-1] || canonical(tx))      head[0] = 32 zero bytes
//! ```
//!
//! Replaying the log from an empty ledger reproduces every intermediate head
//! and the final balances exactly.

pub mod codec;
mod tx;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::sync::Arc;

use thiserror::Error;

pub use codec::{sha256, Canonical, CodecError, Decoder, Digest, Encoder};
pub use tx::{AccountId, RegistryEntry, TokenClass, Tx};

const ACCOUNT_DOMAIN: &[u8] = b"databright/account/v1";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LedgerError {
    #[error("invalid transaction: {0}")]
    InvalidTx(String),
    #[error("insufficient {class} balance: {account:?} holds {balance}, needs {requested}")]
    InsufficientBalance {
        class: TokenClass,
        account: AccountId,
        balance: u64,
        requested: u64,
    },
    #[error("proposal {0} already has a registry entry")]
    DuplicateProposal(u64),
    #[error("unknown account {0:?}")]
    UnknownAccount(AccountId),
    #[error("chain hash mismatch at height {height}")]
    ChainMismatch { height: u64 },
    #[error("malformed log line {line}: {reason}")]
    MalformedLog { line: usize, reason: String },
    #[error(transparent)]
    Codec(#[from] CodecError),
}

pub type Result<T, E = LedgerError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Default)]
struct State {
    accounts: BTreeSet<AccountId>,
    balances: BTreeMap<(TokenClass, AccountId), u64>,
    supply: BTreeMap<TokenClass, u64>,
    registry: Vec<RegistryEntry>,
    registry_by_proposal: BTreeMap<u64, u64>,
}

impl State {
    fn balance(&self, class: TokenClass, account: &AccountId) -> u64 {
        self.balances.get(&(class, *account)).copied().unwrap_or(0)
    }
}

/// Read-only view of the ledger at one height.
#[derive(Debug, Clone)]
pub struct LedgerSnapshot {
    state: Arc<State>,
    height: u64,
    head: Digest,
}

impl LedgerSnapshot {
    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn head_hash(&self) -> Digest {
        self.head
    }

    pub fn balance(&self, class: TokenClass, account: &AccountId) -> u64 {
        self.state.balance(class, account)
    }

    pub fn total_supply(&self, class: TokenClass) -> u64 {
        self.state.supply.get(&class).copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct Ledger {
    seed: u64,
    created: u64,
    state: State,
    log: Vec<Vec<u8>>,
    heads: Vec<Digest>,
}

impl Ledger {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            created: 0,
            state: State::default(),
            log: Vec::new(),
            heads: vec![[0u8; 32]],
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Derives a fresh account id from the run seed and the creation index.
    /// Does not touch the log.
    pub fn create_account(&mut self) -> AccountId {
        loop {
            let index = self.created;
            self.created += 1;
            let id = AccountId(sha256(&[
                ACCOUNT_DOMAIN,
                &self.seed.to_le_bytes(),
                &index.to_le_bytes(),
            ]));
            if self.state.accounts.insert(id) {
                return id;
            }
        }
    }

    pub fn account_exists(&self, id: &AccountId) -> bool {
        self.state.accounts.contains(id)
    }

    pub fn accounts(&self) -> impl Iterator<Item = &AccountId> {
        self.state.accounts.iter()
    }

    pub fn height(&self) -> u64 {
        self.log.len() as u64
    }

    pub fn head_hash(&self) -> Digest {
        *self.heads.last().expect("genesis head always present")
    }

    /// Head hash recorded after the tx at `height` (height 0 is genesis).
    pub fn head_at(&self, height: u64) -> Option<Digest> {
        self.heads.get(height as usize).copied()
    }

    pub fn balance(&self, class: TokenClass, account: &AccountId) -> u64 {
        self.state.balance(class, account)
    }

    pub fn total_supply(&self, class: TokenClass) -> u64 {
        self.state.supply.get(&class).copied().unwrap_or(0)
    }

    /// Non-zero holders of `class`, ordered by account id.
    pub fn holders(&self, class: TokenClass) -> Vec<(AccountId, u64)> {
        self.state
            .balances
            .iter()
            .filter(|((c, _), amt)| *c == class && **amt > 0)
            .map(|((_, a), amt)| (*a, *amt))
            .collect()
    }

    /// All non-zero balances, ordered by (class, account).
    pub fn balances(&self) -> impl Iterator<Item = (TokenClass, AccountId, u64)> + '_ {
        self.state
            .balances
            .iter()
            .filter(|(_, amt)| **amt > 0)
            .map(|((c, a), amt)| (*c, *a, *amt))
    }

    /// Every token class that has ever been minted.
    pub fn classes(&self) -> impl Iterator<Item = (TokenClass, u64)> + '_ {
        self.state.supply.iter().map(|(c, s)| (*c, *s))
    }

    pub fn registry(&self) -> &[RegistryEntry] {
        &self.state.registry
    }

    pub fn registry_entry(&self, entry_id: u64) -> Option<&RegistryEntry> {
        entry_id
            .checked_sub(1)
            .and_then(|i| self.state.registry.get(i as usize))
    }

    pub fn entry_for_proposal(&self, proposal_id: u64) -> Option<&RegistryEntry> {
        self.state
            .registry_by_proposal
            .get(&proposal_id)
            .and_then(|id| self.registry_entry(*id))
    }

    /// SHA-256 over the canonical bytes of every registry entry in order.
    pub fn registry_digest(&self) -> Digest {
        let mut enc = Encoder::new();
        for entry in &self.state.registry {
            entry.encode(&mut enc);
        }
        sha256(&[&enc.finish()])
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        LedgerSnapshot {
            state: Arc::new(self.state.clone()),
            height: self.height(),
            head: self.head_hash(),
        }
    }

    /// Canonical bytes of every appended tx, in order.
    pub fn log(&self) -> &[Vec<u8>] {
        &self.log
    }

    /// Validates `tx` against current state, applies it and extends the chain.
    pub fn append_tx(&mut self, tx: Tx) -> Result<(u64, Digest)> {
        self.validate(&tx)?;
        self.apply(&tx);
        let bytes = tx.to_canonical_bytes();
        let head = sha256(&[&self.head_hash(), &bytes]);
        self.log.push(bytes);
        self.heads.push(head);
        Ok((self.height(), head))
    }

    fn validate(&self, tx: &Tx) -> Result<()> {
        let known = |a: &AccountId| {
            if self.account_exists(a) {
                Ok(())
            } else {
                Err(LedgerError::UnknownAccount(*a))
            }
        };
        match tx {
            Tx::Mint { class, to, amount } => {
                known(to)?;
                let supply = self.total_supply(*class);
                if supply.checked_add(*amount).is_none() {
                    return Err(LedgerError::InvalidTx(format!("{class} supply overflow")));
                }
            }
            Tx::Transfer {
                class,
                from,
                to,
                amount,
            } => {
                known(from)?;
                known(to)?;
                let balance = self.balance(*class, from);
                if balance < *amount {
                    return Err(LedgerError::InsufficientBalance {
                        class: *class,
                        account: *from,
                        balance,
                        requested: *amount,
                    });
                }
            }
            Tx::Register {
                contributor,
                proposal_id,
                ..
            } => {
                known(contributor)?;
                if self.state.registry_by_proposal.contains_key(proposal_id) {
                    return Err(LedgerError::DuplicateProposal(*proposal_id));
                }
            }
            Tx::Note { topic, .. } => {
                if topic.is_empty() {
                    return Err(LedgerError::InvalidTx("empty note topic".into()));
                }
            }
        }
        Ok(())
    }

    fn apply(&mut self, tx: &Tx) {
        let st = &mut self.state;
        match tx {
            Tx::Mint { class, to, amount } => {
                *st.balances.entry((*class, *to)).or_insert(0) += amount;
                *st.supply.entry(*class).or_insert(0) += amount;
            }
            Tx::Transfer {
                class,
                from,
                to,
                amount,
            } => {
                *st.balances.get_mut(&(*class, *from)).expect("validated") -= amount;
                *st.balances.entry((*class, *to)).or_insert(0) += amount;
            }
            Tx::Register {
                dataset_ref,
                contributor,
                proposal_id,
            } => {
                let entry_id = st.registry.len() as u64 + 1;
                st.registry.push(RegistryEntry {
                    entry_id,
                    dataset_ref: *dataset_ref,
                    contributor: *contributor,
                    proposal_id: *proposal_id,
                    block_height: self.log.len() as u64 + 1,
                });
                st.registry_by_proposal.insert(*proposal_id, entry_id);
            }
            Tx::Note { .. } => {}
        }
    }

    pub fn mint(&mut self, class: TokenClass, to: AccountId, amount: u64) -> Result<()> {
        self.append_tx(Tx::Mint { class, to, amount }).map(|_| ())
    }

    /// Moves `amount` of `class`. A zero amount is a no-op and appends nothing.
    pub fn transfer(
        &mut self,
        class: TokenClass,
        from: AccountId,
        to: AccountId,
        amount: u64,
    ) -> Result<()> {
        if amount == 0 {
            return Ok(());
        }
        self.append_tx(Tx::Transfer {
            class,
            from,
            to,
            amount,
        })
        .map(|_| ())
    }

    pub fn append_registry_entry(
        &mut self,
        dataset_ref: Digest,
        contributor: AccountId,
        proposal_id: u64,
    ) -> Result<RegistryEntry> {
        self.append_tx(Tx::Register {
            dataset_ref,
            contributor,
            proposal_id,
        })?;
        Ok(self.state.registry.last().cloned().expect("just appended"))
    }

    pub fn note(&mut self, topic: &str, body: Vec<u8>) -> Result<(u64, Digest)> {
        self.append_tx(Tx::Note {
            topic: topic.to_owned(),
            body,
        })
    }

    /// Recomputes the hash chain over the stored log and compares every
    /// intermediate head with the recorded one.
    pub fn verify_chain(&self) -> Result<()> {
        let mut head = [0u8; 32];
        for (i, bytes) in self.log.iter().enumerate() {
            head = sha256(&[&head, bytes]);
            if self.heads[i + 1] != head {
                return Err(LedgerError::ChainMismatch {
                    height: i as u64 + 1,
                });
            }
        }
        Ok(())
    }

    /// Re-executes a sequence of canonical tx bytes on an empty ledger.
    /// Accounts referenced by the log are registered as they appear.
    pub fn replay<'a, I>(seed: u64, txs: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [u8]>,
    {
        let mut ledger = Ledger::new(seed);
        for bytes in txs {
            let tx = Tx::decode(bytes)?;
            match &tx {
                Tx::Mint { to, .. } => {
                    ledger.state.accounts.insert(*to);
                }
                Tx::Transfer { from, to, .. } => {
                    ledger.state.accounts.insert(*from);
                    ledger.state.accounts.insert(*to);
                }
                Tx::Register { contributor, .. } => {
                    ledger.state.accounts.insert(*contributor);
                }
                Tx::Note { .. } => {}
            }
            ledger.append_tx(tx)?;
        }
        Ok(ledger)
    }

    /// One line per tx: `<height> <hex of canonical bytes>`.
    pub fn export_log(&self) -> String {
        let mut out = String::new();
        for (i, bytes) in self.log.iter().enumerate() {
            writeln!(out, "{} {}", i + 1, hex::encode(bytes)).expect("string write");
        }
        out
    }

    /// Parses an exported log and replays it.
    pub fn import_log(seed: u64, text: &str) -> Result<Self> {
        let mut txs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let malformed = |reason: String| LedgerError::MalformedLog {
                line: lineno + 1,
                reason,
            };
            let (height, body) = line
                .split_once(' ')
                .ok_or_else(|| malformed("expected `<height> <hex>`".into()))?;
            let height: u64 = height
                .parse()
                .map_err(|e| malformed(format!("bad height: {e}")))?;
            if height != txs.len() as u64 + 1 {
                return Err(malformed(format!(
                    "height {height} out of sequence (expected {})",
                    txs.len() + 1
                )));
            }
            txs.push(hex::decode(body).map_err(|e| malformed(format!("bad hex: {e}")))?);
        }
        Ledger::replay(seed, txs.iter().map(Vec::as_slice))
    }
}
