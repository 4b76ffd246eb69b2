use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::codec::{Canonical, CodecError, Decoder, Digest, Encoder};

/// Opaque 32-byte account identifier (the simulated wallet address).
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AccountId(pub [u8; 32]);

impl AccountId {
    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    /// First eight bytes in hex, for tables and logs.
    pub fn short(&self) -> String {
        hex::encode(&self.0[..8])
    }
}

impl fmt::Debug for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AccountId({})", self.short())
    }
}

impl fmt::Display for AccountId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for AccountId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let raw = hex::decode(s).map_err(|e| format!("bad account hex: {e}"))?;
        let arr: [u8; 32] = raw
            .try_into()
            .map_err(|_| "account id must be 32 bytes".to_string())?;
        Ok(AccountId(arr))
    }
}

impl Serialize for AccountId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for AccountId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Token classes tracked by the ledger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TokenClass {
    /// Voting token of the data association. Minted once per accepted proposal.
    Curator,
    /// Payment currency used for job prices, escrow and dividends.
    Credit,
    /// Shares of one database.
    Share(u64),
}

impl fmt::Display for TokenClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TokenClass::Curator => f.write_str("curator"),
            TokenClass::Credit => f.write_str("credit"),
            TokenClass::Share(db) => write!(f, "share:{db}"),
        }
    }
}

impl FromStr for TokenClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "curator" => Ok(TokenClass::Curator),
            "credit" => Ok(TokenClass::Credit),
            other => other
                .strip_prefix("share:")
                .and_then(|n| n.parse().ok())
                .map(TokenClass::Share)
                .ok_or_else(|| format!("unknown token class {other:?}")),
        }
    }
}

impl Serialize for TokenClass {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TokenClass {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Canonical for TokenClass {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            TokenClass::Curator => {
                enc.u8(0);
            }
            TokenClass::Credit => {
                enc.u8(1);
            }
            TokenClass::Share(db) => {
                enc.u8(2).u64(*db);
            }
        }
    }
}

impl TokenClass {
    fn decode(dec: &mut Decoder<'_>) -> Result<Self, CodecError> {
        match dec.u8()? {
            0 => Ok(TokenClass::Curator),
            1 => Ok(TokenClass::Credit),
            2 => Ok(TokenClass::Share(dec.u64()?)),
            tag => Err(CodecError::UnknownTag {
                what: "token class",
                tag,
            }),
        }
    }
}

/// A ledger transaction.
///
/// Byte layout: one tag byte, then the variant's fields in order.
///
/// | tag | variant  | fields                                         |
/// |-----|----------|------------------------------------------------|
/// | 1   | Mint     | class, to (32), amount u64                     |
/// | 2   | Transfer | class, from (32), to (32), amount u64          |
/// | 3   | Register | dataset_ref (32), contributor (32), proposal u64 |
/// | 4   | Note     | topic str, body bytes                          |
///
/// `class` is one tag byte (0 curator, 1 credit, 2 share followed by the
/// database id as u64).
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Tx {
    Mint {
        class: TokenClass,
        to: AccountId,
        amount: u64,
    },
    Transfer {
        class: TokenClass,
        from: AccountId,
        to: AccountId,
        amount: u64,
    },
    Register {
        dataset_ref: Digest,
        contributor: AccountId,
        proposal_id: u64,
    },
    /// An event recorded on chain by another module. The ledger only orders
    /// and hashes it; `body` is that module's own canonical encoding.
    Note { topic: String, body: Vec<u8> },
}

impl Canonical for Tx {
    fn encode(&self, enc: &mut Encoder) {
        match self {
            Tx::Mint { class, to, amount } => {
                enc.u8(1);
                class.encode(enc);
                enc.digest(&to.0).u64(*amount);
            }
            Tx::Transfer {
                class,
                from,
                to,
                amount,
            } => {
                enc.u8(2);
                class.encode(enc);
                enc.digest(&from.0).digest(&to.0).u64(*amount);
            }
            Tx::Register {
                dataset_ref,
                contributor,
                proposal_id,
            } => {
                enc.u8(3)
                    .digest(dataset_ref)
                    .digest(&contributor.0)
                    .u64(*proposal_id);
            }
            Tx::Note { topic, body } => {
                enc.u8(4).str(topic).bytes(body);
            }
        }
    }
}

impl Tx {
    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        let mut dec = Decoder::new(bytes);
        let tx = match dec.u8()? {
            1 => Tx::Mint {
                class: TokenClass::decode(&mut dec)?,
                to: AccountId(dec.digest()?),
                amount: dec.u64()?,
            },
            2 => Tx::Transfer {
                class: TokenClass::decode(&mut dec)?,
                from: AccountId(dec.digest()?),
                to: AccountId(dec.digest()?),
                amount: dec.u64()?,
            },
            3 => Tx::Register {
                dataset_ref: dec.digest()?,
                contributor: AccountId(dec.digest()?),
                proposal_id: dec.u64()?,
            },
            4 => Tx::Note {
                topic: dec.str()?.to_owned(),
                body: dec.bytes()?.to_vec(),
            },
            tag => return Err(CodecError::UnknownTag { what: "tx", tag }),
        };
        dec.finish()?;
        Ok(tx)
    }
}

/// Immutable record of an accepted dataset contribution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub entry_id: u64,
    #[serde(with = "hex::serde")]
    pub dataset_ref: Digest,
    pub contributor: AccountId,
    pub proposal_id: u64,
    pub block_height: u64,
}

impl Canonical for RegistryEntry {
    fn encode(&self, enc: &mut Encoder) {
        enc.u64(self.entry_id)
            .digest(&self.dataset_ref)
            .digest(&self.contributor.0)
            .u64(self.proposal_id)
            .u64(self.block_height);
    }
}
