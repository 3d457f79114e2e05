//! VSD state: the Service Directory of copied description documents and the
//! Service-Map that ties each delegated service to its owner.

use std::collections::{BTreeMap, HashMap};
use std::net::IpAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::descriptions::{decode_description, DescriptionError, ServiceDescription};

/// Number of chains in a [`ServiceMap`]. Fixed; the table never resizes.
pub const BUCKET_COUNT: usize = 64;

/// Enrollment tuple sent by a service device in Service-add/remove/update.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ServiceInfo {
    pub service_name: String,
    pub service_type: String,
    pub description_location_url: String,
    pub control_url: String,
    pub event_url: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InfoError {
    #[error("empty field {0}")]
    EmptyField(&'static str),
    #[error("invalid URL in {field}: {reason}")]
    BadUrl { field: &'static str, reason: String },
}

/// A [`ServiceInfo`] whose URLs have been parsed and made absolute.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedInfo {
    pub key: ServiceKey,
    pub description_location: Url,
    pub control_url: Url,
    pub event_url: Url,
}

impl ServiceInfo {
    pub fn key(&self) -> ServiceKey {
        ServiceKey::new(&self.service_name, &self.service_type)
    }

    /// Validates the tuple. Control and event URLs may be relative to the
    /// description location; they are returned in absolute form.
    pub fn resolve(&self) -> Result<ResolvedInfo, InfoError> {
        let fields = [
            ("service_name", &self.service_name),
            ("service_type", &self.service_type),
            ("description_location_url", &self.description_location_url),
            ("control_url", &self.control_url),
            ("event_url", &self.event_url),
        ];
        for (name, value) in fields {
            if value.is_empty() {
                return Err(InfoError::EmptyField(name));
            }
        }
        let bad = |field, e: url::ParseError| InfoError::BadUrl {
            field,
            reason: e.to_string(),
        };
        let description_location = Url::parse(&self.description_location_url)
            .map_err(|e| bad("description_location_url", e))?;
        if description_location.host().is_none() {
            return Err(InfoError::BadUrl {
                field: "description_location_url",
                reason: "no host".into(),
            });
        }
        let control_url = description_location
            .join(&self.control_url)
            .map_err(|e| bad("control_url", e))?;
        let event_url = description_location
            .join(&self.event_url)
            .map_err(|e| bad("event_url", e))?;
        Ok(ResolvedInfo {
            key: self.key(),
            description_location,
            control_url,
            event_url,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ServiceKey {
    pub name: String,
    pub service_type: String,
}

impl ServiceKey {
    pub fn new(name: &str, service_type: &str) -> Self {
        ServiceKey {
            name: name.to_string(),
            service_type: service_type.to_string(),
        }
    }
}

/// Identity of the service device that enrolled a service: the id it
/// presents plus the network address the enrollment came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Owner {
    pub id: String,
    pub addr: IpAddr,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceMapEntry {
    pub key: ServiceKey,
    /// VSD-hosted copy of the description.
    pub delegated_location: Url,
    /// Absolute control URL on the owner.
    pub control_url: Url,
    /// Absolute event subscription URL on the owner.
    pub event_url: Url,
    pub owner: Owner,
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Bucket index of `(name, service_type)`: FNV-1a over `name\0type`.
pub fn bucket_of(name: &str, service_type: &str) -> usize {
    let mut bytes = Vec::with_capacity(name.len() + service_type.len() + 1);
    bytes.extend_from_slice(name.as_bytes());
    bytes.push(0);
    bytes.extend_from_slice(service_type.as_bytes());
    (fnv1a(&bytes) % BUCKET_COUNT as u64) as usize
}

#[derive(Debug, Clone)]
struct Slot {
    seq: u64,
    entry: ServiceMapEntry,
}

/// Hashtable with separate chaining keyed by `(service name, service type)`.
///
/// Each entry remembers when its key was first inserted, so lookups by name
/// alone and iteration follow insertion order.
#[derive(Debug, Clone)]
pub struct ServiceMap {
    buckets: Vec<Vec<Slot>>,
    size: usize,
    next_seq: u64,
}

impl Default for ServiceMap {
    fn default() -> Self {
        ServiceMap {
            buckets: vec![Vec::new(); BUCKET_COUNT],
            size: 0,
            next_seq: 0,
        }
    }
}

impl ServiceMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.size
    }

    pub fn is_empty(&self) -> bool {
        self.size == 0
    }

    /// Upsert. Returns the replaced entry, if the key was present; a
    /// replaced entry keeps its original insertion position.
    pub fn insert(&mut self, entry: ServiceMapEntry) -> Option<ServiceMapEntry> {
        let chain = &mut self.buckets[bucket_of(&entry.key.name, &entry.key.service_type)];
        if let Some(slot) = chain.iter_mut().find(|s| s.entry.key == entry.key) {
            return Some(std::mem::replace(&mut slot.entry, entry));
        }
        chain.push(Slot {
            seq: self.next_seq,
            entry,
        });
        self.next_seq += 1;
        self.size += 1;
        None
    }

    /// Finds an entry by name, and by type when one is given. Without a type
    /// the earliest-inserted entry carrying that name wins.
    pub fn lookup(&self, name: &str, service_type: Option<&str>) -> Option<&ServiceMapEntry> {
        match service_type {
            Some(t) => self.buckets[bucket_of(name, t)]
                .iter()
                .find(|s| s.entry.key.name == name && s.entry.key.service_type == t)
                .map(|s| &s.entry),
            None => self
                .buckets
                .iter()
                .flatten()
                .filter(|s| s.entry.key.name == name)
                .min_by_key(|s| s.seq)
                .map(|s| &s.entry),
        }
    }

    pub fn get(&self, key: &ServiceKey) -> Option<&ServiceMapEntry> {
        self.lookup(&key.name, Some(&key.service_type))
    }

    pub fn remove(&mut self, key: &ServiceKey) -> Option<ServiceMapEntry> {
        let chain = &mut self.buckets[bucket_of(&key.name, &key.service_type)];
        let pos = chain.iter().position(|s| &s.entry.key == key)?;
        self.size -= 1;
        Some(chain.remove(pos).entry)
    }

    /// Entries in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = &ServiceMapEntry> {
        let mut slots: Vec<&Slot> = self.buckets.iter().flatten().collect();
        slots.sort_by_key(|s| s.seq);
        slots.into_iter().map(|s| &s.entry)
    }

    pub fn chain_lengths(&self) -> Vec<usize> {
        self.buckets.iter().map(Vec::len).collect()
    }

    /// Checks the structural invariants: size bookkeeping, bucket placement
    /// and key uniqueness.
    pub fn check_invariants(&self) -> Result<(), String> {
        let total: usize = self.buckets.iter().map(Vec::len).sum();
        if total != self.size {
            return Err(format!("size {} but {} chained entries", self.size, total));
        }
        let mut seen = std::collections::HashSet::new();
        for (i, chain) in self.buckets.iter().enumerate() {
            for slot in chain {
                let k = &slot.entry.key;
                if bucket_of(&k.name, &k.service_type) != i {
                    return Err(format!("{k:?} stored in wrong bucket {i}"));
                }
                if !seen.insert(k.clone()) {
                    return Err(format!("{k:?} appears twice"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectoryRecord {
    pub location: Url,
    pub bytes: Vec<u8>,
    pub stored_at: Duration,
}

/// Copies of service descriptions, served by the VSD at delegated locations
/// `/delegated/<owner-id>/<service-name>/description`.
#[derive(Debug, Clone)]
pub struct ServiceDirectory {
    base: Url,
    records: BTreeMap<(String, String), DirectoryRecord>,
    by_path: HashMap<String, (String, String)>,
}

impl ServiceDirectory {
    /// `base` is the VSD's own HTTP origin, e.g. `http://10.0.0.1:80/`.
    pub fn new(base: Url) -> Self {
        ServiceDirectory {
            base,
            records: BTreeMap::new(),
            by_path: HashMap::new(),
        }
    }

    pub fn delegated_location(&self, owner_id: &str, service_name: &str) -> Url {
        let mut url = self.base.clone();
        url.set_query(None);
        url.set_fragment(None);
        url.path_segments_mut()
            .expect("http base URL")
            .clear()
            .extend(["delegated", owner_id, service_name, "description"]);
        url
    }

    /// Stores `doc_bytes` verbatim after checking that they decode.
    pub fn store(
        &mut self,
        owner_id: &str,
        service_name: &str,
        doc_bytes: Vec<u8>,
        now: Duration,
    ) -> Result<Url, DescriptionError> {
        decode_description(&doc_bytes)?;
        let location = self.delegated_location(owner_id, service_name);
        let key = (owner_id.to_string(), service_name.to_string());
        self.by_path
            .insert(location.path().to_string(), key.clone());
        self.records.insert(
            key,
            DirectoryRecord {
                location: location.clone(),
                bytes: doc_bytes,
                stored_at: now,
            },
        );
        Ok(location)
    }

    pub fn resolve(&self, location: &Url) -> Option<&[u8]> {
        if location.origin() != self.base.origin() {
            return None;
        }
        self.resolve_path(location.path())
    }

    pub fn resolve_path(&self, path: &str) -> Option<&[u8]> {
        let key = self.by_path.get(path)?;
        self.records.get(key).map(|r| r.bytes.as_slice())
    }

    pub fn record(&self, owner_id: &str, service_name: &str) -> Option<&DirectoryRecord> {
        self.records
            .get(&(owner_id.to_string(), service_name.to_string()))
    }

    pub fn remove(&mut self, owner_id: &str, service_name: &str) -> Option<DirectoryRecord> {
        let record = self
            .records
            .remove(&(owner_id.to_string(), service_name.to_string()))?;
        self.by_path.remove(record.location.path());
        Some(record)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &DirectoryRecord> {
        self.records.values()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("service is owned by another device")]
    NotOwner,
    #[error("service not found")]
    NotFound,
    #[error(transparent)]
    Description(#[from] DescriptionError),
}

/// Service-Map and Service Directory kept consistent with each other.
#[derive(Debug, Clone)]
pub struct Registry {
    pub map: ServiceMap,
    pub directory: ServiceDirectory,
}

impl Registry {
    pub fn new(base: Url) -> Self {
        Registry {
            map: ServiceMap::new(),
            directory: ServiceDirectory::new(base),
        }
    }

    /// Stores the description and upserts the map entry for one service.
    ///
    /// A key held by a different owner is refused. If the same owner
    /// re-enrolls a service name under a new type, the old entry is dropped
    /// since both would share one directory record.
    pub fn commit(
        &mut self,
        owner: &Owner,
        info: &ResolvedInfo,
        doc_bytes: Vec<u8>,
        now: Duration,
    ) -> Result<(ServiceMapEntry, ServiceDescription), RegistryError> {
        if let Some(existing) = self.map.get(&info.key) {
            if existing.owner != *owner {
                return Err(RegistryError::NotOwner);
            }
        }
        let doc = decode_description(&doc_bytes)?;
        let stale: Vec<ServiceKey> = self
            .map
            .iter()
            .filter(|e| {
                e.owner.id == owner.id && e.key.name == info.key.name && e.key != info.key
            })
            .map(|e| e.key.clone())
            .collect();
        for key in stale {
            self.map.remove(&key);
        }
        let delegated_location =
            self.directory
                .store(&owner.id, &info.key.name, doc_bytes, now)?;
        let entry = ServiceMapEntry {
            key: info.key.clone(),
            delegated_location,
            control_url: info.control_url.clone(),
            event_url: info.event_url.clone(),
            owner: owner.clone(),
        };
        self.map.insert(entry.clone());
        Ok((entry, doc))
    }

    /// Checks ownership without modifying anything.
    pub fn check_owner(&self, owner: &Owner, key: &ServiceKey) -> Result<&ServiceMapEntry, RegistryError> {
        let entry = self.map.get(key).ok_or(RegistryError::NotFound)?;
        if entry.owner != *owner {
            return Err(RegistryError::NotOwner);
        }
        Ok(entry)
    }

    pub fn remove(&mut self, owner: &Owner, key: &ServiceKey) -> Result<ServiceMapEntry, RegistryError> {
        self.check_owner(owner, key)?;
        let entry = self.map.remove(key).ok_or(RegistryError::NotFound)?;
        self.directory.remove(&entry.owner.id, &entry.key.name);
        Ok(entry)
    }

    /// Every map entry resolves to a directory record and every record is
    /// referenced by exactly one entry.
    pub fn check_integrity(&self) -> Result<(), String> {
        self.map.check_invariants()?;
        let mut referenced = 0;
        for entry in self.map.iter() {
            if self.directory.resolve(&entry.delegated_location).is_none() {
                return Err(format!("{:?} has dangling delegated location", entry.key));
            }
            referenced += 1;
        }
        if referenced != self.directory.len() {
            return Err(format!(
                "{} directory records but {} map entries",
                self.directory.len(),
                referenced
            ));
        }
        Ok(())
    }
}
