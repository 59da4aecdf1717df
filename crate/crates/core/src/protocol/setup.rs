use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use super::client::ClientNode;
use super::{bootstrap_genesis, ClientSigPolicy, ClusterConfig, Honest, Protocol, Server};
use crate::crypto::{keygen, GroupKeys, KeyPair};
use crate::datastore::{DatastoreError, Shard, Versioning};
use crate::model::{Block, ItemId, Value};

/// Everything needed to stand up a cluster in one process.
#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub n_servers: u32,
    pub protocol: Protocol,
    pub max_batch: usize,
    pub batch_wait: Duration,
    pub round_timeout: Duration,
    pub client_sigs: ClientSigPolicy,
    pub versioning: Versioning,
    /// Seeds the key material.
    pub key_seed: u64,
}

impl Default for ClusterSpec {
    fn default() -> Self {
        ClusterSpec {
            n_servers: 3,
            protocol: Protocol::TfCommit,
            max_batch: 100,
            batch_wait: Duration::ZERO,
            round_timeout: Duration::from_millis(500),
            client_sigs: ClientSigPolicy::InvolvedOnly,
            versioning: Versioning::Multi,
            key_seed: 0,
        }
    }
}

impl ClusterSpec {
    pub fn server_key(&self, id: u32) -> KeyPair {
        keygen(format!("server-{}-{id}", self.key_seed).as_bytes())
    }

    pub fn client_key(&self) -> KeyPair {
        keygen(format!("client-{}", self.key_seed).as_bytes())
    }

    pub fn config(&self) -> ClusterConfig {
        ClusterConfig {
            n_servers: self.n_servers,
            keys: GroupKeys::new((0..self.n_servers).map(|i| *self.server_key(i).public()).collect()),
            client_key: *self.client_key().public(),
            protocol: self.protocol,
            round_timeout: self.round_timeout,
            max_batch: self.max_batch,
            batch_wait: self.batch_wait,
            client_sigs: self.client_sigs,
        }
    }
}

pub struct Cluster {
    pub cfg: Arc<ClusterConfig>,
    pub servers: Vec<Server>,
    pub client: ClientNode,
    /// Absent under 2PC, which keeps no log.
    pub genesis: Option<Block>,
}

impl Cluster {
    /// Honest servers over `data` split by owner; the genesis block is
    /// co-signed in place.
    pub fn build(spec: &ClusterSpec, data: &BTreeMap<ItemId, Value>) -> Result<Cluster, DatastoreError> {
        let cfg = Arc::new(spec.config());
        let mut servers = (0..spec.n_servers)
            .map(|id| {
                let shard = Shard::from_global(id, spec.n_servers, data, spec.versioning)?;
                Ok(Server::new(id, cfg.clone(), spec.server_key(id), shard, Box::new(Honest)))
            })
            .collect::<Result<Vec<_>, DatastoreError>>()?;
        let genesis = (spec.protocol == Protocol::TfCommit).then(|| bootstrap_genesis(&mut servers));
        let client = ClientNode::new(cfg.clone(), spec.client_key(), 1);
        Ok(Cluster { cfg, servers, client, genesis })
    }
}
