//! Candidate toolset construction.
//!
//! Three strategies over a clustered pool, plus their weighted mixture:
//!
//! * **Random**: `k` tools uniformly from the pool.
//! * **Inter-class**: `k` distinct clusters, one tool from each.
//! * **Intra-class**: `k` tools from the cluster holding the gold tool.
//!
//! `include_gold` decides whether the gold tool is forced in (Call samples)
//! or kept out (NoCall samples). Exclusion is enforced inside the draw, not
//! by rejection of whole sets, so every admissible set stays reachable.
//! The selected tools are shuffled so the gold position carries no signal.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::ClusterModel;
use crate::registry::{Tool, ToolPool};
use crate::rng::derive_rng;

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SampleError {
    #[error("pool has {available} admissible tools, need {needed}")]
    PoolTooSmall { needed: usize, available: usize },
    #[error("gold tool `{0}` is not in the pool")]
    GoldNotInPool(String),
    #[error("{available} clusters have admissible tools, need {needed}")]
    TooFewClusters { needed: usize, available: usize },
    #[error("this strategy needs a gold tool")]
    GoldRequired,
    #[error("this strategy needs a cluster model")]
    ClustersRequired,
    #[error("tool `{0}` is not in the cluster model")]
    UnknownTool(String),
    #[error("invalid sampler configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Random,
    InterClass,
    IntraClass,
    Mixture,
    /// Inference-time top-k retrieval (not a sampling mode).
    Retrieval,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::InterClass => "inter-class",
            Strategy::IntraClass => "intra-class",
            Strategy::Mixture => "mixture",
            Strategy::Retrieval => "retrieval",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = SampleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "random" => Ok(Strategy::Random),
            "inter-class" | "interclass" | "inter" => Ok(Strategy::InterClass),
            "intra-class" | "intraclass" | "intra" => Ok(Strategy::IntraClass),
            "mixture" | "mix" => Ok(Strategy::Mixture),
            "retrieval" => Ok(Strategy::Retrieval),
            other => Err(SampleError::InvalidConfig(format!("unknown strategy `{other}`"))),
        }
    }
}

/// Mixture weights in the order Random : Intra-class : Inter-class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixtureWeights {
    pub random: u32,
    pub intra: u32,
    pub inter: u32,
}

impl MixtureWeights {
    pub fn new(random: u32, intra: u32, inter: u32) -> Self {
        Self { random, intra, inter }
    }

    pub fn total(&self) -> u32 {
        self.random + self.intra + self.inter
    }
}

impl Default for MixtureWeights {
    fn default() -> Self {
        Self::new(2, 1, 2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub mode: Strategy,
    pub mixture: MixtureWeights,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            mode: Strategy::Mixture,
            mixture: MixtureWeights::default(),
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.k == 0 {
            return Err(SampleError::InvalidConfig("k must be at least 1".into()));
        }
        if self.mixture.total() == 0 {
            return Err(SampleError::InvalidConfig("mixture weights are all zero".into()));
        }
        if self.mode == Strategy::Retrieval {
            return Err(SampleError::InvalidConfig("retrieval is not a sampling mode".into()));
        }
        Ok(())
    }
}

/// The `k` tools shown to the model for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateToolset {
    pub tools: Vec<Tool>,
    pub contains_gold: bool,
    pub strategy_used: Strategy,
    /// Intra-class draw had to borrow tools from neighbouring clusters.
    pub fallback: bool,
}

impl CandidateToolset {
    pub fn names(&self) -> Vec<String> {
        self.tools.iter().map(|t| t.name.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.tools.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }
}

/// Candidate sampler bound to a pool and (optionally) a cluster model. The
/// cluster model may cover more tools than the pool; only pool tools are
/// ever drawn.
#[derive(Debug, Clone)]
pub struct Sampler<'a> {
    pool: &'a ToolPool,
    clusters: Option<&'a ClusterModel>,
    cfg: SamplerConfig,
    /// Pool indices per cluster, ascending.
    members: Vec<Vec<usize>>,
    /// Cluster per pool index.
    cluster_of: Vec<Option<usize>>,
}

struct Gold {
    index: Option<usize>,
    include: bool,
}

impl<'a> Sampler<'a> {
    pub fn new(pool: &'a ToolPool, clusters: Option<&'a ClusterModel>, cfg: SamplerConfig) -> Result<Self, SampleError> {
        cfg.validate()?;
        let m = clusters.map_or(0, |c| c.m());
        let mut members = vec![Vec::new(); m];
        let cluster_of: Vec<Option<usize>> = pool
            .tools()
            .iter()
            .map(|t| clusters.and_then(|c| c.cluster_of(&t.name).ok()))
            .collect();
        for (i, c) in cluster_of.iter().enumerate() {
            if let Some(c) = *c {
                members[c].push(i);
            }
        }
        Ok(Self {
            pool,
            clusters,
            cfg,
            members,
            cluster_of,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &ToolPool {
        self.pool
    }

    /// Draw number `index` of this sampler's seed, with the configured mode.
    pub fn draw(&self, gold: Option<&str>, include_gold: bool, index: u64) -> Result<CandidateToolset, SampleError> {
        let mut rng = derive_rng(self.cfg.seed, "candidates", index);
        self.sample(gold, include_gold, &mut rng)
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        gold: Option<&str>,
        include_gold: bool,
        rng: &mut R,
    ) -> Result<CandidateToolset, SampleError> {
        match self.cfg.mode {
            Strategy::Random => self.random(gold, include_gold, rng),
            Strategy::InterClass => self.inter_class(gold, include_gold, rng),
            Strategy::IntraClass => self.intra_class(gold, include_gold, rng),
            Strategy::Mixture => self.mixture(gold, include_gold, rng),
            Strategy::Retrieval => Err(SampleError::InvalidConfig("retrieval is not a sampling mode".into())),
        }
    }

    fn gold(&self, gold: Option<&str>, include: bool) -> Result<Gold, SampleError> {
        let index = gold.and_then(|g| self.pool.index_of(g));
        if include {
            let name = gold.ok_or(SampleError::GoldRequired)?;
            if index.is_none() {
                return Err(SampleError::GoldNotInPool(name.to_string()));
            }
        }
        Ok(Gold {
            index,
            include,
        })
    }

    fn clusters(&self) -> Result<&'a ClusterModel, SampleError> {
        self.clusters.ok_or(SampleError::ClustersRequired)
    }

    fn finish<R: Rng + ?Sized>(
        &self,
        mut picked: Vec<usize>,
        gold: &Gold,
        strategy: Strategy,
        fallback: bool,
        rng: &mut R,
    ) -> CandidateToolset {
        picked.shuffle(rng);
        let tools: Vec<Tool> = picked.iter().map(|&i| self.pool.tools()[i].clone()).collect();
        let contains_gold = gold.index.is_some_and(|g| picked.contains(&g));
        debug_assert_eq!(contains_gold, gold.include);
        CandidateToolset {
            tools,
            contains_gold,
            strategy_used: strategy,
            fallback,
        }
    }

    pub fn random<R: Rng + ?Sized>(
        &self,
        gold: Option<&str>,
        include_gold: bool,
        rng: &mut R,
    ) -> Result<CandidateToolset, SampleError> {
        let g = self.gold(gold, include_gold)?;
        let k = self.cfg.k;
        let others: Vec<usize> = (0..self.pool.len()).filter(|&i| Some(i) != g.index).collect();
        let need = if include_gold { k - 1 } else { k };
        if others.len() < need {
            return Err(SampleError::PoolTooSmall {
                needed: k,
                available: others.len() + usize::from(include_gold),
            });
        }
        let mut picked: Vec<usize> = index::sample(rng, others.len(), need)
            .into_iter()
            .map(|j| others[j])
            .collect();
        if include_gold {
            picked.push(g.index.expect("checked"));
        }
        Ok(self.finish(picked, &g, Strategy::Random, false, rng))
    }

    pub fn inter_class<R: Rng + ?Sized>(
        &self,
        gold: Option<&str>,
        include_gold: bool,
        rng: &mut R,
    ) -> Result<CandidateToolset, SampleError> {
        let model = self.clusters()?;
        let k = self.cfg.k;
        if model.m() < k {
            return Err(SampleError::TooFewClusters {
                needed: k,
                available: model.m(),
            });
        }
        let g = self.gold(gold, include_gold)?;
        let gold_cluster = match g.index {
            Some(i) if include_gold => {
                Some(self.cluster_of[i].ok_or_else(|| SampleError::UnknownTool(self.pool.tools()[i].name.clone()))?)
            }
            _ => None,
        };
        // admissible members per cluster (gold never appears here)
        let admissible = |c: usize| -> Vec<usize> {
            self.members[c].iter().copied().filter(|&i| Some(i) != g.index).collect()
        };
        let eligible: Vec<usize> = (0..model.m())
            .filter(|&c| Some(c) != gold_cluster && self.members[c].iter().any(|&i| Some(i) != g.index))
            .collect();
        let need = if include_gold { k - 1 } else { k };
        if eligible.len() < need {
            return Err(SampleError::TooFewClusters {
                needed: k,
                available: eligible.len() + usize::from(include_gold),
            });
        }
        let mut picked = Vec::with_capacity(k);
        for j in index::sample(rng, eligible.len(), need) {
            let pool_of_c = admissible(eligible[j]);
            picked.push(pool_of_c[rng.random_range(0..pool_of_c.len())]);
        }
        if include_gold {
            picked.push(g.index.expect("checked"));
        }
        Ok(self.finish(picked, &g, Strategy::InterClass, false, rng))
    }

    pub fn intra_class<R: Rng + ?Sized>(
        &self,
        gold: Option<&str>,
        include_gold: bool,
        rng: &mut R,
    ) -> Result<CandidateToolset, SampleError> {
        let model = self.clusters()?;
        let gold_name = gold.ok_or(SampleError::GoldRequired)?;
        let g = self.gold(gold, include_gold)?;
        let home = model
            .cluster_of(gold_name)
            .map_err(|_| SampleError::UnknownTool(gold_name.to_string()))?;
        let k = self.cfg.k;
        let mut need = if include_gold { k - 1 } else { k };
        let mut picked = Vec::with_capacity(k);
        let mut fallback = false;
        let order = std::iter::once(home).chain(model.nearest_clusters(home));
        for c in order {
            if need == 0 {
                break;
            }
            if c != home {
                fallback = true;
            }
            let candidates: Vec<usize> = self.members[c].iter().copied().filter(|&i| Some(i) != g.index).collect();
            if candidates.len() <= need {
                need -= candidates.len();
                picked.extend(candidates);
            } else {
                picked.extend(index::sample(rng, candidates.len(), need).into_iter().map(|j| candidates[j]));
                need = 0;
            }
        }
        if need > 0 {
            return Err(SampleError::PoolTooSmall {
                needed: k,
                available: k - need,
            });
        }
        if include_gold {
            picked.push(g.index.expect("checked"));
        }
        Ok(self.finish(picked, &g, Strategy::IntraClass, fallback, rng))
    }

    /// Picks a strategy with probability proportional to the mixture weights
    /// and delegates to it.
    pub fn mixture<R: Rng + ?Sized>(
        &self,
        gold: Option<&str>,
        include_gold: bool,
        rng: &mut R,
    ) -> Result<CandidateToolset, SampleError> {
        let w = self.cfg.mixture;
        let dist = WeightedIndex::new([w.random, w.intra, w.inter])
            .map_err(|e| SampleError::InvalidConfig(e.to_string()))?;
        match dist.sample(rng) {
            0 => self.random(gold, include_gold, rng),
            1 => self.intra_class(gold, include_gold, rng),
            _ => self.inter_class(gold, include_gold, rng),
        }
    }

    /// Gold's cluster index, when known.
    pub fn gold_cluster(&self, gold: &str) -> Option<usize> {
        self.clusters.and_then(|c| c.cluster_of(gold).ok())
    }
}

pub fn sample_random<R: Rng + ?Sized>(
    pool: &ToolPool,
    cfg: &SamplerConfig,
    gold: Option<&str>,
    include_gold: bool,
    rng: &mut R,
) -> Result<CandidateToolset, SampleError> {
    Sampler::new(pool, None, cfg.clone())?.random(gold, include_gold, rng)
}

pub fn sample_inter_class<R: Rng + ?Sized>(
    pool: &ToolPool,
    clusters: &ClusterModel,
    cfg: &SamplerConfig,
    gold: Option<&str>,
    include_gold: bool,
    rng: &mut R,
) -> Result<CandidateToolset, SampleError> {
    Sampler::new(pool, Some(clusters), cfg.clone())?.inter_class(gold, include_gold, rng)
}

pub fn sample_intra_class<R: Rng + ?Sized>(
    pool: &ToolPool,
    clusters: &ClusterModel,
    cfg: &SamplerConfig,
    gold: Option<&str>,
    include_gold: bool,
    rng: &mut R,
) -> Result<CandidateToolset, SampleError> {
    Sampler::new(pool, Some(clusters), cfg.clone())?.intra_class(gold, include_gold, rng)
}

pub fn sample_mixture<R: Rng + ?Sized>(
    pool: &ToolPool,
    clusters: &ClusterModel,
    cfg: &SamplerConfig,
    gold: Option<&str>,
    include_gold: bool,
    rng: &mut R,
) -> Result<CandidateToolset, SampleError> {
    Sampler::new(pool, Some(clusters), cfg.clone())?.mixture(gold, include_gold, rng)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use std::collections::BTreeMap;

    use crate::clustering::ClusterModel;
    use crate::embedding::Embedding;
    use crate::registry::{FunctionSpec, Tool, ToolPool};

    pub fn tool(name: &str) -> Tool {
        Tool {
            name: name.into(),
            description: format!("tool {name}"),
            function: FunctionSpec {
                api_name: name.into(),
                parameters: vec![],
                returns: String::new(),
            },
        }
    }

    /// Pool whose clusters have the given sizes; cluster `c` sits at (c, 0)
    /// so neighbours are ordered by index distance. Tool names are `c{c}_{i}`.
    pub fn clustered(sizes: &[usize]) -> (ToolPool, ClusterModel) {
        let mut tools = Vec::new();
        let mut assignment = BTreeMap::new();
        for (c, &n) in sizes.iter().enumerate() {
            for i in 0..n {
                let name = format!("c{c}_{i}");
                assignment.insert(name.clone(), c);
                tools.push(tool(&name));
            }
        }
        let centroids = (0..sizes.len())
            .map(|c| Embedding::new(vec![c as f64, 0.0]).unwrap())
            .collect();
        let model = ClusterModel::from_parts(sizes.len(), 0, centroids, assignment).unwrap();
        (ToolPool::new(tools).unwrap(), model)
    }
}
