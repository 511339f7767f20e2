use std::collections::{BTreeSet, VecDeque};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::dilated::{build_index_maps, DilatedConfig};
use crate::error::Result;

/// Which tokens can attend to which, derived from the kernel's index maps.
///
/// Stored as the list of attention groups (one per distinct
/// pattern/segment/offset map) plus each token's group memberships; two tokens
/// are adjacent iff they share a group.
#[derive(Clone, Debug)]
pub struct DependencyGraph {
    n: usize,
    causal: bool,
    groups: Vec<Vec<usize>>,
    membership: Vec<Vec<u32>>,
}

impl DependencyGraph {
    /// Union over all patterns and heads of `config`.
    pub fn build(n: usize, config: &DilatedConfig) -> Result<Self> {
        config.check_length(n)?;
        let mut seen = BTreeSet::new();
        let mut groups = Vec::new();
        for (i, p) in config.patterns().iter().enumerate() {
            for h in 0..config.heads() {
                if !seen.insert((i, p.head_offset(h))) {
                    continue;
                }
                groups.extend(
                    build_index_maps(config, n, i, h)?
                        .into_iter()
                        .map(|m| m.positions),
                );
            }
        }
        let mut membership = vec![Vec::new(); n];
        for (g, members) in groups.iter().enumerate() {
            for &t in members {
                membership[t].push(g as u32);
            }
        }
        Ok(Self {
            n,
            causal: config.causal(),
            groups,
            membership,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn causal(&self) -> bool {
        self.causal
    }

    /// Sorted tokens `p` can attend to (only `t <= p` when causal).
    pub fn neighbors(&self, p: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self.membership[p]
            .iter()
            .flat_map(|&g| self.groups[g as usize].iter().copied())
            .filter(|&t| !self.causal || t <= p)
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    pub fn can_attend(&self, p: usize, t: usize) -> bool {
        (!self.causal || t <= p)
            && self.membership[p]
                .iter()
                .any(|&g| self.groups[g as usize].binary_search(&t).is_ok())
    }

    /// Undirected hop distances from `source` (`u32::MAX` when unreachable).
    pub fn distances_from(&self, source: usize) -> Vec<u32> {
        let mut dist = vec![u32::MAX; self.n];
        let mut group_done = vec![false; self.groups.len()];
        let mut queue = VecDeque::new();
        dist[source] = 0;
        queue.push_back(source);
        while let Some(u) = queue.pop_front() {
            for &g in &self.membership[u] {
                let g = g as usize;
                if group_done[g] {
                    continue;
                }
                group_done[g] = true;
                for &t in &self.groups[g] {
                    if dist[t] == u32::MAX {
                        dist[t] = dist[u] + 1;
                        queue.push_back(t);
                    }
                }
            }
        }
        dist
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PathLength {
    /// Largest shortest-path length. `exact == false` means it was estimated
    /// from sampled pairs and is a lower bound.
    Finite {
        hops: usize,
        exact: bool,
    },
    Disconnected {
        from: usize,
        to: usize,
    },
}

impl PathLength {
    pub fn hops(&self) -> Option<usize> {
        match *self {
            PathLength::Finite { hops, .. } => Some(hops),
            PathLength::Disconnected { .. } => None,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PathOptions {
    /// Exact all-sources BFS up to this many tokens.
    pub exact_cap: usize,
    /// Random pairs drawn above the cap.
    pub samples: usize,
    pub seed: u64,
}

impl Default for PathOptions {
    fn default() -> Self {
        Self {
            exact_cap: 8192,
            samples: 1024,
            seed: 0,
        }
    }
}

/// Diameter of the (non-causal) dependency graph: the number of attention
/// layers needed for every token to reach every other.
pub fn max_path_length(n: usize, config: &DilatedConfig) -> Result<PathLength> {
    max_path_length_with(n, config, PathOptions::default())
}

pub fn max_path_length_with(
    n: usize,
    config: &DilatedConfig,
    opts: PathOptions,
) -> Result<PathLength> {
    let graph = DependencyGraph::build(n, &config.clone().with_causal(false))?;
    if n <= opts.exact_cap {
        let mut best = 0;
        for s in 0..n {
            let dist = graph.distances_from(s);
            if let Some(t) = dist.iter().position(|&x| x == u32::MAX) {
                return Ok(PathLength::Disconnected { from: s, to: t });
            }
            best = best.max(*dist.iter().max().unwrap_or(&0) as usize);
        }
        return Ok(PathLength::Finite {
            hops: best,
            exact: true,
        });
    }
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut pairs: Vec<(usize, usize)> = (0..opts.samples)
        .map(|_| (rng.random_range(0..n), rng.random_range(0..n)))
        .collect();
    pairs.sort_unstable();
    let mut best = 0;
    let mut source = usize::MAX;
    let mut dist = Vec::new();
    for (s, t) in pairs {
        if s != source {
            source = s;
            dist = graph.distances_from(s);
        }
        let d = dist[t];
        if d == u32::MAX {
            return Ok(PathLength::Disconnected { from: s, to: t });
        }
        best = best.max(d as usize);
    }
    Ok(PathLength::Finite {
        hops: best,
        exact: false,
    })
}

/// `ceil(log_α(n·(α−1)/w0)) + 2`
pub fn path_length_bound(n: usize, w0: usize, alpha: usize) -> usize {
    let a = alpha as f64;
    let x = n as f64 * (a - 1.0) / w0 as f64;
    let l = x.ln() / a.ln();
    // guard exact powers against ln rounding
    let rounded = l.round();
    let ceil = if (l - rounded).abs() < 1e-9 {
        rounded
    } else {
        l.ceil()
    };
    ceil.max(0.0) as usize + 2
}
