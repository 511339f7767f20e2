//! Sequence-parallel dilated attention over simulated devices.
//!
//! Patterns whose segment fits inside a device (`w <= l`) are computed locally.
//! Larger segments span `w / l` consecutive devices: each device sparsifies
//! its own rows of the segment, the group all-gathers the sparsified keys and
//! values, and every device attends its local sparsified queries against the
//! gathered buffers. In the backward pass the key/value gradients computed
//! against the gathered buffers are reduce-scattered back to their owners.

use std::thread;

use crate::dilated::{
    attend_maps, build_index_maps, head_slices, mix_patterns, segment_backward, segment_positions,
    DilatedConfig, PatternOutput,
};
use crate::distributed::fabric::{CommTranscript, Fabric, KvPayload, Phase};
use crate::distributed::shard::DeviceShard;
use crate::error::{Error, Result};
use crate::tensor_core::{
    attend, backward_with_stats, row_dots, AttentionResult, Gradients, Real, RealMatrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Placement {
    Local,
    Gathered { group_size: usize },
}

struct Setup {
    local_len: usize,
    head_dim: usize,
    scale: f64,
    placements: Vec<Placement>,
}

/// A gathered pattern as seen by one device.
struct Slot<T: Real> {
    /// Per head: global positions of this device's sparsified rows.
    own: Vec<Vec<usize>>,
    /// Per head: global positions of the assembled key/value rows.
    key_positions: Vec<Vec<usize>>,
    kv: KvPayload<T>,
}

struct DeviceState<T: Real> {
    heads: Vec<AttentionResult<T>>,
    slots: Vec<Option<Slot<T>>>,
    macs: u64,
}

/// Assembled forward output plus the per-device pieces and traffic.
#[derive(Clone, Debug, PartialEq)]
pub struct DistributedOutput<T: Real = f64> {
    pub result: AttentionResult<T>,
    pub per_device: Vec<AttentionResult<T>>,
    pub transcript: CommTranscript,
    /// Multiply-accumulates in the attention products, summed over devices.
    pub measured_macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistributedGradients<T: Real = f64> {
    /// Gradients with respect to each device's local `Q, K, V`.
    pub per_device: Vec<Gradients<T>>,
    /// Gather records of the recomputed forward followed by reduce-scatter
    /// records of the backward.
    pub transcript: CommTranscript,
}

impl<T: Real> DistributedGradients<T> {
    /// Row-concatenation of the per-device gradients.
    pub fn assembled(&self) -> Result<Gradients<T>> {
        let cat = |f: fn(&Gradients<T>) -> &RealMatrix<T>| {
            RealMatrix::vstack(
                &self
                    .per_device
                    .iter()
                    .map(|g| f(g).clone())
                    .collect::<Vec<_>>(),
            )
        };
        Ok(Gradients {
            q: cat(|g| &g.q)?,
            k: cat(|g| &g.k)?,
            v: cat(|g| &g.v)?,
        })
    }
}

fn setup<T: Real>(shards: &[DeviceShard<T>], config: &DilatedConfig) -> Result<Setup> {
    let world = shards.len();
    let first = shards
        .first()
        .ok_or_else(|| Error::config("no device shards"))?;
    let (l, width) = first.q.shape();
    for (i, s) in shards.iter().enumerate() {
        if s.rank != i || s.world_size != world || s.local_len != l || s.global_offset != i * l {
            return Err(Error::config(format!(
                "shard {i} is out of order or inconsistent with world size {world}"
            )));
        }
        if s.q.shape() != (l, width) || s.k.shape() != (l, width) || s.v.shape() != (l, width) {
            return Err(Error::shape(
                "distributed_dilated_forward",
                format!("shard {i} has inconsistent q/k/v shapes"),
            ));
        }
    }
    if l == 0 {
        return Err(Error::config("empty shards"));
    }
    let n = l * world;
    config.check_length(n)?;
    let head_dim = config.head_dim(width)?;
    let placements = config
        .patterns()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let w = p.segment_len;
            if w <= l {
                if l % w != 0 {
                    return Err(Error::config(format!(
                        "pattern {i} {p}: segments straddle device boundaries (local length {l})"
                    )));
                }
                Ok(Placement::Local)
            } else if w % l == 0 {
                Ok(Placement::Gathered { group_size: w / l })
            } else {
                Err(Error::config(format!(
                    "pattern {i} {p}: segment does not span whole devices (local length {l})"
                )))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Setup {
        local_len: l,
        head_dim,
        scale: config.scale().resolve(head_dim),
        placements,
    })
}

/// Runs `f` for every item on its own thread; results are returned in item
/// order, so scheduling cannot affect them.
fn per_device<A: Sync, R: Send>(items: &[A], f: impl Fn(&A) -> Result<R> + Sync) -> Result<Vec<R>> {
    thread::scope(|scope| {
        let handles: Vec<_> = items.iter().map(|item| scope.spawn(|| f(item))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("device thread panicked"))
            .collect()
    })
}

fn own_positions<T: Real>(
    shard: &DeviceShard<T>,
    config: &DilatedConfig,
    pattern: usize,
    head: usize,
) -> Vec<usize> {
    let p = config.patterns()[pattern];
    let start = shard.global_offset / p.segment_len * p.segment_len;
    let range = shard.global_positions();
    segment_positions(start, p, p.head_offset(head))
        .into_iter()
        .filter(|x| range.contains(x))
        .collect()
}

fn local_rows(positions: &[usize], offset: usize) -> Vec<usize> {
    positions.iter().map(|p| p - offset).collect()
}

fn run_forward<T: Real>(
    shards: &[DeviceShard<T>],
    config: &DilatedConfig,
    fabric: &mut Fabric,
) -> Result<(Setup, Vec<DeviceState<T>>)> {
    let setup = setup(shards, config)?;
    let dh = setup.head_dim;
    let heads = config.heads();

    // Sparsify local keys/values for every gathered pattern.
    let contributions = per_device(shards, |s| {
        Ok(setup
            .placements
            .iter()
            .enumerate()
            .map(|(i, pl)| match pl {
                Placement::Local => None,
                Placement::Gathered { .. } => {
                    let own: Vec<Vec<usize>> =
                        (0..heads).map(|h| own_positions(s, config, i, h)).collect();
                    let mut kv = KvPayload {
                        keys: Vec::new(),
                        values: Vec::new(),
                    };
                    for (h, pos) in own.iter().enumerate() {
                        let rows = local_rows(pos, s.global_offset);
                        let (_, kh, vh) = head_slices(&s.q, &s.k, &s.v, h, dh);
                        kv.keys.push(kh.select_rows(&rows));
                        kv.values.push(vh.select_rows(&rows));
                    }
                    Some((own, kv))
                }
            })
            .collect::<Vec<_>>())
    })?;

    // All-gather barrier.
    let world = shards.len();
    let mut slots: Vec<Vec<Option<Slot<T>>>> = (0..world)
        .map(|_| (0..config.patterns().len()).map(|_| None).collect())
        .collect();
    for (i, pl) in setup.placements.iter().enumerate() {
        match *pl {
            Placement::Local => (0..world).for_each(|d| fabric.record_local(d, Phase::Gather, i)),
            Placement::Gathered { group_size } => {
                for start in (0..world).step_by(group_size) {
                    let group: Vec<usize> = (start..start + group_size).collect();
                    let payloads: Vec<KvPayload<T>> = group
                        .iter()
                        .map(|&d| {
                            contributions[d][i]
                                .as_ref()
                                .expect("gathered slot")
                                .1
                                .clone()
                        })
                        .collect();
                    let assembled = fabric.all_gather(i, &group, &payloads)?;
                    let key_positions: Vec<Vec<usize>> = (0..heads)
                        .map(|h| {
                            group
                                .iter()
                                .flat_map(|&d| {
                                    contributions[d][i].as_ref().expect("slot").0[h].clone()
                                })
                                .collect()
                        })
                        .collect();
                    for &d in &group {
                        slots[d][i] = Some(Slot {
                            own: contributions[d][i].as_ref().expect("slot").0.clone(),
                            key_positions: key_positions.clone(),
                            kv: assembled.clone(),
                        });
                    }
                }
            }
        }
    }

    // Local and cross attention, then per-head mixing.
    let work: Vec<_> = shards.iter().zip(slots).collect();
    let states = per_device(&work, |(s, slots)| {
        let scale = T::from_f64(setup.scale);
        let l = setup.local_len;
        let mut mixed = Vec::with_capacity(heads);
        let mut macs = 0;
        for h in 0..heads {
            let (qh, kh, vh) = head_slices(&s.q, &s.k, &s.v, h, dh);
            let mut outputs = Vec::with_capacity(setup.placements.len());
            for (i, pl) in setup.placements.iter().enumerate() {
                match pl {
                    Placement::Local => {
                        let maps = build_index_maps(config, l, i, h)?;
                        outputs.push(attend_maps(
                            &qh,
                            &kh,
                            &vh,
                            &maps,
                            config.causal(),
                            scale,
                            l,
                            &mut macs,
                        ));
                    }
                    Placement::Gathered { .. } => {
                        let slot = slots[i].as_ref().expect("gathered slot");
                        let rows = local_rows(&slot.own[h], s.global_offset);
                        let (res, m) = attend(
                            &qh.select_rows(&rows),
                            &slot.kv.keys[h],
                            &slot.kv.values[h],
                            config.causal(),
                            scale,
                            &slot.own[h],
                            &slot.key_positions[h],
                        );
                        macs += m;
                        let mut out = PatternOutput::empty(l, dh);
                        out.scattered.scatter_rows(&rows, &res.output);
                        for (j, &r) in rows.iter().enumerate() {
                            out.row_lse[r] = res.row_lse[j];
                        }
                        outputs.push(out);
                    }
                }
            }
            mixed.push(mix_patterns(&outputs)?);
        }
        Ok((mixed, macs))
    })?;

    let states = states
        .into_iter()
        .zip(work)
        .map(|((heads, macs), (_, slots))| DeviceState { heads, slots, macs })
        .collect();
    Ok((setup, states))
}

/// Sequence-parallel forward pass; the assembled result matches
/// [`crate::dilated::dilated_forward`] on the unsharded input.
pub fn distributed_dilated_forward<T: Real>(
    shards: &[DeviceShard<T>],
    config: &DilatedConfig,
) -> Result<DistributedOutput<T>> {
    let mut fabric = Fabric::new();
    let (_, states) = run_forward(shards, config, &mut fabric)?;
    let measured_macs = states.iter().map(|s| s.macs).sum();
    let per_device = states
        .into_iter()
        .map(|s| AttentionResult::concat_heads(s.heads))
        .collect::<Result<Vec<_>>>()?;
    Ok(DistributedOutput {
        result: AttentionResult::concat_rows(&per_device)?,
        per_device,
        transcript: fabric.into_transcript(),
        measured_macs,
    })
}

/// Sequence-parallel backward pass for per-device upstream gradients.
pub fn distributed_dilated_backward<T: Real>(
    shards: &[DeviceShard<T>],
    config: &DilatedConfig,
    grad_output: &[RealMatrix<T>],
) -> Result<DistributedGradients<T>> {
    if grad_output.len() != shards.len()
        || grad_output
            .iter()
            .zip(shards)
            .any(|(g, s)| g.shape() != s.q.shape())
    {
        return Err(Error::shape(
            "distributed_dilated_backward",
            "one grad_output block per shard, shaped like q",
        ));
    }
    let mut fabric = Fabric::new();
    let (setup, states) = run_forward(shards, config, &mut fabric)?;
    let dh = setup.head_dim;
    let heads = config.heads();
    let l = setup.local_len;

    let work: Vec<_> = shards.iter().zip(&states).zip(grad_output).collect();
    let partial = per_device(&work, |((s, state), go)| {
        let scale = T::from_f64(setup.scale);
        let width = s.q.cols();
        let mut grads = Gradients::zeros(l, l, width, width);
        let mut outgoing: Vec<Option<KvPayload<T>>> = setup
            .placements
            .iter()
            .map(|pl| match pl {
                Placement::Local => None,
                Placement::Gathered { .. } => Some(KvPayload {
                    keys: Vec::new(),
                    values: Vec::new(),
                }),
            })
            .collect();
        for h in 0..heads {
            let (qh, kh, vh) = head_slices(&s.q, &s.k, &s.v, h, dh);
            let go_h = go.column_block(h * dh, dh);
            let mixed = &state.heads[h];
            let delta = row_dots(&go_h, &mixed.output);
            let mut gh = Gradients::zeros(l, l, dh, dh);
            for (i, pl) in setup.placements.iter().enumerate() {
                match pl {
                    Placement::Local => {
                        for map in build_index_maps(config, l, i, h)? {
                            segment_backward(
                                &qh,
                                &kh,
                                &vh,
                                &go_h,
                                &map,
                                config.causal(),
                                scale,
                                &mixed.row_lse,
                                &delta,
                                &mut gh,
                            );
                        }
                    }
                    Placement::Gathered { .. } => {
                        let slot = state.slots[i].as_ref().expect("gathered slot");
                        let rows = local_rows(&slot.own[h], s.global_offset);
                        let keys = &slot.kv.keys[h];
                        let lse: Vec<T> = rows.iter().map(|&r| mixed.row_lse[r]).collect();
                        let dl: Vec<T> = rows.iter().map(|&r| delta[r]).collect();
                        let mut g = Gradients::zeros(rows.len(), keys.rows(), dh, dh);
                        backward_with_stats(
                            &qh.select_rows(&rows),
                            keys,
                            &slot.kv.values[h],
                            config.causal(),
                            scale,
                            &slot.own[h],
                            &slot.key_positions[h],
                            &go_h.select_rows(&rows),
                            &lse,
                            &dl,
                            &mut g,
                        );
                        gh.q.scatter_add_rows(&rows, &g.q);
                        let out = outgoing[i].as_mut().expect("gathered");
                        out.keys.push(g.k);
                        out.values.push(g.v);
                    }
                }
            }
            grads.q.set_column_block(h * dh, &gh.q);
            grads.k.set_column_block(h * dh, &gh.k);
            grads.v.set_column_block(h * dh, &gh.v);
        }
        Ok((grads, outgoing))
    })?;

    // Reduce-scatter barrier.
    let world = shards.len();
    let (mut grads, outgoing): (Vec<_>, Vec<_>) = partial.into_iter().unzip();
    for (i, pl) in setup.placements.iter().enumerate() {
        match *pl {
            Placement::Local => {
                (0..world).for_each(|d| fabric.record_local(d, Phase::ReduceScatter, i))
            }
            Placement::Gathered { group_size } => {
                for start in (0..world).step_by(group_size) {
                    let group: Vec<usize> = (start..start + group_size).collect();
                    let contributions: Vec<KvPayload<T>> = group
                        .iter()
                        .map(|&d| outgoing[d][i].clone().expect("gathered"))
                        .collect();
                    let own: Vec<&Vec<Vec<usize>>> = group
                        .iter()
                        .map(|&d| &states[d].slots[i].as_ref().expect("slot").own)
                        .collect();
                    let rows: Vec<Vec<usize>> = own
                        .iter()
                        .map(|o| o.iter().map(Vec::len).collect())
                        .collect();
                    let slices = fabric.reduce_scatter(i, &group, &contributions, &rows)?;
                    for ((&d, slice), own) in group.iter().zip(slices).zip(own) {
                        for (h, own_h) in own.iter().enumerate() {
                            let local = local_rows(own_h, shards[d].global_offset);
                            let mut gk = grads[d].k.column_block(h * dh, dh);
                            let mut gv = grads[d].v.column_block(h * dh, dh);
                            gk.scatter_add_rows(&local, &slice.keys[h]);
                            gv.scatter_add_rows(&local, &slice.values[h]);
                            grads[d].k.set_column_block(h * dh, &gk);
                            grads[d].v.set_column_block(h * dh, &gv);
                        }
                    }
                }
            }
        }
    }

    Ok(DistributedGradients {
        per_device: grads,
        transcript: fabric.into_transcript(),
    })
}
