use std::collections::{BTreeSet, HashSet};
use std::path::PathBuf;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::{
    aggregator_map, container_dir_name, data_file, progress_file, AggregatorMap, ContainerInfo,
    InfoParams, FORMAT_VERSION, INDEX_FILE, INFO_FILE,
};
use crate::checksum::crc32c;
use crate::codec;
use crate::comm::Comm;
use crate::engine::{check_defs, check_put, timeout_as_incomplete, CloseMode, CloseSummary, StepReport, StepWriter};
use crate::error::{Error, Result};
use crate::index::{index_merge, index_serialize};
use crate::storage::{node_bb_root, Sink, Storage};
use crate::throttle::PfsFile;
use crate::types::{validate_defs, BlockRecord, EngineParams, Selection, StepIndex, VariableDef};

const TAG_BLOCK: u8 = 16;
const TAG_END: u8 = 17;
const TAG_FRAGMENT: u8 = 18;

struct Pending {
    rec: BlockRecord,
    body: Vec<u8>,
}

#[derive(Serialize, Deserialize)]
struct Fragment {
    ranks: BTreeSet<u32>,
    index: StepIndex,
}

enum IndexSink {
    Direct { file: PfsFile, len: u64 },
    Drained { pfs_path: PathBuf, wait_for: Vec<PathBuf> },
}

/// One rank's handle on a container being written.
pub struct ContainerWriter<'c> {
    comm: &'c Comm,
    params: EngineParams,
    defs: Vec<VariableDef>,
    map: AggregatorMap,
    storage: Storage,
    step: u64,
    put_time: Duration,
    put_vars: HashSet<String>,
    local: Vec<Pending>,
    sent: u32,
    raw_bytes: u64,
    stored_bytes: u64,
    sink: Option<Sink>,
    next_offset: u64,
    index: Option<IndexSink>,
}

fn now_unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

impl<'c> ContainerWriter<'c> {
    /// Collective over `comm`. Creates `<pfs_dir>/<name>.mbp`, replacing any
    /// previous container of that name.
    pub fn open(
        comm: &'c Comm,
        params: &EngineParams,
        defs: &[VariableDef],
        name: &str,
    ) -> Result<Self> {
        params.validate()?;
        validate_defs(defs)?;
        let topo = comm.topology();
        let map = aggregator_map(topo.world_size, topo.ranks_per_node, params.ratio_for(&topo))?;
        let rank = comm.rank();
        let rel = PathBuf::from(container_dir_name(name));

        check_defs(comm, defs)?;

        let mut index = None;
        let setup = if rank == 0 {
            (|| -> Result<()> {
                let dir = params.pfs_dir.join(&rel);
                if dir.exists() {
                    std::fs::remove_dir_all(&dir)?;
                }
                std::fs::create_dir_all(&dir)?;
                let info = ContainerInfo {
                    format_version: FORMAT_VERSION,
                    created_unix_ms: now_unix_ms(),
                    world_size: topo.world_size,
                    ranks_per_node: topo.ranks_per_node,
                    aggregation_ratio: map.aggregation_ratio,
                    variables: defs.to_vec(),
                    params: InfoParams {
                        codec: params.codec.codec,
                        level: params.codec.level,
                        shuffle: params.codec.shuffle,
                        mode: params.mode,
                    },
                };
                let mut json = serde_json::to_vec_pretty(&info)?;
                json.push(b'\n');
                let throttle = crate::throttle::PfsThrottle::from_params(params)?;
                PfsFile::create(&dir.join(INFO_FILE), throttle.clone())?.write_at(0, &json)?;
                let index_path = dir.join(INDEX_FILE);
                let file = PfsFile::create(&index_path, throttle)?;
                index = Some(match &params.bb_dir {
                    Some(bb) => IndexSink::Drained {
                        pfs_path: index_path,
                        wait_for: map
                            .aggregators()
                            .iter()
                            .map(|&a| {
                                node_bb_root(bb, topo.node_of(a))
                                    .join(&rel)
                                    .join(progress_file(map.subfile_of(a)))
                            })
                            .collect(),
                    },
                    None => IndexSink::Direct { file, len: 0 },
                });
                Ok(())
            })()
            .err()
            .map(|e| e.to_string())
        } else {
            None
        };
        if let Some(msg) = comm.agree(setup)? {
            return Err(Error::Open(msg));
        }

        let mut storage = Storage::new(params, &topo, rank)?;
        let mut sink = None;
        if map.is_aggregator(rank) {
            let subfile = map.subfile_of(rank);
            let res = (|| -> Result<Sink> {
                if let Some(bb) = storage.bb_root() {
                    let dir = bb.join(&rel);
                    std::fs::create_dir_all(&dir)?;
                    let progress = dir.join(progress_file(subfile));
                    let _ = std::fs::remove_file(&progress);
                    storage.start_drain(Some(progress));
                }
                storage.open(&rel.join(data_file(subfile)), true)
            })();
            match res {
                Ok(s) => sink = Some(s),
                Err(e) => {
                    comm.agree(Some(e.to_string()))?;
                    return Err(Error::Open(e.to_string()));
                }
            }
        }
        if let Some(msg) = comm.agree(None)? {
            return Err(Error::Open(msg));
        }

        Ok(Self {
            comm,
            params: params.clone(),
            defs: defs.to_vec(),
            map,
            storage,
            step: 0,
            put_time: Duration::ZERO,
            put_vars: HashSet::new(),
            local: Vec::new(),
            sent: 0,
            raw_bytes: 0,
            stored_bytes: 0,
            sink,
            next_offset: 0,
            index,
        })
    }

    pub fn current_step(&self) -> u64 {
        self.step
    }

    pub fn aggregator_map(&self) -> &AggregatorMap {
        &self.map
    }

    pub fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        let t0 = Instant::now();
        let def = &self.defs[check_put(&self.defs, self.step, var, step, sel, bytes)?];
        let es = def.dtype.elem_size();
        let want = bytes.len() as u64;
        if !self.put_vars.insert(var.to_string()) {
            return Err(Error::DuplicateBlock {
                var: var.to_string(),
                rank: self.comm.rank(),
            });
        }
        let (stat_min, stat_max) = def.dtype.min_max(bytes);
        let checksum_raw = crc32c(bytes);
        let payload = codec::encode(bytes, es, self.params.codec)?;
        let rank = self.comm.rank();
        let rec = BlockRecord {
            var: var.to_string(),
            step,
            writer_rank: rank,
            start: sel.start.clone(),
            count: sel.count.clone(),
            subfile_id: self.map.subfile_of(rank),
            offset: 0,
            stored_nbytes: payload.body.len() as u64,
            raw_nbytes: want,
            codec: payload.header.codec,
            level: payload.header.level,
            shuffle: payload.header.shuffle,
            checksum_raw,
            stat_min,
            stat_max,
        };
        self.raw_bytes += want;
        self.stored_bytes += rec.stored_nbytes;
        let agg = self.map.aggregator_of(rank);
        if agg == rank {
            self.local.push(Pending {
                rec,
                body: payload.body,
            });
        } else {
            let hdr = serde_json::to_vec(&rec)?;
            self.comm.send_parts(
                agg,
                TAG_BLOCK,
                &[&(hdr.len() as u32).to_le_bytes(), &hdr, &payload.body],
            )?;
            self.sent += 1;
        }
        self.put_time += t0.elapsed();
        Ok(())
    }

    fn recv_step(&self, src: u32, tag: u8) -> Result<Vec<u8>> {
        self.comm
            .recv(Some(src), tag)
            .map(|(_, p)| p)
            .map_err(timeout_as_incomplete(self.step))
    }

    fn def_index(&self, var: &str) -> usize {
        self.defs.iter().position(|d| d.name == var).unwrap_or(usize::MAX)
    }

    /// Aggregator side: collect the group's blocks and append them as one
    /// coalesced sub-file write. Returns the time spent waiting for burst
    /// buffer space.
    fn flush_group(&mut self) -> Result<Duration> {
        let rank = self.comm.rank();
        let mut blocks = std::mem::take(&mut self.local);
        for m in self.map.members(rank) {
            if m == rank {
                continue;
            }
            let p = self.recv_step(m, TAG_END)?;
            let n = u32::from_le_bytes(
                p.get(..4)
                    .ok_or_else(|| Error::protocol("short end-of-step message"))?
                    .try_into()
                    .unwrap(),
            );
            for _ in 0..n {
                blocks.push(parse_block(&self.recv_step(m, TAG_BLOCK)?)?);
            }
        }
        blocks.sort_by_key(|b| (b.rec.writer_rank, self.def_index(&b.rec.var)));

        let subfile = self.map.subfile_of(rank);
        let total: usize = blocks.iter().map(|b| b.body.len()).sum();
        let mut buf = Vec::with_capacity(total);
        let mut ranks = BTreeSet::new();
        let mut recs = Vec::with_capacity(blocks.len());
        for b in blocks {
            let mut rec = b.rec;
            rec.subfile_id = subfile;
            rec.offset = self.next_offset + buf.len() as u64;
            ranks.insert(rec.writer_rank);
            buf.extend_from_slice(&b.body);
            recs.push(rec);
        }
        let sink = self.sink.as_ref().expect("aggregator has a sub-file");
        let waited = sink.write_at(&self.storage, self.next_offset, &buf)?;
        self.next_offset += total as u64;
        self.storage.step_done(self.step);

        let frag = Fragment {
            ranks,
            index: StepIndex {
                step: self.step,
                complete: true,
                blocks: recs,
            },
        };
        self.comm.send(0, TAG_FRAGMENT, &serde_json::to_vec(&frag)?)?;
        Ok(waited)
    }

    fn commit_index(&mut self) -> Result<()> {
        let mut frags = Vec::new();
        let mut expected = BTreeSet::new();
        for _ in 0..self.map.num_subfiles() {
            let p = self
                .comm
                .recv(None, TAG_FRAGMENT)
                .map_err(timeout_as_incomplete(self.step))?
                .1;
            let f: Fragment = serde_json::from_slice(&p)?;
            expected.extend(f.ranks);
            frags.push(f.index);
        }
        let merged = index_merge(&frags, &expected)?;
        if !merged.complete {
            return Err(Error::IncompleteStep {
                step: self.step,
                detail: "missing rank fragments".into(),
            });
        }
        let mut line = index_serialize(&merged).into_bytes();
        line.push(b'\n');
        match self.index.as_mut().expect("rank 0 owns the index") {
            IndexSink::Direct { file, len } => {
                file.write_at(*len, &line)?;
                *len += line.len() as u64;
            }
            IndexSink::Drained { pfs_path, wait_for } => {
                let drain = self.storage.drain().expect("rank 0 drains");
                drain.append_after(pfs_path, line, self.step, wait_for.clone());
            }
        }
        Ok(())
    }

    pub fn end_step(&mut self) -> Result<StepReport> {
        let t0 = Instant::now();
        let rank = self.comm.rank();
        let mut waited = Duration::ZERO;
        if self.map.is_aggregator(rank) {
            waited = self.flush_group()?;
        } else {
            self.comm.send(
                self.map.aggregator_of(rank),
                TAG_END,
                &self.sent.to_le_bytes(),
            )?;
        }
        if rank == 0 {
            self.commit_index()?;
        }
        self.comm.barrier()?;
        let report = StepReport {
            step: self.step,
            perceived_write_seconds: (self.put_time + t0.elapsed()).as_secs_f64(),
            bb_wait_seconds: waited.as_secs_f64(),
            raw_bytes: self.raw_bytes,
            stored_bytes: self.stored_bytes,
            skipped: false,
        };
        self.step += 1;
        self.put_time = Duration::ZERO;
        self.put_vars.clear();
        self.sent = 0;
        self.raw_bytes = 0;
        self.stored_bytes = 0;
        Ok(report)
    }

    pub fn close(mut self, mode: CloseMode) -> Result<CloseSummary> {
        let t0 = Instant::now();
        if !self.put_vars.is_empty() {
            log::warn!(
                "rank {}: closing with unfinished step {}; its blocks are dropped",
                self.comm.rank(),
                self.step
            );
        }
        let mut summary = CloseSummary {
            steps: self.step,
            ..Default::default()
        };
        let res = (|| -> Result<()> {
            match mode {
                CloseMode::Wait => summary.drain = self.storage.finish()?,
                CloseMode::Detach => summary.detached = self.storage.detach(),
            }
            if let Some(s) = &self.sink {
                s.sync()?;
            }
            match &self.index {
                Some(IndexSink::Direct { file, .. }) => file.sync()?,
                Some(IndexSink::Drained { pfs_path, .. }) if mode == CloseMode::Wait => {
                    std::fs::File::open(pfs_path)?.sync_all()?
                }
                _ => {}
            }
            Ok(())
        })();
        let failure = res.as_ref().err().map(|e| e.to_string());
        let remote = self.comm.agree(failure)?;
        res?;
        if let Some(msg) = remote {
            return Err(Error::Drain(msg));
        }
        summary.close_seconds = t0.elapsed().as_secs_f64();
        Ok(summary)
    }
}

fn parse_block(p: &[u8]) -> Result<Pending> {
    let n = p
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| Error::protocol("short block message"))?;
    if p.len() < 4 + n {
        return Err(Error::protocol("block header overruns message"));
    }
    let rec: BlockRecord = serde_json::from_slice(&p[4..4 + n])?;
    let body = p[4 + n..].to_vec();
    if body.len() as u64 != rec.stored_nbytes {
        return Err(Error::protocol("block body length disagrees with header"));
    }
    Ok(Pending { rec, body })
}

impl StepWriter for ContainerWriter<'_> {
    fn put(&mut self, var: &str, step: u64, sel: &Selection, bytes: &[u8]) -> Result<()> {
        ContainerWriter::put(self, var, step, sel, bytes)
    }

    fn end_step(&mut self) -> Result<StepReport> {
        ContainerWriter::end_step(self)
    }

    fn close(self: Box<Self>, mode: CloseMode) -> Result<CloseSummary> {
        ContainerWriter::close(*self, mode)
    }
}
