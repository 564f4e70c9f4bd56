use std::collections::HashMap;
use std::io::{BufReader, BufWriter, ErrorKind};
use std::net::TcpStream;
use std::path::Path;
use std::time::{Duration, Instant};

use memmap2::Mmap;

use super::{
    hostname, msg, parse_addr, protocol_err, DataplaneDescriptor, GetReq, HelloR, HelloW, Release,
    PROTOCOL_VERSION,
};
use crate::checksum::crc32c;
use crate::codec::{self, payload_from_wire, PayloadHeader, StoredPayload};
use crate::comm::connect_retry;
use crate::error::{Error, Result};
use crate::frame::{read_frame, write_frame};
use crate::index::index_parse;
use crate::layout::{copy_region, validate_selection, Coverage};
use crate::types::{BlockRecord, DataplaneKind, Selection, StepIndex, VariableDef};

#[derive(Clone, Debug)]
pub struct ReaderOptions {
    /// Bounds connecting and each wait for the next step.
    pub timeout: Duration,
    /// Hostname sent in HELLO_R; defaults to this machine's.
    pub hostname: Option<String>,
    pub version: u32,
}

impl Default for ReaderOptions {
    fn default() -> Self {
        Self {
            timeout: Duration::from_secs(30),
            hostname: None,
            version: PROTOCOL_VERSION,
        }
    }
}

struct DataConn {
    r: BufReader<TcpStream>,
    w: BufWriter<TcpStream>,
}

impl DataConn {
    fn send(&mut self, t: u8, p: &[u8]) -> Result<()> {
        write_frame(&mut self.w, t, p)?;
        Ok(())
    }
}

pub struct StageReader {
    ctl_r: BufReader<TcpStream>,
    ctl_w: BufWriter<TcpStream>,
    hello: HelloW,
    data: Vec<DataConn>,
    current: Option<StepIndex>,
    maps: HashMap<u32, Option<Mmap>>,
    closed: bool,
}

fn read_checked(r: &mut BufReader<TcpStream>, what: &str) -> Result<(u8, Vec<u8>)> {
    match read_frame(r) {
        Ok(Some(f)) => Ok(f),
        Ok(None) => Err(Error::protocol(format!("writer closed the {what} connection"))),
        Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
            Err(Error::Timeout(format!("waiting on the {what} connection")))
        }
        Err(e) => Err(e.into()),
    }
}

impl StageReader {
    pub fn connect(endpoint: &str, opts: ReaderOptions) -> Result<Self> {
        let host = opts.hostname.clone().unwrap_or_else(hostname);
        let ctl = connect_retry(parse_addr(endpoint)?, opts.timeout)?;
        ctl.set_read_timeout(Some(opts.timeout))?;
        let mut ctl_r = BufReader::new(ctl.try_clone()?);
        let mut ctl_w = BufWriter::new(ctl);
        let hello = HelloR {
            version: opts.version,
            hostname: host.clone(),
            reader_id: None,
        };
        write_frame(&mut ctl_w, msg::HELLO_R, &serde_json::to_vec(&hello)?)?;
        let hello: HelloW = match read_checked(&mut ctl_r, "control")? {
            (msg::HELLO_W, p) => serde_json::from_slice(&p)?,
            (msg::ERR, p) => return Err(protocol_err(&p)),
            (t, _) => return Err(Error::protocol(format!("expected HELLO_W, got message {t}"))),
        };
        let mut data = Vec::with_capacity(hello.dataplane.endpoints.len());
        for ep in &hello.dataplane.endpoints {
            let s = connect_retry(parse_addr(ep)?, opts.timeout)?;
            s.set_read_timeout(Some(opts.timeout))?;
            let mut c = DataConn {
                r: BufReader::new(s.try_clone()?),
                w: BufWriter::new(s),
            };
            let h = HelloR {
                version: opts.version,
                hostname: host.clone(),
                reader_id: Some(hello.reader_id),
            };
            c.send(msg::HELLO_R, &serde_json::to_vec(&h)?)?;
            data.push(c);
        }
        Ok(Self {
            ctl_r,
            ctl_w,
            hello,
            data,
            current: None,
            maps: HashMap::new(),
            closed: false,
        })
    }

    /// Waits for the writer's contact file, then connects.
    pub fn connect_contact(path: &Path, opts: ReaderOptions) -> Result<Self> {
        let deadline = Instant::now() + opts.timeout;
        loop {
            match std::fs::read_to_string(path) {
                Ok(s) if !s.trim().is_empty() => return Self::connect(s.trim(), opts),
                _ if Instant::now() >= deadline => {
                    return Err(Error::Timeout(format!("no contact file at {}", path.display())))
                }
                _ => std::thread::sleep(Duration::from_millis(10)),
            }
        }
    }

    pub fn defs(&self) -> &[VariableDef] {
        &self.hello.variables
    }

    pub fn reader_id(&self) -> u32 {
        self.hello.reader_id
    }

    pub fn world_size(&self) -> u32 {
        self.hello.world_size
    }

    pub fn dataplane(&self) -> &DataplaneDescriptor {
        &self.hello.dataplane
    }

    /// Blocks until the next announced step; `None` once the writer closes.
    pub fn begin_step(&mut self) -> Result<Option<&StepIndex>> {
        if self.current.is_some() {
            return Err(Error::protocol("begin_step before end_step"));
        }
        if self.closed {
            return Ok(None);
        }
        match read_checked(&mut self.ctl_r, "control")? {
            (msg::STEP_ANNOUNCE, p) => {
                let idx = index_parse(std::str::from_utf8(&p).map_err(|_| Error::protocol("announce is not UTF-8"))?)?;
                self.current = Some(idx);
                Ok(self.current.as_ref())
            }
            (msg::CLOSE, _) => {
                self.closed = true;
                Ok(None)
            }
            (msg::ERR, p) => Err(protocol_err(&p)),
            (t, _) => Err(Error::protocol(format!("unexpected message {t} on control"))),
        }
    }

    pub fn current_step(&self) -> Option<u64> {
        self.current.as_ref().map(|c| c.step)
    }

    pub fn get(&mut self, var: &str, sel: &Selection) -> Result<Vec<u8>> {
        let idx = self
            .current
            .as_ref()
            .ok_or_else(|| Error::protocol(format!("get of {var:?} outside an open step")))?;
        let def = self
            .hello
            .variables
            .iter()
            .find(|d| d.name == var)
            .ok_or_else(|| Error::protocol(format!("unknown variable {var:?}")))?
            .clone();
        let step = idx.step;
        let blocks: Vec<BlockRecord> = idx.blocks_for(var).cloned().collect();
        if blocks.is_empty() {
            return Err(Error::protocol(format!("{var:?} was not announced in step {step}")));
        }
        validate_selection(sel, &def)?;
        let es = def.dtype.elem_size();
        let mut out = vec![0u8; sel.num_elements() as usize * es];
        let mut cov = Coverage::new(sel);
        for b in &blocks {
            let Some(region) = b.selection().intersect(sel) else { continue };
            let raw = self.fetch(b, es as u32)?;
            copy_region(&raw, &b.selection(), &mut out, sel, &region, es);
            cov.mark(&region);
        }
        if let Some(gap) = cov.first_gap() {
            return Err(Error::Coverage(format!(
                "{var} step {step}: no block covers element {gap:?}"
            )));
        }
        Ok(out)
    }

    pub fn get_full(&mut self, var: &str) -> Result<Vec<u8>> {
        let sel = self
            .hello
            .variables
            .iter()
            .find(|d| d.name == var)
            .ok_or_else(|| Error::protocol(format!("unknown variable {var:?}")))?
            .full_selection();
        self.get(var, &sel)
    }

    fn fetch(&mut self, b: &BlockRecord, elem_size: u32) -> Result<Vec<u8>> {
        let corrupt = || Error::CorruptBlock {
            subfile: b.subfile_id,
            offset: b.offset,
        };
        let payload = match self.hello.dataplane.kind {
            DataplaneKind::Tcp => {
                let conn = self
                    .data
                    .get_mut(b.writer_rank as usize)
                    .ok_or_else(|| Error::protocol(format!("no data endpoint for rank {}", b.writer_rank)))?;
                let req = GetReq {
                    step: b.step,
                    var: b.var.clone(),
                };
                conn.send(msg::GET_REQ, &serde_json::to_vec(&req)?)?;
                match read_checked(&mut conn.r, "data")? {
                    (msg::DATA, p) => payload_from_wire(&p, None)?,
                    (msg::ERR, p) => return Err(protocol_err(&p)),
                    (t, _) => return Err(Error::protocol(format!("unexpected message {t} on data"))),
                }
            }
            DataplaneKind::Shm => {
                let step = self.current.as_ref().map_or(b.step, |c| c.step);
                let map = match self.maps.get(&b.subfile_id) {
                    Some(m) => m,
                    None => {
                        let path = self
                            .hello
                            .dataplane
                            .shm_path(b.subfile_id, step)
                            .ok_or_else(|| Error::protocol("shm dataplane without a segment pattern"))?;
                        let f = std::fs::File::open(&path)?;
                        // empty segments cannot be mapped
                        let m = if f.metadata()?.len() == 0 {
                            None
                        } else {
                            Some(unsafe { Mmap::map(&f)? })
                        };
                        self.maps.entry(b.subfile_id).or_insert(m)
                    }
                };
                let seg: &[u8] = map.as_deref().unwrap_or(&[]);
                let body = seg
                    .get(b.offset as usize..(b.offset + b.stored_nbytes) as usize)
                    .ok_or_else(corrupt)?
                    .to_vec();
                StoredPayload {
                    header: PayloadHeader {
                        raw_nbytes: b.raw_nbytes,
                        codec: b.codec,
                        level: b.level,
                        shuffle: b.shuffle,
                        elem_size,
                    },
                    body,
                }
            }
        };
        let raw = codec::decode(&payload).map_err(|_| corrupt())?;
        if crc32c(&raw) != b.checksum_raw {
            return Err(corrupt());
        }
        Ok(raw)
    }

    /// Releases the current step on the control and every data connection.
    pub fn end_step(&mut self) -> Result<()> {
        let idx = self
            .current
            .take()
            .ok_or_else(|| Error::protocol("end_step without an open step"))?;
        self.maps.clear();
        let rel = serde_json::to_vec(&Release { step: idx.step })?;
        for c in &mut self.data {
            c.send(msg::STEP_RELEASE, &rel)?;
        }
        write_frame(&mut self.ctl_w, msg::STEP_RELEASE, &rel)?;
        Ok(())
    }
}

impl Drop for StageReader {
    fn drop(&mut self) {
        for c in &mut self.data {
            let _ = c.send(msg::CLOSE, &[]);
        }
        let _ = write_frame(&mut self.ctl_w, msg::CLOSE, &[]);
    }
}
