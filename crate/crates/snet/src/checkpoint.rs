//! Checkpoint files: magic `SNCK`, version byte, `u32` entry count, then per
//! entry a `u32` name length, the UTF-8 name and one STNT array.
//!
//! Entry names: `meta/config` and `meta/state` (key = value text),
//! `param/<name>`, `buffer/<name>/mean`, `buffer/<name>/var` and
//! `optim/velocity/<name>`.

use std::collections::BTreeMap;
use std::path::Path;

use snet_core::model::Model;
use snet_core::optim::Sgd;
use snet_core::{BnStats, Tensor};

use crate::config::{parse_network, render_network, Kv};
use crate::error::{Error, Result};
use crate::stnt::{Array, DecodeError, Payload, Reader};

pub const MAGIC: &[u8; 4] = b"SNCK";
pub const VERSION: u8 = 1;

/// Progress of a training run at the time of the checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub seed: u64,
    /// `(epoch, mean foreground dice)` of the best evaluation so far.
    pub best: Option<(usize, f64)>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<Sgd>,
    pub state: TrainState,
}

fn render_state(s: &TrainState, opt: Option<&Sgd>) -> String {
    let mut out = format!("epoch = {}\nseed = {}\n", s.epoch, s.seed);
    if let Some((e, d)) = s.best {
        out += &format!("best_epoch = {e}\nbest_dice = {d}\n");
    }
    if let Some(o) = opt {
        out += &format!("optim.lr = {}\noptim.momentum = {}\noptim.weight_decay = {}\noptim.step = {}\n", o.lr, o.momentum, o.weight_decay, o.step);
    }
    out
}

fn f64_array(t: &Tensor) -> Array {
    Array::from_tensor(t)
}

fn vec_array(v: &[f64]) -> Array {
    Array { shape: vec![v.len()], payload: Payload::F64(v.to_vec()) }
}

impl Checkpoint {
    pub fn entries(&self) -> Vec<(String, Array)> {
        let mut out = vec![
            ("meta/config".to_string(), Array::text(&render_network(&self.model.config))),
            ("meta/state".to_string(), Array::text(&render_state(&self.state, self.optimizer.as_ref()))),
        ];
        for (n, t) in self.model.params.iter() {
            out.push((format!("param/{n}"), f64_array(t)));
        }
        for (n, s) in &self.model.buffers {
            out.push((format!("buffer/{n}/mean"), vec_array(&s.mean)));
            out.push((format!("buffer/{n}/var"), vec_array(&s.var)));
        }
        if let Some(o) = &self.optimizer {
            for (n, t) in &o.velocity {
                out.push((format!("optim/velocity/{n}"), f64_array(t)));
            }
        }
        out
    }

    pub fn encode(&self) -> Vec<u8> {
        let entries = self.entries();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, a) in &entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            a.encode_into(&mut out);
        }
        out
    }

    /// Raw `(name, array)` entries in file order.
    pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Array)>, DecodeError> {
        let mut r = Reader::new(bytes);
        if r.take(4, "magic")? != MAGIC {
            return r.fail(0, "bad magic (expected `SNCK`)");
        }
        let v = r.u8("version")?;
        if v != VERSION {
            return r.fail(4, format!("unsupported version {v}"));
        }
        let count = r.u32("entry count")?;
        let mut out = Vec::new();
        for i in 0..count {
            let len = r.u32(&format!("name length of entry {i}"))? as usize;
            let at = r.pos();
            let name = std::str::from_utf8(r.take(len, "entry name")?).map_err(|_| DecodeError { offset: at, msg: format!("entry {i}: name is not UTF-8") })?;
            let name = name.to_string();
            out.push((name, Array::decode_from(&mut r)?));
        }
        r.expect_end()?;
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let entries = Self::decode_entries(bytes).map_err(|e| e.at(Path::new("<checkpoint>")))?;
        Self::from_entries(entries)
    }

    fn from_entries(entries: Vec<(String, Array)>) -> Result<Self> {
        let mut map: BTreeMap<String, Array> = BTreeMap::new();
        for (n, a) in entries {
            if map.insert(n.clone(), a).is_some() {
                return Err(Error::Data(format!("checkpoint entry `{n}` appears twice")));
            }
        }
        let mut take = |n: &str| map.remove(n).ok_or_else(|| Error::Data(format!("checkpoint lacks `{n}`")));
        let config = parse_network(&take("meta/config")?.to_text()?)?;
        let mut kv = Kv::parse(&take("meta/state")?.to_text()?)?;
        let state = TrainState {
            epoch: kv.parsed_or("epoch", 0)?,
            seed: kv.parsed_or("seed", 0)?,
            best: match (kv.parsed::<usize>("best_epoch")?, kv.parsed::<f64>("best_dice")?) {
                (Some(e), Some(d)) => Some((e, d)),
                (None, None) => None,
                _ => return Err(Error::Data("checkpoint state has only half of best_epoch/best_dice".into())),
            },
        };
        let optim = match kv.parsed::<f64>("optim.lr")? {
            Some(lr) => {
                let mut o = Sgd::new(lr, kv.parsed_or("optim.momentum", 0.0)?, kv.parsed_or("optim.weight_decay", 0.0)?)?;
                o.step = kv.parsed_or("optim.step", 0)?;
                Some(o)
            }
            None => None,
        };
        kv.finish()?;

        let mut model = Model::build(&config, state.seed)?;
        let names: Vec<String> = model.params.names().cloned().collect();
        for n in &names {
            let t = take(&format!("param/{n}"))?.to_tensor()?;
            let want = model.params.get(n)?.shape().to_vec();
            if t.shape() != want {
                return Err(Error::Data(format!("parameter `{n}` has shape {:?}, model expects {want:?}", t.shape())));
            }
            model.params.set(n, t)?;
        }
        let bufs: Vec<String> = model.buffers.keys().cloned().collect();
        for n in &bufs {
            let c = model.buffers[n].mean.len();
            let mean = take(&format!("buffer/{n}/mean"))?.to_tensor()?.into_data();
            let var = take(&format!("buffer/{n}/var"))?.to_tensor()?.into_data();
            if mean.len() != c || var.len() != c {
                return Err(Error::Data(format!("buffer `{n}` has {} / {} entries, model expects {c}", mean.len(), var.len())));
            }
            model.buffers.insert(n.clone(), BnStats { mean, var });
        }
        let optimizer = match optim {
            Some(mut o) => {
                let vel: Vec<String> = map.keys().filter(|k| k.starts_with("optim/velocity/")).cloned().collect();
                for k in vel {
                    let name = k["optim/velocity/".len()..].to_string();
                    let t = map.remove(&k).unwrap().to_tensor()?;
                    match model.params.get(&name) {
                        Ok(p) if p.shape() == t.shape() => {}
                        _ => return Err(Error::Data(format!("velocity `{name}` does not match any parameter"))),
                    }
                    o.velocity.insert(name, t);
                }
                Some(o)
            }
            None => None,
        };
        if let Some(k) = map.keys().next() {
            return Err(Error::Data(format!("unexpected checkpoint entry `{k}`")));
        }
        Ok(Self { model, optimizer, state })
    }

    /// Written to a temporary file first and renamed, so an interrupted save
    /// never clobbers the previous checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.encode()).map_err(Error::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(Error::io(path))?;
        let entries = Self::decode_entries(&bytes).map_err(|e| e.at(path))?;
        Self::from_entries(entries)
    }
}
