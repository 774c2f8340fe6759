//! Flat `key = value` configuration files, one entry per line, `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::PathBuf;
use std::str::FromStr;

use snet_core::data::{ClassSpec, ShapeFamily, SynthSpec};
use snet_core::metrics::Group;
use snet_core::model::{FusionMode, HeadKind, NetworkConfig};
use snet_core::optim::LrSchedule;

use crate::error::{Error, Result};

/// Parsed entries with their line numbers. Consumers remove the keys they
/// understand; [`Kv::finish`] rejects whatever is left.
#[derive(Clone, Debug, Default)]
pub struct Kv {
    entries: BTreeMap<String, Vec<(usize, String)>>,
}

impl Kv {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<(usize, String)>> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)));
            };
            let k = k.trim();
            if k.is_empty() {
                return Err(Error::Config(format!("line {}: empty key", i + 1)));
            }
            entries.entry(k.to_string()).or_default().push((i + 1, v.trim().to_string()));
        }
        Ok(Self { entries })
    }

    /// Remove a single-valued key.
    pub fn take(&mut self, key: &str) -> Result<Option<(usize, String)>> {
        match self.entries.remove(key) {
            None => Ok(None),
            Some(mut vs) if vs.len() == 1 => Ok(vs.pop()),
            Some(vs) => Err(Error::Config(format!("line {}: `{key}` repeated (first on line {})", vs[1].0, vs[0].0))),
        }
    }

    /// Remove every occurrence of a repeatable key.
    pub fn take_all(&mut self, key: &str) -> Vec<(usize, String)> {
        self.entries.remove(key).unwrap_or_default()
    }

    pub fn parsed<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.take(key)?
            .map(|(line, v)| v.parse().map_err(|_| Error::Config(format!("line {line}: cannot parse `{key} = {v}`"))))
            .transpose()
    }

    pub fn parsed_or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().next() {
            None => Ok(()),
            Some((k, vs)) => Err(Error::Config(format!("line {}: unknown key `{k}`", vs[0].0))),
        }
    }
}

fn bad(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line}: {msg}"))
}

/// `64` or `64x48`.
fn parse_size(line: usize, v: &str) -> Result<(usize, usize)> {
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| bad(line, format!("bad size `{v}`")));
    match v.split_once('x') {
        Some((h, w)) => Ok((num(h)?, num(w)?)),
        None => num(v).map(|s| (s, s)),
    }
}

/// `lo,hi`.
fn parse_range<T: FromStr>(line: usize, v: &str) -> Result<(T, T)> {
    let (a, b) = v.split_once(',').ok_or_else(|| bad(line, format!("expected `lo,hi`, got `{v}`")))?;
    let p = |s: &str| s.trim().parse::<T>().map_err(|_| bad(line, format!("bad range `{v}`")));
    Ok((p(a)?, p(b)?))
}

fn parse_bool(line: usize, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(bad(line, format!("expected a boolean, got `{v}`"))),
    }
}

fn take_bool(kv: &mut Kv, key: &str, default: bool) -> Result<bool> {
    kv.take(key)?.map_or(Ok(default), |(l, v)| parse_bool(l, &v))
}

/// Network keys: `input_size`, `in_channels`, `num_classes`, `base_width`,
/// `fusion_mode`, `enable_feb`, `enable_ffb`, `enable_gab`, `head`.
pub fn network_from_kv(kv: &mut Kv) -> Result<NetworkConfig> {
    let d = NetworkConfig::default();
    let input_size = kv.take("input_size")?.map_or(Ok(d.input_size), |(l, v)| parse_size(l, &v))?;
    let fusion_mode = match kv.take("fusion_mode")? {
        None => d.fusion_mode,
        Some((_, v)) if v == "stagger" => FusionMode::Stagger,
        Some((_, v)) if v == "unstagger" => FusionMode::Unstagger,
        Some((l, v)) => return Err(bad(l, format!("fusion_mode must be stagger or unstagger, got `{v}`"))),
    };
    let head = match kv.take("head")? {
        None => d.head,
        Some((_, v)) if v == "refine" => HeadKind::Refine,
        Some((_, v)) if v == "plain" => HeadKind::Plain,
        Some((l, v)) => return Err(bad(l, format!("head must be refine or plain, got `{v}`"))),
    };
    let cfg = NetworkConfig {
        input_size,
        in_channels: kv.parsed_or("in_channels", d.in_channels)?,
        num_classes: kv.parsed_or("num_classes", d.num_classes)?,
        base_width: kv.parsed_or("base_width", d.base_width)?,
        fusion_mode,
        enable_feb: take_bool(kv, "enable_feb", d.enable_feb)?,
        enable_ffb: take_bool(kv, "enable_ffb", d.enable_ffb)?,
        enable_gab: take_bool(kv, "enable_gab", d.enable_gab)?,
        head,
    };
    cfg.validate()?;
    Ok(cfg)
}

pub fn render_network(c: &NetworkConfig) -> String {
    let mode = match c.fusion_mode {
        FusionMode::Stagger => "stagger",
        FusionMode::Unstagger => "unstagger",
    };
    let head = match c.head {
        HeadKind::Refine => "refine",
        HeadKind::Plain => "plain",
    };
    format!(
        "input_size = {}x{}\nin_channels = {}\nnum_classes = {}\nbase_width = {}\nfusion_mode = {mode}\nenable_feb = {}\nenable_ffb = {}\nenable_gab = {}\nhead = {head}\n",
        c.input_size.0, c.input_size.1, c.in_channels, c.num_classes, c.base_width, c.enable_feb, c.enable_ffb, c.enable_gab
    )
}

pub fn parse_network(text: &str) -> Result<NetworkConfig> {
    let mut kv = Kv::parse(text)?;
    let c = network_from_kv(&mut kv)?;
    kv.finish()?;
    Ok(c)
}

fn family_name(f: ShapeFamily) -> (&'static str, String) {
    match f {
        ShapeFamily::Ellipse => ("ellipse", String::new()),
        ShapeFamily::Disc => ("disc", String::new()),
        ShapeFamily::Curve { half_width } => ("curve", format!(" half_width={half_width}")),
    }
}

/// `name family group area=lo,hi count=lo,hi intensity=lo,hi [half_width=w]`.
fn parse_class(line: usize, v: &str) -> Result<ClassSpec> {
    let mut words = v.split_whitespace();
    let (Some(name), Some(family), Some(group)) = (words.next(), words.next(), words.next()) else {
        return Err(bad(line, "class needs `name family group` followed by key=value fields"));
    };
    let group = Group::parse(group).map_err(|e| bad(line, e))?;
    let mut fields = Kv::parse(&words.collect::<Vec<_>>().join("\n")).map_err(|e| bad(line, e))?;
    let range = |fields: &mut Kv, key: &str| -> Result<Option<(f64, f64)>> { fields.take(key)?.map(|(_, v)| parse_range(line, &v)).transpose() };
    let area = range(&mut fields, "area")?.ok_or_else(|| bad(line, "class needs area=lo,hi"))?;
    let intensity = range(&mut fields, "intensity")?.ok_or_else(|| bad(line, "class needs intensity=lo,hi"))?;
    let count = match fields.take("count")? {
        Some((_, v)) => parse_range(line, &v)?,
        None => (1, 1),
    };
    let half_width: Option<f64> = fields.parsed("half_width").map_err(|e| bad(line, e))?;
    let family = match (family, half_width) {
        ("ellipse", None) => ShapeFamily::Ellipse,
        ("disc", None) => ShapeFamily::Disc,
        ("curve", hw) => ShapeFamily::Curve { half_width: hw.unwrap_or(1.0) },
        (f, Some(_)) if f == "ellipse" || f == "disc" => return Err(bad(line, "half_width only applies to curves")),
        (f, _) => return Err(bad(line, format!("unknown shape family `{f}`"))),
    };
    fields.finish().map_err(|e| bad(line, e))?;
    Ok(ClassSpec { name: name.to_string(), family, group, area, count, intensity })
}

/// Synthetic-data spec. Keys: `canvas`, `background`, `noise`, `seed`,
/// `max_retries` and repeated `class` lines; without any `class` line the
/// default classes are kept.
pub fn parse_synth_spec(text: &str) -> Result<SynthSpec> {
    let mut kv = Kv::parse(text)?;
    let d = SynthSpec::default();
    let canvas = kv.take("canvas")?.map_or(Ok(d.canvas), |(l, v)| parse_size(l, &v))?;
    let background = kv.take("background")?.map_or(Ok(d.background), |(l, v)| parse_range(l, &v))?;
    let classes = kv.take_all("class").into_iter().map(|(l, v)| parse_class(l, &v)).collect::<Result<Vec<_>>>()?;
    let spec = SynthSpec {
        canvas,
        classes: if classes.is_empty() { d.classes } else { classes },
        background,
        noise: kv.parsed_or("noise", d.noise)?,
        seed: kv.parsed_or("seed", d.seed)?,
        max_retries: kv.parsed_or("max_retries", d.max_retries)?,
    };
    kv.finish()?;
    spec.validate()?;
    Ok(spec)
}

pub fn render_synth_spec(s: &SynthSpec) -> String {
    let mut out = format!(
        "canvas = {}x{}\nbackground = {},{}\nnoise = {}\nseed = {}\nmax_retries = {}\n",
        s.canvas.0, s.canvas.1, s.background.0, s.background.1, s.noise, s.seed, s.max_retries
    );
    for c in &s.classes {
        let (family, extra) = family_name(c.family);
        let _ = writeln!(
            out,
            "class = {} {family} {} area={},{} count={},{} intensity={},{}{extra}",
            c.name,
            c.group.name(),
            c.area.0,
            c.area.1,
            c.count.0,
            c.count.1,
            c.intensity.0,
            c.intensity.1
        );
    }
    out
}

/// Everything a training run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialization, shuffling and augmentation.
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Evaluate on the held-out split every this many epochs; 0 disables.
    pub eval_every: usize,
    pub augment: bool,
    /// Weight of the auxiliary (deep-supervision) head; 0 ablates it.
    pub ds_weight: f64,
    pub hd_percentile: f64,
    /// Stop once a held-out evaluation reaches this mean foreground dice.
    pub early_stop_dice: Option<f64>,
    pub network: NetworkConfig,
    /// Whether `num_classes` / `in_channels` were given explicitly; otherwise
    /// they are taken from the dataset.
    pub explicit_classes: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: PathBuf::from("data"),
            epochs: 40,
            batch_size: 4,
            seed: 0,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            schedule: LrSchedule::Constant,
            eval_every: 1,
            augment: true,
            ds_weight: 1.0,
            hd_percentile: 95.0,
            early_stop_dice: None,
            network: NetworkConfig::default(),
            explicit_classes: false,
        }
    }
}

impl RunConfig {
    /// Training keys: `data`, `epochs`, `batch_size`, `seed`, `lr`, `momentum`,
    /// `weight_decay`, `schedule` (`constant` | `poly`), `poly_power`,
    /// `eval_every`, `augment`, `ds_weight`, `hd_percentile`,
    /// `early_stop_dice`, plus every
    /// network key.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Kv::parse(text)?;
        let d = RunConfig::default();
        let schedule = match kv.take("schedule")? {
            None => LrSchedule::Constant,
            Some((_, v)) if v == "constant" => LrSchedule::Constant,
            Some((_, v)) if v == "poly" => LrSchedule::Poly { power: 0.9 },
            Some((l, v)) => return Err(bad(l, format!("schedule must be constant or poly, got `{v}`"))),
        };
        let schedule = match (schedule, kv.parsed::<f64>("poly_power")?) {
            (LrSchedule::Poly { .. }, Some(p)) => LrSchedule::Poly { power: p },
            (LrSchedule::Constant, Some(_)) => return Err(Error::Config("poly_power needs `schedule = poly`".into())),
            (s, None) => s,
        };
        let explicit_classes = kv.entries.contains_key("num_classes") || kv.entries.contains_key("in_channels");
        let run = Self {
            data: kv.take("data")?.map_or(d.data, |(_, v)| PathBuf::from(v)),
            epochs: kv.parsed_or("epochs", d.epochs)?,
            batch_size: kv.parsed_or("batch_size", d.batch_size)?,
            seed: kv.parsed_or("seed", d.seed)?,
            lr: kv.parsed_or("lr", d.lr)?,
            momentum: kv.parsed_or("momentum", d.momentum)?,
            weight_decay: kv.parsed_or("weight_decay", d.weight_decay)?,
            schedule,
            eval_every: kv.parsed_or("eval_every", d.eval_every)?,
            augment: take_bool(&mut kv, "augment", d.augment)?,
            ds_weight: kv.parsed_or("ds_weight", d.ds_weight)?,
            hd_percentile: kv.parsed_or("hd_percentile", d.hd_percentile)?,
            early_stop_dice: kv.parsed("early_stop_dice")?,
            network: network_from_kv(&mut kv)?,
            explicit_classes,
        };
        kv.finish()?;
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 {
            return err("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return err("batch_size must be at least 1");
        }
        if !(self.ds_weight >= 0.0 && self.ds_weight.is_finite()) {
            return err("ds_weight must be a finite non-negative number");
        }
        snet_core::optim::Sgd::new(self.lr, self.momentum, self.weight_decay)?;
        self.network.validate()?;
        Ok(())
    }

    pub fn render(&self) -> String {
        let schedule = match self.schedule {
            LrSchedule::Constant => "schedule = constant\n".to_string(),
            LrSchedule::Poly { power } => format!("schedule = poly\npoly_power = {power}\n"),
        };
        let stop = self.early_stop_dice.map_or(String::new(), |d| format!("early_stop_dice = {d}\n"));
        format!(
            "data = {}\nepochs = {}\nbatch_size = {}\nseed = {}\nlr = {}\nmomentum = {}\nweight_decay = {}\n{schedule}eval_every = {}\naugment = {}\nds_weight = {}\nhd_percentile = {}\n{stop}{}",
            self.data.display(),
            self.epochs,
            self.batch_size,
            self.seed,
            self.lr,
            self.momentum,
            self.weight_decay,
            self.eval_every,
            self.augment,
            self.ds_weight,
            self.hd_percentile,
            render_network(&self.network)
        )
    }
}
