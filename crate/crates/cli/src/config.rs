//! Flat `key = value` experiment configuration with three-layer precedence:
//! built-in defaults, then the config file, then command-line flags.

use std::path::PathBuf;

use fedsupernet::federation::{Partitioning, TargetSparsity};
use fedsupernet::micromodel::TrainingConfig;
use fedsupernet::sampling::Strategy;

/// Configuration error; the message always names the offending key.
pub type KeyError = String;

/// The effective configuration while layers are still being merged. The
/// four identity keys have no defaults and must come from the file or
/// flags; everything else starts at its built-in default.
#[derive(Debug, Clone)]
pub struct Effective {
    strategy: Option<String>,
    clients: Option<String>,
    rounds: Option<String>,
    seed: Option<String>,
    s_target: String,
    alpha_iid: String,
    dataset: String,
    edges: String,
    ops: String,
    channels: String,
    lr_w: String,
    lr_alpha: String,
    lambda: String,
    clip: String,
    epochs: String,
    batch: String,
    out_dir: String,
}

impl Default for Effective {
    fn default() -> Self {
        Effective {
            strategy: None,
            clients: None,
            rounds: None,
            seed: None,
            s_target: "0.5".into(),
            alpha_iid: "iid".into(),
            dataset: "spirals".into(),
            edges: "6".into(),
            ops: "4".into(),
            channels: "16".into(),
            lr_w: "0.001".into(),
            lr_alpha: "0.0003".into(),
            lambda: "1".into(),
            clip: "0.5".into(),
            epochs: "5".into(),
            batch: "32".into(),
            out_dir: "out".into(),
        }
    }
}

impl Effective {
    /// Set one key from a raw string. Unknown keys are rejected by name;
    /// value syntax is checked later, in [`Effective::resolve`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), KeyError> {
        let value = value.trim().to_string();
        match key {
            "strategy" => self.strategy = Some(value),
            "clients" => self.clients = Some(value),
            "rounds" => self.rounds = Some(value),
            "seed" => self.seed = Some(value),
            "s_target" => self.s_target = value,
            "alpha_iid" => self.alpha_iid = value,
            "dataset" => self.dataset = value,
            "edges" => self.edges = value,
            "ops" => self.ops = value,
            "channels" => self.channels = value,
            "lr_w" => self.lr_w = value,
            "lr_alpha" => self.lr_alpha = value,
            "lambda" => self.lambda = value,
            "clip" => self.clip = value,
            "epochs" => self.epochs = value,
            "batch" => self.batch = value,
            "out_dir" => self.out_dir = value,
            _ => return Err(format!("unknown key \"{key}\"")),
        }
        Ok(())
    }

    /// Merge a config file: one `key = value` per line, `#` lines and blank
    /// lines ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<(), KeyError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(format!("line {}: expected key = value, got \"{line}\"", i + 1));
            };
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Render the merged configuration back out as a config file. Running
    /// from the echoed file alone reproduces the same artifacts.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        let rows: [(&str, &str); 17] = [
            ("strategy", self.strategy.as_deref().unwrap_or("")),
            ("clients", self.clients.as_deref().unwrap_or("")),
            ("rounds", self.rounds.as_deref().unwrap_or("")),
            ("seed", self.seed.as_deref().unwrap_or("")),
            ("s_target", &self.s_target),
            ("alpha_iid", &self.alpha_iid),
            ("dataset", &self.dataset),
            ("edges", &self.edges),
            ("ops", &self.ops),
            ("channels", &self.channels),
            ("lr_w", &self.lr_w),
            ("lr_alpha", &self.lr_alpha),
            ("lambda", &self.lambda),
            ("clip", &self.clip),
            ("epochs", &self.epochs),
            ("batch", &self.batch),
            ("out_dir", &self.out_dir),
        ];
        for (k, v) in rows {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Check required keys, parse every value, and produce the typed
    /// configuration. Errors name the key they complain about.
    pub fn resolve(&self) -> Result<Resolved, KeyError> {
        let need = |v: &Option<String>, key: &str| {
            v.clone().ok_or_else(|| format!("missing required key \"{key}\""))
        };
        let strategy: Strategy = need(&self.strategy, "strategy")?
            .parse()
            .map_err(|e| format!("strategy: {e}"))?;
        let clients = parse_num::<usize>(&need(&self.clients, "clients")?, "clients")?;
        let rounds = parse_num::<u32>(&need(&self.rounds, "rounds")?, "rounds")?;
        let seed = parse_num::<u64>(&need(&self.seed, "seed")?, "seed")?;

        let s_target = parse_s_target(&self.s_target)?;
        let partitioning = parse_alpha_iid(&self.alpha_iid)?;
        let dataset = parse_dataset(&self.dataset)?;

        let training = TrainingConfig {
            lr_w: parse_num(&self.lr_w, "lr_w")?,
            lr_alpha: parse_num(&self.lr_alpha, "lr_alpha")?,
            lambda_val: parse_num(&self.lambda, "lambda")?,
            clip_threshold: parse_num(&self.clip, "clip")?,
            local_epochs: parse_num(&self.epochs, "epochs")?,
            batch_size: parse_num(&self.batch, "batch")?,
            ..TrainingConfig::default()
        };

        Ok(Resolved {
            strategy,
            clients,
            rounds,
            seed,
            s_target,
            partitioning,
            dataset,
            edges: parse_num(&self.edges, "edges")?,
            ops: parse_num(&self.ops, "ops")?,
            channels: parse_num(&self.channels, "channels")?,
            training,
            out_dir: PathBuf::from(&self.out_dir),
        })
    }
}

/// Fully typed configuration, ready to drive an experiment.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub strategy: Strategy,
    pub clients: usize,
    pub rounds: u32,
    pub seed: u64,
    pub s_target: TargetSparsity,
    pub partitioning: Partitioning,
    pub dataset: DatasetSpec,
    pub edges: usize,
    pub ops: usize,
    pub channels: usize,
    pub training: TrainingConfig,
    pub out_dir: PathBuf,
}

/// Where the experiment's data comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum DatasetSpec {
    Blobs,
    Spirals,
    Idx { images: PathBuf, labels: PathBuf },
    Csv(PathBuf),
}

fn parse_num<T: std::str::FromStr>(value: &str, key: &str) -> Result<T, KeyError>
where
    T::Err: std::fmt::Display,
{
    value.trim().parse::<T>().map_err(|e| format!("{key}: cannot parse \"{value}\": {e}"))
}

fn parse_s_target(value: &str) -> Result<TargetSparsity, KeyError> {
    match value.split_once(',') {
        None => Ok(TargetSparsity::Uniform(parse_num(value, "s_target")?)),
        Some((mu, sigma)) => Ok(TargetSparsity::Heterogeneous {
            mu: parse_num(mu, "s_target")?,
            sigma: parse_num(sigma, "s_target")?,
        }),
    }
}

fn parse_alpha_iid(value: &str) -> Result<Partitioning, KeyError> {
    if value.eq_ignore_ascii_case("iid") {
        return Ok(Partitioning::Iid);
    }
    Ok(Partitioning::Dirichlet(parse_num(value, "alpha_iid")?))
}

fn parse_dataset(value: &str) -> Result<DatasetSpec, KeyError> {
    if value == "blobs" {
        return Ok(DatasetSpec::Blobs);
    }
    if value == "spirals" {
        return Ok(DatasetSpec::Spirals);
    }
    if let Some(paths) = value.strip_prefix("idx:") {
        let Some((images, labels)) = paths.split_once(',') else {
            return Err("dataset: idx needs two paths, \"idx:<images>,<labels>\"".into());
        };
        return Ok(DatasetSpec::Idx {
            images: PathBuf::from(images.trim()),
            labels: PathBuf::from(labels.trim()),
        });
    }
    if let Some(path) = value.strip_prefix("csv:") {
        return Ok(DatasetSpec::Csv(PathBuf::from(path.trim())));
    }
    Err(format!(
        "dataset: expected blobs | spirals | idx:<images>,<labels> | csv:<path>, got \"{value}\""
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> Effective {
        let mut eff = Effective::default();
        eff.apply_file("strategy = diversified\nclients = 4\nrounds = 3\nseed = 7\n").unwrap();
        eff
    }

    #[test]
    fn defaults_fill_everything_but_identity_keys() {
        let eff = minimal();
        let r = eff.resolve().unwrap();
        assert_eq!(r.strategy, Strategy::Diversified);
        assert_eq!((r.clients, r.rounds, r.seed), (4, 3, 7));
        assert_eq!(r.s_target, TargetSparsity::Uniform(0.5));
        assert_eq!(r.partitioning, Partitioning::Iid);
        assert_eq!(r.dataset, DatasetSpec::Spirals);
        assert_eq!((r.edges, r.ops, r.channels), (6, 4, 16));
        assert_eq!(r.training.batch_size, 32);
        assert_eq!(r.out_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_and_missing_keys_are_named() {
        let mut eff = Effective::default();
        let err = eff.apply_file("foo = 1\n").unwrap_err();
        assert!(err.contains("foo"), "{err}");

        let err = Effective::default().resolve().unwrap_err();
        assert!(err.contains("strategy"), "{err}");

        let mut eff = minimal();
        eff.set("clients", "many").unwrap();
        let err = eff.resolve().unwrap_err();
        assert!(err.contains("clients"), "{err}");
    }

    #[test]
    fn later_layers_override_earlier_ones() {
        let mut eff = minimal();
        eff.apply_file("clients = 9\nbatch = 16\n").unwrap();
        eff.set("batch", "64").unwrap();
        let r = eff.resolve().unwrap();
        assert_eq!(r.clients, 9);
        assert_eq!(r.training.batch_size, 64);
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let mut eff = minimal();
        eff.apply_file("# comment\n\n  \nchannels = 8\n").unwrap();
        assert_eq!(eff.resolve().unwrap().channels, 8);
        assert!(eff.apply_file("channels 8\n").is_err());
    }

    #[test]
    fn compound_values_parse_both_ways() {
        let mut eff = minimal();
        eff.set("s_target", "0.4, 0.1").unwrap();
        eff.set("alpha_iid", "0.5").unwrap();
        eff.set("dataset", "idx: a.idx , b.idx").unwrap();
        let r = eff.resolve().unwrap();
        assert_eq!(r.s_target, TargetSparsity::Heterogeneous { mu: 0.4, sigma: 0.1 });
        assert_eq!(r.partitioning, Partitioning::Dirichlet(0.5));
        assert_eq!(
            r.dataset,
            DatasetSpec::Idx { images: PathBuf::from("a.idx"), labels: PathBuf::from("b.idx") }
        );

        eff.set("dataset", "qux").unwrap();
        assert!(eff.resolve().unwrap_err().contains("dataset"));
    }

    #[test]
    fn echo_round_trips_through_apply_file() {
        let mut eff = minimal();
        eff.set("s_target", "0.3,0.05").unwrap();
        eff.set("out_dir", "elsewhere").unwrap();
        let echoed = eff.echo();

        let mut again = Effective::default();
        again.apply_file(&echoed).unwrap();
        assert_eq!(again.echo(), echoed);
    }
}
