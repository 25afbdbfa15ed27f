//! Model kinds, the resolved configuration a model is trained from, and
//! checkpoint files.
//!
//! A checkpoint starts with text lines
//!
//! ```text
//! SESSREC-CKPT-v1
//! kind=<kind>
//! config=<json>
//!
//! ```
//!
//! followed by the body: named little-endian matrices for the neural models,
//! tab-separated triples for the count-based baselines.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{concat_sessions, fit_item_knn, fit_ppop, KnnModel, PopModel};
use crate::corpus::{Corpus, Vocab};
use crate::error::{Error, Result};
use crate::eval::{ConcatRnn, EvalConfig, Recommender};
use crate::hier::{train_hrnn_with, HrnnConfig, HrnnModel, UserGradMode, Variant};
use crate::loss::LossKind;
use crate::session::{train_session_rnn_with, EpochStats, SessionRnn, TrainConfig};
use crate::tensor::{read_u64, Matrix};

pub const CHECKPOINT_MAGIC: &str = "SESSREC-CKPT-v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "rnn")]
    Rnn,
    #[serde(rename = "rnn-concat")]
    RnnConcat,
    #[serde(rename = "hrnn-init")]
    HrnnInit,
    #[serde(rename = "hrnn-all")]
    HrnnAll,
    #[serde(rename = "ppop")]
    Ppop,
    #[serde(rename = "itemknn")]
    ItemKnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::Rnn,
        ModelKind::RnnConcat,
        ModelKind::HrnnInit,
        ModelKind::HrnnAll,
        ModelKind::Ppop,
        ModelKind::ItemKnn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Rnn => "rnn",
            ModelKind::RnnConcat => "rnn-concat",
            ModelKind::HrnnInit => "hrnn-init",
            ModelKind::HrnnAll => "hrnn-all",
            ModelKind::Ppop => "ppop",
            ModelKind::ItemKnn => "itemknn",
        }
    }

    pub fn is_neural(self) -> bool {
        !matches!(self, ModelKind::Ppop | ModelKind::ItemKnn)
    }

    pub fn variant(self) -> Option<Variant> {
        match self {
            ModelKind::HrnnInit => Some(Variant::Init),
            ModelKind::HrnnAll => Some(Variant::All),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ModelKind::ALL.iter().map(|k| k.as_str()).collect();
                Error::Config(format!("unknown model `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Everything needed to train a model and to re-evaluate its checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub n_items: usize,
    /// SHA-256 of the item ids, one per line, in index order.
    pub item_vocab_sha256: String,
    pub loss: LossKind,
    pub hidden_size: usize,
    /// `0` means `hidden_size`.
    pub user_hidden: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub dropout_user: f64,
    pub dropout_session: f64,
    pub dropout_init: f64,
    pub user_grad: UserGradMode,
    pub seed: u64,
    pub knn_neighbors: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        ModelConfig {
            kind: ModelKind::HrnnInit,
            n_items: 0,
            item_vocab_sha256: String::new(),
            loss: t.loss,
            hidden_size: t.hidden_size,
            user_hidden: 0,
            batch_size: t.batch_size,
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            dropout_user: 0.0,
            dropout_session: t.dropout_hidden,
            dropout_init: 0.0,
            user_grad: UserGradMode::Accumulate,
            seed: t.seed,
            knn_neighbors: 300,
        }
    }
}

impl ModelConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            batch_size: self.batch_size,
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            dropout_hidden: self.dropout_session,
            seed: self.seed,
            hidden_size: self.hidden_size,
        }
    }

    pub fn hrnn_config(&self) -> HrnnConfig {
        HrnnConfig {
            train: self.train_config(),
            variant: self.kind.variant().unwrap_or_default(),
            user_hidden: self.user_hidden,
            dropout_user: self.dropout_user,
            dropout_init: self.dropout_init,
            user_grad: self.user_grad,
        }
    }

    /// Evaluation settings implied by the model kind.
    pub fn adjust_eval(&self, eval: &EvalConfig) -> EvalConfig {
        EvalConfig {
            skip_first_prediction: eval.skip_first_prediction || self.kind == ModelKind::RnnConcat,
            ..eval.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            ModelKind::Rnn | ModelKind::RnnConcat => self.train_config().validate(),
            ModelKind::HrnnInit | ModelKind::HrnnAll => self.hrnn_config().validate(),
            ModelKind::ItemKnn if self.knn_neighbors == 0 => {
                Err(Error::Config("knn_neighbors must be at least 1".into()))
            }
            _ => Ok(()),
        }
    }
}

pub fn vocab_fingerprint(items: &Vocab) -> String {
    let mut h = Sha256::new();
    for id in items.ids() {
        h.update(id.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    /// Plain session RNN; also the concatenated-history baseline.
    Rnn(SessionRnn),
    Hrnn(HrnnModel),
    Pop(PopModel),
    Knn(KnnModel),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub model: Model,
}

/// Trains `cfg.kind` on `train`; `on_epoch` sees each finished epoch of the
/// neural models. The vocabulary fields of the stored config are filled
/// from `train`.
pub fn train_model(cfg: &ModelConfig, train: &Corpus, on_epoch: impl FnMut(&EpochStats)) -> Result<Checkpoint> {
    cfg.validate()?;
    let mut config = cfg.clone();
    config.n_items = train.n_items();
    config.item_vocab_sha256 = vocab_fingerprint(&train.items);
    let model = match cfg.kind {
        ModelKind::Rnn => Model::Rnn(train_session_rnn_with(train, &cfg.train_config(), on_epoch)?.0),
        ModelKind::RnnConcat => {
            let merged = concat_sessions(train);
            Model::Rnn(train_session_rnn_with(&merged, &cfg.train_config(), on_epoch)?.0)
        }
        ModelKind::HrnnInit | ModelKind::HrnnAll => {
            Model::Hrnn(train_hrnn_with(train, &cfg.hrnn_config(), on_epoch)?.0)
        }
        ModelKind::Ppop => Model::Pop(fit_ppop(train)),
        ModelKind::ItemKnn => Model::Knn(fit_item_knn(train, cfg.knn_neighbors)?),
    };
    Ok(Checkpoint { config, model })
}

impl Checkpoint {
    /// The model behind the evaluation interface, wrapped as its kind needs.
    pub fn recommender(&self) -> Box<dyn Recommender + '_> {
        match (&self.model, self.config.kind) {
            (Model::Rnn(m), ModelKind::RnnConcat) => Box::new(ConcatRnn(m)),
            (Model::Rnn(m), _) => Box::new(m),
            (Model::Hrnn(m), _) => Box::new(m),
            (Model::Pop(m), _) => Box::new(m),
            (Model::Knn(m), _) => Box::new(m),
        }
    }

    /// Fails unless `items` is the vocabulary the model was trained on.
    pub fn check_vocab(&self, items: &Vocab) -> Result<()> {
        let fp = vocab_fingerprint(items);
        if items.len() != self.config.n_items || fp != self.config.item_vocab_sha256 {
            return Err(Error::Config(format!(
                "item vocabulary mismatch: checkpoint has {} items ({}), corpus has {} ({})",
                self.config.n_items,
                &self.config.item_vocab_sha256[..self.config.item_vocab_sha256.len().min(12)],
                items.len(),
                &fp[..12]
            )));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let fmt_err = |e: std::io::Error| Error::Format(e.to_string());
        let json = serde_json::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        write!(w, "{CHECKPOINT_MAGIC}\nkind={}\nconfig={json}\n\n", self.config.kind).map_err(fmt_err)?;
        match &self.model {
            Model::Rnn(m) => write_tensors(w, &m.named()).map_err(fmt_err),
            Model::Hrnn(m) => write_tensors(w, &m.named()).map_err(fmt_err),
            Model::Pop(m) => m.write_triples(w).map_err(fmt_err),
            Model::Knn(m) => m.write_triples(w).map_err(fmt_err),
        }
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            r.read_line(&mut line).map_err(|e| Error::Format(e.to_string()))?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(r)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic line)".into()));
        }
        let kind: ModelKind = next_line(r)?
            .strip_prefix("kind=")
            .ok_or_else(|| Error::Format("missing kind line".into()))?
            .parse()?;
        let cfg_line = next_line(r)?;
        let json = cfg_line
            .strip_prefix("config=")
            .ok_or_else(|| Error::Format("missing config line".into()))?;
        let config: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::Format(format!("bad config: {e}")))?;
        if config.kind != kind {
            return Err(Error::Format("kind line disagrees with config".into()));
        }
        if !next_line(r)?.is_empty() {
            return Err(Error::Format("missing blank line after header".into()));
        }
        let n = config.n_items;
        let model = match kind {
            ModelKind::Rnn | ModelKind::RnnConcat => {
                let mut m = SessionRnn::zeros(n, config.hidden_size, config.loss);
                read_tensors(r, m.named_mut())?;
                Model::Rnn(m)
            }
            ModelKind::HrnnInit | ModelKind::HrnnAll => {
                let h = config.hrnn_config();
                let mut m = HrnnModel::zeros(n, config.hidden_size, h.user_dim(), h.variant, config.loss);
                read_tensors(r, m.named_mut())?;
                Model::Hrnn(m)
            }
            ModelKind::Ppop => Model::Pop(PopModel::read_triples(n, r)?),
            ModelKind::ItemKnn => Model::Knn(KnnModel::read_triples(n, config.knn_neighbors, r)?),
        };
        Ok(Checkpoint { config, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(&mut BufReader::new(f))
    }
}

fn write_tensors<W: Write>(w: &mut W, named: &[(String, &Matrix)]) -> std::io::Result<()> {
    w.write_all(&(named.len() as u64).to_le_bytes())?;
    for (name, m) in named {
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        m.write_le(w)?;
    }
    Ok(())
}

/// Reads tensors into `slots`, which must match the stored names, order and
/// shapes exactly.
fn read_tensors<R: Read>(r: &mut R, slots: Vec<(String, &mut Matrix)>) -> Result<()> {
    let fmt_err = |e: std::io::Error| Error::Format(e.to_string());
    let count = read_u64(r).map_err(fmt_err)? as usize;
    if count != slots.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, model expects {}",
            slots.len()
        )));
    }
    for (name, slot) in slots {
        let len = read_u64(r).map_err(fmt_err)? as usize;
        if len > 256 {
            return Err(Error::Format("tensor name too long".into()));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(fmt_err)?;
        if buf != name.as_bytes() {
            return Err(Error::Format(format!(
                "expected tensor `{name}`, found `{}`",
                String::from_utf8_lossy(&buf)
            )));
        }
        let m = Matrix::read_le(r).map_err(fmt_err)?;
        if m.shape() != slot.shape() {
            return Err(Error::Format(format!(
                "tensor `{name}` is {:?}, expected {:?}",
                m.shape(),
                slot.shape()
            )));
        }
        *slot = m;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{archetype_corpus, ArchetypeSpec};

    fn small() -> Corpus {
        archetype_corpus(&ArchetypeSpec {
            users: 12,
            items: 10,
            pools: 2,
            ..ArchetypeSpec::default()
        })
    }

    #[test]
    fn every_kind_round_trips() {
        let c = small();
        for kind in ModelKind::ALL {
            let cfg = ModelConfig {
                kind,
                hidden_size: 4,
                batch_size: 3,
                epochs: 1,
                dropout_session: 0.1,
                knn_neighbors: 4,
                ..ModelConfig::default()
            };
            let ck = train_model(&cfg, &c, |_| {}).unwrap();
            let mut buf = Vec::new();
            ck.write_to(&mut buf).unwrap();
            let back = Checkpoint::read_from(&mut &buf[..]).unwrap();
            assert_eq!(back, ck, "{kind}");
            let mut again = Vec::new();
            back.write_to(&mut again).unwrap();
            assert_eq!(again, buf);
            ck.check_vocab(&c.items).unwrap();
        }
    }

    #[test]
    fn rejects_wrong_vocab_and_corruption() {
        let c = small();
        let cfg = ModelConfig {
            kind: ModelKind::Rnn,
            hidden_size: 3,
            batch_size: 2,
            epochs: 1,
            ..ModelConfig::default()
        };
        let ck = train_model(&cfg, &c, |_| {}).unwrap();
        let other = Vocab::from_ids((0..10).map(|i| format!("x{i}"))).unwrap();
        assert!(ck.check_vocab(&other).is_err());

        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]).is_err());
        buf[0] = b'X';
        assert!(Checkpoint::read_from(&mut &buf[..]).is_err());
    }

    #[test]
    fn kind_names() {
        for k in ModelKind::ALL {
            assert_eq!(k.as_str().parse::<ModelKind>().unwrap(), k);
        }
        assert!("gru4rec".parse::<ModelKind>().is_err());
        let json = serde_json::to_string(&ModelKind::HrnnAll).unwrap();
        assert_eq!(json, "\"hrnn-all\"");
    }
}
