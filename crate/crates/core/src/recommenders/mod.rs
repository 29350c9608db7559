//! Preference-score predictors behind one [`Predictor`] contract, plus the
//! versioned model file format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod mf;
mod neighbor;

pub use mf::{sigmoid, softplus, MfParams, PoissonParams, INIT_SCALE};
pub use neighbor::{fit_neighbor, NeighborAxis, NeighborModel, DEFAULT_NEIGHBORS, MIN_CO_RATINGS};

const MODEL_MAGIC: &[u8; 4] = b"FRMD";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("index out of range: {what} {index} (size {size})")]
    IndexOutOfRange { what: &'static str, index: usize, size: usize },
    #[error("training split is empty")]
    EmptyTrain,
    #[error("unsupported model file: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encode(#[from] bincode::Error),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Anything that scores `(user, item)` pairs.
pub trait Predictor: Sync {
    fn n_users(&self) -> usize;
    fn n_items(&self) -> usize;
    /// Score for in-range indices; panics otherwise.
    fn score(&self, u: usize, i: usize) -> f64;
}

impl Predictor for MfParams {
    fn n_users(&self) -> usize {
        MfParams::n_users(self)
    }
    fn n_items(&self) -> usize {
        MfParams::n_items(self)
    }
    fn score(&self, u: usize, i: usize) -> f64 {
        MfParams::score(self, u, i)
    }
}

impl Predictor for PoissonParams {
    fn n_users(&self) -> usize {
        self.0.n_users()
    }
    fn n_items(&self) -> usize {
        self.0.n_items()
    }
    fn score(&self, u: usize, i: usize) -> f64 {
        PoissonParams::score(self, u, i)
    }
}

impl Predictor for NeighborModel {
    fn n_users(&self) -> usize {
        NeighborModel::n_users(self)
    }
    fn n_items(&self) -> usize {
        NeighborModel::n_items(self)
    }
    fn score(&self, u: usize, i: usize) -> f64 {
        NeighborModel::score(self, u, i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Mf,
    PoissonMf,
    ItemCf,
    UserCf,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mf => "mf",
            ModelKind::PoissonMf => "poisson_mf",
            ModelKind::ItemCf => "item_cf",
            ModelKind::UserCf => "user_cf",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "mf" => Ok(ModelKind::Mf),
            "poisson_mf" | "poissonmf" => Ok(ModelKind::PoissonMf),
            "item_cf" | "itemcf" => Ok(ModelKind::ItemCf),
            "user_cf" | "usercf" => Ok(ModelKind::UserCf),
            other => Err(format!("unknown model kind {other:?}")),
        }
    }
}

/// A fitted model of any kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Mf(MfParams),
    PoissonMf(PoissonParams),
    Neighbor(NeighborModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Mf(_) => ModelKind::Mf,
            Model::PoissonMf(_) => ModelKind::PoissonMf,
            Model::Neighbor(m) => match m.axis {
                NeighborAxis::Item => ModelKind::ItemCf,
                NeighborAxis::User => ModelKind::UserCf,
            },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Model::Mf(p) => p.dim(),
            Model::PoissonMf(p) => p.0.dim(),
            Model::Neighbor(_) => 0,
        }
    }

    pub fn predict(&self, u: usize, i: usize) -> Result<f64> {
        match self {
            Model::Mf(p) => p.predict(u, i),
            Model::PoissonMf(p) => p.predict(u, i),
            Model::Neighbor(m) => m.predict(u, i),
        }
    }
}

impl Predictor for Model {
    fn n_users(&self) -> usize {
        match self {
            Model::Mf(p) => p.n_users(),
            Model::PoissonMf(p) => p.0.n_users(),
            Model::Neighbor(m) => m.n_users(),
        }
    }
    fn n_items(&self) -> usize {
        match self {
            Model::Mf(p) => p.n_items(),
            Model::PoissonMf(p) => p.0.n_items(),
            Model::Neighbor(m) => m.n_items(),
        }
    }
    fn score(&self, u: usize, i: usize) -> f64 {
        match self {
            Model::Mf(p) => p.score(u, i),
            Model::PoissonMf(p) => p.score(u, i),
            Model::Neighbor(m) => m.score(u, i),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub d: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub seed: u64,
    /// Hex digest of the configuration that produced the model.
    pub config_hash: String,
}

impl ModelHeader {
    pub fn for_model(model: &Model, seed: u64, config_hash: impl Into<String>) -> Self {
        Self {
            kind: model.kind(),
            d: model.dim(),
            n_users: model.n_users(),
            n_items: model.n_items(),
            seed,
            config_hash: config_hash.into(),
        }
    }
}

pub fn write_model<W: Write>(mut w: W, header: &ModelHeader, model: &Model) -> Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    bincode::serialize_into(&mut w, header)?;
    bincode::serialize_into(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<(ModelHeader, Model)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(ModelError::BadFile("wrong magic".into()));
    }
    let mut version = [0u8; 4];
    r.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != MODEL_VERSION {
        return Err(ModelError::BadFile(format!("version {version}, expected {MODEL_VERSION}")));
    }
    let header: ModelHeader = bincode::deserialize_from(&mut r)?;
    let model: Model = bincode::deserialize_from(&mut r)?;
    if header.kind != model.kind() || header.n_users != model.n_users() || header.n_items != model.n_items() {
        return Err(ModelError::BadFile("header does not match model body".into()));
    }
    Ok((header, model))
}

pub fn save_model(path: &Path, header: &ModelHeader, model: &Model) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), header, model)
}

pub fn load_model(path: &Path) -> Result<(ModelHeader, Model)> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = Model::Mf(MfParams::init(4, 6, 3, 3.2, &mut rng));
        let header = ModelHeader::for_model(&model, 8, "abc");
        let mut bytes = Vec::new();
        write_model(&mut bytes, &header, &model).unwrap();
        let (h, m) = read_model(bytes.as_slice()).unwrap();
        assert_eq!(h, header);
        assert_eq!(m, model);
        let mut again = Vec::new();
        write_model(&mut again, &h, &m).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_foreign_bytes() {
        assert!(matches!(read_model(&b"NOPE\x01\0\0\0"[..]), Err(ModelError::BadFile(_))));
        let mut bytes = Vec::new();
        let model = Model::PoissonMf(PoissonParams(MfParams::zeros(1, 1, 1)));
        write_model(&mut bytes, &ModelHeader::for_model(&model, 0, ""), &model).unwrap();
        bytes[4] = 9;
        assert!(matches!(read_model(bytes.as_slice()), Err(ModelError::BadFile(_))));
    }

    #[test]
    fn kind_names_parse_back() {
        for kind in [ModelKind::Mf, ModelKind::PoissonMf, ModelKind::ItemCf, ModelKind::UserCf] {
            assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
        }
    }
}
