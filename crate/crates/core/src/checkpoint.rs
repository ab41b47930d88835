//! Binary checkpoint container.
//!
//! Layout (all integers little-endian, floats as IEEE-754 bit patterns):
//!
//! ```text
//! magic            4 bytes  "OSSL"
//! format version   u32
//! schema fingerprint u64
//! interval flag    u8       0 = fresh model, 1 = trained
//! interval id      u64      (meaningful when flag = 1)
//! sections                  tag (4 bytes) + payload length (u64) + payload
//! ```
//!
//! Sections appear in a fixed order: `AEPR` (auto-encoder parameters),
//! `AEOP` (its optimizer), `CVRM` (CVR model), `CVRO` (its two
//! optimizers), and optionally `RFFT` (the random Fourier transform).
//! Serialization is deterministic, so save → load → save is
//! byte-identical; velocity buffers are included so resumed training is
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::autoencoder::{AeDims, Autoencoder};
use crate::cvr::{CodeMode, CvrModel};
use crate::error::{Error, Result};
use crate::nn::{ActivationKind, DenseLayer, Matrix, Mlp, OptimizerState};
use crate::rff::RffTransform;
use crate::schema::Schema;

pub const MAGIC: &[u8; 4] = b"OSSL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub format_version: u32,
    pub schema_fingerprint: u64,
    pub interval_id: Option<u64>,
    pub autoencoder: Autoencoder,
    pub ae_opt: OptimizerState,
    pub cvr: CvrModel,
    pub cvr_latent_opt: OptimizerState,
    pub cvr_code_opt: OptimizerState,
    pub rff: Option<RffTransform>,
}

// ---------------------------------------------------------------------------
// primitive writers/readers

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_bits().to_le_bytes());
    }

    fn f64_slice(&mut self, vs: &[f64]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.f64(v);
        }
    }

    fn usize_slice(&mut self, vs: &[usize]) {
        self.u64(vs.len() as u64);
        for &v in vs {
            self.u64(v as u64);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.u64(m.rows() as u64);
        self.u64(m.cols() as u64);
        for &v in m.data() {
            self.f64(v);
        }
    }

    fn mlp(&mut self, mlp: &Mlp) {
        self.u64(mlp.layers.len() as u64);
        for (layer, act) in mlp.layers.iter().zip(&mlp.activations) {
            self.matrix(&layer.weights);
            self.f64_slice(&layer.biases);
            match act {
                ActivationKind::Relu => self.u8(0),
                ActivationKind::Tanh => self.u8(1),
                ActivationKind::Identity => self.u8(2),
                ActivationKind::LogSoftmaxBlocks(blocks) => {
                    self.u8(3);
                    self.usize_slice(blocks);
                }
            }
        }
    }

    fn optimizer(&mut self, opt: &OptimizerState) {
        self.f64(opt.learning_rate);
        self.f64(opt.momentum);
        self.u64(opt.skipped_updates);
        self.u64(opt.velocities().len() as u64);
        for v in opt.velocities() {
            self.f64_slice(v);
        }
    }

    fn section(&mut self, tag: &[u8; 4], payload: Writer) {
        self.buf.extend_from_slice(tag);
        self.u64(payload.buf.len() as u64);
        self.buf.extend_from_slice(&payload.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated checkpoint: needed {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn f64_vec(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.f64()).collect()
    }

    fn usize_vec(&mut self) -> Result<Vec<usize>> {
        let n = self.u64()? as usize;
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }

    fn matrix(&mut self) -> Result<Matrix> {
        let rows = self.u64()? as usize;
        let cols = self.u64()? as usize;
        let data: Result<Vec<f64>> = (0..rows * cols).map(|_| self.f64()).collect();
        Ok(Matrix::from_vec(rows, cols, data?))
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n_layers = self.u64()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        let mut activations = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let weights = self.matrix()?;
            let biases = self.f64_vec()?;
            let act = match self.u8()? {
                0 => ActivationKind::Relu,
                1 => ActivationKind::Tanh,
                2 => ActivationKind::Identity,
                3 => ActivationKind::LogSoftmaxBlocks(self.usize_vec()?),
                tag => {
                    return Err(Error::Checkpoint(format!("unknown activation tag {tag}")));
                }
            };
            layers.push(DenseLayer { weights, biases });
            activations.push(act);
        }
        Ok(Mlp {
            layers,
            activations,
        })
    }

    fn optimizer(&mut self) -> Result<OptimizerState> {
        let lr = self.f64()?;
        let momentum = self.f64()?;
        let skipped = self.u64()?;
        let n = self.u64()? as usize;
        let velocity: Result<Vec<Vec<f64>>> = (0..n).map(|_| self.f64_vec()).collect();
        Ok(OptimizerState::from_parts(lr, momentum, skipped, velocity?))
    }

    fn section(&mut self, expected: &[u8; 4]) -> Result<Reader<'a>> {
        let tag = self.take(4)?;
        if tag != expected {
            return Err(Error::Checkpoint(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(tag)
            )));
        }
        let len = self.u64()? as usize;
        Ok(Reader::new(self.take(len)?))
    }

    fn at_end(&self) -> bool {
        self.pos == self.buf.len()
    }
}

// ---------------------------------------------------------------------------

fn code_mode_tag(mode: CodeMode) -> u8 {
    match mode {
        CodeMode::Off => 0,
        CodeMode::Linear => 1,
        CodeMode::Rff => 2,
    }
}

fn code_mode_from_tag(tag: u8) -> Result<CodeMode> {
    match tag {
        0 => Ok(CodeMode::Off),
        1 => Ok(CodeMode::Linear),
        2 => Ok(CodeMode::Rff),
        _ => Err(Error::Checkpoint(format!("unknown code mode tag {tag}"))),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(self.format_version);
        w.u64(self.schema_fingerprint);
        match self.interval_id {
            Some(t) => {
                w.u8(1);
                w.u64(t);
            }
            None => {
                w.u8(0);
                w.u64(0);
            }
        }

        let ae = &self.autoencoder;
        let mut s = Writer::new();
        s.u64(ae.dims().embed_dim as u64);
        s.u64(ae.dims().code_dim as u64);
        s.usize_slice(&ae.dims().encoder_hidden);
        s.usize_slice(&ae.dims().decoder_hidden);
        s.usize_slice(ae.cardinalities());
        s.u64(ae.embeddings.len() as u64);
        for t in &ae.embeddings {
            s.matrix(t);
        }
        s.mlp(&ae.encoder);
        s.mlp(&ae.decoder);
        w.section(b"AEPR", s);

        let mut s = Writer::new();
        s.optimizer(&self.ae_opt);
        w.section(b"AEOP", s);

        let mut s = Writer::new();
        s.u64(self.cvr.latent_dim() as u64);
        s.u8(code_mode_tag(self.cvr.code_mode()));
        s.u64(self.cvr.latents.len() as u64);
        for t in &self.cvr.latents {
            s.matrix(t);
        }
        s.f64_slice(&self.cvr.aux_weights);
        s.f64(self.cvr.bias);
        s.f64_slice(&self.cvr.code_weights);
        w.section(b"CVRM", s);

        let mut s = Writer::new();
        s.optimizer(&self.cvr_latent_opt);
        s.optimizer(&self.cvr_code_opt);
        w.section(b"CVRO", s);

        if let Some(rff) = &self.rff {
            let mut s = Writer::new();
            s.u64(rff.code_dim() as u64);
            s.u64(rff.feature_dim() as u64);
            s.f64(rff.sigma());
            s.u64(rff.seed());
            s.matrix(rff.projection());
            s.f64_slice(rff.phases());
            w.section(b"RFFT", s);
        }
        w.buf
    }

    pub fn from_bytes(bytes: &[u8], schema: &Schema) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let fingerprint = r.u64()?;
        if fingerprint != schema.fingerprint() {
            return Err(Error::Checkpoint(format!(
                "schema fingerprint mismatch: checkpoint {:#018x}, schema in use {:#018x}",
                fingerprint,
                schema.fingerprint()
            )));
        }
        let interval_id = match r.u8()? {
            0 => {
                r.u64()?;
                None
            }
            1 => Some(r.u64()?),
            flag => {
                return Err(Error::Checkpoint(format!("bad interval flag {flag}")));
            }
        };

        let mut s = r.section(b"AEPR")?;
        let dims = AeDims {
            embed_dim: s.u64()? as usize,
            code_dim: s.u64()? as usize,
            encoder_hidden: s.usize_vec()?,
            decoder_hidden: s.usize_vec()?,
        };
        let cardinalities = s.usize_vec()?;
        if cardinalities != schema.cardinalities() {
            return Err(Error::Checkpoint(
                "checkpoint cardinalities do not match the schema".into(),
            ));
        }
        let n_emb = s.u64()? as usize;
        let embeddings: Result<Vec<Matrix>> = (0..n_emb).map(|_| s.matrix()).collect();
        let encoder = s.mlp()?;
        let decoder = s.mlp()?;
        let autoencoder =
            Autoencoder::from_parts(schema, dims, embeddings?, encoder, decoder, interval_id)?;

        let mut s = r.section(b"AEOP")?;
        let ae_opt = s.optimizer()?;

        let mut s = r.section(b"CVRM")?;
        let latent_dim = s.u64()? as usize;
        let code_mode = code_mode_from_tag(s.u8()?)?;
        let n_latents = s.u64()? as usize;
        let latents: Result<Vec<Matrix>> = (0..n_latents).map(|_| s.matrix()).collect();
        let aux_weights = s.f64_vec()?;
        let bias = s.f64()?;
        let code_weights = s.f64_vec()?;
        let cvr = CvrModel::from_parts(
            schema,
            latent_dim,
            code_mode,
            latents?,
            aux_weights,
            bias,
            code_weights,
        );

        let mut s = r.section(b"CVRO")?;
        let cvr_latent_opt = s.optimizer()?;
        let cvr_code_opt = s.optimizer()?;

        let rff = if r.at_end() {
            None
        } else {
            let mut s = r.section(b"RFFT")?;
            let _code_dim = s.u64()? as usize;
            let _feature_dim = s.u64()? as usize;
            let sigma = s.f64()?;
            let seed = s.u64()?;
            let projection = s.matrix()?;
            let phases = s.f64_vec()?;
            Some(RffTransform::from_parts(projection, phases, sigma, seed))
        };

        Ok(Checkpoint {
            format_version: version,
            schema_fingerprint: fingerprint,
            interval_id,
            autoencoder,
            ae_opt,
            cvr,
            cvr_latent_opt,
            cvr_code_opt,
            rff,
        })
    }

    /// Atomic write: the file appears under its final name only complete.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>, schema: &Schema) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, schema)
    }

    /// Reads structural facts without a schema (no fingerprint check);
    /// used by checkpoint inspection.
    pub fn inspect(path: impl AsRef<Path>) -> Result<InspectInfo> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut r = Reader::new(&bytes);
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {magic:?}, expected {MAGIC:?}"
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let fingerprint = r.u64()?;
        let interval_id = match r.u8()? {
            1 => {
                let t = r.u64()?;
                Some(t)
            }
            _ => {
                r.u64()?;
                None
            }
        };

        let mut s = r.section(b"AEPR")?;
        let embed_dim = s.u64()? as usize;
        let code_dim = s.u64()? as usize;
        let encoder_hidden = s.usize_vec()?;
        let decoder_hidden = s.usize_vec()?;
        let cardinalities = s.usize_vec()?;
        let n_emb = s.u64()? as usize;
        let mut embedding_params = 0usize;
        for _ in 0..n_emb {
            let m = s.matrix()?;
            embedding_params += m.data().len();
        }
        let encoder = s.mlp()?;
        let decoder = s.mlp()?;

        let mut s = r.section(b"AEOP")?;
        s.optimizer()?;

        let mut s = r.section(b"CVRM")?;
        let latent_dim = s.u64()? as usize;
        let code_mode = code_mode_from_tag(s.u8()?)?;
        let n_latents = s.u64()? as usize;
        let mut cvr_params = 0usize;
        for _ in 0..n_latents {
            cvr_params += s.matrix()?.data().len();
        }
        cvr_params += s.f64_vec()?.len(); // aux
        s.f64()?; // bias
        cvr_params += 1;
        let code_weights = s.f64_vec()?.len();
        cvr_params += code_weights;

        let mut s = r.section(b"CVRO")?;
        s.optimizer()?;
        s.optimizer()?;

        let rff_dim = if r.at_end() {
            None
        } else {
            let mut s = r.section(b"RFFT")?;
            s.u64()?;
            let feature_dim = s.u64()? as usize;
            Some(feature_dim)
        };

        Ok(InspectInfo {
            format_version: version,
            schema_fingerprint: fingerprint,
            interval_id,
            embed_dim,
            code_dim,
            encoder_hidden,
            decoder_hidden,
            cardinalities,
            encoder_param_count: embedding_params + encoder.param_count(),
            decoder_param_count: decoder.param_count(),
            latent_dim,
            code_mode,
            cvr_param_count: cvr_params,
            code_weight_count: code_weights,
            rff_dim,
        })
    }
}

/// Structural summary of a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub struct InspectInfo {
    pub format_version: u32,
    pub schema_fingerprint: u64,
    pub interval_id: Option<u64>,
    pub embed_dim: usize,
    pub code_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub cardinalities: Vec<usize>,
    pub encoder_param_count: usize,
    pub decoder_param_count: usize,
    pub latent_dim: usize,
    pub code_mode: CodeMode,
    pub cvr_param_count: usize,
    pub code_weight_count: usize,
    pub rff_dim: Option<usize>,
}
