//! Versioned binary checkpoints.
//!
//! Layout: `RCK1`, `u32` format version, 32-byte SHA-256 of everything that
//! follows, `u32` header length, JSON header, `u32` tensor count, then per
//! tensor a `u16` name length, the UTF-8 name and an `RTN1` tensor record.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor_file;
use crate::calibration::CalibrationResult;
use crate::class_stats::ClassStats;
use crate::complexity::ComplexityBounds;
use crate::error::{Error, Result};
use crate::models::{AutoencoderArch, AutoencoderModel, ClassifierArch, ClassifierModel, Params};
use crate::scoring::{Detector, ScoringOptions, Variant};
use crate::tensor::{AnyTensor, Tensor};

pub const MAGIC: &[u8; 4] = b"RCK1";
pub const FORMAT_VERSION: u32 = 1;

const CLF: &str = "clf/";
const AE: &str = "ae/";
const STATS: &str = "stats/";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Classifier,
    Autoencoder,
    Detector,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Classifier => "classifier",
            CheckpointKind::Autoencoder => "autoencoder",
            CheckpointKind::Detector => "detector",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<Variant>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier: Option<ClassifierArch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub autoencoder: Option<AutoencoderArch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats_reg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ComplexityBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<CalibrationResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<ScoringOptions>,
    /// Snapshot of the run configuration that produced the checkpoint.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl Header {
    fn new(kind: CheckpointKind) -> Self {
        Header {
            kind,
            variant: None,
            classifier: None,
            autoencoder: None,
            stats_reg: None,
            bounds: None,
            calibration: None,
            options: None,
            config: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: Header,
    pub tensors: BTreeMap<String, AnyTensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn encode(header: &Header, tensors: &BTreeMap<String, AnyTensor>) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| bad(format!("cannot serialize header: {e}")))?;
    let mut body = Vec::new();
    body.extend_from_slice(&(json.len() as u32).to_le_bytes());
    body.extend_from_slice(&json);
    body.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let n = u16::try_from(name.len()).map_err(|_| bad(format!("tensor name too long: {name}")))?;
        body.extend_from_slice(&n.to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.extend_from_slice(&tensor_file::encode(t)?);
    }
    let mut out = Vec::with_capacity(40 + body.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&Sha256::digest(&body));
    out.extend_from_slice(&body);
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(bad("file is truncated"));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

fn take_u32(bytes: &mut &[u8]) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, 4)?.try_into().expect("4 bytes")))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut b = bytes;
    if take(&mut b, 4)? != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = take_u32(&mut b)?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "unsupported format version {version} (this build reads version {FORMAT_VERSION})"
        )));
    }
    let digest = take(&mut b, 32)?;
    if Sha256::digest(b).as_slice() != digest {
        return Err(bad("checksum mismatch; the file is corrupt"));
    }
    let header_len = take_u32(&mut b)? as usize;
    let header: Header =
        serde_json::from_slice(take(&mut b, header_len)?).map_err(|e| bad(format!("bad header: {e}")))?;
    let count = take_u32(&mut b)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = u16::from_le_bytes(take(&mut b, 2)?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(take(&mut b, n)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?
            .to_string();
        let t = tensor_file::decode_from(&mut b).map_err(|e| bad(format!("tensor {name}: {e}")))?;
        tensors.insert(name, t);
    }
    if !b.is_empty() {
        return Err(bad(format!("{} trailing bytes", b.len())));
    }
    Ok(Checkpoint { version, header, tensors })
}

/// Writes via a sibling temporary file so a crash never leaves a partial checkpoint.
pub fn write(path: &Path, header: &Header, tensors: &BTreeMap<String, AnyTensor>) -> Result<()> {
    let bytes = encode(header, tensors)?;
    let tmp = path.with_extension("rck.tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| bad(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => bad(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn prefixed(prefix: &str, params: &Params, out: &mut BTreeMap<String, AnyTensor>) {
    for (k, v) in params {
        out.insert(format!("{prefix}{k}"), AnyTensor::F32(v.clone()));
    }
}

fn strip(prefix: &str, tensors: &BTreeMap<String, AnyTensor>) -> Result<Params> {
    tensors
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s, v)))
        .map(|(k, v)| {
            v.clone()
                .into_f32()
                .map(|t| (k.to_string(), t))
                .map_err(|e| bad(format!("{prefix}{k}: {e}")))
        })
        .collect()
}

fn expect_kind(ck: &Checkpoint, kinds: &[CheckpointKind]) -> Result<()> {
    if !kinds.contains(&ck.header.kind) {
        return Err(bad(format!(
            "expected a {} checkpoint, found {}",
            kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(" or "),
            ck.header.kind.as_str()
        )));
    }
    Ok(())
}

fn classifier_from(ck: &Checkpoint) -> Result<ClassifierModel> {
    let arch = ck.header.classifier.clone().ok_or_else(|| bad("missing classifier architecture"))?;
    ClassifierModel::from_params(arch, strip(CLF, &ck.tensors)?).map_err(|e| bad(format!("classifier: {e}")))
}

fn autoencoder_from(ck: &Checkpoint) -> Result<AutoencoderModel> {
    let arch = ck.header.autoencoder.clone().ok_or_else(|| bad("missing autoencoder architecture"))?;
    AutoencoderModel::from_params(arch, strip(AE, &ck.tensors)?).map_err(|e| bad(format!("autoencoder: {e}")))
}

pub fn save_classifier(path: &Path, model: &ClassifierModel, config: Option<serde_json::Value>) -> Result<()> {
    let mut h = Header::new(CheckpointKind::Classifier);
    h.classifier = Some(model.arch().clone());
    h.config = config;
    let mut t = BTreeMap::new();
    prefixed(CLF, model.params(), &mut t);
    write(path, &h, &t)
}

/// Loads the classifier from a classifier or detector checkpoint.
pub fn load_classifier(path: &Path) -> Result<ClassifierModel> {
    let ck = read(path)?;
    expect_kind(&ck, &[CheckpointKind::Classifier, CheckpointKind::Detector])?;
    classifier_from(&ck)
}

pub fn save_autoencoder(path: &Path, model: &AutoencoderModel, config: Option<serde_json::Value>) -> Result<()> {
    let mut h = Header::new(CheckpointKind::Autoencoder);
    h.autoencoder = Some(model.arch().clone());
    h.config = config;
    let mut t = BTreeMap::new();
    prefixed(AE, model.params(), &mut t);
    write(path, &h, &t)
}

/// Loads the autoencoder from an autoencoder or detector checkpoint.
pub fn load_autoencoder(path: &Path) -> Result<AutoencoderModel> {
    let ck = read(path)?;
    expect_kind(&ck, &[CheckpointKind::Autoencoder, CheckpointKind::Detector])?;
    autoencoder_from(&ck)
}

pub fn save_detector(path: &Path, det: &Detector, config: Option<serde_json::Value>) -> Result<()> {
    let mut h = Header::new(CheckpointKind::Detector);
    h.variant = Some(det.variant());
    h.classifier = Some(det.classifier().arch().clone());
    h.autoencoder = Some(det.autoencoder().arch().clone());
    h.bounds = det.bounds().cloned();
    h.calibration = det.calibration().cloned();
    h.options = Some(det.options().clone());
    h.config = config;
    let mut t = BTreeMap::new();
    prefixed(CLF, det.classifier().params(), &mut t);
    prefixed(AE, det.autoencoder().params(), &mut t);
    if let Some(s) = det.stats() {
        h.stats_reg = Some(s.reg);
        t.insert(format!("{STATS}means"), s.means.clone().into());
        t.insert(format!("{STATS}covariance"), s.covariance.clone().into());
        t.insert(format!("{STATS}precision"), s.precision.clone().into());
    }
    write(path, &h, &t)
}

pub fn detector_from(ck: &Checkpoint) -> Result<Detector> {
    expect_kind(ck, &[CheckpointKind::Detector])?;
    let variant = ck.header.variant.ok_or_else(|| bad("missing variant"))?;
    let options = ck.header.options.clone().unwrap_or_default();
    let mut det = Detector::new(variant, classifier_from(ck)?, autoencoder_from(ck)?, options)
        .map_err(|e| bad(e.to_string()))?;
    if let Some(reg) = ck.header.stats_reg {
        let get = |name: &str| -> Result<Tensor<f64>> {
            ck.tensors
                .get(&format!("{STATS}{name}"))
                .ok_or_else(|| bad(format!("missing {STATS}{name}")))?
                .clone()
                .into_f64()
                .map_err(|e| bad(e.to_string()))
        };
        let stats = ClassStats::from_parts(get("means")?, get("covariance")?, get("precision")?, reg)
            .map_err(|e| bad(format!("class statistics: {e}")))?;
        det.set_stats(Some(stats));
    }
    det.set_bounds(ck.header.bounds.clone());
    det.set_calibration(ck.header.calibration.clone());
    Ok(det)
}

pub fn load_detector(path: &Path) -> Result<Detector> {
    detector_from(&read(path)?)
}

/// Summary printed by `inspect-ckpt`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckpointInfo {
    pub version: u32,
    pub kind: CheckpointKind,
    pub variant: Option<Variant>,
    pub parameter_count: usize,
    pub has_stats: bool,
    pub bounds: Option<(f64, f64)>,
    pub epsilon: Option<f64>,
    pub tau: Option<f64>,
}

pub fn inspect(path: &Path) -> Result<CheckpointInfo> {
    let ck = read(path)?;
    let parameter_count = ck
        .tensors
        .iter()
        .filter(|(k, _)| (k.starts_with(CLF) || k.starts_with(AE)) && !k.contains("running_"))
        .map(|(_, t)| t.shape().iter().product::<usize>())
        .sum();
    Ok(CheckpointInfo {
        version: ck.version,
        kind: ck.header.kind,
        variant: ck.header.variant,
        parameter_count,
        has_stats: ck.header.stats_reg.is_some(),
        bounds: ck.header.bounds.as_ref().map(|b| (b.lower, b.upper)),
        epsilon: ck.header.calibration.as_ref().map(|c| c.epsilon),
        tau: ck.header.calibration.as_ref().map(|c| c.tau),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Header, BTreeMap<String, AnyTensor>) {
        let mut h = Header::new(CheckpointKind::Classifier);
        h.config = Some(serde_json::json!({"seed": 3}));
        let mut t = BTreeMap::new();
        t.insert("a".to_string(), AnyTensor::F32(Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()));
        t.insert("b".to_string(), AnyTensor::F64(Tensor::new(vec![1], vec![0.1]).unwrap()));
        (h, t)
    }

    #[test]
    fn decodes_what_it_encodes() {
        let (h, t) = sample();
        let ck = decode(&encode(&h, &t).unwrap()).unwrap();
        assert_eq!(ck.version, FORMAT_VERSION);
        assert_eq!(ck.header, h);
        assert_eq!(ck.tensors, t);
    }

    #[test]
    fn detects_corruption_and_version() {
        let (h, t) = sample();
        let good = encode(&h, &t).unwrap();
        let mut flipped = good.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(decode(&flipped), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        let mut newer = good.clone();
        newer[4] = 2;
        assert!(matches!(decode(&newer), Err(Error::Checkpoint(m)) if m.contains("version 2")));
        assert!(decode(&good[..good.len() - 3]).is_err());
    }

    #[test]
    fn kind_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rck");
        let (h, t) = sample();
        write(&p, &h, &t).unwrap();
        assert!(matches!(load_autoencoder(&p), Err(Error::Checkpoint(m)) if m.contains("expected")));
        assert!(load_detector(&p).is_err());
    }
}
