//! Persistence: 8-bit PNG images and artifact records (payload + JSON
//! metadata sidecar).
//!
//! Float values map to bytes as `round_half_even(v * 255)` and back as
//! `byte / 255`, so an image whose values are already multiples of `1/255`
//! survives a save/load cycle unchanged.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

pub fn encode_png(img: &ImageTensor) -> Result<Vec<u8>> {
    let (h, w) = img.dims();
    let raw: Vec<u8> = img.view().iter().map(|&v| quantize(v)).collect();
    let buf = image::RgbImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dims");
    let mut bytes = Vec::new();
    buf.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: PathBuf::from("<memory>"),
            source,
        })?;
    Ok(bytes)
}

pub fn save_png(img: &ImageTensor, path: &Path) -> Result<()> {
    let bytes = encode_png(img)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_png(path: &Path) -> Result<ImageTensor> {
    let dynimg = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = Array3::from_shape_vec(
        (h as usize, w as usize, 3),
        rgb.into_raw().into_iter().map(|b| b as f64 / 255.0).collect(),
    )
    .map_err(|e| Error::Shape(e.to_string()))?;
    ImageTensor::from_array(data)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a float buffer's little-endian bytes.
pub fn digest_f64<'a>(values: impl IntoIterator<Item = &'a f64>) -> String {
    let mut hasher = Sha256::new();
    for v in values {
        hasher.update(v.to_le_bytes());
    }
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArtifactKind {
    Patch,
    Frame,
    DetectorWeights,
    Result,
}

impl ArtifactKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArtifactKind::Patch => "patch",
            ArtifactKind::Frame => "frame",
            ArtifactKind::DetectorWeights => "detector-weights",
            ArtifactKind::Result => "result",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "patch" => ArtifactKind::Patch,
            "frame" => ArtifactKind::Frame,
            "detector-weights" => ArtifactKind::DetectorWeights,
            "result" => ArtifactKind::Result,
            other => return Err(Error::Metadata(format!("unknown artifact kind `{other}`"))),
        })
    }
}

/// A persisted payload plus its metadata. The sidecar lives at
/// `<payload>.json` and always carries `kind`, `seed`, `config_digest` and
/// `created_utc`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactRecord {
    pub kind: ArtifactKind,
    pub payload_path: PathBuf,
    pub metadata: BTreeMap<String, String>,
}

impl ArtifactRecord {
    pub fn new(kind: ArtifactKind, payload_path: impl Into<PathBuf>, seed: u64, config_digest: &str) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("seed".to_string(), seed.to_string());
        metadata.insert("config_digest".to_string(), config_digest.to_string());
        Self {
            kind,
            payload_path: payload_path.into(),
            metadata,
        }
    }

    pub fn with(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_string(), value.to_string());
        self
    }

    pub fn sidecar_path(payload: &Path) -> PathBuf {
        let mut name = payload.file_name().unwrap_or_default().to_os_string();
        name.push(".json");
        payload.with_file_name(name)
    }

    /// Writes the payload and the metadata sidecar. Returns the payload digest,
    /// which is also stored under `payload_sha256`.
    pub fn write(&mut self, payload: &[u8]) -> Result<String> {
        if let Some(dir) = self.payload_path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        fs::write(&self.payload_path, payload).map_err(|e| Error::io(&self.payload_path, e))?;
        let digest = sha256_hex(payload);
        self.metadata.insert("payload_sha256".into(), digest.clone());
        self.metadata
            .entry("created_utc".into())
            .or_insert_with(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true));

        let mut doc = serde_json::Map::new();
        doc.insert("kind".into(), self.kind.as_str().into());
        for (k, v) in &self.metadata {
            doc.insert(k.clone(), v.clone().into());
        }
        let sidecar = Self::sidecar_path(&self.payload_path);
        let text = serde_json::to_string_pretty(&serde_json::Value::Object(doc))?;
        fs::write(&sidecar, text).map_err(|e| Error::io(&sidecar, e))?;
        Ok(digest)
    }

    /// Loads the sidecar of `payload_path`, validating required keys.
    pub fn open(payload_path: &Path) -> Result<Self> {
        let sidecar = Self::sidecar_path(payload_path);
        let text = fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let obj = value
            .as_object()
            .ok_or_else(|| Error::Metadata("metadata must be a JSON object".into()))?;
        let mut metadata = BTreeMap::new();
        let mut kind = None;
        for (k, v) in obj {
            let s = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            if k == "kind" {
                kind = Some(ArtifactKind::parse(&s)?);
            } else {
                metadata.insert(k.clone(), s);
            }
        }
        let kind = kind.ok_or_else(|| Error::Metadata("missing key `kind`".into()))?;
        for key in ["seed", "config_digest", "created_utc"] {
            if !metadata.contains_key(key) {
                return Err(Error::Metadata(format!("missing key `{key}`")));
            }
        }
        Ok(Self {
            kind,
            payload_path: payload_path.to_path_buf(),
            metadata,
        })
    }

    pub fn read_payload(&self) -> Result<Vec<u8>> {
        fs::read(&self.payload_path).map_err(|e| Error::io(&self.payload_path, e))
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Metadata(format!("missing key `{key}`")))
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        self.get(key)?
            .parse()
            .map_err(|_| Error::Metadata(format!("unparsable value for `{key}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_to_even() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        // 0.5 * 255 = 127.5 -> 128 (even)
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(2.5 / 255.0), 2);
    }

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::from_fn(5, 7, |y, x, c| ((y * 31 + x * 7 + c * 50) % 256) as f64 / 255.0);
        let path = dir.path().join("a.png");
        save_png(&img, &path).unwrap();
        assert_eq!(load_png(&path).unwrap(), img);
    }

    #[test]
    fn record_round_trip_reproduces_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/weights.bin");
        let mut rec = ArtifactRecord::new(ArtifactKind::DetectorWeights, &path, 7, "abc").with("thickness", 20);
        let digest = rec.write(b"payload-bytes").unwrap();
        let back = ArtifactRecord::open(&path).unwrap();
        assert_eq!(back.kind, ArtifactKind::DetectorWeights);
        assert_eq!(back.get("seed").unwrap(), "7");
        assert_eq!(back.get_parsed::<u32>("thickness").unwrap(), 20);
        assert_eq!(back.read_payload().unwrap(), b"payload-bytes");
        assert_eq!(back.get("payload_sha256").unwrap(), digest);
    }

    #[test]
    fn missing_required_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.png");
        fs::write(&path, b"x").unwrap();
        fs::write(ArtifactRecord::sidecar_path(&path), r#"{"kind":"patch","seed":"1"}"#).unwrap();
        assert!(matches!(ArtifactRecord::open(&path), Err(Error::Metadata(_))));
    }
}
