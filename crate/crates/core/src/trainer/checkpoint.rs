//! Versioned JSON checkpoints.
//!
//! Every float array is stored as standard base64 (with padding) of its
//! row-major values, each encoded as 8 little-endian IEEE-754 bytes. This
//! makes the round trip bit-exact and the file deterministic. Scalars such
//! as logged metrics are plain JSON numbers written in shortest round-trip
//! form.
//!
//! ```text
//! {
//!   "format": "mdknet-checkpoint",
//!   "version": 1,
//!   "config": { ...TrainConfig... },
//!   "model": { "channels", "latent", "num_domains", "variant" },
//!   "next_epoch": 12,
//!   "rng": { "scheme": "splitmix64-path", "seed": 0, "next_epoch": 12 },
//!   "params": [ { "name", "shape": [rows, cols], "data": "<b64>" }, ... ],
//!   "adam": { "step", "m": ["<b64>", ...], "v": [...] },
//!   "running": [ { "mu": "<b64>", "sigma": "<b64>" } | null, x3 ],
//!   "labels": [ { "image_id", "domain", "v0", "current_target",
//!                 "accumulator", "obs_count" }, ... ],
//!   "history": [ { ...MetricRow... }, ... ]
//! }
//! ```
//!
//! The random state is fully described by the seed and the next epoch:
//! every stream is re-derived from `(seed, tag, epoch)`.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::dvc::{LabelState, VirtualLabel};
use crate::error::{Error, Result};
use crate::isbn::RunningStats;
use crate::losses::Variant;
use crate::numerics::{Matrix, ParamSlot};

use super::adam::AdamState;
use super::config::TrainConfig;
use super::model::{Model, ModelConfig, ModelParams, NUM_SLOTS};
use super::run::MetricRow;
use super::train::TrainerState;

pub const FORMAT: &str = "mdknet-checkpoint";
pub const VERSION: u64 = 1;
pub const RNG_SCHEME: &str = "splitmix64-path";

pub fn encode_f64s(values: &[f64]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    STANDARD.encode(bytes)
}

pub fn decode_f64s(text: &str) -> Result<Vec<f64>> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| Error::CorruptCheckpoint(format!("bad base64 payload: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::CorruptCheckpoint(format!("payload of {} bytes is not a whole number of f64", bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    channels: usize,
    latent: usize,
    num_domains: usize,
    variant: Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngRecord {
    scheme: String,
    seed: u64,
    next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamRecord {
    name: String,
    shape: [usize; 2],
    data: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdamRecord {
    step: u64,
    m: Vec<String>,
    v: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsRecord {
    mu: String,
    sigma: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    image_id: u64,
    domain: usize,
    v0: String,
    current_target: String,
    accumulator: String,
    obs_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u64,
    config: TrainConfig,
    model: ModelHeader,
    next_epoch: usize,
    rng: RngRecord,
    params: Vec<ParamRecord>,
    adam: AdamRecord,
    running: Vec<Option<StatsRecord>>,
    labels: Vec<LabelRecord>,
    history: Vec<MetricRow>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format: Option<String>,
    version: Option<u64>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub state: TrainerState,
    pub history: Vec<MetricRow>,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let st = &self.state;
        let mc = st.model.config;
        let file = CheckpointFile {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            model: ModelHeader {
                channels: mc.channels,
                latent: mc.latent,
                num_domains: mc.num_domains,
                variant: mc.variant,
            },
            next_epoch: st.next_epoch,
            rng: RngRecord {
                scheme: RNG_SCHEME.into(),
                seed: self.config.seed,
                next_epoch: st.next_epoch,
            },
            params: st
                .model
                .params
                .slots
                .iter()
                .map(|s| ParamRecord {
                    name: s.name.clone(),
                    shape: [s.value.rows(), s.value.cols()],
                    data: encode_f64s(s.value.data()),
                })
                .collect(),
            adam: AdamRecord {
                step: st.adam.step,
                m: st.adam.m.iter().map(|v| encode_f64s(v)).collect(),
                v: st.adam.v.iter().map(|v| encode_f64s(v)).collect(),
            },
            running: st
                .model
                .running
                .iter()
                .map(|r| {
                    r.as_ref().map(|r| StatsRecord {
                        mu: encode_f64s(&r.mu),
                        sigma: encode_f64s(&r.sigma),
                    })
                })
                .collect(),
            labels: st
                .labels
                .iter()
                .map(|l| LabelRecord {
                    image_id: l.image_id,
                    domain: l.domain,
                    v0: encode_f64s(l.v0.values()),
                    current_target: encode_f64s(l.current_target.values()),
                    accumulator: encode_f64s(&l.accumulator),
                    obs_count: l.obs_count,
                })
                .collect(),
            history: self.history.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file).map_err(|e| Error::json("checkpoint", e))?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let probe: VersionProbe =
            serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(format!("not a JSON object: {e}")))?;
        if probe.format.as_deref() != Some(FORMAT) {
            return Err(Error::CorruptCheckpoint(format!("missing or wrong format tag (expected `{FORMAT}`)")));
        }
        match probe.version {
            Some(VERSION) => {}
            Some(found) => return Err(Error::CheckpointVersion { found, expected: VERSION }),
            None => return Err(Error::CorruptCheckpoint("missing version".into())),
        }
        let file: CheckpointFile =
            serde_json::from_str(text).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        file.into_checkpoint()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, self.to_json()?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn expect_len(what: &str, values: Vec<f64>, len: usize) -> Result<Vec<f64>> {
    if values.len() != len {
        return Err(Error::CorruptCheckpoint(format!("{what}: expected {len} values, found {}", values.len())));
    }
    Ok(values)
}

impl CheckpointFile {
    fn into_checkpoint(self) -> Result<Checkpoint> {
        if self.rng.scheme != RNG_SCHEME || self.rng.seed != self.config.seed || self.rng.next_epoch != self.next_epoch {
            return Err(Error::CorruptCheckpoint("rng record disagrees with config".into()));
        }
        self.config.validate()?;
        let h = &self.model;
        let config = ModelConfig {
            channels: h.channels,
            latent: h.latent,
            num_domains: h.num_domains,
            variant: h.variant,
        };
        if config.variant != self.config.variant || config.channels != self.config.channels || config.latent != self.config.latent {
            return Err(Error::CorruptCheckpoint("model header disagrees with config".into()));
        }
        // shapes are validated against a freshly built model of the same config
        let reference = Model::init(config, 0)?;
        if self.params.len() != NUM_SLOTS {
            return Err(Error::CorruptCheckpoint(format!("expected {NUM_SLOTS} parameters, found {}", self.params.len())));
        }
        let mut slots = Vec::with_capacity(NUM_SLOTS);
        for (rec, want) in self.params.iter().zip(&reference.params.slots) {
            let (r, c) = (want.value.rows(), want.value.cols());
            if rec.name != want.name || rec.shape != [r, c] {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter `{}` {:?} does not match expected `{}` [{r}, {c}]",
                    rec.name, rec.shape, want.name
                )));
            }
            let data = expect_len(&rec.name, decode_f64s(&rec.data)?, r * c)?;
            slots.push(ParamSlot::new(rec.name.clone(), Matrix::from_vec(r, c, data)?));
        }

        if self.adam.m.len() != NUM_SLOTS || self.adam.v.len() != NUM_SLOTS {
            return Err(Error::CorruptCheckpoint("optimizer moments do not cover every parameter".into()));
        }
        let decode_moments = |bufs: &[String]| -> Result<Vec<Vec<f64>>> {
            bufs.iter()
                .zip(&slots)
                .map(|(b, s)| expect_len(&s.name, decode_f64s(b)?, s.len()))
                .collect()
        };
        let adam = AdamState {
            step: self.adam.step,
            m: decode_moments(&self.adam.m)?,
            v: decode_moments(&self.adam.v)?,
        };

        if self.running.len() != 3 {
            return Err(Error::CorruptCheckpoint(format!("expected 3 running-stat sites, found {}", self.running.len())));
        }
        let mut running: [Option<RunningStats>; 3] = [None, None, None];
        for (dst, rec) in running.iter_mut().zip(self.running) {
            if let Some(rec) = rec {
                *dst = Some(RunningStats {
                    mu: decode_f64s(&rec.mu)?,
                    sigma: decode_f64s(&rec.sigma)?,
                });
            }
        }

        let v = crate::dvc::num_classes(config.num_domains);
        let labels = self
            .labels
            .into_iter()
            .map(|l| {
                if l.domain >= config.num_domains {
                    return Err(Error::CorruptCheckpoint(format!("label domain {} out of range", l.domain)));
                }
                Ok(LabelState {
                    image_id: l.image_id,
                    domain: l.domain,
                    v0: VirtualLabel(expect_len("v0", decode_f64s(&l.v0)?, v)?),
                    current_target: VirtualLabel(expect_len("current_target", decode_f64s(&l.current_target)?, v)?),
                    accumulator: expect_len("accumulator", decode_f64s(&l.accumulator)?, v)?,
                    obs_count: l.obs_count,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Checkpoint {
            config: self.config,
            state: TrainerState {
                model: Model {
                    config,
                    params: ModelParams { slots },
                    running,
                },
                adam,
                labels,
                next_epoch: self.next_epoch,
            },
            history: self.history,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn payload_round_trip_is_bitwise() {
        let vals = [0.0, -0.0, 1.0 / 3.0, f64::MIN_POSITIVE, 1e308, -2.5e-310];
        let back = decode_f64s(&encode_f64s(&vals)).unwrap();
        assert_eq!(
            vals.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            back.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(encode_f64s(&[1.0]), "AAAAAAAA8D8=");
    }

    #[test]
    fn bad_payloads_are_rejected() {
        assert!(matches!(decode_f64s("!!"), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(decode_f64s("AAAA"), Err(Error::CorruptCheckpoint(_))));
    }

    #[test]
    fn version_is_checked_before_the_body() {
        let text = r#"{"format": "mdknet-checkpoint", "version": 7, "garbage": true}"#;
        assert!(matches!(
            Checkpoint::from_json(text),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
        assert!(matches!(Checkpoint::from_json("[1,2]"), Err(Error::CorruptCheckpoint(_))));
        assert!(matches!(Checkpoint::from_json(r#"{"version": 1}"#), Err(Error::CorruptCheckpoint(_))));
    }
}
