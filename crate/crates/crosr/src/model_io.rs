//! Model files.
//!
//! One binary container covers both artifact kinds. Layout, all integers
//! little-endian:
//!
//! ```text
//! magic "CRSR" | version u32 | kind u32 | config_len u64 | config TOML
//! | array_count u64 | arrays
//! ```
//!
//! Each array record is `name_len u64 | name | ndim u32 | dims u64 x ndim
//! | data f64 x prod(dims)`. The config block is the TOML of the structural
//! configuration; arrays carry every learned number. Nothing in the file is
//! position-dependent beyond this framing, and writing is deterministic, so
//! saving the same model twice produces identical bytes.
//!
//! A network file holds the parameter tensors under their build names. An
//! open-set file is self-contained: the same tensors under a `net.` prefix,
//! plus `profile.{c}.mean` and `profile.{c}.weibull` (shape, then scale)
//! per class.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dhrnet::{DhrNet, DhrNetConfig, FeatureMode};
use crate::error::{Error, Result};
use crate::evt::{TailFitConfig, WeibullParams};
use crate::openset::{ClassProfile, OpenSetModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"CRSR";
pub const VERSION: u32 = 1;

const NAME_CAP: usize = 1 << 16;
const NDIM_CAP: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Network,
    OpenSet,
}

impl FileKind {
    fn code(self) -> u32 {
        match self {
            FileKind::Network => 1,
            FileKind::OpenSet => 2,
        }
    }

    fn from_code(code: u32, offset: u64) -> Result<FileKind> {
        match code {
            1 => Ok(FileKind::Network),
            2 => Ok(FileKind::OpenSet),
            other => Err(Error::Format {
                offset,
                message: format!("unknown file kind {other}"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NamedArray {
    pub name: String,
    pub tensor: Tensor,
    /// Byte offset of this record in the file, for diagnostics.
    pub offset: u64,
}

#[derive(Debug, Clone)]
pub struct Container {
    pub kind: FileKind,
    pub config_text: String,
    pub arrays: Vec<NamedArray>,
}

/// Header of an open-set file; the network config nests under `net`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OpenSetHeader {
    mode: FeatureMode,
    threshold: f64,
    tail: TailFitConfig,
    net: DhrNetConfig,
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&container.kind.code().to_le_bytes());
    let config = container.config_text.as_bytes();
    buf.extend_from_slice(&(config.len() as u64).to_le_bytes());
    buf.extend_from_slice(config);
    buf.extend_from_slice(&(container.arrays.len() as u64).to_le_bytes());
    for a in &container.arrays {
        buf.extend_from_slice(&(a.name.len() as u64).to_le_bytes());
        buf.extend_from_slice(a.name.as_bytes());
        buf.extend_from_slice(&(a.tensor.shape().len() as u32).to_le_bytes());
        for &d in a.tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in a.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn fail<T>(&self, message: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.offset(),
            message: message.into(),
        })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return self.fail(format!(
                "unexpected end of file: {what} needs {n} bytes, {} remain",
                self.data.len() - self.pos
            ));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64(what)?;
        usize::try_from(v)
            .map_err(|_| Error::Format {
                offset: self.offset() - 8,
                message: format!("{what} {v} does not fit this platform"),
            })
    }
}

pub fn read_container(path: &Path) -> Result<Container> {
    let data = fs::read(path)?;
    let mut r = Reader { data: &data, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:02x?}, expected \"CRSR\""),
        });
    }
    let version_at = r.offset();
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}, this build reads {VERSION}"),
        });
    }
    let kind_at = r.offset();
    let kind = FileKind::from_code(r.u32("kind")?, kind_at)?;

    let config_len = r.usize("config length")?;
    let config_at = r.offset();
    let config_bytes = r.take(config_len, "config text")?;
    let config_text = std::str::from_utf8(config_bytes)
        .map_err(|e| Error::Format {
            offset: config_at + e.valid_up_to() as u64,
            message: "config text is not UTF-8".into(),
        })?
        .to_string();

    let array_count = r.usize("array count")?;
    let mut arrays = Vec::new();
    for i in 0..array_count {
        let record_at = r.offset();
        let name_len = r.usize("array name length")?;
        if name_len > NAME_CAP {
            return Err(Error::Format {
                offset: record_at,
                message: format!("array {i} name length {name_len} exceeds {NAME_CAP}"),
            });
        }
        let name_at = r.offset();
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|_| Error::Format {
                offset: name_at,
                message: format!("array {i} name is not UTF-8"),
            })?
            .to_string();
        let ndim_at = r.offset();
        let ndim = r.u32("array rank")?;
        if ndim > NDIM_CAP {
            return Err(Error::Format {
                offset: ndim_at,
                message: format!("array \"{name}\" rank {ndim} exceeds {NDIM_CAP}"),
            });
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        let mut elems: usize = 1;
        for _ in 0..ndim {
            let dim_at = r.offset();
            let d = r.usize("array dimension")?;
            elems = elems.checked_mul(d).ok_or(Error::Format {
                offset: dim_at,
                message: format!("array \"{name}\" element count overflows"),
            })?;
            shape.push(d);
        }
        let mut values = Vec::with_capacity(elems);
        let bytes = r.take(elems * 8, "array data")?;
        for c in bytes.chunks_exact(8) {
            values.push(f64::from_le_bytes(c.try_into().unwrap()));
        }
        arrays.push(NamedArray {
            name,
            tensor: Tensor::new(shape, values).expect("element count matches dims"),
            offset: record_at,
        });
    }
    if r.pos != data.len() {
        return r.fail(format!("{} trailing bytes after the last array", data.len() - r.pos));
    }
    Ok(Container { kind, config_text, arrays })
}

fn parse_config<T: for<'de> Deserialize<'de>>(text: &str, config_at: u64) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Format {
        offset: config_at,
        message: format!("config block does not parse: {e}"),
    })
}

/// Offset of the config text in any container: magic + version + kind +
/// length field.
const CONFIG_AT: u64 = 4 + 4 + 4 + 8;

fn emit_config<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string(value)
        .map_err(|e| Error::Config(format!("cannot serialize configuration: {e}")))
}

/// Rebuilds a network from a config plus named parameter arrays, requiring
/// an exact one-to-one match with the build's parameter set.
fn net_from_arrays(
    config: DhrNetConfig,
    arrays: &[NamedArray],
    strip: &str,
) -> Result<DhrNet> {
    let mut net = DhrNet::build(config, 0)?;
    let mut applied = 0usize;
    for a in arrays {
        let Some(name) = a.name.strip_prefix(strip) else { continue };
        net.set_param(name, a.tensor.clone()).map_err(|e| Error::Format {
            offset: a.offset,
            message: format!("array \"{}\": {e}", a.name),
        })?;
        applied += 1;
    }
    if applied != net.param_count() {
        let have: Vec<&str> = arrays
            .iter()
            .filter_map(|a| a.name.strip_prefix(strip))
            .collect();
        let missing: Vec<&str> = net
            .param_names()
            .into_iter()
            .filter(|n| !have.contains(n))
            .collect();
        return Err(Error::Format {
            offset: 0,
            message: format!(
                "{applied} of {} parameters present; missing {missing:?}",
                net.param_count()
            ),
        });
    }
    Ok(net)
}

pub fn save_network(path: &Path, net: &DhrNet) -> Result<()> {
    let arrays = net
        .param_names()
        .into_iter()
        .map(|n| NamedArray {
            name: n.to_string(),
            tensor: net.param(n).expect("listed name resolves").clone(),
            offset: 0,
        })
        .collect();
    write_container(
        path,
        &Container {
            kind: FileKind::Network,
            config_text: emit_config(net.config())?,
            arrays,
        },
    )
}

pub fn load_network(path: &Path) -> Result<DhrNet> {
    let c = read_container(path)?;
    if c.kind != FileKind::Network {
        return Err(Error::Format {
            offset: 8,
            message: "not a network file".into(),
        });
    }
    let config: DhrNetConfig = parse_config(&c.config_text, CONFIG_AT)?;
    net_from_arrays(config, &c.arrays, "")
}

pub fn save_open_set(path: &Path, model: &OpenSetModel) -> Result<()> {
    let header = OpenSetHeader {
        mode: model.mode,
        threshold: model.threshold,
        tail: model.tail,
        net: model.net.config().clone(),
    };
    let mut arrays: Vec<NamedArray> = model
        .net
        .param_names()
        .into_iter()
        .map(|n| NamedArray {
            name: format!("net.{n}"),
            tensor: model.net.param(n).expect("listed name resolves").clone(),
            offset: 0,
        })
        .collect();
    for p in &model.profiles {
        arrays.push(NamedArray {
            name: format!("profile.{}.mean", p.class),
            tensor: Tensor::from_vec(p.mean.clone()),
            offset: 0,
        });
        arrays.push(NamedArray {
            name: format!("profile.{}.weibull", p.class),
            tensor: Tensor::from_vec(vec![p.weibull.shape, p.weibull.scale]),
            offset: 0,
        });
    }
    write_container(
        path,
        &Container {
            kind: FileKind::OpenSet,
            config_text: emit_config(&header)?,
            arrays,
        },
    )
}

pub fn load_open_set(path: &Path) -> Result<OpenSetModel> {
    let c = read_container(path)?;
    if c.kind != FileKind::OpenSet {
        return Err(Error::Format {
            offset: 8,
            message: "not an open-set model file".into(),
        });
    }
    let header: OpenSetHeader = parse_config(&c.config_text, CONFIG_AT)?;
    let net = net_from_arrays(header.net, &c.arrays, "net.")?;

    let classes = net.config().classes;
    let find = |name: &str| -> Result<&NamedArray> {
        c.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Format {
                offset: 0,
                message: format!("array \"{name}\" is missing"),
            })
    };
    let mut profiles = Vec::with_capacity(classes);
    for class in 0..classes {
        let mean = find(&format!("profile.{class}.mean"))?;
        let weibull = find(&format!("profile.{class}.weibull"))?;
        if weibull.tensor.len() != 2 {
            return Err(Error::Format {
                offset: weibull.offset,
                message: format!(
                    "array \"{}\" holds {} values, expected shape and scale",
                    weibull.name,
                    weibull.tensor.len()
                ),
            });
        }
        profiles.push(ClassProfile {
            class,
            mean: mean.tensor.data().to_vec(),
            weibull: WeibullParams {
                shape: weibull.tensor.data()[0],
                scale: weibull.tensor.data()[1],
            },
        });
    }
    OpenSetModel::new(net, header.mode, profiles, header.tail, header.threshold).map_err(|e| {
        Error::Format {
            offset: 0,
            message: format!("model file is inconsistent: {e}"),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dhrnet::{StageConfig, Variant};
    use crate::evt::TailFitConfig;
    use tempfile::tempdir;

    fn toy_net() -> DhrNet {
        DhrNet::build(
            DhrNetConfig {
                variant: Variant::Dhrnet,
                input: [1, 8, 8],
                classes: 3,
                bottleneck: 4,
                hidden: 12,
                kernel: 3,
                stages: vec![
                    StageConfig { convs: 1, channels: 5, pool: true, lateral: true },
                    StageConfig { convs: 1, channels: 5, pool: true, lateral: false },
                ],
            },
            21,
        )
        .unwrap()
    }

    fn toy_open_set() -> OpenSetModel {
        let net = toy_net();
        let dim = net.config().feature_dim(FeatureMode::Joint);
        let profiles = (0..3)
            .map(|c| ClassProfile {
                class: c,
                mean: (0..dim).map(|i| (c * dim + i) as f64 * 0.25 - 1.0).collect(),
                weibull: WeibullParams { shape: 1.5 + c as f64, scale: 0.75 },
            })
            .collect();
        OpenSetModel::new(net, FeatureMode::Joint, profiles, TailFitConfig::default(), 0.5).unwrap()
    }

    #[test]
    fn container_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.crsr");
        let container = Container {
            kind: FileKind::Network,
            config_text: "answer = 42\n".into(),
            arrays: vec![
                NamedArray {
                    name: "a".into(),
                    tensor: Tensor::new(vec![2, 2], vec![0.0, -0.0, 1.5e-300, f64::MAX]).unwrap(),
                    offset: 0,
                },
                NamedArray {
                    name: "empty-rank".into(),
                    tensor: Tensor::scalar(-3.25),
                    offset: 0,
                },
            ],
        };
        write_container(&path, &container).unwrap();
        let back = read_container(&path).unwrap();
        assert_eq!(back.kind, FileKind::Network);
        assert_eq!(back.config_text, container.config_text);
        assert_eq!(back.arrays.len(), 2);
        for (a, b) in container.arrays.iter().zip(&back.arrays) {
            assert_eq!(a.name, b.name);
            assert!(a.tensor.bit_eq(&b.tensor));
        }

        let second = dir.path().join("c2.crsr");
        write_container(&second, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn network_round_trip_preserves_every_parameter() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.crsr");
        let net = toy_net();
        save_network(&path, &net).unwrap();
        let back = load_network(&path).unwrap();
        assert_eq!(back.config(), net.config());
        for name in net.param_names() {
            assert!(
                net.param(name).unwrap().bit_eq(back.param(name).unwrap()),
                "parameter {name} changed"
            );
        }
        // saving the loaded copy reproduces the file byte for byte
        let again = dir.path().join("net2.crsr");
        save_network(&again, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    }

    #[test]
    fn open_set_round_trip_scores_identically() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("os.crsr");
        let model = toy_open_set();
        save_open_set(&path, &model).unwrap();
        let back = load_open_set(&path).unwrap();
        assert_eq!(back.mode, model.mode);
        assert_eq!(back.threshold, model.threshold);
        assert_eq!(back.tail, model.tail);
        assert_eq!(back.profiles.len(), model.profiles.len());
        for (a, b) in model.profiles.iter().zip(&back.profiles) {
            assert_eq!(a.class, b.class);
            assert_eq!(a.weibull.shape.to_bits(), b.weibull.shape.to_bits());
            assert_eq!(a.weibull.scale.to_bits(), b.weibull.scale.to_bits());
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.mean), bits(&b.mean));
        }
        let image = Tensor::new(vec![1, 1, 8, 8], (0..64).map(|i| i as f64 / 64.0).collect()).unwrap();
        let p = model.predict_batch(&image).unwrap();
        let q = back.predict_batch(&image).unwrap();
        for (a, b) in p[0].probs.iter().zip(&q[0].probs) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_reported_at_offset_zero() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.crsr");
        fs::write(&path, b"NOPE rest of the file").unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_and_kind_are_checked_in_order() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("v.crsr");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CRSR");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, 4);
                assert!(message.contains("version 9"), "{message}");
            }
            other => panic!("{other:?}"),
        }

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CRSR");
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&7u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, 8);
                assert!(message.contains("kind 7"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_are_flagged() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.crsr");
        let net = toy_net();
        save_network(&path, &net).unwrap();
        let full = fs::read(&path).unwrap();

        let cut = full.len() - 11;
        fs::write(&path, &full[..cut]).unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert!(offset > 0 && offset <= cut as u64);
                assert!(message.contains("unexpected end"), "{message}");
            }
            other => panic!("{other:?}"),
        }

        let mut padded = full.clone();
        padded.extend_from_slice(&[0xAB; 3]);
        fs::write(&path, &padded).unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, full.len() as u64);
                assert!(message.contains("trailing"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn kind_mismatch_and_missing_arrays_are_format_errors() {
        let dir = tempdir().unwrap();
        let net_path = dir.path().join("net.crsr");
        save_network(&net_path, &toy_net()).unwrap();
        assert!(matches!(load_open_set(&net_path), Err(Error::Format { offset: 8, .. })));

        let os_path = dir.path().join("os.crsr");
        save_open_set(&os_path, &toy_open_set()).unwrap();
        assert!(matches!(load_network(&os_path), Err(Error::Format { offset: 8, .. })));

        // drop one parameter array and reload
        let mut c = read_container(&net_path).unwrap();
        c.arrays.remove(3);
        let broken = dir.path().join("broken.crsr");
        write_container(&broken, &c).unwrap();
        match load_network(&broken).unwrap_err() {
            Error::Format { message, .. } => assert!(message.contains("missing"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_parameter_shape_points_at_the_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("net.crsr");
        save_network(&path, &toy_net()).unwrap();
        let mut c = read_container(&path).unwrap();
        let victim = c
            .arrays
            .iter()
            .position(|a| a.name == "head.fc2.b")
            .unwrap();
        c.arrays[victim].tensor = Tensor::from_vec(vec![0.0; 7]);
        write_container(&path, &c).unwrap();
        match load_network(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert!(offset > 0);
                assert!(message.contains("head.fc2.b"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn profile_arrays_are_validated() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("os.crsr");
        save_open_set(&path, &toy_open_set()).unwrap();

        // weibull record of the wrong arity
        let mut c = read_container(&path).unwrap();
        let victim = c
            .arrays
            .iter()
            .position(|a| a.name == "profile.1.weibull")
            .unwrap();
        c.arrays[victim].tensor = Tensor::from_vec(vec![1.0, 2.0, 3.0]);
        write_container(&path, &c).unwrap();
        match load_open_set(&path).unwrap_err() {
            Error::Format { message, .. } => {
                assert!(message.contains("profile.1.weibull"), "{message}")
            }
            other => panic!("{other:?}"),
        }

        // negative shape parameter fails model validation
        save_open_set(&path, &toy_open_set()).unwrap();
        let mut c = read_container(&path).unwrap();
        let victim = c
            .arrays
            .iter()
            .position(|a| a.name == "profile.0.weibull")
            .unwrap();
        c.arrays[victim].tensor = Tensor::from_vec(vec![-1.0, 2.0]);
        write_container(&path, &c).unwrap();
        match load_open_set(&path).unwrap_err() {
            Error::Format { message, .. } => {
                assert!(message.contains("inconsistent"), "{message}")
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn config_text_must_be_utf8_and_parse() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("u.crsr");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CRSR");
        bytes.extend_from_slice(&VERSION.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&2u64.to_le_bytes());
        bytes.extend_from_slice(&[0xFF, 0xFE]);
        bytes.extend_from_slice(&0u64.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        match read_container(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, CONFIG_AT);
                assert!(message.contains("UTF-8"), "{message}");
            }
            other => panic!("{other:?}"),
        }

        // valid container, nonsense config for the declared kind
        let c = Container {
            kind: FileKind::Network,
            config_text: "not = 'a network config'\n".into(),
            arrays: vec![],
        };
        write_container(&path, &c).unwrap();
        match load_network(&path).unwrap_err() {
            Error::Format { offset, message } => {
                assert_eq!(offset, CONFIG_AT);
                assert!(message.contains("parse"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let dir = tempdir().unwrap();
        let err = read_container(&dir.path().join("absent.crsr")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
        assert_eq!(err.exit_code(), 2);
    }
}
