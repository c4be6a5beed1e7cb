//! The `RV01` volume file and the dataset manifest.
//!
//! An `RV01` file is a `key: value` text header starting with the magic
//! line and terminated by an empty line, followed by little-endian `f32`
//! intensities (`channels` consecutive grids) and, when `has_labels` is set,
//! one `u8` label per voxel.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::location::{BprMap, Volume};

pub const RV01_MAGIC: &str = "RV01";

#[derive(Clone, Debug, PartialEq)]
pub struct Rv01Header {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub channels: usize,
    pub bpr: BprMap,
    pub has_labels: bool,
}

impl Rv01Header {
    fn voxels(&self) -> usize {
        self.shape.iter().product()
    }

    fn render(&self) -> String {
        let [d, h, w] = self.shape;
        let [sz, sy, sx] = self.spacing;
        format!(
            "{RV01_MAGIC}\nshape: {d} {h} {w}\nspacing: {sz} {sy} {sx}\ndtype: f32\nchannels: {}\nbpr_a: {}\nbpr_b: {}\nhas_labels: {}\n\n",
            self.channels, self.bpr.a, self.bpr.b, self.has_labels
        )
    }
}

fn parse_list<V: std::str::FromStr, const N: usize>(key: &str, value: &str) -> Result<[V; N]> {
    let parts: Vec<V> = value
        .split_whitespace()
        .map(|p| p.parse().map_err(|_| Error::format(format!("bad {key} entry {p:?}"))))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::format(format!("{key} needs {N} values")))
}

fn parse_header(bytes: &[u8]) -> Result<(Rv01Header, usize)> {
    let end = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::format("header is not terminated by an empty line"))?;
    let text = std::str::from_utf8(&bytes[..end]).map_err(|_| Error::format("header is not UTF-8"))?;
    let mut lines = text.lines();
    if lines.next() != Some(RV01_MAGIC) {
        return Err(Error::format(format!("missing {RV01_MAGIC} magic")));
    }
    let (mut shape, mut spacing, mut a, mut b, mut labels) = (None, None, None, None, None);
    let mut channels = 1;
    for line in lines {
        let (key, value) = line
            .split_once(':')
            .ok_or_else(|| Error::format(format!("malformed header line {line:?}")))?;
        let value = value.trim();
        let num = |v: &str| {
            v.parse::<f64>()
                .map_err(|_| Error::format(format!("bad {key} value {v:?}")))
        };
        match key.trim() {
            "shape" => shape = Some(parse_list::<usize, 3>("shape", value)?),
            "spacing" => spacing = Some(parse_list::<f64, 3>("spacing", value)?),
            "dtype" if value == "f32" => {}
            "dtype" => return Err(Error::format(format!("unsupported dtype {value:?}"))),
            "channels" => {
                channels = value
                    .parse()
                    .map_err(|_| Error::format(format!("bad channels value {value:?}")))?
            }
            "bpr_a" => a = Some(num(value)?),
            "bpr_b" => b = Some(num(value)?),
            "has_labels" => {
                labels = Some(match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(Error::format(format!("bad has_labels value {value:?}"))),
                })
            }
            other => return Err(Error::format(format!("unknown header key {other:?}"))),
        }
    }
    let missing = |k: &str| Error::format(format!("header lacks {k}"));
    let header = Rv01Header {
        shape: shape.ok_or_else(|| missing("shape"))?,
        spacing: spacing.ok_or_else(|| missing("spacing"))?,
        channels,
        bpr: BprMap::new(a.ok_or_else(|| missing("bpr_a"))?, b.ok_or_else(|| missing("bpr_b"))?),
        has_labels: labels.ok_or_else(|| missing("has_labels"))?,
    };
    Ok((header, end + 2))
}

fn encode(header: &Rv01Header, channels: &[&[f32]], labels: Option<&[u8]>) -> Vec<u8> {
    let mut out = header.render().into_bytes();
    for ch in channels {
        for v in *ch {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(l) = labels {
        out.extend_from_slice(l);
    }
    out
}

fn decode(bytes: &[u8]) -> Result<(Rv01Header, Vec<Vec<f32>>, Option<Vec<u8>>)> {
    let (header, offset) = parse_header(bytes)?;
    let n = header.voxels();
    let body = &bytes[offset..];
    let need = header.channels * n * 4 + if header.has_labels { n } else { 0 };
    if body.len() != need {
        return Err(Error::format(format!(
            "payload is {} bytes, header {:?} x {} channel(s) implies {need}",
            body.len(),
            header.shape,
            header.channels
        )));
    }
    let channels = (0..header.channels)
        .map(|c| {
            body[c * n * 4..(c + 1) * n * 4]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect()
        })
        .collect();
    let labels = header
        .has_labels
        .then(|| body[header.channels * n * 4..].to_vec());
    Ok((header, channels, labels))
}

pub fn encode_volume(volume: &Volume) -> Vec<u8> {
    let header = Rv01Header {
        shape: volume.shape,
        spacing: volume.spacing,
        channels: 1,
        bpr: volume.bpr,
        has_labels: volume.labels.is_some(),
    };
    encode(&header, &[&volume.intensities], volume.labels.as_deref())
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let (header, mut channels, labels) = decode(bytes)?;
    if header.channels != 1 {
        return Err(Error::format(format!(
            "expected a single-channel volume, found {} channels",
            header.channels
        )));
    }
    Volume::new(header.shape, header.spacing, channels.remove(0), labels, header.bpr)
}

pub fn write_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(volume))?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_volume(&bytes).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

/// Writes a label-free multi-channel grid (e.g. per-class atlas maps).
pub fn write_channels(
    path: impl AsRef<Path>,
    shape: [usize; 3],
    spacing: [f64; 3],
    channels: &[Vec<f32>],
) -> Result<()> {
    let n: usize = shape.iter().product();
    if channels.is_empty() || channels.iter().any(|c| c.len() != n) {
        return Err(Error::shape(format!("every channel must hold {n} voxels")));
    }
    let header = Rv01Header {
        shape,
        spacing,
        channels: channels.len(),
        bpr: BprMap::spanning(shape[0]),
        has_labels: false,
    };
    let refs: Vec<&[f32]> = channels.iter().map(Vec::as_slice).collect();
    fs::write(path, encode(&header, &refs, None))?;
    Ok(())
}

pub fn read_channels(path: impl AsRef<Path>) -> Result<(Rv01Header, Vec<Vec<f32>>)> {
    let bytes = fs::read(path)?;
    let (header, channels, _) = decode(&bytes)?;
    Ok((header, channels))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub split: Split,
}

/// Dataset listing; relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Whether all volumes share one field of view (required for atlas masking).
    #[serde(default)]
    pub common_fov: bool,
    #[serde(default)]
    pub volumes: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn paths(&self, split: Split) -> impl Iterator<Item = &Path> {
        self.volumes
            .iter()
            .filter(move |e| e.split == split)
            .map(|e| e.path.as_path())
    }
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::format(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut m: Manifest =
        toml::from_str(&text).map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    for e in &mut m.volumes {
        if e.path.is_relative() {
            e.path = base.join(&e.path);
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_volume() -> Volume {
        Volume::new(
            [2, 3, 2],
            [2.5, 0.75, 0.75],
            (0..12).map(|v| v as f32 * 0.1 - 0.3).collect(),
            Some((0..12).map(|v| (v % 4) as u8).collect()),
            BprMap::new(1.0 / 3.0, -7.25),
        )
        .unwrap()
    }

    #[test]
    fn round_trip() {
        let v = sample_volume();
        assert_eq!(decode_volume(&encode_volume(&v)).unwrap(), v);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.rv01");
        write_volume(&v, &p).unwrap();
        assert_eq!(read_volume(&p).unwrap(), v);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_volume(&sample_volume());
        let text = String::from_utf8_lossy(&bytes[..bytes.windows(2).position(|w| w == b"\n\n").unwrap()]);
        assert!(text.starts_with("RV01\nshape: 2 3 2\nspacing: 2.5 0.75 0.75\ndtype: f32\n"));
        assert!(text.contains("has_labels: true"));
    }

    #[test]
    fn truncated_file_rejected() {
        let bytes = encode_volume(&sample_volume());
        let err = decode_volume(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
        assert!(err.to_string().contains("payload"));
        assert!(decode_volume(&bytes[..10]).is_err());
    }

    #[test]
    fn wrong_magic_rejected() {
        let mut bytes = encode_volume(&sample_volume());
        bytes[3] = b'2';
        let err = decode_volume(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn channels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("atlas.rv01");
        let ch = vec![vec![0.0, 0.5, 1.0, 0.25], vec![1.0, 0.5, 0.0, 0.75]];
        write_channels(&p, [1, 2, 2], [1.0; 3], &ch).unwrap();
        let (h, back) = read_channels(&p).unwrap();
        assert_eq!(h.channels, 2);
        assert_eq!(back, ch);
        assert!(read_volume(&p).is_err());
    }

    #[test]
    fn manifest_round_trip_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = Manifest {
            common_fov: true,
            volumes: vec![
                ManifestEntry { path: "a.rv01".into(), split: Split::Train },
                ManifestEntry { path: "b.rv01".into(), split: Split::Val },
            ],
        };
        let p = dir.path().join("manifest.toml");
        write_manifest(&m, &p).unwrap();
        let back = read_manifest(&p).unwrap();
        assert!(back.common_fov);
        assert_eq!(back.paths(Split::Val).collect::<Vec<_>>(), vec![dir.path().join("b.rv01")]);
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(read_manifest(&p).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_volumes_round_trip_bitwise(
            shape in prop::array::uniform3(1usize..5),
            seed in any::<u64>(),
            a in -10.0f64..10.0,
            b in -100.0f64..100.0,
            labelled in any::<bool>(),
        ) {
            let n = shape.iter().product::<usize>();
            let mut s = seed;
            let mut next = || { s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407); s };
            let intens: Vec<f32> = (0..n).map(|_| f32::from_bits((next() >> 32) as u32 & 0x7f7f_ffff)).collect();
            let labels = labelled.then(|| (0..n).map(|_| (next() >> 56) as u8).collect());
            let v = Volume::new(shape, [0.5, 1.25, 3.0], intens, labels, BprMap::new(a, b)).unwrap();
            let back = decode_volume(&encode_volume(&v)).unwrap();
            prop_assert_eq!(back.intensities.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            v.intensities.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back.labels, v.labels);
            prop_assert_eq!(back.bpr, v.bpr);
            prop_assert_eq!(back.spacing, v.spacing);
        }
    }
}
