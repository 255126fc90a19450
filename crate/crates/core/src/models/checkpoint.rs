//! `LICKPT1` files: magic, a length-prefixed JSON descriptor, then one
//! `LSI1` block per parameter tensor (`H = d0·d1·d2`, `W = d3`).

use std::io::{Cursor, Read};
use std::path::Path;

use intensim_tensor::{Array, Scalar};
use serde::{Deserialize, Serialize};

use super::{build_unet, ArchKind, Normalization, OutputHead, ParamSet, PatchGan, UNet};
use crate::error::{Error, Result};
use crate::formats::{read_u32, write_file, PackedPlanes};
use crate::projection::ModalityCombo;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"LICKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub kind: ArchKind,
    pub combo: String,
    pub channel_order: Vec<String>,
    pub in_channels: usize,
    pub base_width: usize,
    pub depth: usize,
    pub widths: Vec<usize>,
    pub head: OutputHead,
    pub disc_width: Option<usize>,
    pub norm_mean: Vec<f64>,
    pub norm_std: Vec<f64>,
    pub params: Vec<(String, [usize; 4])>,
}

/// A trained predictor with the input statistics it was fitted with.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub kind: ArchKind,
    pub combo: ModalityCombo,
    pub normalization: Normalization,
    pub generator: UNet<T>,
    pub discriminator: Option<PatchGan<T>>,
}

fn qualified<T: Scalar>(prefix: &str, set: &ParamSet<T>) -> Vec<(String, Array<T>)> {
    set.names()
        .iter()
        .zip(set.values())
        .map(|(n, v)| (format!("{prefix}.{n}"), v.clone()))
        .collect()
}

fn bad(reason: impl Into<String>) -> Error {
    Error::Checkpoint(reason.into())
}

impl<T: Scalar> Checkpoint<T> {
    pub fn descriptor(&self) -> Descriptor {
        Descriptor {
            kind: self.kind,
            combo: self.combo.to_string(),
            channel_order: self.combo.channels().iter().map(|c| c.name().to_string()).collect(),
            in_channels: self.generator.in_channels,
            base_width: self.generator.base_width,
            depth: self.generator.depth,
            widths: self.generator.widths(),
            head: self.generator.head,
            disc_width: self.discriminator.as_ref().map(|d| d.base_width),
            norm_mean: self.normalization.mean.clone(),
            norm_std: self.normalization.std.clone(),
            params: self.tensors().into_iter().map(|(n, v)| (n, v.shape())).collect(),
        }
    }

    fn tensors(&self) -> Vec<(String, Array<T>)> {
        let mut all = qualified("gen", &self.generator.params);
        if let Some(d) = &self.discriminator {
            all.extend(qualified("disc", &d.params));
        }
        all
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.descriptor())
            .map_err(|e| bad(format!("descriptor encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self.tensors();
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, v) in tensors {
            let [a, b, c, d] = v.shape();
            let data = v.data().iter().map(|x| x.as_f64() as f32).collect();
            let planes = PackedPlanes::new(a * b * c, d, vec![name], data)?;
            planes
                .write_to(&mut out)
                .map_err(|e| bad(format!("tensor encoding: {e}")))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    /// Decodes a checkpoint; with `expected` set, its combo must match.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModalityCombo>) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a LICKPT1 checkpoint"));
        }
        let len = read_u32(&mut r).map_err(bad)? as usize;
        let start = r.position() as usize;
        let json = bytes
            .get(start..start + len)
            .ok_or_else(|| bad("truncated descriptor"))?;
        r.set_position((start + len) as u64);
        let desc: Descriptor =
            serde_json::from_slice(json).map_err(|e| bad(format!("descriptor: {e}")))?;
        let combo: ModalityCombo = desc.combo.parse()?;
        if let Some(want) = expected {
            if *want != combo {
                return Err(Error::ModalityUnavailable(format!(
                    "checkpoint was trained on {combo}, requested {want}"
                )));
            }
        }
        let order: Vec<String> = combo.channels().iter().map(|c| c.name().to_string()).collect();
        if order != desc.channel_order || desc.in_channels != order.len() {
            return Err(bad("channel order does not match the combo"));
        }
        if desc.norm_mean.len() != desc.in_channels || desc.norm_std.len() != desc.in_channels {
            return Err(bad("normalization statistics have the wrong length"));
        }
        if desc.norm_std.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(bad("normalization std must be positive"));
        }
        let mut generator = build_unet::<T>(desc.in_channels, desc.base_width, desc.depth, desc.head, 0)?;
        if generator.widths() != desc.widths {
            return Err(bad("stage widths do not match the base width"));
        }
        let mut discriminator = match (desc.kind, desc.disc_width) {
            (ArchKind::Pix2Pix, Some(w)) => Some(PatchGan::<T>::new(desc.in_channels + 1, w, 0)?),
            (ArchKind::Pix2Pix, None) => return Err(bad("pix2pix checkpoint without discriminator")),
            (ArchKind::UNet, Some(_)) => return Err(bad("unet checkpoint with a discriminator")),
            (ArchKind::UNet, None) => None,
        };

        let count = read_u32(&mut r).map_err(bad)? as usize;
        if count != desc.params.len() {
            return Err(bad("tensor count disagrees with the descriptor"));
        }
        for (name, shape) in &desc.params {
            let block = PackedPlanes::read_from(&mut r).map_err(|e| bad(format!("{name}: {e}")))?;
            if block.names.len() != 1 || &block.names[0] != name {
                return Err(bad(format!("expected tensor {name}")));
            }
            if block.height != shape[0] * shape[1] * shape[2] || block.width != shape[3] {
                return Err(bad(format!("{name}: block extent disagrees with its shape")));
            }
            let (set, local) = if let Some(n) = name.strip_prefix("gen.") {
                (&mut generator.params, n)
            } else if let (Some(n), Some(d)) = (name.strip_prefix("disc."), discriminator.as_mut()) {
                (&mut d.params, n)
            } else {
                return Err(bad(format!("unexpected tensor {name}")));
            };
            let slot = set.get_mut(local).ok_or_else(|| bad(format!("unknown tensor {name}")))?;
            if slot.shape() != *shape {
                return Err(bad(format!("{name}: shape {shape:?}, model needs {:?}", slot.shape())));
            }
            for (dst, src) in slot.data_mut().iter_mut().zip(&block.data) {
                *dst = T::lit(*src as f64);
            }
        }
        let expected_total = generator.params.len() + discriminator.as_ref().map_or(0, |d| d.params.len());
        if expected_total != count {
            return Err(bad("checkpoint is missing tensors"));
        }
        if (r.position() as usize) != bytes.len() {
            return Err(bad("trailing bytes after the last tensor"));
        }
        Ok(Self {
            kind: desc.kind,
            combo,
            normalization: Normalization {
                mean: desc.norm_mean,
                std: desc.norm_std,
            },
            generator,
            discriminator,
        })
    }

    pub fn load(path: &Path, expected: Option<&ModalityCombo>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }

    /// Predicted intensity plane `N×1×H×W` for raw (unnormalized) stacks.
    pub fn predict(&self, stack: &Array<T>) -> Result<Array<T>> {
        let x = self.normalization.apply(stack)?;
        self.generator.predict(&x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(kind: ArchKind) -> Checkpoint<f32> {
        let combo: ModalityCombo = "D+L+I".parse().unwrap();
        let c = combo.channel_count();
        let head = if kind == ArchKind::UNet { OutputHead::Linear } else { OutputHead::Sigmoid };
        Checkpoint {
            kind,
            combo,
            normalization: Normalization {
                mean: (0..c).map(|i| i as f64 * 0.1).collect(),
                std: (0..c).map(|i| 1.0 + i as f64 / 3.0).collect(),
            },
            generator: build_unet(c, 4, 2, head, 7).unwrap(),
            discriminator: (kind == ArchKind::Pix2Pix).then(|| PatchGan::new(c + 1, 4, 8).unwrap()),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for kind in [ArchKind::UNet, ArchKind::Pix2Pix] {
            let ck = sample(kind);
            let bytes = ck.to_bytes().unwrap();
            assert_eq!(&bytes[..7], CHECKPOINT_MAGIC);
            let back = Checkpoint::<f32>::from_bytes(&bytes, Some(&ck.combo)).unwrap();
            assert_eq!(back, ck);
            assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }

    #[test]
    fn combo_mismatch_is_rejected() {
        let ck = sample(ArchKind::UNet);
        let bytes = ck.to_bytes().unwrap();
        let other: ModalityCombo = "D+L".parse().unwrap();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Some(&other)),
            Err(Error::ModalityUnavailable(_))
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = sample(ArchKind::UNet).to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 3], None).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra, None).is_err());
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(Checkpoint::<f32>::from_bytes(&magic, None).is_err());
    }
}
