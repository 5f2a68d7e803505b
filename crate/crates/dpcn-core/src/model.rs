//! All learnable weights, flat-indexable, with checkpoint round-trips.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::decoder::{bind_decoder, BoundDecoder, DecoderParams};
use crate::dcm::{bind_kernel_gen, BoundKernelGen, KernelGenParams};
use crate::encoder::{bind_encoder, BoundEncoder, EncoderParams};
use crate::error::{Error, Result};
use crate::ffm::{bind_ffm, BoundFfm, FfmParams};
use crate::io::{dpcnt_byte_len, read_dpcnt, write_dpcnt, Dtype};
use crate::synth::derive_seed;
use crate::tape::{GradTape, ValId};
use crate::tensor::Tensor;

pub const PARAM_GROUPS: [&str; 4] = ["encoder", "ffm", "kgen", "decoder"];

/// Every trainable tensor in the model, one flat scalar index across
/// all of them (fixed enumeration order, checkpoint round-trip exact).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub ffm: FfmParams,
    pub kgen: KernelGenParams,
    pub decoder: DecoderParams,
}

/// Which parts receive gradients on a given step.
#[derive(Debug, Clone, Copy)]
pub struct Trainability {
    pub encoder_stage: [bool; 3],
    pub ffm: bool,
    pub kgen: bool,
    pub decoder: bool,
}

impl Trainability {
    pub fn all() -> Self {
        Trainability { encoder_stage: [true; 3], ffm: true, kgen: true, decoder: true }
    }

    pub fn frozen_encoder() -> Self {
        Trainability { encoder_stage: [false; 3], ..Trainability::all() }
    }
}

/// Tape handles for one bound copy of the model, in flat order.
pub struct BoundModel {
    pub enc: BoundEncoder,
    pub ffm: BoundFfm,
    pub kgen: BoundKernelGen,
    pub dec: BoundDecoder,
    ordered: Vec<ValId>,
}

impl ModelParams {
    pub fn init(cfg: &Config, seed: u64) -> Self {
        ModelParams {
            encoder: EncoderParams::init(derive_seed(seed, 0xE0C)),
            ffm: FfmParams::init(derive_seed(seed, 0xFF1)),
            kgen: KernelGenParams::init(derive_seed(seed, 0x6E2)),
            decoder: DecoderParams::init(cfg.xout_channels(), derive_seed(seed, 0xDEC)),
        }
    }

    /// (name, tensor) pairs in the canonical flat order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        for (i, stage) in self.encoder.stages.iter().enumerate() {
            out.push((format!("encoder.stage{}.w", i + 1), &stage.w));
            out.push((format!("encoder.stage{}.b", i + 1), &stage.b));
        }
        out.push(("ffm.conv.w".into(), &self.ffm.w));
        out.push(("ffm.conv.b".into(), &self.ffm.b));
        for (tag, net) in [
            ("v", &self.kgen.vertical),
            ("h", &self.kgen.horizontal),
            ("s", &self.kgen.square),
        ] {
            out.push((format!("kgen.{tag}.w1"), &net.w1));
            out.push((format!("kgen.{tag}.b1"), &net.b1));
            out.push((format!("kgen.{tag}.w2"), &net.w2));
            out.push((format!("kgen.{tag}.b2"), &net.b2));
        }
        out.push(("decoder.fconv.w".into(), &self.decoder.fconv_w));
        out.push(("decoder.fconv.b".into(), &self.decoder.fconv_b));
        for (i, (w, b)) in self.decoder.aspp.iter().enumerate() {
            out.push((format!("decoder.aspp{}.w", i + 1), w));
            out.push((format!("decoder.aspp{}.b", i + 1), b));
        }
        out.push(("decoder.fuse.w".into(), &self.decoder.fuse_w));
        out.push(("decoder.fuse.b".into(), &self.decoder.fuse_b));
        out.push(("decoder.cls.w".into(), &self.decoder.cls_w));
        out.push(("decoder.cls.b".into(), &self.decoder.cls_b));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for stage in self.encoder.stages.iter_mut() {
            out.push(&mut stage.w);
            out.push(&mut stage.b);
        }
        out.push(&mut self.ffm.w);
        out.push(&mut self.ffm.b);
        for net in [&mut self.kgen.vertical, &mut self.kgen.horizontal, &mut self.kgen.square] {
            out.push(&mut net.w1);
            out.push(&mut net.b1);
            out.push(&mut net.w2);
            out.push(&mut net.b2);
        }
        out.push(&mut self.decoder.fconv_w);
        out.push(&mut self.decoder.fconv_b);
        for (w, b) in self.decoder.aspp.iter_mut() {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.decoder.fuse_w);
        out.push(&mut self.decoder.fuse_b);
        out.push(&mut self.decoder.cls_w);
        out.push(&mut self.decoder.cls_b);
        out
    }

    pub fn flat_len(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.flat_len());
        for (_, t) in self.named_tensors() {
            out.extend_from_slice(&t.data);
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len());
    }

    pub fn get_scalar(&self, index: usize) -> f64 {
        let mut off = 0;
        for (_, t) in self.named_tensors() {
            if index < off + t.numel() {
                return t.data[index - off];
            }
            off += t.numel();
        }
        panic!("flat index {index} out of range");
    }

    pub fn set_scalar(&mut self, index: usize, v: f64) {
        let mut off = 0;
        for t in self.tensors_mut() {
            if index < off + t.data.len() {
                t.data[index - off] = v;
                return;
            }
            off += t.data.len();
        }
        panic!("flat index {index} out of range");
    }

    /// theta <- theta + scale * delta over the flat index.
    pub fn add_scaled(&mut self, delta: &[f64], scale: f64) {
        let mut off = 0;
        for t in self.tensors_mut() {
            for v in t.data.iter_mut() {
                *v += scale * delta[off];
                off += 1;
            }
        }
        assert_eq!(off, delta.len());
    }

    /// Group of the flat scalar at `index` ("encoder", "ffm", ...).
    pub fn group_of(&self, index: usize) -> &'static str {
        let mut off = 0;
        for (name, t) in self.named_tensors() {
            if index < off + t.numel() {
                return PARAM_GROUPS
                    .iter()
                    .find(|g| name.starts_with(**g))
                    .expect("name carries a group prefix");
            }
            off += t.numel();
        }
        panic!("flat index {index} out of range");
    }

    /// Flat index ranges per group, in flat order.
    pub fn group_ranges(&self) -> Vec<(&'static str, std::ops::Range<usize>)> {
        let mut out: Vec<(&'static str, std::ops::Range<usize>)> = Vec::new();
        let mut off = 0;
        for (name, t) in self.named_tensors() {
            let group =
                PARAM_GROUPS.iter().find(|g| name.starts_with(**g)).expect("grouped name");
            let range = off..off + t.numel();
            match out.last_mut() {
                Some((g, r)) if *g == *group => r.end = range.end,
                _ => out.push((group, range)),
            }
            off += t.numel();
        }
        out
    }

    /// Rebuild from named tensors (shapes carry all structure).
    pub fn from_named(mut entries: Vec<(String, Tensor)>) -> Result<Self> {
        entries.sort_by(|a, b| a.0.cmp(&b.0));
        let mut take = |name: &str| -> Result<Tensor> {
            let idx = entries
                .binary_search_by(|(n, _)| n.as_str().cmp(name))
                .map_err(|_| Error::Checkpoint(format!("missing tensor '{name}'")))?;
            Ok(entries.remove(idx).1)
        };
        let mut stages = Vec::new();
        for i in 1..=3 {
            stages.push(crate::encoder::ConvLayer {
                w: take(&format!("encoder.stage{i}.w"))?,
                b: take(&format!("encoder.stage{i}.b"))?,
            });
        }
        let encoder = EncoderParams {
            stages: stages.try_into().map_err(|_| Error::Checkpoint("stage count".into()))?,
        };
        let ffm = FfmParams { w: take("ffm.conv.w")?, b: take("ffm.conv.b")? };
        let mut nets = Vec::new();
        for tag in ["v", "h", "s"] {
            nets.push(crate::dcm::KernelNet {
                w1: take(&format!("kgen.{tag}.w1"))?,
                b1: take(&format!("kgen.{tag}.b1"))?,
                w2: take(&format!("kgen.{tag}.w2"))?,
                b2: take(&format!("kgen.{tag}.b2"))?,
            });
        }
        let kgen = KernelGenParams {
            vertical: nets.remove(0),
            horizontal: nets.remove(0),
            square: nets.remove(0),
        };
        let decoder = DecoderParams {
            fconv_w: take("decoder.fconv.w")?,
            fconv_b: take("decoder.fconv.b")?,
            aspp: [
                (take("decoder.aspp1.w")?, take("decoder.aspp1.b")?),
                (take("decoder.aspp2.w")?, take("decoder.aspp2.b")?),
                (take("decoder.aspp3.w")?, take("decoder.aspp3.b")?),
            ],
            fuse_w: take("decoder.fuse.w")?,
            fuse_b: take("decoder.fuse.b")?,
            cls_w: take("decoder.cls.w")?,
            cls_b: take("decoder.cls.b")?,
        };
        if !entries.is_empty() {
            return Err(Error::Checkpoint(format!("unexpected tensor '{}'", entries[0].0)));
        }
        Ok(ModelParams { encoder, ffm, kgen, decoder })
    }

    // ── Checkpoint io ────────────────────────────────────────────────
    // Plain-text index (`name offset` per line, offsets into the blob
    // section) followed by a blank line and concatenated DPCN-T blobs.

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "DPCN-CKPT v1")?;
        let named = self.named_tensors();
        let mut offset = 0usize;
        for (name, t) in &named {
            writeln!(w, "{name} {offset}")?;
            offset += dpcnt_byte_len(t.rank(), t.numel(), Dtype::F64);
        }
        writeln!(w)?;
        for (_, t) in &named {
            write_dpcnt(&mut w, t, Dtype::F64)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut content = Vec::new();
        r.read_to_end(&mut content)?;
        let header_end = content
            .windows(2)
            .position(|w| w == b"\n\n")
            .ok_or_else(|| Error::Checkpoint("missing index terminator".into()))?;
        let header = std::str::from_utf8(&content[..header_end])
            .map_err(|_| Error::Checkpoint("index is not utf-8".into()))?;
        let blob = &content[header_end + 2..];
        let mut lines = header.lines();
        let magic = lines.next().unwrap_or("");
        if magic != "DPCN-CKPT v1" {
            return Err(Error::Checkpoint(format!("bad magic line '{magic}'")));
        }
        let mut entries = Vec::new();
        for line in lines {
            let (name, off) = line
                .rsplit_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad index line '{line}'")))?;
            let off: usize =
                off.parse().map_err(|_| Error::Checkpoint(format!("bad offset '{off}'")))?;
            if off >= blob.len() {
                return Err(Error::Checkpoint(format!("offset {off} beyond payload")));
            }
            let t = read_dpcnt(&mut &blob[off..])?;
            entries.push((name.to_string(), t));
        }
        ModelParams::from_named(entries)
    }
}

/// Register every parameter on a tape with per-group trainability.
pub fn bind_model(tape: &mut GradTape, params: &ModelParams, train: &Trainability) -> BoundModel {
    let enc = bind_encoder(tape, &params.encoder, train.encoder_stage);
    let ffm = bind_ffm(tape, &params.ffm, train.ffm);
    let kgen = bind_kernel_gen(tape, &params.kgen, train.kgen);
    let dec = bind_decoder(tape, &params.decoder, train.decoder);
    let mut ordered = Vec::new();
    for (w, b) in enc.stages {
        ordered.push(w);
        ordered.push(b);
    }
    ordered.push(ffm.w);
    ordered.push(ffm.b);
    for net in [kgen.vertical, kgen.horizontal, kgen.square] {
        ordered.extend([net.w1, net.b1, net.w2, net.b2]);
    }
    ordered.extend([dec.fconv.0, dec.fconv.1]);
    for (w, b) in dec.aspp {
        ordered.push(w);
        ordered.push(b);
    }
    ordered.extend([dec.fuse.0, dec.fuse.1, dec.cls.0, dec.cls.1]);
    BoundModel { enc, ffm, kgen, dec, ordered }
}

impl BoundModel {
    /// Flat gradient in the canonical parameter order; zeros for frozen
    /// or untouched parameters.
    pub fn flat_grad(&self, tape: &GradTape) -> Vec<f64> {
        let mut out = Vec::new();
        for &id in &self.ordered {
            match tape.grad(id) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat(0.0).take(tape.value(id).numel())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> ModelParams {
        ModelParams::init(&Config::default(), 5)
    }

    #[test]
    fn flat_index_is_a_bijection() {
        let p = params();
        let flat = p.to_flat();
        assert_eq!(flat.len(), p.flat_len());
        let mut q = p.clone();
        q.set_flat(&flat);
        assert_eq!(p, q);
        // Scalar get/set agree with the flat order.
        let mut r = p.clone();
        r.set_scalar(17, 1234.5);
        assert_eq!(r.get_scalar(17), 1234.5);
        assert_eq!(r.to_flat()[17], 1234.5);
    }

    #[test]
    fn groups_cover_all_scalars_in_order() {
        let p = params();
        let ranges = p.group_ranges();
        assert_eq!(ranges.len(), 4);
        assert_eq!(ranges[0].0, "encoder");
        assert_eq!(ranges[3].0, "decoder");
        assert_eq!(ranges.last().unwrap().1.end, p.flat_len());
        let mut prev_end = 0;
        for (_, r) in &ranges {
            assert_eq!(r.start, prev_end);
            prev_end = r.end;
        }
        assert_eq!(p.group_of(0), "encoder");
        assert_eq!(p.group_of(p.flat_len() - 1), "decoder");
    }

    #[test]
    fn checkpoint_round_trip_bit_exact() {
        let p = params();
        let dir = std::env::temp_dir().join("dpcn_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        p.save_checkpoint(&path).unwrap();
        let q = ModelParams::load_checkpoint(&path).unwrap();
        for ((_, a), (_, b)) in p.named_tensors().iter().zip(q.named_tensors()) {
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn from_named_rejects_missing_and_extra() {
        let p = params();
        let mut entries: Vec<(String, Tensor)> =
            p.named_tensors().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let dropped = entries.pop().unwrap();
        assert!(ModelParams::from_named(entries.clone()).is_err());
        entries.push(dropped);
        entries.push(("bogus.extra".into(), Tensor::scalar(1.0)));
        assert!(ModelParams::from_named(entries).is_err());
    }
}
