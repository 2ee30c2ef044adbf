//! Versioned checkpoint container.
//!
//! Little-endian layout:
//!   magic  b"CTRK"
//!   u32    version (1)
//!   u32    section count
//!   per section: 4-byte tag, u64 payload length, payload
//!
//! Sections:
//!   "CONV"  conv weight file (see [`crate::features::weights_io`])
//!   "QNET"  q-network: f64 dropout, u64 parameter count, raw f64 params
//!   "CONF"  UTF-8 flat config text (the resolved run configuration)
//!   "SESS"  optional tracking state: box, frame index, and per-layer
//!           correlation-filter statistics
//!
//! Everything round-trips bit-exactly; reals are raw IEEE-754 bits.

use crate::agent::QNet;
use crate::corrfilter::DcfModel;
use crate::error::{mismatch, Error, Result};
use crate::features::conv::{ConvStackSpec, ConvWeights};
use crate::features::weights_io::{
    read_f64, read_u32, read_u64, read_weights, write_f64, write_u32, write_u64, write_weights,
};
use crate::geometry::BoundingBox;
use ndarray::{Array2, Array3};
use rustfft::num_complex::Complex64;
use std::io::{Read, Write};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"CTRK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Resumable tracking state stored alongside the weights.
#[derive(Clone, Debug)]
pub struct SessionState {
    pub bbox: BoundingBox,
    pub frame_index: u64,
    /// One entry per cascade layer; `None` for conv layers.
    pub dcf: Vec<Option<DcfModel>>,
}

/// Everything a `track` or `bench` run needs.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    /// Resolved flat config text the artifact was produced with.
    pub config_text: String,
    pub conv_spec: ConvStackSpec,
    pub conv_weights: ConvWeights,
    pub qnet: QNet,
    pub session: Option<SessionState>,
}

fn write_section<W: Write>(w: &mut W, tag: &[u8; 4], payload: &[u8]) -> Result<()> {
    w.write_all(tag)?;
    write_u64(w, payload.len() as u64)?;
    w.write_all(payload)?;
    Ok(())
}

fn qnet_payload(net: &QNet) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_f64(&mut buf, net.dropout_rate)?;
    let params = net.params();
    write_u64(&mut buf, params.len() as u64)?;
    for v in params {
        write_f64(&mut buf, v)?;
    }
    Ok(buf)
}

fn qnet_from_payload(bytes: &[u8]) -> Result<QNet> {
    let mut r = bytes;
    let dropout = read_f64(&mut r)?;
    let count = read_u64(&mut r)? as usize;
    let mut net = QNet::zeros(dropout);
    if count != net.param_count() {
        return Err(mismatch!(
            "checkpoint stores {count} q-net parameters, expected {}",
            net.param_count()
        ));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(read_f64(&mut r)?);
    }
    net.set_params(&params)?;
    Ok(net)
}

fn write_complex_plane<W: Write>(w: &mut W, plane: &Array3<Complex64>) -> Result<()> {
    for v in plane.iter() {
        write_f64(w, v.re)?;
        write_f64(w, v.im)?;
    }
    Ok(())
}

fn session_payload(state: &SessionState) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for v in [state.bbox.cx, state.bbox.cy, state.bbox.w, state.bbox.h] {
        write_f64(&mut buf, v)?;
    }
    write_u64(&mut buf, state.frame_index)?;
    write_u32(&mut buf, state.dcf.len() as u32)?;
    for model in &state.dcf {
        match model {
            None => buf.push(0),
            Some(m) => {
                buf.push(1);
                let (num, den, label, window) = m.parts();
                let (h, w, c) = num.dim();
                for v in [h, w, c] {
                    write_u32(&mut buf, v as u32)?;
                }
                write_f64(&mut buf, m.lambda)?;
                write_f64(&mut buf, m.update_rate)?;
                write_complex_plane(&mut buf, num)?;
                for &v in den.iter() {
                    write_f64(&mut buf, v)?;
                }
                for v in label.iter() {
                    write_f64(&mut buf, v.re)?;
                    write_f64(&mut buf, v.im)?;
                }
                for &v in window.iter() {
                    write_f64(&mut buf, v)?;
                }
            }
        }
    }
    Ok(buf)
}

fn session_from_payload(bytes: &[u8]) -> Result<SessionState> {
    let mut r = bytes;
    let cx = read_f64(&mut r)?;
    let cy = read_f64(&mut r)?;
    let w = read_f64(&mut r)?;
    let h = read_f64(&mut r)?;
    let frame_index = read_u64(&mut r)?;
    let layer_count = read_u32(&mut r)? as usize;
    let mut dcf = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let mut present = [0u8; 1];
        r.read_exact(&mut present)?;
        if present[0] == 0 {
            dcf.push(None);
            continue;
        }
        let mh = read_u32(&mut r)? as usize;
        let mw = read_u32(&mut r)? as usize;
        let mc = read_u32(&mut r)? as usize;
        let lambda = read_f64(&mut r)?;
        let update_rate = read_f64(&mut r)?;
        let mut num = Array3::from_elem((mh, mw, mc), Complex64::default());
        for v in num.iter_mut() {
            let re = read_f64(&mut r)?;
            let im = read_f64(&mut r)?;
            *v = Complex64::new(re, im);
        }
        let mut den = Array2::zeros((mh, mw));
        for v in den.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        let mut label = Array2::from_elem((mh, mw), Complex64::default());
        for v in label.iter_mut() {
            let re = read_f64(&mut r)?;
            let im = read_f64(&mut r)?;
            *v = Complex64::new(re, im);
        }
        let mut window = Array2::zeros((mh, mw));
        for v in window.iter_mut() {
            *v = read_f64(&mut r)?;
        }
        dcf.push(Some(DcfModel::from_parts(
            num,
            den,
            lambda,
            label,
            window,
            update_rate,
        )));
    }
    Ok(SessionState {
        bbox: BoundingBox::new(cx, cy, w, h),
        frame_index,
        dcf,
    })
}

/// Serialize a checkpoint to bytes.
pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    write_u32(&mut out, CHECKPOINT_VERSION)?;
    let section_count = 3 + ckpt.session.is_some() as u32;
    write_u32(&mut out, section_count)?;

    let mut conv = Vec::new();
    write_weights(&mut conv, &ckpt.conv_spec, &ckpt.conv_weights)?;
    write_section(&mut out, b"CONV", &conv)?;
    write_section(&mut out, b"QNET", &qnet_payload(&ckpt.qnet)?)?;
    write_section(&mut out, b"CONF", ckpt.config_text.as_bytes())?;
    if let Some(state) = &ckpt.session {
        write_section(&mut out, b"SESS", &session_payload(state)?)?;
    }
    Ok(out)
}

/// Parse a checkpoint from bytes.
pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = bytes;
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let sections = read_u32(&mut r)?;

    let mut conv: Option<(ConvStackSpec, ConvWeights)> = None;
    let mut qnet: Option<QNet> = None;
    let mut config_text: Option<String> = None;
    let mut session: Option<SessionState> = None;

    for _ in 0..sections {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag)?;
        let len = read_u64(&mut r)? as usize;
        if r.len() < len {
            return Err(Error::Format("truncated checkpoint section".into()));
        }
        let (payload, rest) = r.split_at(len);
        r = rest;
        match &tag {
            b"CONV" => conv = Some(read_weights(&mut { payload })?),
            b"QNET" => qnet = Some(qnet_from_payload(payload)?),
            b"CONF" => {
                config_text = Some(
                    String::from_utf8(payload.to_vec())
                        .map_err(|_| Error::Format("config text is not UTF-8".into()))?,
                )
            }
            b"SESS" => session = Some(session_from_payload(payload)?),
            other => {
                return Err(Error::Format(format!(
                    "unknown checkpoint section {:?}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
    }

    let (conv_spec, conv_weights) =
        conv.ok_or_else(|| Error::Format("checkpoint lacks a CONV section".into()))?;
    Ok(Checkpoint {
        config_text: config_text
            .ok_or_else(|| Error::Format("checkpoint lacks a CONF section".into()))?,
        conv_spec,
        conv_weights,
        qnet: qnet.ok_or_else(|| Error::Format("checkpoint lacks a QNET section".into()))?,
        session,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    checkpoint_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrfilter::{cosine_window, gaussian_label, train};
    use crate::features::FeatureMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample_checkpoint(with_session: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvStackSpec::desk_default(2).unwrap();
        let conv_weights = ConvWeights::seeded(&spec, &mut rng);
        let qnet = QNet::seeded(0.5, &mut rng);
        let session = with_session.then(|| {
            let features = FeatureMap::new(
                ndarray::Array3::from_shape_fn((8, 8, 1), |_| rng.gen_range(-1.0..1.0)),
                1,
            );
            let label = gaussian_label(8, 8, 1.0).unwrap();
            let model = train(&features, &label, 0.01, &cosine_window(8, 8)).unwrap();
            SessionState {
                bbox: BoundingBox::new(10.5, 11.25, 17.0, 19.0),
                frame_index: 42,
                dcf: vec![Some(model), None],
            }
        });
        Checkpoint {
            config_text: "seed = 7\ntrain.epochs = 3\n".into(),
            conv_spec: spec,
            conv_weights,
            qnet,
            session,
        }
    }

    #[test]
    fn round_trip_without_session() {
        let ckpt = sample_checkpoint(false);
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.config_text, ckpt.config_text);
        assert_eq!(back.conv_spec, ckpt.conv_spec);
        assert_eq!(back.conv_weights, ckpt.conv_weights);
        assert_eq!(back.qnet.params(), ckpt.qnet.params());
        assert!(back.session.is_none());
        // byte-stable re-serialization
        assert_eq!(bytes, checkpoint_to_bytes(&back).unwrap());
    }

    #[test]
    fn round_trip_with_session_is_bit_exact() {
        let ckpt = sample_checkpoint(true);
        let bytes = checkpoint_to_bytes(&ckpt).unwrap();
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(bytes, checkpoint_to_bytes(&back).unwrap());
        let s = back.session.unwrap();
        assert_eq!(s.bbox, BoundingBox::new(10.5, 11.25, 17.0, 19.0));
        assert_eq!(s.frame_index, 42);
        assert!(s.dcf[0].is_some() && s.dcf[1].is_none());
    }

    #[test]
    fn corrupted_magic_fails() {
        let ckpt = sample_checkpoint(false);
        let mut bytes = checkpoint_to_bytes(&ckpt).unwrap();
        bytes[0] = b'X';
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }

    #[test]
    fn truncation_fails() {
        let ckpt = sample_checkpoint(true);
        let mut bytes = checkpoint_to_bytes(&ckpt).unwrap();
        bytes.truncate(bytes.len() / 2);
        assert!(checkpoint_from_bytes(&bytes).is_err());
    }
}
