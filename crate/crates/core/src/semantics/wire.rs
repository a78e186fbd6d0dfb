//! Node-to-basestation binary codec.
//!
//! Little-endian throughout.
//!
//! ```text
//! header (16 bytes)
//!   magic      u32   "DSEM"
//!   version    u8    1
//!   node id    u8
//!   timestamp  u32
//!   U          u16   detection count
//!   mask width u16   0 when U = 0
//!   mask height u16  0 when U = 0
//! detection (27 + 2n bytes)
//!   x_c y_c w h  4 x f32, pixels
//!   class        u8
//!   confidence   f32 in [0, 1]
//!   color        3 x u8 (R, G, B)
//!   run count n  u16
//!   lead value   u8    value of the first run (0 or 1)
//!   run lengths  n x u16, values alternate starting from the lead value
//! ```
//!
//! Truth ids never go on the wire.

use crate::error::{Error, Result};
use crate::scene::{BBox, VehicleClass};

use super::mask::{rle_decode, rle_encode, Run};
use super::{Detection, SemanticMessage};

pub const MAGIC: u32 = u32::from_le_bytes(*b"DSEM");
pub const VERSION: u8 = 1;
pub const HEADER_BYTES: usize = 16;
/// Per-detection bytes excluding the run lengths.
pub const DETECTION_FIXED_BYTES: usize = 16 + 1 + 4 + 3 + 2 + 1;

fn mask_dims(msg: &SemanticMessage) -> Result<(u16, u16)> {
    let Some(first) = msg.detections.first() else {
        return Ok((0, 0));
    };
    let (w, h) = (first.mask.width(), first.mask.height());
    if msg.detections.iter().any(|d| d.mask.width() != w || d.mask.height() != h) {
        return Err(Error::format("all masks in a message must share dimensions"));
    }
    if w * h > u16::MAX as usize {
        return Err(Error::format(format!("mask of {w}x{h} cells exceeds the u16 run range")));
    }
    Ok((w as u16, h as u16))
}

pub fn encode_message(msg: &SemanticMessage) -> Result<Vec<u8>> {
    if msg.detections.len() > u16::MAX as usize {
        return Err(Error::format("too many detections for one message"));
    }
    let (mw, mh) = mask_dims(msg)?;
    let mut out = Vec::with_capacity(HEADER_BYTES + msg.detections.len() * 64);
    out.extend_from_slice(&MAGIC.to_le_bytes());
    out.push(VERSION);
    out.push(msg.node_id);
    out.extend_from_slice(&msg.timestamp.to_le_bytes());
    out.extend_from_slice(&(msg.detections.len() as u16).to_le_bytes());
    out.extend_from_slice(&mw.to_le_bytes());
    out.extend_from_slice(&mh.to_le_bytes());
    for d in &msg.detections {
        for v in [d.bbox.xc, d.bbox.yc, d.bbox.w, d.bbox.h] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.push(d.class.code());
        out.extend_from_slice(&(d.confidence as f32).to_le_bytes());
        out.extend_from_slice(&d.color);
        let runs = rle_encode(&d.mask);
        out.extend_from_slice(&(runs.len() as u16).to_le_bytes());
        out.push(runs[0].value as u8);
        for r in &runs {
            out.extend_from_slice(&(r.len as u16).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(format!(
                "truncated message: need {n} bytes at offset {}, have {}",
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
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes one message from the front of `buf`, returning it and the number
/// of bytes consumed.
pub fn decode_message_prefix(buf: &[u8]) -> Result<(SemanticMessage, usize)> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.u32()?;
    if magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:#010x}")));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported message version {version}")));
    }
    let node_id = r.u8()?;
    let timestamp = r.u32()?;
    let count = r.u16()? as usize;
    let mw = r.u16()? as usize;
    let mh = r.u16()? as usize;
    if count > 0 && (mw == 0 || mh == 0) {
        return Err(Error::format("message with detections has zero mask dimensions"));
    }
    let mut detections = Vec::with_capacity(count);
    for _ in 0..count {
        let xc = r.f32()? as f64;
        let yc = r.f32()? as f64;
        let w = r.f32()? as f64;
        let h = r.f32()? as f64;
        let code = r.u8()?;
        let class = VehicleClass::from_code(code).ok_or_else(|| Error::format(format!("unknown class code {code}")))?;
        let confidence = r.f32()? as f64;
        let c = r.take(3)?;
        let color = [c[0], c[1], c[2]];
        let n = r.u16()? as usize;
        let lead = r.u8()?;
        if lead > 1 {
            return Err(Error::format(format!("lead value must be 0 or 1, got {lead}")));
        }
        let mut value = lead == 1;
        let mut runs = Vec::with_capacity(n);
        for _ in 0..n {
            runs.push(Run {
                value,
                len: r.u16()? as u32,
            });
            value = !value;
        }
        let mask = rle_decode(&runs, mw, mh)?;
        detections.push(Detection {
            bbox: BBox::new(xc, yc, w, h),
            class,
            confidence,
            mask,
            color,
            truth_id: None,
        });
    }
    Ok((
        SemanticMessage {
            node_id,
            timestamp,
            detections,
        },
        r.pos,
    ))
}

pub fn decode_message(buf: &[u8]) -> Result<SemanticMessage> {
    let (msg, used) = decode_message_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::format(format!("{} trailing bytes after message", buf.len() - used)));
    }
    Ok(msg)
}

/// Decodes a concatenated stream of messages.
pub fn decode_stream(mut buf: &[u8]) -> Result<Vec<SemanticMessage>> {
    let mut out = Vec::new();
    while !buf.is_empty() {
        let (m, used) = decode_message_prefix(buf)?;
        out.push(m);
        buf = &buf[used..];
    }
    Ok(out)
}

/// Exact encoded size, computed without encoding.
pub fn message_bytes(msg: &SemanticMessage) -> usize {
    HEADER_BYTES
        + msg
            .detections
            .iter()
            .map(|d| DETECTION_FIXED_BYTES + 2 * rle_encode(&d.mask).len())
            .sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::semantics::MaskGrid;
    use proptest::prelude::*;

    fn det(mask: MaskGrid) -> Detection {
        Detection {
            bbox: BBox::new(100.5, 200.25, 40.0, 30.0),
            class: VehicleClass::Bus,
            confidence: 0.75,
            mask,
            color: [1, 2, 3],
            truth_id: Some(9),
        }
    }

    #[test]
    fn empty_message_is_header_only() {
        let m = SemanticMessage {
            node_id: 2,
            timestamp: 77,
            detections: vec![],
        };
        let b = encode_message(&m).unwrap();
        assert_eq!(b.len(), HEADER_BYTES);
        assert_eq!(message_bytes(&m), HEADER_BYTES);
        assert_eq!(decode_message(&b).unwrap(), m);
    }

    #[test]
    fn header_layout_is_fixed() {
        let mut mask = MaskGrid::new(4, 2).unwrap();
        mask.set(1, 0, true);
        let m = SemanticMessage {
            node_id: 1,
            timestamp: 0x01020304,
            detections: vec![det(mask)],
        };
        let b = encode_message(&m).unwrap();
        assert_eq!(&b[0..4], b"DSEM");
        assert_eq!(b[4], 1);
        assert_eq!(b[5], 1);
        assert_eq!(&b[6..10], &[4, 3, 2, 1]);
        assert_eq!(&b[10..12], &[1, 0]);
        assert_eq!(&b[12..16], &[4, 0, 2, 0]);
        // bbox x_c as f32
        assert_eq!(&b[16..20], &100.5f32.to_le_bytes());
        assert_eq!(b[32], VehicleClass::Bus.code());
        assert_eq!(&b[37..40], &[1, 2, 3]);
        // runs: 0 x1, 1 x1, 0 x6
        assert_eq!(&b[40..42], &[3, 0]);
        assert_eq!(b[42], 0);
        assert_eq!(&b[43..49], &[1, 0, 1, 0, 6, 0]);
        assert_eq!(b.len(), message_bytes(&m));
    }

    #[test]
    fn solid_mask_message_is_tiny() {
        let mut mask = MaskGrid::from_bits(64, 64, vec![true; 4096]).unwrap();
        mask.set(0, 0, false);
        let m = SemanticMessage {
            node_id: 1,
            timestamp: 0,
            detections: vec![det(mask)],
        };
        let raw = 1280u64 * 720 * 3;
        assert_eq!(raw, 2_764_800);
        assert!((message_bytes(&m) as f64) < 0.01 * raw as f64);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let m = SemanticMessage {
            node_id: 1,
            timestamp: 5,
            detections: vec![det(MaskGrid::new(3, 3).unwrap())],
        };
        let b = encode_message(&m).unwrap();
        assert!(decode_message(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] ^= 0xff;
        assert!(decode_message(&bad).is_err());
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(decode_message(&bad).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_message(&extra).is_err());
    }

    fn arb_message() -> impl Strategy<Value = SemanticMessage> {
        (1usize..12, 1usize..12, 0usize..6, any::<u8>(), any::<u32>()).prop_flat_map(|(w, h, u, node, ts)| {
            let det = (
                (0f32..1280.0, 0f32..720.0, 0.5f32..400.0, 0.5f32..300.0),
                0u8..4,
                0f32..=1.0,
                any::<[u8; 3]>(),
                proptest::collection::vec(any::<bool>(), w * h),
                any::<Option<u32>>(),
            )
                .prop_map(move |((x, y, bw, bh), c, conf, color, bits, truth)| Detection {
                    bbox: BBox::new(x as f64, y as f64, bw as f64, bh as f64),
                    class: VehicleClass::from_code(c).unwrap(),
                    confidence: conf as f64,
                    mask: MaskGrid::from_bits(w, h, bits).unwrap(),
                    color,
                    truth_id: truth,
                });
            proptest::collection::vec(det, u).prop_map(move |detections| SemanticMessage {
                node_id: node,
                timestamp: ts,
                detections,
            })
        })
    }

    proptest! {
        #[test]
        fn wire_round_trip(msg in arb_message()) {
            let bytes = encode_message(&msg).unwrap();
            prop_assert_eq!(bytes.len(), message_bytes(&msg));
            let back = decode_message(&bytes).unwrap();
            prop_assert_eq!(back, msg.without_truth());
        }
    }
}
