//! Member-side binary frame stream.
//!
//! Each frame is `u32 LE body length` followed by the body:
//! `u16 id length`, member id bytes, `u64 seq`, `u64 sim_time`,
//! `u32 rows`, `u32 cols`, then `rows * cols` `f64` values, row-major, all
//! little-endian.

use std::io::{self, Read, Write};

use super::TelemetryFrame;

pub fn encode_frame(frame: &TelemetryFrame) -> Vec<u8> {
    let id = frame.member_id.as_bytes();
    let mut body = Vec::with_capacity(2 + id.len() + 24 + frame.values.len() * 8);
    body.extend_from_slice(&(id.len() as u16).to_le_bytes());
    body.extend_from_slice(id);
    body.extend_from_slice(&frame.seq.to_le_bytes());
    body.extend_from_slice(&frame.sim_time.to_le_bytes());
    body.extend_from_slice(&(frame.rows as u32).to_le_bytes());
    body.extend_from_slice(&(frame.cols as u32).to_le_bytes());
    for v in &frame.values {
        body.extend_from_slice(&v.to_le_bytes());
    }
    let mut out = (body.len() as u32).to_le_bytes().to_vec();
    out.extend_from_slice(&body);
    out
}

pub fn write_frame(w: &mut impl Write, frame: &TelemetryFrame) -> io::Result<()> {
    w.write_all(&encode_frame(frame))
}

fn bad(msg: &str) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.to_string())
}

/// Reads the next frame; `Ok(None)` at a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> io::Result<Option<TelemetryFrame>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let mut body = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut body)?;
    decode_body(&body).map(Some)
}

fn decode_body(body: &[u8]) -> io::Result<TelemetryFrame> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> io::Result<&[u8]> {
        let s = body.get(pos..pos + n).ok_or_else(|| bad("frame body too short"))?;
        pos += n;
        Ok(s)
    };
    let id_len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
    let member_id = String::from_utf8(take(id_len)?.to_vec()).map_err(|_| bad("member id is not utf-8"))?;
    let seq = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let sim_time = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes"));
    let rows = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    let n = rows.checked_mul(cols).ok_or_else(|| bad("dimensions overflow"))?;
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        values.push(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")));
    }
    if pos != body.len() {
        return Err(bad("trailing bytes in frame"));
    }
    Ok(TelemetryFrame { member_id, seq, sim_time, rows, cols, values })
}
