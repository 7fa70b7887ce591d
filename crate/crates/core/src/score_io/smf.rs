//! Standard MIDI File reading and writing.

use std::collections::{BTreeSet, HashMap};

use super::{Note, NoteId, Score};
use crate::error::{Error, Result};

const PERCUSSION_CHANNEL: u8 = 9;

/// Options for [`parse_midi_with`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ParseOptions {
    /// Track whose notes form the ground-truth melody.
    pub melody_track: Option<usize>,
    /// Drop notes on MIDI channel 10.
    pub skip_percussion: bool,
}

/// Parse an SMF (type 0 or 1), merging all tracks into one note set.
pub fn parse_midi(bytes: &[u8], melody_track: Option<usize>) -> Result<Score> {
    parse_midi_with(
        bytes,
        &ParseOptions {
            melody_track,
            ..ParseOptions::default()
        },
    )
}

#[derive(Debug, Clone, Copy)]
struct RawNote {
    track: usize,
    channel: u8,
    pitch: u8,
    start: u64,
    end: u64,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], pos: usize) -> Self {
        Reader { bytes, pos }
    }

    fn u8(&mut self) -> Result<u8> {
        let b = *self
            .bytes
            .get(self.pos)
            .ok_or_else(|| Error::parse(self.pos, "unexpected end of data"))?;
        self.pos += 1;
        Ok(b)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::parse(self.pos, format!("need {n} bytes, data truncated")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7f);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(Error::parse(start, "variable-length quantity longer than 4 bytes"))
    }

    fn data_byte(&mut self) -> Result<u8> {
        let at = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(Error::parse(at, format!("expected data byte, found status {b:#04x}")));
        }
        Ok(b)
    }
}

pub fn parse_midi_with(bytes: &[u8], opts: &ParseOptions) -> Result<Score> {
    let mut r = Reader::new(bytes, 0);
    if bytes.len() < 4 || &bytes[..4] != b"MThd" {
        return Err(Error::parse(0, "missing MThd header chunk"));
    }
    r.pos = 4;
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(Error::parse(4, format!("header length {header_len} < 6")));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    if format > 1 {
        return Err(Error::parse(header_start, format!("unsupported SMF format {format}")));
    }
    let declared_tracks = r.u16()?;
    let division_at = r.pos;
    let division = r.u16()?;
    if division & 0x8000 != 0 {
        return Err(Error::parse(division_at, "SMPTE time division is not supported"));
    }
    if division == 0 {
        return Err(Error::parse(division_at, "ticks per beat must be positive"));
    }
    r.pos = header_start + header_len;

    let mut raw = Vec::new();
    let mut track = 0usize;
    while r.pos < bytes.len() {
        let chunk_at = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let body_start = r.pos;
        if body_start + len > bytes.len() {
            return Err(Error::parse(chunk_at, "chunk length exceeds file size"));
        }
        if id == b"MTrk" {
            parse_track(bytes, body_start, body_start + len, track, opts, &mut raw)?;
            track += 1;
        }
        r.pos = body_start + len;
    }
    if track < usize::from(declared_tracks) {
        return Err(Error::parse(
            bytes.len(),
            format!("header declares {declared_tracks} tracks, found {track}"),
        ));
    }
    if let Some(m) = opts.melody_track {
        if m >= track {
            return Err(Error::arg(format!("melody track {m} out of range (file has {track} tracks)")));
        }
    }

    raw.sort_by_key(|n| (n.start, n.pitch, n.track, n.channel, n.end));
    let q = f64::from(division);
    let mut notes = Vec::with_capacity(raw.len());
    let mut melody = BTreeSet::new();
    for (i, n) in raw.iter().enumerate() {
        let id = NoteId(i as u32);
        notes.push(Note {
            id,
            pitch: n.pitch,
            onset: n.start as f64 / q,
            duration: (n.end - n.start) as f64 / q,
        });
        if opts.melody_track == Some(n.track) {
            melody.insert(id);
        }
    }
    let score = Score::new(notes, division)?;
    if opts.melody_track.is_some() {
        score.with_melody_ids(melody)
    } else {
        Ok(score)
    }
}

fn parse_track(
    bytes: &[u8],
    start: usize,
    end: usize,
    track: usize,
    opts: &ParseOptions,
    out: &mut Vec<RawNote>,
) -> Result<()> {
    let mut r = Reader::new(&bytes[..end], start);
    let mut tick = 0u64;
    let mut running: Option<u8> = None;
    // (channel, pitch) -> (start tick, byte offset of the note-on)
    let mut active: HashMap<(u8, u8), (u64, usize)> = HashMap::new();

    let close = |out: &mut Vec<RawNote>, channel: u8, pitch: u8, from: u64, to: u64| {
        // zero-length notes carry no duration and are dropped
        if to > from && !(opts.skip_percussion && channel == PERCUSSION_CHANNEL) {
            out.push(RawNote {
                track,
                channel,
                pitch,
                start: from,
                end: to,
            });
        }
    };

    while r.pos < end {
        tick += u64::from(r.vlq()?);
        let event_at = r.pos;
        let first = r.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            r.pos -= 1;
            running.ok_or_else(|| Error::parse(event_at, "data byte without running status"))?
        };
        match status {
            0xff => {
                running = None;
                let kind = r.u8()?;
                let len = r.vlq()? as usize;
                r.take(len)?;
                if kind == 0x2f {
                    break;
                }
            }
            0xf0 | 0xf7 => {
                running = None;
                let len = r.vlq()? as usize;
                r.take(len)?;
            }
            0xf1..=0xfe => {
                return Err(Error::parse(event_at, format!("unexpected system message {status:#04x}")));
            }
            _ => {
                running = Some(status);
                let channel = status & 0x0f;
                match status & 0xf0 {
                    0x80 | 0x90 => {
                        let pitch = r.data_byte()?;
                        let velocity = r.data_byte()?;
                        let key = (channel, pitch);
                        let is_on = status & 0xf0 == 0x90 && velocity > 0;
                        if let Some((from, _)) = active.remove(&key) {
                            close(out, channel, pitch, from, tick);
                        }
                        if is_on {
                            active.insert(key, (tick, event_at));
                        }
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        r.data_byte()?;
                        r.data_byte()?;
                    }
                    0xc0 | 0xd0 => {
                        r.data_byte()?;
                    }
                    _ => unreachable!("status byte has its high bit set"),
                }
            }
        }
    }
    if let Some((_, at)) = active.values().min_by_key(|(_, at)| *at) {
        return Err(Error::parse(*at, "note-on without matching note-off"));
    }
    Ok(())
}

fn push_vlq(buf: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 5];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        buf.push(if i > 0 { stack[i] | 0x80 } else { stack[i] });
    }
}

fn beats_to_ticks(beats: f64, ticks_per_beat: u16) -> u64 {
    (beats * f64::from(ticks_per_beat)).round() as u64
}

/// Channels usable for pitched notes, in allocation order.
const CHANNELS: [u8; 15] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 10, 11, 12, 13, 14, 15];

fn track_chunk(notes: &[&Note], ticks_per_beat: u16) -> Result<Vec<u8>> {
    // Overlapping notes of equal pitch go to distinct channels so that the
    // reader's last-on-wins pairing reproduces them.
    let mut busy_until: HashMap<(u8, u8), u64> = HashMap::new();
    // (tick, kind: 0 = off, 1 = on, channel, pitch)
    let mut events: Vec<(u64, u8, u8, u8)> = Vec::with_capacity(notes.len() * 2);
    let mut ordered: Vec<&Note> = notes.to_vec();
    ordered.sort_by(|a, b| a.onset.total_cmp(&b.onset).then(a.id.cmp(&b.id)));
    for n in ordered {
        let start = beats_to_ticks(n.onset, ticks_per_beat);
        let end = beats_to_ticks(n.end(), ticks_per_beat).max(start + 1);
        let channel = CHANNELS
            .iter()
            .copied()
            .find(|&c| busy_until.get(&(c, n.pitch)).map_or(true, |&t| t <= start))
            .ok_or_else(|| {
                Error::arg(format!(
                    "more than {} simultaneous notes of pitch {}",
                    CHANNELS.len(),
                    n.pitch
                ))
            })?;
        busy_until.insert((channel, n.pitch), end);
        events.push((start, 1, channel, n.pitch));
        events.push((end, 0, channel, n.pitch));
    }
    events.sort_unstable();

    let mut body = Vec::with_capacity(events.len() * 4 + 4);
    let mut last = 0u64;
    for (tick, kind, channel, pitch) in events {
        let delta = u32::try_from(tick - last)
            .map_err(|_| Error::arg("note time exceeds MIDI delta range"))?;
        push_vlq(&mut body, delta);
        last = tick;
        if kind == 1 {
            body.extend_from_slice(&[0x90 | channel, pitch, 64]);
        } else {
            body.extend_from_slice(&[0x80 | channel, pitch, 0]);
        }
    }
    body.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]);

    let mut chunk = Vec::with_capacity(body.len() + 8);
    chunk.extend_from_slice(b"MTrk");
    chunk.extend_from_slice(&(body.len() as u32).to_be_bytes());
    chunk.extend_from_slice(&body);
    Ok(chunk)
}

/// Type-1 SMF: track 0 holds `predicted`, track 1 every other note.
pub fn write_midi(score: &Score, predicted: &BTreeSet<NoteId>) -> Result<Vec<u8>> {
    score.check_ids(predicted)?;
    let (melody, rest): (Vec<&Note>, Vec<&Note>) =
        score.notes().iter().partition(|n| predicted.contains(&n.id));
    let tpb = score.ticks_per_beat();
    let mut out = Vec::new();
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&2u16.to_be_bytes());
    out.extend_from_slice(&tpb.to_be_bytes());
    out.extend(track_chunk(&melody, tpb)?);
    out.extend(track_chunk(&rest, tpb)?);
    Ok(out)
}
