//! Closure data model and its word-level wire format.
//!
//! A closure carries everything a remote core needs to run a process: its
//! arguments, the indices of the procedures it may call, and the procedure
//! images themselves. On the wire it is a flat sequence of 32-bit words:
//!
//! ```text
//! [|A|, |Q|]
//! per argument:  [tag] ++ ArrayRef: [len, data...] | SingleVar: [value] | ConstVal: [value]
//! per procedure: [index, length_bytes, payload padded to whole words]
//! ```
//!
//! Payload bytes are packed little-endian into words; padding bytes are zero.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Word = u32;

pub const WORD_BYTES: usize = 4;

pub const TAG_CONST_VAL: Word = 0;
pub const TAG_SINGLE_VAR: Word = 1;
pub const TAG_ARRAY_REF: Word = 2;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClosureError {
    #[error("a closure needs at least one procedure")]
    NoProcedures,
    #[error("procedure {index}: image of {len} bytes is shorter than one instruction")]
    ImageTooShort { index: Word, len: usize },
    #[error("malformed closure at word {at}: {reason}")]
    Malformed { at: usize, reason: String },
}

fn malformed(at: usize, reason: impl Into<String>) -> ClosureError {
    ClosureError::Malformed {
        at,
        reason: reason.into(),
    }
}

/// One argument of a closure. Guest-side home locations are not part of the
/// wire value; the guest keeps them alongside the closure it sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Argument {
    /// A referenced variable, written back after execution.
    SingleVar(Word),
    /// A referenced array, written back after execution.
    ArrayRef(Vec<Word>),
    /// A value copied into the argument; never written back.
    ConstVal(Word),
}

impl Argument {
    pub fn tag(&self) -> Word {
        match self {
            Argument::ConstVal(_) => TAG_CONST_VAL,
            Argument::SingleVar(_) => TAG_SINGLE_VAR,
            Argument::ArrayRef(_) => TAG_ARRAY_REF,
        }
    }

    /// Words this argument occupies on the wire, header included.
    pub fn wire_words(&self) -> usize {
        match self {
            Argument::ArrayRef(data) => 2 + data.len(),
            Argument::SingleVar(_) | Argument::ConstVal(_) => 2,
        }
    }

    /// Words sent back to the guest once the process halts.
    pub fn result_words(&self) -> usize {
        match self {
            Argument::ArrayRef(data) => data.len(),
            Argument::SingleVar(_) => 1,
            Argument::ConstVal(_) => 0,
        }
    }

    pub fn is_written_back(&self) -> bool {
        !matches!(self, Argument::ConstVal(_))
    }

    /// Heap bytes the host allocates to hold this argument.
    pub fn heap_bytes(&self) -> u64 {
        (self.result_words() * WORD_BYTES) as u64
    }

    /// Result payload of a write-back argument.
    pub fn result_values(&self) -> Option<Vec<Word>> {
        match self {
            Argument::ArrayRef(data) => Some(data.clone()),
            Argument::SingleVar(v) => Some(vec![*v]),
            Argument::ConstVal(_) => None,
        }
    }
}

/// A procedure image: index into every core's jump table plus the raw bytes
/// of its instruction range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureImage {
    pub index: Word,
    pub payload: Vec<u8>,
}

impl ProcedureImage {
    pub fn new(index: Word, payload: Vec<u8>) -> Result<Self, ClosureError> {
        if payload.len() < WORD_BYTES {
            return Err(ClosureError::ImageTooShort {
                index,
                len: payload.len(),
            });
        }
        Ok(ProcedureImage { index, payload })
    }

    /// Deterministic filler image of `length_bytes` bytes.
    pub fn synthetic(index: Word, length_bytes: usize) -> Result<Self, ClosureError> {
        let payload = (0..length_bytes)
            .map(|i| (index as usize).wrapping_mul(31).wrapping_add(i) as u8)
            .collect();
        Self::new(index, payload)
    }

    pub fn length_bytes(&self) -> usize {
        self.payload.len()
    }

    pub fn payload_words(&self) -> usize {
        self.payload.len().div_ceil(WORD_BYTES)
    }

    pub fn wire_words(&self) -> usize {
        2 + self.payload_words()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Closure {
    pub args: Vec<Argument>,
    pub procs: Vec<ProcedureImage>,
}

/// Word counts used by the process-creation cost: argument values `n`,
/// procedure descriptions `m` and results `o`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PayloadSizes {
    pub n: usize,
    pub m: usize,
    pub o: usize,
}

impl PayloadSizes {
    pub fn total(&self) -> usize {
        self.n + self.m + self.o
    }
}

impl Closure {
    pub fn new(args: Vec<Argument>, procs: Vec<ProcedureImage>) -> Result<Self, ClosureError> {
        let c = Closure { args, procs };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ClosureError> {
        if self.procs.is_empty() {
            return Err(ClosureError::NoProcedures);
        }
        for p in &self.procs {
            if p.payload.len() < WORD_BYTES {
                return Err(ClosureError::ImageTooShort {
                    index: p.index,
                    len: p.payload.len(),
                });
            }
        }
        Ok(())
    }

    /// Header words are attributed to `n` and `m`, so the encoded length is
    /// exactly `n + m + 2`.
    pub fn payload_sizes(&self) -> PayloadSizes {
        PayloadSizes {
            n: self.args.iter().map(Argument::wire_words).sum(),
            m: self.procs.iter().map(ProcedureImage::wire_words).sum(),
            o: self.args.iter().map(Argument::result_words).sum(),
        }
    }

    pub fn encoded_len(&self) -> usize {
        let s = self.payload_sizes();
        s.n + s.m + 2
    }

    /// Heap bytes the host allocates for the closure.
    pub fn heap_bytes(&self) -> u64 {
        let args: u64 = self.args.iter().map(Argument::heap_bytes).sum();
        let procs: u64 = self.procs.iter().map(|p| p.length_bytes() as u64).sum();
        args + procs
    }

    pub fn encode(&self) -> Result<Vec<Word>, ClosureError> {
        self.validate()?;
        let mut out = Vec::with_capacity(self.encoded_len());
        out.push(self.args.len() as Word);
        out.push(self.procs.len() as Word);
        for a in &self.args {
            out.push(a.tag());
            match a {
                Argument::ArrayRef(data) => {
                    out.push(data.len() as Word);
                    out.extend_from_slice(data);
                }
                Argument::SingleVar(v) | Argument::ConstVal(v) => out.push(*v),
            }
        }
        for p in &self.procs {
            out.push(p.index);
            out.push(p.payload.len() as Word);
            for chunk in p.payload.chunks(WORD_BYTES) {
                let mut bytes = [0u8; WORD_BYTES];
                bytes[..chunk.len()].copy_from_slice(chunk);
                out.push(Word::from_le_bytes(bytes));
            }
        }
        Ok(out)
    }

    pub fn decode(words: &[Word]) -> Result<Closure, ClosureError> {
        let mut r = Reader { words, pos: 0 };
        let n_args = r.next("argument count")? as usize;
        let n_procs = r.next("procedure count")? as usize;
        if n_procs == 0 {
            return Err(malformed(1, "procedure count is zero"));
        }
        // Each argument needs at least two words and each procedure three.
        if n_args.saturating_mul(2).saturating_add(n_procs.saturating_mul(3)) > words.len() - 2 {
            return Err(malformed(0, "counts exceed sequence length"));
        }
        let mut args = Vec::with_capacity(n_args);
        for _ in 0..n_args {
            let at = r.pos;
            let tag = r.next("argument tag")?;
            let arg = match tag {
                TAG_ARRAY_REF => {
                    let len = r.next("array length")? as usize;
                    Argument::ArrayRef(r.take(len, "array data")?.to_vec())
                }
                TAG_SINGLE_VAR => Argument::SingleVar(r.next("variable value")?),
                TAG_CONST_VAL => Argument::ConstVal(r.next("constant value")?),
                other => return Err(malformed(at, format!("unknown argument tag {other}"))),
            };
            args.push(arg);
        }
        let mut procs = Vec::with_capacity(n_procs);
        for _ in 0..n_procs {
            let index = r.next("procedure index")?;
            let len_at = r.pos;
            let len = r.next("procedure length")? as usize;
            if len < WORD_BYTES {
                return Err(malformed(
                    len_at,
                    format!("procedure length {len} below one instruction"),
                ));
            }
            let data_at = r.pos;
            let chunk = r.take(len.div_ceil(WORD_BYTES), "procedure payload")?;
            let mut payload: Vec<u8> = chunk.iter().flat_map(|w| w.to_le_bytes()).collect();
            if payload[len..].iter().any(|&b| b != 0) {
                return Err(malformed(data_at, "non-zero padding in procedure payload"));
            }
            payload.truncate(len);
            procs.push(ProcedureImage { index, payload });
        }
        if r.pos != words.len() {
            return Err(malformed(r.pos, "trailing words after closure"));
        }
        Ok(Closure { args, procs })
    }
}

struct Reader<'a> {
    words: &'a [Word],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn next(&mut self, what: &str) -> Result<Word, ClosureError> {
        let w = *self
            .words
            .get(self.pos)
            .ok_or_else(|| malformed(self.pos, format!("truncated before {what}")))?;
        self.pos += 1;
        Ok(w)
    }

    fn take(&mut self, count: usize, what: &str) -> Result<&'a [Word], ClosureError> {
        let end = self
            .pos
            .checked_add(count)
            .filter(|&e| e <= self.words.len())
            .ok_or_else(|| malformed(self.pos, format!("truncated {what}")))?;
        let s = &self.words[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Renders words as a hex dump, one `0x%08x` word per line.
pub fn to_hex_dump(words: &[Word]) -> String {
    let mut s = String::with_capacity(words.len() * 11);
    for w in words {
        let _ = writeln!(s, "0x{w:08x}");
    }
    s
}

/// Parses a hex dump; blank lines and `#` comments are ignored.
pub fn from_hex_dump(text: &str) -> Result<Vec<Word>, ClosureError> {
    text.lines()
        .map(str::trim)
        .enumerate()
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let digits = l.trim_start_matches("0x").trim_start_matches("0X");
            Word::from_str_radix(digits, 16).map_err(|e| malformed(i, format!("bad hex word {l:?}: {e}")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image8() -> ProcedureImage {
        ProcedureImage::new(3, vec![0xde, 0xad, 0xbe, 0xef, 0x01, 0x02, 0x03, 0x04]).unwrap()
    }

    #[test]
    fn six_word_layout() {
        let c = Closure::new(vec![], vec![image8()]).unwrap();
        let w = c.encode().unwrap();
        assert_eq!(w, vec![0, 1, 3, 8, 0xefbeadde, 0x04030201]);
        assert_eq!(Closure::decode(&w).unwrap(), c);
    }

    #[test]
    fn ten_word_layout_and_sizes() {
        let c = Closure::new(vec![Argument::ArrayRef(vec![5, 7])], vec![image8()]).unwrap();
        let w = c.encode().unwrap();
        assert_eq!(w, vec![1, 1, 2, 2, 5, 7, 3, 8, 0xefbeadde, 0x04030201]);
        let s = c.payload_sizes();
        assert_eq!((s.n, s.m, s.o), (4, 4, 2));
        assert_eq!(w.len(), s.n + s.m + 2);
    }

    #[test]
    fn const_only_closure_has_no_results() {
        let c = Closure::new(vec![Argument::ConstVal(1), Argument::ConstVal(2)], vec![image8()]).unwrap();
        assert_eq!(c.payload_sizes().o, 0);
    }

    #[test]
    fn encode_rejects_empty_procs() {
        let c = Closure {
            args: vec![],
            procs: vec![],
        };
        assert_eq!(c.encode(), Err(ClosureError::NoProcedures));
        assert!(ProcedureImage::new(1, vec![1, 2, 3]).is_err());
    }

    #[test]
    fn decode_rejects_malformed() {
        assert!(matches!(
            Closure::decode(&[]),
            Err(ClosureError::Malformed { .. })
        ));
        // unknown tag 9
        assert!(matches!(
            Closure::decode(&[1, 1, 9, 0, 3, 4, 0]),
            Err(ClosureError::Malformed { at: 2, .. })
        ));
        // |Q| = 0
        assert!(matches!(
            Closure::decode(&[0, 0]),
            Err(ClosureError::Malformed { .. })
        ));
        // truncated payload
        assert!(Closure::decode(&[0, 1, 3, 8, 0]).is_err());
        // trailing garbage
        assert!(Closure::decode(&[0, 1, 3, 4, 0, 0]).is_err());
        // non-zero pad byte
        assert!(Closure::decode(&[0, 1, 3, 5, 0, 0xff00]).is_err());
        // absurd counts do not allocate
        assert!(Closure::decode(&[u32::MAX, u32::MAX]).is_err());
    }

    #[test]
    fn odd_length_payload_is_padded() {
        let p = ProcedureImage::new(7, vec![1, 2, 3, 4, 5]).unwrap();
        let c = Closure::new(vec![], vec![p]).unwrap();
        let w = c.encode().unwrap();
        assert_eq!(w, vec![0, 1, 7, 5, 0x04030201, 0x00000005]);
        assert_eq!(Closure::decode(&w).unwrap(), c);
    }

    #[test]
    fn hex_dump_round_trip() {
        let w = vec![0, 1, 0xdeadbeef];
        let text = to_hex_dump(&w);
        assert_eq!(text, "0x00000000\n0x00000001\n0xdeadbeef\n");
        assert_eq!(from_hex_dump(&text).unwrap(), w);
        assert!(from_hex_dump("0xzz\n").is_err());
    }
}
