//! Binary dataset file. All integers little-endian.
//!
//! ```text
//! magic      8 bytes  "MSGCL-DS"
//! version    u32
//! M, N       u32, u32
//! max_len    u32
//! vocab      N x (u32 byte length, UTF-8 bytes)
//! users      M x (u32 byte length, UTF-8 bytes)
//! rows       M x max_len x u32
//! lengths    M x u32
//! splits     M x (u32 valid, u32 test)
//! has_chain  u8
//! chain      if has_chain: N x f64 initial, N x N x f64 transition
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::sequences::{SequenceDataset, Split};
use super::synth::MarkovChain;
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"MSGCL-DS";
pub const DATASET_VERSION: u32 = 1;

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_u32::<LE>(s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let n = r.read_u32::<LE>().map_err(short)? as usize;
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(short)?;
    String::from_utf8(buf).map_err(|_| Error::Format("string is not UTF-8".into()))
}

fn short(e: std::io::Error) -> Error {
    Error::Format(format!("truncated dataset file: {e}"))
}

pub(crate) fn encode(ds: &SequenceDataset, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LE>(DATASET_VERSION)?;
    w.write_u32::<LE>(ds.num_users() as u32)?;
    w.write_u32::<LE>(ds.num_items() as u32)?;
    w.write_u32::<LE>(ds.max_len as u32)?;
    for s in &ds.item_vocab {
        write_str(w, s)?;
    }
    for s in &ds.users {
        write_str(w, s)?;
    }
    for row in &ds.sequences {
        for &v in row {
            w.write_u32::<LE>(v)?;
        }
    }
    for &l in &ds.lengths {
        w.write_u32::<LE>(l as u32)?;
    }
    for s in &ds.splits {
        w.write_u32::<LE>(s.valid_target)?;
        w.write_u32::<LE>(s.test_target)?;
    }
    match &ds.markov {
        None => w.write_u8(0)?,
        Some(c) => {
            w.write_u8(1)?;
            for &p in c.initial.iter().chain(c.transition.iter().flatten()) {
                w.write_f64::<LE>(p)?;
            }
        }
    }
    Ok(())
}

pub(crate) fn decode(r: &mut impl Read) -> Result<SequenceDataset> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(short)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.read_u32::<LE>().map_err(short)?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    let m = r.read_u32::<LE>().map_err(short)? as usize;
    let n = r.read_u32::<LE>().map_err(short)? as usize;
    let max_len = r.read_u32::<LE>().map_err(short)? as usize;
    let item_vocab = (0..n).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
    let users = (0..m).map(|_| read_str(r)).collect::<Result<Vec<_>>>()?;
    let mut sequences = Vec::with_capacity(m);
    for _ in 0..m {
        let mut row = vec![0u32; max_len];
        r.read_u32_into::<LE>(&mut row).map_err(short)?;
        sequences.push(row);
    }
    let mut lengths = Vec::with_capacity(m);
    for _ in 0..m {
        lengths.push(r.read_u32::<LE>().map_err(short)? as usize);
    }
    let mut splits = Vec::with_capacity(m);
    for _ in 0..m {
        let valid_target = r.read_u32::<LE>().map_err(short)?;
        let test_target = r.read_u32::<LE>().map_err(short)?;
        splits.push(Split {
            valid_target,
            test_target,
        });
    }
    let markov = match r.read_u8().map_err(short)? {
        0 => None,
        1 => {
            let mut initial = vec![0.0; n];
            r.read_f64_into::<LE>(&mut initial).map_err(short)?;
            let mut transition = Vec::with_capacity(n);
            for _ in 0..n {
                let mut row = vec![0.0; n];
                r.read_f64_into::<LE>(&mut row).map_err(short)?;
                transition.push(row);
            }
            Some(MarkovChain { initial, transition })
        }
        b => return Err(Error::Format(format!("bad chain flag {b}"))),
    };
    let ds = SequenceDataset {
        max_len,
        users,
        item_vocab,
        sequences,
        lengths,
        splits,
        markov,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &SequenceDataset, path: &Path) -> Result<()> {
    ds.validate()?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    encode(ds, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<SequenceDataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::data::{build_sequences, synth_markov_dataset, InteractionRecord};

    #[test]
    fn header_layout() {
        let ds = synth_markov_dataset(3, 6, 5, 1.0, 1).unwrap();
        let mut buf = Vec::new();
        encode(&ds, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"MSGCL-DS");
        assert_eq!(buf[8..12], 1u32.to_le_bytes());
        assert_eq!(buf[12..16], 3u32.to_le_bytes());
        assert_eq!(buf[16..20], 6u32.to_le_bytes());
        assert_eq!(buf[20..24], 3u32.to_le_bytes());
    }

    #[test]
    fn file_round_trip_with_chain() {
        let ds = synth_markov_dataset(7, 9, 10, 2.5, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        write_dataset(&ds, &p).unwrap();
        assert_eq!(read_dataset(&p).unwrap(), ds);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let ds = synth_markov_dataset(3, 6, 5, 1.0, 1).unwrap();
        let mut buf = Vec::new();
        encode(&ds, &mut buf).unwrap();
        assert!(decode(&mut &buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&mut &bad[..]), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(decode(&mut &bad[..]).is_err());
    }

    fn records() -> impl Strategy<Value = Vec<InteractionRecord>> {
        prop::collection::vec((0u8..6, 0u8..12, 0i64..50), 3..80).prop_map(|rows| {
            let mut r: Vec<InteractionRecord> = rows
                .into_iter()
                .map(|(u, i, t)| InteractionRecord {
                    user_id: format!("user{u}"),
                    item_id: format!("it{i}"),
                    timestamp: t,
                    rating: None,
                })
                .collect();
            r.sort_by(|a, b| a.user_id.cmp(&b.user_id).then(a.timestamp.cmp(&b.timestamp)));
            r
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn build_then_serialize_round_trips(recs in records(), max_len in 3usize..8) {
            if let Ok((ds, _)) = build_sequences(&recs, max_len) {
                let mut buf = Vec::new();
                encode(&ds, &mut buf).unwrap();
                prop_assert_eq!(decode(&mut &buf[..]).unwrap(), ds.clone());
                for u in 0..ds.num_users() {
                    let s = ds.splits[u];
                    // left padding keeps the most recent training item last
                    prop_assert!(ds.sequences[u][max_len - 1] != 0 || ds.lengths[u] == 0);
                    prop_assert!(s.valid_target >= 1 && s.test_target >= 1);
                }
            }
        }
    }
}
