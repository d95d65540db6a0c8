//! Single-file checkpoints.
//!
//! Layout:
//!
//! ```text
//! dropnet-checkpoint v1
//! settings <n>
//! <key> = <value>            (n lines)
//! vocab <n>
//! <token>                    (n lines)
//! tensors <n>
//! <name> <kind> <d1>x<d2>..  (n lines)
//! end
//! <raw little-endian f64 values of every tensor, in manifest order>
//! ```

use std::io::{BufRead, Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &str = "dropnet-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub settings: Vec<(String, String)>,
    pub vocab: Vec<String>,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut head = format!("{MAGIC} v{VERSION}\nsettings {}\n", self.settings.len());
        for (k, v) in &self.settings {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Contract(format!("unencodable setting {k:?}")));
            }
            head.push_str(&format!("{k} = {v}\n"));
        }
        head.push_str(&format!("vocab {}\n", self.vocab.len()));
        for t in &self.vocab {
            if t.is_empty() || t.contains(char::is_whitespace) {
                return Err(Error::Contract(format!("unencodable token {t:?}")));
            }
            head.push_str(t);
            head.push('\n');
        }
        head.push_str(&format!("tensors {}\n", self.params.len()));
        for p in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            head.push_str(&format!(
                "{} {} {}\n",
                p.name,
                p.kind.as_str(),
                dims.join("x")
            ));
        }
        head.push_str("end\n");
        let mut bytes = head.into_bytes();
        for p in self.params.iter() {
            for v in p.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut line_no = 0;
        let mut next_line = |cur: &mut Cursor<&[u8]>| -> Result<String> {
            let mut s = String::new();
            line_no += 1;
            let n = cur
                .read_line(&mut s)
                .map_err(|e| Error::Version(format!("unreadable header: {e}")))?;
            if n == 0 || !s.ends_with('\n') {
                return Err(Error::Version(format!(
                    "header truncated at line {line_no}"
                )));
            }
            s.pop();
            Ok(s)
        };
        let first = next_line(&mut cur)?;
        let expected = format!("{MAGIC} v{VERSION}");
        if first != expected {
            return Err(Error::Version(format!(
                "expected {expected:?}, found {:?}",
                first.chars().take(40).collect::<String>()
            )));
        }
        let count = |line: &str, section: &str| -> Result<usize> {
            line.strip_prefix(section)
                .and_then(|r| r.strip_prefix(' '))
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Version(format!("malformed {section} line {line:?}")))
        };

        let n = count(&next_line(&mut cur)?, "settings")?;
        let mut settings = Vec::with_capacity(n);
        for _ in 0..n {
            let l = next_line(&mut cur)?;
            let (k, v) = l
                .split_once(" = ")
                .ok_or_else(|| Error::Version(format!("malformed setting {l:?}")))?;
            settings.push((k.to_string(), v.to_string()));
        }
        let n = count(&next_line(&mut cur)?, "vocab")?;
        let mut vocab = Vec::with_capacity(n);
        for _ in 0..n {
            vocab.push(next_line(&mut cur)?);
        }
        let n = count(&next_line(&mut cur)?, "tensors")?;
        let mut manifest = Vec::with_capacity(n);
        for _ in 0..n {
            let l = next_line(&mut cur)?;
            let parts: Vec<&str> = l.split(' ').collect();
            let bad = || Error::Version(format!("malformed tensor entry {l:?}"));
            if parts.len() != 3 {
                return Err(bad());
            }
            let kind = ParamKind::parse(parts[1]).ok_or_else(bad)?;
            let shape = parts[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| bad())?;
            manifest.push((parts[0].to_string(), kind, shape));
        }
        if next_line(&mut cur)? != "end" {
            return Err(Error::Version("missing end of header".into()));
        }

        let mut params = ParamStore::new();
        for (name, kind, shape) in manifest {
            let len: usize = shape.iter().product();
            let mut raw = vec![0u8; len * 8];
            cur.read_exact(&mut raw)
                .map_err(|_| Error::Version(format!("tensor {name} truncated")))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            params.add(name, kind, Tensor::new(&shape, data)?);
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Version("trailing bytes after tensor data".into()));
        }
        Ok(Checkpoint {
            settings,
            vocab,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
