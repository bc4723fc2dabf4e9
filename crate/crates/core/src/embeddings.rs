//! Vocabularies, pretrained word-vector tables and row lookup.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Rng, Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Lowercases and splits on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Token/index bijection with four reserved leading entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, index }
    }

    /// Reserved entries followed by `tokens` in order; repeats are ignored.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocabulary::new();
        for t in tokens {
            v.insert(t);
        }
        v
    }

    pub fn insert(&mut self, token: impl Into<String>) -> usize {
        let token = token.into();
        if let Some(&i) = self.index.get(&token) {
            return i;
        }
        self.tokens.push(token.clone());
        self.index.insert(token, self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Index of `token`, or [`UNK`].
    pub fn encode(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK)
    }

    pub fn encode_all<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.encode(t.as_ref())).collect()
    }

    pub fn decode(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Non-reserved tokens in index order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }
}

impl From<Vec<String>> for Vocabulary {
    fn from(tokens: Vec<String>) -> Self {
        let skip = if tokens
            .iter()
            .take(4)
            .eq(RESERVED.iter().map(|s| s.to_string()).collect::<Vec<_>>().iter())
        {
            4
        } else {
            0
        };
        Vocabulary::from_tokens(tokens.into_iter().skip(skip))
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

/// One row per vocabulary entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub dimension: usize,
    pub matrix: Tensor,
    pub trainable: bool,
}

impl EmbeddingTable {
    /// Rows drawn from `±0.05` uniform with PAD/UNK zeroed.
    pub fn random(vocab: &Vocabulary, dimension: usize, seed: u64) -> Self {
        let rng = Rng::new(seed).fork("embedding-rows");
        let mut values = Vec::with_capacity(vocab.len() * dimension);
        for i in 0..vocab.len() {
            if i == PAD || i == UNK {
                values.extend(std::iter::repeat_n(0.0, dimension));
            } else {
                let mut row = rng.fork_index("row", i as u64);
                values.extend((0..dimension).map(|_| row.uniform_range(-0.05, 0.05)));
            }
        }
        EmbeddingTable {
            dimension,
            matrix: Tensor::matrix(vocab.len(), dimension, values).expect("sized"),
            trainable: false,
        }
    }

    /// The matrix as a model parameter; frozen unless `trainable`.
    pub fn to_param(&self) -> Tensor {
        self.matrix.clone().with_requires_grad(self.trainable)
    }

    pub fn row(&self, index: usize) -> Result<&[f64]> {
        if index >= self.matrix.shape()[0] {
            return Err(Error::Bounds {
                index,
                len: self.matrix.shape()[0],
            });
        }
        Ok(self.matrix.row_slice(index))
    }

    /// Row gather into `[n, d]`.
    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let table = tape.leaf(&self.matrix);
        let rows = tape.embedding_lookup(table, indices)?;
        Ok(tape.tensor(rows))
    }
}

/// Differentiable gather from a table bound on `tape`.
pub fn lookup(tape: &mut Tape, table: Var, indices: &[usize]) -> Result<Var> {
    tape.embedding_lookup(table, indices)
}

/// Reads a whitespace-separated `token v1 … vd` file into a table for `vocab`.
///
/// Tokens missing from the file keep their seeded random row; PAD and UNK
/// rows stay zero even if the file lists them.
pub fn load_embeddings(path: &Path, vocab: &Vocabulary, dimension: usize, seed: u64) -> Result<EmbeddingTable> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(
        BufReader::new(file),
        &path.display().to_string(),
        vocab,
        dimension,
        seed,
    )
}

pub fn parse_embeddings<R: BufRead>(
    reader: R,
    origin: &str,
    vocab: &Vocabulary,
    dimension: usize,
    seed: u64,
) -> Result<EmbeddingTable> {
    let mut table = EmbeddingTable::random(vocab, dimension, seed);
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(origin, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| {
                f.parse::<f64>()
                    .map_err(|_| Error::format(origin, lineno + 1, format!("invalid number '{f}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.len() != dimension {
            return Err(Error::format(
                origin,
                lineno + 1,
                format!("expected {dimension} values, found {}", values.len()),
            ));
        }
        if let Some(i) = vocab.get(token) {
            if i != PAD && i != UNK {
                table.matrix.values_mut()[i * dimension..(i + 1) * dimension].copy_from_slice(&values);
            }
        }
    }
    Ok(table)
}

/// Writes `rows` in the same text format [`load_embeddings`] reads.
pub fn write_embeddings<W: Write>(mut out: W, rows: &[(String, Vec<f64>)]) -> std::io::Result<()> {
    for (token, values) in rows {
        write!(out, "{token}")?;
        for v in values {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::grad_check;

    #[test]
    fn copies_file_rows() {
        let vocab = Vocabulary::from_tokens(["cat"]);
        let t = parse_embeddings("cat 1.0 0.0\n".as_bytes(), "mem", &vocab, 2, 0).unwrap();
        assert_eq!(t.row(vocab.encode("cat")).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn missing_tokens_are_seeded_random() {
        let vocab = Vocabulary::from_tokens(["cat", "dog"]);
        let a = parse_embeddings("cat 1.0 0.0\n".as_bytes(), "mem", &vocab, 2, 5).unwrap();
        let b = parse_embeddings("cat 1.0 0.0\n".as_bytes(), "mem", &vocab, 2, 5).unwrap();
        let dog = a.row(vocab.encode("dog")).unwrap();
        assert!(dog.iter().all(|v| v.abs() <= 0.05));
        assert!(dog.iter().any(|v| *v != 0.0));
        assert_eq!(a, b);
    }

    #[test]
    fn empty_file_gives_random_table() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let t = parse_embeddings("".as_bytes(), "mem", &vocab, 3, 1).unwrap();
        assert_eq!(t.matrix.shape(), &[6, 3]);
        assert_eq!(t.row(PAD).unwrap(), &[0.0; 3]);
        assert_eq!(t.row(UNK).unwrap(), &[0.0; 3]);
    }

    #[test]
    fn inconsistent_dimension_reports_line() {
        let vocab = Vocabulary::from_tokens(["a", "b"]);
        let err = parse_embeddings("a 1 2\nb 1 2 3\n".as_bytes(), "emb.txt", &vocab, 2, 1).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn unreadable_file_is_io_error() {
        let vocab = Vocabulary::new();
        let err = load_embeddings(Path::new("/nonexistent/emb.txt"), &vocab, 2, 0).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn pad_lookup_is_zero_and_repeats_match() {
        let vocab = Vocabulary::from_tokens(["x"]);
        let t = EmbeddingTable::random(&vocab, 4, 3);
        let rows = t.lookup(&[PAD, 4, 4]).unwrap();
        assert_eq!(&rows.values()[..4], &[0.0; 4]);
        assert_eq!(&rows.values()[4..8], &rows.values()[8..12]);
        assert!(t.lookup(&[5]).is_err());
    }

    #[test]
    fn lookup_gradient_is_one_hot_row() {
        let vocab = Vocabulary::from_tokens(["x", "y"]);
        let mut table = EmbeddingTable::random(&vocab, 3, 3);
        table.trainable = true;
        let mut tape = Tape::new();
        let m = tape.leaf(&table.to_param());
        let rows = lookup(&mut tape, m, &[5]).unwrap();
        let s = tape.sum(rows);
        let g = tape.backward(s).unwrap();
        let grad = g.get(m).unwrap();
        for (i, v) in grad.iter().enumerate() {
            let expected = if (15..18).contains(&i) { 1.0 } else { 0.0 };
            assert_eq!(*v, expected);
        }
        let err = grad_check(
            |t, m| {
                let r = t.embedding_lookup(m, &[5, 4, 5])?;
                let sq = t.mul(r, r)?;
                Ok(t.sum(sq))
            },
            &table.matrix,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn frozen_table_gets_no_gradient() {
        let vocab = Vocabulary::from_tokens(["x"]);
        let table = EmbeddingTable::random(&vocab, 2, 0);
        let mut tape = Tape::new();
        let m = tape.leaf(&table.to_param());
        let rows = lookup(&mut tape, m, &[4]).unwrap();
        let s = tape.sum(rows);
        assert!(tape.backward(s).unwrap().get(m).is_none() || !tape.requires_grad(m));
    }

    #[test]
    fn vocab_serde_round_trip() {
        let v = Vocabulary::from_tokens(["b", "a"]);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        for i in 0..v.len() {
            assert_eq!(back.encode(v.decode(i).unwrap()), i);
        }
    }

    #[test]
    fn tokenize_lowercases() {
        assert_eq!(tokenize("  The Cat\tsat "), vec!["the", "cat", "sat"]);
    }
}
