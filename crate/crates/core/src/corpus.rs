//! Prompt ingestion, byte-level tokenization, and dataset baseline
//! residual statistics.
//!
//! Records arrive as JSONL. Each line carries `id`, either `tokens`
//! (pre-tokenized ids, the primary path) or `text` (byte-tokenized as a
//! fallback), an optional half-open `answer_start`/`answer_end` span,
//! and a `dataset` tag.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::container::{read_container, write_container};
use crate::model::{forward, ModelConfig, ModelWeights};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Begin-of-sequence marker for byte-level tokenization.
pub const BYTE_BOS: u32 = 0;
/// End-of-sequence marker for byte-level tokenization.
pub const BYTE_EOS: u32 = 1;
/// Byte values are shifted past the two markers.
pub const BYTE_OFFSET: u32 = 2;
/// Smallest vocabulary that can hold byte-tokenized text.
pub const BYTE_VOCAB_MIN: usize = 258;

/// One prompt: token ids, an optional answer span (half-open), and the
/// dataset it came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptRecord {
    pub id: String,
    pub tokens: Vec<u32>,
    pub answer: Option<(usize, usize)>,
    pub dataset: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer_start: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    answer_end: Option<usize>,
    #[serde(default)]
    dataset: Option<String>,
}

/// Encodes text as `[BOS, byte + 2, ..., EOS]`.
pub fn byte_tokenize(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 2);
    out.push(BYTE_BOS);
    out.extend(text.bytes().map(|b| b as u32 + BYTE_OFFSET));
    out.push(BYTE_EOS);
    out
}

/// Inverse of [`byte_tokenize`]; marker tokens are skipped.
pub fn byte_detokenize(tokens: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(tokens.len());
    for &t in tokens {
        if t == BYTE_BOS || t == BYTE_EOS {
            continue;
        }
        let b = t
            .checked_sub(BYTE_OFFSET)
            .filter(|&b| b < 256)
            .ok_or_else(|| Error::input(format!("token id {t} is not a byte token")))?;
        bytes.push(b as u8);
    }
    String::from_utf8(bytes).map_err(|e| Error::input(format!("invalid UTF-8: {e}")))
}

/// Loads newline-delimited records. Malformed lines and out-of-range
/// spans are rejected with their line number. An empty file yields an
/// empty corpus; downstream operations then fail with their own input
/// errors.
pub fn load_jsonl(path: &Path) -> Result<Vec<PromptRecord>> {
    let content = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading corpus {}", path.display()), e))?;
    let mut records = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(line)
            .map_err(|e| Error::format(format!("line {line_no}: {e}")))?;
        let tokens = match (raw.tokens, raw.text) {
            (Some(t), None) => t,
            (None, Some(text)) => byte_tokenize(&text),
            (Some(_), Some(_)) => {
                return Err(Error::format(format!(
                    "line {line_no}: record has both tokens and text"
                )))
            }
            (None, None) => {
                return Err(Error::format(format!(
                    "line {line_no}: record has neither tokens nor text"
                )))
            }
        };
        let answer = match (raw.answer_start, raw.answer_end) {
            (Some(s), Some(e)) => {
                if s >= e || e > tokens.len() {
                    return Err(Error::format(format!(
                        "line {line_no}: answer span [{s}, {e}) out of range for {} tokens",
                        tokens.len()
                    )));
                }
                Some((s, e))
            }
            (None, None) => None,
            _ => {
                return Err(Error::format(format!(
                    "line {line_no}: answer_start and answer_end must appear together"
                )))
            }
        };
        records.push(PromptRecord {
            id: raw.id,
            tokens,
            answer,
            dataset: raw.dataset.unwrap_or_else(|| "default".to_string()),
        });
    }
    Ok(records)
}

/// Writes records back out as JSONL; `load_jsonl(save_jsonl(r)) == r`.
pub fn save_jsonl(records: &[PromptRecord], path: &Path) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let raw = RawRecord {
            id: r.id.clone(),
            tokens: Some(r.tokens.clone()),
            text: None,
            answer_start: r.answer.map(|(s, _)| s),
            answer_end: r.answer.map(|(_, e)| e),
            dataset: Some(r.dataset.clone()),
        };
        out.push_str(&serde_json::to_string(&raw)?);
        out.push('\n');
    }
    std::fs::write(path, out)
        .map_err(|e| Error::io(format!("writing corpus {}", path.display()), e))
}

/// Per-layer mean residual vectors over a dataset.
///
/// `means[i]` is the average of residual state `h_{i+1}` (the state
/// produced by layer `i`) over all sampled (prompt, position) pairs.
#[derive(Debug, Clone)]
pub struct BaselineStats {
    pub means: Vec<Tensor>,
    pub count: u64,
    pub dataset: String,
}

/// FNV-1a over a record id; used to derive per-record rng streams that
/// do not depend on corpus ordering.
pub fn stable_id_hash(s: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Averages residual states over the corpus.
///
/// Prompts are processed in record-id order with a fixed reduction
/// order, so the result is independent of the corpus ordering. When a
/// prompt exceeds `max_positions_per_prompt`, positions are subsampled
/// with an rng derived from `seed` and the record id.
pub fn compute_baseline(
    weights: &ModelWeights,
    corpus: &[PromptRecord],
    max_positions_per_prompt: usize,
    seed: u64,
) -> Result<BaselineStats> {
    if corpus.is_empty() {
        return Err(Error::input("baseline over an empty corpus".to_string()));
    }
    if max_positions_per_prompt == 0 {
        return Err(Error::input(
            "max_positions_per_prompt must be at least 1".to_string(),
        ));
    }
    let n_layers = weights.config.n_layers;
    let d = weights.config.d_model;

    let mut order: Vec<&PromptRecord> = corpus.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));

    let mut sums = vec![vec![0.0f64; d]; n_layers];
    let mut count = 0u64;
    let mut datasets = BTreeSet::new();
    for record in order {
        datasets.insert(record.dataset.clone());
        let out = forward(weights, &record.tokens, None, false)?;
        let n = record.tokens.len();
        let positions: Vec<usize> = if n <= max_positions_per_prompt {
            (0..n).collect()
        } else {
            use rand::SeedableRng;
            let mut rng =
                rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ stable_id_hash(&record.id));
            let mut picked =
                rand::seq::index::sample(&mut rng, n, max_positions_per_prompt).into_vec();
            picked.sort_unstable();
            picked
        };
        for l in 0..n_layers {
            let state = &out.trace.h[l + 1];
            for &t in &positions {
                for (acc, &v) in sums[l].iter_mut().zip(state.row(t)) {
                    *acc += v as f64;
                }
            }
        }
        count += positions.len() as u64;
    }

    let means = sums
        .into_iter()
        .map(|s| {
            Tensor::new(
                vec![d],
                s.into_iter().map(|v| (v / count as f64) as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BaselineStats {
        means,
        count,
        dataset: datasets.into_iter().collect::<Vec<_>>().join("+"),
    })
}

/// Persists baseline statistics in the tensor container format under
/// names `baseline.layer.{l}` for layers `1..=n_layers`.
pub fn save_baseline(stats: &BaselineStats, config: &ModelConfig, path: &Path) -> Result<()> {
    let mut tensors = std::collections::BTreeMap::new();
    for (i, mean) in stats.means.iter().enumerate() {
        tensors.insert(format!("baseline.layer.{}", i + 1), mean.clone());
    }
    let mut extra = std::collections::BTreeMap::new();
    extra.insert(
        "__baseline__".to_string(),
        serde_json::json!({"count": stats.count, "dataset": stats.dataset}),
    );
    write_container(path, config, &tensors, &extra)
}

pub fn load_baseline(path: &Path) -> Result<(BaselineStats, ModelConfig)> {
    let container = read_container(path)?;
    let config = container.config.clone();
    let mut means = Vec::with_capacity(config.n_layers);
    for l in 1..=config.n_layers {
        let name = format!("baseline.layer.{l}");
        let t = container
            .tensors
            .get(&name)
            .ok_or_else(|| Error::format(format!("missing tensor {name}")))?;
        if t.shape() != [config.d_model] {
            return Err(Error::format(format!(
                "shape mismatch for tensor {name}: {:?} vs [{}]",
                t.shape(),
                config.d_model
            )));
        }
        means.push(t.clone());
    }
    let meta = container.extra.get("__baseline__").cloned().unwrap_or(Value::Null);
    let count = meta.get("count").and_then(Value::as_u64).unwrap_or(0);
    let dataset = meta
        .get("dataset")
        .and_then(Value::as_str)
        .unwrap_or("")
        .to_string();
    Ok((BaselineStats { means, count, dataset }, config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_random;
    use proptest::prelude::*;

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        use std::io::Write;
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn loads_valid_record() {
        let f = write_lines(&[
            r#"{"id":"a","tokens":[1,2,3],"answer_start":2,"answer_end":3,"dataset":"demo"}"#,
        ]);
        let records = load_jsonl(f.path()).unwrap();
        assert_eq!(records.len(), 1);
        assert_eq!(records[0].tokens, vec![1, 2, 3]);
        assert_eq!(records[0].answer, Some((2, 3)));
        assert_eq!(records[0].dataset, "demo");
    }

    #[test]
    fn rejects_out_of_range_span_with_line_number() {
        let f = write_lines(&[
            r#"{"id":"a","tokens":[1,2,3],"dataset":"d"}"#,
            r#"{"id":"b","tokens":[1,2,3],"answer_start":1,"answer_end":4,"dataset":"d"}"#,
        ]);
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn rejects_malformed_json_with_line_number() {
        let f = write_lines(&[r#"{"id":"a","tokens":[1]}"#, "{not json"]);
        let err = load_jsonl(f.path()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "got: {err}");
    }

    #[test]
    fn empty_file_gives_empty_corpus() {
        let f = write_lines(&[]);
        assert!(load_jsonl(f.path()).unwrap().is_empty());
    }

    #[test]
    fn text_records_are_byte_tokenized() {
        let f = write_lines(&[r#"{"id":"t","text":"ab","dataset":"d"}"#]);
        let records = load_jsonl(f.path()).unwrap();
        assert_eq!(records[0].tokens, vec![BYTE_BOS, 99, 100, BYTE_EOS]);
    }

    #[test]
    fn byte_tokenize_examples() {
        assert_eq!(byte_tokenize("ab"), vec![0, 99, 100, 1]);
        assert_eq!(byte_tokenize(""), vec![0, 1]);
    }

    #[test]
    fn save_load_round_trip_is_identity() {
        let records = vec![
            PromptRecord {
                id: "x".to_string(),
                tokens: vec![4, 5, 6, 7],
                answer: Some((1, 3)),
                dataset: "demo".to_string(),
            },
            PromptRecord {
                id: "y".to_string(),
                tokens: vec![9],
                answer: None,
                dataset: "other".to_string(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        save_jsonl(&records, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), records);
    }

    fn baseline_test_weights() -> ModelWeights {
        let cfg = crate::model::ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_q_heads: 2,
            n_kv_heads: 1,
            d_ff: 12,
            vocab_size: 16,
            rope_base: 10000.0,
            eps: 1e-6,
        };
        init_random(&cfg, 3).unwrap()
    }

    #[test]
    fn single_sample_baseline_equals_that_residual() {
        let w = baseline_test_weights();
        let corpus = vec![PromptRecord {
            id: "only".to_string(),
            tokens: vec![5],
            answer: None,
            dataset: "d".to_string(),
        }];
        let stats = compute_baseline(&w, &corpus, 4, 0).unwrap();
        let out = forward(&w, &[5], None, false).unwrap();
        assert_eq!(stats.count, 1);
        for l in 0..2 {
            assert_eq!(stats.means[l].data(), out.trace.h[l + 1].row(0));
        }
    }

    #[test]
    fn opposite_residuals_average_to_zero() {
        // Zero out every layer so h_l == h_0, and give two tokens opposite
        // embeddings; their baseline must cancel.
        let mut w = baseline_test_weights();
        for l in 0..w.config.n_layers {
            w.layers[l].wo = Tensor::zeros(w.layers[l].wo.shape().to_vec());
            w.layers[l].w_down = Tensor::zeros(w.layers[l].w_down.shape().to_vec());
        }
        let mut embed = w.embed.data().to_vec();
        let d = w.config.d_model;
        for j in 0..d {
            embed[2 * d + j] = 0.75;
            embed[3 * d + j] = -0.75;
        }
        w.embed = Tensor::new(w.embed.shape().to_vec(), embed).unwrap();

        let corpus = vec![
            PromptRecord {
                id: "p".to_string(),
                tokens: vec![2],
                answer: None,
                dataset: "d".to_string(),
            },
            PromptRecord {
                id: "q".to_string(),
                tokens: vec![3],
                answer: None,
                dataset: "d".to_string(),
            },
        ];
        let stats = compute_baseline(&w, &corpus, 4, 0).unwrap();
        for l in 0..2 {
            assert!(stats.means[l].data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn baseline_matches_independent_f64_accumulation() {
        let w = baseline_test_weights();
        let corpus: Vec<PromptRecord> = (0..5)
            .map(|i| PromptRecord {
                id: format!("p{i}"),
                tokens: vec![1 + i, 2 + i, 3 + i, 4 + i].iter().map(|&v| v as u32).collect(),
                answer: None,
                dataset: "d".to_string(),
            })
            .collect();
        let stats = compute_baseline(&w, &corpus, 64, 0).unwrap();

        // Brute force: re-run every forward, sum every position in f64.
        let d = w.config.d_model;
        let mut sums = vec![vec![0.0f64; d]; 2];
        let mut n = 0u64;
        for r in &corpus {
            let out = forward(&w, &r.tokens, None, false).unwrap();
            for l in 0..2 {
                for t in 0..r.tokens.len() {
                    for j in 0..d {
                        sums[l][j] += out.trace.h[l + 1].row(t)[j] as f64;
                    }
                }
            }
            n += r.tokens.len() as u64;
        }
        assert_eq!(stats.count, n);
        for l in 0..2 {
            for j in 0..d {
                let want = sums[l][j] / n as f64;
                let got = stats.means[l].data()[j] as f64;
                assert!((got - want).abs() <= 1e-5, "layer {l} dim {j}");
            }
        }
    }

    #[test]
    fn baseline_is_permutation_invariant() {
        let w = baseline_test_weights();
        let mk = |i: u32| PromptRecord {
            id: format!("p{i}"),
            tokens: vec![i, i + 1, i + 2],
            answer: None,
            dataset: "d".to_string(),
        };
        let a = compute_baseline(&w, &[mk(1), mk(4), mk(7)], 64, 9).unwrap();
        let b = compute_baseline(&w, &[mk(7), mk(1), mk(4)], 64, 9).unwrap();
        for l in 0..2 {
            assert_eq!(a.means[l], b.means[l]);
        }
    }

    #[test]
    fn baseline_subsampling_is_deterministic() {
        let w = baseline_test_weights();
        let long = PromptRecord {
            id: "long".to_string(),
            tokens: (0..12).map(|i| i % 16).collect(),
            answer: None,
            dataset: "d".to_string(),
        };
        let a = compute_baseline(&w, &[long.clone()], 5, 13).unwrap();
        let b = compute_baseline(&w, &[long], 5, 13).unwrap();
        assert_eq!(a.count, 5);
        for l in 0..2 {
            assert_eq!(a.means[l], b.means[l]);
        }
    }

    #[test]
    fn baseline_container_round_trip() {
        let w = baseline_test_weights();
        let corpus = vec![PromptRecord {
            id: "p".to_string(),
            tokens: vec![5, 6, 7],
            answer: None,
            dataset: "demo".to_string(),
        }];
        let stats = compute_baseline(&w, &corpus, 64, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("baseline.dsw");
        save_baseline(&stats, &w.config, &path).unwrap();
        let (loaded, cfg) = load_baseline(&path).unwrap();
        assert_eq!(cfg, w.config);
        assert_eq!(loaded.count, stats.count);
        assert_eq!(loaded.dataset, "demo");
        for (a, b) in loaded.means.iter().zip(&stats.means) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn empty_corpus_is_an_input_error() {
        let w = baseline_test_weights();
        assert!(matches!(
            compute_baseline(&w, &[], 4, 0),
            Err(Error::Input(_))
        ));
    }

    proptest! {
        #[test]
        fn byte_tokenize_round_trips(s in "\\PC{0,60}") {
            let tokens = byte_tokenize(&s);
            prop_assert_eq!(byte_detokenize(&tokens).unwrap(), s);
        }
    }
}
