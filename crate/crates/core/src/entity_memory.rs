//! The entity memory layer: span pseudo embeddings, top-k retrieval over the
//! entity table `E` and the sparse write-back at mention starts.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::validate_spans;
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore, INIT_STD};
use crate::numerics::{Selection, Tape, Tensor, Var};

const MAGIC: &[u8; 4] = b"EAEM";

/// How the readout over `E` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Retrieval {
    /// Softmax over the `k` highest-scoring rows.
    TopK(usize),
    /// Softmax over every row, built from plain matmul and softmax ops.
    Dense,
}

impl Retrieval {
    /// Number of rows read per query against a table of `n` rows.
    pub fn width(self, n: usize) -> usize {
        match self {
            Retrieval::TopK(k) => k,
            Retrieval::Dense => n,
        }
    }
}

/// Adds the shared entity table `E: [N, d_ent]` to `store`.
pub fn entity_table<R: Rng + ?Sized>(store: &mut ParamStore, n: usize, d_ent: usize, rng: &mut R) -> ParamId {
    store.add("entities", Tensor::randn(&[n, d_ent], INIT_STD, rng))
}

/// `W_f: [d_ent, 2·d_emb]` reads span endpoints, `W_b: [d_emb, d_ent]` writes back.
#[derive(Debug, Clone, Copy)]
pub struct EntityMemory {
    pub table: ParamId,
    pub proj_in: Linear,
    pub proj_out: Linear,
    pub n_entities: usize,
    pub d_ent: usize,
}

/// Result of one memory-layer pass.
#[derive(Debug, Clone, Copy)]
pub struct MemoryOutput {
    /// `[rows, d_emb]`, zero off mention starts.
    pub out: Var,
    /// Pseudo embeddings `[mentions, d_ent]`; `None` without mentions.
    pub h: Option<Var>,
    /// Weighted entity sums `[mentions, d_ent]`.
    pub readout: Option<Var>,
    /// Full score matrix `E·h` when the dense route computed it.
    pub scores: Option<Var>,
}

/// One mention's retrieval, detached from any tape.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryRetrieval {
    pub h: Vec<f64>,
    pub ids: Vec<usize>,
    pub alpha: Vec<f64>,
    pub readout: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AccessStats {
    pub rows_touched: usize,
    pub distinct_rows: usize,
    pub total_rows: usize,
}

impl AccessStats {
    pub fn fraction_touched(&self) -> f64 {
        if self.total_rows == 0 {
            0.0
        } else {
            self.distinct_rows as f64 / self.total_rows as f64
        }
    }
}

impl EntityMemory {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        table: ParamId,
        d_emb: usize,
        rng: &mut R,
    ) -> Self {
        let shape = store.get(table).shape().to_vec();
        let (n_entities, d_ent) = (shape[0], shape[1]);
        Self {
            table,
            proj_in: Linear::without_bias(store, "memory.proj_in", 2 * d_emb, d_ent, rng),
            proj_out: Linear::without_bias(store, "memory.proj_out", d_ent, d_emb, rng),
            n_entities,
            d_ent,
        }
    }

    /// `h = W_f · [x_start ; x_end]` for each span (row indices into `x`).
    pub fn pseudo_embedding(&self, tape: &mut Tape, p: &Bound, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        span_projection(tape, p, self.proj_in, x, spans)
    }

    /// Reads `E` for each row of `h`.
    pub fn readout(&self, tape: &mut Tape, p: &Bound, h: Var, retrieval: Retrieval) -> Result<(Var, Option<Var>)> {
        let table = p[self.table];
        match retrieval {
            Retrieval::TopK(k) => Ok((tape.topk_readout(h, table, k)?, None)),
            Retrieval::Dense => {
                let scores = tape.matmul_bt(h, table)?;
                let probs = tape.softmax(scores, 1)?;
                Ok((tape.matmul(probs, table)?, Some(scores)))
            }
        }
    }

    /// Output is `W_b · E_m` at each span start and exactly zero elsewhere.
    /// Spans must be sorted and non-overlapping in row space.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        spans: &[(usize, usize)],
        retrieval: Retrieval,
    ) -> Result<MemoryOutput> {
        let rows = tape.shape(x)[0];
        let width = tape.shape(x)[1];
        validate_spans(spans.iter().copied(), rows)?;
        if spans.is_empty() {
            let out = tape.constant(&[rows, width], vec![0.0; rows * width])?;
            return Ok(MemoryOutput {
                out,
                h: None,
                readout: None,
                scores: None,
            });
        }
        let h = self.pseudo_embedding(tape, p, x, spans)?;
        let (readout, scores) = self.readout(tape, p, h, retrieval)?;
        let back = self.proj_out.forward(tape, p, readout)?;
        let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let out = tape.scatter_rows(back, &starts, rows)?;
        Ok(MemoryOutput {
            out,
            h: Some(h),
            readout: Some(readout),
            scores,
        })
    }

    /// Per-mention retrievals recorded by a forward pass.
    pub fn retrievals(&self, tape: &Tape, mem: &MemoryOutput, retrieval: Retrieval) -> Vec<MemoryRetrieval> {
        let (Some(h), Some(readout)) = (mem.h, mem.readout) else {
            return Vec::new();
        };
        let d = self.d_ent;
        let hv = tape.value(h);
        let rv = tape.value(readout);
        let selections: Vec<Selection> = match (retrieval, mem.scores) {
            (Retrieval::Dense, Some(scores)) => tape
                .value(scores)
                .chunks(self.n_entities)
                .map(|row| dense_selection(row))
                .collect(),
            _ => tape.selections(readout).map(<[Selection]>::to_vec).unwrap_or_default(),
        };
        selections
            .into_iter()
            .enumerate()
            .map(|(i, s)| MemoryRetrieval {
                h: hv[i * d..(i + 1) * d].to_vec(),
                ids: s.ids,
                alpha: s.alpha,
                readout: rv[i * d..(i + 1) * d].to_vec(),
            })
            .collect()
    }
}

fn dense_selection(scores: &[f64]) -> Selection {
    let ids = crate::numerics::top_k_ids(scores, scores.len());
    let sel: Vec<f64> = ids.iter().map(|&j| scores[j]).collect();
    let max = sel.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = sel.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exp.iter().sum();
    Selection {
        ids,
        alpha: exp.iter().map(|e| e / z).collect(),
        scores: sel,
    }
}

/// `W · [x_start ; x_end]` for each span; shared with the entity prediction head.
pub(crate) fn span_projection(
    tape: &mut Tape,
    p: &Bound,
    proj: Linear,
    x: Var,
    spans: &[(usize, usize)],
) -> Result<Var> {
    let rows = tape.shape(x)[0];
    if spans.is_empty() {
        return Err(Error::contract("pseudo embedding needs at least one span"));
    }
    for &(s, e) in spans {
        if s > e || e >= rows {
            return Err(Error::contract(format!("span ({s},{e}) outside {rows} rows")));
        }
    }
    let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.1).collect();
    let xs = tape.gather_rows(x, &starts)?;
    let xe = tape.gather_rows(x, &ends)?;
    let both = tape.concat(&[xs, xe], 1)?;
    proj.forward(tape, p, both)
}

/// Retrieves the top `k` rows of `table` for query `h`, outside of any model.
pub fn retrieve(table: &Tensor, h: &[f64], k: usize) -> Result<MemoryRetrieval> {
    let mut tape = Tape::new();
    let e = tape.leaf(table);
    let hv = tape.constant(&[1, h.len()], h.to_vec())?;
    let out = tape.topk_readout(hv, e, k)?;
    let sel = tape.selections(out).expect("top-k node records selections")[0].clone();
    Ok(MemoryRetrieval {
        h: h.to_vec(),
        ids: sel.ids,
        alpha: sel.alpha,
        readout: tape.value(out).to_vec(),
    })
}

pub fn access_count(retrievals: &[MemoryRetrieval], total_rows: usize) -> AccessStats {
    let distinct: HashSet<usize> = retrievals.iter().flat_map(|r| r.ids.iter().copied()).collect();
    AccessStats {
        rows_touched: retrievals.iter().map(|r| r.ids.len()).sum(),
        distinct_rows: distinct.len(),
        total_rows,
    }
}

/// Writes `E` as `"EAEM"`, `u32 N`, `u32 d_ent`, then `N·d_ent` little-endian f64.
pub fn save_embeddings(table: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = (table.rows(), table.cols());
    let mut buf = Vec::with_capacity(12 + 8 * n * d);
    buf.extend_from_slice(MAGIC);
    for dim in [n, d] {
        let dim = u32::try_from(dim).map_err(|_| Error::contract(format!("dimension {dim} exceeds u32")))?;
        buf.extend_from_slice(&dim.to_le_bytes());
    }
    for v in table.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads an embedding file, checking it has exactly `n` rows of width `d_ent`.
pub fn load_embeddings(path: impl AsRef<Path>, n: usize, d_ent: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Validation(vec![format!("{}: {msg}", path.display())]);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("missing EAEM header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let (rows, dim) = (word(4), word(8));
    if rows != n {
        return Err(bad(format!("expected {n} entity rows, found {rows}")));
    }
    if dim != d_ent {
        return Err(bad(format!("expected d_ent {d_ent}, found {dim}")));
    }
    let body = &bytes[12..];
    if body.len() != 8 * rows * dim {
        return Err(bad(format!("expected {} payload bytes, found {}", 8 * rows * dim, body.len())));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor::new(vec![rows, dim], data)
}

impl EntityMemory {
    pub fn save(&self, store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
        save_embeddings(store.get(self.table), path)
    }

    /// Replaces `E` from a file; combine with freezing to keep it fixed.
    pub fn load(&self, store: &mut ParamStore, path: impl AsRef<Path>) -> Result<()> {
        let t = load_embeddings(path, self.n_entities, self.d_ent)?;
        store.assign(self.table, t.into_data())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::randn(shape, 1.0, rng)
    }

    /// softmax(E·h)·E computed by hand.
    fn dense_oracle(e: &Tensor, h: &[f64]) -> Vec<f64> {
        let scores: Vec<f64> = (0..e.rows())
            .map(|j| e.row(j).iter().zip(h).map(|(a, b)| a * b).sum())
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut out = vec![0.0; e.cols()];
        for j in 0..e.rows() {
            for (o, v) in out.iter_mut().zip(e.row(j)) {
                *o += w[j] / z * v;
            }
        }
        out
    }

    #[test]
    fn k1_selects_argmax() {
        let e = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let r = retrieve(&e, &[1.0, 0.2], 1).unwrap();
        assert_eq!(r.ids, vec![1]);
        assert_eq!(r.alpha, vec![1.0]);
        assert_eq!(r.readout, vec![2.0, 0.0]);
    }

    #[test]
    fn two_by_two_by_hand() {
        let e = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let r = retrieve(&e, &[1.0, 0.0], 2).unwrap();
        let a = 1.0f64.exp() / (1.0f64.exp() + 1.0);
        assert_eq!(r.ids, vec![0, 1]);
        assert_abs_diff_eq!(r.alpha[0], a, epsilon = 1e-15);
        assert_abs_diff_eq!(r.alpha[1], 1.0 - a, epsilon = 1e-15);
        assert_abs_diff_eq!(r.readout[0], a, epsilon = 1e-15);
        assert_abs_diff_eq!(r.readout[1], 1.0 - a, epsilon = 1e-15);
    }

    #[test]
    fn full_width_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 5, 17, 64] {
            let e = rand_tensor(&[n, 6], &mut rng);
            let h = rand_tensor(&[6], &mut rng);
            let r = retrieve(&e, h.data(), n).unwrap();
            for (a, b) in r.readout.iter().zip(dense_oracle(&e, h.data())) {
                assert_abs_diff_eq!(*a, b, epsilon = 1e-12);
            }
            assert_abs_diff_eq!(r.alpha.iter().sum::<f64>(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn width_out_of_range() {
        let e = Tensor::zeros(&[3, 2]);
        assert!(matches!(retrieve(&e, &[1.0, 1.0], 0), Err(Error::Contract(_))));
        assert!(matches!(retrieve(&e, &[1.0, 1.0], 4), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_prefer_lowest_id() {
        let e = Tensor::from_rows(&[vec![1.0], vec![2.0], vec![2.0], vec![0.0]]).unwrap();
        assert_eq!(retrieve(&e, &[1.0], 2).unwrap().ids, vec![1, 2]);
        assert_eq!(retrieve(&e, &[1.0], 1).unwrap().ids, vec![1]);
    }

    fn setup(d_emb: usize, n: usize, d_ent: usize) -> (ParamStore, EntityMemory) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let table = entity_table(&mut store, n, d_ent, &mut rng);
        let mem = EntityMemory::new(&mut store, table, d_emb, &mut rng);
        (store, mem)
    }

    #[test]
    fn block_identity_projection_reads_start_row() {
        let (mut store, mem) = setup(4, 3, 2);
        // W_f = [I | 0] over the first d_ent coordinates of x_start.
        let mut w = vec![0.0; 2 * 8];
        w[0] = 1.0;
        w[8 + 1] = 1.0;
        store.assign(mem.proj_in.weight, w).unwrap();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(&[6, 4], (0..24).map(f64::from).collect()).unwrap();
        let h = mem.pseudo_embedding(&mut tape, &p, x, &[(2, 5)]).unwrap();
        assert_eq!(tape.value(h), &[8.0, 9.0]);
        let h1 = mem.pseudo_embedding(&mut tape, &p, x, &[(3, 3)]).unwrap();
        assert_eq!(tape.value(h1), &[12.0, 13.0]);
    }

    #[test]
    fn bad_span_is_contract_error() {
        let (store, mem) = setup(4, 3, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(&[3, 4], vec![0.0; 12]).unwrap();
        assert!(matches!(mem.pseudo_embedding(&mut tape, &p, x, &[(1, 3)]), Err(Error::Contract(_))));
    }

    #[test]
    fn no_mentions_gives_zeros() {
        let (store, mem) = setup(4, 3, 2);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(&[5, 4], vec![1.0; 20]).unwrap();
        let out = mem.forward(&mut tape, &p, x, &[], Retrieval::TopK(2)).unwrap();
        assert!(tape.value(out.out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn only_start_rows_are_written() {
        let (store, mem) = setup(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.leaf(&rand_tensor(&[7, 4], &mut rng));
        let out = mem.forward(&mut tape, &p, x, &[(1, 2)], Retrieval::TopK(3)).unwrap();
        let v = tape.value(out.out);
        for r in (0..7).filter(|&r| r != 1) {
            assert!(v[r * 4..(r + 1) * 4].iter().all(|&x| x == 0.0), "row {r}");
        }
        assert!(v[4..8].iter().any(|&x| x != 0.0));
    }

    #[test]
    fn overlapping_spans_rejected() {
        let (store, mem) = setup(4, 6, 3);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.constant(&[7, 4], vec![0.5; 28]).unwrap();
        let r = mem.forward(&mut tape, &p, x, &[(1, 3), (3, 4)], Retrieval::TopK(3));
        assert!(matches!(r, Err(Error::Invariant(_))));
    }

    #[test]
    fn two_mentions_full_width_match_oracle() {
        let (mut store, mem) = setup(4, 6, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        store.assign(mem.table, rand_tensor(&[6, 3], &mut rng).into_data()).unwrap();
        store.assign(mem.proj_in.weight, rand_tensor(&[3, 8], &mut rng).into_data()).unwrap();
        store.assign(mem.proj_out.weight, rand_tensor(&[4, 3], &mut rng).into_data()).unwrap();
        let xt = rand_tensor(&[7, 4], &mut rng);
        let spans = [(0, 1), (4, 6)];
        let mut tape = Tape::new();
        let p = store.bind(&mut tape, false);
        let x = tape.leaf(&xt);
        let out = mem.forward(&mut tape, &p, x, &spans, Retrieval::TopK(6)).unwrap();
        let v = tape.value(out.out).to_vec();

        let e = store.get(mem.table);
        let wf = store.get(mem.proj_in.weight);
        let wb = store.get(mem.proj_out.weight);
        for &(s, t) in &spans {
            let cat: Vec<f64> = xt.row(s).iter().chain(xt.row(t)).copied().collect();
            let h: Vec<f64> = (0..3).map(|i| wf.row(i).iter().zip(&cat).map(|(a, b)| a * b).sum()).collect();
            let em = dense_oracle(e, &h);
            for i in 0..4 {
                let want: f64 = wb.row(i).iter().zip(&em).map(|(a, b)| a * b).sum();
                assert_abs_diff_eq!(v[s * 4 + i], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dense_route_matches_topk_route() {
        let (store, mem) = setup(4, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xt = rand_tensor(&[6, 4], &mut rng);
        let run = |r: Retrieval| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, false);
            let x = tape.leaf(&xt);
            let out = mem.forward(&mut tape, &p, x, &[(0, 0), (2, 4)], r).unwrap();
            let acc = access_count(&mem.retrievals(&tape, &out, r), 9);
            (tape.value(out.out).to_vec(), acc)
        };
        let (a, sa) = run(Retrieval::TopK(9));
        let (b, sb) = run(Retrieval::Dense);
        for (x, y) in a.iter().zip(&b) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-14);
        }
        assert_eq!(sa, sb);
        assert_eq!(sa.rows_touched, 18);
    }

    #[test]
    fn access_accounting() {
        assert_eq!(access_count(&[], 10).rows_touched, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let e = rand_tensor(&[50, 4], &mut rng);
        let hs: Vec<Tensor> = (0..3).map(|_| rand_tensor(&[4], &mut rng)).collect();
        let rs: Vec<_> = hs.iter().map(|h| retrieve(&e, h.data(), 10).unwrap()).collect();
        let a = access_count(&rs, 50);
        assert_eq!(a.rows_touched, 30);
        assert!(a.distinct_rows <= 30);
        let same: Vec<_> = (0..3).map(|_| retrieve(&e, hs[0].data(), 10).unwrap()).collect();
        assert_eq!(access_count(&same, 50).distinct_rows, 10);
    }

    #[test]
    fn embeddings_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        let (mut store, mem) = setup(4, 5, 3);
        mem.save(&store, &path).unwrap();
        let before = store.get(mem.table).clone();
        store.assign(mem.table, vec![0.0; 15]).unwrap();
        mem.load(&mut store, &path).unwrap();
        assert_eq!(store.get(mem.table).data(), before.data());
    }

    #[test]
    fn wrong_width_names_expected_and_actual() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.bin");
        save_embeddings(&Tensor::zeros(&[5, 4]), &path).unwrap();
        let err = load_embeddings(&path, 5, 3).unwrap_err().to_string();
        assert!(err.contains("expected d_ent 3") && err.contains("found 4"), "{err}");
        let err = load_embeddings(&path, 6, 4).unwrap_err().to_string();
        assert!(err.contains("expected 6") && err.contains("found 5"), "{err}");
    }
}
