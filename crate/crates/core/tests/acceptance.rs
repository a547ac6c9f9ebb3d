//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use semcap::corpus::{generate_synthetic_dataset, Corpus, SynthSpec};
use semcap::metrics::{
    bleu4, caption_length_stats, cider, mean_average_precision, overall_score, rouge_l, top1,
    MetricReport, Tops,
};
use semcap::numkit::{finite_diff_grad, relative_error, Matrix, ParamBlocks, SeededRng};
use semcap::scn_decoder::{
    backward_sequence, forward_sequence, scn_step, CellState, DecodeMode, Factorized, Gate, Guide,
    InputSource, ScnDims, ScnParameters, SemanticContext,
};
use semcap::sdn::{
    label_noise_features, predict, sdn_backward, sdn_batch_loss, sdn_train, DenseLayer, FeatureSet,
    SdnConfig, SdnParameters,
};
use semcap::trainer::{
    adam_update, epsilon_for_epoch, generate_split, length_modulated_loss, lr_for_step,
    train_captioner, validate, AdamConfig, AdamState, CaptionData, DecoderConfig, Strategy,
    TrainConfig,
};

/// Finite-difference step and the magnitude below which gradient entries
/// are compared absolutely (central differences carry ~1e-10 noise).
const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-4;
const GRAD_TOL: f64 = 1e-5;
const ORACLE_TOL: f64 = 1e-9;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("overall-score reproduction", c1_overall_scores),
        ("SCN gradient suite", c2_scn_gradients),
        ("SDN gradient suite", c3_sdn_gradients),
        ("oracle equivalence", c4_oracles),
        ("strategy reduction at eps = 0", c5_strategy_reduction),
        ("toy convergence", c6_toy_convergence),
        ("semantic-quality ordering", c7_semantic_ordering),
        ("length ordering over beta", c8_length_ordering),
        ("schedule values", c9_schedules),
        ("CLI determinism", c10_cli_determinism),
    ];
    let only: Option<BTreeSet<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());

    let mut failed = Vec::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|e| Err(format!("panicked: {}", panic_message(&e))));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(d) => println!("criterion {n:>2} PASS  {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                println!("criterion {n:>2} FAIL  {name} [{secs:.1}s]: {d}");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
    println!("acceptance: all criteria passed");
}

fn panic_message(e: &Box<dyn std::any::Any + Send>) -> String {
    e.downcast_ref::<String>()
        .cloned()
        .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}

// ---------------------------------------------------------------- 1

/// (B-4, C, M, R, printed overall); `None` marks an empty cell.
type Row = ([Option<f64>; 4], Option<f64>);

fn first_table() -> Vec<Row> {
    let s = Some;
    vec![
        ([s(45.3), None, s(31.0), None], None),
        ([s(49.9), s(65.8), s(32.6), None], None),
        ([s(50.8), s(74.8), s(33.3), None], None),
        ([s(51.1), s(77.7), s(33.5), None], None),
        ([s(54.5), s(92.4), s(36.0), s(72.8)], s(0.8961)),
        ([s(53.5), s(85.8), s(35.0), None], None),
        ([s(54.2), s(88.2), s(34.8), s(71.7)], s(0.8740)),
        ([s(53.9), s(91.0), s(34.9), s(72.1)], s(0.8811)),
        ([s(48.6), s(92.2), s(35.1), s(71.9)], s(0.8633)),
        ([s(52.8), s(87.8), s(36.1), s(71.8)], s(0.8762)),
        ([s(47.9), s(78.1), s(35.0), s(71.5)], s(0.8264)),
        ([s(52.2), s(93.0), s(36.9), s(73.9)], s(0.8975)),
        ([s(46.5), s(81.0), s(33.5), s(69.4)], s(0.8110)),
        ([s(54.3), s(95.2), s(36.4), s(73.9)], s(0.9078)),
        ([s(62.4), s(109.7), s(39.0), s(77.0)], s(1.0000)),
    ]
}

fn second_table() -> Vec<Row> {
    let r = |b, c, m, rr, o| ([Some(b), Some(c), Some(m), Some(rr)], Some(o));
    vec![
        r(40.8, 47.1, 28.8, 60.2, 0.9223),
        r(40.5, 51.7, 28.4, 61.4, 0.9435),
        r(40.9, 47.5, 27.5, 60.2, 0.9137),
        r(43.4, 49.7, 29.5, 61.8, 0.9608),
        r(42.2, 48.9, 29.4, 62.0, 0.9505),
        r(41.3, 53.4, 28.7, 62.1, 0.9611),
        r(40.4, 47.1, 28.1, 60.7, 0.9162),
        r(42.3, 49.1, 29.7, 62.8, 0.9576),
        r(38.3, 48.1, 28.4, 60.7, 0.9119),
        r(40.5, 47.1, 28.3, 60.9, 0.9192),
        r(39.9, 51.0, 27.7, 61.2, 0.9303),
        r(43.6, 50.9, 28.8, 62.1, 0.9628),
        r(45.8, 53.2, 29.3, 63.6, 0.9957),
    ]
}

/// Checks every printed overall value; returns (checked, worst deviation).
fn reproduce(rows: &[Row]) -> Result<(usize, f64), String> {
    // column maxima over every printed cell
    let tops: [f64; 4] = std::array::from_fn(|k| {
        top1(&rows.iter().filter_map(|(m, _)| m[k]).collect::<Vec<_>>()).expect("non-empty column")
    });
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (m, printed) in rows {
        let Some(printed) = printed else { continue };
        let vals = [m[0].unwrap(), m[1].unwrap(), m[2].unwrap(), m[3].unwrap()];
        let got = overall_score(vals, tops).map_err(|e| e.to_string())?;
        worst = worst.max((got - printed).abs());
        checked += 1;
    }
    Ok((checked, worst))
}

fn c1_overall_scores() -> Outcome {
    let (n1, w1) = reproduce(&first_table())?;
    let (n2, w2) = reproduce(&second_table())?;
    let worst = w1.max(w2);
    check(
        worst <= 5e-5,
        format!("{n1} values (first table) + {n2} values (second table), max |diff| {worst:.2e} (tol 5e-5)"),
    )
}

// ---------------------------------------------------------------- 2

/// Replays a fixed list of step inputs (ground truth or previously sampled).
struct Replay(Vec<InputSource>);

impl Guide for Replay {
    fn next_input(&mut self, step: usize, _dist: &[f64]) -> semcap::Result<Option<InputSource>> {
        Ok(self.0.get(step).copied())
    }
}

struct Seq {
    v: Vec<f64>,
    s: Vec<f64>,
    /// Inputs of steps 1..L.
    inputs: Vec<InputSource>,
    targets: Vec<usize>,
}

fn total_loss(p: &ScnParameters, seqs: &[Seq], beta: f64) -> f64 {
    let mut lps = Vec::new();
    let mut lens = Vec::new();
    for q in seqs {
        let run = forward_sequence(p, &q.v, &q.s, &mut Replay(q.inputs.clone()), q.targets.len()).unwrap();
        let lp: f64 = run.steps.iter().zip(&q.targets).map(|(st, &t)| st.dist[t].ln()).sum();
        lps.push(lp);
        lens.push(q.targets.len());
    }
    length_modulated_loss(&lps, &lens, beta).unwrap()
}

fn c2_scn_gradients() -> Outcome {
    let beta = 0.7;
    let mut worst: f64 = 0.0;
    let mut worst_block = String::new();
    let mut params_checked = 0;
    for seed in 0..10u64 {
        let mut rng = SeededRng::new(1000 + seed);
        let dims = ScnDims {
            hidden: 2 + rng.below(5),
            factor: 1 + rng.below(4),
            embed: 2 + rng.below(3),
            visual: 2 + rng.below(4),
            tags: 1 + rng.below(3),
            vocab: 3 + rng.below(8),
        };
        let mut p = ScnParameters::init(dims, seed).unwrap();
        for (_, b) in p.blocks_mut() {
            for x in b.iter_mut() {
                *x += rng.uniform_range(-0.2, 0.2);
            }
        }
        let mut seqs = Vec::new();
        for k in 0..2 {
            let len = 1 + rng.below(4);
            let targets: Vec<usize> = (0..len).map(|_| rng.below(dims.vocab)).collect();
            // the second sequence mixes in "sampled" inputs
            let inputs = targets[..len - 1]
                .iter()
                .map(|&t| {
                    if k == 1 && rng.uniform() < 0.5 {
                        InputSource::Token { id: rng.below(dims.vocab), sampled: true }
                    } else {
                        InputSource::Token { id: t, sampled: false }
                    }
                })
                .collect();
            seqs.push(Seq {
                v: (0..dims.visual).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
                s: (0..dims.tags).map(|_| rng.uniform()).collect(),
                inputs,
                targets,
            });
        }

        let mut analytic = p.zeros_like();
        for q in &seqs {
            let run = forward_sequence(&p, &q.v, &q.s, &mut Replay(q.inputs.clone()), q.targets.len()).unwrap();
            let w = (q.targets.len() as f64).powf(-beta);
            analytic.add_scaled(1.0, &backward_sequence(&p, &run, &q.targets, w).unwrap());
        }
        let numeric = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.assign_flat(x);
                total_loss(&q, &seqs, beta)
            },
            &p.flatten(),
            FD_STEP,
        )
        .unwrap();
        let mut off = 0;
        for (name, block) in analytic.blocks() {
            for (i, a) in block.iter().enumerate() {
                let e = relative_error(*a, numeric[off + i], FD_FLOOR);
                if e > worst {
                    worst = e;
                    worst_block = format!("seed {seed} {name}");
                }
            }
            off += block.len();
        }
        params_checked += off;
    }
    check(
        worst < GRAD_TOL,
        format!("10 seeds, {params_checked} parameters, max rel err {worst:.2e} at {worst_block} (tol {GRAD_TOL:.0e}, floor {FD_FLOOR:.0e})"),
    )
}

// ---------------------------------------------------------------- 3

fn c3_sdn_gradients() -> Outcome {
    let clip = 1e-7;
    let mut worst: f64 = 0.0;
    let mut total = 0;
    for seed in 0..10u64 {
        let mut rng = SeededRng::new(2000 + seed);
        let input = 2 + rng.below(7);
        let widths = [input, 2 + rng.below(7), 2 + rng.below(7), 1 + rng.below(8)];
        let layers = widths
            .windows(2)
            .map(|w| DenseLayer {
                weight: Matrix::uniform(w[1], w[0], 0.8, &mut rng),
                bias: (0..w[1]).map(|_| rng.uniform_range(-0.3, 0.3)).collect(),
            })
            .collect();
        let p = SdnParameters::from_layers(layers).unwrap();
        let k = widths[3];
        let batch: Vec<(Vec<f64>, Vec<f64>)> = (0..3)
            .map(|_| {
                let x = (0..input).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
                let t = (0..k).map(|_| if rng.uniform() < 0.5 { 1.0 } else { 0.0 }).collect();
                (x, t)
            })
            .collect();
        let (_, grads) = sdn_backward(&p, &batch, clip).unwrap();
        let numeric = finite_diff_grad(
            |x| {
                let mut q = p.clone();
                q.assign_flat(x);
                sdn_batch_loss(&q, &batch, clip).unwrap()
            },
            &p.flatten(),
            FD_STEP,
        )
        .unwrap();
        for (a, n) in grads.flatten().iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n, FD_FLOOR));
        }
        total += numeric.len();
    }
    check(
        worst < GRAD_TOL,
        format!("10 seeds, {total} parameters, max rel err {worst:.2e} (tol {GRAD_TOL:.0e})"),
    )
}

// ---------------------------------------------------------------- 4

fn rand_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()
}

fn oracle_factor(f: &Factorized, x: &[f64], s: &[f64]) -> Vec<f64> {
    let (rows, factor) = (f.c.rows(), f.a.rows());
    let mut out = vec![0.0; rows];
    for r in 0..rows {
        for k in 0..factor {
            let mut ax = 0.0;
            for j in 0..x.len() {
                ax += f.a.get(k, j) * x[j];
            }
            let mut bs = 0.0;
            for j in 0..s.len() {
                bs += f.b.get(k, j) * s[j];
            }
            out[r] += f.c.get(r, k) * ax * bs;
        }
    }
    out
}

fn oracle_step(p: &ScnParameters, x: &[f64], v: &[f64], s: &[f64], prev: &CellState) -> CellState {
    let hidden = p.dims.hidden;
    let pre = |z: Gate| -> Vec<f64> {
        let g = p.gate(z);
        let (a, b, c) = (
            oracle_factor(&g.input, x, s),
            oracle_factor(&g.visual, v, s),
            oracle_factor(&g.recurrent, &prev.h, s),
        );
        (0..hidden).map(|j| a[j] + b[j] + c[j] + g.bias[j]).collect()
    };
    let sig = |a: f64| 1.0 / (1.0 + (-a).exp());
    let (pc, pi, pf, po) = (pre(Gate::Cell), pre(Gate::Input), pre(Gate::Forget), pre(Gate::Output));
    let mut c = vec![0.0; hidden];
    let mut h = vec![0.0; hidden];
    for j in 0..hidden {
        c[j] = sig(pf[j]) * prev.c[j] + sig(pi[j]) * pc[j].tanh();
        h[j] = sig(po[j]) * c[j].tanh();
    }
    CellState { h, c }
}

fn oracle_counts(tokens: &[u8], n: usize) -> Vec<(Vec<u8>, usize)> {
    let mut out: Vec<(Vec<u8>, usize)> = Vec::new();
    if tokens.len() < n {
        return out;
    }
    for i in 0..=tokens.len() - n {
        let g = tokens[i..i + n].to_vec();
        match out.iter_mut().find(|(h, _)| *h == g) {
            Some(e) => e.1 += 1,
            None => out.push((g, 1)),
        }
    }
    out
}

fn lookup(counts: &[(Vec<u8>, usize)], g: &[u8]) -> usize {
    counts.iter().find(|(h, _)| h == g).map_or(0, |e| e.1)
}

fn oracle_bleu4(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> f64 {
    let mut m = [0.0; 4];
    let mut t = [0.0; 4];
    let (mut c_len, mut r_len) = (0.0, 0.0);
    for (c, rs) in cands.iter().zip(refs) {
        c_len += c.len() as f64;
        let mut best = rs[0].len();
        for r in rs {
            let (d, bd) = (r.len().abs_diff(c.len()), best.abs_diff(c.len()));
            if d < bd || (d == bd && r.len() < best) {
                best = r.len();
            }
        }
        r_len += best as f64;
        for n in 1..=4 {
            for (g, cnt) in oracle_counts(c, n) {
                let max_ref = rs.iter().map(|r| lookup(&oracle_counts(r, n), &g)).max().unwrap();
                m[n - 1] += cnt.min(max_ref) as f64;
                t[n - 1] += cnt as f64;
            }
        }
    }
    if c_len == 0.0 || (0..4).any(|i| m[i] == 0.0) {
        return 0.0;
    }
    let geo = ((0..4).map(|i| (m[i] / t[i]).ln()).sum::<f64>() / 4.0).exp();
    let bp = if c_len > r_len { 1.0 } else { (1.0 - r_len / c_len).exp() };
    bp * geo
}

fn oracle_lcs(a: &[u8], b: &[u8]) -> usize {
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { 1 + t[i + 1][j + 1] } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

fn oracle_rouge(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best: f64 = 0.0;
        for r in rs {
            let l = oracle_lcs(c, r) as f64;
            if l > 0.0 {
                let (p, rc) = (l / c.len() as f64, l / r.len() as f64);
                best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
            }
        }
        total += best;
    }
    total / cands.len() as f64
}

fn oracle_cider(cands: &[Vec<u8>], refs: &[Vec<Vec<u8>>]) -> f64 {
    let n_docs = refs.len() as f64;
    let mut total = 0.0;
    for (i, c) in cands.iter().enumerate() {
        let mut score = 0.0;
        for n in 1..=4 {
            let df = |g: &[u8]| -> f64 {
                let d = refs.iter().filter(|rs| rs.iter().any(|r| lookup(&oracle_counts(r, n), g) > 0)).count();
                (d.max(1)) as f64
            };
            let vec_of = |toks: &[u8]| -> BTreeMap<Vec<u8>, f64> {
                oracle_counts(toks, n)
                    .into_iter()
                    .map(|(g, tf)| {
                        let w = tf as f64 * (n_docs.ln() - df(&g).ln());
                        (g, w)
                    })
                    .collect()
            };
            let vc = vec_of(c);
            let mut sim = 0.0;
            for r in &refs[i] {
                let vr = vec_of(r);
                let nc: f64 = vc.values().map(|x| x * x).sum::<f64>().sqrt();
                let nr: f64 = vr.values().map(|x| x * x).sum::<f64>().sqrt();
                if nc > 0.0 && nr > 0.0 {
                    let dot: f64 = vc.iter().map(|(g, x)| x * vr.get(g).copied().unwrap_or(0.0)).sum();
                    sim += dot / (nc * nr);
                }
            }
            score += sim / refs[i].len() as f64;
        }
        total += 10.0 * score / 4.0;
    }
    total / cands.len() as f64
}

fn oracle_map(scores: &[Vec<f64>], truths: &[Vec<f64>]) -> f64 {
    let k = scores[0].len();
    let mut sum = 0.0;
    let mut tags = 0;
    for tag in 0..k {
        // rank of sample i: samples with a higher score, or an equal score
        // and a lower index, come first
        let rank = |i: usize| {
            1 + (0..scores.len())
                .filter(|&j| scores[j][tag] > scores[i][tag] || (scores[j][tag] == scores[i][tag] && j < i))
                .count()
        };
        let pos: Vec<usize> = (0..scores.len()).filter(|&i| truths[i][tag] == 1.0).collect();
        if pos.is_empty() {
            continue;
        }
        let ap: f64 = pos
            .iter()
            .map(|&i| {
                let r = rank(i);
                let above = pos.iter().filter(|&&j| rank(j) <= r).count();
                above as f64 / r as f64
            })
            .sum::<f64>()
            / pos.len() as f64;
        sum += ap;
        tags += 1;
    }
    sum / tags as f64
}

#[derive(Clone)]
struct Blocks(Vec<Vec<f64>>);

impl ParamBlocks for Blocks {
    fn blocks(&self) -> Vec<(String, &[f64])> {
        self.0.iter().enumerate().map(|(i, b)| (format!("b{i}"), b.as_slice())).collect()
    }
    fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        self.0.iter_mut().enumerate().map(|(i, b)| (format!("b{i}"), b.as_mut_slice())).collect()
    }
}

fn oracle_adam(x: &mut [f64], grads: &[Vec<f64>], lr: f64, clip: f64) {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    for (t, g) in grads.iter().enumerate() {
        let norm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = if norm > clip { clip / norm } else { 1.0 };
        let t = (t + 1) as i32;
        for i in 0..x.len() {
            let gi = g[i] * scale;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            x[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

fn random_captions(rng: &mut SeededRng) -> (Vec<Vec<u8>>, Vec<Vec<Vec<u8>>>) {
    let videos = 2 + rng.below(4);
    let sent = |rng: &mut SeededRng| (0..1 + rng.below(10)).map(|_| rng.below(3) as u8).collect::<Vec<u8>>();
    let cands = (0..videos).map(|_| sent(rng)).collect();
    let refs = (0..videos)
        .map(|_| (0..1 + rng.below(3)).map(|_| sent(rng)).collect())
        .collect();
    (cands, refs)
}

fn c4_oracles() -> Outcome {
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, a: f64, b: f64| {
        let e = worst.entry(name).or_insert(0.0);
        *e = e.max((a - b).abs());
    };
    let mut rng = SeededRng::new(4242);
    let mut bleu_nonzero = 0;
    for _ in 0..20 {
        // SCN step
        let dims = ScnDims {
            hidden: 1 + rng.below(6),
            factor: 1 + rng.below(5),
            embed: 1 + rng.below(5),
            visual: 1 + rng.below(6),
            tags: 1 + rng.below(4),
            vocab: 4,
        };
        let p = ScnParameters::init(dims, rng.below(1 << 30) as u64).unwrap();
        let (x, v, s) = (rand_vec(dims.embed, &mut rng), rand_vec(dims.visual, &mut rng), rand_vec(dims.tags, &mut rng));
        let prev = CellState { h: rand_vec(dims.hidden, &mut rng), c: rand_vec(dims.hidden, &mut rng) };
        let ctx = SemanticContext::new(&p, &v, &s).unwrap();
        let (next, _) = scn_step(&p, &ctx, &x, &prev, InputSource::Start).unwrap();
        let want = oracle_step(&p, &x, &v, &s, &prev);
        for j in 0..dims.hidden {
            note("scn_step", next.h[j], want.h[j]);
            note("scn_step", next.c[j], want.c[j]);
        }

        // caption metrics
        let (cands, refs) = random_captions(&mut rng);
        let b = bleu4(&cands, &refs).unwrap();
        bleu_nonzero += (b > 0.0) as usize;
        note("bleu4", b, oracle_bleu4(&cands, &refs));
        note("rouge_l", rouge_l(&cands, &refs).unwrap(), oracle_rouge(&cands, &refs));
        note("cider", cider(&cands, &refs).unwrap(), oracle_cider(&cands, &refs));

        // mAP with tied scores
        let (n, k) = (3 + rng.below(8), 1 + rng.below(5));
        let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.below(4) as f64 / 4.0).collect()).collect();
        let mut truths: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| (rng.uniform() < 0.4) as u8 as f64).collect()).collect();
        truths[0][0] = 1.0;
        note("mAP", mean_average_precision(&scores, &truths).unwrap(), oracle_map(&scores, &truths));

        // Adam, 3 steps, clipping on
        let sizes = [1 + rng.below(4), 1 + rng.below(4)];
        let mut params = Blocks(sizes.iter().map(|&m| rand_vec(m, &mut rng)).collect());
        let mut flat = params.flatten();
        let steps: Vec<Blocks> = (0..3)
            .map(|_| Blocks(sizes.iter().map(|&m| (0..m).map(|_| rng.uniform_range(-4.0, 4.0)).collect()).collect()))
            .collect();
        let cfg = AdamConfig { clip_norm: Some(5.0), ..AdamConfig::default() };
        let mut state = AdamState::new(&params);
        for g in &steps {
            adam_update(&mut params, g, &mut state, 0.01, &cfg).unwrap();
        }
        oracle_adam(&mut flat, &steps.iter().map(|g| g.flatten()).collect::<Vec<_>>(), 0.01, 5.0);
        for (a, b) in params.flatten().iter().zip(&flat) {
            note("adam", *a, *b);
        }

        // length-modulated loss
        let m = 1 + rng.below(4);
        let lps: Vec<f64> = (0..m).map(|_| -rng.uniform_range(0.0, 20.0)).collect();
        let lens: Vec<usize> = (0..m).map(|_| 1 + rng.below(12)).collect();
        let beta = rng.uniform_range(0.0, 1.5);
        let want: f64 = -lps.iter().zip(&lens).map(|(lp, &l)| lp * (-(beta * (l as f64).ln())).exp()).sum::<f64>();
        note("length_loss", length_modulated_loss(&lps, &lens, beta).unwrap(), want);
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let detail = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect::<Vec<_>>().join(", ");
    check(max <= ORACLE_TOL, format!("20 instances each ({bleu_nonzero} with BLEU-4 > 0), max |diff|: {detail} (tol {ORACLE_TOL:.0e})"))
}

// ---------------------------------------------------------------- shared toy setup

fn toy_decoder() -> DecoderConfig {
    DecoderConfig { hidden: 64, embed: 32, factor: None }
}

fn toy_train(seed: u64) -> TrainConfig {
    TrainConfig {
        strategy: Strategy::ScheduledMultinomial,
        beta: 0.7,
        epochs: 200,
        batch_size: 64,
        learning_rate: 5e-3,
        seed,
        ..TrainConfig::default()
    }
}

/// SDN-predicted semantic features for train/val/test.
fn sdn_semantics(c: &Corpus, seed: u64) -> [Vec<Vec<f64>>; 3] {
    let cfg = SdnConfig {
        hidden: vec![64],
        epochs: 100,
        batch_size: 16,
        learning_rate: 3e-3,
        seed,
        ..SdnConfig::default()
    };
    let out = sdn_train(&c.train, &c.val, &cfg).unwrap();
    [&c.train, &c.val, &c.test].map(|ds| predict(&out.params, ds, FeatureSet::Both).unwrap())
}

// ---------------------------------------------------------------- 5

fn c5_strategy_reduction() -> Outcome {
    let c = generate_synthetic_dataset(&SynthSpec::default()).unwrap().to_corpus(None).unwrap();
    let [ts, vs, _] = sdn_semantics(&c, 0);
    let run = |strategy| {
        let cfg = TrainConfig { strategy, epochs: 5, epsilon_rate: 0.0, ..toy_train(3) };
        train_captioner(
            CaptionData::new(&c.train, &ts).unwrap(),
            CaptionData::new(&c.val, &vs).unwrap(),
            &toy_decoder(),
            &cfg,
        )
        .unwrap()
    };
    let tf = run(Strategy::TeacherForcing);
    let bits = |o: &semcap::trainer::TrainOutcome| o.trace.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    let mut same = true;
    for s in [Strategy::ScheduledArgmax, Strategy::ScheduledMultinomial] {
        let o = run(s);
        same &= bits(&o) == bits(&tf) && o.checkpoint.params == tf.checkpoint.params;
    }
    check(
        same,
        format!("5-epoch loss traces {:?} bit-identical across 3 strategies: {same}", tf.trace.iter().map(|r| r.loss).collect::<Vec<_>>()),
    )
}

// ---------------------------------------------------------------- 6

fn c6_toy_convergence() -> Outcome {
    let start = Instant::now();
    let c = generate_synthetic_dataset(&SynthSpec::default()).unwrap().to_corpus(None).unwrap();
    let [ts, vs, xs] = sdn_semantics(&c, 0);
    let out = train_captioner(
        CaptionData::new(&c.train, &ts).unwrap(),
        CaptionData::new(&c.val, &vs).unwrap(),
        &toy_decoder(),
        &toy_train(0),
    )
    .unwrap();
    let test = CaptionData::new(&c.test, &xs).unwrap();
    let (report, acc) = validate(&out.checkpoint.params, &test, 30).unwrap();
    let secs = start.elapsed().as_secs_f64();
    check(
        acc >= 0.99 && report.bleu4 >= 0.95 && secs < 300.0,
        format!(
            "test token accuracy {acc:.4} (>= 0.99), BLEU-4 {:.4} (>= 0.95), best epoch {}, {secs:.1}s (< 300s)",
            report.bleu4, out.checkpoint.epoch
        ),
    )
}

// ---------------------------------------------------------------- 7

/// Label-noise semantic features for all three splits at flip probability `q`.
fn noisy_sets(c: &Corpus, q: f64) -> [Vec<Vec<f64>>; 3] {
    let mut rng = SeededRng::new(99);
    [&c.train, &c.val, &c.test].map(|ds| label_noise_features(&ds.ground_truth(), q, &mut rng))
}

fn test_map(c: &Corpus, q: f64) -> f64 {
    let [_, _, xs] = noisy_sets(c, q);
    mean_average_precision(&xs, &c.test.ground_truth()).unwrap()
}

/// Flip probability on a 0.01 grid whose test mAP is closest to `target`.
fn q_for_map(c: &Corpus, target: f64) -> f64 {
    (0..=100)
        .map(|i| i as f64 / 100.0)
        .min_by(|a, b| (test_map(c, *a) - target).abs().total_cmp(&(test_map(c, *b) - target).abs()))
        .unwrap()
}

fn c7_semantic_ordering() -> Outcome {
    // visual features alone are ambiguous, so the semantics carry signal
    let spec = SynthSpec { feature_noise: 2.0, ..SynthSpec::default() };
    let c = generate_synthetic_dataset(&spec).unwrap().to_corpus(None).unwrap();
    let dec = DecoderConfig { hidden: 32, embed: 16, factor: None };
    let cfg = TrainConfig { epochs: 60, ..toy_train(0) };
    let mut rows = Vec::new();
    for target in [0.3, 0.6, 0.95] {
        let q = q_for_map(&c, target);
        let [ts, vs, xs] = noisy_sets(&c, q);
        let map = mean_average_precision(&xs, &c.test.ground_truth()).unwrap();
        let out = train_captioner(
            CaptionData::new(&c.train, &ts).unwrap(),
            CaptionData::new(&c.val, &vs).unwrap(),
            &dec,
            &cfg,
        )
        .unwrap();
        let (report, _) = validate(&out.checkpoint.params, &CaptionData::new(&c.test, &xs).unwrap(), 30).unwrap();
        rows.push((q, map, report));
    }
    let reports: Vec<MetricReport> = rows.iter().map(|r| r.2).collect();
    let tops = Tops::from_reports(&reports).unwrap();
    println!("  {:>6} {:>8} {:>8} {:>8} {:>8} {:>8}", "q", "mAP", "B-4", "C", "R", "Overall");
    let mut overall = Vec::new();
    for (q, map, r) in &rows {
        let o = r.with_overall(&tops).unwrap().overall.unwrap();
        println!("  {q:>6.3} {map:>8.4} {:>8.1} {:>8.1} {:>8.1} {o:>8.4}", 100.0 * r.bleu4, 10.0 * r.cider, 100.0 * r.rouge_l);
        overall.push(o);
    }
    let maps: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let map_up = maps.windows(2).all(|w| w[0] < w[1]);
    let overall_up = overall.windows(2).all(|w| w[0] <= w[1]);
    check(
        map_up && overall_up,
        format!(
            "mAP {:.3?} strictly increasing: {map_up}; overall {:.4?} non-decreasing: {overall_up} (METEOR omitted)",
            maps, overall
        ),
    )
}

// ---------------------------------------------------------------- 8

fn c8_length_ordering() -> Outcome {
    let betas = [0.0, 0.7, 1.0];
    let mut sums = [0.0; 3];
    let mut per_seed = Vec::new();
    for seed in 0..3u64 {
        let spec = SynthSpec { noise: 0.5, captions_per_video: 5, seed: 7 + seed, ..SynthSpec::default() };
        let c = generate_synthetic_dataset(&spec).unwrap().to_corpus(None).unwrap();
        let [ts, vs, xs] = sdn_semantics(&c, seed);
        let dec = DecoderConfig { hidden: 32, embed: 16, factor: None };
        let mut row = [0.0; 3];
        for (i, &beta) in betas.iter().enumerate() {
            let cfg = TrainConfig { beta, epochs: 60, ..toy_train(seed) };
            let out = train_captioner(
                CaptionData::new(&c.train, &ts).unwrap(),
                CaptionData::new(&c.val, &vs).unwrap(),
                &dec,
                &cfg,
            )
            .unwrap();
            let gen = generate_split(&out.checkpoint.params, &CaptionData::new(&c.test, &xs).unwrap(), DecodeMode::Argmax, 30, 0).unwrap();
            row[i] = caption_length_stats(&gen).unwrap();
            sums[i] += row[i];
        }
        per_seed.push(row);
    }
    let m = sums.map(|s| s / 3.0);
    let ok = m[0] <= m[1] + 0.1 && m[1] <= m[2] + 0.1;
    check(
        ok,
        format!(
            "mean length beta=0: {:.3}, beta=0.7: {:.3}, beta=1: {:.3} (slack 0.1); per seed {per_seed:?}",
            m[0], m[1], m[2]
        ),
    )
}

// ---------------------------------------------------------------- 9

fn c9_schedules() -> Outcome {
    let mut bad = Vec::new();
    for ep in 0..=125usize {
        if epsilon_for_epoch(ep, 0.008) != ep as f64 * 0.008 {
            bad.push(format!("eps({ep})"));
        }
    }
    for ep in 126..=1000usize {
        if epsilon_for_epoch(ep, 0.008) != 1.0 {
            bad.push(format!("eps({ep})"));
        }
    }
    let base = 2e-4;
    for k in 0..=20u64 {
        let want = base * 0.316f64.powi(k as i32);
        for step in [k * 20350, k * 20350 + 20349] {
            if lr_for_step(step, base, 0.316, 20350) != want {
                bad.push(format!("lr({step})"));
            }
        }
    }
    check(
        bad.is_empty(),
        format!("eps for ep 0..=1000, lr at 42 step boundaries; mismatches: {bad:?}"),
    )
}

// ---------------------------------------------------------------- 10

const CLI_CONFIG: &str = r#"
[synth]
seed = 11

[sdn]
hidden = [16]
epochs = 20
batch_size = 16
learning_rate = 0.003

[decoder]
hidden = 16
embed = 8

[train]
epochs = 6
learning_rate = 0.005
"#;

fn run_cli(args: &[&str]) -> Result<Vec<u8>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_semcap"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr)));
    }
    Ok(out.stdout)
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn c10_cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tmp.path().join("run.toml");
    let tops = tmp.path().join("tops.json");
    let meteor = tmp.path().join("meteor.txt");
    std::fs::write(&config, CLI_CONFIG).unwrap();
    std::fs::write(&tops, r#"{"bleu4": 0.9, "cider": 8.0, "meteor": 0.4, "rouge_l": 0.95}"#).unwrap();
    std::fs::write(&meteor, "0.31\n").unwrap();
    let out = tmp.path().join("out");
    let (cfg_s, out_s) = (config.to_str().unwrap(), out.to_str().unwrap());
    let feats = out.join("data/test_features.jsonl");
    let feats_s = feats.to_str().unwrap().to_string();

    let mut runs = Vec::new();
    for _ in 0..2 {
        if out.exists() {
            std::fs::remove_dir_all(&out).unwrap();
        }
        let base = ["--config", cfg_s, "--out", out_s, "--seed", "5"];
        let mut stdout = Vec::new();
        for cmd in [
            vec!["synth-data"],
            vec!["train-sdn"],
            vec!["train-caption"],
            vec!["evaluate", "--split", "test", "--meteor-file", meteor.to_str().unwrap(), "--tops-file", tops.to_str().unwrap()],
            vec!["evaluate", "--split", "val"],
            vec!["generate", "--features", &feats_s],
        ] {
            let mut args: Vec<&str> = cmd.clone();
            args.extend(base);
            stdout.push(run_cli(&args)?);
        }
        runs.push((snapshot(&out), stdout));
    }
    let (a, b) = (&runs[0], &runs[1]);
    let files: Vec<String> = a.0.keys().map(|p| p.display().to_string()).collect();
    let differing: Vec<String> = a
        .0
        .iter()
        .filter(|(k, v)| b.0.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_stdout = a.1 == b.1;
    check(
        differing.is_empty() && a.0.len() == b.0.len() && same_stdout && a.0.len() >= 12,
        format!("{} files byte-identical across two runs ({}), stdout identical: {same_stdout}, differing: {differing:?}", files.len(), files.join(" ")),
    )
}
