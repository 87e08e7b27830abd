//! Independent reference implementations and randomized case generators
//! shared by the property tests and the acceptance suite.

use chunkspeech::decoder::scripted::ScriptedModel;
use chunkspeech::decoder::{generate_logical, ChunkPolicy, DecodeOptions};
use chunkspeech::evalkit::{dual_reference_score, edit_distance_rate, EvalSample};
use chunkspeech::infomine::{FeaturePair, FusionParams};
use chunkspeech::numcore::rng::Rng;
use chunkspeech::numcore::{param_names, params, Linear};
use chunkspeech::speechlm::SpeechLm;
use chunkspeech::vocab::{StepTokens, TextSlot};
use chunkspeech::trainer::{naive_batches, plan_batches};
use chunkspeech::vocab::{ExtendedVocab, SpeechSlot};

/// Levenshtein distance by plain recursion over the last elements.
pub fn brute_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    match (a.split_last(), b.split_last()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edit_distance(ra, rb) + usize::from(x != y);
            let del = brute_edit_distance(ra, b) + 1;
            let ins = brute_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// The same recursion with a table of already solved prefix pairs.
pub fn memo_edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    fn go<T: PartialEq>(a: &[T], b: &[T], i: usize, j: usize, memo: &mut Vec<Option<usize>>) -> usize {
        let key = i * (b.len() + 1) + j;
        if let Some(v) = memo[key] {
            return v;
        }
        let v = if i == 0 {
            j
        } else if j == 0 {
            i
        } else {
            let sub = go(a, b, i - 1, j - 1, memo) + usize::from(a[i - 1] != b[j - 1]);
            sub.min(go(a, b, i - 1, j, memo) + 1).min(go(a, b, i, j - 1, memo) + 1)
        };
        memo[key] = Some(v);
        v
    }
    let mut memo = vec![None; (a.len() + 1) * (b.len() + 1)];
    go(a, b, a.len(), b.len(), &mut memo)
}

/// Every binary sequence of length `0..=max_len`.
pub fn binary_sequences(max_len: usize) -> Vec<Vec<u8>> {
    (0..=max_len).flat_map(|len| (0..1u32 << len).map(move |bits| (0..len).map(|i| ((bits >> i) & 1) as u8).collect())).collect()
}

/// Chunk lengths produced by cutting after every delimiter and at `cap`.
pub fn expected_chunk_lengths(text: &[u32], delimiter: u32, cap: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut current = 0;
    for &t in text {
        current += 1;
        if t == delimiter || current == cap {
            out.push(current);
            current = 0;
        }
    }
    if current > 0 {
        out.push(current);
    }
    out
}

pub fn random_text(rng: &mut Rng, len: usize, n_text: usize, delimiter_rate: f64) -> Vec<u32> {
    (0..len).map(|_| if rng.uniform() < delimiter_rate { 31 } else { rng.below(n_text.min(31)) as u32 }).collect()
}

/// Randomized decode with a scripted model: returns `Err` with a reason when
/// the step count or the delay padding disagrees with the schedule law.
pub fn check_schedule_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed(seed);
    let k = [1, 2, 3, 4, 8][rng.below(5)];
    let delay = rng.below(7);
    let len = 1 + rng.below(80);
    let text = random_text(&mut rng, len, 32, 0.15);
    let chunks = expected_chunk_lengths(&text, 31, 24);
    // At most the codes that fit the decoder's step budget of d + ceil(2·8·L/k) groups.
    let scripts: Vec<Vec<u32>> =
        chunks.iter().map(|&l| (0..rng.below(2 * 8 * l - k + 1)).map(|_| rng.below(64) as u32).collect()).collect();
    let vocab = ExtendedVocab::new(32, 64, k).map_err(|e| e.to_string())?;
    let model = ScriptedModel::new(vocab, delay, &scripts);
    let options = DecodeOptions { delay, ..DecodeOptions::new(ChunkPolicy::sentence(31)) };
    let out = generate_logical(&text, &model, options).map_err(|e| e.to_string())?;
    // Emitted groups: ceil(codes / k) code groups plus one group opening with EOS.
    let expected: usize =
        chunks.iter().zip(&scripts).map(|(&l, s)| l.max(delay + s.len().div_ceil(k) + 1)).sum();
    if out.steps != expected {
        return Err(format!("seed {seed}: {} steps, law gives {expected}", out.steps));
    }
    for r in &out.history {
        let pad = vec![SpeechSlot::Pad; k];
        if r.local_step < delay && (r.emitted != pad || r.input.speech != pad) {
            return Err(format!("seed {seed}: chunk {} step {} is not all PAD", r.chunk, r.local_step));
        }
    }
    if out.codes != scripts.concat() {
        return Err(format!("seed {seed}: codes differ from script"));
    }
    Ok(())
}

/// Bimodal length set: a short and a long cluster with jitter.
pub fn bimodal_lengths(rng: &mut Rng) -> Vec<usize> {
    let n = 20 + rng.below(200);
    let short = 5 + rng.below(20);
    let long = short * (4 + rng.below(8));
    (0..n)
        .map(|_| {
            let centre = if rng.uniform() < 0.5 { short } else { long };
            centre + rng.below(centre / 4 + 1)
        })
        .collect()
}

/// Checks one randomized planner case against every batching rule.
pub fn check_planner_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed(seed);
    let lengths = bimodal_lengths(&mut rng);
    let longest = *lengths.iter().max().unwrap();
    let budget = longest * (2 + rng.below(14));
    let spread = 1.5 + rng.uniform() * 1.5;
    let plan = plan_batches(&lengths, budget, spread, seed).map_err(|e| e.to_string())?;
    let mut seen = vec![0usize; lengths.len()];
    for b in &plan.batches {
        let lens: Vec<usize> = b.ids.iter().map(|&i| lengths[i]).collect();
        let (lo, hi) = (*lens.iter().min().unwrap(), *lens.iter().max().unwrap());
        if b.ids.len() * hi > budget {
            return Err(format!("seed {seed}: batch of {} × {hi} exceeds {budget}", b.ids.len()));
        }
        if hi as f64 > spread * lo as f64 {
            return Err(format!("seed {seed}: spread {hi}/{lo} above {spread}"));
        }
        b.ids.iter().for_each(|&i| seen[i] += 1);
    }
    if seen.iter().any(|&c| c != 1) {
        return Err(format!("seed {seed}: not every sample exactly once"));
    }
    let padded = |bs: &[Vec<usize>]| -> (usize, usize) {
        bs.iter().fold((0, 0), |(real, pad), ids| {
            let max = ids.iter().map(|&i| lengths[i]).max().unwrap();
            (real + ids.iter().map(|&i| lengths[i]).sum::<usize>(), pad + max * ids.len())
        })
    };
    let ours: Vec<Vec<usize>> = plan.batches.iter().map(|b| b.ids.clone()).collect();
    let naive: Vec<Vec<usize>> = naive_batches(&lengths, budget).map_err(|e| e.to_string())?.into_iter().map(|b| b.ids).collect();
    let (real, ours_pad) = padded(&ours);
    let (_, naive_pad) = padded(&naive);
    let waste = |pad: usize| 1.0 - real as f64 / pad as f64;
    if !(waste(ours_pad) < waste(naive_pad)) {
        return Err(format!("seed {seed}: waste {} not below naive {}", waste(ours_pad), waste(naive_pad)));
    }
    Ok(())
}

/// Random (T, G, N) triple; checks min-WER ≤ WER(T,G).
pub fn check_min_wer_case(seed: u64) -> Result<(), String> {
    let mut rng = Rng::seed(seed);
    let seq = |rng: &mut Rng| -> Vec<u32> { (0..1 + rng.below(12)).map(|_| rng.below(6) as u32).collect() };
    let truth = seq(&mut rng);
    let hypothesis = seq(&mut rng);
    let normalized = if rng.uniform() < 0.2 { None } else { Some(seq(&mut rng)) };
    let raw = memo_edit_distance(&hypothesis, &truth) as f64 / truth.len() as f64;
    let sample = EvalSample { hypothesis, truth, normalized, category: "x".into() };
    let score = dual_reference_score(&sample).map_err(|e| e.to_string())?;
    if score > raw {
        return Err(format!("seed {seed}: min-WER {score} above WER(T,G) {raw}"));
    }
    if sample.normalized.is_none() && score != raw {
        return Err(format!("seed {seed}: without N the score must equal WER(T,G)"));
    }
    let rate = edit_distance_rate(&sample.hypothesis, &sample.truth).map_err(|e| e.to_string())?;
    if rate != raw {
        return Err(format!("seed {seed}: DP rate {rate} differs from recursion {raw}"));
    }
    Ok(())
}

fn gelu_tanh(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn naive_linear(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.out_dim()).map(|o| l.bias().data()[o] + (0..l.in_dim()).map(|i| x[i] * l.weight().get(i, o)).sum::<f64>()).collect()
}

/// `MLP(main_i + Σ_j softmax_j(φq(main_i)·φk(aux_j)) φv(aux_j))`, one row at a time.
pub fn naive_fusion(pair: &FeaturePair, f: &FusionParams) -> Vec<Vec<f64>> {
    let n = pair.main.rows();
    let q: Vec<Vec<f64>> = (0..n).map(|r| naive_linear(&f.phi_q, pair.main.row(r))).collect();
    let k: Vec<Vec<f64>> = (0..pair.aux.rows()).map(|r| naive_linear(&f.phi_k, pair.aux.row(r))).collect();
    let v: Vec<Vec<f64>> = (0..pair.aux.rows()).map(|r| naive_linear(&f.phi_v, pair.aux.row(r))).collect();
    (0..n)
        .map(|i| {
            let scores: Vec<f64> = k.iter().map(|kj| q[i].iter().zip(kj).map(|(a, b)| a * b).sum()).collect();
            let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - top).exp()).sum();
            let mut x = pair.main.row(i).to_vec();
            for (j, s) in scores.iter().enumerate() {
                let w = (s - top).exp() / z;
                x.iter_mut().zip(&v[j]).for_each(|(a, b)| *a += w * b);
            }
            let h: Vec<f64> = naive_linear(&f.mlp.up, &x).into_iter().map(gelu_tanh).collect();
            naive_linear(&f.mlp.down, &h)
        })
        .collect()
}

/// Mean of the text row and the `k` lane rows of `step`, read from the named
/// embedding tables. Speech codes are laid out lane-major after the text ids.
pub fn naive_step_embedding(model: &SpeechLm, step: &StepTokens) -> Vec<f64> {
    let v = model.config().vocab;
    let names = param_names(model);
    let tables = params(model);
    let table = |name: &str| tables[names.iter().position(|n| n == name).expect("embedding table")];
    let (text, other) = (table("text_embed"), table("token_embed"));
    let mut rows: Vec<&[f64]> = Vec::new();
    match step.text {
        TextSlot::Token(t) => rows.push(text.row(t as usize)),
        slot => rows.push(other.row(v.text_slot_id(slot).unwrap() as usize - v.n_text())),
    }
    for (lane, slot) in step.speech.iter().enumerate() {
        let row = match slot {
            SpeechSlot::Code(c) => lane * v.n_speech() + *c as usize,
            s => v.speech_slot_id(lane, *s).unwrap() as usize - v.n_text(),
        };
        rows.push(other.row(row));
    }
    let mut mean = vec![0.0; model.config().d_model];
    for r in &rows {
        mean.iter_mut().zip(r.iter()).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= rows.len() as f64);
    mean
}
