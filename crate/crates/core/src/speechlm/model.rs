use crate::numcore::rng::Rng;
use crate::numcore::{
    join, next_stamp, BlockTape, KvCache, LayerNorm, LayerNormTape, Linear, LinearTape, Matrix, Params,
    TransformerBlock,
};
use crate::vocab::{Special, StepTokens};

use super::{GroupedParams, PadEmbedding, ParamGroup, SpeechLmConfig, SpeechLmError};

const EMBED_STD: f64 = 0.02;

/// Per-step targets: one lane-local class per lane, `None` where masked.
pub type LaneTargets = Vec<Option<usize>>;

#[derive(Debug, Clone)]
enum LaneHeads {
    Untied(Vec<Linear>),
    /// Output weights are the lane's embedding rows; only a bias per lane.
    Tied(Vec<Matrix>),
}

#[derive(Debug, Clone)]
pub struct SpeechLm {
    config: SpeechLmConfig,
    text_embed: Matrix,
    pos_embed: Matrix,
    /// Rows for every non-text id (speech lanes then specials), indexed by `id - n_text`.
    token_embed: Matrix,
    base: Vec<TransformerBlock>,
    adapter: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    heads: LaneHeads,
    stamp: u64,
}

/// Output of a full-sequence forward pass.
#[derive(Debug, Clone)]
pub struct LmOutput {
    /// Base-stack output, one row per step.
    pub hidden: Matrix,
    /// One `T × lane_classes` matrix per lane.
    pub lane_logits: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct SpeechLmTape {
    ids: Vec<Vec<u32>>,
    positions: Vec<usize>,
    base: Vec<BlockTape>,
    adapter: Vec<BlockTape>,
    norm: LayerNormTape,
    head_input: Matrix,
    heads: Vec<LinearTape>,
    stamp: u64,
}

/// Key/value cache for step-by-step decoding.
#[derive(Debug, Clone, Default)]
pub struct DecodeCache {
    layers: Vec<KvCache>,
}

impl DecodeCache {
    /// Number of steps already processed.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, KvCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SpeechLm {
    pub fn new(config: SpeechLmConfig, seed: u64) -> Result<Self, SpeechLmError> {
        config.validate()?;
        let mut rng = Rng::seed(seed);
        let d = config.d_model;
        let v = config.vocab;
        let text_embed = rng.truncated_normal_matrix(v.n_text(), d, EMBED_STD);
        let pos_embed = rng.truncated_normal_matrix(config.max_seq_len, d, EMBED_STD);
        let base = (0..config.n_layers_base)
            .map(|_| TransformerBlock::new(d, config.n_heads, config.recency_bias, &mut rng))
            .collect();
        let token_embed = rng.truncated_normal_matrix(v.total_ids() - v.n_text(), d, EMBED_STD);
        let adapter = (0..config.n_layers_adapter)
            .map(|_| TransformerBlock::new(d, config.n_heads, config.recency_bias, &mut rng))
            .collect();
        let heads = if config.tie_heads {
            LaneHeads::Tied((0..v.k()).map(|_| Matrix::zeros(1, v.lane_classes())).collect())
        } else {
            LaneHeads::Untied((0..v.k()).map(|_| Linear::new(d, v.lane_classes(), &mut rng)).collect())
        };
        let mut model = Self {
            config,
            text_embed,
            pos_embed,
            token_embed,
            base,
            adapter,
            final_norm: LayerNorm::new(d),
            heads,
            stamp: next_stamp(),
        };
        model.zero_pad_rows();
        Ok(model)
    }

    pub fn config(&self) -> &SpeechLmConfig {
        &self.config
    }

    fn pad_rows(&self) -> Vec<usize> {
        let v = self.config.vocab;
        (0..v.k())
            .map(|lane| v.special_id(Special::SpeechPad { lane }).expect("lane in range") as usize - v.n_text())
            .collect()
    }

    fn zero_pad_rows(&mut self) {
        if self.config.pad_embedding == PadEmbedding::Zero {
            for r in self.pad_rows() {
                self.token_embed.row_mut(r).fill(0.0);
            }
        }
    }

    fn embedding_row(&self, id: u32) -> &[f64] {
        let n_text = self.config.vocab.n_text();
        if (id as usize) < n_text {
            self.text_embed.row(id as usize)
        } else {
            self.token_embed.row(id as usize - n_text)
        }
    }

    /// Token-embedding rows that act as the output weights of `lane` when heads are tied,
    /// in lane-class order.
    fn lane_rows(&self, lane: usize) -> Vec<usize> {
        let v = self.config.vocab;
        let n_text = v.n_text();
        let mut rows: Vec<usize> = (0..v.n_speech() as u32)
            .map(|c| v.encode_speech(lane, c).expect("valid lane/code") as usize - n_text)
            .collect();
        rows.push(v.special_id(Special::SpeechPad { lane }).expect("valid lane") as usize - n_text);
        rows.push(v.special_id(Special::SpeechEos { lane }).expect("valid lane") as usize - n_text);
        rows
    }

    fn tied_weight(&self, lane: usize) -> Matrix {
        let rows = self.lane_rows(lane);
        let mut w = Matrix::zeros(rows.len(), self.config.d_model);
        for (i, r) in rows.iter().enumerate() {
            w.row_mut(i).copy_from_slice(self.token_embed.row(*r));
        }
        w
    }

    /// Mean of the `k + 1` embeddings of a step.
    pub fn fuse_embed(&self, step: &StepTokens) -> Result<Vec<f64>, SpeechLmError> {
        let ids = self.config.vocab.step_ids(step)?;
        Ok(self.fuse_ids(&ids))
    }

    fn fuse_ids(&self, ids: &[u32]) -> Vec<f64> {
        let mut h = vec![0.0; self.config.d_model];
        for &id in ids {
            for (a, b) in h.iter_mut().zip(self.embedding_row(id)) {
                *a += b;
            }
        }
        let inv = 1.0 / ids.len() as f64;
        h.iter_mut().for_each(|v| *v *= inv);
        h
    }

    fn check_position(&self, position: usize) -> Result<(), SpeechLmError> {
        if position >= self.config.max_seq_len {
            return Err(SpeechLmError::Overlength { position, max: self.config.max_seq_len });
        }
        Ok(())
    }

    fn embed(&self, steps: &[StepTokens], positions: &[usize]) -> Result<(Matrix, Vec<Vec<u32>>), SpeechLmError> {
        if steps.is_empty() {
            return Err(SpeechLmError::Empty);
        }
        if steps.len() != positions.len() {
            return Err(SpeechLmError::Misaligned { steps: steps.len(), other: positions.len(), what: "positions" });
        }
        let mut x = Matrix::zeros(steps.len(), self.config.d_model);
        let mut all_ids = Vec::with_capacity(steps.len());
        for (t, (step, &pos)) in steps.iter().zip(positions).enumerate() {
            self.check_position(pos)?;
            let ids = self.config.vocab.step_ids(step)?;
            let h = self.fuse_ids(&ids);
            for ((o, a), p) in x.row_mut(t).iter_mut().zip(&h).zip(self.pos_embed.row(pos)) {
                *o = a + p;
            }
            all_ids.push(ids);
        }
        Ok((x, all_ids))
    }

    /// Full causal forward pass with positions `0..steps.len()`.
    pub fn forward(&self, steps: &[StepTokens]) -> Result<LmOutput, SpeechLmError> {
        let positions: Vec<usize> = (0..steps.len()).collect();
        self.forward_at(steps, &positions)
    }

    /// Full causal forward pass with explicit position ids.
    pub fn forward_at(&self, steps: &[StepTokens], positions: &[usize]) -> Result<LmOutput, SpeechLmError> {
        self.forward_with_tape(steps, positions).map(|(out, _)| out)
    }

    pub fn forward_with_tape(
        &self,
        steps: &[StepTokens],
        positions: &[usize],
    ) -> Result<(LmOutput, SpeechLmTape), SpeechLmError> {
        let (mut x, ids) = self.embed(steps, positions)?;
        let mut base_tapes = Vec::with_capacity(self.base.len());
        for block in &self.base {
            let (y, tape) = block.forward(&x)?;
            base_tapes.push(tape);
            x = y;
        }
        let hidden = x.clone();
        let mut adapter_tapes = Vec::with_capacity(self.adapter.len());
        for block in &self.adapter {
            let (y, tape) = block.forward(&x)?;
            adapter_tapes.push(tape);
            x = y;
        }
        let (head_input, norm) = self.final_norm.forward(&x)?;
        let mut lane_logits = Vec::with_capacity(self.config.vocab.k());
        let mut head_tapes = Vec::new();
        match &self.heads {
            LaneHeads::Untied(heads) => {
                for head in heads {
                    let (logits, tape) = head.forward(&head_input)?;
                    lane_logits.push(logits);
                    head_tapes.push(tape);
                }
            }
            LaneHeads::Tied(biases) => {
                for (lane, bias) in biases.iter().enumerate() {
                    let mut logits = head_input.matmul_t(&self.tied_weight(lane))?;
                    logits.add_row_broadcast(bias);
                    lane_logits.push(logits);
                }
            }
        }
        let tape = SpeechLmTape {
            ids,
            positions: positions.to_vec(),
            base: base_tapes,
            adapter: adapter_tapes,
            norm,
            head_input,
            heads: head_tapes,
            stamp: self.stamp,
        };
        Ok((LmOutput { hidden, lane_logits }, tape))
    }

    /// Mean cross-entropy over unmasked lane slots; 0 when every slot is masked.
    pub fn loss(&self, steps: &[StepTokens], positions: &[usize], targets: &[LaneTargets]) -> Result<f64, SpeechLmError> {
        let out = self.forward_at(steps, positions)?;
        let (sum, count, _) = self.cross_entropy(&out.lane_logits, targets, false)?;
        Ok(if count == 0 { 0.0 } else { sum / count as f64 })
    }

    /// Summed cross-entropy, the number of unmasked slots and the gradient of the sum.
    pub fn loss_sum_and_grad(
        &self,
        steps: &[StepTokens],
        positions: &[usize],
        targets: &[LaneTargets],
    ) -> Result<(f64, usize, SpeechLm), SpeechLmError> {
        let (out, tape) = self.forward_with_tape(steps, positions)?;
        let (sum, count, grad_logits) = self.cross_entropy(&out.lane_logits, targets, true)?;
        let grads = self.backward(&tape, &grad_logits)?;
        Ok((sum, count, grads))
    }

    /// Mean loss and its gradient.
    pub fn loss_and_grad(
        &self,
        steps: &[StepTokens],
        positions: &[usize],
        targets: &[LaneTargets],
    ) -> Result<(f64, SpeechLm), SpeechLmError> {
        let (sum, count, mut grads) = self.loss_sum_and_grad(steps, positions, targets)?;
        if count == 0 {
            return Ok((0.0, grads));
        }
        let inv = 1.0 / count as f64;
        crate::numcore::params_mut(&mut grads).into_iter().for_each(|m| m.scale(inv));
        Ok((sum * inv, grads))
    }

    fn cross_entropy(
        &self,
        logits: &[Matrix],
        targets: &[LaneTargets],
        want_grad: bool,
    ) -> Result<(f64, usize, Vec<Matrix>), SpeechLmError> {
        let steps = logits[0].rows();
        let k = self.config.vocab.k();
        if targets.len() != steps {
            return Err(SpeechLmError::Misaligned { steps, other: targets.len(), what: "target rows" });
        }
        let classes = self.config.vocab.lane_classes();
        let mut grads: Vec<Matrix> = if want_grad {
            logits.iter().map(|l| Matrix::zeros(l.rows(), l.cols())).collect()
        } else {
            Vec::new()
        };
        let mut sum = 0.0;
        let mut count = 0;
        for (t, row_targets) in targets.iter().enumerate() {
            if row_targets.len() != k {
                return Err(SpeechLmError::Misaligned { steps: k, other: row_targets.len(), what: "lane targets" });
            }
            for (lane, target) in row_targets.iter().enumerate() {
                let Some(target) = *target else { continue };
                if target >= classes {
                    return Err(SpeechLmError::Config(format!("target class {target} >= {classes}")));
                }
                let row = logits[lane].row(t);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                sum += z.ln() + max - row[target];
                count += 1;
                if want_grad {
                    let g = grads[lane].row_mut(t);
                    for (gi, v) in g.iter_mut().zip(row) {
                        *gi = (v - max).exp() / z;
                    }
                    g[target] -= 1.0;
                }
            }
        }
        Ok((sum, count, grads))
    }

    /// Gradient of a scalar whose derivative with respect to the lane logits is `grad_logits`.
    pub fn backward(&self, tape: &SpeechLmTape, grad_logits: &[Matrix]) -> Result<SpeechLm, SpeechLmError> {
        if tape.stamp != self.stamp {
            return Err(crate::numcore::NumError::StaleTape { layer: "speechlm" }.into());
        }
        let k = self.config.vocab.k();
        if grad_logits.len() != k {
            return Err(SpeechLmError::Misaligned { steps: k, other: grad_logits.len(), what: "lane gradients" });
        }
        let mut grads = crate::numcore::zeros_like(self);
        let mut d_a = Matrix::zeros(tape.head_input.rows(), tape.head_input.cols());
        match (&self.heads, &mut grads.heads) {
            (LaneHeads::Untied(heads), LaneHeads::Untied(g_heads)) => {
                for lane in 0..k {
                    let (dx, g) = heads[lane].backward(&tape.heads[lane], &grad_logits[lane])?;
                    d_a.add_assign(&dx);
                    g_heads[lane] = g;
                }
            }
            (LaneHeads::Tied(_), LaneHeads::Tied(g_bias)) => {
                for lane in 0..k {
                    let g = &grad_logits[lane];
                    d_a.add_assign(&g.matmul(&self.tied_weight(lane))?);
                    let d_w = g.t_matmul(&tape.head_input)?;
                    for (i, r) in self.lane_rows(lane).into_iter().enumerate() {
                        for (a, b) in grads.token_embed.row_mut(r).iter_mut().zip(d_w.row(i)) {
                            *a += b;
                        }
                    }
                    g_bias[lane] = g.sum_rows();
                }
            }
            _ => unreachable!("gradient container mirrors the model"),
        }
        let (mut dx, g_norm) = self.final_norm.backward(&tape.norm, &d_a)?;
        grads.final_norm = g_norm;
        for (i, block) in self.adapter.iter().enumerate().rev() {
            let (d, g) = block.backward(&tape.adapter[i], &dx)?;
            grads.adapter[i] = g;
            dx = d;
        }
        for (i, block) in self.base.iter().enumerate().rev() {
            let (d, g) = block.backward(&tape.base[i], &dx)?;
            grads.base[i] = g;
            dx = d;
        }
        let n_text = self.config.vocab.n_text();
        for (t, ids) in tape.ids.iter().enumerate() {
            let row = dx.row(t);
            for (a, b) in grads.pos_embed.row_mut(tape.positions[t]).iter_mut().zip(row) {
                *a += b;
            }
            let share = 1.0 / ids.len() as f64;
            for &id in ids {
                let target = if (id as usize) < n_text {
                    grads.text_embed.row_mut(id as usize)
                } else {
                    grads.token_embed.row_mut(id as usize - n_text)
                };
                for (a, b) in target.iter_mut().zip(row) {
                    *a += share * b;
                }
            }
        }
        if self.config.pad_embedding == PadEmbedding::Zero {
            for r in self.pad_rows() {
                grads.token_embed.row_mut(r).fill(0.0);
            }
        }
        Ok(grads)
    }

    pub fn new_cache(&self) -> DecodeCache {
        DecodeCache { layers: vec![KvCache::default(); self.base.len() + self.adapter.len()] }
    }

    /// Processes one step on top of `cache` and returns each lane's logits.
    pub fn step(
        &self,
        cache: &mut DecodeCache,
        step: &StepTokens,
        position: usize,
    ) -> Result<Vec<Vec<f64>>, SpeechLmError> {
        self.check_position(position)?;
        let ids = self.config.vocab.step_ids(step)?;
        let mut h = self.fuse_ids(&ids);
        for (a, p) in h.iter_mut().zip(self.pos_embed.row(position)) {
            *a += p;
        }
        let mut x = Matrix::row_vector(&h);
        let blocks = self.base.iter().chain(self.adapter.iter());
        for (block, kv) in blocks.zip(cache.layers.iter_mut()) {
            x = block.forward_cached(&x, kv)?;
        }
        let a = self.final_norm.apply(&x)?;
        let mut lanes = Vec::with_capacity(self.config.vocab.k());
        match &self.heads {
            LaneHeads::Untied(heads) => {
                for head in heads {
                    lanes.push(head.apply(&a)?.into_vec());
                }
            }
            LaneHeads::Tied(biases) => {
                for (lane, bias) in biases.iter().enumerate() {
                    let mut logits = a.matmul_t(&self.tied_weight(lane))?;
                    logits.add_row_broadcast(bias);
                    lanes.push(logits.into_vec());
                }
            }
        }
        Ok(lanes)
    }
}

impl Params for SpeechLm {
    fn collect<'a>(&'a self, out: &mut Vec<&'a Matrix>) {
        out.push(&self.text_embed);
        out.push(&self.pos_embed);
        for b in &self.base {
            b.collect(out);
        }
        out.push(&self.token_embed);
        for b in &self.adapter {
            b.collect(out);
        }
        self.final_norm.collect(out);
        match &self.heads {
            LaneHeads::Untied(h) => h.iter().for_each(|l| l.collect(out)),
            LaneHeads::Tied(b) => out.extend(b.iter()),
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Matrix>) {
        self.stamp = next_stamp();
        out.push(&mut self.text_embed);
        out.push(&mut self.pos_embed);
        for b in &mut self.base {
            b.collect_mut(out);
        }
        out.push(&mut self.token_embed);
        for b in &mut self.adapter {
            b.collect_mut(out);
        }
        self.final_norm.collect_mut(out);
        match &mut self.heads {
            LaneHeads::Untied(h) => h.iter_mut().for_each(|l| l.collect_mut(out)),
            LaneHeads::Tied(b) => out.extend(b.iter_mut()),
        }
    }

    fn names(&self, prefix: &str, out: &mut Vec<String>) {
        out.push(join(prefix, "text_embed"));
        out.push(join(prefix, "pos_embed"));
        for (i, b) in self.base.iter().enumerate() {
            b.names(&join(prefix, &format!("base.{i}")), out);
        }
        out.push(join(prefix, "token_embed"));
        for (i, b) in self.adapter.iter().enumerate() {
            b.names(&join(prefix, &format!("adapter.{i}")), out);
        }
        self.final_norm.names(&join(prefix, "final_norm"), out);
        match &self.heads {
            LaneHeads::Untied(h) => {
                for (i, l) in h.iter().enumerate() {
                    l.names(&join(prefix, &format!("head.{i}")), out);
                }
            }
            LaneHeads::Tied(b) => {
                for i in 0..b.len() {
                    out.push(join(prefix, &format!("head.{i}.bias")));
                }
            }
        }
    }
}

impl GroupedParams for SpeechLm {
    fn groups(&self) -> Vec<ParamGroup> {
        let mut base = Vec::new();
        base.push(&self.text_embed);
        base.push(&self.pos_embed);
        self.base.iter().for_each(|b| b.collect(&mut base));
        let total = crate::numcore::params(self).len();
        let mut out = vec![ParamGroup::Base; base.len()];
        out.resize(total, ParamGroup::Adapter);
        out
    }
}
