"""LSTM encoder-decoder with additive attention.

Produces log p(y|x) token by token under teacher forcing. All forward
helpers work on batches; padded positions are masked so that padded and
unpadded evaluations of the same sequence agree. Single-sequence wrappers
(`encode`, `decode_step`, `sequence_log_prob`) expose the step-level
contract used by the losses and decoding modules.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, const

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3
NUM_SPECIALS = 4

# magnitude of the additive score offset that zeroes attention weights on
# padded source positions (exp underflows to exactly 0)
_MASK_OFF = 1e30


@dataclass
class ModelParams:
    """All trainable tensors; shapes derive from (V_src, V_tgt, E, H) alone."""

    src_embed: Tensor  # (V_src, E)
    tgt_embed: Tensor  # (V_tgt, E)
    enc_w: Tensor      # (E, 4H)
    enc_u: Tensor      # (H, 4H)
    enc_b: Tensor      # (4H,)
    dec_w: Tensor      # (E + H, 4H)
    dec_u: Tensor      # (H, 4H)
    dec_b: Tensor      # (4H,)
    att_query: Tensor  # (H, H)
    att_key: Tensor    # (H, H)
    att_score: Tensor  # (H,)
    out_w: Tensor      # (H, V_tgt)
    out_b: Tensor      # (V_tgt,)

    def named(self) -> dict:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @property
    def dims(self) -> tuple:
        v_src, embed = self.src_embed.shape
        v_tgt = self.tgt_embed.shape[0]
        hidden = self.enc_u.shape[0]
        return v_src, v_tgt, embed, hidden

    def copy(self) -> "ModelParams":
        return ModelParams(
            **{k: Tensor(v.values.copy(), name=k) for k, v in self.named().items()}
        )


def init_params(v_src: int, v_tgt: int, embed_size: int, hidden_size: int, seed: int = 0) -> ModelParams:
    """Uniform [-0.08, 0.08] initialization, reproducible from the seed."""
    rng = np.random.default_rng(seed)
    e, h = embed_size, hidden_size

    def u(*shape):
        return rng.uniform(-0.08, 0.08, size=shape)

    return ModelParams(
        src_embed=Tensor(u(v_src, e), name="src_embed"),
        tgt_embed=Tensor(u(v_tgt, e), name="tgt_embed"),
        enc_w=Tensor(u(e, 4 * h), name="enc_w"),
        enc_u=Tensor(u(h, 4 * h), name="enc_u"),
        enc_b=Tensor(u(4 * h), name="enc_b"),
        dec_w=Tensor(u(e + h, 4 * h), name="dec_w"),
        dec_u=Tensor(u(h, 4 * h), name="dec_u"),
        dec_b=Tensor(u(4 * h), name="dec_b"),
        att_query=Tensor(u(h, h), name="att_query"),
        att_key=Tensor(u(h, h), name="att_key"),
        att_score=Tensor(u(h), name="att_score"),
        out_w=Tensor(u(h, v_tgt), name="out_w"),
        out_b=Tensor(u(v_tgt), name="out_b"),
    )


@dataclass
class DecoderState:
    h: Tensor  # (B, H)
    c: Tensor  # (B, H)
    step: int = 0


def _lstm_step(x: Tensor, h: Tensor, c: Tensor, w, u, b, hidden: int):
    gates = T.add(T.add(T.matmul(x, w), T.matmul(h, u)), b)
    i = T.sigmoid(T.slice_last(gates, 0, hidden))
    f = T.sigmoid(T.slice_last(gates, hidden, 2 * hidden))
    g = T.tanh(T.slice_last(gates, 2 * hidden, 3 * hidden))
    o = T.sigmoid(T.slice_last(gates, 3 * hidden, 4 * hidden))
    c_new = T.add(T.mul(f, c), T.mul(i, g))
    h_new = T.mul(o, T.tanh(c_new))
    return h_new, c_new


def encode_batch(params: ModelParams, ids: np.ndarray, mask: Optional[np.ndarray] = None):
    """Encode right-padded id rows (B, Ts).

    Returns annotations (B, Ts, H) and the initial decoder state. Hidden
    state updates are frozen on padded steps, so each row's final state
    equals the state at its true length.
    """
    ids = np.asarray(ids, dtype=np.int64)
    batch, steps = ids.shape
    _, _, _, hidden = params.dims
    if mask is None:
        mask = np.ones(ids.shape)
    h = const(np.zeros((batch, hidden)))
    c = const(np.zeros((batch, hidden)))
    columns = []
    for t in range(steps):
        x = T.embed_lookup(params.src_embed, ids[:, t])
        h_new, c_new = _lstm_step(x, h, c, params.enc_w, params.enc_u, params.enc_b, hidden)
        m = const(mask[:, t: t + 1])
        keep = const(1.0 - mask[:, t: t + 1])
        h = T.add(T.mul(m, h_new), T.mul(keep, h))
        c = T.add(T.mul(m, c_new), T.mul(keep, c))
        columns.append(T.reshape(h, (batch, 1, hidden)))
    annotations = T.concat(columns, axis=1) if len(columns) > 1 else columns[0]
    return annotations, DecoderState(h=h, c=c, step=0)


def attention_batch(params: ModelParams, state: DecoderState, annotations: Tensor,
                    mask: Optional[np.ndarray] = None):
    """Additive attention: score_t = v . tanh(Wq h + Wk a_t).

    Returns the weight-averaged context (B, H) and weights (B, Ts); padded
    positions receive exactly zero weight.
    """
    batch, steps, hidden = annotations.shape
    keys = T.matmul(annotations, params.att_key)                      # (B, Ts, H)
    query = T.reshape(T.matmul(state.h, params.att_query), (batch, 1, hidden))
    scores = T.matmul(T.tanh(T.add(keys, query)), params.att_score)   # (B, Ts)
    if mask is not None:
        scores = T.add(scores, const((mask - 1.0) * _MASK_OFF))
    weights = T.softmax(scores)
    context = T.sum_(T.mul(annotations, T.reshape(weights, (batch, steps, 1))), axis=1)
    return context, weights


def decode_step_batch(params: ModelParams, prev_ids: np.ndarray, state: DecoderState,
                      context: Tensor):
    """One decoder step: log-probabilities over V_tgt plus the next state."""
    prev_ids = np.asarray(prev_ids, dtype=np.int64)
    v_tgt = params.tgt_embed.shape[0]
    if prev_ids.min() < 0 or prev_ids.max() >= v_tgt:
        raise ValueError(f"decoder token id out of range [0, {v_tgt})")
    hidden = params.enc_u.shape[0]
    x = T.concat([T.embed_lookup(params.tgt_embed, prev_ids), context], axis=-1)
    h_new, c_new = _lstm_step(x, state.h, state.c, params.dec_w, params.dec_u, params.dec_b, hidden)
    logits = T.add(T.matmul(h_new, params.out_w), params.out_b)
    log_probs = T.log_softmax(logits)
    return log_probs, DecoderState(h=h_new, c=c_new, step=state.step + 1)


def teacher_logprob_batch(params: ModelParams, annotations: Tensor, src_mask: np.ndarray,
                          state: DecoderState, y_in: np.ndarray, y_gold: np.ndarray,
                          y_mask: np.ndarray) -> Tensor:
    """Sum of gold-token log-probabilities per row (B,), teacher-forced.

    ``y_in`` starts with BOS; ``y_gold`` ends with EOS; ``y_mask`` zeroes
    padded steps so padding cannot change any row's total.
    """
    batch, steps = y_in.shape
    total = const(np.zeros(batch))
    for t in range(steps):
        context, _ = attention_batch(params, state, annotations, src_mask)
        log_probs, state = decode_step_batch(params, y_in[:, t], state, context)
        gold_lp = T.gather(log_probs, y_gold[:, t])
        total = T.add(total, T.mul(gold_lp, const(y_mask[:, t])))
    return total


# ---------------------------------------------------------------------------
# single-sequence wrappers
# ---------------------------------------------------------------------------


def _check_source(x: Sequence[int], v_src: int) -> np.ndarray:
    ids = np.asarray(list(x), dtype=np.int64)
    if ids.size == 0:
        raise ValueError("empty source sequence")
    if ids.min() < 0 or ids.max() >= v_src:
        raise ValueError(f"source token id out of range [0, {v_src})")
    return ids


def encode(x: Sequence[int], params: ModelParams):
    """Encode one query; returns annotations (1, |x|, H) and initial state."""
    v_src = params.src_embed.shape[0]
    ids = _check_source(x, v_src)
    return encode_batch(params, ids[None, :])


def attention_context(params: ModelParams, state: DecoderState, annotations: Tensor):
    if annotations.shape[1] == 0:
        raise ValueError("attention over empty annotation sequence")
    return attention_batch(params, state, annotations)


def decode_step(params: ModelParams, prev_token: int, state: DecoderState, context: Tensor):
    return decode_step_batch(params, np.array([prev_token]), state, context)


def scored_target(y: Sequence[int]) -> list:
    """Tokens whose log-probabilities make up log p(y|x): y plus EOS
    (appended when absent)."""
    y = list(y)
    if not y:
        raise ValueError("empty target sequence")
    if y[-1] != EOS_ID:
        y = y + [EOS_ID]
    return y


def sequence_log_prob(x: Sequence[int], y: Sequence[int], params: ModelParams) -> Tensor:
    """log p(y|x) as a (1,)-shaped tensor; differentiable under a tape."""
    gold = scored_target(y)
    v_tgt = params.tgt_embed.shape[0]
    gold_arr = np.asarray(gold, dtype=np.int64)
    if gold_arr.min() < 0 or gold_arr.max() >= v_tgt:
        raise ValueError(f"target token id out of range [0, {v_tgt})")
    annotations, state = encode(x, params)
    y_in = np.array([[BOS_ID] + gold[:-1]])
    y_gold = gold_arr[None, :]
    y_mask = np.ones_like(y_in, dtype=np.float64)
    src_mask = np.ones((1, annotations.shape[1]))
    return teacher_logprob_batch(params, annotations, src_mask, state, y_in, y_gold, y_mask)


def teacher_step_distributions(x: Sequence[int], y: Sequence[int], params: ModelParams) -> np.ndarray:
    """Per-step next-token probability rows (|scored y|, V_tgt), teacher-forced."""
    gold = scored_target(y)
    annotations, state = encode(x, params)
    src_mask = np.ones((1, annotations.shape[1]))
    prev = BOS_ID
    rows = []
    for tok in gold:
        context, _ = attention_batch(params, state, annotations, src_mask)
        log_probs, state = decode_step_batch(params, np.array([prev]), state, context)
        rows.append(np.exp(log_probs.values[0]))
        prev = tok
    return np.array(rows)


def pad_batch(sequences: Sequence[Sequence[int]], pad_id: int = PAD_ID):
    """Right-pad id sequences to a common length; returns (ids, mask)."""
    if not sequences:
        raise ValueError("empty batch")
    width = max(len(s) for s in sequences)
    ids = np.full((len(sequences), width), pad_id, dtype=np.int64)
    mask = np.zeros((len(sequences), width))
    for i, s in enumerate(sequences):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def batch_sequence_log_probs(params: ModelParams, queries: Sequence[Sequence[int]],
                             replies: Sequence[Sequence[int]]) -> Tensor:
    """log p(y_i | x_i) for aligned query/reply lists, as one (B,) tensor."""
    if len(queries) != len(replies):
        raise ValueError("queries and replies differ in length")
    x_ids, x_mask = pad_batch(queries)
    annotations, state = encode_batch(params, x_ids, x_mask)
    golds = [scored_target(y) for y in replies]
    y_gold, y_mask = pad_batch(golds)
    y_in = np.concatenate(
        [np.full((len(golds), 1), BOS_ID, dtype=np.int64), y_gold[:, :-1]], axis=1
    )
    return teacher_logprob_batch(params, annotations, x_mask, state, y_in, y_gold, y_mask)
