"""Transformer encoder, LSTM decoder and the pointer-generator mixture.

Every forward function takes ``params`` as a mapping of parameter name to
``Tensor`` bound to the caller's tape (see ``ModelParameters.on_tape``), so
one set of weights can be evaluated on many independent tapes.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from copyforge.autodiff import (
    Tape,
    Tensor,
    add,
    add_bias,
    apply_unary,
    clamp,
    concat_last,
    gather_rows,
    layer_norm,
    matmul,
    mul,
    mul_scalar,
    pad_last,
    scatter_sum,
    slice_last,
    softmax_masked,
    sub,
    transpose,
)
from copyforge.config import ModelConfig
from copyforge.exceptions import ContractError
from copyforge.models import EncodedExample

P_GEN_FLOOR = 1e-6

Weights = Mapping[str, Tensor]


def parameter_shapes(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Names and shapes of every learnable tensor, in canonical order."""
    E, H, F, V = config.emb_dim, config.hidden_dim, config.enc_ff_dim, config.vocab_size
    shapes: List[Tuple[str, Tuple[int, ...]]] = [("embedding", (V, E))]
    for layer in range(config.enc_layers):
        p = f"encoder.{layer}"
        shapes += [
            (f"{p}.attn.query", (E, E)),
            (f"{p}.attn.key", (E, E)),
            (f"{p}.attn.value", (E, E)),
            (f"{p}.attn.out", (E, E)),
            (f"{p}.attn.out.bias", (E,)),
            (f"{p}.ln1.gain", (E,)),
            (f"{p}.ln1.bias", (E,)),
            (f"{p}.ff.in", (E, F)),
            (f"{p}.ff.in.bias", (F,)),
            (f"{p}.ff.out", (F, E)),
            (f"{p}.ff.out.bias", (E,)),
            (f"{p}.ln2.gain", (E,)),
            (f"{p}.ln2.bias", (E,)),
        ]
    shapes += [("encoder.proj", (E, H)), ("encoder.proj.bias", (H,))]
    for layer in range(config.dec_layers):
        # layer 0 is input-fed: [embedding(prev token); previous context]
        in_dim = E + H if layer == 0 else H
        shapes += [
            (f"decoder.{layer}.lstm", (in_dim + H, 4 * H)),
            (f"decoder.{layer}.lstm.bias", (4 * H,)),
        ]
    shapes += [
        ("attention.W_h", (H, H)),
        ("attention.W_s", (H, H)),
        ("attention.v", (H,)),
        ("output.W_v", (2 * H, H)),
        ("output.W_v.bias", (H,)),
        ("output.W_vprime", (H, V)),
        ("output.W_vprime.bias", (V,)),
        ("switch.w_h", (H, 1)),
        ("switch.w_s", (H, 1)),
        ("switch.w_y", (E, 1)),
        ("switch.bias", (1,)),
    ]
    return shapes


class ModelParameters:
    """Named float64 arrays holding every learnable quantity."""

    def __init__(self, tensors: Dict[str, np.ndarray]) -> None:
        self.tensors = tensors

    def names(self) -> List[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: object) -> bool:
        return name in self.tensors

    def copy(self) -> "ModelParameters":
        return ModelParameters({name: value.copy() for name, value in self.tensors.items()})

    def on_tape(self, tape: Tape, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {name: tape.leaf(value, requires_grad=requires_grad) for name, value in self.tensors.items()}

    @staticmethod
    def no_decay(name: str) -> bool:
        """Biases and layer-norm parameters are excluded from weight decay."""
        return name.endswith(".bias") or ".ln" in name


def init_params(config: ModelConfig) -> ModelParameters:
    rng = np.random.default_rng(config.seed)
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        if name.endswith(".bias"):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        else:
            fan_in = shape[0]
            fan_out = shape[1] if len(shape) > 1 else 1
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParameters(tensors)


def positional_encoding(length: int, dim: int) -> np.ndarray:
    positions = np.arange(length, dtype=np.float64)[:, None]
    rates = np.power(10000.0, -(2.0 * (np.arange(dim) // 2)) / dim)
    angles = positions * rates[None, :]
    pe = np.zeros((length, dim))
    pe[:, 0::2] = np.sin(angles[:, 0::2])
    pe[:, 1::2] = np.cos(angles[:, 1::2])
    return pe


@dataclass
class EncoderOutput:
    h: Tensor
    src_mask: np.ndarray
    # W_h h_i, computed once per source on first attention
    h_proj: Optional[Tensor] = None


@dataclass
class DecoderState:
    h: List[Tensor]
    c: List[Tensor]
    context: Tensor


@dataclass
class StepOutput:
    s_t: Tensor
    e_t: Tensor
    alpha_t: Tensor
    c_t: Tensor
    p_vocab: Tensor
    p_gen: Tensor
    p_final: Tensor

    @property
    def p_gen_value(self) -> float:
        return self.p_gen.item()


def _self_attention(x: Tensor, mask: np.ndarray, params: Weights, prefix: str, heads: int) -> Tensor:
    dim = x.shape[1]
    head_dim = dim // heads
    q = matmul(x, params[f"{prefix}.attn.query"])
    k = matmul(x, params[f"{prefix}.attn.key"])
    v = matmul(x, params[f"{prefix}.attn.value"])
    merged: Optional[Tensor] = None
    for head in range(heads):
        lo, hi = head * head_dim, (head + 1) * head_dim
        qh, kh, vh = (slice_last(t, lo, hi) if heads > 1 else t for t in (q, k, v))
        scores = apply_unary("scale", matmul(qh, transpose(kh)), c=1.0 / math.sqrt(head_dim))
        out = matmul(softmax_masked(scores, mask), vh)
        merged = out if merged is None else concat_last(merged, out)
    assert merged is not None
    return add_bias(matmul(merged, params[f"{prefix}.attn.out"]), params[f"{prefix}.attn.out.bias"])


def _encoder_layer(x: Tensor, mask: np.ndarray, params: Weights, prefix: str, heads: int) -> Tensor:
    attended = _self_attention(x, mask, params, prefix, heads)
    x = layer_norm(add(x, attended), params[f"{prefix}.ln1.gain"], params[f"{prefix}.ln1.bias"])
    hidden = apply_unary("relu", add_bias(matmul(x, params[f"{prefix}.ff.in"]), params[f"{prefix}.ff.in.bias"]))
    ff = add_bias(matmul(hidden, params[f"{prefix}.ff.out"]), params[f"{prefix}.ff.out.bias"])
    return layer_norm(add(x, ff), params[f"{prefix}.ln2.gain"], params[f"{prefix}.ln2.bias"])


def encode(
    src_ids: Sequence[int],
    params: Weights,
    config: ModelConfig,
    src_mask: Optional[Sequence[bool]] = None,
    dropout_rng: Optional[np.random.Generator] = None,
) -> EncoderOutput:
    n = len(src_ids)
    if n == 0:
        raise ContractError("Source sequence is empty", reason="empty source")
    if n > config.max_src_len:
        raise ContractError(f"Source length {n} exceeds max_src_len={config.max_src_len}", reason="length overflow")
    mask = np.ones(n, dtype=bool) if src_mask is None else np.asarray(src_mask, dtype=bool)
    tape = params["embedding"].tape

    x = gather_rows(params["embedding"], list(src_ids))
    x = add(x, tape.constant(positional_encoding(n, config.emb_dim)))
    for layer in range(config.enc_layers):
        x = _encoder_layer(x, mask, params, f"encoder.{layer}", config.enc_heads)
    h = add_bias(matmul(x, params["encoder.proj"]), params["encoder.proj.bias"])
    if dropout_rng is not None and config.dropout > 0.0:
        keep = (dropout_rng.random(h.shape) >= config.dropout) / (1.0 - config.dropout)
        h = mul(h, tape.constant(keep))
    return EncoderOutput(h=h, src_mask=mask)


def _attend(encoder_out: EncoderOutput, s_t: Tensor, params: Weights) -> Tuple[Tensor, Tensor, Tensor]:
    if encoder_out.h_proj is None:
        encoder_out.h_proj = matmul(encoder_out.h, params["attention.W_h"])
    features = apply_unary("tanh", add_bias(encoder_out.h_proj, matmul(s_t, params["attention.W_s"])))
    e_t = matmul(features, params["attention.v"])
    alpha_t = softmax_masked(e_t, encoder_out.src_mask)
    c_t = matmul(alpha_t, encoder_out.h)
    return e_t, alpha_t, c_t


def attention(h: Tensor, s_t: Tensor, src_mask: Sequence[bool], params: Weights) -> Tuple[Tensor, Tensor]:
    """(alpha_t, c_t) for decoder state ``s_t`` over encoder states ``h``."""
    _, alpha_t, c_t = _attend(EncoderOutput(h=h, src_mask=np.asarray(src_mask, dtype=bool)), s_t, params)
    return alpha_t, c_t


def vocab_distribution(s_t: Tensor, c_t: Tensor, params: Weights) -> Tensor:
    hidden = add_bias(matmul(concat_last(s_t, c_t), params["output.W_v"]), params["output.W_v.bias"])
    logits = add_bias(matmul(hidden, params["output.W_vprime"]), params["output.W_vprime.bias"])
    return softmax_masked(logits, np.ones(logits.shape[-1], dtype=bool))


def generation_probability(c_t: Tensor, s_t: Tensor, y_t_emb: Tensor, params: Weights) -> Tensor:
    z = add(
        add(matmul(c_t, params["switch.w_h"]), matmul(s_t, params["switch.w_s"])),
        add(matmul(y_t_emb, params["switch.w_y"]), params["switch.bias"]),
    )
    return clamp(apply_unary("sigmoid", z), P_GEN_FLOOR, 1.0 - P_GEN_FLOOR)


def final_distribution(
    p_vocab: Tensor,
    p_gen: Tensor,
    alpha_t: Tensor,
    src_ext_ids: Sequence[int],
    ext_size: int,
) -> Tensor:
    tape = p_vocab.tape
    generated = mul_scalar(pad_last(p_vocab, ext_size), p_gen)
    p_copy = sub(tape.constant(np.ones(p_gen.shape)), p_gen)
    copied = mul_scalar(scatter_sum(alpha_t, src_ext_ids, ext_size), p_copy)
    return add(generated, copied)


def initial_state(tape: Tape, config: ModelConfig) -> DecoderState:
    zeros = np.zeros(config.hidden_dim)
    return DecoderState(
        h=[tape.constant(zeros) for _ in range(config.dec_layers)],
        c=[tape.constant(zeros) for _ in range(config.dec_layers)],
        context=tape.constant(zeros),
    )


def _lstm_cell(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: Weights, layer: int) -> Tuple[Tensor, Tensor]:
    H = h_prev.shape[0]
    z = add_bias(
        matmul(concat_last(x, h_prev), params[f"decoder.{layer}.lstm"]),
        params[f"decoder.{layer}.lstm.bias"],
    )
    i = apply_unary("sigmoid", slice_last(z, 0, H))
    f = apply_unary("sigmoid", slice_last(z, H, 2 * H))
    g = apply_unary("tanh", slice_last(z, 2 * H, 3 * H))
    o = apply_unary("sigmoid", slice_last(z, 3 * H, 4 * H))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, apply_unary("tanh", c))
    return h, c


def decoder_step(
    prev_token_id: int,
    prev_state: DecoderState,
    encoder_out: EncoderOutput,
    params: Weights,
    example: EncodedExample,
    config: ModelConfig,
) -> Tuple[StepOutput, DecoderState]:
    """One decoder step; the previous context rides in ``prev_state``."""
    if not 0 <= prev_token_id < config.vocab_size:
        raise ContractError(
            f"Decoder input {prev_token_id} is outside the base vocabulary; feed OOVs back as UNK",
            reason="decoder input",
        )
    y_t = gather_rows(params["embedding"], prev_token_id)
    x = concat_last(y_t, prev_state.context)
    hs: List[Tensor] = []
    cs: List[Tensor] = []
    for layer in range(config.dec_layers):
        h, c = _lstm_cell(x, prev_state.h[layer], prev_state.c[layer], params, layer)
        hs.append(h)
        cs.append(c)
        x = h
    s_t = hs[-1]

    e_t, alpha_t, c_t = _attend(encoder_out, s_t, params)
    p_vocab = vocab_distribution(s_t, c_t, params)
    p_gen = generation_probability(c_t, s_t, y_t, params)
    p_final = final_distribution(p_vocab, p_gen, alpha_t, example.src_ext_ids, example.ext_size)
    step = StepOutput(s_t=s_t, e_t=e_t, alpha_t=alpha_t, c_t=c_t, p_vocab=p_vocab, p_gen=p_gen, p_final=p_final)
    return step, DecoderState(h=hs, c=cs, context=c_t)


def teacher_forced_steps(
    example: EncodedExample,
    params: Weights,
    config: ModelConfig,
    dropout_rng: Optional[np.random.Generator] = None,
) -> List[StepOutput]:
    """Run the decoder over the gold target, one StepOutput per target position."""
    encoder_out = encode(example.src_ids, params, config, example.mask, dropout_rng)
    state = initial_state(params["embedding"].tape, config)
    steps: List[StepOutput] = []
    for t in range(example.n_steps):
        step, state = decoder_step(example.tgt_ids[t], state, encoder_out, params, example, config)
        steps.append(step)
    return steps
