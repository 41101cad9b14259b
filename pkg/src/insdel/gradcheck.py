"""Finite-difference checks for every differentiable op and for the combined training loss.

Checks run in float64: float32 central differences at epsilon 1e-3 carry
rounding noise around 1e-5 absolute, which alone breaks a 1e-3 relative bound
on coordinates whose gradient is small.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check_finite_diff
from .model import (
    build_canvas,
    deletion_loss,
    deletion_probs,
    deletion_targets,
    greedy_parallel_insert,
    insertion_logits,
    insertion_loss,
    slot_targets,
)
from .rng import stream
from .training import adversarial_mask
from .transformer import ModelConfig, decoder_forward, init_decoder_params, multi_head_attention

OP_TOLERANCE = 1e-3
MODEL_TOLERANCE = 1e-2
EPSILON = 1e-3


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _op_cases(rng: np.random.Generator) -> dict[str, tuple[tuple[int, ...], Callable[[Tensor], Tensor]]]:
    """name -> (input shape, f) where f reduces the op output to a scalar via fixed random weights."""
    def u(*shape):
        return rng.uniform(-1, 1, shape)

    def proj(out_shape):
        w = u(*out_shape)
        return lambda t: ad.weighted_sum(t, w)

    w34, other, b5 = Tensor(u(3, 4)), Tensor(u(2, 3)), Tensor(u(5))
    g5, bb5 = Tensor(u(5)), Tensor(u(5))
    wb = Tensor(u(2, 4, 3))
    ids = np.array([[0, 2, 1], [3, 3, 0]])
    rows = np.array([2, 0, 2, 1])
    mask = np.array([[False, False, True, False, False]] * 3)
    soft = rng.dirichlet(np.ones(5), 3)
    soft[1] = 0.0  # masked row
    labels = (rng.random(6) > 0.5).astype(float)
    bmask = np.array([1, 1, 0, 1, 1, 1.0])
    bweights = rng.random(6)
    p23, p34, p5, p35, p6 = proj((2, 3)), proj((2, 4)), proj((5,)), proj((3, 5)), proj((6,))
    p243, p3 = proj((2, 2, 3)), proj((3,))
    p_ids, p_rows = proj((2, 3, 5)), proj((4, 5))
    p_t, p_r = proj((5, 3)), proj((3, 5))

    return {
        "add": ((2, 3), lambda x: p23(ad.add(x, other))),
        "add_broadcast": ((3, 5), lambda x: p35(ad.add(x, b5))),
        "sub": ((2, 3), lambda x: p23(ad.sub(other, x))),
        "mul": ((2, 3), lambda x: p23(ad.mul(x, other))),
        "mul_self": ((2, 3), lambda x: p23(ad.mul(x, x))),
        "matmul": ((2, 3), lambda x: p34(ad.matmul(x, w34))),
        "matmul_batched": ((2, 2, 4), lambda x: p243(ad.matmul(x, wb))),
        "sum": ((3, 5), lambda x: p5(ad.sum(x, axis=0))),
        "mean": ((3, 5), lambda x: ad.mean(ad.mul(x, x))),
        "reshape": ((3, 5), lambda x: p_t(ad.reshape(x, (5, 3)))),
        "transpose": ((5, 3), lambda x: p_r(ad.transpose(x, (1, 0)))),
        "take_rows": ((3, 5), lambda x: p_rows(ad.take_rows(x, rows))),
        "embedding": ((4, 5), lambda x: p_ids(ad.embedding(x, ids))),
        "relu": ((3, 5), lambda x: p35(ad.relu(x))),
        "sigmoid": ((3, 5), lambda x: p35(ad.sigmoid(x))),
        "dropout": ((3, 5), lambda x: p35(ad.dropout(x, 0.3, np.random.default_rng(7)))),
        "softmax_rows": ((3, 5), lambda x: p35(ad.softmax_rows(x))),
        "softmax_rows_masked": ((3, 5), lambda x: p35(ad.softmax_rows(x, mask=mask))),
        "layer_norm": ((3, 5), lambda x: p35(ad.layer_norm(x, g5, bb5))),
        "layer_norm_gain": ((5,), lambda x: p35(ad.layer_norm(Tensor(soft + 0.3), x, bb5))),
        "weighted_sum": ((3, 5), lambda x: ad.weighted_sum(ad.mul(x, x), soft)),
        "cross_entropy_rows": ((3, 5), lambda x: p3(ad.cross_entropy_rows(x, soft))),
        "weighted_cross_entropy": ((3, 5), lambda x: ad.weighted_cross_entropy(x, soft)),
        "binary_cross_entropy": ((6,), lambda x: ad.binary_cross_entropy(ad.sigmoid(x), labels, bmask)),
        "bce_sum": ((6,), lambda x: ad.bce_sum(ad.sigmoid(x), labels, bweights)),
        "neg_scale": ((6,), lambda x: p6(-ad.mul(x, 2.5))),
    }


def tiny_model_config(max_positions: int = 16) -> ModelConfig:
    return ModelConfig(d_model=8, n_heads=2, n_layers=1, d_ffn=16, max_positions=max_positions, dropout_rate=0.0)


def check_ops(seed: int = 0, cases=None) -> list[CheckResult]:
    results = []
    with ad.precision(np.float64):
        rng = stream(seed, "gradcheck", "ops")
        cases = _op_cases(rng) if cases is None else cases
        for name, (shape, f) in cases.items():
            x = Tensor(rng.uniform(-1, 1, shape))
            results.append(CheckResult(name, grad_check_finite_diff(f, x, EPSILON), OP_TOLERANCE))
    return results


def _params_check(name: str, params, loss_of: Callable[[], Tensor], tolerance: float) -> CheckResult:
    """Max error over every tensor in ``params``, each swapped in for the probe input."""
    worst = 0.0
    for key, tensor in list(params.named()):
        def f(x, key=key, original=tensor):
            params.tensors[key] = x
            try:
                return loss_of()
            finally:
                params.tensors[key] = original
        probe = Tensor(tensor.data.copy())
        worst = max(worst, grad_check_finite_diff(f, probe, EPSILON))
    return CheckResult(name, worst, tolerance)


def check_transformer(seed: int = 0) -> list[CheckResult]:
    """Attention and the full decoder stack on a 4-token canvas, d_model=8."""
    with ad.precision(np.float64):
        config = tiny_model_config(8)
        params = init_decoder_params(config, 1, stream(seed, "gradcheck", "decoder"))
        _jitter(params, stream(seed, "gradcheck", "jitter"))
        rng = stream(seed, "gradcheck", "probe")
        tokens = np.array([1, 5, 2, 2])
        segments = np.array([0, 0, 0, 1])
        pad = np.array([False, False, False, True])
        w_out = rng.uniform(-1, 1, (4, config.d_model))
        x_in = rng.uniform(-1, 1, (4, config.d_model))

        attn = grad_check_finite_diff(
            lambda x: ad.weighted_sum(multi_head_attention(x, pad, params, config.n_heads, "layer0."), w_out),
            Tensor(x_in), EPSILON)
        stack = _params_check(
            "decoder_forward", params,
            lambda: ad.weighted_sum(decoder_forward(tokens, segments, pad, params, config), w_out),
            MODEL_TOLERANCE)
    return [CheckResult("multi_head_attention", attn, MODEL_TOLERANCE), stack]


def _jitter(params, rng) -> None:
    # default init is close to zero; larger weights make the check exercise every path
    for t in params:
        t.data = t.data + rng.normal(0, 0.3, t.shape)


def check_combined_loss(seed: int = 0, source: str = "abc", target: str = "klm") -> list[CheckResult]:
    """Insertion + deletion loss on a 3-letter example, checked over every parameter of both models.

    The post-insertion canvas is computed once and then held fixed, exactly as
    in training where inserted tokens are data rather than a function of the
    insertion parameters.
    """
    with ad.precision(np.float64):
        config = tiny_model_config()
        ins = init_decoder_params(config, config.vocab_size, stream(seed, "gradcheck", "ins"))
        dele = init_decoder_params(config, 1, stream(seed, "gradcheck", "del"))
        _jitter(ins, stream(seed, "gradcheck", "jitter-ins"))
        _jitter(dele, stream(seed, "gradcheck", "jitter-del"))
        canvas = build_canvas(source, target[1], [1])
        targets = slot_targets(canvas, target)
        with ad.no_grad():
            scores = insertion_logits(canvas, ins, config).data
        scores = adversarial_mask(scores, targets, 1.0, stream(seed, "gradcheck", "adv"))
        after, records = greedy_parallel_insert(canvas, scores, targets)
        labels = deletion_targets(records, after)

        def loss():
            li = insertion_loss(insertion_logits(canvas, ins, config), targets)
            ld = deletion_loss(deletion_probs(after, dele, config), labels)
            return ad.add(li, ld)

        return [
            _params_check("combined_loss[insertion params]", ins, loss, MODEL_TOLERANCE),
            _params_check("combined_loss[deletion params]", dele, loss, MODEL_TOLERANCE),
        ]


def run_all(seed: int = 0) -> list[CheckResult]:
    return check_ops(seed) + check_transformer(seed) + check_combined_loss(seed)
