"""Layer-wise calibration of quantized weights and exponents.

Two weight learners are provided:

* ``nupes``: the quantized values themselves are learned as a single tensor
  ``eps`` in code units, passed through a soft rounding function (``dsq``)
  during training and hard-rounded at the end. Values may move by more than
  one step.
* ``adaround``: weights are floored and a rectified-sigmoid offset in
  ``[0, 1]`` decides rounding up or down, with an annealed binarizing penalty.

The exponent ``a`` of a layer can be learned alongside (or instead of) the
weights. Its gradient only flows through the transform ``sign(x)|x|^a`` of
weights and inputs; scales are recomputed after each update and never
differentiated.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from .quant import (
    MAX_EXPONENT,
    MIN_EXPONENT,
    QuantConfig,
    QuantizedTensor,
    compute_scale,
    inverse_power_transform,
    power_transform,
    round_half_away,
)
from .runtime import ModelSpec, QuantLayer, QuantizedModel, QuantPolicy, layer_activations
from .tensor import group_view, matmul, ungroup

BETA_FLOOR = 1e-3


class DivergenceError(RuntimeError):
    pass


class NonFiniteGradient(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# soft rounding


def rectified_sigmoid(eps):
    return np.clip(1.2 / (1.0 + np.exp(-np.asarray(eps, dtype=np.float64))) - 0.1, 0.0, 1.0)


def rectified_sigmoid_grad(eps):
    sig = 1.0 / (1.0 + np.exp(-np.asarray(eps, dtype=np.float64)))
    inside = (1.2 * sig - 0.1 > 0) & (1.2 * sig - 0.1 < 1)
    return np.where(inside, 1.2 * sig * (1 - sig), 0.0)


def adaround_regularizer(eps, lam: float, beta: float) -> float:
    """``lam * sum(1 - |2 sigma(eps) - 1|^beta)``."""
    if lam == 0:
        return 0.0
    h = rectified_sigmoid(eps)
    return float(lam * np.sum(1.0 - np.abs(2 * h - 1) ** beta))


def adaround_regularizer_grad(eps, lam: float, beta: float):
    if lam == 0:
        return np.zeros_like(np.asarray(eps, dtype=np.float64))
    h = rectified_sigmoid(eps)
    c = 2 * h - 1
    dh = -beta * np.abs(c) ** (beta - 1) * np.sign(c) * 2
    return lam * dh * rectified_sigmoid_grad(eps)


def dsq(eps, beta: float):
    """Soft staircase: fixes every integer and every half-integer."""
    eps = np.asarray(eps, dtype=np.float64)
    n = np.floor(eps)
    return np.tanh(beta * (eps - 0.5 - n)) / (2 * np.tanh(beta / 2)) + n + 0.5


def dsq_grad(eps, beta: float):
    eps = np.asarray(eps, dtype=np.float64)
    th = np.tanh(beta * (eps - 0.5 - np.floor(eps)))
    return beta * (1 - th * th) / (2 * np.tanh(beta / 2))


@dataclass(frozen=True)
class BetaScheduler:
    """Steepness schedule over ``total_steps`` steps.

    ``adaround`` rises from 2 to 20 along a half cosine, ``const`` is ``c``
    everywhere and ``power`` is ``20 (s/S)^c``.
    """

    kind: str = "const"
    total_steps: int = 10_000
    c: float = 20.0

    def __post_init__(self):
        if self.kind not in ("adaround", "const", "power"):
            raise ValueError(f"unknown beta scheduler {self.kind!r}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")

    @classmethod
    def parse(cls, text: str, total_steps: int = 10_000) -> "BetaScheduler":
        kind, _, c = text.partition(":")
        if kind == "adaround":
            return cls("adaround", total_steps)
        if kind not in ("const", "power") or not c:
            raise ValueError(f"bad scheduler {text!r}; use adaround, const:C or power:C")
        return cls(kind, total_steps, float(c))

    def __str__(self):
        return "adaround" if self.kind == "adaround" else f"{self.kind}:{self.c:g}"

    def at(self, s: float) -> float:
        return beta_at(self, s)


def beta_at(sched: BetaScheduler, s: float) -> float:
    frac = s / sched.total_steps
    if sched.kind == "adaround":
        beta = 20 - 9 * (1 + math.cos(frac * math.pi))
    elif sched.kind == "const":
        beta = sched.c
    else:
        beta = 20 * frac ** sched.c
    # power schedules start at exactly 0
    return max(beta, BETA_FLOOR)


# ---------------------------------------------------------------------------
# exponent gradient


def power_jacobian(x, a: float, floor: float = 1e-6):
    """d/da of ``sign(x)|x|^a`` with ``|x|`` clipped below at ``floor``.

    Zeros take the positive branch so the clipped value stays defined.
    """
    x = np.asarray(x, dtype=np.float64)
    mag = np.maximum(np.abs(x), floor)
    sgn = np.where(x < 0, -1.0, 1.0)
    return sgn * mag ** a * np.log(mag)


def exponent_backward(x, w, a: float, grad_x, grad_w, floor: float = 1e-6) -> float:
    """Gradient of the loss w.r.t. ``a`` from input and weight transforms.

    ``grad_x``/``grad_w`` are gradients w.r.t. the transformed tensors. The two
    contributions are averaged over their own element counts before being
    added, so neither dominates because of the batch size. Exact summation
    keeps the result unchanged when the batch is duplicated.
    """
    total = 0.0
    for name, t, g in (("inputs", x, grad_x), ("weights", w, grad_w)):
        if t is None:
            continue
        with np.errstate(invalid="ignore", over="ignore"):
            terms = (np.asarray(g, dtype=np.float64) * power_jacobian(t, a, floor)).ravel()
        if not np.all(np.isfinite(terms)):
            raise NonFiniteGradient(f"non-finite exponent gradient from {name}")
        total += math.fsum(terms) / terms.size
    return total


# ---------------------------------------------------------------------------
# optimizer state


def adam_update(param, grad, m, v, t: int, lr: float, b1=0.9, b2=0.999, eps=1e-8):
    """One in-place Adam step on arrays ``param``, ``m`` and ``v``."""
    m *= b1
    m += (1 - b1) * grad
    v *= b2
    v += (1 - b2) * grad * grad
    mhat = m / (1 - b1 ** t)
    vhat = v / (1 - b2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


@dataclass
class OptConfig:
    steps: int = 10_000
    batch_size: int = 32
    num_samples: int = 1024
    lr_eps: float = 1e-3
    lr_exponent: float = 1e-4
    mode: str = "w"                 # w | a | wa
    method: str = "nupes"           # nupes | adaround
    scheduler: str = "const:20"
    reg_warmup: float = 0.2
    reg_lambda: float = 0.01
    clip_floor: float = 1e-6
    init_exponent: float = 0.5
    eval_every: int = 0             # 0 -> steps // 20
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("w", "a", "wa"):
            raise ValueError(f"mode must be w, a or wa, got {self.mode!r}")
        if self.method not in ("nupes", "adaround"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "adaround" and self.mode != "w":
            raise ValueError("adaround only learns weights")
        if self.batch_size > self.num_samples:
            raise ValueError("batch size exceeds calibration samples")
        if self.lr_eps <= 0 or self.lr_exponent <= 0:
            raise ValueError("learning rates must be positive")
        BetaScheduler.parse(self.scheduler, self.steps)


@dataclass
class LayerOptState:
    """Persistent state of one layer under optimization.

    Besides scalars and scales, the only weight-shaped arrays are ``eps`` and
    its two Adam moments.
    """

    eps: np.ndarray | None
    a: float
    m_eps: np.ndarray | None = None
    v_eps: np.ndarray | None = None
    m_a: float = 0.0
    v_a: float = 0.0
    step: int = 0
    weight_scales: np.ndarray | None = None
    act_scale: float | None = None

    MOMENTS = ("m_eps", "v_eps")


@dataclass
class AdaRoundState:
    w_floor: np.ndarray
    eps: np.ndarray
    a: float
    m_eps: np.ndarray = None
    v_eps: np.ndarray = None
    step: int = 0
    weight_scales: np.ndarray | None = None
    act_scale: float | None = None

    MOMENTS = ("m_eps", "v_eps")


def weight_shaped_tensors(state, shape) -> dict:
    """Floating arrays of the given shape held by ``state``, moments excluded."""
    out = {}
    for f in fields(state):
        val = getattr(state, f.name)
        if f.name in state.MOMENTS:
            continue
        if isinstance(val, np.ndarray) and val.shape == tuple(shape) and val.dtype.kind == "f":
            out[f.name] = val
    return out


# ---------------------------------------------------------------------------
# layer optimization


@dataclass
class LayerRecord:
    layer: int
    mode: str
    steps: int
    beta_scheduler: str
    initial_loss: float
    final_loss: float
    learned_a: float
    seconds: float

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _expand(scales, shape, granularity):
    grouped_shape = group_view(np.empty(shape), granularity).shape
    return ungroup(np.broadcast_to(scales[..., None], grouped_shape), shape, granularity)


def _inv_grad(u, a, floor):
    """d/du of ``sign(u)|u|^(1/a)``."""
    if a == 1.0:
        return np.ones_like(u)
    return np.maximum(np.abs(u), floor) ** (1.0 / a - 1.0) / a


def _act_quant(x, acfg, a, scale=None):
    """Fake-quantize activations with exponent ``a``; returns (x_hat, u, scale)."""
    t = power_transform(x, a)
    if scale is None:
        scale = float(compute_scale(t, acfg.bits).item())
    B = acfg.max_code
    u = np.clip(round_half_away(t / scale), -B, B) * scale
    return inverse_power_transform(u, a), u, scale


def _layer_out(x_hat, w_hat, bias, activation):
    z = matmul(x_hat, w_hat) + bias
    return (np.maximum(z, 0) if activation == "relu" else z), z


class _LayerProblem:
    """Calibration data and hard-quantized evaluation shared by both learners."""

    def __init__(self, layer, x_fp, x_q, wcfg, acfg, cfg):
        self.layer = layer
        self.W = layer.weights.astype(np.float64)
        self.x_q = np.asarray(x_q, dtype=np.float64)
        self.y_fp, _ = _layer_out(np.asarray(x_fp, dtype=np.float64), self.W, layer.bias, layer.activation)
        self.wcfg, self.acfg, self.cfg = wcfg, acfg, cfg
        self.B = wcfg.max_code
        self.rng = np.random.default_rng(cfg.seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def batch(self):
        n, bs = len(self.x_q), self.cfg.batch_size
        if self._pos + bs > len(self._order):
            self._order = self.rng.permutation(n)
            self._pos = 0
        idx = self._order[self._pos:self._pos + bs]
        self._pos += bs
        return idx

    def weight_scales(self, a):
        return compute_scale(power_transform(self.W, a), self.wcfg.bits, self.wcfg.granularity)

    def hard_loss(self, codes, a):
        scales = self.weight_scales(a)
        w_hat = inverse_power_transform(codes * _expand(scales, self.W.shape, self.wcfg.granularity), a)
        x_hat = self.x_q
        if self.acfg is not None:
            x_hat, _, _ = _act_quant(self.x_q, self.acfg, a)
        y, _ = _layer_out(x_hat, w_hat, self.layer.bias, self.layer.activation)
        return float(np.mean((y - self.y_fp) ** 2))

    def forward_backward(self, idx, w_hat, a, want_x_grad):
        """Loss on a batch and gradients w.r.t. ``w_hat`` and the input transform."""
        xb = self.x_q[idx]
        u_x = None
        x_hat = xb
        act_scale = None
        if self.acfg is not None:
            x_hat, u_x, act_scale = _act_quant(xb, self.acfg, a)
        y, z = _layer_out(x_hat, w_hat, self.layer.bias, self.layer.activation)
        r = y - self.y_fp[idx]
        loss = float(np.mean(r * r))
        if not math.isfinite(loss):
            raise DivergenceError("loss is not finite")
        dz = 2.0 * r / r.size
        if self.layer.activation == "relu":
            dz = dz * (z > 0)
        g_w_hat = x_hat.T @ dz
        g_u_x = None
        if want_x_grad and u_x is not None:
            g_u_x = (dz @ w_hat.T) * _inv_grad(u_x, a, self.cfg.clip_floor)
        return loss, g_w_hat, xb, g_u_x, act_scale

    def quant_layer(self, codes, a):
        scales = self.weight_scales(a)
        qt = QuantizedTensor(codes.astype(np.int8), scales, float(a), self.wcfg.bits, self.wcfg.granularity)
        act_cfg, act_scale = None, None
        if self.acfg is not None:
            act_cfg = QuantConfig(self.acfg.bits, float(a))
            act_scale = float(compute_scale(power_transform(self.x_q, a), act_cfg.bits).item())
        return QuantLayer(qt, self.layer.bias.copy(), self.layer.activation, act_cfg, act_scale)


def _clip_exponent(a):
    return float(min(max(a, MIN_EXPONENT), MAX_EXPONENT))


def optimize_layer_nupes(layer, x_fp, x_q, cfg: OptConfig, wcfg: QuantConfig,
                         acfg: QuantConfig | None, layer_index: int = 0, state_hook=None):
    """Learn quantized values (and/or the exponent) of one dense layer.

    Returns ``(QuantLayer, LayerRecord)``. The result is the hard-quantized
    state with the lowest calibration loss among the checkpoints, so the final
    loss never exceeds the initial one.
    """
    t0 = time.perf_counter()
    prob = _LayerProblem(layer, x_fp, x_q, wcfg, acfg, cfg)
    sched = BetaScheduler.parse(cfg.scheduler, cfg.steps)
    a = _clip_exponent(wcfg.exponent)
    learn_w, learn_a = cfg.mode in ("w", "wa"), cfg.mode in ("a", "wa")
    G, B, floor = wcfg.granularity, prob.B, cfg.clip_floor

    scales = prob.weight_scales(a)
    state = LayerOptState(eps=None, a=a, weight_scales=scales)
    if learn_w:
        state.eps = power_transform(prob.W, a) / _expand(scales, prob.W.shape, G)
        state.m_eps = np.zeros_like(state.eps)
        state.v_eps = np.zeros_like(state.eps)

    def codes_of(st):
        if learn_w:
            return np.clip(round_half_away(st.eps), -B, B)
        s = _expand(prob.weight_scales(st.a), prob.W.shape, G)
        return np.clip(round_half_away(power_transform(prob.W, st.a) / s), -B, B)

    init_loss = prob.hard_loss(codes_of(state), a)
    best = (init_loss, codes_of(state), a)
    every = cfg.eval_every or max(cfg.steps // 20, 1)

    for step in range(1, cfg.steps + 1):
        idx = prob.batch()
        S = _expand(state.weight_scales, prob.W.shape, G)
        if learn_w:
            beta = sched.at(step - 1)
            soft = dsq(state.eps, beta)
            inside = np.abs(soft) < B
            u_w = np.clip(soft, -B, B) * S
        else:
            u_w = np.clip(round_half_away(power_transform(prob.W, state.a) / S), -B, B) * S
        w_hat = inverse_power_transform(u_w, state.a)
        loss, g_w_hat, xb, g_u_x, act_scale = prob.forward_backward(idx, w_hat, state.a, learn_a)
        g_u_w = g_w_hat * _inv_grad(u_w, state.a, floor)
        state.step = step
        state.act_scale = act_scale
        if learn_w:
            g_eps = g_u_w * S * dsq_grad(state.eps, beta) * inside
            if not np.all(np.isfinite(g_eps)):
                raise DivergenceError(f"non-finite weight gradient at step {step}")
            adam_update(state.eps, g_eps, state.m_eps, state.v_eps, step, cfg.lr_eps)
        if learn_a:
            w_ref = w_hat if learn_w else prob.W
            g_a = exponent_backward(xb if g_u_x is not None else None, w_ref, state.a,
                                    g_u_x, g_u_w, floor)
            state.m_a = 0.9 * state.m_a + 0.1 * g_a
            state.v_a = 0.999 * state.v_a + 0.001 * g_a * g_a
            mhat = state.m_a / (1 - 0.9 ** step)
            vhat = state.v_a / (1 - 0.999 ** step)
            a_old = state.a
            state.a = _clip_exponent(a_old - cfg.lr_exponent * mhat / (math.sqrt(vhat) + 1e-8))
            state.weight_scales = prob.weight_scales(state.a)
            if learn_w and state.a != a_old:
                # keep the learned values fixed in weight space; only the grid moves
                u = state.eps * S
                S_new = _expand(state.weight_scales, prob.W.shape, G)
                state.eps = np.sign(u) * np.abs(u) ** (state.a / a_old) / S_new
        if state_hook is not None:
            state_hook(state, prob)
        if step % every == 0 or step == cfg.steps:
            codes = codes_of(state)
            val = prob.hard_loss(codes, state.a)
            if not math.isfinite(val):
                raise DivergenceError(f"calibration loss diverged at step {step}")
            if val < best[0]:
                best = (val, codes, state.a)

    final_loss, codes, a = best
    record = LayerRecord(layer_index, cfg.mode, cfg.steps, str(sched), init_loss, final_loss,
                         float(a), time.perf_counter() - t0)
    return prob.quant_layer(codes, a), record


def optimize_layer_adaround(layer, x_fp, x_q, cfg: OptConfig, wcfg: QuantConfig,
                            acfg: QuantConfig | None, layer_index: int = 0, state_hook=None):
    """Learn to round each weight up or down; the exponent stays fixed."""
    t0 = time.perf_counter()
    prob = _LayerProblem(layer, x_fp, x_q, wcfg, acfg, cfg)
    reg_sched = BetaScheduler("adaround", cfg.steps)
    a = _clip_exponent(wcfg.exponent)
    G, B, floor = wcfg.granularity, prob.B, cfg.clip_floor
    scales = prob.weight_scales(a)
    S = _expand(scales, prob.W.shape, G)
    scaled = power_transform(prob.W, a) / S
    # float32 weights that sit on the grid land a hair below the integer
    near = np.round(scaled)
    scaled = np.where(np.abs(scaled - near) < 1e-6, near, scaled)
    w_floor = np.floor(scaled)
    rest = scaled - w_floor
    p = np.clip((rest + 0.1) / 1.2, 1e-12, 1 - 1e-12)
    eps = np.log(p / (1 - p))
    state = AdaRoundState(w_floor, eps, a, np.zeros_like(eps), np.zeros_like(eps),
                          weight_scales=scales)

    def codes_of(st):
        return np.clip(st.w_floor + (rectified_sigmoid(st.eps) >= 0.5), -B, B)

    init_loss = prob.hard_loss(codes_of(state), a)
    best = (init_loss, codes_of(state))
    every = cfg.eval_every or max(cfg.steps // 20, 1)
    warmup = int(cfg.reg_warmup * cfg.steps)

    for step in range(1, cfg.steps + 1):
        idx = prob.batch()
        soft = w_floor + rectified_sigmoid(state.eps)
        inside = np.abs(soft) < B
        u_w = np.clip(soft, -B, B) * S
        w_hat = inverse_power_transform(u_w, a)
        _, g_w_hat, _, _, act_scale = prob.forward_backward(idx, w_hat, a, False)
        lam = 0.0 if step <= warmup else cfg.reg_lambda
        beta = reg_sched.at(step - 1)
        g_eps = g_w_hat * _inv_grad(u_w, a, floor) * S * inside * rectified_sigmoid_grad(state.eps)
        g_eps = g_eps + adaround_regularizer_grad(state.eps, lam, beta)
        if not np.all(np.isfinite(g_eps)):
            raise DivergenceError(f"non-finite weight gradient at step {step}")
        adam_update(state.eps, g_eps, state.m_eps, state.v_eps, step, cfg.lr_eps)
        state.step = step
        state.act_scale = act_scale
        if state_hook is not None:
            state_hook(state, prob, lam)
        if step % every == 0 or step == cfg.steps:
            codes = codes_of(state)
            val = prob.hard_loss(codes, a)
            if not math.isfinite(val):
                raise DivergenceError(f"calibration loss diverged at step {step}")
            if val < best[0]:
                best = (val, codes)

    final_loss, codes = best
    record = LayerRecord(layer_index, "w", cfg.steps, str(reg_sched), init_loss, final_loss,
                         float(a), time.perf_counter() - t0)
    return prob.quant_layer(codes, a), record


def optimize_model(model: ModelSpec, calib, cfg: OptConfig, policy: QuantPolicy | None = None):
    """Quantize ``model`` layer by layer against its full-precision features.

    ``policy`` gives bit-widths and the initial exponent(s); by default W4/A4
    with ``cfg.init_exponent``. Returns ``(QuantizedModel, report)`` where the
    report is a list of per-layer dicts.
    """
    if policy is None:
        policy = QuantPolicy(4, 4, cfg.init_exponent)
    calib = np.asarray(calib, dtype=np.float64)[: cfg.num_samples]
    fp_inputs = layer_activations(model, calib)
    n = len(model.layers)
    learner = optimize_layer_nupes if cfg.method == "nupes" else optimize_layer_adaround
    layers, report = [], []
    h_q = calib
    for i, layer in enumerate(model.layers):
        wcfg = policy.weight_config(i, n)
        acfg = policy.act_config(i, n) if policy.enabled else None
        qlayer, rec = learner(layer, fp_inputs[i], h_q, cfg, wcfg, acfg, layer_index=i)
        layers.append(qlayer)
        report.append(rec.as_dict())
        h_q = qlayer.forward(h_q)
    return QuantizedModel(layers, model.name), report
