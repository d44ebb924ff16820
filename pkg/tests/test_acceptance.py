"""End-to-end acceptance checks.

Each check records one PASS/FAIL line (printed in the pytest terminal summary,
or directly when this file is run as a script). Tolerances are fixed; random
inputs use seeds chosen before the checks were first run.
"""
import functools
import math
import time

import numpy as np
import pytest

from nupes.gptq import (
    AdaRoundState,
    LayerOptState,
    OptConfig,
    dsq,
    dsq_grad,
    exponent_backward,
    optimize_layer_adaround,
    optimize_layer_nupes,
    optimize_model,
    power_jacobian,
    weight_shaped_tensors,
)
from nupes.quant import (
    QuantConfig,
    power_dequantize,
    power_transform,
    quantize,
    reconstruction_error,
    round_half_away,
    uniform_dequantize,
    dequantize,
)
from nupes.runtime import (
    Layer,
    QuantPolicy,
    calibrate,
    evaluate,
    fixture_splits,
    make_dataset,
    train_fixture,
)
from nupes.search import grid_probe, nelder_mead_min, objective
from nupes.tensor import PER_CHANNEL, PER_TENSOR, Granularity, group_view, ungroup

RESULTS = []


def record(name: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# oracles written independently of the library


def eq1_uniform(x, bits, granularity=PER_TENSOR):
    """Symmetric uniform quantizer: codes = round(x / s), s = max|x| / (2^(b-1) - 1)."""
    B = 2 ** (bits - 1) - 1
    g = group_view(np.asarray(x, dtype=np.float64), granularity)
    peak = np.max(np.abs(g), axis=-1)
    s = np.where(peak > 0, peak / B, 1.0)
    v = g / s[..., None]
    codes = np.sign(v) * np.floor(np.abs(v) + 0.5)
    codes = np.clip(codes, -B, B).astype(np.int8)
    return ungroup(codes, np.shape(x), granularity), s


# ---------------------------------------------------------------------------


def test_power_transform_is_multiplicative():
    rng = np.random.default_rng(0)
    n = 100_000
    t0 = time.perf_counter()
    x = np.exp(rng.uniform(-12, 12, n))
    y = np.exp(rng.uniform(-12, 12, n))
    a = rng.uniform(0.05, 2.0, n)
    worst = 0.0
    for xi, yi, ai in zip(x, y, a):
        lhs = power_transform(xi * yi, ai)
        rhs = power_transform(xi, ai) * power_transform(yi, ai)
        worst = max(worst, abs(lhs - rhs) / abs(rhs))
    dt = time.perf_counter() - t0
    record("automorphism (xy)^a = x^a y^a", worst < 1e-12 and dt < 5.0,
           f"{n} pairs, max rel err {worst:.2e} (< 1e-12), {dt:.2f} s (< 5 s)")


def test_unit_exponent_is_uniform_quantization():
    rng = np.random.default_rng(1)
    mismatches, total = 0, 0
    for i in range(10_000):
        bits = 2 + i % 7
        shape = (int(rng.integers(1, 40)), int(rng.integers(1, 12)))
        x = rng.standard_normal(shape) * 10.0 ** rng.uniform(-3, 3)
        if i % 5 == 0:
            x[rng.random(shape) < 0.3] = 0.0
        g = PER_CHANNEL if i % 2 else PER_TENSOR
        q = quantize(x, QuantConfig(bits, 1.0, g))
        codes, s = eq1_uniform(x, bits, g)
        same = (np.array_equal(q.codes, codes) and np.array_equal(q.scales, s)
                and np.array_equal(dequantize(q, np.float64), uniform_dequantize(codes, s, g, np.float64)))
        mismatches += not same
        total += 1
    record("a=1 equals uniform quantization", mismatches == 0,
           f"{total} tensors over b=2..8, {mismatches} not bit-identical")


def test_dequantization_is_multiplicative():
    rng = np.random.default_rng(2)
    B = 7
    codes = np.arange(-B, B + 1)
    worst, pairs = 0.0, 0
    for a in (0.05, 0.25, 0.5, 0.77, 1.0, 1.5, 2.0):
        for _ in range(3):
            sx, sw = 10.0 ** rng.uniform(-3, 1, 2)
            for cx in codes:
                for cw in codes:
                    lhs = power_dequantize(cx * cw, sx * sw, a)
                    rhs = power_dequantize(cx, sx, a) * power_dequantize(cw, sw, a)
                    if rhs == 0:
                        err = 0.0 if lhs == 0 else math.inf
                    else:
                        err = abs(lhs - rhs) / abs(rhs)
                    worst = max(worst, err)
                    pairs += 1
    record("dequant(cx*cw, sx*sw) = dequant(cx)*dequant(cw)", worst < 1e-12,
           f"all {len(codes) ** 2} b=4 code pairs x {pairs // len(codes) ** 2} (a, scales), "
           f"max rel err {worst:.2e} (< 1e-12)")


def test_nelder_mead_agrees_with_grid_scan():
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    bad = []
    for trial in range(20):
        x = rng.standard_normal(4096)
        fn = functools.partial(lambda x, a: objective([x], a, 4), x)
        r = nelder_mead_min(fn)
        probe = grid_probe(fn)
        gmin = float(probe.errors.min())
        da = abs(r.exponent - probe.argmin)
        if not (da <= 0.005 + 1e-12 and r.error <= gmin * 1.001):
            bad.append(f"#{trial}: a_nm={r.exponent:.4f} a_grid={probe.argmin:.3f} "
                       f"obj ratio={r.error / gmin:.5f}")
    dt = time.perf_counter() - t0
    record("Nelder-Mead matches 0.005 grid scan", not bad and dt < 60,
           f"20 Gaussian tensors, {len(bad)} outside |da|<=0.005 & obj<=1.001x grid, {dt:.1f} s (< 60 s)"
           + (f"; {'; '.join(bad)}" if bad else ""))


def test_error_curve_is_locally_convex():
    rng = np.random.default_rng(3)
    convex, unique = 0, 0
    for _ in range(100):
        x = rng.standard_normal(4096)
        probe = grid_probe(lambda a: objective([x], a, 4))
        convex += probe.convex_fraction > 0.5
        unique += probe.unique
    record("error curve convex near its minimum", convex >= 95,
           f"{convex}/100 trials with mostly positive second differences within +-0.05 (>= 95); "
           f"{unique}/100 with a unique grid minimum")


def test_soft_rounding():
    n = np.arange(-50, 51, dtype=np.float64)
    fixed = all(np.array_equal(dsq(n, b), n) for b in (1e-3, 0.5, 2.0, 20.0, 1e3))

    e = np.random.default_rng(4).uniform(0.0, 1.0, 1000)
    h = 1e-4
    fd = (dsq(e + h, 20.0) - dsq(e - h, 20.0)) / (2 * h)
    g = dsq_grad(e, 20.0)
    grad_err = float(np.max(np.abs(g - fd) / np.abs(g)))

    grid = np.arange(-4.0, 4.0, 1e-4)
    off_half = np.abs(grid - np.floor(grid) - 0.5) >= 1e-3
    dev = float(np.max(np.abs(dsq(grid[off_half], 1e3) - round_half_away(grid[off_half]))))

    record("dsq fixed points, gradient, hard limit", fixed and grad_err < 1e-4 and dev < 1e-6,
           f"integers fixed={fixed}; grad vs central diff max rel {grad_err:.2e} (< 1e-4); "
           f"beta=1e3 max |dsq - round| at >= 1e-3 from half-integers {dev:.2e} (< 1e-6)")


def test_exponent_gradient():
    rng = np.random.default_rng(5)
    x, gx = rng.standard_normal((32, 16)), rng.standard_normal((32, 16))
    w, gw = rng.standard_normal((16, 8)), rng.standard_normal((16, 8))
    g1 = exponent_backward(x, w, 0.5, gx, gw)
    g2 = exponent_backward(np.concatenate([x, x]), w, 0.5, np.concatenate([gx, gx]), gw)
    dup = g1 == g2

    worst = 0.0
    for a in (0.1, 0.5, 1.0, 1.7):
        v = rng.standard_normal(2000) * 10.0 ** rng.uniform(-3, 1, 2000)
        v = v[np.abs(v) > 1e-4]
        eta = 1e-6
        fd = (power_transform(v, a + eta) - power_transform(v, a - eta)) / (2 * eta)
        jac = power_jacobian(v, a)
        worst = max(worst, float(np.max(np.abs(jac - fd) / np.abs(jac))))

    zero_ok = True
    for a in (0.05, 0.5, 1.0, 2.0):
        expected = -(1e-6) ** a * abs(math.log(1e-6))
        got = exponent_backward(np.zeros((1, 1)), None, a, np.ones((1, 1)), None)
        zero_ok &= got == pytest.approx(expected, rel=1e-15) and got < 0
    record("exponent backward", dup and worst < 1e-3 and zero_ok,
           f"duplicated batch bit-identical={dup}; Jacobian vs central diff max rel {worst:.2e} (< 1e-3); "
           f"x=0 gives -(1e-6)^a|ln 1e-6|={zero_ok}")


# ---------------------------------------------------------------------------
# trends on the synthetic fixture

FIXTURE = dict(num_classes=4, num_samples=14_000, input_dim=8, separation=3.0)
HIDDEN = (64, 32)
SEEDS = range(5)
STEPS = 10_000


@functools.lru_cache(maxsize=None)
def trend_table():
    """Test accuracies per seed for every method, plus the wall time."""
    from nupes.search import powerquant_datafree

    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        ds = make_dataset(seed=seed, **FIXTURE)
        train, calib, test = fixture_splits(ds, 1024, 8000, seed=seed)
        model = train_fixture(HIDDEN, train, epochs=30, seed=seed)
        flags = dict(first_last_8bit=False)
        row = {"fp": evaluate(model, test)}
        naive = calibrate(model, QuantPolicy(4, 4, 1.0, **flags), calib.features)
        row["naive"] = evaluate(model, test, naive)
        pq = powerquant_datafree(model, 4)
        row["powerquant"] = evaluate(model, test, calibrate(model, pq.policy(4, 4, **flags), calib.features))
        init = QuantPolicy(4, 4, 0.5, **flags)
        for key, mode, sched in (("nupes_w", "w", "const:20"), ("nupes_wa", "wa", "const:20"),
                                 ("nupes_w_cosine", "w", "adaround")):
            cfg = OptConfig(steps=STEPS, mode=mode, scheduler=sched, seed=seed)
            qm, _ = optimize_model(model, calib.features, cfg, init)
            row[key] = evaluate(qm, test)
        rows.append(row)
    medians = {k: float(np.median([r[k] for r in rows])) for k in rows[0]}
    return rows, medians, time.perf_counter() - t0


def test_method_ordering_on_fixture():
    _, med, dt = trend_table()
    order = ["nupes_wa", "nupes_w", "powerquant", "naive"]
    gaps = [100 * (med[a] - med[b]) for a, b in zip(order, order[1:])]
    ok = all(g >= -0.5 for g in gaps) and dt < 15 * 60
    detail = ", ".join(f"{k}={100 * med[k]:.2f}%" for k in ["fp"] + order)
    record("W&a >= W >= data-free >= naive (W4/A4)", ok,
           f"medians over 5 seeds: {detail}; gaps {', '.join(f'{g:+.2f}' for g in gaps)} pt "
           f"(>= -0.5); {dt / 60:.1f} min (< 15)")


def test_constant_schedule_beats_cosine():
    _, med, _ = trend_table()
    gap = 100 * (med["nupes_w"] - med["nupes_w_cosine"])
    record("const(20) >= cosine schedule", gap >= -0.5,
           f"median const(20)={100 * med['nupes_w']:.2f}%, cosine={100 * med['nupes_w_cosine']:.2f}%, "
           f"gap {gap:+.2f} pt (>= -0.5)")


# ---------------------------------------------------------------------------


def test_optimizer_state_memory():
    rng = np.random.default_rng(6)
    layer = Layer(rng.standard_normal((32, 16)).astype(np.float32), np.zeros(16, np.float32), "relu")
    x = rng.standard_normal((64, 32))
    seen = {}

    def nupes_hook(mode):
        def hook(state, prob):
            assert isinstance(state, LayerOptState)
            params = weight_shaped_tensors(state, prob.W.shape)
            moments = [m for m in state.MOMENTS if getattr(state, m) is not None
                       and getattr(state, m).shape == prob.W.shape]
            seen[mode] = (sorted(params), sorted(moments))
        return hook

    for mode in ("w", "wa"):
        cfg = OptConfig(steps=5, batch_size=32, num_samples=64, mode=mode)
        optimize_layer_nupes(layer, x, x, cfg, QuantConfig(4, 0.5), QuantConfig(4, 0.5),
                             state_hook=nupes_hook(mode))

    def ada_hook(state, prob, lam):
        assert isinstance(state, AdaRoundState)
        seen["adaround"] = (sorted(weight_shaped_tensors(state, prob.W.shape)), sorted(state.MOMENTS))

    cfg = OptConfig(steps=5, batch_size=32, num_samples=64, method="adaround")
    optimize_layer_adaround(layer, x, x, cfg, QuantConfig(4, 0.5), QuantConfig(4, 0.5), state_hook=ada_hook)

    ok = (seen["w"] == seen["wa"] == (["eps"], ["m_eps", "v_eps"])
          and len(seen["adaround"][0]) == 2 * len(seen["w"][0]))
    record("one weight-shaped parameter per layer", ok,
           f"learned-values state {seen['w'][0]} + moments {seen['w'][1]}; "
           f"rounding-baseline state {seen['adaround'][0]}")


def test_group_scales_never_worse():
    rng = np.random.default_rng(0)
    worse = []
    count = 0
    for t in range(100):
        n = 128 * int(rng.integers(2, 65))
        x = rng.standard_normal(n)
        for a in (0.5, 1.0):
            e_tensor = reconstruction_error(x, QuantConfig(4, a))
            e_group = reconstruction_error(x, QuantConfig(4, a, Granularity("per-group", 128)))
            count += 1
            if e_group > e_tensor:
                worse.append(f"n={n} a={a} ratio={e_group / e_tensor:.4f}")
    record("per-group(128) error <= per-tensor error", not worse,
           f"{count} Gaussian cases (length 256..8192, b=4), {len(worse)} worse"
           + (f": {'; '.join(worse)}" if worse else ""))


if __name__ == "__main__":
    import sys

    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for fn in tests:
        try:
            fn()
        except AssertionError:
            pass
    print("\n".join(RESULTS))
    sys.exit(0 if all(r.startswith("PASS") for r in RESULTS) else 1)
