"""Dense models, datasets, full-precision and fake-quantized inference.

Model files are a JSON manifest plus one little-endian float32 blob holding
every weight and bias back to back. A quantized bundle is a directory with a
manifest, one serialized :class:`~nupes.quant.QuantizedTensor` per layer, a
float32 bias blob and the frozen activation scales.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .quant import (
    QuantConfig,
    QuantizedTensor,
    compute_scale,
    dequantize,
    fake_quantize,
    power_transform,
    quantize,
    uniform_dequantize,
    uniform_quantize,
)
from .tensor import PER_TENSOR, Granularity, ShapeError, matmul, relu

FORMAT_VERSION = 1
ACTIVATIONS = ("relu", "identity")


class ManifestError(ValueError):
    pass


class DimensionChainError(ValueError):
    pass


class TruncatedBlobError(ValueError):
    pass


class PolicyError(ValueError):
    pass


class FixtureError(RuntimeError):
    pass


def _activate(z, kind):
    return relu(z) if kind == "relu" else z


@dataclass
class Layer:
    weights: np.ndarray          # (in, out)
    bias: np.ndarray             # (out,)
    activation: str = "relu"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float32)
        self.bias = np.asarray(self.bias, dtype=np.float32)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(f"bad layer shapes {self.weights.shape} / {self.bias.shape}")
        if self.activation not in ACTIVATIONS:
            raise ManifestError(f"unknown activation {self.activation!r}")


@dataclass
class ModelSpec:
    layers: list
    name: str = "model"

    def __post_init__(self):
        if not self.layers:
            raise DimensionChainError("model has no layers")
        for i, (a, b) in enumerate(zip(self.layers, self.layers[1:])):
            if a.weights.shape[1] != b.weights.shape[0]:
                raise DimensionChainError(
                    f"layer {i} outputs {a.weights.shape[1]} but layer {i + 1} expects {b.weights.shape[0]}"
                )
        if self.layers[-1].activation != "identity":
            raise DimensionChainError("final layer must have identity activation")

    @property
    def input_dim(self) -> int:
        return self.layers[0].weights.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weights.shape[1]

    @property
    def dims(self) -> list:
        return [self.input_dim] + [l.weights.shape[1] for l in self.layers]


def save_model(model: ModelSpec, path) -> None:
    """Write ``path`` (manifest JSON) and ``path`` with suffix ``.bin``."""
    path = Path(path)
    blob_path = path.with_suffix(".bin")
    chunks, entries, offset = [], [], 0
    for i, layer in enumerate(model.layers):
        rec = {"name": f"layer{i}", "in": int(layer.weights.shape[0]),
               "out": int(layer.weights.shape[1]), "activation": layer.activation}
        for key, arr in (("weights", layer.weights), ("bias", layer.bias)):
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            rec[key] = {"offset": offset, "length": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        entries.append(rec)
    manifest = {"format_version": FORMAT_VERSION, "name": model.name,
                "input_dim": model.input_dim, "output_dim": model.output_dim,
                "blob": blob_path.name, "layers": entries}
    path.write_text(json.dumps(manifest, indent=2))
    blob_path.write_bytes(b"".join(chunks))


def load_model(path) -> ModelSpec:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ManifestError(f"unsupported format_version {manifest.get('format_version')!r}")
        entries = manifest["layers"]
        blob = (path.parent / manifest["blob"]).read_bytes()
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc

    def chunk(ref, shape):
        start, length = ref["offset"], ref["length"]
        if length != 4 * int(np.prod(shape)):
            raise TruncatedBlobError(f"blob entry has {length} bytes, shape {shape} needs {4 * int(np.prod(shape))}")
        if start + length > len(blob):
            raise TruncatedBlobError(f"blob ends at {len(blob)} bytes, entry needs {start + length}")
        return np.frombuffer(blob, dtype="<f4", count=length // 4, offset=start).reshape(shape).copy()

    layers = []
    try:
        for rec in entries:
            w = chunk(rec["weights"], (rec["in"], rec["out"]))
            b = chunk(rec["bias"], (rec["out"],))
            layers.append(Layer(w, b, rec["activation"]))
    except (KeyError, TypeError) as exc:
        raise ManifestError(f"malformed layer entry: {exc}") from exc
    model = ModelSpec(layers, manifest.get("name", "model"))
    if model.input_dim != manifest.get("input_dim", model.input_dim) or \
            model.output_dim != manifest.get("output_dim", model.output_dim):
        raise DimensionChainError("manifest input/output dims disagree with layers")
    return model


def forward_fp(model: ModelSpec, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise ShapeError(f"input shape {h.shape} does not match model input dim {model.input_dim}")
    for layer in model.layers:
        h = _activate(matmul(h, layer.weights) + layer.bias, layer.activation)
    return h


def layer_activations(model: ModelSpec, x) -> list:
    """Input of every layer under full precision, plus the final logits."""
    h = np.asarray(x, dtype=np.float64)
    out = [h]
    for layer in model.layers:
        h = _activate(matmul(h, layer.weights) + layer.bias, layer.activation)
        out.append(h)
    return out


# ---------------------------------------------------------------------------
# quantized inference


@dataclass
class QuantPolicy:
    """Bit-widths and exponents for every layer.

    ``exponents`` is one value shared by all layers or one per layer; the
    activation quantizer of a layer uses the same exponent as its weights.
    """

    weight_bits: int = 4
    act_bits: int = 4
    exponents: float | Sequence[float] = 1.0
    granularity: Granularity = PER_TENSOR
    first_last_8bit: bool = True
    enabled: bool = True
    uniform_reference: bool = False
    act_scales: list | None = None

    def exponent(self, i: int) -> float:
        if np.isscalar(self.exponents):
            return float(self.exponents)
        return float(self.exponents[i])

    def _bits(self, bits, i, n):
        if self.first_last_8bit and i in (0, n - 1):
            return 8
        return bits

    def weight_config(self, i: int, n: int) -> QuantConfig:
        return QuantConfig(self._bits(self.weight_bits, i, n), self.exponent(i), self.granularity)

    def act_config(self, i: int, n: int) -> QuantConfig:
        return QuantConfig(self._bits(self.act_bits, i, n), self.exponent(i))

    def describe(self) -> dict:
        d = dataclasses.asdict(self)
        d["granularity"] = str(self.granularity)
        d["exponents"] = self.exponents if np.isscalar(self.exponents) else list(map(float, self.exponents))
        return d


PASS_THROUGH = QuantPolicy(enabled=False)


@dataclass
class QuantLayer:
    weight: QuantizedTensor
    bias: np.ndarray
    activation: str
    act_config: QuantConfig | None = None
    act_scale: float | None = None

    def weight_values(self) -> np.ndarray:
        return dequantize(self.weight)

    def forward(self, h):
        if self.act_config is not None:
            if self.act_scale is None:
                raise PolicyError("missing frozen activation scale: calibrate the policy first")
            h = fake_quantize(h, self.act_config, scales=self.act_scale, dtype=np.float64)
        return _activate(matmul(h, self.weight_values()) + self.bias, self.activation)


@dataclass
class QuantizedModel:
    layers: list
    name: str = "model"

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def exponents(self) -> list:
        return [l.weight.exponent for l in self.layers]


def forward_bundle(bundle: QuantizedModel, x) -> np.ndarray:
    h = np.asarray(x, dtype=np.float64)
    if h.ndim != 2 or h.shape[1] != bundle.input_dim:
        raise ShapeError(f"input shape {h.shape} does not match model input dim {bundle.input_dim}")
    for layer in bundle.layers:
        h = layer.forward(h)
    return h


def calibrate(model: ModelSpec, policy: QuantPolicy, x) -> QuantPolicy:
    """Freeze activation scales to their maximum over ``x`` (through the quantized prefix)."""
    n = len(model.layers)
    scales = []
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        acfg = policy.act_config(i, n)
        s = float(compute_scale(power_transform(h, acfg.exponent), acfg.bits).item())
        scales.append(s)
        q = QuantLayer(quantize(layer.weights, policy.weight_config(i, n)), layer.bias,
                       layer.activation, acfg, s)
        h = q.forward(h)
    return dataclasses.replace(policy, act_scales=scales)


def quantize_model(model: ModelSpec, policy: QuantPolicy) -> QuantizedModel:
    if policy.act_scales is None:
        raise PolicyError("policy has no frozen activation scales: run calibrate() first")
    n = len(model.layers)
    layers = [
        QuantLayer(quantize(l.weights, policy.weight_config(i, n)), l.bias, l.activation,
                   policy.act_config(i, n), policy.act_scales[i])
        for i, l in enumerate(model.layers)
    ]
    return QuantizedModel(layers, model.name)


def _forward_uniform_reference(model: ModelSpec, policy: QuantPolicy, x) -> np.ndarray:
    n = len(model.layers)
    h = np.asarray(x, dtype=np.float64)
    for i, layer in enumerate(model.layers):
        acfg, wcfg = policy.act_config(i, n), policy.weight_config(i, n)
        codes, s = uniform_quantize(h, acfg.bits, scales=policy.act_scales[i])
        h = uniform_dequantize(codes, s, dtype=np.float64)
        wc, ws = uniform_quantize(layer.weights, wcfg.bits, wcfg.granularity)
        w = uniform_dequantize(wc, ws, wcfg.granularity)
        h = _activate(matmul(h, w) + layer.bias, layer.activation)
    return h


def forward_quant(model: ModelSpec, policy: QuantPolicy, x) -> np.ndarray:
    if not policy.enabled:
        return forward_fp(model, x)
    if policy.act_scales is None:
        raise PolicyError("policy has no frozen activation scales: run calibrate() first")
    if policy.uniform_reference:
        return _forward_uniform_reference(model, policy, x)
    return forward_bundle(quantize_model(model, policy), x)


def integer_dense(x, layer: QuantLayer) -> np.ndarray:
    """Pre-activation output computed from integer code products.

    Each product ``c_x c_w`` is dequantized with scale ``s_x s_w`` before the
    sum, which is what an integer kernel with a power lookup would do.
    """
    if layer.act_config.exponent != layer.weight.exponent:
        raise PolicyError("integer path needs one exponent for weights and activations")
    qx = quantize(x, layer.act_config, scales=layer.act_scale)
    a = layer.weight.exponent
    cx = qx.codes.astype(np.int64)
    cw = layer.weight.codes.astype(np.int64)
    prod = cx[:, :, None] * cw[None, :, :]
    scale = qx.scales.item() * layer.weight.scales.item()
    u = prod * scale
    vals = np.sign(u) * np.abs(u) ** (1.0 / a)
    return vals.sum(axis=1) + layer.bias


def save_bundle(bundle: QuantizedModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, biases, offset = [], [], 0
    for i, layer in enumerate(bundle.layers):
        fname = f"layer{i}.qt"
        layer.weight.save(d / fname)
        raw = np.ascontiguousarray(layer.bias, dtype="<f4").tobytes()
        acfg = layer.act_config
        entries.append({
            "weights": fname,
            "bias": {"offset": offset, "length": len(raw)},
            "activation": layer.activation,
            "act_bits": acfg.bits if acfg else None,
            "act_exponent": acfg.exponent if acfg else None,
        })
        biases.append(raw)
        offset += len(raw)
    (d / "bias.bin").write_bytes(b"".join(biases))
    (d / "act_scales.json").write_text(json.dumps([l.act_scale for l in bundle.layers]))
    manifest = {"format_version": FORMAT_VERSION, "kind": "quantized-bundle", "name": bundle.name,
                "bias_blob": "bias.bin", "act_scales": "act_scales.json", "layers": entries}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2))


def load_bundle(directory) -> QuantizedModel:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        if manifest.get("format_version") != FORMAT_VERSION:
            raise ManifestError(f"unsupported format_version {manifest.get('format_version')!r}")
        bias_blob = (d / manifest["bias_blob"]).read_bytes()
        scales = json.loads((d / manifest["act_scales"]).read_text())
        layers = []
        for rec, s in zip(manifest["layers"], scales):
            w = QuantizedTensor.load(d / rec["weights"])
            ref = rec["bias"]
            if ref["offset"] + ref["length"] > len(bias_blob):
                raise TruncatedBlobError("bias blob is truncated")
            b = np.frombuffer(bias_blob, "<f4", ref["length"] // 4, ref["offset"]).copy()
            acfg = QuantConfig(rec["act_bits"], rec["act_exponent"]) if rec["act_bits"] else None
            layers.append(QuantLayer(w, b, rec["activation"], acfg, s))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"malformed bundle manifest in {d}: {exc}") from exc
    return QuantizedModel(layers, manifest.get("name", "model"))


# ---------------------------------------------------------------------------
# datasets and evaluation


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) < 1 or len(self.features) != len(self.labels):
            raise ValueError("dataset needs matching, nonempty features and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError("labels out of range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


def make_dataset(kind: str = "blobs", num_classes: int = 4, num_samples: int = 4096,
                 input_dim: int = 16, seed: int = 0, separation: float = 4.0,
                 cluster_std: float = 1.0) -> Dataset:
    """Gaussian class clusters whose means are at least ``separation`` stds apart."""
    if kind != "blobs":
        raise ValueError(f"unknown dataset kind {kind!r}")
    if min(num_classes, num_samples, input_dim) <= 0:
        raise ValueError("dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((num_classes, input_dim))
    if num_classes > 1:
        gaps = [np.linalg.norm(means[i] - means[j])
                for i in range(num_classes) for j in range(i + 1, num_classes)]
        means *= separation * cluster_std / min(gaps)
    labels = rng.integers(0, num_classes, num_samples)
    features = means[labels] + cluster_std * rng.standard_normal((num_samples, input_dim))
    return Dataset(features, labels, num_classes)


def split_dataset(ds: Dataset, sizes: Sequence[int], seed: int = 0) -> list:
    """Disjoint random splits of the given sizes; any remainder goes last."""
    if sum(sizes) > len(ds):
        raise ValueError(f"splits {list(sizes)} exceed {len(ds)} samples")
    order = np.random.default_rng(seed).permutation(len(ds))
    out, start = [], 0
    for n in sizes:
        out.append(ds.subset(order[start:start + n]))
        start += n
    if start < len(ds):
        out.append(ds.subset(order[start:]))
    return out


def fixture_splits(ds: Dataset, calib_size: int = 1024, test_size: int = 8000, seed: int = 0):
    """``(train, calib, test)`` where the calibration rows are a subset of the
    training rows and the test rows are held out from both."""
    calib, test, rest = split_dataset(ds, [calib_size, test_size], seed=seed)
    train = Dataset(np.concatenate([calib.features, rest.features]),
                    np.concatenate([calib.labels, rest.labels]), ds.num_classes)
    return train, calib, test


def save_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(ds.features.shape[1])] + ["label"])
        for row, y in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(y)])


def load_csv(path, num_classes: int | None = None) -> Dataset:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    labels = data[:, -1].astype(np.int64)
    return Dataset(data[:, :-1], labels, num_classes or int(labels.max()) + 1)


def evaluate(model, dataset: Dataset, policy: QuantPolicy | None = None) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if isinstance(model, QuantizedModel):
        logits = forward_bundle(model, dataset.features)
    elif policy is None:
        logits = forward_fp(model, dataset.features)
    else:
        logits = forward_quant(model, policy, dataset.features)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# ---------------------------------------------------------------------------
# fixture training


def train_fixture(hidden: Sequence[int], dataset: Dataset, epochs: int = 30, seed: int = 0,
                  lr: float = 0.05, batch_size: int = 64, threshold: float = 0.9,
                  name: str = "fixture") -> ModelSpec:
    """Train a ReLU MLP with plain mini-batch gradient descent on cross-entropy."""
    rng = np.random.default_rng(seed)
    dims = [dataset.features.shape[1], *hidden, dataset.num_classes]
    Ws = [rng.standard_normal((i, o)) * np.sqrt(2.0 / i) for i, o in zip(dims, dims[1:])]
    bs = [np.zeros(o) for o in dims[1:]]
    X = dataset.features.astype(np.float64)
    Y = np.eye(dataset.num_classes)[dataset.labels]
    n = len(X)
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            hs = [X[idx]]
            for k, (W, b) in enumerate(zip(Ws, bs)):
                z = hs[-1] @ W + b
                hs.append(np.maximum(z, 0) if k < len(Ws) - 1 else z)
            logits = hs[-1] - hs[-1].max(axis=1, keepdims=True)
            p = np.exp(logits)
            p /= p.sum(axis=1, keepdims=True)
            g = (p - Y[idx]) / len(idx)
            for k in range(len(Ws) - 1, -1, -1):
                gW, gb = hs[k].T @ g, g.sum(axis=0)
                if k:
                    g = (g @ Ws[k].T) * (hs[k] > 0)
                Ws[k] -= lr * gW
                bs[k] -= lr * gb
    layers = [Layer(W, b, "relu" if k < len(Ws) - 1 else "identity")
              for k, (W, b) in enumerate(zip(Ws, bs))]
    model = ModelSpec(layers, name)
    acc = evaluate(model, dataset)
    if acc < threshold:
        raise FixtureError(
            f"fixture reached {acc:.3f} train accuracy (< {threshold}); try more epochs"
        )
    return model
