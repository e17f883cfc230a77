"""Convert torch sequential CNNs into the PANEW001 weight format.

The exporter walks an ``nn.Sequential``, maps every module onto one of
the engine's seven layer kinds, and emits the weight file plus a JSON
manifest carrying reference logits for ten probe inputs so the two
runtimes can be compared end to end.

Conversion notes:

* ``Normalize`` (our fixed input scaler) becomes a batchnorm layer with
  ``mean=0, var=0, eps=1``, i.e. a pure per-channel affine.
* ``nn.BatchNorm2d`` keeps its running statistics; its weight is
  rescaled so the engine's ``gamma / (sqrt(var) + eps)`` form equals
  torch's ``gamma / sqrt(var + eps)`` exactly in float64.
* ``nn.Dropout`` variants are inference identities and are skipped,
  recorded in the manifest's layer map.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass, field

import torch
from torch import nn

from pane import model as pmodel
from pane.tensor import F64, Tensor, atomic_write_bytes

BN_EPS = 1e-3  # engine-side eps for converted batchnorm layers


class ExportError(ValueError):
    """A checkpoint uses a module the engine cannot represent."""


class Normalize(nn.Module):
    """Fixed per-channel ``(x - mean) / std`` on the 0-255 scale."""

    def __init__(self, mean, std):
        super().__init__()
        self.register_buffer("mean", torch.tensor(list(mean), dtype=torch.float32).view(-1, 1, 1))
        self.register_buffer("std", torch.tensor(list(std), dtype=torch.float32).view(-1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std


def _tensor(t: torch.Tensor) -> Tensor:
    data = [float(v) for v in t.detach().reshape(-1).tolist()]
    return Tensor(tuple(t.shape), data, F64)


def _pair(value, what: str) -> tuple[int, int]:
    if isinstance(value, int):
        return value, value
    a, b = int(value[0]), int(value[1])
    return a, b


def _square(value, what: str) -> int:
    a, b = _pair(value, what)
    if a != b:
        raise ExportError(f"{what} must be symmetric, got {value!r}")
    return a


def _convert_module(mod: nn.Module, name: str) -> tuple[list, str]:
    """Map one torch module to engine layers; returns (layers, kind-or-note)."""
    if isinstance(mod, Normalize):
        std = [float(v) for v in mod.std.reshape(-1).tolist()]
        mean = [float(v) for v in mod.mean.reshape(-1).tolist()]
        c = len(std)
        gamma = Tensor((c,), [1.0 / s for s in std], F64)
        beta = Tensor((c,), [-m / s for m, s in zip(mean, std)], F64)
        zero = Tensor((c,), [0.0] * c, F64)
        return [pmodel.batchnorm(gamma, beta, zero, zero, eps=1.0, name=name)], pmodel.BATCHNORM
    if isinstance(mod, nn.Conv2d):
        if mod.groups != 1:
            raise ExportError(f"grouped convolution ({name}) is unsupported")
        if _pair(mod.dilation, "dilation") != (1, 1):
            raise ExportError(f"dilated convolution ({name}) is unsupported")
        if mod.padding_mode != "zeros":
            raise ExportError(f"padding mode {mod.padding_mode!r} ({name}) is unsupported")
        stride = _square(mod.stride, f"conv stride ({name})")
        padding = _square(mod.padding, f"conv padding ({name})")
        out_c = mod.out_channels
        bias = _tensor(mod.bias) if mod.bias is not None else Tensor((out_c,), [0.0] * out_c, F64)
        return [pmodel.conv2d(_tensor(mod.weight), bias, stride, padding, name=name)], pmodel.CONV2D
    if isinstance(mod, nn.Linear):
        out_f = mod.out_features
        bias = _tensor(mod.bias) if mod.bias is not None else Tensor((out_f,), [0.0] * out_f, F64)
        return [pmodel.linear(_tensor(mod.weight), bias, name=name)], pmodel.LINEAR
    if isinstance(mod, nn.ReLU):
        return [pmodel.relu(name=name)], pmodel.RELU
    if isinstance(mod, (nn.MaxPool2d, nn.AvgPool2d)):
        kind = "max" if isinstance(mod, nn.MaxPool2d) else "avg"
        if _pair(mod.padding, "pool padding") != (0, 0):
            raise ExportError(f"padded pooling ({name}) is unsupported")
        if isinstance(mod, nn.MaxPool2d) and _pair(mod.dilation, "pool dilation") != (1, 1):
            raise ExportError(f"dilated pooling ({name}) is unsupported")
        if mod.ceil_mode:
            raise ExportError(f"ceil-mode pooling ({name}) is unsupported")
        window = _pair(mod.kernel_size, "pool window")
        stride = _square(mod.stride if mod.stride is not None else mod.kernel_size,
                         f"pool stride ({name})")
        make = pmodel.maxpool if kind == "max" else pmodel.avgpool
        return [make(window, stride, name=name)], (
            pmodel.MAXPOOL if kind == "max" else pmodel.AVGPOOL
        )
    if isinstance(mod, nn.BatchNorm2d):
        if mod.running_mean is None or mod.running_var is None:
            raise ExportError(f"batchnorm without running statistics ({name}) is unsupported")
        var = [float(v) for v in mod.running_var.reshape(-1).tolist()]
        mean = [float(v) for v in mod.running_mean.reshape(-1).tolist()]
        c = len(var)
        if mod.affine:
            g_t = [float(v) for v in mod.weight.reshape(-1).tolist()]
            b_t = [float(v) for v in mod.bias.reshape(-1).tolist()]
        else:
            g_t, b_t = [1.0] * c, [0.0] * c
        eps_t = float(mod.eps)
        gamma = Tensor(
            (c,),
            [g * (math.sqrt(v) + BN_EPS) / math.sqrt(v + eps_t) for g, v in zip(g_t, var)],
            F64,
        )
        return [
            pmodel.batchnorm(gamma, Tensor((c,), b_t, F64), Tensor((c,), mean, F64),
                             Tensor((c,), var, F64), eps=BN_EPS, name=name)
        ], pmodel.BATCHNORM
    if isinstance(mod, nn.Flatten):
        if mod.start_dim not in (0, 1):
            raise ExportError(f"flatten with start_dim={mod.start_dim} ({name}) is unsupported")
        return [pmodel.flatten(name=name)], pmodel.FLATTEN
    if isinstance(mod, (nn.Dropout, nn.Dropout2d, nn.Identity)):
        return [], f"skipped ({type(mod).__name__} is an inference identity)"
    raise ExportError(f"unsupported layer kind {type(mod).__name__} ({name})")


def build_graph(model: nn.Module, input_shape, name: str = "exported"):
    """Convert an nn.Sequential into a ModelGraph plus a layer-map record."""
    if not isinstance(model, nn.Sequential):
        raise ExportError(
            f"expected an nn.Sequential checkpoint, got {type(model).__name__}"
        )
    layers = []
    layer_map = []
    for i, mod in enumerate(model):
        mod_name = f"{i}_{type(mod).__name__.lower()}"
        converted, note = _convert_module(mod, mod_name)
        layer_map.append({"index": i, "source": type(mod).__name__, "kind": note})
        layers.extend(converted)
    if not layers or layers[-1].kind != pmodel.LINEAR:
        raise ExportError("checkpoint must end in a linear classification head")
    class_count = layers[-1].weight.shape[0]
    graph = pmodel.ModelGraph(layers, tuple(input_shape), class_count, name=name)
    return graph, layer_map


def _state_dict_id(model: nn.Module) -> str:
    h = hashlib.sha256()
    for key in sorted(model.state_dict()):
        t = model.state_dict()[key]
        h.update(key.encode())
        h.update(t.detach().to(torch.float32).numpy().tobytes())
    return h.hexdigest()


def make_probe_inputs(input_shape, count: int = 10, seed: int = 0) -> list:
    """Deterministic integer-valued probe images on the 0-255 scale.

    Uses the stdlib generator so the same probes can be rebuilt without
    torch when verifying parity against recorded logits.
    """
    rng = random.Random(seed)
    n = 1
    for e in input_shape:
        n *= e
    return [
        Tensor(tuple(input_shape), [float(rng.randrange(256)) for _ in range(n)], F64)
        for _ in range(count)
    ]


def _torch_logits(model: nn.Module, probe: Tensor) -> list:
    x = torch.tensor(list(probe.data), dtype=torch.float32).reshape((1,) + probe.shape)
    model.eval()
    with torch.no_grad():
        out = model(x)
    values = [float(v) for v in out.reshape(-1).tolist()]
    if not all(math.isfinite(v) for v in values):
        raise ExportError("probe logits are not finite")
    return values


@dataclass
class ExportManifest:
    source_id: str
    name: str
    input_shape: tuple
    class_count: int
    layer_map: list
    probes: dict
    probe_logits: list
    weight_sha256: str
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": "PANEW001",
            "source_id": self.source_id,
            "name": self.name,
            "input_shape": list(self.input_shape),
            "class_count": self.class_count,
            "layer_map": self.layer_map,
            "probes": self.probes,
            "probe_logits": self.probe_logits,
            "weight_sha256": self.weight_sha256,
        }
        doc.update(self.extra)
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def export_weights(
    model: nn.Module,
    input_shape,
    out_path: str,
    manifest_path: str | None = None,
    name: str = "exported",
    probe_tensors: list | None = None,
    probe_meta: dict | None = None,
    probe_seed: int = 0,
    probe_count: int = 10,
    extra: dict | None = None,
) -> ExportManifest:
    """Write a PANEW001 file plus its parity manifest.

    By default probes are seeded integer images; callers with a real
    dataset can pass `probe_tensors` and describe them in `probe_meta`.
    """
    graph, layer_map = build_graph(model, input_shape, name=name)
    blob = pmodel.save_model(graph)
    atomic_write_bytes(out_path, blob)
    if probe_tensors is None:
        probe_tensors = make_probe_inputs(input_shape, probe_count, probe_seed)
        probe_meta = {"kind": "seeded_u8", "seed": probe_seed, "count": probe_count}
    elif probe_meta is None:
        probe_meta = {"kind": "provided", "count": len(probe_tensors)}
    logits = [_torch_logits(model, p) for p in probe_tensors]
    manifest = ExportManifest(
        source_id=_state_dict_id(model),
        name=name,
        input_shape=tuple(input_shape),
        class_count=graph.class_count,
        layer_map=layer_map,
        probes=probe_meta,
        probe_logits=logits,
        weight_sha256=hashlib.sha256(blob).hexdigest(),
        extra=dict(extra or {}),
    )
    if manifest_path is None:
        manifest_path = out_path + ".manifest.json"
    atomic_write_bytes(manifest_path, manifest.to_json().encode("utf-8"))
    return manifest
