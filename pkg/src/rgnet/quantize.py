"""Per-tensor affine INT8 quantization: calibration, fake-quant training
support, and quantized export.

Weights use symmetric schemes (zero_point 0, scale max|x|/127); activations
use asymmetric min-max ranges tracked with an exponential moving average.
Fake quantization rounds to the INT8 grid in the forward pass and passes
gradients straight through inside the clamp range.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .checkpoint import Record, read_container, records_as_dict, write_container
from .errors import ConfigError, DataError
from .tensor import Tensor, make_op

QMIN, QMAX = -128, 127
SCALE_FLOOR = 1e-8
EMA_DECAY = 0.99

DEFAULT_ACT_SITES = ("fem.out", "gqm.query", "trm.memory", "trm.decoded")


@dataclass(frozen=True)
class QuantScheme:
    scale: float
    zero_point: int
    min_val: float
    max_val: float


def weight_scheme(arr: np.ndarray) -> QuantScheme:
    amax = float(np.max(np.abs(arr))) if arr.size else 0.0
    scale = max(amax / QMAX, SCALE_FLOOR)
    return QuantScheme(scale=scale, zero_point=0, min_val=-amax, max_val=amax)


def activation_scheme(min_val: float, max_val: float) -> QuantScheme:
    lo = min(float(min_val), 0.0)
    hi = max(float(max_val), 0.0)
    scale = max((hi - lo) / (QMAX - QMIN), SCALE_FLOOR)
    zp = int(round(QMIN - lo / scale))
    zp = max(QMIN, min(QMAX, zp))
    return QuantScheme(scale=scale, zero_point=zp, min_val=lo, max_val=hi)


class ActivationObserver:
    """Running min/max with EMA tracking; first batch initializes directly."""

    def __init__(self, decay: float = EMA_DECAY):
        self.decay = decay
        self.min_ema = None
        self.max_ema = None

    def update(self, arr: np.ndarray):
        if arr.size == 0 or not np.isfinite(arr).all():
            raise DataError("activation observer needs finite values")
        bmin, bmax = float(arr.min()), float(arr.max())
        if self.min_ema is None:
            self.min_ema, self.max_ema = bmin, bmax
        else:
            self.min_ema = self.decay * self.min_ema + (1.0 - self.decay) * bmin
            self.max_ema = self.decay * self.max_ema + (1.0 - self.decay) * bmax

    @property
    def ready(self) -> bool:
        return self.min_ema is not None

    def scheme(self) -> QuantScheme:
        if not self.ready:
            raise ConfigError("activation observer has seen no data")
        return activation_scheme(self.min_ema, self.max_ema)


def quantize(arr: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    s = arr.dtype.type(scheme.scale)
    q = np.rint(arr / s) + scheme.zero_point
    return np.clip(q, QMIN, QMAX).astype(np.int8)


def dequantize(q: np.ndarray, scheme: QuantScheme, dtype=np.float32) -> np.ndarray:
    dt = np.dtype(dtype).type
    return (q.astype(dtype) - dt(scheme.zero_point)) * dt(scheme.scale)


def fake_quant(t: Tensor, scheme: QuantScheme) -> Tensor:
    """Quantize-dequantize with a straight-through gradient.

    Gradient is 1 where the rounded value lands inside [QMIN, QMAX] and 0
    where clamping saturates.
    """
    x = t.data
    s = x.dtype.type(scheme.scale)
    zp = x.dtype.type(scheme.zero_point)
    qf = np.rint(x / s) + zp
    in_range = (qf >= QMIN) & (qf <= QMAX)
    out = (np.clip(qf, QMIN, QMAX) - zp) * s

    def bwd(g, ti=t, live=in_range):
        ti._grad_if_needed(g * live)

    return make_op("fake_quant", (t,), out.astype(x.dtype), bwd)


class QuantContext:
    """Quantization state attached to a model.

    Mode "calibrate" observes activation ranges and leaves values untouched;
    mode "qat" fake-quantizes parameters at every use site plus the
    designated activation sites. Weight schemes follow the live parameter
    values unless frozen (after export/load they are frozen so reloaded
    models reproduce identical predictions).
    """

    def __init__(self, model, sites=DEFAULT_ACT_SITES, mode: str = "calibrate"):
        if mode not in ("calibrate", "qat"):
            raise ConfigError(f"unknown quantization mode {mode!r}")
        self.mode = mode
        self.sites = tuple(sites)
        self.observers = {site: ActivationObserver() for site in self.sites}
        self.param_names = {id(p): name for name, p in model.named_parameters()}
        self.frozen_weight: dict[str, QuantScheme] = {}
        self.frozen_activation: dict[str, QuantScheme] = {}

    def weight_hook(self):
        if self.mode != "qat":
            return None

        def hook(p: Tensor) -> Tensor:
            name = self.param_names.get(id(p))
            scheme = self.frozen_weight.get(name)
            if scheme is None:
                scheme = weight_scheme(p.data)
            return fake_quant(p, scheme)

        return hook

    def activation(self, site: str, t: Tensor) -> Tensor:
        obs = self.observers.get(site)
        if obs is None:
            raise ConfigError(f"unknown activation site {site!r}")
        if self.mode == "calibrate":
            obs.update(t.data)
            return t
        scheme = self.frozen_activation.get(site)
        if scheme is None:
            scheme = obs.scheme()
        return fake_quant(t, scheme)

    def freeze_activations(self):
        self.frozen_activation = {site: obs.scheme() for site, obs in self.observers.items()}

    def freeze_weights(self, model):
        self.frozen_weight = {name: weight_scheme(p.data) for name, p in model.named_parameters()}

    def activation_schemes(self) -> dict:
        if self.frozen_activation:
            return dict(self.frozen_activation)
        return {site: obs.scheme() for site, obs in self.observers.items()}


# ---------------------------------------------------------------------------
# Export / import
# ---------------------------------------------------------------------------

@dataclass
class SizeReport:
    fp32_file_bytes: int
    int8_file_bytes: int
    fp32_payload_bytes: int
    int8_payload_bytes: int

    @property
    def payload_ratio(self) -> float:
        return self.int8_payload_bytes / self.fp32_payload_bytes

    @property
    def file_ratio(self) -> float:
        return self.int8_file_bytes / self.fp32_file_bytes

    def as_mapping(self) -> dict:
        return {
            "fp32_file_bytes": self.fp32_file_bytes,
            "int8_file_bytes": self.int8_file_bytes,
            "fp32_payload_bytes": self.fp32_payload_bytes,
            "int8_payload_bytes": self.int8_payload_bytes,
            "payload_ratio": self.payload_ratio,
            "file_ratio": self.file_ratio,
        }


def _config_record(config_mapping: dict) -> Record:
    blob = json.dumps(config_mapping, sort_keys=True).encode("utf-8")
    return Record("config.json", np.frombuffer(blob, dtype=np.uint8).copy())


def export_fp32(model, config_mapping: dict, path) -> int:
    """Write a parameters-only float32 container; returns payload bytes."""
    records = [_config_record(config_mapping)]
    payload = 0
    for name, p in model.named_parameters():
        arr = p.data.astype(np.float32, copy=False)
        records.append(Record(name, arr))
        payload += arr.nbytes
    write_container(path, records)
    return payload


def export_quantized(model, act_schemes: dict, config_mapping: dict, path) -> int:
    """Write INT8 parameter payloads plus schemes; returns payload bytes."""
    records = [_config_record(config_mapping)]
    payload = 0
    for name, p in model.named_parameters():
        scheme = weight_scheme(p.data)
        q = quantize(p.data, scheme)
        records.append(Record(name, q, scale=scheme.scale, zero_point=scheme.zero_point))
        payload += q.nbytes
    for site, scheme in sorted(act_schemes.items()):
        arr = np.array([scheme.scale, scheme.zero_point, scheme.min_val, scheme.max_val], dtype=np.float64)
        records.append(Record(f"actscheme.{site}", arr))
    write_container(path, records)
    return payload


def load_quantized(path):
    """Read an INT8 container: (config, float32 params, weight schemes, act schemes)."""
    recs = records_as_dict(read_container(path))
    if "config.json" not in recs:
        raise DataError(f"quantized container {path} missing config record")
    config = json.loads(recs.pop("config.json").array.tobytes().decode("utf-8"))
    params, weight_schemes, act_schemes = {}, {}, {}
    for name, rec in recs.items():
        if name.startswith("actscheme."):
            scale, zp, lo, hi = rec.array
            act_schemes[name[len("actscheme."):]] = QuantScheme(float(scale), int(zp), float(lo), float(hi))
            continue
        if rec.array.dtype != np.int8:
            raise DataError(f"record {name!r} in quantized container is not int8")
        scheme = QuantScheme(rec.scale, rec.zero_point, 0.0, 0.0)
        weight_schemes[name] = scheme
        params[name] = dequantize(rec.array, scheme, np.float32)
    return config, params, weight_schemes, act_schemes
