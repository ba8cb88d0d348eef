"""Exact parameter / mult-add / weight-memory accounting and ratio comparison.

Mult-add convention: one mult-add per scalar multiplication in the forward
pass. Convolution contributes kh*kw*(c_in/g)*c_out*h_out*w_out, a
fully-connected layer in*out, and the attention gating two multiplications
per gated element (value product and scale product). Comparisons, max, exp,
and division are excluded, so pooling, unpooling, GAP, ReLU, sigmoid, and
softmax count zero. Biases are additions only: counted in params, not in
mult-adds (set ``count_bias_adds`` to fold them in).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .kernels import ConfigError, ConvSpec
from .netbuilder import (ConvLayer, FcLayer, GapLayer, NetworkSpec,
                         ResidualGroup, SoftmaxLayer)
from .pepe import PepeConfig, pepe_param_count
from .vac import VacConfig, vac_param_count


@dataclass
class LayerRow:
    name: str
    params: int
    mult_adds: int
    bytes_at_bits: int


@dataclass
class ComplexityReport:
    rows: list
    total_params: int
    total_mult_adds: int
    total_bytes: int
    input_shape: tuple
    bits: int

    def to_csv(self):
        lines = ["name,params,mult_adds,bits,bytes"]
        for r in self.rows:
            lines.append(f"{r.name},{r.params},{r.mult_adds},{self.bits},{r.bytes_at_bits}")
        lines.append(f"total,{self.total_params},{self.total_mult_adds},"
                     f"{self.bits},{self.total_bytes}")
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = f"{'layer':<24}{'params':>12}{'mult-adds':>14}{'bytes':>12}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            lines.append(f"{r.name:<24}{r.params:>12}{r.mult_adds:>14}"
                         f"{r.bytes_at_bits:>12}")
        lines.append("-" * len(header))
        lines.append(f"{'total':<24}{self.total_params:>12}"
                     f"{self.total_mult_adds:>14}{self.total_bytes:>12}")
        return "\n".join(lines)


def _conv_mult_adds(spec, h, w, count_bias_adds):
    oh, ow = spec.out_hw(h, w)
    kh, kw = spec.kernel
    ma = kh * kw * (spec.c_in // spec.groups) * spec.c_out * oh * ow
    if count_bias_adds:
        ma += spec.c_out * oh * ow
    return ma, oh, ow


def _vac_mult_adds(cfg, h, w, count_bias_adds):
    total = 0
    ma, _, _ = _conv_mult_adds(cfg.down_spec(), h, w, count_bias_adds)
    total += ma
    pk, ps = cfg.pool
    qh = (h - pk) // ps + 1
    qw = (w - pk) // ps + 1
    ma, _, _ = _conv_mult_adds(cfg.embed_grouped_spec(), qh, qw, count_bias_adds)
    total += ma
    ma, _, _ = _conv_mult_adds(cfg.embed_pointwise_spec(), qh, qw, count_bias_adds)
    total += ma
    # Gating: one multiply for the attention product, one for the scale,
    # per element of the down-mixed activation.
    total += 2 * cfg.c_down * h * w
    ma, _, _ = _conv_mult_adds(cfg.up_spec(), h, w, count_bias_adds)
    return total + ma


def _walk(layers, h, w, count_bias_adds, prefix=""):
    rows = []
    for i, layer in enumerate(layers):
        name = f"{prefix}{i}"
        if isinstance(layer, ConvLayer):
            ma, h, w = _conv_mult_adds(layer.spec, h, w, count_bias_adds)
            rows.append((f"{name}.conv", layer.spec.param_count(), ma))
        elif isinstance(layer, VacConfig):
            rows.append((f"{name}.vac", vac_param_count(layer),
                         _vac_mult_adds(layer, h, w, count_bias_adds)))
        elif isinstance(layer, PepeConfig):
            ma = 0
            hh, ww = h, w
            for spec in layer.specs():
                m, hh, ww = _conv_mult_adds(spec, hh, ww, count_bias_adds)
                ma += m
            rows.append((f"{name}.pepe", pepe_param_count(layer), ma))
            h, w = hh, ww
        elif isinstance(layer, ResidualGroup):
            inner, h, w = _walk(layer.body, h, w, count_bias_adds, f"{name}.res.")
            rows.extend(inner)
        elif isinstance(layer, GapLayer):
            rows.append((f"{name}.gap", 0, 0))
            h = w = 1
        elif isinstance(layer, FcLayer):
            ma = layer.c_in * layer.out
            if count_bias_adds:
                ma += layer.out
            rows.append((f"{name}.fc", layer.c_in * layer.out + layer.out, ma))
        elif isinstance(layer, SoftmaxLayer):
            rows.append((f"{name}.softmax", 0, 0))
        else:
            raise ConfigError(f"unknown layer {layer!r}")
    return rows, h, w


def count_mult_adds(spec, input_shape=None, bits=32, count_bias_adds=False):
    """Per-layer and total accounting for one forward pass of a single sample."""
    if not isinstance(spec, NetworkSpec):
        raise ConfigError("count_mult_adds expects a NetworkSpec")
    if input_shape is None:
        input_shape = spec.input_shape
    c, h, w = input_shape
    if c != spec.input_shape[0]:
        raise ConfigError(f"input shape {input_shape} disagrees with spec "
                          f"channels {spec.input_shape[0]}")
    raw, _, _ = _walk(spec.layers, h, w, count_bias_adds)
    rows = [LayerRow(name, p, ma, math.ceil(p * bits / 8)) for name, p, ma in raw]
    return ComplexityReport(
        rows=rows,
        total_params=sum(r.params for r in rows),
        total_mult_adds=sum(r.mult_adds for r in rows),
        total_bytes=sum(math.ceil(r.params * bits / 8) for r in rows),
        input_shape=tuple(input_shape), bits=bits)


def count_params(spec):
    return count_mult_adds(spec).total_params


@dataclass(frozen=True)
class ModelRow:
    name: str
    params: float
    mult_adds: float
    bits: int


@dataclass(frozen=True)
class RatioEntry:
    a: str
    b: str
    params_ratio: float
    mult_adds_ratio: float
    memory_ratio: float


def compare(models):
    """All ordered pairwise ratios A/B of params, mult-adds, and weight memory
    (params * bits). Full precision; round only for display."""
    if len(models) < 2:
        raise ConfigError("compare needs at least two models")
    rows = [m if isinstance(m, ModelRow) else ModelRow(*m) for m in models]
    for r in rows:
        if r.params <= 0 or r.mult_adds <= 0:
            raise ConfigError(f"{r.name}: params and mult-adds must be positive")
    entries = []
    for a in rows:
        for b in rows:
            if a is b:
                continue
            entries.append(RatioEntry(
                a.name, b.name,
                a.params / b.params,
                a.mult_adds / b.mult_adds,
                (a.params * a.bits) / (b.params * b.bits)))
    return entries


def compare_to_csv(entries):
    lines = ["model_a,model_b,params_ratio,mult_adds_ratio,memory_ratio"]
    for e in entries:
        lines.append(f"{e.a},{e.b},{e.params_ratio:.2f},"
                     f"{e.mult_adds_ratio:.2f},{e.memory_ratio:.2f}")
    return "\n".join(lines) + "\n"


def compare_to_text(entries):
    header = (f"{'model A':<16}{'model B':<16}{'params':>9}"
              f"{'mult-adds':>11}{'memory':>9}")
    lines = [header, "-" * len(header)]
    for e in entries:
        lines.append(f"{e.a:<16}{e.b:<16}{e.params_ratio:>8.2f}x"
                     f"{e.mult_adds_ratio:>10.2f}x{e.memory_ratio:>8.2f}x")
    return "\n".join(lines)
