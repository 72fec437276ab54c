"""Resource cost model: exact parameter/FLOPs accounting per operation, an
affine FLOPs-to-latency predictor fitted from profile data, and the
differentiable resource penalty over gate parameters.

Conventions: one multiply-accumulate counts as 2 FLOPs; normalization and
activation FLOPs are excluded. Parameter counts include conv/linear bias,
batch-norm scale+shift, and one PReLU slope per channel. All totals cover the
searchable layers (the fixed classifier head is reported separately).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, CoverageError, FitError, FormatError
from .gating import gamma_layer_relaxed, gamma_op_relaxed
from .tensor import Tensor, accumulate_grad, make_node

__all__ = [
    "CostTerm", "LatencyProfile", "RegularizerState",
    "phi_params", "phi_flops", "phi_latency",
    "parse_latency_profile", "format_latency_samples", "fit_latency",
    "synthetic_profile_samples", "regularizer", "discrete_resource",
    "dense_resource", "resource_report",
]

RESOURCE_KINDS = ("parameters", "flops", "latency")


@dataclass(frozen=True)
class CostTerm:
    """Static geometry of one operation; cost is polynomial in (c_in, c_out)."""

    layer: int
    op: str
    kind: str              # normal | depthwise | linear
    kernel: int
    stride: int
    h_in: int
    w_in: int
    h_out: int
    w_out: int
    groups: int = 1        # build-time groups, part of the latency condition
    bias: bool = True
    norm_params: int = 0   # per-channel params added by normalization (2 for BN)
    act_params: int = 0    # per-channel params added by activation (1 for PReLU)


def phi_params(term: CostTerm, c_in, c_out):
    """Parameter count of one operation at (possibly fractional) channel counts.

    Accepts floats or scalar ``Tensor`` values, so the same polynomial serves
    exact accounting and the differentiable regularizer.
    """
    k2 = term.kernel * term.kernel
    if term.kind == "linear":
        base = c_in * c_out + (c_out if term.bias else 0.0)
    elif term.kind == "depthwise":
        base = k2 * c_out + (c_out if term.bias else 0.0)
    else:
        base = k2 * (c_in * c_out) + (c_out if term.bias else 0.0)
    extra = term.norm_params + term.act_params
    if extra:
        base = base + extra * c_out
    return base


def phi_flops(term: CostTerm, c_in, c_out):
    """FLOPs of one operation (2 per MAC; norm/activation excluded)."""
    hw = term.h_out * term.w_out
    k2 = term.kernel * term.kernel
    if term.kind == "linear":
        return 2.0 * (c_in * c_out)
    if term.kind == "depthwise":
        return (2.0 * k2 * hw) * c_out
    return (2.0 * k2 * hw) * (c_in * c_out)


def condition_key(term: CostTerm) -> tuple:
    """Latency profile condition: input size, kernel, stride, groups."""
    return (term.h_in, term.w_in, term.kernel, term.stride, term.groups)


def phi_latency(term: CostTerm, c_in, c_out, profile: "LatencyProfile"):
    a, b = profile.coefficients(condition_key(term))
    return a * phi_flops(term, c_in, c_out) + b


def _phi(kind, term, c_in, c_out, profile):
    if kind == "parameters":
        return phi_params(term, c_in, c_out)
    if kind == "flops":
        return phi_flops(term, c_in, c_out)
    if kind == "latency":
        if profile is None:
            raise ConfigError("latency resource kind requires a fitted latency profile")
        return phi_latency(term, c_in, c_out, profile)
    raise ConfigError(f"unknown resource kind {kind!r} (expected one of {RESOURCE_KINDS})")


# ---------------------------------------------------------------------------
# latency profiles
# ---------------------------------------------------------------------------

class LatencyProfile:
    """Measured (FLOPs, latency) samples per condition plus fitted affine models."""

    def __init__(self, samples=None, coef=None):
        self.samples = {k: list(v) for k, v in (samples or {}).items()}
        self.coef = dict(coef or {})

    def coefficients(self, key) -> tuple[float, float]:
        if key not in self.coef:
            raise CoverageError(
                f"latency profile has no fitted condition (H, W, k, stride, groups)={key}")
        return self.coef[key]

    def predict(self, key, flops: float) -> float:
        a, b = self.coefficients(key)
        return a * flops + b


def parse_latency_profile(text_or_path, from_path: bool = True) -> dict:
    """Parse the plain-text profile format into a samples dict.

    One sample per line: ``H W k stride groups flops latency_ms``; blank lines
    and lines starting with '#' are ignored.
    """
    if from_path:
        with open(text_or_path, "r", encoding="utf-8") as fh:
            text = fh.read()
        source = str(text_or_path)
    else:
        text = text_or_path
        source = "<string>"
    samples: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 7:
            raise FormatError(f"{source}:{lineno}: expected 7 fields "
                              f"'H W k stride groups flops latency_ms', got {len(fields)}")
        try:
            h, w, k, stride, groups = (int(v) for v in fields[:5])
            flops = float(fields[5])
            ms = float(fields[6])
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: {exc}") from exc
        samples.setdefault((h, w, k, stride, groups), []).append((flops, ms))
    return samples


def format_latency_samples(samples: dict) -> str:
    lines = ["# H W k stride groups flops latency_ms"]
    for key in sorted(samples):
        for flops, ms in samples[key]:
            lines.append(f"{key[0]} {key[1]} {key[2]} {key[3]} {key[4]} {flops!r} {ms!r}")
    return "\n".join(lines) + "\n"


def fit_latency(samples: dict) -> LatencyProfile:
    """Ordinary least squares latency = a * flops + b per condition.

    Negative slopes are clamped to zero (with a warning); the intercept is
    then refitted as the sample mean.
    """
    coef = {}
    for key, pts in samples.items():
        if len(pts) < 2:
            raise FitError(f"condition {key} has {len(pts)} sample(s); at least 2 required")
        f = np.asarray([p[0] for p in pts], dtype=np.float64)
        y = np.asarray([p[1] for p in pts], dtype=np.float64)
        if np.ptp(f) == 0.0:
            raise FitError(f"condition {key}: all samples share flops={f[0]}; affine fit is rank-deficient")
        fm, ym = f.mean(), y.mean()
        a = float(((f - fm) * (y - ym)).sum() / ((f - fm) ** 2).sum())
        b = float(ym - a * fm)
        if a < 0:
            warnings.warn(f"condition {key}: fitted slope {a:.3e} < 0; clamping to 0")
            a, b = 0.0, float(ym)
        coef[key] = (a, b)
    return LatencyProfile(samples=samples, coef=coef)


def synthetic_profile_samples(conditions, coeffs, flops_ranges, n_per_condition,
                              noise_frac, rng) -> dict:
    """Generate ground-truth affine samples with optional Gaussian noise.

    ``noise_frac`` scales the latency range of each condition into the noise
    sigma, so exact data is produced with ``noise_frac=0``.
    """
    samples = {}
    for key in conditions:
        a, b = coeffs[key]
        lo, hi = flops_ranges[key]
        f = rng.uniform(lo, hi, size=n_per_condition)
        y = a * f + b
        if noise_frac:
            sigma = noise_frac * (y.max() - y.min())
            y = y + rng.normal(0.0, sigma, size=n_per_condition)
        samples[key] = list(zip(f.tolist(), y.tolist()))
    return samples


# ---------------------------------------------------------------------------
# regularizer and discrete accounting
# ---------------------------------------------------------------------------

@dataclass
class RegularizerState:
    """Balancing weight, resource kind and (optional) stop target."""

    lambda_: float
    kind: str
    target: float | None = None

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError(f"lambda must be >= 0, got {self.lambda_}")
        if self.kind not in RESOURCE_KINDS:
            raise ConfigError(f"resource kind must be one of {RESOURCE_KINDS}, got {self.kind!r}")
        if self.target is not None and self.target <= 0:
            raise ConfigError(f"target resource must be > 0, got {self.target}")


def _layer_unit_counts(net, layer, dense: bool):
    """Hard (c_in, per-op c_out) counts for one searchable layer."""
    if dense:
        gin = float(layer.in_channels)
    else:
        sources = net.input_gamma_sources(layer)
        if sources is None:
            gin = float(layer.in_channels)
        else:
            vectors, skips = sources
            union = np.zeros(len(vectors[0]), dtype=bool)
            for v in list(vectors) + list(skips):
                union |= v.psi_on > v.psi_off
            gin = float(union.sum())
    gouts = [float(len(v)) if dense else float(v.active_count()) for v in layer.gates]
    return gin, gouts


def _hard_total(net, kind, profile, dense: bool) -> float:
    total = 0.0
    for layer in net.searchable_layers():
        gin, gouts = _layer_unit_counts(net, layer, dense)
        op_in = gin
        rterm = layer.reducer_cost_term()
        if rterm is not None:
            total += _phi(kind, rterm, gin, float(layer.reducer.out_channels), profile)
            op_in = float(layer.reducer.out_channels)
        for term, gout in zip(layer.op_cost_terms(), gouts):
            total += _phi(kind, term, op_in, gout, profile)
    return total


def discrete_resource(net, kind: str, profile: LatencyProfile | None = None) -> float:
    """Exact resource of the architecture implied by the current gate decisions."""
    return _hard_total(net, kind, profile, dense=False)


def dense_resource(net, kind: str, profile: LatencyProfile | None = None) -> float:
    """Exact resource of the fully-open (unpruned) network."""
    return _hard_total(net, kind, profile, dense=True)


def regularizer(net, state: RegularizerState, profile: LatencyProfile | None = None) -> Tensor:
    """Differentiable resource penalty summed over searchable operations.

    The forward value is the exact resource at the current hard decisions
    (integer for parameters/FLOPs). The backward pass follows the
    softmax-surrogate relaxation of every gate, with the union binarizer
    treated as identity, so the gradient equals that of the fully relaxed
    penalty.
    """
    if state.kind == "latency" and profile is None:
        raise ConfigError("latency resource kind requires a fitted latency profile")
    hard = 0.0
    soft = None
    for layer in net.searchable_layers():
        gin_hard, gouts_hard = _layer_unit_counts(net, layer, dense=False)
        sources = net.input_gamma_sources(layer)
        if sources is None:
            gin_soft = gin_hard
        else:
            vectors, skips = sources
            gin_soft = gamma_layer_relaxed(vectors, skips)
        op_in_hard, op_in_soft = gin_hard, gin_soft
        rterm = layer.reducer_cost_term()
        if rterm is not None:
            r_out = float(layer.reducer.out_channels)
            hard += _phi(state.kind, rterm, gin_hard, r_out, profile)
            term_soft = _phi(state.kind, rterm, gin_soft, r_out, profile)
            soft = term_soft if soft is None else soft + term_soft
            op_in_hard = op_in_soft = r_out
        for term, vec, gout_hard in zip(layer.op_cost_terms(), layer.gates, gouts_hard):
            hard += _phi(state.kind, term, op_in_hard, gout_hard, profile)
            term_soft = _phi(state.kind, term, op_in_soft, gamma_op_relaxed(vec), profile)
            soft = term_soft if soft is None else soft + term_soft
    if soft is None:
        return Tensor(np.float64(0.0))
    if not isinstance(soft, Tensor):
        # every gate frozen: constant penalty, nothing to differentiate
        return Tensor(np.float64(hard))

    def bw(g):
        accumulate_grad(soft, g)

    return make_node(np.float64(hard), (soft,), bw)


def resource_report(arch, profile: LatencyProfile | None = None) -> dict:
    """Exact resource accounting of a compiled architecture.

    ``parameters`` and ``flops`` cover the searchable layers and agree
    integer-exactly with the regularizer forward value at the same gate
    pattern; the fixed head is reported under ``head_*`` keys. Latency is
    predicted from the fitted profile when one is supplied.
    """
    params = 0.0
    flops = 0.0
    latency = 0.0 if profile is not None else None
    rows = []
    for layer in arch.compiled_layers():
        c_in = float(len(layer.in_set))
        if layer.reducer is not None:
            term = layer.reducer_term
            r_out = float(layer.reducer.weight.shape[0])
            p = phi_params(term, c_in, r_out)
            f = phi_flops(term, c_in, r_out)
            lat = phi_latency(term, c_in, r_out, profile) if profile is not None else None
            params += p
            flops += f
            if lat is not None:
                latency += lat
            rows.append({"layer": layer.index, "op": "reducer", "conv_type": term.kind,
                         "kernel": term.kernel, "activation": "none",
                         "c_in": int(c_in), "c_out": int(r_out),
                         "parameters": int(p), "flops": int(f), "latency_ms": lat})
            c_in = r_out
        for op in layer.ops:
            term = op.term
            c_out = float(len(op.channels))
            p = phi_params(term, c_in, c_out)
            f = phi_flops(term, c_in, c_out)
            lat = phi_latency(term, c_in, c_out, profile) if profile is not None else None
            params += p
            flops += f
            if lat is not None:
                latency += lat
            rows.append({"layer": layer.index, "op": term.op, "conv_type": term.kind,
                         "kernel": term.kernel, "activation": op.activation,
                         "c_in": int(c_in), "c_out": int(c_out),
                         "parameters": int(p), "flops": int(f), "latency_ms": lat})
    head_params, head_flops = arch.head_costs()
    return {
        "parameters": int(params),
        "flops": int(flops),
        "predicted_latency_ms": latency,
        "head_parameters": int(head_params),
        "head_flops": int(head_flops),
        "total_parameters": int(params + head_params),
        "total_flops": int(flops + head_flops),
        "rows": rows,
    }
