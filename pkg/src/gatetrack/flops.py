"""Deterministic FLOP accounting for layers, branches and gate decisions.

Conventions (frozen; the budget mechanism and all reports use them):
  * one multiply-accumulate counts as 2 FLOPs,
  * activations and elementwise ops count 1 FLOP per element,
  * pooling counts 1 FLOP per *input* element.

Costs depend only on shapes, never on values, so identical configurations
always produce identical numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

# branch index order used by the gate, cost tables and trace files
BRANCH_ORDER = ("identity", "se", "ca", "cbam")


def flops_layer(kind, dims):
    """FLOPs of a single layer; ``dims`` is a dict of the relevant sizes."""
    try:
        if kind == "conv":
            k = dims["k"]
            return 2.0 * k * k * dims["cin"] * dims["cout"] * dims["hout"] * dims["wout"]
        if kind == "linear":
            return 2.0 * dims["in"] * dims["out"]
        if kind in ("relu", "sigmoid", "elementwise", "softmax"):
            return float(dims["count"])
        if kind == "pool":
            return float(dims["count"])
    except KeyError as missing:
        raise ConfigError(f"flops_layer {kind!r} missing dim {missing}") from None
    raise ConfigError(f"unknown layer kind {kind!r}")


@dataclass
class BranchCostTable:
    """Per-branch attention cost in FLOPs for a fixed feature shape."""

    costs: np.ndarray  # aligned with BRANCH_ORDER
    channels: int
    height: int
    width: int

    def __post_init__(self):
        self.costs = np.asarray(self.costs, dtype=np.float64)
        if self.costs.shape != (len(BRANCH_ORDER),):
            raise ConfigError(f"cost table needs {len(BRANCH_ORDER)} entries")
        if self.costs[0] != 0.0 or np.any(self.costs < 0.0):
            raise ConfigError("identity cost must be 0 and all costs >= 0")

    def __getitem__(self, branch):
        if isinstance(branch, str):
            branch = BRANCH_ORDER.index(branch)
        return float(self.costs[branch])

    @property
    def all_attention(self):
        """Cost of running SE, CA and CBAM all at once (the static stack)."""
        return float(self.costs[1:].sum())


def se_layers(c, r, h, w):
    mid = c // r
    return [
        ("gap", "pool", {"count": c * h * w}),
        ("fc1", "linear", {"in": c, "out": mid}),
        ("relu", "relu", {"count": mid}),
        ("fc2", "linear", {"in": mid, "out": c}),
        ("sigmoid", "sigmoid", {"count": c}),
        ("scale", "elementwise", {"count": c * h * w}),
    ]


def ca_layers(c, r, h, w):
    mid = c // r
    return [
        ("pool_h", "pool", {"count": c * h * w}),
        ("pool_w", "pool", {"count": c * h * w}),
        ("conv_shared", "conv", {"k": 1, "cin": c, "cout": mid, "hout": h + w, "wout": 1}),
        ("relu", "relu", {"count": mid * (h + w)}),
        ("conv_h", "conv", {"k": 1, "cin": mid, "cout": c, "hout": h, "wout": 1}),
        ("conv_w", "conv", {"k": 1, "cin": mid, "cout": c, "hout": w, "wout": 1}),
        ("sigmoids", "sigmoid", {"count": c * (h + w)}),
        ("scale_h", "elementwise", {"count": c * h * w}),
        ("scale_w", "elementwise", {"count": c * h * w}),
    ]


def cbam_layers(c, r, h, w):
    mid = c // r
    return [
        ("gap", "pool", {"count": c * h * w}),
        ("gmp", "pool", {"count": c * h * w}),
        ("mlp_avg_fc1", "linear", {"in": c, "out": mid}),
        ("mlp_avg_relu", "relu", {"count": mid}),
        ("mlp_avg_fc2", "linear", {"in": mid, "out": c}),
        ("mlp_max_fc1", "linear", {"in": c, "out": mid}),
        ("mlp_max_relu", "relu", {"count": mid}),
        ("mlp_max_fc2", "linear", {"in": mid, "out": c}),
        ("add_sigmoid", "sigmoid", {"count": 2 * c}),
        ("scale_channel", "elementwise", {"count": c * h * w}),
        ("pool_mean_c", "pool", {"count": c * h * w}),
        ("pool_max_c", "pool", {"count": c * h * w}),
        ("conv_spatial", "conv", {"k": 7, "cin": 2, "cout": 1, "hout": h, "wout": w}),
        ("sigmoid_spatial", "sigmoid", {"count": h * w}),
        ("scale_spatial", "elementwise", {"count": c * h * w}),
    ]


def gate_layers(c, d, n_branches, h, w):
    mid = c // d
    return [
        ("gap", "pool", {"count": c * h * w}),
        ("fc1", "linear", {"in": c, "out": mid}),
        ("relu", "relu", {"count": mid}),
        ("fc2", "linear", {"in": mid, "out": n_branches}),
        ("softmax", "softmax", {"count": n_branches}),
    ]


def _sum_layers(layers):
    return sum(flops_layer(kind, dims) for _, kind, dims in layers)


def branch_costs(channels, reduction, height, width):
    """Cost table over BRANCH_ORDER at one feature shape; identity is free."""
    if channels % reduction:
        raise ConfigError("channels must be divisible by the reduction ratio")
    costs = np.array([
        0.0,
        _sum_layers(se_layers(channels, reduction, height, width)),
        _sum_layers(ca_layers(channels, reduction, height, width)),
        _sum_layers(cbam_layers(channels, reduction, height, width)),
    ])
    return BranchCostTable(costs, channels, height, width)


def gate_cost(channels, gate_scale, n_branches, height, width):
    """Cost of evaluating the gating unit itself once."""
    if channels % gate_scale:
        raise ConfigError("channels must be divisible by the gate scaling factor")
    return _sum_layers(gate_layers(channels, gate_scale, n_branches, height, width))


def expected_cost(weights, table):
    """Soft-decision cost: sum_i K_i * cost_i."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != table.costs.shape:
        raise ConfigError(f"weights length {w.size} != {table.costs.size} branches")
    return float(w @ table.costs)


def reduction_vs_parallel(trace, table):
    """Fractional saving of the traced decisions against the static stack.

    1 - mean(selected branch cost) / (cost(se) + cost(ca) + cost(cbam));
    1.0 when every frame chose identity, negative is impossible because no
    single branch costs more than the full stack.
    """
    selected = [row.selected for row in trace.rows]
    if not selected:
        raise ConfigError("empty trace")
    parallel = table.all_attention
    if parallel <= 0.0:
        raise ConfigError("parallel cost is zero; nothing to compare against")
    mean_cost = float(np.mean([table[i] for i in selected]))
    return 1.0 - mean_cost / parallel


@dataclass
class FlopsReport:
    """Aggregated accounting for one tracked sequence or report run."""

    table: BranchCostTable
    gate: float
    per_frame: list = field(default_factory=list)  # attention cost per frame
    expected_per_frame: list = field(default_factory=list)

    def record(self, selected_cost, expected=None):
        self.per_frame.append(float(selected_cost))
        if expected is not None:
            self.expected_per_frame.append(float(expected))

    @property
    def total(self):
        return float(np.sum(self.per_frame)) if self.per_frame else 0.0

    @property
    def mean_per_frame(self):
        return float(np.mean(self.per_frame)) if self.per_frame else 0.0
