"""Single-output layered network, piecewise-linear losses and empirical risk.

The network score is ``x^T W_1 dg(m_1) W_2 dg(m_2) ... W_{L-1} dg(m_{L-1}) a``
where each diagonal factor is built from the layer's estimated indicator,
so the masked product is evaluated as the recurrence ``t <- estimate(W^T t)``
and the score is the inner product of the top activation with the output
vector ``a``.  Losses are restricted to the nonnegative convex piecewise
linear class with zero infimum (hinge and absolute), whose second
derivative vanishes almost everywhere.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .poset import ActivationRule, LayerState, estimate_indicator, load_network_json

__all__ = [
    "Dataset",
    "LossL0",
    "NetworkParams",
    "empirical_risk",
    "flatten_params",
    "forward",
    "load_dataset_csv",
    "loss",
    "network_from_chain_json",
    "param_group_dims",
    "risk_gradient",
    "unflatten_params",
]


class LossL0(Enum):
    """Nonnegative convex piecewise-linear losses with zero infimum."""

    HINGE = "hinge"
    ABSOLUTE = "absolute"


@dataclass(frozen=True)
class NetworkParams:
    """Weight matrices, output vector and the shared activation rule."""

    weights: tuple[np.ndarray, ...]
    alpha: np.ndarray
    rule: ActivationRule = ActivationRule.ARGMAX_MASK_01

    def __post_init__(self):
        ws = tuple(np.asarray(w, dtype=float) for w in self.weights)
        alpha = np.asarray(self.alpha, dtype=float)
        if alpha.ndim != 1:
            raise ShapeError("alpha must be a vector")
        for w in ws:
            if w.ndim != 2:
                raise ShapeError("weights must be matrices")
        for a, b in zip(ws, ws[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError(f"adjacent weights do not compose: {a.shape} -> {b.shape}")
        if ws and ws[-1].shape[1] != alpha.shape[0]:
            raise ShapeError(
                f"last weight has {ws[-1].shape[1]} columns but alpha has {alpha.shape[0]}"
            )
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "alpha", alpha)

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0] if self.weights else self.alpha.shape[0]

    @property
    def depth(self) -> int:
        """Number of parameter groups, the L-1 weight matrices plus alpha."""
        return len(self.weights) + 1


@dataclass(frozen=True)
class Dataset:
    """Training samples: row-wise inputs and labels in {-1, +1}."""

    x: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        x = np.atleast_2d(np.asarray(self.x, dtype=float))
        y = np.asarray(self.y, dtype=float).ravel()
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"{x.shape[0]} inputs but {y.shape[0]} labels")
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise DomainError("labels must lie in {-1, +1}")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite inputs in dataset")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return self.x.shape[0]


def forward(params: NetworkParams, x: np.ndarray):
    """Evaluate the score and record every layer state.

    Returns ``(score, states)`` where ``states[i]`` holds the layer input,
    preactivation, estimated output and estimation-map derivatives needed
    for gradient and second-order assembly.
    """
    t = np.asarray(x, dtype=float)
    if t.shape != (params.input_dim,):
        raise ShapeError(f"input has shape {t.shape}, network expects ({params.input_dim},)")
    states: list[LayerState] = []
    for w in params.weights:
        h_hat = w.T @ t
        h_tilde, h_prime = estimate_indicator(params.rule, h_hat)
        states.append(LayerState(t, h_hat, h_tilde, h_prime, h_prime * h_prime))
        t = h_tilde
    return float(t @ params.alpha), states


def loss(kind: LossL0, score: float, y: float):
    """Loss value and its derivative in the score; subgradient 0 at kinks."""
    if y not in (-1.0, 1.0, -1, 1):
        raise DomainError(f"label must be -1 or +1, got {y}")
    if kind is LossL0.HINGE:
        margin = 1.0 - y * score
        if margin > 0.0:
            return margin, -float(y)
        return 0.0, 0.0
    if kind is LossL0.ABSOLUTE:
        r = score - y
        if r == 0.0:
            return 0.0, 0.0
        return abs(r), float(np.sign(r))
    raise DomainError(f"unknown loss {kind!r}")


def empirical_risk(params: NetworkParams, kind: LossL0, dataset: Dataset) -> float:
    """Mean loss over the dataset."""
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    values = np.array(
        [loss(kind, forward(params, xi)[0], yi)[0] for xi, yi in zip(dataset.x, dataset.y)]
    )
    return float(np.sum(values) / len(dataset))


def _backprop_deltas(params: NetworkParams, states: list[LayerState]) -> list[np.ndarray]:
    """Score derivatives with respect to each layer's preactivation."""
    deltas = [np.empty(0)] * len(params.weights)
    upstream = params.alpha
    for i in range(len(params.weights) - 1, -1, -1):
        deltas[i] = states[i].h_prime * upstream
        upstream = params.weights[i] @ deltas[i]
    return deltas


def risk_gradient(params: NetworkParams, kind: LossL0, dataset: Dataset) -> np.ndarray:
    """Analytic gradient of the empirical risk over all parameters.

    The layout is column-major vectorization of each weight matrix in layer
    order, followed by the output vector.
    """
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    per_sample = np.zeros((len(dataset), sum(param_group_dims(params))))
    for row, (xi, yi) in enumerate(zip(dataset.x, dataset.y)):
        score, states = forward(params, xi)
        _, deriv = loss(kind, score, yi)
        if deriv == 0.0:
            continue
        deltas = _backprop_deltas(params, states)
        pieces = [
            (deriv * np.outer(states[i].t_in, deltas[i])).ravel(order="F")
            for i in range(len(params.weights))
        ]
        top = states[-1].h_tilde if params.weights else xi
        pieces.append(deriv * top)
        per_sample[row] = np.concatenate(pieces)
    return np.sum(per_sample, axis=0) / len(dataset)


def param_group_dims(params: NetworkParams) -> tuple[int, ...]:
    """Flat sizes of the parameter groups W_1 ... W_{L-1}, alpha."""
    return tuple(w.size for w in params.weights) + (params.alpha.size,)


def flatten_params(params: NetworkParams) -> np.ndarray:
    """Column-major flatten of every weight matrix followed by alpha."""
    pieces = [w.ravel(order="F") for w in params.weights]
    pieces.append(params.alpha)
    return np.concatenate(pieces)


def unflatten_params(theta: np.ndarray, like: NetworkParams) -> NetworkParams:
    """Inverse of :func:`flatten_params` against a template's shapes."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (sum(param_group_dims(like)),):
        raise ShapeError("flat parameter vector has the wrong length")
    weights = []
    offset = 0
    for w in like.weights:
        weights.append(theta[offset : offset + w.size].reshape(w.shape, order="F"))
        offset += w.size
    alpha = theta[offset:]
    return NetworkParams(tuple(weights), alpha, like.rule)


def network_from_chain_json(source) -> NetworkParams:
    """Load a network from the poset document restricted to a chain.

    The chain's last node must carry a single-column kernel, which becomes
    the output vector; its rule entry is accepted but not applied since the
    score is the top node's preactivation.  All interior nodes must share
    one activation rule.
    """
    poset, specs = load_network_json(source)
    order = [poset.minimal]
    while True:
        succ = poset.successors(order[-1])
        if not succ:
            break
        if len(succ) != 1:
            raise DomainError("network document is not a chain")
        order.append(next(iter(succ)))
    if set(order) != set(poset.node_ids):
        raise DomainError("network document is not a chain")
    if len(order) < 2:
        raise DomainError("chain must contain at least one layer above the input")
    kernels = [specs[node][0] for node in order[1:]]
    rules = {specs[node][1] for node in order[1:-1]}
    if len(rules) > 1:
        raise DomainError(f"layers must share one activation rule, found {sorted(r.value for r in rules)}")
    if kernels[-1].out_dim != 1:
        raise ShapeError("top node kernel must have a single column (the output vector)")
    rule = rules.pop() if rules else ActivationRule.ARGMAX_MASK_01
    weights = tuple(k.weight for k in kernels[:-1])
    alpha = kernels[-1].weight[:, 0]
    return NetworkParams(weights, alpha, rule)


def load_dataset_csv(path) -> Dataset:
    """Read a dataset from CSV with header ``x1,...,xn,y``."""
    with open(path, "r", encoding="utf-8", newline="") as handle:
        rows = [row for row in csv.reader(handle) if row and not row[0].startswith("#")]
    if not rows:
        raise DomainError(f"empty dataset file {path}")
    header = [h.strip() for h in rows[0]]
    if header[-1] != "y" or not all(h.startswith("x") for h in header[:-1]):
        raise DomainError(f"expected header x1,...,xn,y in {path}, got {header}")
    try:
        data = np.asarray([[float(v) for v in row] for row in rows[1:]], dtype=float)
    except ValueError as exc:
        raise DomainError(f"non-numeric value in {path}: {exc}") from exc
    if data.size == 0:
        raise DomainError(f"dataset file {path} has a header but no rows")
    return Dataset(data[:, :-1], data[:, -1])


def save_dataset_csv(path, dataset: Dataset) -> None:
    """Write a dataset in the ``x1,...,xn,y`` layout."""
    n = dataset.x.shape[1]
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow([f"x{i + 1}" for i in range(n)] + ["y"])
        for xi, yi in zip(dataset.x, dataset.y):
            writer.writerow([format(v, ".17g") for v in xi] + [format(yi, ".17g")])


def network_to_chain_json(params: NetworkParams) -> dict:
    """Serialize a network as the chain form of the poset document."""
    kernels = list(params.weights) + [params.alpha.reshape(-1, 1)]
    nodes = [str(i) for i in range(len(kernels) + 1)]
    layers = {}
    for i, w in enumerate(kernels, start=1):
        layers[nodes[i]] = {
            "rows": int(w.shape[0]),
            "cols": int(w.shape[1]),
            "field": "01",
            "rule": params.rule.value,
            "weights": [float(v) for v in np.asarray(w).ravel()],
        }
    return {
        "nodes": nodes,
        "edges": [[nodes[i], nodes[i + 1]] for i in range(len(kernels))],
        "layers": layers,
    }
