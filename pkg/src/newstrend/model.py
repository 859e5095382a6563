"""Hybrid attention network over a window of daily news corpora.

Per day, a one-layer scorer plus softmax weighs the day's news vectors into
a corpus vector; a bi-directional GRU encodes the day sequence; a second
softmax with per-date parameters weighs the encoded days into one context
vector; an MLP head emits DOWN/PRESERVE/UP probabilities.  Ablation switches
reduce the network to its baseline variants (uniform news weights, uniform
date weights, single-direction encoding), and parameters that an ablated
configuration cannot use are simply never allocated.

Two execution routes compute the same function: the define-by-run autodiff
graph built here (the auditable reference) and the fused kernels in
``newstrend.kernels`` (the fast path used for training).  Tests pin the two
routes together and the graph route to finite differences.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .autodiff import Graph
from .corpus import Sample, Trend

CHECKPOINT_MAGIC = b"NEWSTREND-CKPT-1\n"
CHECKPOINT_FORMAT = 1

GRU_GATES = ("Wr", "Ur", "br", "Wz", "Uz", "bz", "Wh", "Uh", "bh")


class CheckpointError(Exception):
    """Raised when a parameter file is unreadable or inconsistent."""


@dataclass(frozen=True)
class HyperParams:
    dim: int = 32
    hidden: int = 32
    n_days: int = 10
    max_news: int = 30
    att_dim: int | None = None
    mlp_hidden: tuple[int, ...] = (64, 32)
    news_attention: bool = True
    temporal_attention: bool = True
    bidirectional: bool = True

    def __post_init__(self):
        if self.dim < 1 or self.hidden < 1 or self.n_days < 1:
            raise ValueError("dim, hidden and n_days must be >= 1")
        if self.att_dim is None:
            object.__setattr__(self, "att_dim", self.hidden)
        object.__setattr__(self, "mlp_hidden", tuple(self.mlp_hidden))

    @property
    def encoded_dim(self) -> int:
        return 2 * self.hidden if self.bidirectional else self.hidden


@dataclass
class ForwardTrace:
    alpha: list[np.ndarray]  # per day, length = that day's news count (may be 0)
    beta: np.ndarray         # (n_days,)
    probs: np.ndarray        # (DOWN, PRESERVE, UP)
    score: float             # probs[UP] - probs[DOWN]


@dataclass
class ModelParams:
    hyper: HyperParams
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def n_params(self) -> int:
        return sum(int(t.size) for t in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.hyper, {k: v.copy() for k, v in self.tensors.items()})

    def equal(self, other: "ModelParams") -> bool:
        return self.hyper == other.hyper and all(
            np.array_equal(self.tensors[k], other.tensors[k]) for k in self.tensors
        ) and self.names() == other.names()


def tensor_shapes(hyper: HyperParams) -> dict[str, tuple[int, ...]]:
    """Canonical name -> shape map for the configuration's parameters."""
    d, h, a = hyper.dim, hyper.hidden, hyper.att_dim
    shapes: dict[str, tuple[int, ...]] = {}
    if hyper.news_attention:
        shapes["att_w"] = (d,)
        shapes["att_b"] = (1,)
    for prefix in ("f",) + (("b",) if hyper.bidirectional else ()):
        for gate in GRU_GATES:
            kind = gate[0]
            if kind == "W":
                shapes[f"{prefix}_{gate}"] = (h, d)
            elif kind == "U":
                shapes[f"{prefix}_{gate}"] = (h, h)
            else:
                shapes[f"{prefix}_{gate}"] = (h,)
    enc = hyper.encoded_dim
    if hyper.temporal_attention:
        shapes["tmp_W"] = (a, enc)
        shapes["tmp_b"] = (a,)
        shapes["tmp_theta"] = (hyper.n_days, a)
    widths = [enc, *hyper.mlp_hidden, 3]
    for i in range(len(widths) - 1):
        shapes[f"mlp_W{i}"] = (widths[i + 1], widths[i])
        shapes[f"mlp_b{i}"] = (widths[i + 1],)
    return shapes


def init_params(hyper: HyperParams, seed: int) -> ModelParams:
    """Uniform(-s, s) weights with s = sqrt(6/(fan_in+fan_out)); zero biases."""
    rng = np.random.Generator(np.random.PCG64(seed))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(hyper).items():
        if len(shape) == 1 and name not in ("att_w",):
            tensors[name] = np.zeros(shape)
        elif name == "att_w":
            s = np.sqrt(6.0 / (hyper.dim + 1))
            tensors[name] = rng.uniform(-s, s, size=shape)
        elif name == "tmp_theta":
            s = np.sqrt(6.0 / (hyper.att_dim + 1))
            tensors[name] = rng.uniform(-s, s, size=shape)
        else:
            fan_out, fan_in = shape
            s = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-s, s, size=shape)
    return ModelParams(hyper=hyper, tensors=tensors)


# ---------------------------------------------------------------------------
# Fast route: marshal to the kernel backend
# ---------------------------------------------------------------------------

_EMPTY_V = np.zeros(0)
_EMPTY_M = np.zeros((0, 0))


def _packed(params: ModelParams) -> tuple:
    """Fixed positional layout consumed by both kernel backends.

    Disabled blocks are zero-size placeholders; the flags tuple tells the
    kernel which blocks are live.
    """
    t = params.tensors
    hyper = params.hyper
    out = [t.get("att_w", _EMPTY_V), t.get("att_b", _EMPTY_V)]
    for prefix in ("f", "b"):
        for gate in GRU_GATES:
            default = _EMPTY_M if gate[0] in "WU" else _EMPTY_V
            out.append(t.get(f"{prefix}_{gate}", default))
    out += [t.get("tmp_W", _EMPTY_M), t.get("tmp_b", _EMPTY_V), t.get("tmp_theta", _EMPTY_M)]
    i = 0
    while f"mlp_W{i}" in t:
        out += [t[f"mlp_W{i}"], t[f"mlp_b{i}"]]
        i += 1
    return tuple(out)


def _packed_names(hyper: HyperParams) -> list[str | None]:
    names: list[str | None] = ["att_w", "att_b"]
    names += [f"f_{g}" for g in GRU_GATES]
    names += [f"b_{g}" for g in GRU_GATES]
    names += ["tmp_W", "tmp_b", "tmp_theta"]
    n_layers = len(hyper.mlp_hidden) + 1
    for i in range(n_layers):
        names += [f"mlp_W{i}", f"mlp_b{i}"]
    return names


def _flags(hyper: HyperParams) -> tuple[int, int, int]:
    return (
        int(hyper.news_attention),
        int(hyper.temporal_attention),
        int(hyper.bidirectional),
    )


def run_sample(window: list[np.ndarray], params: ModelParams, label: int = -1,
               need_grad: bool = False):
    """Single entry point to the selected kernel backend.

    Returns (loss, probs, alphas, beta, grads); loss is nan and grads None
    when no label is given, grads None when need_grad is false.
    """
    loss, probs, alphas, beta, flat_grads = kernels.run_sample(
        window, int(label), bool(need_grad), _flags(params.hyper), _packed(params)
    )
    if flat_grads is None:
        return loss, probs, alphas, beta, None
    grads = {}
    for name, g in zip(_packed_names(params.hyper), flat_grads):
        if name in params.tensors:
            grads[name] = g
    return loss, probs, alphas, beta, grads


def window_arrays(sample: Sample) -> list[np.ndarray]:
    return [day.news_vectors for day in sample.window]


def forward(sample: Sample, params: ModelParams) -> ForwardTrace:
    if len(sample.window) != params.hyper.n_days:
        raise ValueError(
            f"sample window has {len(sample.window)} days, model expects {params.hyper.n_days}"
        )
    _, probs, alphas, beta, _ = run_sample(window_arrays(sample), params)
    return ForwardTrace(alpha=alphas, beta=beta, probs=probs,
                        score=float(probs[Trend.UP] - probs[Trend.DOWN]))


def loss_and_grads(sample: Sample, params: ModelParams) -> tuple[float, dict[str, np.ndarray]]:
    loss, _, _, _, grads = run_sample(
        window_arrays(sample), params, label=int(sample.label), need_grad=True
    )
    return loss, grads


# ---------------------------------------------------------------------------
# The forward pass as individual building blocks.  These are the readable
# unit contracts; the kernels fuse exactly this composition and tests hold
# the two together.
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    1.0 - 1.0 / (1.0 + np.exp(-np.abs(x))))


def _softmax(x):
    e = np.exp(x - np.max(x))
    return e / e.sum()


def news_attention(news_vectors: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Weigh one day's news vectors into a corpus vector.

    Empty days map to the zero vector; with the attention switch off the
    weights are uniform (plain mean).
    """
    n_news = news_vectors.shape[0]
    dim = params.hyper.dim
    if n_news == 0:
        return np.zeros(dim), np.zeros(0)
    if news_vectors.shape[1] != dim:
        raise ValueError(f"news vectors have dim {news_vectors.shape[1]}, expected {dim}")
    if not params.hyper.news_attention:
        alpha = np.full(n_news, 1.0 / n_news)
    else:
        u = _sigmoid(news_vectors @ params.tensors["att_w"] + params.tensors["att_b"][0])
        alpha = _softmax(u)
    return alpha @ news_vectors, alpha


def gru_cell(x: np.ndarray, h_prev: np.ndarray, gates: dict[str, np.ndarray]) -> np.ndarray:
    """One recurrence step: reset/update gates interpolate old and new state."""
    Wr, Ur, br = gates["Wr"], gates["Ur"], gates["br"]
    Wz, Uz, bz = gates["Wz"], gates["Uz"], gates["bz"]
    Wh, Uh, bh = gates["Wh"], gates["Uh"], gates["bh"]
    if Wr.shape[1] != x.shape[0] or Ur.shape[1] != h_prev.shape[0]:
        raise ValueError(
            f"gru_cell shapes: x {x.shape}, h_prev {h_prev.shape}, "
            f"W {Wr.shape}, U {Ur.shape}"
        )
    r = _sigmoid(Wr @ x + Ur @ h_prev + br)
    z = _sigmoid(Wz @ x + Uz @ h_prev + bz)
    cand = np.tanh(Wh @ x + r * (Uh @ h_prev) + bh)
    return (1.0 - z) * h_prev + z * cand


def _gates(params: ModelParams, prefix: str) -> dict[str, np.ndarray]:
    return {g: params.tensors[f"{prefix}_{g}"] for g in GRU_GATES}


def bi_gru(day_vecs: np.ndarray, params: ModelParams) -> np.ndarray:
    """Encode the day sequence; forward and backward scans concatenated.

    With the bidirectional switch off only the forward scan is used.
    """
    hyper = params.hyper
    if day_vecs.shape[0] != hyper.n_days:
        raise ValueError(f"expected {hyper.n_days} day vectors, got {day_vecs.shape[0]}")
    fwd_gates = _gates(params, "f")
    h = np.zeros(hyper.hidden)
    fwd = []
    for t in range(hyper.n_days):
        h = gru_cell(day_vecs[t], h, fwd_gates)
        fwd.append(h)
    if not hyper.bidirectional:
        return np.array(fwd)
    bwd_gates = _gates(params, "b")
    h = np.zeros(hyper.hidden)
    bwd = []
    for t in range(hyper.n_days - 1, -1, -1):
        h = gru_cell(day_vecs[t], h, bwd_gates)
        bwd.append(h)
    return np.concatenate([np.array(fwd), np.array(bwd[::-1])], axis=1)


def temporal_attention(encoded: np.ndarray, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Weigh encoded days into one context vector; uniform when ablated."""
    hyper = params.hyper
    if encoded.shape != (hyper.n_days, hyper.encoded_dim):
        raise ValueError(
            f"encoded days have shape {encoded.shape}, expected "
            f"{(hyper.n_days, hyper.encoded_dim)}"
        )
    if not hyper.temporal_attention:
        beta = np.full(hyper.n_days, 1.0 / hyper.n_days)
    else:
        o = _sigmoid(encoded @ params.tensors["tmp_W"].T + params.tensors["tmp_b"])
        scores = np.sum(o * params.tensors["tmp_theta"], axis=1)
        beta = _softmax(scores)
    return beta @ encoded, beta


def classify(context: np.ndarray, params: ModelParams) -> np.ndarray:
    """MLP head with tanh hidden layers; softmax over (DOWN, PRESERVE, UP)."""
    x = context
    n_layers = len(params.hyper.mlp_hidden) + 1
    for i in range(n_layers):
        pre = params.tensors[f"mlp_W{i}"] @ x + params.tensors[f"mlp_b{i}"]
        x = np.tanh(pre) if i < n_layers - 1 else pre
    return _softmax(x)


# ---------------------------------------------------------------------------
# Reference route: build the loss as an autodiff graph
# ---------------------------------------------------------------------------


def build_loss_graph(
    graph: Graph,
    window: list[np.ndarray],
    label: int,
    params: ModelParams,
    leaf_overrides: dict | None = None,
) -> tuple[int, dict[str, int | list[int]]]:
    """Append the full forward + cross-entropy to ``graph``.

    Returns the loss node id and a map from tensor name to its leaf id
    (a list of per-date leaf ids for the temporal softmax parameters, which
    enter the graph row by row).  ``leaf_overrides`` lets a caller supply
    existing leaf ids per tensor name (the news-attention weight as a
    1 x dim leaf, the temporal softmax parameters as a list of row leaves),
    which is how grad_check drives the whole model.
    """
    hyper = params.hyper
    t = params.tensors
    overrides = leaf_overrides or {}
    leaves: dict[str, int | list[int]] = {}

    def leaf(name: str) -> int:
        nid = overrides[name] if name in overrides else graph.leaf(t[name])
        leaves[name] = nid
        return nid

    if hyper.news_attention:
        # Enters the graph as a 1 x dim matrix; grads reshape back to (dim,).
        if "att_w" in overrides:
            att_w_row = overrides["att_w"]
        else:
            att_w_row = graph.leaf(t["att_w"].reshape(1, -1))
        leaves["att_w"] = att_w_row
        att_b = leaf("att_b")
    day_vecs: list[int] = []
    alpha_nodes: list[int | None] = []
    for day in window:
        n_news = day.shape[0]
        if n_news == 0:
            day_vecs.append(graph.leaf(np.zeros(hyper.dim)))
            alpha_nodes.append(None)
            continue
        news_ids = [graph.leaf(day[i]) for i in range(n_news)]
        if hyper.news_attention:
            scores = [graph.add(graph.matmul(att_w_row, n), att_b) for n in news_ids]
            u = graph.sigmoid(graph.concat(scores, axis=0))
            alpha = graph.softmax(u)
        else:
            alpha = graph.leaf(np.full(n_news, 1.0 / n_news))
        alpha_nodes.append(alpha)
        day_vecs.append(graph.weighted_sum(alpha, news_ids))

    def gru_scan(prefix: str, xs: list[int]) -> list[int]:
        gates = {g: leaf(f"{prefix}_{g}") for g in GRU_GATES}
        h = graph.leaf(np.zeros(hyper.hidden))
        out = []
        for x in xs:
            r = graph.sigmoid(graph.add(graph.add(
                graph.matmul(gates["Wr"], x), graph.matmul(gates["Ur"], h)), gates["br"]))
            z = graph.sigmoid(graph.add(graph.add(
                graph.matmul(gates["Wz"], x), graph.matmul(gates["Uz"], h)), gates["bz"]))
            cand = graph.tanh(graph.add(graph.add(
                graph.matmul(gates["Wh"], x),
                graph.hadamard(r, graph.matmul(gates["Uh"], h))), gates["bh"]))
            # h' = h + z * (cand - h)
            h = graph.add(h, graph.hadamard(z, graph.add(cand, graph.scale(h, -1.0))))
            out.append(h)
        return out

    fwd = gru_scan("f", day_vecs)
    if hyper.bidirectional:
        bwd = gru_scan("b", day_vecs[::-1])[::-1]
        encoded = [graph.concat([f, b], axis=0) for f, b in zip(fwd, bwd)]
    else:
        encoded = fwd

    n = hyper.n_days
    if hyper.temporal_attention:
        tmp_w = leaf("tmp_W")
        tmp_b = leaf("tmp_b")
        if "tmp_theta" in overrides:
            theta_rows = list(overrides["tmp_theta"])
        else:
            theta_rows = [graph.leaf(t["tmp_theta"][i : i + 1]) for i in range(n)]
        leaves["tmp_theta"] = theta_rows
        scores = []
        for i, h in enumerate(encoded):
            o = graph.sigmoid(graph.add(graph.matmul(tmp_w, h), tmp_b))
            scores.append(graph.matmul(theta_rows[i], o))
        beta = graph.softmax(graph.concat(scores, axis=0))
    else:
        beta = graph.leaf(np.full(n, 1.0 / n))
    context = graph.weighted_sum(beta, encoded)

    x = context
    n_layers = len(hyper.mlp_hidden) + 1
    for i in range(n_layers):
        pre = graph.add(graph.matmul(leaf(f"mlp_W{i}"), x), leaf(f"mlp_b{i}"))
        x = graph.tanh(pre) if i < n_layers - 1 else pre
    probs = graph.softmax(x)
    loss = graph.cross_entropy(probs, label)
    return loss, leaves


def graph_loss_and_grads(
    window: list[np.ndarray], label: int, params: ModelParams
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and parameter gradients via the autodiff graph route."""
    graph = Graph()
    loss_id, leaves = build_loss_graph(graph, window, label, params)
    all_grads = graph.backward(loss_id)
    grads: dict[str, np.ndarray] = {}
    for name, ref in leaves.items():
        if isinstance(ref, list):
            grads[name] = np.vstack([all_grads[nid] for nid in ref])
        else:
            grads[name] = all_grads[ref].reshape(params.tensors[name].shape)
    return float(graph.value(loss_id)[0]), grads


# ---------------------------------------------------------------------------
# Checkpoint file: magic + JSON header + raw little-endian float64 blocks
# ---------------------------------------------------------------------------


def save_params(path, params: ModelParams) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "hyper": asdict(params.hyper),
        "tensors": [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for tensor in params.tensors.values():
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def load_params(path) -> ModelParams:
    try:
        with open(path, "rb") as fh:
            magic = fh.read(len(CHECKPOINT_MAGIC))
            if magic != CHECKPOINT_MAGIC:
                raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
            (hlen,) = struct.unpack("<I", fh.read(4))
            header = json.loads(fh.read(hlen).decode("utf-8"))
            if header.get("format") != CHECKPOINT_FORMAT:
                raise CheckpointError(
                    f"{path}: unsupported checkpoint format {header.get('format')}"
                )
            hyper_kw = dict(header["hyper"])
            hyper_kw["mlp_hidden"] = tuple(hyper_kw["mlp_hidden"])
            hyper = HyperParams(**hyper_kw)
            tensors: dict[str, np.ndarray] = {}
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                raw = fh.read(8 * n)
                if len(raw) != 8 * n:
                    raise CheckpointError(f"{path}: truncated tensor {entry['name']}")
                tensors[entry["name"]] = (
                    np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
                )
    except (OSError, struct.error, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc
    params = ModelParams(hyper=hyper, tensors=tensors)
    expected = tensor_shapes(hyper)
    got = {k: tuple(v.shape) for k, v in tensors.items()}
    if got != expected:
        raise CheckpointError(f"{path}: tensor layout does not match hyperparameters")
    return params


# ---------------------------------------------------------------------------
# Attention export
# ---------------------------------------------------------------------------


def export_attention(samples: list[Sample], params: ModelParams, path) -> None:
    """Dump per-news and per-day attention weights as plot-ready CSV.

    alpha rows: one per news item; beta rows: one per window day.  Offsets
    count from the oldest window day (0) to the most recent (n_days - 1).
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("row,stock_id,target_date,day_offset,day_date,news_index,value\n")
        for sample in samples:
            trace = forward(sample, params)
            for off, day in enumerate(sample.window):
                for idx in range(len(day)):
                    fh.write(
                        f"alpha,{sample.stock_id},{sample.target_date.isoformat()},"
                        f"{off},{day.date.isoformat()},{idx},{float(trace.alpha[off][idx])!r}\n"
                    )
            for off, day in enumerate(sample.window):
                fh.write(
                    f"beta,{sample.stock_id},{sample.target_date.isoformat()},"
                    f"{off},{day.date.isoformat()},,{float(trace.beta[off])!r}\n"
                )
