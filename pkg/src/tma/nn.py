"""Dense model math: GNN encoders, MLP decoder, losses, manual gradients, Adam.

Everything is plain numpy with hand-written reverse-mode gradients, so the
whole training stack is deterministic given seeds and checkable against
finite differences. Weights are float64 in memory; the checkpoint format
stores float32.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .graph import Graph

LN_EPS = 1e-5
ENCODERS = ("gcn", "sage", "mlp")


class NnError(ValueError):
    """Model misconfiguration or numeric failure (NaN/Inf)."""


@dataclass
class ModelConfig:
    """Architecture and optimizer settings shared by all trainers.

    ``theory_mode`` switches to the 1-layer linear analysis model: plain
    neighbor-mean aggregation (no self-loop), no LayerNorm/PReLU, sigmoid
    output, one weight matrix of shape (in_dim, 1).
    """

    in_dim: int
    encoder: str = "gcn"
    layers: int = 2
    hidden_dim: int = 64
    decoder_layers: int = 2
    lr: float = 0.001
    seed: int = 0
    theory_mode: bool = False

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise NnError(f"unknown encoder {self.encoder!r}")
        if self.layers < 1 or self.decoder_layers < 1:
            raise NnError("layers and decoder_layers must be >= 1")
        if self.theory_mode and (self.encoder != "gcn" or self.layers != 1):
            raise NnError("theory mode is the 1-layer gcn model")

    def fingerprint(self) -> str:
        if self.theory_mode:
            return f"theory-gcn[{self.in_dim}->1]"
        dims = [self.in_dim] + [self.hidden_dim] * self.layers
        enc = "->".join(map(str, dims))
        dec = "->".join([str(self.hidden_dim)] * self.decoder_layers + ["1"])
        return f"{self.encoder}[{enc}];dec[{dec}]"

    def fingerprint_digest(self) -> bytes:
        return hashlib.blake2b(self.fingerprint().encode(), digest_size=16).digest()


@dataclass
class ModelWeights:
    """Ordered, named parameter tensors; the unit shipped between workers.

    Two ModelWeights are aggregable iff their fingerprints match.
    """

    fingerprint: str
    names: list[str]
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            fingerprint=self.fingerprint,
            names=list(self.names),
            tensors={k: v.copy() for k, v in self.tensors.items()},
        )

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def items(self):
        for name in self.names:
            yield name, self.tensors[name]

    def allclose(self, other: "ModelWeights", **kw) -> bool:
        return self.fingerprint == other.fingerprint and all(
            np.allclose(self.tensors[n], other.tensors[n], **kw) for n in self.names
        )

    def equal_bits(self, other: "ModelWeights") -> bool:
        return self.fingerprint == other.fingerprint and all(
            np.array_equal(self.tensors[n], other.tensors[n]) for n in self.names
        )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_weights(cfg: ModelConfig) -> ModelWeights:
    """Seeded Glorot-uniform init; PReLU slopes 0.25, LayerNorm affine identity."""
    rng = np.random.default_rng(cfg.seed)
    names: list[str] = []
    tensors: dict[str, np.ndarray] = {}

    def add(name, arr):
        names.append(name)
        tensors[name] = np.asarray(arr, dtype=np.float64)

    if cfg.theory_mode:
        add("enc0.weight", np.zeros((cfg.in_dim, 1)))
        return ModelWeights(cfg.fingerprint(), names, tensors)

    d_in = cfg.in_dim
    for i in range(cfg.layers):
        d_out = cfg.hidden_dim
        fan_in = 2 * d_in if cfg.encoder == "sage" else d_in
        add(f"enc{i}.weight", _glorot(rng, fan_in, d_out))
        add(f"enc{i}.ln.gain", np.ones(d_out))
        add(f"enc{i}.ln.bias", np.zeros(d_out))
        add(f"enc{i}.prelu", np.array([0.25]))
        d_in = d_out
    for k in range(cfg.decoder_layers):
        last = k == cfg.decoder_layers - 1
        add(f"dec{k}.weight", _glorot(rng, cfg.hidden_dim, 1 if last else cfg.hidden_dim))
        if not last:
            add(f"dec{k}.prelu", np.array([0.25]))
    return ModelWeights(cfg.fingerprint(), names, tensors)


def zero_grads(w: ModelWeights) -> dict[str, np.ndarray]:
    return {n: np.zeros_like(t) for n, t in w.items()}


# ---------------------------------------------------------------------------
# message-flow blocks


@dataclass(frozen=True)
class Block:
    """One layer of neighborhood structure.

    Destination row d aggregates source rows ``nbr[indptr[d]:indptr[d+1]]``;
    its own features sit at source row ``self_idx[d]``.
    """

    num_src: int
    indptr: np.ndarray
    nbr: np.ndarray
    self_idx: np.ndarray

    @property
    def num_dst(self) -> int:
        return len(self.indptr) - 1


def full_graph_blocks(g: Graph, layers: int) -> list[Block]:
    """Identity blocks covering every node: the unsampled evaluation path."""
    block = Block(
        num_src=g.num_nodes,
        indptr=g.indptr,
        nbr=g.indices,
        self_idx=np.arange(g.num_nodes),
    )
    return [block] * layers


def _segment_sum(rows: np.ndarray, indptr: np.ndarray) -> np.ndarray:
    csum = np.vstack([np.zeros((1, rows.shape[1])), np.cumsum(rows, axis=0)])
    return csum[indptr[1:]] - csum[indptr[:-1]]


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.isfinite(arr).all():
        raise NnError(f"non-finite values in {where}")


# ---------------------------------------------------------------------------
# layer primitives (forward returns a cache consumed by the backward pass)


def _layernorm_fwd(z, gain, bias):
    mu = z.mean(axis=1, keepdims=True)
    xc = z - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv, gain)


def _layernorm_bwd(grad, cache):
    xhat, inv, gain = cache
    dgain = np.sum(grad * xhat, axis=0)
    dbias = np.sum(grad, axis=0)
    dxhat = grad * gain
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = np.mean(dxhat * xhat, axis=1, keepdims=True)
    dz = inv * (dxhat - m1 - xhat * m2)
    return dz, dgain, dbias


def _prelu_fwd(z, slope):
    a = slope[0]
    return np.where(z > 0, z, a * z), z


def _prelu_bwd(grad, z, slope):
    a = slope[0]
    dz = grad * np.where(z > 0, 1.0, a)
    da = np.array([np.sum(grad * np.where(z > 0, 0.0, z))])
    return dz, da


def _aggregate_fwd(h, block: Block, include_self: bool):
    """Mean over in-scope neighbors, optionally folding in the node itself."""
    gathered = h[block.nbr]
    total = _segment_sum(gathered, block.indptr)
    deg = np.diff(block.indptr).astype(np.float64)
    if include_self:
        total = total + h[block.self_idx]
        denom = deg + 1.0
    else:
        denom = np.maximum(deg, 1.0)
    agg = total / denom[:, None]
    return agg, denom


def _aggregate_bwd(grad_agg, block: Block, denom, include_self: bool, d_h):
    scaled = grad_agg / denom[:, None]
    seg_ids = np.repeat(np.arange(block.num_dst), np.diff(block.indptr))
    np.add.at(d_h, block.nbr, scaled[seg_ids])
    if include_self:
        np.add.at(d_h, block.self_idx, scaled)


# ---------------------------------------------------------------------------
# encoder


def encode_with_tape(cfg: ModelConfig, w: ModelWeights, blocks: list[Block], x: np.ndarray):
    """Forward pass; returns (embeddings, tape) with tape feeding encode_backward."""
    if cfg.theory_mode:
        raise NnError("use theory_forward for the analysis model")
    if len(blocks) != cfg.layers:
        raise NnError(f"need {cfg.layers} blocks, got {len(blocks)}")
    if blocks[0].num_src != x.shape[0]:
        raise NnError("feature rows do not match the input frontier")
    h = np.asarray(x, dtype=np.float64)
    tape = []
    for i, block in enumerate(blocks):
        weight = w[f"enc{i}.weight"]
        if cfg.encoder == "gcn":
            agg, denom = _aggregate_fwd(h, block, include_self=True)
            pre = agg @ weight
            cache_in = (h, denom)
        elif cfg.encoder == "sage":
            neigh, denom = _aggregate_fwd(h, block, include_self=False)
            self_rows = h[block.self_idx]
            agg = np.concatenate([self_rows, neigh], axis=1)
            pre = agg @ weight
            cache_in = (h, denom)
        else:  # mlp
            agg = h[block.self_idx]
            pre = agg @ weight
            cache_in = (h, None)
        out_ln, ln_cache = _layernorm_fwd(pre, w[f"enc{i}.ln.gain"], w[f"enc{i}.ln.bias"])
        out, pre_act = _prelu_fwd(out_ln, w[f"enc{i}.prelu"])
        _check_finite(out, f"encoder layer {i}")
        tape.append((block, agg, cache_in, ln_cache, pre_act))
        h = out
    return h, tape


def encode_backward(cfg: ModelConfig, w: ModelWeights, tape, grad_emb: np.ndarray, grads: dict):
    """Accumulate parameter gradients for a previous encode_with_tape call."""
    grad = grad_emb
    for i in reversed(range(len(tape))):
        block, agg, (h_in, denom), ln_cache, pre_act = tape[i]
        grad, da = _prelu_bwd(grad, pre_act, w[f"enc{i}.prelu"])
        grads[f"enc{i}.prelu"] += da
        grad, dgain, dbias = _layernorm_bwd(grad, ln_cache)
        grads[f"enc{i}.ln.gain"] += dgain
        grads[f"enc{i}.ln.bias"] += dbias
        weight = w[f"enc{i}.weight"]
        grads[f"enc{i}.weight"] += agg.T @ grad
        d_agg = grad @ weight.T
        d_h = np.zeros_like(h_in)
        if cfg.encoder == "gcn":
            _aggregate_bwd(d_agg, block, denom, True, d_h)
        elif cfg.encoder == "sage":
            d_self, d_neigh = np.split(d_agg, 2, axis=1)
            _aggregate_bwd(d_neigh, block, denom, False, d_h)
            np.add.at(d_h, block.self_idx, d_self)
        else:
            np.add.at(d_h, block.self_idx, d_agg)
        grad = d_h
    return grad


def encode(cfg: ModelConfig, w: ModelWeights, g_or_blocks, x: np.ndarray) -> np.ndarray:
    """Node embeddings for a full graph or a sampled message-flow structure."""
    blocks = (
        full_graph_blocks(g_or_blocks, cfg.layers)
        if isinstance(g_or_blocks, Graph)
        else list(g_or_blocks)
    )
    if cfg.theory_mode:
        return theory_forward(w, blocks[0].indptr, blocks[0].nbr, x)
    emb, _ = encode_with_tape(cfg, w, blocks, x)
    return emb


# ---------------------------------------------------------------------------
# decoder


def decode_with_tape(cfg: ModelConfig, w: ModelWeights, r_u: np.ndarray, r_v: np.ndarray):
    if r_u.shape != r_v.shape or r_u.shape[1] != cfg.hidden_dim:
        raise NnError("embedding shape does not match decoder input dim")
    e = r_u * r_v
    tape = [("prod", r_u, r_v)]
    for k in range(cfg.decoder_layers):
        weight = w[f"dec{k}.weight"]
        pre = e @ weight
        if k == cfg.decoder_layers - 1:
            tape.append(("linear", e))
            e = pre
        else:
            out, pre_act = _prelu_fwd(pre, w[f"dec{k}.prelu"])
            tape.append(("act", e, pre_act))
            e = out
    scores = e[:, 0]
    _check_finite(scores, "decoder output")
    return scores, tape


def decode_backward(cfg: ModelConfig, w: ModelWeights, tape, grad_scores: np.ndarray, grads: dict):
    grad = grad_scores[:, None]
    for k in reversed(range(cfg.decoder_layers)):
        entry = tape[k + 1]
        if entry[0] == "linear":
            e_in = entry[1]
        else:
            _, e_in, pre_act = entry
            grad, da = _prelu_bwd(grad, pre_act, w[f"dec{k}.prelu"])
            grads[f"dec{k}.prelu"] += da
        grads[f"dec{k}.weight"] += e_in.T @ grad
        grad = grad @ w[f"dec{k}.weight"].T
    _, r_u, r_v = tape[0]
    return grad * r_v, grad * r_u


def decode(cfg: ModelConfig, w: ModelWeights, r_u: np.ndarray, r_v: np.ndarray) -> np.ndarray:
    """Pair scores; symmetric in (u, v) because the input is an elementwise product."""
    scores, _ = decode_with_tape(cfg, w, np.atleast_2d(r_u), np.atleast_2d(r_v))
    return scores


# ---------------------------------------------------------------------------
# losses


def loss_bce(scores: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean binary cross-entropy on logits; gradient is (sigmoid(s) - y) / batch."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    # log(1 + e^-|s|) + max(s, 0) - s*y, stable for large |s|
    loss = float(np.mean(np.log1p(np.exp(-np.abs(s))) + np.maximum(s, 0.0) - s * y))
    grad = (_sigmoid(s) - y) / len(s)
    return loss, grad


def loss_l2(z: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean of per-sample 0.5 * (y - z)^2; gradient w.r.t. z is (z - y) / batch."""
    z = np.asarray(z, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    diff = z - y
    return float(np.mean(0.5 * diff * diff)), diff / diff.size


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# theory model: 1-layer linear GCN, plain neighbor mean, sigmoid output


def theory_forward(w: ModelWeights, indptr: np.ndarray, nbr: np.ndarray, x: np.ndarray) -> np.ndarray:
    """sigmoid(mean-neighbor-features @ W) per destination row.

    The adjacency view may be asymmetric (used for hypothetical partition
    placements); rows with no neighbors aggregate to zero.
    """
    block = Block(num_src=x.shape[0], indptr=indptr, nbr=nbr, self_idx=np.arange(len(indptr) - 1))
    agg, _ = _aggregate_fwd(np.asarray(x, dtype=np.float64), block, include_self=False)
    return _sigmoid(agg @ w["enc0.weight"])[:, 0]


def theory_mean_gradient(
    w: ModelWeights,
    indptr: np.ndarray,
    nbr: np.ndarray,
    x: np.ndarray,
    targets: np.ndarray,
    rows: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Mean over ``rows`` of the per-node L2-loss gradient w.r.t. the weight vector.

    The mean per-node gradient equals one backward pass of the batch-mean
    loss, because the loss is additive over nodes.
    """
    x = np.asarray(x, dtype=np.float64)
    block = Block(num_src=x.shape[0], indptr=indptr, nbr=nbr, self_idx=np.arange(len(indptr) - 1))
    agg, _ = _aggregate_fwd(x, block, include_self=False)
    agg = agg[rows]
    z = _sigmoid(agg @ w["enc0.weight"])[:, 0]
    loss, dz = loss_l2(z, np.asarray(targets, dtype=np.float64)[rows])
    dpre = dz * z * (1.0 - z)
    grad = agg.T @ dpre[:, None]
    return loss, grad


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state: AdamState, w: ModelWeights, grads: dict, lr: float) -> ModelWeights:
    """One Adam update, in place on w (also returned)."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, _ in w.items():
        g = grads[name]
        m = state.m.setdefault(name, np.zeros_like(g))
        v = state.v.setdefault(name, np.zeros_like(g))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w.tensors[name] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return w


# ---------------------------------------------------------------------------
# aggregation operator


def aggregate_average(weight_sets: list[ModelWeights]) -> ModelWeights:
    """Elementwise mean in fixed left-to-right order.

    Computed as a running mean so that averaging identical inputs returns
    them bit-exactly for any count.
    """
    if not weight_sets:
        raise NnError("nothing to aggregate")
    first = weight_sets[0]
    for other in weight_sets[1:]:
        if other.fingerprint != first.fingerprint:
            raise NnError(
                f"fingerprint mismatch: {other.fingerprint!r} vs {first.fingerprint!r}"
            )
    out = first.copy()
    for k, other in enumerate(weight_sets[1:], start=2):
        for name in out.names:
            t = out.tensors[name]
            t += (other.tensors[name] - t) / k
    return out


# ---------------------------------------------------------------------------
# one training step on a mini-batch


def link_loss_and_grads(
    cfg: ModelConfig,
    w: ModelWeights,
    blocks: list[Block],
    x_input: np.ndarray,
    pos_u: np.ndarray,
    pos_v: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict]:
    """BCE loss and parameter gradients for one batch of scored pairs."""
    emb, tape = encode_with_tape(cfg, w, blocks, x_input)
    r_u, r_v = emb[pos_u], emb[pos_v]
    scores, dec_tape = decode_with_tape(cfg, w, r_u, r_v)
    loss, dscores = loss_bce(scores, labels)
    grads = zero_grads(w)
    d_ru, d_rv = decode_backward(cfg, w, dec_tape, dscores, grads)
    d_emb = np.zeros_like(emb)
    np.add.at(d_emb, pos_u, d_ru)
    np.add.at(d_emb, pos_v, d_rv)
    encode_backward(cfg, w, tape, d_emb, grads)
    return loss, grads


def link_step(
    cfg: ModelConfig,
    w: ModelWeights,
    opt: AdamState,
    blocks: list[Block],
    x_input: np.ndarray,
    pos_u: np.ndarray,
    pos_v: np.ndarray,
    labels: np.ndarray,
) -> float:
    """Forward + backward + Adam on one batch; index arrays select output rows."""
    loss, grads = link_loss_and_grads(cfg, w, blocks, x_input, pos_u, pos_v, labels)
    adam_step(opt, w, grads, cfg.lr)
    return loss


# ---------------------------------------------------------------------------
# weight checkpoint format ("TMAW")

_WEIGHTS_MAGIC = b"TMAW"
_WEIGHTS_VERSION = 1


def weights_to_bytes(w: ModelWeights) -> bytes:
    digest = hashlib.blake2b(w.fingerprint.encode(), digest_size=16).digest()
    parts = [_WEIGHTS_MAGIC, struct.pack("<H", _WEIGHTS_VERSION), digest]
    parts.append(struct.pack("<I", len(w.names)))
    for name, tensor in w.items():
        enc = name.encode()
        parts.append(struct.pack("<H", len(enc)))
        parts.append(enc)
        parts.append(struct.pack("<B", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        parts.append(tensor.astype("<f4").tobytes())
    return b"".join(parts)


def weights_from_bytes(data: bytes, fingerprint: str) -> ModelWeights:
    """Parse a checkpoint; the caller supplies the architecture fingerprint."""
    view = memoryview(data)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(view):
            raise NnError(f"truncated weights at byte {off} reading {what}")
        chunk = view[off : off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != _WEIGHTS_MAGIC:
        raise NnError("bad magic in weight checkpoint")
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != _WEIGHTS_VERSION:
        raise NnError(f"unsupported weight version {version}")
    digest = bytes(take(16, "fingerprint"))
    expect = hashlib.blake2b(fingerprint.encode(), digest_size=16).digest()
    if digest != expect:
        raise NnError("weight checkpoint fingerprint does not match model config")
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    names: list[str] = []
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode()
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank, "shape"))
        size = int(np.prod(shape)) if rank else 1
        raw = take(4 * size, f"tensor {name}")
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
        names.append(name)
        tensors[name] = arr
    return ModelWeights(fingerprint=fingerprint, names=names, tensors=tensors)


def save_weights(w: ModelWeights, path) -> None:
    with open(path, "wb") as f:
        f.write(weights_to_bytes(w))


def load_weights(path, cfg: ModelConfig) -> ModelWeights:
    with open(path, "rb") as f:
        return weights_from_bytes(f.read(), cfg.fingerprint())
