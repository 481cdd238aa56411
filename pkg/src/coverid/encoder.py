"""Trainable audio encoder: rotary-position attention pooling plus an MLP head.

A learnable query vector attends over the frame sequence (single head,
rotary positions on queries/keys: query at position 0, keys at 1..L), the
pooled vector passes through a residual feed-forward block with a post-sum
LayerNorm, and an MLP head with per-hidden-layer LayerNorm+ReLU projects
into the target embedding space. Forward and reverse-mode gradient
evaluation are exact at binary64; the interchange formats stay binary32.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featurestore import FrameFeatures
from .losses import LossBreakdown, LossConfig, loss_and_gradients


class EncoderError(Exception):
    """Shape or numeric failure inside the encoder."""


class GradientError(EncoderError):
    """A non-finite gradient was produced; carries the parameter name."""


@dataclass
class EncoderConfig:
    d_w: int
    l_max: int = 1500
    d_k: int | None = None
    mlp_hidden: tuple[int, ...] = (3072, 2048, 2048, 1536)
    d_out: int = 768
    ln_epsilon: float = 1e-5
    rope_base: float = 10000.0
    ffn_hidden: int | None = None
    # Padding frames are attended by default, mirroring the fixed-length
    # input convention of the upstream feature producer. When set, trailing
    # all-zero frames are dropped before pooling.
    mask_padded: bool = False

    def __post_init__(self) -> None:
        if self.d_k is None:
            self.d_k = self.d_w
        if self.ffn_hidden is None:
            self.ffn_hidden = self.d_w
        dims = (self.d_w, self.l_max, self.d_k, self.d_out, self.ffn_hidden, *self.mlp_hidden)
        if any(d <= 0 for d in dims):
            raise ValueError(f"all encoder dims must be positive, got {dims}")
        if self.d_k % 2 != 0:
            raise ValueError(f"d_k must be even for rotary pairs, got {self.d_k}")

    def to_dict(self) -> dict:
        return {
            "d_w": self.d_w, "l_max": self.l_max, "d_k": self.d_k,
            "mlp_hidden": list(self.mlp_hidden), "d_out": self.d_out,
            "ln_epsilon": self.ln_epsilon, "rope_base": self.rope_base,
            "ffn_hidden": self.ffn_hidden, "mask_padded": self.mask_padded,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EncoderConfig":
        doc = dict(doc)
        doc["mlp_hidden"] = tuple(doc.get("mlp_hidden", ()))
        return cls(**doc)


@dataclass
class EncoderParams:
    q_cls: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    pool_ffn_w1: np.ndarray
    pool_ffn_b1: np.ndarray
    pool_ffn_w2: np.ndarray
    pool_ffn_b2: np.ndarray
    pool_ln_gain: np.ndarray
    pool_ln_bias: np.ndarray
    head_weights: list[np.ndarray] = field(default_factory=list)
    head_biases: list[np.ndarray] = field(default_factory=list)
    head_ln_gains: list[np.ndarray] = field(default_factory=list)
    head_ln_biases: list[np.ndarray] = field(default_factory=list)
    out_weight: np.ndarray = None
    out_bias: np.ndarray = None

    def tensors(self) -> dict[str, np.ndarray]:
        """All trainable tensors in canonical order; arrays are shared, not copied."""
        out = {
            "q_cls": self.q_cls,
            "w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v,
            "pool_ffn_w1": self.pool_ffn_w1, "pool_ffn_b1": self.pool_ffn_b1,
            "pool_ffn_w2": self.pool_ffn_w2, "pool_ffn_b2": self.pool_ffn_b2,
            "pool_ln_gain": self.pool_ln_gain, "pool_ln_bias": self.pool_ln_bias,
        }
        for i in range(len(self.head_weights)):
            out[f"head_{i}_weight"] = self.head_weights[i]
            out[f"head_{i}_bias"] = self.head_biases[i]
            out[f"head_{i}_ln_gain"] = self.head_ln_gains[i]
            out[f"head_{i}_ln_bias"] = self.head_ln_biases[i]
        out["head_out_weight"] = self.out_weight
        out["head_out_bias"] = self.out_bias
        return out

    def count(self) -> int:
        return sum(t.size for t in self.tensors().values())


@dataclass
class AudioEmbedding:
    data: np.ndarray
    track_id: str = ""
    segment_index: int = 0


def init_params(cfg: EncoderConfig, seed: int = 17) -> EncoderParams:
    """Glorot-uniform weights, zero biases, unit LayerNorm gains, Gaussian query."""
    rng = np.random.default_rng(seed)

    def glorot(fan_in: int, fan_out: int) -> np.ndarray:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_in, fan_out))

    d_w, d_k, d_ffn = cfg.d_w, cfg.d_k, cfg.ffn_hidden
    params = EncoderParams(
        q_cls=rng.normal(0.0, 1.0 / np.sqrt(d_w), size=d_w),
        w_q=glorot(d_w, d_k), w_k=glorot(d_w, d_k), w_v=glorot(d_w, d_k),
        pool_ffn_w1=glorot(d_k, d_ffn), pool_ffn_b1=np.zeros(d_ffn),
        pool_ffn_w2=glorot(d_ffn, d_k), pool_ffn_b2=np.zeros(d_k),
        pool_ln_gain=np.ones(d_k), pool_ln_bias=np.zeros(d_k),
    )
    in_dim = d_k
    for width in cfg.mlp_hidden:
        params.head_weights.append(glorot(in_dim, width))
        params.head_biases.append(np.zeros(width))
        params.head_ln_gains.append(np.ones(width))
        params.head_ln_biases.append(np.zeros(width))
        in_dim = width
    params.out_weight = glorot(in_dim, cfg.d_out)
    params.out_bias = np.zeros(cfg.d_out)
    return params


def zero_gradients(params: EncoderParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.tensors().items()}


# --- rotary positions -------------------------------------------------------

def rope_rotate(x: np.ndarray, position: int | float, base: float = 10000.0) -> np.ndarray:
    """Rotate coordinate pairs (x[2m], x[2m+1]) by position * base**(-2m/d).

    Norm-preserving; position 0 is the identity.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] % 2 != 0:
        raise ValueError(f"rotary rotation needs an even dim, got {x.shape[-1]}")
    return _apply_rope(x[None, :], np.array([position], dtype=np.float64), base)[0]


def _rope_inv_freq(d: int, base: float) -> np.ndarray:
    return base ** (-2.0 * np.arange(d // 2) / d)


def _apply_rope(x: np.ndarray, positions: np.ndarray, base: float) -> np.ndarray:
    """Rotate rows of x (n, d) by their per-row positions (negative undoes)."""
    ang = positions[:, None] * _rope_inv_freq(x.shape[-1], base)[None, :]
    cos, sin = np.cos(ang), np.sin(ang)
    even, odd = x[:, 0::2], x[:, 1::2]
    out = np.empty_like(x)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


# --- forward ----------------------------------------------------------------

def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray, eps: float):
    mu = x.mean()
    xc = x - mu
    inv = 1.0 / np.sqrt(np.mean(xc * xc) + eps)
    xhat = xc * inv
    return gain * xhat + bias, xhat, inv

def _valid_frames(H: np.ndarray) -> int:
    """Trailing all-zero frames are treated as padding; keep at least one frame."""
    nonzero = np.flatnonzero(np.any(H != 0.0, axis=1))
    return int(nonzero[-1]) + 1 if nonzero.size else 1


def _check_input(H: np.ndarray, cfg: EncoderConfig) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2:
        raise EncoderError(f"frame matrix must be 2-D, got shape {H.shape}")
    if H.shape[0] < 1 or H.shape[0] > cfg.l_max:
        raise EncoderError(f"n_frames {H.shape[0]} outside [1, {cfg.l_max}]")
    if H.shape[1] != cfg.d_w:
        raise EncoderError(f"frame dim {H.shape[1]} != configured d_w {cfg.d_w}")
    if cfg.mask_padded:
        H = H[: _valid_frames(H)]
    return H


def _pool_forward(H: np.ndarray, params: EncoderParams, cfg: EncoderConfig) -> dict:
    L = H.shape[0]
    q = params.q_cls @ params.w_q                      # query at position 0: rotation is the identity
    K = _apply_rope(H @ params.w_k, np.arange(1, L + 1, dtype=np.float64), cfg.rope_base)
    V = H @ params.w_v
    logits = K @ q / np.sqrt(cfg.d_k)
    z = logits - logits.max()
    expz = np.exp(z)
    w = expz / expz.sum()
    c = w @ V
    u = c @ params.pool_ffn_w1 + params.pool_ffn_b1
    r = np.maximum(u, 0.0)
    f = r @ params.pool_ffn_w2 + params.pool_ffn_b2
    s = c + f
    h, xhat, inv = _layernorm(s, params.pool_ln_gain, params.pool_ln_bias, cfg.ln_epsilon)
    return {"H": H, "q": q, "K": K, "V": V, "w": w, "c": c, "u": u, "r": r,
            "xhat": xhat, "inv": inv, "h": h}


def _head_forward(h: np.ndarray, params: EncoderParams, cfg: EncoderConfig) -> dict:
    x = h
    layers = []
    for wgt, b, g, beta in zip(params.head_weights, params.head_biases,
                               params.head_ln_gains, params.head_ln_biases):
        z = x @ wgt + b
        y, xhat, inv = _layernorm(z, g, beta, cfg.ln_epsilon)
        x_next = np.maximum(y, 0.0)
        layers.append({"x": x, "xhat": xhat, "inv": inv, "y": y})
        x = x_next
    out = x @ params.out_weight + params.out_bias
    return {"layers": layers, "x_last": x, "out": out}


def attention_pool(H: FrameFeatures | np.ndarray, params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    """Pool a frame sequence into one vector via the learnable attention query."""
    mat = H.data if isinstance(H, FrameFeatures) else H
    return _pool_forward(_check_input(mat, cfg), params, cfg)["h"]


def attention_weights(H: FrameFeatures | np.ndarray, params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    """The softmax weights the pooled query puts on each frame (sum to 1)."""
    mat = H.data if isinstance(H, FrameFeatures) else H
    return _pool_forward(_check_input(mat, cfg), params, cfg)["w"]


def project(h: np.ndarray, params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    """MLP head: LayerNorm+ReLU after each hidden affine, plain affine output."""
    h = np.asarray(h, dtype=np.float64)
    out = _head_forward(h, params, cfg)["out"]
    if not np.all(np.isfinite(out)):
        raise EncoderError("non-finite value in projection output")
    return out


def encode_segment(H: FrameFeatures | np.ndarray, params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    """Full forward pass for one segment; deterministic."""
    return project(attention_pool(H, params, cfg), params, cfg)


def encode_batch(batch: list[np.ndarray] | list[FrameFeatures], params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    mats = [b.data if isinstance(b, FrameFeatures) else b for b in batch]
    return np.stack([encode_segment(m, params, cfg) for m in mats])


# --- backward ---------------------------------------------------------------

def _ln_backward(dy: np.ndarray, xhat: np.ndarray, inv: float, gain: np.ndarray):
    dgain = dy * xhat
    dbias = dy.copy()
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean())
    return dx, dgain, dbias


def _segment_backward(cache: dict, d_out: np.ndarray, params: EncoderParams,
                      cfg: EncoderConfig, grads: dict[str, np.ndarray]) -> None:
    head, pool = cache["head"], cache["pool"]

    grads["head_out_weight"] += np.outer(head["x_last"], d_out)
    grads["head_out_bias"] += d_out
    dx = params.out_weight @ d_out
    for i in range(len(head["layers"]) - 1, -1, -1):
        lay = head["layers"][i]
        dy = dx * (lay["y"] > 0.0)
        dz, dg, db = _ln_backward(dy, lay["xhat"], lay["inv"], params.head_ln_gains[i])
        grads[f"head_{i}_ln_gain"] += dg
        grads[f"head_{i}_ln_bias"] += db
        grads[f"head_{i}_weight"] += np.outer(lay["x"], dz)
        grads[f"head_{i}_bias"] += dz
        dx = params.head_weights[i] @ dz

    ds, dg, db = _ln_backward(dx, pool["xhat"], pool["inv"], params.pool_ln_gain)
    grads["pool_ln_gain"] += dg
    grads["pool_ln_bias"] += db
    dc = ds.copy()
    df = ds
    grads["pool_ffn_w2"] += np.outer(pool["r"], df)
    grads["pool_ffn_b2"] += df
    dr = params.pool_ffn_w2 @ df
    du = dr * (pool["u"] > 0.0)
    grads["pool_ffn_w1"] += np.outer(pool["c"], du)
    grads["pool_ffn_b1"] += du
    dc += params.pool_ffn_w1 @ du

    H, w, V, K, q = pool["H"], pool["w"], pool["V"], pool["K"], pool["q"]
    dw = V @ dc
    dV = np.outer(w, dc)
    dlogits = w * (dw - w @ dw)
    scale = 1.0 / np.sqrt(cfg.d_k)
    dq = (dlogits @ K) * scale
    dK = np.outer(dlogits, q) * scale
    dK_raw = _apply_rope(dK, -np.arange(1, H.shape[0] + 1, dtype=np.float64), cfg.rope_base)
    grads["w_k"] += H.T @ dK_raw
    grads["w_v"] += H.T @ dV
    grads["w_q"] += np.outer(params.q_cls, dq)
    grads["q_cls"] += params.w_q @ dq


def backward(batch: list[np.ndarray] | list[FrameFeatures], teachers: np.ndarray,
             params: EncoderParams, cfg: EncoderConfig,
             loss_cfg: LossConfig) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss value and exact gradients of the combined objective for one batch.

    Accumulation runs in batch order so results are bit-deterministic.
    """
    if not len(batch):
        raise EncoderError("empty batch")
    teachers = np.asarray(teachers, dtype=np.float64)
    if teachers.ndim != 2 or teachers.shape[0] != len(batch):
        raise EncoderError(f"teacher batch shape {teachers.shape} does not match batch size {len(batch)}")
    if teachers.shape[1] != cfg.d_out:
        raise EncoderError(f"teacher dim {teachers.shape[1]} != encoder output dim {cfg.d_out}")

    caches = []
    outs = []
    for item in batch:
        mat = item.data if isinstance(item, FrameFeatures) else item
        pool = _pool_forward(_check_input(mat, cfg), params, cfg)
        head = _head_forward(pool["h"], params, cfg)
        caches.append({"pool": pool, "head": head})
        outs.append(head["out"])
    A = np.stack(outs)

    breakdown, dA = loss_and_gradients(A, teachers, loss_cfg)
    grads = zero_gradients(params)
    for cache, da in zip(caches, dA):
        _segment_backward(cache, da, params, cfg, grads)

    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient in parameter {name!r}")
    return breakdown, grads


def count_params(cfg: EncoderConfig) -> int:
    """Trainable parameter count, from shapes alone."""
    d_w, d_k, d_ffn = cfg.d_w, cfg.d_k, cfg.ffn_hidden
    total = d_w + 3 * d_w * d_k                      # q_cls + the three projections
    total += d_k * d_ffn + d_ffn + d_ffn * d_k + d_k # pooling FFN
    total += 2 * d_k                                 # pooling LayerNorm
    in_dim = d_k
    for width in cfg.mlp_hidden:
        total += in_dim * width + width + 2 * width  # affine + LayerNorm
        in_dim = width
    total += in_dim * cfg.d_out + cfg.d_out
    return total


def gradient_check(batch: list[np.ndarray], teachers: np.ndarray,
                   params: EncoderParams, cfg: EncoderConfig, loss_cfg: LossConfig,
                   step: float = 1e-5) -> dict[str, float]:
    """Central finite differences against the analytic gradients.

    Returns, per parameter tensor, the worst elementwise error
    |g - g_fd| / max(1, |g_fd|).
    """
    from .losses import loss_total

    _, grads = backward(batch, teachers, params, cfg, loss_cfg)

    def batch_loss() -> float:
        return loss_total(encode_batch(batch, params, cfg), teachers, loss_cfg).total

    errors: dict[str, float] = {}
    for name, tensor in params.tensors().items():
        flat = tensor.reshape(-1)
        g_fd = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = batch_loss()
            flat[i] = orig - step
            down = batch_loss()
            flat[i] = orig
            g_fd[i] = (up - down) / (2.0 * step)
        g = grads[name].reshape(-1)
        errors[name] = float(np.max(np.abs(g - g_fd) / np.maximum(1.0, np.abs(g_fd))))
    return errors


# --- checkpoint container ----------------------------------------------------

MAGIC_CHECKPOINT = b"LIVC"
_CKPT_HEADER = struct.Struct("<4sHI")
_RECORD_HEADER = struct.Struct("<iII")


def save_checkpoint(path: str | Path, params: EncoderParams, cfg: EncoderConfig) -> None:
    """Versioned container: JSON header (config + tensor names), binary32 payloads."""
    tensors = params.tensors()
    header = json.dumps({
        "encoder_config": cfg.to_dict(),
        "params": list(tensors.keys()),
    }).encode()
    out = bytearray()
    out += _CKPT_HEADER.pack(MAGIC_CHECKPOINT, 1, len(header))
    out += header
    for i, (name, t) in enumerate(tensors.items()):
        mat = np.atleast_2d(np.asarray(t))
        out += _RECORD_HEADER.pack(i, mat.shape[0], mat.shape[1])
        out += mat.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[EncoderParams, EncoderConfig]:
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise EncoderError(f"{path}: not a checkpoint (too short)")
    magic, version, header_len = _CKPT_HEADER.unpack_from(blob, 0)
    if magic != MAGIC_CHECKPOINT:
        raise EncoderError(f"{path}: bad checkpoint magic {magic!r}")
    if version != 1:
        raise EncoderError(f"{path}: unsupported checkpoint version {version}")
    offset = _CKPT_HEADER.size
    header = json.loads(blob[offset:offset + header_len].decode())
    offset += header_len
    cfg = EncoderConfig.from_dict(header["encoder_config"])

    tensors: dict[str, np.ndarray] = {}
    for i, name in enumerate(header["params"]):
        if offset + _RECORD_HEADER.size > len(blob):
            raise EncoderError(f"{path}: truncated in tensor {name!r}")
        _, rows, cols = _RECORD_HEADER.unpack_from(blob, offset)
        offset += _RECORD_HEADER.size
        nbytes = rows * cols * 4
        if offset + nbytes > len(blob):
            raise EncoderError(f"{path}: truncated payload for tensor {name!r}")
        mat = np.frombuffer(blob, dtype="<f4", count=rows * cols, offset=offset)
        offset += nbytes
        tensors[name] = mat.reshape(rows, cols).astype(np.float64)

    params = init_params(cfg, seed=0)
    for name, target in params.tensors().items():
        loaded = tensors[name]
        target[...] = loaded.reshape(target.shape)
    return params, cfg
