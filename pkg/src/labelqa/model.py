"""Embedding providers and the class-conditional gated regression head.

The head maps a frozen image embedding ``f1`` and a class text embedding
``phi`` to a predicted Dice score::

    [w1, w2] = gate(MLP([f1, phi]))
    h_hat    = sigmoid(g2(w2 * relu(g1(w1 * f1))))

Only the head is trained. Forward and backward passes are written out by
hand in numpy so that gradients can be checked against finite differences.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .losses import LossConfig, batch_loss_and_grad

GRID = 8
N_CELL_FEATURES = 5


# toy vision encoder ----------------------------------------------------------

def _boundary_2d(mask: np.ndarray) -> np.ndarray:
    """Mask pixels with a 4-neighbour outside the mask; outside the image counts as outside."""
    m = mask.astype(bool)
    p = np.pad(m, 1, constant_values=False)
    inner = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    return m & ~inner


def cell_features(pixels: np.ndarray, mask: np.ndarray, grid: int = GRID) -> np.ndarray:
    """Per-cell statistics on a ``grid`` x ``grid`` partition of the two-channel slice.

    Feature-major layout ``[5, grid, grid]`` flattened: mean intensity, mask
    area fraction, boundary-pixel fraction, masked intensity mean and masked
    intensity variance (the last two are 0 in cells without mask pixels).
    """
    x = np.asarray(pixels, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    h, w = x.shape
    if h % grid or w % grid:
        raise ValueError(f"slice {x.shape} not divisible into a {grid}x{grid} grid")
    ch, cw = h // grid, w // grid
    area = ch * cw

    def cells(a):
        return a.reshape(grid, ch, grid, cw).sum(axis=(1, 3))

    mf = m.astype(np.float64)
    n_mask = cells(mf)
    s_int = cells(x * mf)
    s_int2 = cells(x * x * mf)
    safe = np.maximum(n_mask, 1.0)
    mmean = np.where(n_mask > 0, s_int / safe, 0.0)
    mvar = np.where(n_mask > 0, np.maximum(s_int2 / safe - mmean * mmean, 0.0), 0.0)
    feats = np.stack([
        cells(x) / area,
        n_mask / area,
        cells(_boundary_2d(m).astype(np.float64)) / area,
        mmean,
        mvar,
    ])
    return feats.reshape(-1)


def projection_matrix(out_dim: int, in_dim: int, seed: int) -> np.ndarray:
    p = np.random.default_rng(seed).standard_normal((out_dim, in_dim))
    return p / np.linalg.norm(p, axis=1, keepdims=True)


# embedding files ---------------------------------------------------------------

def write_embedding_file(vectors: dict[str, np.ndarray], path) -> Path:
    """JSON manifest (key -> record offset, dim) next to a little-endian f32 payload."""
    path = Path(path)
    payload = path.with_suffix(".f32")
    keys = list(vectors)
    dims = {len(np.ravel(vectors[k])) for k in keys}
    if len(dims) > 1:
        raise ValueError("all vectors must share one dimension")
    dim = dims.pop() if dims else 0
    with open(payload, "wb") as fh:
        for k in keys:
            fh.write(np.asarray(vectors[k], dtype="<f4").ravel().tobytes())
    manifest = {"dim": dim, "dtype": "<f4", "payload": payload.name,
                "entries": {k: {"offset": i, "dim": dim} for i, k in enumerate(keys)}}
    path.write_text(json.dumps(manifest, indent=1))
    return path


def read_embedding_file(path) -> dict[str, np.ndarray]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    data = np.fromfile(path.parent / manifest["payload"], dtype="<f4")
    out = {}
    for key, e in manifest["entries"].items():
        d = int(e["dim"])
        start = int(e["offset"]) * int(manifest["dim"])
        if start + d > data.size:
            raise ValueError(f"{path}: entry {key!r} runs past the payload")
        out[key] = data[start:start + d].astype(np.float64)
    return out


def load_text_embeddings(path, classes: dict[int, str], dim: int = 512) -> dict[int, np.ndarray]:
    """Map class id -> unit text embedding, looked up by class name."""
    raw = read_embedding_file(path)
    table = {}
    for cid, name in sorted(classes.items()):
        if name not in raw:
            raise KeyError(f"no text embedding for class {cid} ({name!r})")
        v = raw[name]
        if v.size != dim:
            raise ValueError(f"text embedding for {name!r} has dim {v.size}, expected {dim}")
        norm = np.linalg.norm(v)
        if norm == 0:
            raise ValueError(f"text embedding for {name!r} is the zero vector")
        table[int(cid)] = v / norm
    return table


def toy_text_embeddings(classes: dict[int, str], dim: int = 512, seed: int = 0):
    """Deterministic stand-in text embeddings: normalized sums of per-word random vectors.

    Names sharing words ("left kidney", "right kidney") end up similar.
    """
    table = {}
    for cid, name in sorted(classes.items()):
        v = np.zeros(dim)
        for word in name.lower().replace("_", " ").split():
            rng = np.random.default_rng([seed, zlib.crc32(word.encode())])
            v += rng.standard_normal(dim)
        if not v.any():
            v = np.random.default_rng([seed, int(cid)]).standard_normal(dim)
        table[int(cid)] = v / np.linalg.norm(v)
    return table


def onehot_embeddings(class_ids, dim: int = 512) -> dict[int, np.ndarray]:
    """Class one-hot codes zero-padded to ``dim``."""
    ids = sorted(int(c) for c in class_ids)
    if len(ids) > dim:
        raise ValueError("more classes than embedding dimensions")
    table = {}
    for k, cid in enumerate(ids):
        v = np.zeros(dim)
        v[k] = 1.0
        table[cid] = v
    return table


def vision_key(volume_id: str, class_id: int, slice_index: int) -> str:
    return f"{volume_id}:{class_id}:{slice_index}"


class EmbeddingProvider:
    """Source of frozen image embeddings and class text embeddings."""

    def __init__(self, kind: str = "toy_encoder", vision_dim: int = 512, text_dim: int = 512,
                 text: dict[int, np.ndarray] | None = None, seed: int = 0,
                 vision_table: dict[str, np.ndarray] | None = None):
        if kind not in ("toy_encoder", "precomputed_file"):
            raise ValueError(f"unknown provider kind {kind!r}")
        self.kind = kind
        self.vision_dim = int(vision_dim)
        self.text_dim = int(text_dim)
        self.seed = int(seed)
        self.text = {}
        for cid, v in (text or {}).items():
            v = np.asarray(v, dtype=np.float64)
            if v.size != self.text_dim:
                raise ValueError(f"text embedding for class {cid} has dim {v.size}")
            self.text[int(cid)] = v / np.linalg.norm(v)
        self.vision_table = vision_table or {}
        self._proj = None
        if kind == "toy_encoder":
            self._proj = projection_matrix(self.vision_dim, N_CELL_FEATURES * GRID * GRID, seed)

    @classmethod
    def from_files(cls, vision_path, text_path, classes, text_dim=512):
        vt = read_embedding_file(vision_path)
        dims = {v.size for v in vt.values()}
        if len(dims) != 1:
            raise ValueError("vision embeddings must share one dimension")
        return cls("precomputed_file", vision_dim=dims.pop(), text_dim=text_dim,
                   text=load_text_embeddings(text_path, classes, text_dim), vision_table=vt)

    def toy_encode(self, pixels, mask) -> np.ndarray:
        return (self._proj @ cell_features(pixels, mask)).astype(np.float32)

    def encode(self, pair) -> np.ndarray:
        if self.kind == "toy_encoder":
            return self.toy_encode(pair.pixels, pair.mask)
        key = vision_key(pair.volume_id, pair.class_id, pair.slice_index)
        if key not in self.vision_table:
            raise KeyError(f"no precomputed vision embedding for {key}")
        return np.asarray(self.vision_table[key], dtype=np.float32)

    def encode_many(self, pairs) -> np.ndarray:
        out = np.empty((len(pairs), self.vision_dim), dtype=np.float32)
        for i, p in enumerate(pairs):
            out[i] = self.encode(p)
        return out

    def text_for(self, class_ids) -> np.ndarray:
        try:
            return np.stack([self.text[int(c)] for c in class_ids])
        except KeyError as exc:
            raise KeyError(f"class {exc.args[0]} has no text embedding") from None


def toy_encode(pair, vision_dim: int = 512, seed: int = 0) -> np.ndarray:
    return EmbeddingProvider("toy_encoder", vision_dim=vision_dim, seed=seed).encode(pair)


# regression head ---------------------------------------------------------------

def _sigmoid(x):
    # split form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


GATES = {
    "sigmoid": (_sigmoid, lambda x, y: y * (1.0 - y)),
    "identity": (lambda x: x, lambda x, y: np.ones_like(x)),
    "softplus": (_softplus, lambda x, y: _sigmoid(x)),
}

PARAM_ORDER = ("attn_w1", "attn_b1", "attn_w2", "attn_b2", "g1_w", "g1_b", "g2_w", "g2_b")


@dataclass(frozen=True)
class HeadConfig:
    vision_dim: int = 512
    text_dim: int = 512
    hidden_dim: int = 128
    attn_hidden: int = 256
    gate: str = "sigmoid"

    def shapes(self) -> dict[str, tuple[int, ...]]:
        dv, dt, dh, da = self.vision_dim, self.text_dim, self.hidden_dim, self.attn_hidden
        return {
            "attn_w1": (da, dv + dt), "attn_b1": (da,),
            "attn_w2": (dv + dh, da), "attn_b2": (dv + dh,),
            "g1_w": (dh, dv), "g1_b": (dh,),
            "g2_w": (1, dh), "g2_b": (1,),
        }

    def n_params(self) -> int:
        return int(sum(np.prod(s) for s in self.shapes().values()))


class QualityHead:
    def __init__(self, config: HeadConfig = HeadConfig(), params=None, dtype=np.float32):
        if config.gate not in GATES:
            raise ValueError(f"unknown gate {config.gate!r}")
        self.config = config
        self.dtype = np.dtype(dtype)
        shapes = config.shapes()
        if params is None:
            params = {k: np.zeros(s) for k, s in shapes.items()}
        self.params = {}
        for k in PARAM_ORDER:
            arr = np.array(params[k], dtype=self.dtype)
            if arr.shape != shapes[k]:
                raise ValueError(f"{k}: shape {arr.shape}, expected {shapes[k]}")
            self.params[k] = arr

    @classmethod
    def init(cls, config: HeadConfig = HeadConfig(), seed: int = 0, dtype=np.float32):
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for k, shape in config.shapes().items():
            if k.endswith(("_b", "_b1", "_b2")):
                params[k] = np.zeros(shape)
            else:
                bound = 1.0 / np.sqrt(shape[1])
                params[k] = rng.uniform(-bound, bound, size=shape)
        return cls(config, params, dtype)

    def copy(self) -> "QualityHead":
        return QualityHead(self.config, {k: v.copy() for k, v in self.params.items()}, self.dtype)

    def _check(self, f1, phi):
        f1 = np.atleast_2d(np.asarray(f1, dtype=self.dtype))
        phi = np.atleast_2d(np.asarray(phi, dtype=self.dtype))
        c = self.config
        if f1.shape[1] != c.vision_dim or phi.shape[1] != c.text_dim or f1.shape[0] != phi.shape[0]:
            raise ValueError(f"input dims {f1.shape}/{phi.shape} do not match head "
                             f"({c.vision_dim}, {c.text_dim})")
        return f1, phi

    def forward_cache(self, f1, phi):
        f1, phi = self._check(f1, phi)
        p = self.params
        dv = self.config.vision_dim
        gate_fn, _ = GATES[self.config.gate]
        z = np.concatenate([f1, phi], axis=1)
        a_pre = z @ p["attn_w1"].T + p["attn_b1"]
        a = np.maximum(a_pre, 0)
        g_pre = a @ p["attn_w2"].T + p["attn_b2"]
        gates = gate_fn(g_pre)
        w1, w2 = gates[:, :dv], gates[:, dv:]
        u = w1 * f1
        hid_pre = u @ p["g1_w"].T + p["g1_b"]
        hid = np.maximum(hid_pre, 0)
        q = w2 * hid
        s = (q @ p["g2_w"].T + p["g2_b"])[:, 0]
        # keep strictly inside (0, 1) even where the sigmoid saturates in float32
        fi = np.finfo(s.dtype)
        h = np.clip(_sigmoid(s), fi.tiny, 1 - fi.epsneg)
        cache = dict(f1=f1, z=z, a_pre=a_pre, a=a, g_pre=g_pre, gates=gates, w1=w1, w2=w2,
                     u=u, hid_pre=hid_pre, hid=hid, q=q, s=s, h=h)
        return h, cache

    def forward(self, f1, phi) -> np.ndarray:
        """Predicted DSC for a batch (or single sample) of (f1, phi)."""
        return self.forward_cache(f1, phi)[0]

    def backward(self, cache, d_h) -> dict[str, np.ndarray]:
        p = self.params
        dv = self.config.vision_dim
        _, gate_grad = GATES[self.config.gate]
        h = cache["h"]
        ds = (np.asarray(d_h, dtype=self.dtype) * h * (1 - h))[:, None]
        g = {}
        g["g2_w"] = ds.T @ cache["q"]
        g["g2_b"] = ds.sum(axis=0)
        dq = ds @ p["g2_w"]
        dw2 = dq * cache["hid"]
        dhid_pre = (dq * cache["w2"]) * (cache["hid_pre"] > 0)
        g["g1_w"] = dhid_pre.T @ cache["u"]
        g["g1_b"] = dhid_pre.sum(axis=0)
        du = dhid_pre @ p["g1_w"]
        dw1 = du * cache["f1"]
        dg_pre = np.concatenate([dw1, dw2], axis=1) * gate_grad(cache["g_pre"], cache["gates"])
        g["attn_w2"] = dg_pre.T @ cache["a"]
        g["attn_b2"] = dg_pre.sum(axis=0)
        da_pre = (dg_pre @ p["attn_w2"]) * (cache["a_pre"] > 0)
        g["attn_w1"] = da_pre.T @ cache["z"]
        g["attn_b1"] = da_pre.sum(axis=0)
        return g

    # serialization -------------------------------------------------------------

    MAGIC = b"LQAHEAD\x00"
    VERSION = 1

    def save(self, path, extra: dict | None = None) -> Path:
        """Versioned binary: magic, version, dims, dtype code, config JSON, parameters."""
        path = Path(path)
        c = self.config
        cfg = json.dumps({"head": asdict(c), "extra": extra or {}}, sort_keys=True).encode()
        code = {np.dtype(np.float32): 4, np.dtype(np.float64): 8}[self.dtype]
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack("<6I", self.VERSION, c.vision_dim, c.text_dim, c.hidden_dim,
                                 c.attn_hidden, code))
            fh.write(struct.pack("<I", len(cfg)))
            fh.write(cfg)
            for k in PARAM_ORDER:
                fh.write(np.ascontiguousarray(self.params[k], dtype=self.dtype.newbyteorder("<"))
                         .tobytes())
        return path

    @classmethod
    def load(cls, path) -> "QualityHead":
        raw = Path(path).read_bytes()
        if raw[:8] != cls.MAGIC:
            raise ValueError(f"{path}: not a head checkpoint")
        version, dv, dt, dh, da, code = struct.unpack("<6I", raw[8:32])
        if version != cls.VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n_cfg,) = struct.unpack("<I", raw[32:36])
        meta = json.loads(raw[36:36 + n_cfg])
        config = HeadConfig(**meta["head"])
        if (config.vision_dim, config.text_dim, config.hidden_dim, config.attn_hidden) != (dv, dt, dh, da):
            raise ValueError(f"{path}: header dims disagree with config JSON")
        dtype = np.dtype({4: "<f4", 8: "<f8"}[code])
        off = 36 + n_cfg
        params = {}
        for k, shape in ((k, config.shapes()[k]) for k in PARAM_ORDER):
            n = int(np.prod(shape))
            params[k] = np.frombuffer(raw, dtype=dtype, count=n, offset=off).reshape(shape)
            off += n * dtype.itemsize
        if off != len(raw):
            raise ValueError(f"{path}: trailing or missing parameter bytes")
        head = cls(config, params, dtype.newbyteorder("="))
        head.meta = meta.get("extra", {})
        return head


def forward(head: QualityHead, f1, phi) -> np.ndarray:
    return head.forward(f1, phi)


def forward_backward(head: QualityHead, f1, phi, targets, pairs=None,
                     loss: LossConfig = LossConfig()):
    """Compositional loss of a batch and its gradient for every head parameter.

    Returns ``(loss_value, breakdown, grads)``; ``pairs`` are index tuples into
    the batch (or a PairingResult), None disables the ranking term.
    """
    h, cache = head.forward_cache(f1, phi)
    value, parts, d_h = batch_loss_and_grad(h, targets, pairs or [], loss)
    grads = head.backward(cache, d_h)
    return value, parts, grads
