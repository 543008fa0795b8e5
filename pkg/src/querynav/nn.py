"""Small numpy building blocks with explicit backward passes.

Parameters live in plain ``dict[str, np.ndarray]``; every layer returns what
its backward pass needs instead of hiding state in objects. Gradients are
checked against central differences in the test-suite.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np

from querynav.errors import InputError

Params = dict[str, np.ndarray]

CHECKPOINT_VERSION = 1


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int,
                scale: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    w = rng.normal(0.0, scale / np.sqrt(fan_in), size=(fan_in, fan_out))
    return w, np.zeros(fan_out)


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Grads of ``y = x @ w + b`` for arbitrary leading dims."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dy @ w.T, x2.T @ dy2, dy2.sum(axis=0)


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def attend(mem: np.ndarray | None, mem_mask: np.ndarray | None,
           cur: np.ndarray, q: np.ndarray):
    """Scaled dot-product pooling of query ``q`` over ``mem`` plus the current key.

    mem: (B, L, d) or None; mem_mask: (B, L) bool; cur, q: (B, d).
    The current key is always valid, so the softmax never sees an empty set.
    Returns pooled (B, d) and the weights (B, L+1) with the current key last.
    """
    scale = 1.0 / np.sqrt(q.shape[-1])
    s_cur = (cur * q).sum(-1, keepdims=True) * scale
    if mem is None or mem.shape[1] == 0:
        a = np.ones_like(s_cur)
        return cur.copy(), a
    s_mem = np.einsum("bld,bd->bl", mem, q) * scale
    s_mem = np.where(mem_mask, s_mem, -np.inf)
    s = np.concatenate([s_mem, s_cur], axis=1)
    a = softmax(s, axis=1)
    pooled = np.einsum("bl,bld->bd", a[:, :-1], mem) + a[:, -1:] * cur
    return pooled, a


def attend_backward(dpooled: np.ndarray, mem: np.ndarray | None, cur: np.ndarray,
                    q: np.ndarray, a: np.ndarray):
    """Returns (dmem, dcur, dq); ``dmem`` is None when there is no memory."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    if mem is None or mem.shape[1] == 0:
        return None, dpooled.copy(), np.zeros_like(q)
    da_mem = np.einsum("bld,bd->bl", mem, dpooled)
    da_cur = (cur * dpooled).sum(-1, keepdims=True)
    da = np.concatenate([da_mem, da_cur], axis=1)
    ds = a * (da - (a * da).sum(1, keepdims=True))
    dmem = a[:, :-1, None] * dpooled[:, None, :] + ds[:, :-1, None] * q[:, None, :] * scale
    dcur = a[:, -1:] * dpooled + ds[:, -1:] * q * scale
    dq = (np.einsum("bl,bld->bd", ds[:, :-1], mem) + ds[:, -1:] * cur) * scale
    return dmem, dcur, dq


class Adam:
    """Adam with optional global-norm clipping; ``frozen`` names are never touched."""

    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 max_grad_norm: float | None = None, frozen: set[str] | None = None):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.max_grad_norm = max_grad_norm
        self.frozen = set(frozen or ())
        self.m: Params = {}
        self.v: Params = {}
        self.t = 0

    def step(self, params: Params, grads: Params) -> float:
        keys = [k for k in grads if k not in self.frozen]
        norm = float(np.sqrt(sum(float((grads[k] ** 2).sum()) for k in keys)))
        if not np.isfinite(norm):
            raise FloatingPointError("non-finite gradient norm")
        coef = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            coef = self.max_grad_norm / (norm + 1e-12)
        self.t += 1
        for k in keys:
            g = grads[k] * coef
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mhat = self.m[k] / (1 - self.b1 ** self.t)
            vhat = self.v[k] / (1 - self.b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return norm


def copy_params(p: Params) -> Params:
    return {k: v.copy() for k, v in p.items()}


def save_params(path: str | Path, params: Params, kind: str, meta: dict | None = None) -> None:
    header = {"version": CHECKPOINT_VERSION, "kind": kind,
              "shapes": {k: list(v.shape) for k, v in params.items()}, **(meta or {})}
    arrays = {"__meta__": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
              **params}
    # npz layout with a fixed timestamp, so equal parameters give equal bytes
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)),
                        buf.getvalue())


def load_params(path: str | Path, kind: str | None = None) -> tuple[Params, dict]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise InputError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        if kind is not None and meta.get("kind") != kind:
            raise InputError(f"{path}: expected a {kind} checkpoint, found {meta.get('kind')}")
        params = {k: data[k].copy() for k in data.files if k != "__meta__"}
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise InputError(f"{path}: shape mismatch for {k}")
    return params, meta


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    num = float(np.linalg.norm(a - b))
    den = float(np.linalg.norm(a) + np.linalg.norm(b))
    return 0.0 if den == 0.0 else num / den


def numerical_grads(loss_fn, params: Params, eps: float = 1e-6) -> Params:
    """Central differences of ``loss_fn(params)`` w.r.t. every entry of ``params``."""
    out = {}
    for k, arr in params.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            lp = loss_fn(params)
            flat[i] = old - eps
            lm = loss_fn(params)
            flat[i] = old
            gflat[i] = (lp - lm) / (2 * eps)
        out[k] = g
    return out
