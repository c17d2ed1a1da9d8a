"""Small MLP denoiser with noise-level preconditioning.

The network predicts a residual around a noise-dependent skip connection:

    D(x; sigma, c) = c_skip(sigma) x + c_out(sigma) F(c_in(sigma) x, sigma, c)

with c_skip = 1/(sigma^2+1), c_out = sigma/sqrt(sigma^2+1), c_in =
1/sqrt(sigma^2+1) (unit data scale).  The final linear layer starts at zero,
so an untrained model is already the optimal linear denoiser for unit-variance
data.  Noise levels enter as Fourier features of log(sigma)/4; class labels
are looked up in an embedding table whose row 0 is the unconditional (null)
token.  Training is plain denoising score matching with label dropout, so one
network answers both conditional and unconditional queries.

Gradients are handwritten reverse accumulation over the fixed architecture;
the optimizer is Adam.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    InvalidArgumentError,
    MalformedFileError,
    NotFoundError,
    TrainingDivergedError,
)
from .gmm import GmmSpec, sample_clean_batch
from .schedule import Rng, derive_seed

HIDDEN = 128
N_HIDDEN = 3
EMBED_DIM = 16
N_FREQ = 8  # sin/cos pairs -> 2 * N_FREQ features
SIGMA_DATA = 1.0

CHECKPOINT_MAGIC = b"MLPD"
CHECKPOINT_VERSION = 1
_CKPT_HEADER = struct.Struct("<4sHIIIII")

_PARAM_KEYS = ("emb", "w0", "b0", "w1", "b1", "w2", "b2", "w3", "b3")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3
    sigma_lo: float = 0.02
    sigma_hi: float = 12.0
    label_dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch_size < 1:
            raise InvalidArgumentError("steps and batch_size must be positive")
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise InvalidArgumentError("lr must be positive")
        if not (0.0 < self.sigma_lo < self.sigma_hi):
            raise InvalidArgumentError("need 0 < sigma_lo < sigma_hi")
        if not (0.0 <= self.label_dropout < 1.0):
            raise InvalidArgumentError("label_dropout must be in [0, 1)")


def _silu(a):
    # saturation overflow in exp is benign: s -> 0 exactly
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-a))
    return a * s, s


def _silu_grad(a, s):
    return s * (1.0 + a * (1.0 - s))


def _precondition(sigma):
    s2 = sigma**2
    c_skip = SIGMA_DATA**2 / (s2 + SIGMA_DATA**2)
    c_out = sigma * SIGMA_DATA / np.sqrt(s2 + SIGMA_DATA**2)
    c_in = 1.0 / np.sqrt(s2 + SIGMA_DATA**2)
    return c_skip, c_out, c_in


def _fourier(sigma):
    u = np.log(sigma) / 4.0
    freq = 2.0 ** np.arange(N_FREQ)
    ang = u[:, None] * freq[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


class MlpDenoiser:
    """3-hidden-layer SiLU MLP over (preconditioned x, sigma features,
    class embedding)."""

    def __init__(self, dim: int, n_classes: int, params: dict | None = None, seed: int = 0):
        if dim < 1 or n_classes < 1:
            raise InvalidArgumentError("dim and n_classes must be positive")
        self.dim = dim
        self.n_classes = n_classes
        in_dim = dim + 2 * N_FREQ + EMBED_DIM
        if params is None:
            rng = Rng(seed)
            params = {"emb": 0.5 * rng.standard_normal((n_classes + 1, EMBED_DIM))}
            fan = in_dim
            for i in range(N_HIDDEN):
                params[f"w{i}"] = rng.standard_normal((fan, HIDDEN)) / np.sqrt(fan)
                params[f"b{i}"] = np.zeros(HIDDEN)
                fan = HIDDEN
            params["w3"] = np.zeros((HIDDEN, dim))
            params["b3"] = np.zeros(dim)
        self._check_shapes(params)
        self.params = params

    def _check_shapes(self, params):
        in_dim = self.dim + 2 * N_FREQ + EMBED_DIM
        want = {
            "emb": (self.n_classes + 1, EMBED_DIM),
            "w0": (in_dim, HIDDEN),
            "b0": (HIDDEN,),
            "w1": (HIDDEN, HIDDEN),
            "b1": (HIDDEN,),
            "w2": (HIDDEN, HIDDEN),
            "b2": (HIDDEN,),
            "w3": (HIDDEN, self.dim),
            "b3": (self.dim,),
        }
        if set(params) != set(want):
            raise InvalidArgumentError(f"parameter keys {sorted(params)} != {sorted(want)}")
        for k, shape in want.items():
            if params[k].shape != shape:
                raise InvalidArgumentError(f"param {k} has shape {params[k].shape}, want {shape}")

    def _tokens(self, class_id, n):
        if class_id is None:
            return np.zeros(n, dtype=np.int64)
        if np.isscalar(class_id):
            class_id = np.full(n, class_id, dtype=np.int64)
        tokens = np.asarray(class_id, dtype=np.int64)
        if tokens.shape != (n,):
            raise InvalidArgumentError("class ids must be scalar or one per sample")
        if tokens.min() < 0 or tokens.max() > self.n_classes:
            raise NotFoundError(
                f"class token out of range [0, {self.n_classes}]: {tokens.min()}..{tokens.max()}"
            )
        return tokens

    def forward(self, x, sigma, class_id=None) -> np.ndarray:
        """Denoise x at noise level sigma; class_id None means unconditional.

        Accepts a single vector or an (n, d) batch; sigma may be scalar or
        per-sample, class_id None, scalar, or per-sample tokens (0 = null).
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = np.atleast_2d(x)
        if X.shape[1] != self.dim:
            raise InvalidArgumentError(f"input dim {X.shape[1]} != model dim {self.dim}")
        sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (len(X),))
        if np.any(sig <= 0) or not np.all(np.isfinite(sig)):
            raise InvalidArgumentError("sigma must be positive finite")
        tokens = self._tokens(class_id, len(X))
        D, _ = _apply(self.params, X, sig, tokens)
        return D[0] if single else D

    def flat_params(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in _PARAM_KEYS])

    def fingerprint(self) -> int:
        h = hashlib.blake2b(digest_size=8)
        h.update(struct.pack("<II", self.dim, self.n_classes))
        h.update(self.flat_params().astype(np.float32).tobytes())
        return int.from_bytes(h.digest(), "little")


def _apply(params, X, sig, tokens):
    c_skip, c_out, c_in = _precondition(sig)
    h = np.concatenate([c_in[:, None] * X, _fourier(sig), params["emb"][tokens]], axis=1)
    a0 = h @ params["w0"] + params["b0"]
    h1, s0 = _silu(a0)
    a1 = h1 @ params["w1"] + params["b1"]
    h2, s1 = _silu(a1)
    a2 = h2 @ params["w2"] + params["b2"]
    h3, s2 = _silu(a2)
    out = h3 @ params["w3"] + params["b3"]
    D = c_skip[:, None] * X + c_out[:, None] * out
    cache = (c_out, h, a0, s0, h1, a1, s1, h2, a2, s2, h3, tokens)
    return D, cache


def loss_and_grad(model: MlpDenoiser, x0, sigma, tokens, eps):
    """Denoising score-matching loss and parameter gradients for one batch.

    loss = mean over the batch of || D(x0 + sigma*eps; sigma, c) - x0 ||^2.
    Raises TrainingDivergedError if the loss is not finite.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    tokens = np.asarray(tokens, dtype=np.int64)
    B = len(x0)
    xn = x0 + sigma[:, None] * eps
    D, cache = _apply(model.params, xn, sigma, tokens)
    c_out, h, a0, s0, h1, a1, s1, h2, a2, s2, h3, _ = cache
    r = D - x0
    with np.errstate(over="ignore", invalid="ignore"):
        loss = float((r * r).sum() / B)
    if not np.isfinite(loss):
        raise TrainingDivergedError(step=None, message="non-finite loss")

    p = model.params
    g_out = (2.0 / B) * r * c_out[:, None]
    grads = {"w3": h3.T @ g_out, "b3": g_out.sum(axis=0)}
    g = g_out @ p["w3"].T
    g = g * _silu_grad(a2, s2)
    grads["w2"] = h2.T @ g
    grads["b2"] = g.sum(axis=0)
    g = g @ p["w2"].T
    g = g * _silu_grad(a1, s1)
    grads["w1"] = h1.T @ g
    grads["b1"] = g.sum(axis=0)
    g = g @ p["w1"].T
    g = g * _silu_grad(a0, s0)
    grads["w0"] = h.T @ g
    grads["b0"] = g.sum(axis=0)
    g_h = g @ p["w0"].T
    g_emb = np.zeros_like(p["emb"])
    np.add.at(g_emb, tokens, g_h[:, model.dim + 2 * N_FREQ :])
    grads["emb"] = g_emb
    return loss, grads


def train(spec: GmmSpec, cfg: TrainConfig) -> MlpDenoiser:
    """Train a denoiser on a mixture by denoising score matching.

    Classes are drawn by prior, labels dropped to the null token with
    probability cfg.label_dropout, and noise levels log-uniformly from
    [sigma_lo, sigma_hi].  Fully deterministic given cfg.seed.
    """
    model = MlpDenoiser(spec.dim, max(spec.class_ids), seed=derive_seed(cfg.seed, 1))
    rng = Rng(derive_seed(cfg.seed, 2))
    class_ids = np.array(spec.class_ids)
    priors = np.array([spec.class_priors[c] for c in spec.class_ids])
    priors = priors / priors.sum()

    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    m = {k: np.zeros_like(v) for k, v in model.params.items()}
    v = {k: np.zeros_like(vv) for k, vv in model.params.items()}
    for step in range(1, cfg.steps + 1):
        cls = class_ids[rng.choice(len(class_ids), size=cfg.batch_size, p=priors)]
        x0 = sample_clean_batch(spec, rng, cls)
        tokens = np.where(rng.random(cfg.batch_size) < cfg.label_dropout, 0, cls)
        sigma = np.exp(rng.uniform(np.log(cfg.sigma_lo), np.log(cfg.sigma_hi), cfg.batch_size))
        eps = rng.standard_normal((cfg.batch_size, spec.dim))
        try:
            loss, grads = loss_and_grad(model, x0, sigma, tokens, eps)
        except TrainingDivergedError:
            raise TrainingDivergedError(step) from None
        bc1 = 1.0 - beta1**step
        bc2 = 1.0 - beta2**step
        for k, g in grads.items():
            m[k] = beta1 * m[k] + (1.0 - beta1) * g
            v[k] = beta2 * v[k] + (1.0 - beta2) * g * g
            model.params[k] -= cfg.lr * (m[k] / bc1) / (np.sqrt(v[k] / bc2) + eps_adam)
    return model


def save_checkpoint(model: MlpDenoiser, path) -> None:
    """Write parameters as float32 with a fixed key order."""
    with open(path, "wb") as fh:
        fh.write(
            _CKPT_HEADER.pack(
                CHECKPOINT_MAGIC,
                CHECKPOINT_VERSION,
                model.dim,
                model.n_classes,
                HIDDEN,
                EMBED_DIM,
                N_FREQ,
            )
        )
        for k in _PARAM_KEYS:
            fh.write(model.params[k].astype("<f4").tobytes())


def load_checkpoint(path) -> MlpDenoiser:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < _CKPT_HEADER.size:
        raise MalformedFileError("truncated checkpoint header", offset=len(buf))
    magic, version, dim, n_classes, hidden, embed, nfreq = _CKPT_HEADER.unpack_from(buf)
    if magic != CHECKPOINT_MAGIC:
        raise MalformedFileError(f"bad checkpoint magic {magic!r}", offset=0)
    if version != CHECKPOINT_VERSION:
        raise MalformedFileError(f"unsupported checkpoint version {version}", offset=4)
    if (hidden, embed, nfreq) != (HIDDEN, EMBED_DIM, N_FREQ):
        raise MalformedFileError(
            f"checkpoint architecture ({hidden}, {embed}, {nfreq}) does not match this build"
        )
    in_dim = dim + 2 * N_FREQ + EMBED_DIM
    shapes = {
        "emb": (n_classes + 1, EMBED_DIM),
        "w0": (in_dim, HIDDEN),
        "b0": (HIDDEN,),
        "w1": (HIDDEN, HIDDEN),
        "b1": (HIDDEN,),
        "w2": (HIDDEN, HIDDEN),
        "b2": (HIDDEN,),
        "w3": (HIDDEN, dim),
        "b3": (dim,),
    }
    params = {}
    off = _CKPT_HEADER.size
    for k in _PARAM_KEYS:
        count = int(np.prod(shapes[k]))
        end = off + 4 * count
        if len(buf) < end:
            raise MalformedFileError("truncated checkpoint body", offset=len(buf))
        params[k] = (
            np.frombuffer(buf, dtype="<f4", count=count, offset=off)
            .astype(np.float64)
            .reshape(shapes[k])
        )
        off = end
    if off != len(buf):
        raise MalformedFileError("trailing bytes after checkpoint", offset=off)
    return MlpDenoiser(dim, n_classes, params=params)
