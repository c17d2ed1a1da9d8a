"""Class-conditional Gaussian mixtures with closed-form noised quantities.

Adding isotropic noise of level sigma to a mixture component N(mu, Sigma)
yields N(mu, Sigma + sigma^2 I), so the noised density, its score, and the
posterior mean E[x0 | x] (the ideal denoiser) are all available in closed
form.  Each component's covariance is eigendecomposed once at construction;
every noise level then reuses the same rotation with shifted eigenvalues.

Class ids are positive integers; id 0 is reserved for the unconditional
(null) token used by trainable denoisers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from . import _kernels
from .errors import DegeneratePointError, InvalidArgumentError, NotFoundError
from .schedule import Rng

PRESET_NAMES = ("balanced2d", "imbalanced2d")


@dataclass(frozen=True)
class GmmComponent:
    """One mixture component with a scalar quality tag.

    The tag is ground-truth sample quality for anything drawn from this
    component; scorers blend tags by posterior responsibility.
    """

    mean: np.ndarray
    cov: np.ndarray
    weight: float
    quality_tag: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        cov = np.asarray(self.cov, dtype=np.float64)
        if mean.ndim != 1 or mean.size < 1:
            raise InvalidArgumentError("component mean must be a vector")
        if cov.shape != (mean.size, mean.size):
            raise InvalidArgumentError("component cov must be (d, d)")
        if not np.all(np.isfinite(mean)) or not np.all(np.isfinite(cov)):
            raise InvalidArgumentError("component parameters must be finite")
        if not np.allclose(cov, cov.T, atol=1e-12, rtol=0.0):
            raise InvalidArgumentError("component cov must be symmetric")
        if np.linalg.eigvalsh(cov).min() <= 0:
            raise InvalidArgumentError("component cov must be positive definite")
        if not (self.weight > 0 and np.isfinite(self.weight)):
            raise InvalidArgumentError("component weight must be positive")
        if not np.isfinite(self.quality_tag):
            raise InvalidArgumentError("quality tag must be finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "weight", float(self.weight))
        object.__setattr__(self, "quality_tag", float(self.quality_tag))

    @property
    def dim(self) -> int:
        return self.mean.size


class _Pack:
    """Components of one mixture flattened into kernel-ready arrays."""

    __slots__ = ("means", "qmats", "lams", "logw", "tags", "weights")

    def __init__(self, components, log_prior_per_comp):
        self.means = np.ascontiguousarray([c.mean for c in components])
        self.qmats = np.empty((len(components), components[0].dim, components[0].dim))
        self.lams = np.empty((len(components), components[0].dim))
        for i, c in enumerate(components):
            lam, q = np.linalg.eigh(c.cov)
            self.lams[i] = lam
            self.qmats[i] = q
        self.qmats = np.ascontiguousarray(self.qmats)
        w = np.array([c.weight for c in components])
        self.logw = np.log(w) + np.asarray(log_prior_per_comp)
        self.weights = np.exp(self.logw)
        self.tags = np.array([c.quality_tag for c in components])


class GmmSpec:
    """A set of class-conditional mixtures plus class priors.

    classes maps class_id -> list of GmmComponent whose weights sum to 1;
    class_priors maps the same ids to marginal probabilities summing to 1.
    The unconditional mixture is the prior-weighted union of all classes.
    """

    def __init__(self, classes: dict, class_priors: dict):
        if not classes:
            raise InvalidArgumentError("need at least one class")
        if set(classes) != set(class_priors):
            raise InvalidArgumentError("classes and class_priors must share keys")
        ids = sorted(classes)
        for cid in ids:
            if not isinstance(cid, int) or cid < 1:
                raise InvalidArgumentError(
                    f"class ids must be integers >= 1 (0 is the null token), got {cid!r}"
                )
            comps = classes[cid]
            if not comps:
                raise InvalidArgumentError(f"class {cid} has no components")
            wsum = sum(c.weight for c in comps)
            if abs(wsum - 1.0) > 1e-9:
                raise InvalidArgumentError(
                    f"class {cid} component weights sum to {wsum}, expected 1"
                )
        dims = {c.dim for comps in classes.values() for c in comps}
        if len(dims) != 1:
            raise InvalidArgumentError(f"inconsistent component dimensions: {dims}")
        psum = sum(class_priors.values())
        if abs(psum - 1.0) > 1e-9:
            raise InvalidArgumentError(f"class priors sum to {psum}, expected 1")
        if any(p <= 0 for p in class_priors.values()):
            raise InvalidArgumentError("class priors must be positive")

        self.class_ids = tuple(ids)
        self.dim = dims.pop()
        self.classes = {cid: tuple(classes[cid]) for cid in ids}
        self.class_priors = {cid: float(class_priors[cid]) for cid in ids}
        self._packs = {
            cid: _Pack(self.classes[cid], np.zeros(len(self.classes[cid])))
            for cid in ids
        }
        marg_comps = []
        marg_logp = []
        for cid in ids:
            lp = math.log(self.class_priors[cid])
            for c in self.classes[cid]:
                marg_comps.append(c)
                marg_logp.append(lp)
        self._marginal = _Pack(marg_comps, np.array(marg_logp))

    def pack(self, class_id):
        """Kernel arrays for one class, or the marginal mixture for None."""
        if class_id is None:
            return self._marginal
        try:
            return self._packs[class_id]
        except KeyError:
            raise NotFoundError(f"unknown class id {class_id!r}") from None

    def components(self, class_id):
        if class_id not in self.classes:
            raise NotFoundError(f"unknown class id {class_id!r}")
        return self.classes[class_id]

    def fingerprint(self) -> int:
        import hashlib

        blob = json.dumps(_spec_to_dict(self), sort_keys=True).encode()
        h = hashlib.blake2b(blob, digest_size=8)
        return int.from_bytes(h.digest(), "little")

    def __eq__(self, other):
        if not isinstance(other, GmmSpec):
            return NotImplemented
        return _spec_to_dict(self) == _spec_to_dict(other)


def _eval(spec, x, sigma, class_id):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.ascontiguousarray(np.atleast_2d(x))
    if X.shape[1] != spec.dim:
        raise InvalidArgumentError(f"points have dim {X.shape[1]}, spec has {spec.dim}")
    if not np.all(np.isfinite(X)):
        raise InvalidArgumentError("points must be finite")
    if not (sigma >= 0 and np.isfinite(sigma)):
        raise InvalidArgumentError(f"sigma must be finite and >= 0, got {sigma}")
    p = spec.pack(class_id)
    logp, resp, score, denoise = _kernels.gmm_eval(
        X, p.means, p.qmats, p.lams, p.logw, float(sigma) ** 2
    )
    return single, logp, resp, score, denoise


def noised_log_density(spec: GmmSpec, x, sigma: float, class_id=None):
    """log p(x; sigma) of the mixture convolved with N(0, sigma^2 I).

    Accepts a single vector or an (n, d) batch; underflow far from all
    components returns -inf rather than raising.
    """
    single, logp, *_ = _eval(spec, x, sigma, class_id)
    return float(logp[0]) if single else logp


def analytic_score(spec: GmmSpec, x, sigma: float, class_id=None):
    """Gradient of noised_log_density in x, same shape as x."""
    single, logp, _, score, _ = _eval(spec, x, sigma, class_id)
    if not np.all(np.isfinite(logp)):
        raise DegeneratePointError("density underflowed to zero; score undefined here")
    return score[0] if single else score


def ideal_denoiser(spec: GmmSpec, x, sigma: float, class_id=None):
    """Posterior mean E[x0 | x] at noise level sigma, computed from the
    responsibility-weighted per-component posterior means (not via the
    score identity, which tests check independently)."""
    if not (sigma > 0):
        raise InvalidArgumentError(f"denoiser needs sigma > 0, got {sigma}")
    single, logp, _, _, denoise = _eval(spec, x, sigma, class_id)
    if not np.all(np.isfinite(logp)):
        raise DegeneratePointError("density underflowed to zero; denoiser undefined here")
    return denoise[0] if single else denoise


def responsibilities(spec: GmmSpec, x, class_id=None, sigma: float = 0.0):
    """Posterior component membership probabilities, shape (n, K)."""
    single, _, resp, _, _ = _eval(spec, x, sigma, class_id)
    return resp[0] if single else resp


def mahalanobis_sq(spec: GmmSpec, x, class_id=None):
    """Squared Mahalanobis distance of each point to each component, (n, K)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    p = spec.pack(class_id)
    diff = X[:, None, :] - p.means[None, :, :]
    w = np.einsum("nkb,kba->nka", diff, p.qmats)
    m2 = np.einsum("nka,nka->nk", w / p.lams[None, :, :], w)
    return m2[0] if single else m2


def exact_sampler(spec: GmmSpec, rng: Rng, class_id=None, n: int = 1) -> np.ndarray:
    """Draw exact clean samples, shape (n, d).

    class_id None samples the marginal mixture (class by prior, then
    component).  Draw order is fixed: component indices first, then one
    batch of unit normals, so results depend only on the rng seed.
    """
    if not isinstance(n, (int, np.integer)) or n < 1:
        raise InvalidArgumentError(f"n must be a positive integer, got {n!r}")
    p = spec.pack(class_id)
    idx = rng.choice(len(p.weights), size=n, p=p.weights / p.weights.sum())
    z = rng.standard_normal((n, spec.dim))
    out = np.empty((n, spec.dim))
    for k in np.unique(idx):
        rows = idx == k
        scaled = z[rows] * np.sqrt(p.lams[k])[None, :]
        out[rows] = p.means[k][None, :] + scaled @ p.qmats[k].T
    return out


def sample_clean_batch(spec: GmmSpec, rng: Rng, class_ids: np.ndarray) -> np.ndarray:
    """Clean samples for a vector of class ids (training batches).

    Classes are processed in sorted order with per-class draws, so the result
    is a pure function of (seed, class_ids).
    """
    class_ids = np.asarray(class_ids)
    out = np.empty((len(class_ids), spec.dim))
    for cid in np.unique(class_ids):
        rows = np.flatnonzero(class_ids == cid)
        out[rows] = exact_sampler(spec, rng, class_id=int(cid), n=len(rows))
    return out


def projected_density_1d(spec: GmmSpec, u, class_id=None):
    """Exact 1-D density of the projection u . x under the clean mixture."""
    u = np.asarray(u, dtype=np.float64)
    if u.shape != (spec.dim,):
        raise InvalidArgumentError(f"projection must have shape ({spec.dim},)")
    p = spec.pack(class_id)
    m = p.means @ u
    qu = np.einsum("kab,a->kb", p.qmats, u)
    v = np.einsum("kb,kb->k", p.lams * qu, qu)
    w = p.weights / p.weights.sum()

    def density(t):
        t = np.asarray(t, dtype=np.float64)
        scalar = t.ndim == 0
        tt = np.atleast_1d(t)
        comp = np.exp(-0.5 * (tt[:, None] - m) ** 2 / v) / np.sqrt(2.0 * np.pi * v)
        out = comp @ w
        return float(out[0]) if scalar else out

    return density


# ---------------------------------------------------------------------------
# Presets
#
# Both presets place 8 class modes on a radius-5 ring.  imbalanced2d adds a
# single wide low-quality mode at the origin shared by every class: because it
# is common to the conditional and unconditional mixtures, classifier-free
# guidance barely moves mass out of it, which is exactly the failure mode the
# replay guidance is meant to escape.  Separation between mode centers and the
# shared mode is 5 / 0.8 = 6.25 standard deviations.

N_PRESET_CLASSES = 8
GOOD_TAG = 2.6
BAD_TAG = 1.4
_RING_RADIUS = 5.0
_GOOD_STD = 0.35
_BAD_STD = 0.8
_BAD_WEIGHT = 0.1


def _ring_mean(c: int) -> np.ndarray:
    ang = 2.0 * math.pi * (c - 1) / N_PRESET_CLASSES
    return _RING_RADIUS * np.array([math.cos(ang), math.sin(ang)])


def preset(name: str) -> GmmSpec:
    """Built-in 2-D datasets: "balanced2d" (every class a single high-quality
    mode) and "imbalanced2d" (each class leaks 10% of its mass into a shared
    wide low-quality mode at the origin)."""
    if name not in PRESET_NAMES:
        raise NotFoundError(f"unknown preset {name!r}; expected one of {PRESET_NAMES}")
    eye = np.eye(2)
    classes = {}
    for c in range(1, N_PRESET_CLASSES + 1):
        good = GmmComponent(
            mean=_ring_mean(c),
            cov=_GOOD_STD**2 * eye,
            weight=1.0 if name == "balanced2d" else 1.0 - _BAD_WEIGHT,
            quality_tag=GOOD_TAG,
        )
        if name == "balanced2d":
            classes[c] = [good]
        else:
            bad = GmmComponent(
                mean=np.zeros(2),
                cov=_BAD_STD**2 * eye,
                weight=_BAD_WEIGHT,
                quality_tag=BAD_TAG,
            )
            classes[c] = [good, bad]
    priors = {c: 1.0 / N_PRESET_CLASSES for c in classes}
    return GmmSpec(classes, priors)


# ---------------------------------------------------------------------------
# JSON spec files


def _spec_to_dict(spec: GmmSpec) -> dict:
    return {
        "classes": {
            str(cid): [
                {
                    "mean": c.mean.tolist(),
                    "cov": c.cov.tolist(),
                    "weight": c.weight,
                    "quality_tag": c.quality_tag,
                }
                for c in comps
            ]
            for cid, comps in spec.classes.items()
        },
        "class_priors": {str(cid): p for cid, p in spec.class_priors.items()},
    }


def save_spec(spec: GmmSpec, path) -> None:
    with open(path, "w") as fh:
        json.dump(_spec_to_dict(spec), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_spec(path) -> GmmSpec:
    """Load and fully validate a mixture description from JSON."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"not valid JSON: {path} ({exc})") from exc
    if not isinstance(raw, dict) or "classes" not in raw or "class_priors" not in raw:
        raise InvalidArgumentError(f"{path}: expected object with 'classes' and 'class_priors'")
    try:
        classes = {
            int(cid): [
                GmmComponent(
                    mean=np.asarray(c["mean"], dtype=np.float64),
                    cov=np.asarray(c["cov"], dtype=np.float64),
                    weight=c["weight"],
                    quality_tag=c["quality_tag"],
                )
                for c in comps
            ]
            for cid, comps in raw["classes"].items()
        }
        priors = {int(cid): float(p) for cid, p in raw["class_priors"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise InvalidArgumentError(f"{path}: malformed mixture description ({exc})") from exc
    return GmmSpec(classes, priors)
