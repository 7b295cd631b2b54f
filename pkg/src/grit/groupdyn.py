"""Group branch: transitions, recency-weighted statistics, membership and group mix.

Statistics are computed over the real (non-pad) positions of each row. The
complete window accumulates every real position seen so far; the short
window keeps the last ``w`` slots, with missing slots treated as zero vectors
whose weights still count towards the normaliser.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .config import ModelConfig

STREAMS = ("xc", "tc", "xs", "ts")


@dataclass
class EwmaAccumulator:
    """Streaming recency-weighted mass, sum and second moment.

    Works elementwise on arrays of any shape; ``mass`` broadcasts against the
    leading axes of the value arrays.
    """

    gamma: float
    mass: np.ndarray | float = 0.0
    total: np.ndarray | float = 0.0
    total_sq: np.ndarray | float = 0.0

    def update(self, z, weight=1.0):
        """Decay everything by ``gamma`` and add ``weight * z``."""
        self.mass = self.gamma * self.mass + weight
        wz = weight * z
        self.total = self.gamma * self.total + wz
        self.total_sq = self.gamma * self.total_sq + wz * z

    def mean(self):
        return _safe_div(self.total, self.mass)

    def second_moment(self):
        return _safe_div(self.total_sq, self.mass)

    def variance(self, eps: float = 0.0):
        mu = self.mean()
        return np.maximum(self.second_moment() - mu * mu, eps)


def _safe_div(a, c):
    c = np.asarray(c)
    a = np.asarray(a)
    inv = np.divide(1.0, c, out=np.zeros(c.shape, dtype=np.result_type(c, a, np.float32)), where=c > 0)
    return a * inv


def _window_sum(a: np.ndarray, gamma: float, window: int, reverse: bool = False) -> np.ndarray:
    """sum_{k<window} gamma^k a_{i-k} (or a_{i+k} when ``reverse``) along axis -2.

    Summed term by term rather than with an add-new/subtract-old recurrence,
    which loses all precision once the window content becomes small.
    """
    L = a.shape[-2]
    out = np.zeros_like(a)
    for k in range(min(window, L) - 1, -1, -1):
        if reverse:
            out[..., :L - k, :] += gamma ** k * a[..., k:, :]
        else:
            out[..., k:, :] += gamma ** k * a[..., :L - k, :]
    return out


# ---------------------------------------------------------------------------
# numpy scans (forward passes, also usable on their own)


def ewma_scan(z: np.ndarray, mask: np.ndarray, alpha: float, window: int | None = None):
    """Recency-weighted mean and (unclamped) second moment at every position.

    ``z`` is (..., L, d), ``mask`` is (..., L). Pad positions produce zeros.
    """
    gamma = 1.0 - alpha
    m = np.asarray(mask, dtype=z.dtype)[..., None]
    u = z * m
    if window is None:
        mean = np.zeros_like(z)
        second = np.zeros_like(z)
        acc = EwmaAccumulator(gamma)
        for i in range(z.shape[-2]):
            acc.update(u[..., i, :], m[..., i, :])
            mean[..., i, :] = acc.mean()
            second[..., i, :] = acc.second_moment()
    else:
        mass = (1.0 - gamma ** window) / (1.0 - gamma)
        mean = _window_sum(u, gamma, window) * (m / mass)
        second = _window_sum(u * u, gamma, window) * (m / mass)
    return mean, second


def _reverse_scan(a: np.ndarray, gamma: float, window: int | None) -> np.ndarray:
    # R_j = sum_{k>=0, k<window} gamma^k a_{j+k}
    if window is not None:
        return _window_sum(a, gamma, window, reverse=True)
    L = a.shape[-2]
    out = np.zeros_like(a)
    carry = np.zeros_like(a[..., 0, :])
    for j in range(L - 1, -1, -1):
        carry = a[..., j, :] + gamma * carry
        out[..., j, :] = carry
    return out


def _ewma_tensors(z: dc.Tensor, mask: np.ndarray, alpha: float, window: int | None):
    gamma = 1.0 - alpha
    m = np.asarray(mask, dtype=z.dtype)[..., None]
    mean, second = ewma_scan(z.data, mask, alpha, window)
    if window is None:
        mass = np.zeros(m.shape, dtype=z.dtype)
        c = np.zeros_like(m[..., 0, :])
        for i in range(z.shape[-2]):
            c = gamma * c + m[..., i, :]
            mass[..., i, :] = c
        inv = np.divide(1.0, mass, out=np.zeros_like(mass), where=mass > 0)
    else:
        inv = m * ((1.0 - gamma) / (1.0 - gamma ** window))
    zd = z.data

    def back_mean(g):
        return (m * _reverse_scan(g * inv, gamma, window),)

    def back_second(g):
        return (2.0 * zd * m * _reverse_scan(g * inv, gamma, window),)

    kind = "complete" if window is None else f"short{window}"
    return (
        dc.Tensor.from_op(mean, (z,), back_mean, "ewma_mean", window=kind),
        dc.Tensor.from_op(second, (z,), back_second, "ewma_second", window=kind),
    )


def ewma_complete(z: dc.Tensor, mask: np.ndarray, alpha: float, eps: float = 1e-6):
    """(mean, variance) over all real positions up to each step."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {alpha}")
    mean, second = _ewma_tensors(z, mask, alpha, None)
    return mean, dc.clamp_min(second - mean * mean, eps)


def ewma_short(z: dc.Tensor, mask: np.ndarray, alpha: float, window: int, eps: float = 1e-6):
    """(mean, variance) over the last ``window`` slots, zero-filled when short."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"decay must lie in (0, 1), got {alpha}")
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    mean, second = _ewma_tensors(z, mask, alpha, window)
    return mean, dc.clamp_min(second - mean * mean, eps)


# ---------------------------------------------------------------------------
# differentiable pieces


def _shift_matrix(L: int, dtype) -> np.ndarray:
    return np.eye(L, k=-1, dtype=dtype)


def transitions(x: dc.Tensor, mask: np.ndarray) -> dc.Tensor:
    """x_i - x_{i-1}, zero at pads and at the first real position of each row."""
    m = np.asarray(mask, dtype=x.dtype)
    prev_real = np.zeros_like(m)
    prev_real[..., 1:] = m[..., :-1]
    both = (m * prev_real)[..., None]
    prev = dc.Tensor(_shift_matrix(x.shape[-2], x.dtype)) @ x
    return (x - prev) * both


@dataclass
class GroupBranchParams:
    streams: dict[str, dict[str, dc.Tensor]]  # per stream: w, b (+ w_hidden, b_hidden)
    aff_w: dc.Tensor  # 2d x kappa
    aff_b: dc.Tensor
    groups: dc.Tensor  # d x kappa

    def named(self, prefix: str) -> dict[str, dc.Tensor]:
        out = {}
        for s, ps in self.streams.items():
            for k, t in ps.items():
                out[f"{prefix}{s}.{k}"] = t
        out[f"{prefix}aff.w"] = self.aff_w
        out[f"{prefix}aff.b"] = self.aff_b
        out[f"{prefix}G"] = self.groups
        return out


def init_group_matrix(rng: np.random.Generator, d: int, kappa: int, dtype) -> np.ndarray:
    if kappa <= d:
        q, r = np.linalg.qr(rng.standard_normal((d, kappa)))
        return (q * np.sign(np.diag(r))).astype(dtype)
    return dc.truncated_normal(rng, (d, kappa), 0.02, dtype)


def init_group_params(config: ModelConfig, rng: np.random.Generator) -> GroupBranchParams:
    d, dt = config.d, np.dtype(config.dtype)

    def lin(n_in, n_out):
        return (dc.Tensor(dc.truncated_normal(rng, (n_in, n_out), 0.02, dt), requires_grad=True),
                dc.Tensor(np.zeros(n_out, dt), requires_grad=True))

    streams = {}
    for s in STREAMS:
        ps = {}
        if config.group_mlp_hidden:
            ps["w_hidden"], ps["b_hidden"] = lin(3 * d, d)
            ps["w"], ps["b"] = lin(d, d)
        else:
            ps["w"], ps["b"] = lin(3 * d, d)
        streams[s] = ps
    aff_w, aff_b = lin(2 * d, config.kappa)
    groups = dc.Tensor(init_group_matrix(rng, d, config.kappa, dt), requires_grad=True)
    return GroupBranchParams(streams, aff_w, aff_b, groups)


def _stream_mlp(inp: dc.Tensor, ps: dict[str, dc.Tensor]) -> dc.Tensor:
    if "w_hidden" in ps:
        inp = dc.gelu(inp @ ps["w_hidden"] + ps["b_hidden"])
    return inp @ ps["w"] + ps["b"]


def temporal_representations(x, t, stats, params: GroupBranchParams, enabled=None):
    """Four stream features from [current ; mean ; variance].

    ``stats`` maps stream name to its (mean, variance) pair; ``enabled`` maps
    stream name to a bool, disabled streams become zero tensors.
    """
    enabled = enabled or {}
    current = {"xc": x, "tc": t, "xs": x, "ts": t}
    feats = {}
    for s in STREAMS:
        mu, var = stats[s]
        cur = current[s]
        if not (cur.shape == mu.shape == var.shape):
            raise dc.ShapeError(f"temporal_representations[{s}]: {cur.shape}, {mu.shape}, {var.shape}")
        if enabled.get(s, True):
            feats[s] = _stream_mlp(dc.concat([cur, mu, var], axis=-1), params.streams[s])
        else:
            feats[s] = dc.Tensor(np.zeros(cur.shape[:-1] + (params.streams[s]["b"].shape[0],), cur.dtype))
    return feats["xc"], feats["tc"], feats["xs"], feats["ts"]


def membership(f_xc, f_tc, f_xs, f_ts, params: GroupBranchParams, tau: float, mask=None) -> dc.Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    h = dc.concat([f_xc + f_tc, f_xs + f_ts], axis=-1)
    logits = (h @ params.aff_w + params.aff_b) * (1.0 / tau)
    if mask is not None:
        # pads get all-zero logits, hence a uniform membership
        logits = logits * np.asarray(mask, dtype=logits.dtype)[..., None]
    return dc.softmax(logits)


def group_representation(c: dc.Tensor, groups: dc.Tensor) -> dc.Tensor:
    """G c_i at every position: (..., kappa) x (d, kappa)^T -> (..., d)."""
    return c @ dc.transpose(groups)


def group_branch(x: dc.Tensor, mask: np.ndarray, params: GroupBranchParams, config: ModelConfig):
    """Full branch on pad-zeroed block input; returns (g, membership)."""
    t = transitions(x, mask)
    eps = config.var_eps
    stats = {
        "xc": ewma_complete(x, mask, config.alpha_c, eps),
        "tc": ewma_complete(t, mask, config.alpha_c, eps),
        "xs": ewma_short(x, mask, config.alpha_s, config.window, eps),
        "ts": ewma_short(t, mask, config.alpha_s, config.window, eps),
    }
    enabled = {
        "xc": config.enable_x_complete, "tc": config.enable_t_complete,
        "xs": config.enable_x_short, "ts": config.enable_t_short,
    }
    feats = temporal_representations(x, t, stats, params, enabled)
    c = membership(*feats, params, config.tau, mask)
    return group_representation(c, params.groups), c
