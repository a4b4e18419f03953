"""Desk-scale diffusion machinery for action-chunk generation.

Noise schedule, forward process, training loss, EMA, deterministic DDIM
sampling, and a small FiLM-conditioned MLP denoiser whose gradients are
derived by hand (verified against finite differences in the tests). The
network is a low-dimensional stand-in for an image-conditioned temporal
U-Net; the schedule, loss, conditioning mechanism, EMA, sampler, and horizon
semantics are the ones that matter here.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import quat_canonical

DEFAULT_K = 100
DEFAULT_DDIM_STEPS = 10
DEFAULT_EMA_DECAY = 0.9999
ACTION_DIM = 11
DEFAULT_HORIZON = 16


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"loss became non-finite at step {step}")
        self.step = step


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal fractions alpha_bar[0..K] of the forward process."""

    K: int
    alpha_bar: np.ndarray

    def __post_init__(self):
        ab = np.asarray(self.alpha_bar, dtype=float)
        if len(ab) != self.K + 1:
            raise ValueError("alpha_bar must have K+1 entries")
        if ab[0] < 0.999:
            raise ValueError("alpha_bar[0] must be ~1")
        object.__setattr__(self, "alpha_bar", ab)


def cosine_schedule(K: int = DEFAULT_K, offset: float = 0.008) -> NoiseSchedule:
    """Squared-cosine schedule with the usual small offset, clipped away from 0."""
    if K < 1:
        raise ValueError("K must be >= 1")
    k = np.arange(K + 1, dtype=float)
    f = np.cos(((k / K + offset) / (1.0 + offset)) * (math.pi / 2.0)) ** 2
    ab = np.clip(f / f[0], 1e-5, 1.0)
    return NoiseSchedule(K=K, alpha_bar=ab)


def forward_noise(a0: np.ndarray, k: np.ndarray | int, eps: np.ndarray, sched: NoiseSchedule):
    """Noisy sample a^k = sqrt(ab_k) a^0 + sqrt(1 - ab_k) eps."""
    a0 = np.asarray(a0, dtype=float)
    eps = np.asarray(eps, dtype=float)
    k_arr = np.asarray(k)
    if np.any(k_arr < 0) or np.any(k_arr > sched.K):
        raise ValueError(f"diffusion step out of range [0, {sched.K}]")
    ab = sched.alpha_bar[k_arr]
    if a0.ndim > 1 and ab.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (a0.ndim - 1))
    return np.sqrt(ab) * a0 + np.sqrt(1.0 - ab) * eps


def mse_loss(eps: np.ndarray, eps_hat: np.ndarray) -> float:
    eps = np.asarray(eps, dtype=float)
    eps_hat = np.asarray(eps_hat, dtype=float)
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {eps.shape} vs {eps_hat.shape}")
    return float(np.mean((eps - eps_hat) ** 2))


def sinusoidal_embedding(k: np.ndarray, dim: int = 16) -> np.ndarray:
    """Sin/cos positional features of the diffusion step index."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half - 1, 1))
    ang = k[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class ToyDenoiser:
    """Two-hidden-layer MLP with FiLM conditioning on (condition, step).

    The diffusion step is embedded sinusoidally and passed through a two-layer
    MLP; the result is concatenated with the condition vector and linearly
    mapped to per-channel (gamma, beta) pairs applied after each hidden
    activation (gamma = 1 + raw so zero FiLM weights are the identity).
    Gradients are computed analytically in loss_and_grads.
    """

    input_dim: int
    cond_dim: int
    hidden: int = 64
    kemb_dim: int = 16
    temb_dim: int = 32
    params: dict = field(default_factory=dict)
    ema: dict = field(default_factory=dict)

    def init_params(self, rng: np.random.Generator) -> None:
        def dense(n_in, n_out, scale=None):
            scale = scale if scale is not None else 1.0 / math.sqrt(n_in)
            return rng.normal(0.0, scale, size=(n_in, n_out))

        H, D, C = self.hidden, self.input_dim, self.cond_dim
        self.params = {
            "W1": dense(D, H),
            "b1": np.zeros(H),
            "W2": dense(H, H),
            "b2": np.zeros(H),
            "W3": dense(H, D, scale=1e-2 / math.sqrt(H)),
            "b3": np.zeros(D),
            "Wf": np.zeros((C + self.temb_dim, 4 * H)),
            "bf": np.zeros(4 * H),
            "Wk1": dense(self.kemb_dim, self.temb_dim),
            "bk1": np.zeros(self.temb_dim),
            "Wk2": dense(self.temb_dim, self.temb_dim),
            "bk2": np.zeros(self.temb_dim),
        }
        self.ema = {name: v.copy() for name, v in self.params.items()}

    # -- forward ------------------------------------------------------------

    def _forward(self, params, x, k, cond):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        cond = np.atleast_2d(np.asarray(cond, dtype=float))
        for v in params.values():
            if not np.all(np.isfinite(v)):
                raise ValueError("non-finite parameters")
        H = self.hidden
        kfeat = sinusoidal_embedding(k, self.kemb_dim)
        t1 = np.tanh(kfeat @ params["Wk1"] + params["bk1"])
        temb = t1 @ params["Wk2"] + params["bk2"]
        c = np.concatenate([cond, temb], axis=1)
        f = c @ params["Wf"] + params["bf"]
        g1, be1, g2, be2 = (
            1.0 + f[:, :H],
            f[:, H : 2 * H],
            1.0 + f[:, 2 * H : 3 * H],
            f[:, 3 * H :],
        )
        h1 = np.tanh(x @ params["W1"] + params["b1"])
        a1 = g1 * h1 + be1
        h2 = np.tanh(a1 @ params["W2"] + params["b2"])
        a2 = g2 * h2 + be2
        out = a2 @ params["W3"] + params["b3"]
        cache = (x, cond, kfeat, t1, c, g1, g2, h1, a1, h2, a2)
        return out, cache

    def forward(self, x, k, cond, use_ema: bool = False) -> np.ndarray:
        params = self.ema if use_ema else self.params
        out, _ = self._forward(params, x, k, cond)
        return out

    # -- backward -----------------------------------------------------------

    def loss_and_grads(self, x, k, cond, eps_target):
        """MSE loss against eps_target and its exact gradients w.r.t. params."""
        p = self.params
        out, cache = self._forward(p, x, k, cond)
        eps_target = np.atleast_2d(np.asarray(eps_target, dtype=float))
        if out.shape != eps_target.shape:
            raise ValueError(f"shape mismatch: {out.shape} vs {eps_target.shape}")
        x2, cond2, kfeat, t1, c, g1, g2, h1, a1, h2, a2 = cache
        H = self.hidden
        n = out.size
        loss = float(np.sum((out - eps_target) ** 2) / n)

        dout = 2.0 * (out - eps_target) / n
        grads = {}
        grads["W3"] = a2.T @ dout
        grads["b3"] = dout.sum(axis=0)
        da2 = dout @ p["W3"].T
        df = np.empty((out.shape[0], 4 * H))
        df[:, 2 * H : 3 * H] = da2 * h2
        df[:, 3 * H :] = da2
        dh2 = da2 * g2
        dz2 = dh2 * (1.0 - h2 * h2)
        grads["W2"] = a1.T @ dz2
        grads["b2"] = dz2.sum(axis=0)
        da1 = dz2 @ p["W2"].T
        df[:, :H] = da1 * h1
        df[:, H : 2 * H] = da1
        dh1 = da1 * g1
        dz1 = dh1 * (1.0 - h1 * h1)
        grads["W1"] = x2.T @ dz1
        grads["b1"] = dz1.sum(axis=0)
        grads["Wf"] = c.T @ df
        grads["bf"] = df.sum(axis=0)
        dc = df @ p["Wf"].T
        dtemb = dc[:, cond2.shape[1] :]
        grads["Wk2"] = t1.T @ dtemb
        grads["bk2"] = dtemb.sum(axis=0)
        dt1 = dtemb @ p["Wk2"].T
        dzk = dt1 * (1.0 - t1 * t1)
        grads["Wk1"] = kfeat.T @ dzk
        grads["bk1"] = dzk.sum(axis=0)
        return loss, grads


def ema_update(shadow: dict, params: dict, decay: float = DEFAULT_EMA_DECAY) -> dict:
    """In-place shadow <- decay * shadow + (1 - decay) * params."""
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must be in [0, 1)")
    if set(shadow) != set(params):
        raise ValueError("parameter name mismatch")
    for name, v in params.items():
        if shadow[name].shape != v.shape:
            raise ValueError(f"shape mismatch for {name}")
        shadow[name] *= decay
        shadow[name] += (1.0 - decay) * v
    return shadow


class Adam:
    """Fixed-step-size Adam over a parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for n, g in grads.items():
            self.m[n] = self.beta1 * self.m[n] + (1.0 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1.0 - self.beta2) * g * g
            params[n] -= self.lr * (self.m[n] / bc1) / (np.sqrt(self.v[n] / bc2) + self.eps)


@dataclass
class TrainConfig:
    K: int = DEFAULT_K
    steps: int = 3000
    batch_size: int = 64
    lr: float = 2e-3
    ema_decay: float = DEFAULT_EMA_DECAY
    seed: int = 0
    hidden: int = 64


def train_toy(
    conds: np.ndarray, a0s: np.ndarray, config: TrainConfig | None = None
) -> tuple[ToyDenoiser, NoiseSchedule, list[float]]:
    """Train a noise-prediction network on (condition, clean action) pairs.

    Mini-batch descent with per-sample uniform step k in [1, K]; the EMA shadow
    is updated every step. Fully deterministic for a fixed seed. Returns the
    model, the schedule it was trained under, and the per-step loss curve.
    """
    config = config or TrainConfig()
    conds = np.atleast_2d(np.asarray(conds, dtype=float))
    a0s = np.atleast_2d(np.asarray(a0s, dtype=float))
    if len(conds) == 0:
        raise ValueError("empty dataset")
    if len(conds) != len(a0s):
        raise ValueError("condition/action count mismatch")
    sched = cosine_schedule(config.K)
    rng = np.random.default_rng(config.seed)
    model = ToyDenoiser(input_dim=a0s.shape[1], cond_dim=conds.shape[1], hidden=config.hidden)
    model.init_params(rng)
    opt = Adam(model.params, lr=config.lr)
    curve = []
    for step in range(config.steps):
        idx = rng.integers(0, len(a0s), size=config.batch_size)
        k = rng.integers(1, config.K + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, a0s.shape[1]))
        a_k = forward_noise(a0s[idx], k, eps, sched)
        loss, grads = model.loss_and_grads(a_k, k, conds[idx], eps)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.step(model.params, grads)
        ema_update(model.ema, model.params, config.ema_decay)
        curve.append(loss)
    return model, sched, curve


def train_regression(
    conds: np.ndarray, a0s: np.ndarray, config: TrainConfig | None = None
) -> tuple[ToyDenoiser, list[float]]:
    """Mean-regression control: the same network trained to output a0 directly.

    The denoiser input is zeroed and k pinned to 0, so the network can only
    map the condition to a point estimate; sampling is its plain forward pass.
    """
    config = config or TrainConfig()
    conds = np.atleast_2d(np.asarray(conds, dtype=float))
    a0s = np.atleast_2d(np.asarray(a0s, dtype=float))
    if len(conds) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(config.seed)
    model = ToyDenoiser(input_dim=a0s.shape[1], cond_dim=conds.shape[1], hidden=config.hidden)
    model.init_params(rng)
    opt = Adam(model.params, lr=config.lr)
    curve = []
    zeros = np.zeros_like(a0s[:1])
    for step in range(config.steps):
        idx = rng.integers(0, len(a0s), size=config.batch_size)
        x = np.repeat(zeros, len(idx), axis=0)
        k = np.zeros(len(idx), dtype=int)
        loss, grads = model.loss_and_grads(x, k, conds[idx], a0s[idx])
        if not math.isfinite(loss):
            raise TrainingDivergedError(step)
        opt.step(model.params, grads)
        ema_update(model.ema, model.params, config.ema_decay)
        curve.append(loss)
    return model, curve


def ddim_sample(
    eps_fn,
    cond: np.ndarray,
    sched: NoiseSchedule,
    n_steps: int = DEFAULT_DDIM_STEPS,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    sample_dim: int | None = None,
) -> np.ndarray:
    """Deterministic (eta = 0) DDIM sampling on a uniform-stride sub-schedule.

    eps_fn(x, k, cond) predicts the noise for a batch x at scalar step k.
    Starting from unit Gaussian noise keyed by the rng/seed, each update moves
    the estimated clean sample to the previous sub-schedule step. The
    randomness is only in the initial noise; the iteration itself is a pure
    function of it.
    """
    if n_steps > sched.K:
        raise ValueError(f"n_steps {n_steps} exceeds schedule K {sched.K}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if rng is None:
        rng = np.random.default_rng(seed)
    cond = np.atleast_2d(np.asarray(cond, dtype=float))
    if sample_dim is None:
        raise ValueError("sample_dim required")
    taus = np.unique(np.round(np.linspace(0, sched.K, n_steps + 1)).astype(int))
    x = rng.standard_normal((cond.shape[0], sample_dim))
    for i in range(len(taus) - 1, 0, -1):
        k_hi, k_lo = int(taus[i]), int(taus[i - 1])
        ab_hi = sched.alpha_bar[k_hi]
        ab_lo = sched.alpha_bar[k_lo]
        eps_hat = eps_fn(x, k_hi, cond)
        x0 = (x - math.sqrt(1.0 - ab_hi) * eps_hat) / math.sqrt(ab_hi)
        x = math.sqrt(ab_lo) * x0 + math.sqrt(1.0 - ab_lo) * eps_hat
    return x


def model_eps_fn(model: ToyDenoiser, use_ema: bool = True):
    """Adapter: sample from the EMA weights, which gate deployment."""

    def fn(x, k, cond):
        ks = np.full(len(np.atleast_2d(x)), k)
        return model.forward(x, ks, cond, use_ema=use_ema)

    return fn


# ---------------------------------------------------------------------------
# Action-chunk layer on top of the generic sampler.
# ---------------------------------------------------------------------------


@dataclass
class ActionChunkTensor:
    """A horizon of 11-D action rows plus the observation timestamp it is for."""

    values: np.ndarray  # (T_p, 11)
    t0_obs: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[1] != ACTION_DIM:
            raise ValueError(f"chunk must be (T_p, {ACTION_DIM})")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    def canonicalized(self) -> "ActionChunkTensor":
        """Renormalize the quaternion-increment block row-wise, w >= 0."""
        vals = self.values.copy()
        for i in range(len(vals)):
            vals[i, 6:10] = quat_canonical(vals[i, 6:10])
        return ActionChunkTensor(vals, self.t0_obs)


def sample_action_chunk(
    model: ToyDenoiser,
    cond: np.ndarray,
    sched: NoiseSchedule,
    horizon: int = DEFAULT_HORIZON,
    n_steps: int = DEFAULT_DDIM_STEPS,
    seed: int = 0,
    t0_obs: float = 0.0,
) -> ActionChunkTensor:
    """One policy inference: sample a flattened chunk and canonicalize it.

    Intermediate diffusion iterates are unconstrained noise carriers; the
    quaternion block is normalized only on the final output.
    """
    flat = ddim_sample(
        model_eps_fn(model),
        np.atleast_2d(cond),
        sched,
        n_steps=n_steps,
        seed=seed,
        sample_dim=horizon * ACTION_DIM,
    )
    return ActionChunkTensor(flat[0].reshape(horizon, ACTION_DIM), t0_obs).canonicalized()


def obs_to_condition(
    base, hand_rel, grip: float, prev_action: np.ndarray, scenario_features: np.ndarray
) -> np.ndarray:
    """Flatten an observation into the documented condition layout.

    Order: base [x, y, theta] (3), hand position (3), hand quaternion (4),
    grip (1), previous 11-D action (11), scenario features (variable). The
    scenario features stand in for image embeddings.
    """
    prev_action = np.asarray(prev_action, dtype=float)
    if prev_action.shape != (ACTION_DIM,):
        raise ValueError(f"previous action must be ({ACTION_DIM},)")
    return np.concatenate(
        [
            [base.x, base.y, base.theta],
            hand_rel.translation,
            hand_rel.rotation,
            [grip],
            prev_action,
            np.asarray(scenario_features, dtype=float),
        ]
    )


# ---------------------------------------------------------------------------
# Checkpoint format: JSON with shapes, parameters, EMA shadow, schedule.
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: ToyDenoiser, sched: NoiseSchedule, meta: dict | None = None):
    doc = {
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "cond_dim": model.cond_dim,
        "hidden": model.hidden,
        "kemb_dim": model.kemb_dim,
        "temb_dim": model.temb_dim,
        "K": sched.K,
        "alpha_bar": sched.alpha_bar.tolist(),
        "params": {n: v.tolist() for n, v in model.params.items()},
        "ema": {n: v.tolist() for n, v in model.ema.items()},
        "meta": meta or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)


def load_checkpoint(path) -> tuple[ToyDenoiser, NoiseSchedule, dict]:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    model = ToyDenoiser(
        input_dim=doc["input_dim"],
        cond_dim=doc["cond_dim"],
        hidden=doc["hidden"],
        kemb_dim=doc["kemb_dim"],
        temb_dim=doc["temb_dim"],
        params={n: np.array(v) for n, v in doc["params"].items()},
        ema={n: np.array(v) for n, v in doc["ema"].items()},
    )
    sched = NoiseSchedule(K=doc["K"], alpha_bar=np.array(doc["alpha_bar"]))
    return model, sched, doc.get("meta", {})
