"""Stochastic training of paired encoders with EMA moment buffers.

Each step draws a minibatch of paired samples, refreshes exponential moving
averages of the signal and noise matrices with the *current* batch features,
resolves the ridge-optimal predictor from the buffers, freezes it, and takes
an SGD-with-momentum step on the auxiliary loss gradient backpropagated to
the encoder parameters:

1. ``Phi_X, Phi_Y`` — batch features (k×B);
2. ``Sigma <- (1-eta) Sigma + (eta/B)(Phi_X Phi_Y^T + Phi_Y Phi_X^T)`` and
   ``N <- (1-eta) N + (eta/B)(Phi_X Phi_X^T + Phi_Y Phi_Y^T)``
   (first call initializes the buffers from the batch, i.e. eta = 1);
3. ``Q = (N + lam I)^{-1}``, ``P = Sigma Q`` — then *frozen*;
4. per-sample feature gradient ``(1/B)[(1/2 (QP + P^T Q) + lam I) phi_x -
   Q phi_y]`` and symmetrically for the other view;
5. optimizer update (optional global-norm gradient clipping).

The EMA rate can be annealed with a half-cosine from ``eta_init`` to
``eta_min`` — fresh statistics early, low estimator variance late.  Encoders
are either exact lookup tables over the discrete states or small tanh MLPs
on one-hot inputs with hand-rolled, finite-difference-checked backprop.
Feeding the whole table as one probability-weighted "batch" makes the step
reproduce the exact population gradient, which the tests exploit.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .cca_oracle import (
    coordinate_principal_angles,
    coordinates_of,
    exact_cca,
    operator_spectrum,
)
from .diagnostics import MetricsRow, active_modes, alignment, effective_rank, signal_spectrum
from .distributions import JointTable, sample
from .equilibria import top_mode_count
from .matstack import solve_spd
from .objectives import EncoderPair, moments

__all__ = [
    "TrainerConfig",
    "EmaBuffers",
    "OneHotEncoder",
    "MlpEncoder",
    "SgdMomentum",
    "MetricsLog",
    "TrainResult",
    "TrainingDivergedError",
    "ema_rate",
    "learning_rate_at",
    "feature_gradients",
    "sc_peira_step",
    "train",
    "mlp_backprop_check",
]

_INIT_SCALE = 0.1


def _stream(seed: int, salt: int) -> np.random.Generator:
    key = np.array([np.uint64(seed), np.uint64(salt)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class TrainerConfig:
    k: int
    lam: float
    batch_size: int
    eta_init: float
    eta_min: float
    total_steps: int
    learning_rate: float
    momentum: float = 0.9
    schedule: str = "cosine"
    encoder: str = "onehot"
    mlp_widths: tuple = ()
    shared_encoder: bool = False
    clip: float | None = None
    seed: int = 0
    log_every: int = 100
    dataset_size: int = 65536

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("feature dimension must be >= 1")
        if not 0.0 < self.lam < 1.0:
            raise ValueError(f"regularization must lie in (0, 1), got {self.lam}")
        if self.batch_size < 2:
            raise ValueError("batch size must be >= 2")
        if not 0.0 < self.eta_min <= self.eta_init <= 1.0:
            raise ValueError("need 0 < eta_min <= eta_init <= 1")
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be constant or cosine, got {self.schedule!r}")
        if self.encoder not in ("onehot", "mlp"):
            raise ValueError(f"encoder must be onehot or mlp, got {self.encoder!r}")
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        if self.encoder == "mlp" and any(w < 1 for w in self.mlp_widths):
            raise ValueError("mlp widths must be positive")
        if self.clip is not None and self.clip <= 0.0:
            raise ValueError("clip must be positive or None")
        if self.log_every < 1:
            raise ValueError("log_every must be >= 1")
        if self.dataset_size < self.batch_size:
            raise ValueError("dataset smaller than one batch")


def ema_rate(step: int, cfg: TrainerConfig) -> float:
    """EMA rate at a step: constant, or half-cosine from eta_init to eta_min."""
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if cfg.schedule == "constant":
        return cfg.eta_init
    cos = np.cos(np.pi * step / cfg.total_steps)
    return float(cfg.eta_min + (cfg.eta_init - cfg.eta_min) * 0.5 * (1.0 + cos))


def learning_rate_at(step: int, cfg: TrainerConfig) -> float:
    """Step-size schedule paired with the EMA schedule.

    Constant keeps ``learning_rate``; cosine decays it to zero over the run
    so the iterate settles while the (slowed) buffers average out noise.
    """
    if not 0 <= step < cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps})")
    if cfg.schedule == "constant":
        return cfg.learning_rate
    cos = np.cos(np.pi * step / cfg.total_steps)
    return float(cfg.learning_rate * 0.5 * (1.0 + cos))


@dataclass
class EmaBuffers:
    """Running estimates of the signal and noise matrices."""

    Sigma: np.ndarray
    N: np.ndarray
    initialized: bool = False

    @classmethod
    def zeros(cls, k: int) -> "EmaBuffers":
        return cls(Sigma=np.zeros((k, k)), N=np.zeros((k, k)), initialized=False)

    def update(self, phi_x: np.ndarray, phi_y: np.ndarray, eta: float,
               weights: np.ndarray | None = None) -> None:
        """Blend in batch statistics; the first call copies them (eta = 1)."""
        if weights is None:
            w = np.full(phi_x.shape[1], 1.0 / phi_x.shape[1])
        else:
            w = np.asarray(weights, dtype=np.float64)
        xw = phi_x * w
        yw = phi_y * w
        cross = xw @ phi_y.T
        sig = cross + cross.T
        noise = xw @ phi_x.T + yw @ phi_y.T
        if not self.initialized:
            self.Sigma = sig
            self.N = noise
            self.initialized = True
        else:
            self.Sigma = (1.0 - eta) * self.Sigma + eta * sig
            self.N = (1.0 - eta) * self.N + eta * noise

    def predictor(self, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """(P, Q) resolved from the current buffers."""
        k = self.N.shape[0]
        Q = solve_spd(0.5 * (self.N + self.N.T), lam, np.eye(k))
        Q = 0.5 * (Q + Q.T)
        return self.Sigma @ Q, Q

    def objective(self, lam: float) -> float:
        """Objective estimate from buffered statistics only."""
        P, _ = self.predictor(lam)
        return float(-0.5 * np.trace(P) + 0.5 * lam * np.trace(self.N))


class OneHotEncoder:
    """Exact lookup-table encoder: the weight column IS the state embedding."""

    def __init__(self, weight: np.ndarray):
        self.weight = np.ascontiguousarray(weight, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ValueError("weight must be k×n")

    @classmethod
    def random(cls, k: int, n: int, gen: np.random.Generator,
               scale: float = _INIT_SCALE) -> "OneHotEncoder":
        return cls(scale * gen.standard_normal((k, n)))

    @property
    def k(self) -> int:
        return self.weight.shape[0]

    @property
    def n_states(self) -> int:
        return self.weight.shape[1]

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight]

    def forward(self, idx: np.ndarray):
        return self.weight[:, idx], idx

    def backward(self, cache, grad_phi: np.ndarray) -> list[np.ndarray]:
        idx = cache
        grad_w = np.zeros_like(self.weight)
        np.add.at(grad_w.T, idx, grad_phi.T)
        return [grad_w]

    def to_table(self) -> np.ndarray:
        return self.weight.copy()


class MlpEncoder:
    """Small tanh MLP on one-hot state indicators, linear output layer.

    Parameters alternate (weight, bias) per layer; backward is hand-rolled
    and validated against central finite differences.
    """

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray], n_states: int):
        if len(weights) != len(biases) or not weights:
            raise ValueError("need matching weight/bias lists")
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]
        self._n_states = int(n_states)
        if self.weights[0].shape[1] != self._n_states:
            raise ValueError("first layer width must match the state count")

    @classmethod
    def random(cls, n: int, widths: tuple, k: int, gen: np.random.Generator) -> "MlpEncoder":
        dims = [n] + list(widths) + [k]
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(gen.standard_normal((fan_out, fan_in)) / np.sqrt(fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases, n)

    @property
    def k(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_states(self) -> int:
        return self._n_states

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend([w, b])
        return out

    def forward(self, idx: np.ndarray):
        acts = []                       # post-activation of each hidden layer
        h = self.weights[0][:, idx] + self.biases[0][:, None]
        for layer in range(1, len(self.weights)):
            h = np.tanh(h)
            acts.append(h)
            h = self.weights[layer] @ h + self.biases[layer][:, None]
        return h, (idx, acts)

    def backward(self, cache, grad_phi: np.ndarray) -> list[np.ndarray]:
        idx, acts = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.weights)
        delta = grad_phi                # gradient on the layer's pre-activation
        for layer in range(len(self.weights) - 1, 0, -1):
            act = acts[layer - 1]
            grads_w[layer] = delta @ act.T
            grads_b[layer] = delta.sum(axis=1)
            delta = (self.weights[layer].T @ delta) * (1.0 - act * act)
        grad_w0 = np.zeros_like(self.weights[0])
        np.add.at(grad_w0.T, idx, delta.T)
        grads_w[0] = grad_w0
        grads_b[0] = delta.sum(axis=1)
        out = []
        for gw, gb in zip(grads_w, grads_b):
            out.extend([gw, gb])
        return out

    def to_table(self) -> np.ndarray:
        phi, _ = self.forward(np.arange(self._n_states))
        return phi


class SgdMomentum:
    """Heavy-ball SGD: ``v <- momentum v + g; p <- p - lr v``."""

    def __init__(self, params: list[np.ndarray], momentum: float):
        self.momentum = float(momentum)
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float) -> None:
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= lr * v


class TrainingDivergedError(ArithmeticError):
    """Non-finite training state; carries a diagnostic snapshot."""

    def __init__(self, message: str, step: int, snapshot: dict):
        super().__init__(message)
        self.step = step
        self.snapshot = snapshot


def feature_gradients(phi_x: np.ndarray, phi_y: np.ndarray, P: np.ndarray,
                      Q: np.ndarray, lam: float,
                      weights: np.ndarray | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample gradients of the batch auxiliary loss at frozen (P, Q)."""
    B = phi_x.shape[1]
    w = (np.full(B, 1.0 / B) if weights is None
         else np.asarray(weights, dtype=np.float64))
    A = 0.5 * (Q @ P + P.T @ Q) + lam * np.eye(Q.shape[0])
    gx = (A @ phi_x - Q @ phi_y) * w
    gy = (A @ phi_y - Q @ phi_x) * w
    return gx, gy


def _global_norm(grads: list[np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def sc_peira_step(enc_x, enc_y, opt: SgdMomentum, buffers: EmaBuffers,
                  idx_x: np.ndarray, idx_y: np.ndarray, cfg: TrainerConfig,
                  step: int, weights: np.ndarray | None = None) -> float:
    """One stochastic step; returns the eta actually used.

    ``enc_x is enc_y`` runs the shared-encoder variant: a single parameter
    set receives the summed gradient from both views.
    """
    shared = enc_x is enc_y
    phi_x, cache_x = enc_x.forward(idx_x)
    phi_y, cache_y = enc_y.forward(idx_y)
    eta = 1.0 if not buffers.initialized else ema_rate(step, cfg)
    buffers.update(phi_x, phi_y, eta, weights)
    P, Q = buffers.predictor(cfg.lam)
    gx, gy = feature_gradients(phi_x, phi_y, P, Q, cfg.lam, weights)
    grads_x = enc_x.backward(cache_x, gx)
    grads_y = enc_y.backward(cache_y, gy)
    if shared:
        grads = [a + b for a, b in zip(grads_x, grads_y)]
        params = enc_x.params
    else:
        grads = grads_x + grads_y
        params = enc_x.params + enc_y.params
    gnorm = _global_norm(grads)
    if not np.isfinite(gnorm):
        raise TrainingDivergedError(
            f"non-finite gradient at step {step}", step,
            {"step": step, "eta": eta, "grad_norm": gnorm,
             "buffer_trace_N": float(np.trace(buffers.N))},
        )
    if cfg.clip is not None and gnorm > cfg.clip:
        scale = cfg.clip / gnorm
        grads = [g * scale for g in grads]
    opt.step(params, grads, learning_rate_at(step, cfg))
    return eta


@dataclass
class MetricsLog:
    rows: list = dataclass_field(default_factory=list)

    COLUMNS = ("step", "eta", "objective_buffered", "objective_population",
               "erank", "min_alignment", "principal_angle_max")

    def add(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.rows:
                writer.writerow([
                    int(r.step), repr(float(r.eta)), repr(float(r.objective)),
                    repr(float(r.objective_population)), repr(float(r.erank)),
                    repr(float(r.min_alignment)), repr(float(r.principal_angle_max)),
                ])

    def column(self, name: str) -> np.ndarray:
        attr = {"step": "step", "eta": "eta", "objective_buffered": "objective",
                "objective_population": "objective_population", "erank": "erank",
                "min_alignment": "min_alignment",
                "principal_angle_max": "principal_angle_max"}[name]
        return np.asarray([getattr(r, attr) for r in self.rows], dtype=np.float64)


@dataclass
class TrainResult:
    enc_x: object
    enc_y: object
    log: MetricsLog
    final_pair: EncoderPair
    cfg: TrainerConfig


def _make_encoder(kind: str, k: int, n: int, widths: tuple,
                  gen: np.random.Generator):
    if kind == "onehot":
        return OneHotEncoder.random(k, n, gen)
    return MlpEncoder.random(n, widths, k, gen)


def _population_row(step, eta, buffers, enc_x, enc_y, table, spectrum, r_angles, lam):
    U = enc_x.to_table()
    V = enc_y.to_table()
    W = EncoderPair.from_tables(U, V, table)
    m = moments(W, table)
    obj_pop = float(-0.5 * np.trace(
        m.Sigma @ solve_spd(m.N, lam, np.eye(m.N.shape[0]))
    ) + 0.5 * lam * np.trace(m.N))
    Z = np.hstack([U * np.sqrt(table.px), V * np.sqrt(table.py)])
    try:
        erank = effective_rank(Z)
    except ValueError:
        erank = 1.0
    alphas = alignment(m)
    mask = active_modes(signal_spectrum(m))
    min_align = float(alphas[mask].min()) if mask.any() else 1.0
    angles = coordinate_principal_angles(coordinates_of(W, spectrum), r_angles)
    return MetricsRow(
        step=float(step), eta=float(eta), objective=buffers.objective(lam),
        objective_population=obj_pop, erank=erank, min_alignment=min_align,
        principal_angle_max=float(angles.max()),
    ), W


def train(table: JointTable, cfg: TrainerConfig) -> TrainResult:
    """Run the full stochastic loop on samples drawn from the table."""
    if cfg.shared_encoder and table.nx != table.ny:
        raise ValueError("shared encoder requires both views on the same state space")
    pairs = sample(table, cfg.dataset_size, cfg.seed)
    shuffle_gen = _stream(cfg.seed, 1)
    enc_x = _make_encoder(cfg.encoder, cfg.k, table.nx, cfg.mlp_widths, _stream(cfg.seed, 2))
    enc_y = enc_x if cfg.shared_encoder else _make_encoder(
        cfg.encoder, cfg.k, table.ny, cfg.mlp_widths, _stream(cfg.seed, 3))
    params = enc_x.params if cfg.shared_encoder else enc_x.params + enc_y.params
    opt = SgdMomentum(params, cfg.momentum)
    buffers = EmaBuffers.zeros(cfg.k)
    cca = exact_cca(table)
    spectrum = operator_spectrum(cca)
    r_angles = max(1, top_mode_count(cca.c, cfg.lam, cfg.k))
    log = MetricsLog()
    steps_per_epoch = cfg.dataset_size // cfg.batch_size
    perm = None
    final_pair = None
    for step in range(cfg.total_steps):
        slot = step % steps_per_epoch
        if slot == 0:
            perm = shuffle_gen.permutation(cfg.dataset_size)
        batch = perm[slot * cfg.batch_size:(slot + 1) * cfg.batch_size]
        eta = sc_peira_step(enc_x, enc_y, opt, buffers,
                            pairs.xs[batch], pairs.ys[batch], cfg, step)
        if step % cfg.log_every == 0 or step == cfg.total_steps - 1:
            row, final_pair = _population_row(step, eta, buffers, enc_x, enc_y,
                                              table, spectrum, r_angles, cfg.lam)
            log.add(row)
    return TrainResult(enc_x=enc_x, enc_y=enc_y, log=log, final_pair=final_pair, cfg=cfg)


def mlp_backprop_check(net: MlpEncoder, seed: int, n_samples: int = 5) -> float:
    """Max relative error of hand-rolled gradients vs central differences.

    Uses a random quadratic readout loss ``1/2 sum |A f(x) - t|^2`` over a
    small random batch of states.
    """
    gen = _stream(seed, 7)
    idx = gen.integers(0, net.n_states, size=n_samples)
    A = gen.standard_normal((3, net.k))
    target = gen.standard_normal((3, n_samples))

    def loss_and_grad_phi(phi):
        resid = A @ phi - target
        return 0.5 * float((resid * resid).sum()), A.T @ resid

    phi, cache = net.forward(idx)
    _, gphi = loss_and_grad_phi(phi)
    analytic = net.backward(cache, gphi)
    worst = 0.0
    for p_idx, p in enumerate(net.params):
        flat = p.ravel()
        for entry in range(flat.shape[0]):
            h = 1e-5 * (1.0 + abs(flat[entry]))
            orig = flat[entry]
            flat[entry] = orig + h
            lp, _ = loss_and_grad_phi(net.forward(idx)[0])
            flat[entry] = orig - h
            lm, _ = loss_and_grad_phi(net.forward(idx)[0])
            flat[entry] = orig
            fd = (lp - lm) / (2.0 * h)
            an = analytic[p_idx].ravel()[entry]
            denom = max(abs(an), abs(fd), 1e-8)
            worst = max(worst, abs(an - fd) / denom)
    return worst
