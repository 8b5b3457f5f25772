"""Optimizers, the warm-up schedule and the alternating G/D training loop."""

from __future__ import annotations

import math
import os
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import checkpoint as ckpt
from . import signal as sig
from . import tensor as T
from .gan import (
    LossReport,
    LossWeights,
    MetricDiscriminator,
    compressed_magnitude,
    discriminator_loss,
    generator_losses,
    quality_proxy,
)
from .model import TridentNet

LOG_FIELDS = ("step", "lr", "L_a", "L_p", "L_w", "L_GAN", "L", "L_D")


class Optimizer:
    """Adam or LAMB over a list of parameters.

    LAMB scales each tensor's Adam direction ``u`` by ``||w|| / ||u||``,
    clamped to [0, max_trust] and taken as 1 when either norm is zero.
    """

    def __init__(self, params, mode="adam", lr=1e-3, betas=(0.9, 0.999), eps=1e-8, max_trust=10.0):
        if mode not in ("adam", "lamb"):
            raise ValueError(f"unknown optimizer {mode!r}; expected 'adam' or 'lamb'")
        self.params = list(params)
        self.mode = mode
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.max_trust = max_trust
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.last_trust = [1.0] * len(self.params)

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter shape {p.shape}")
            m, v = self.m[i], self.v[i]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            u = (m / c1) / (np.sqrt(v / c2) + self.eps)
            ratio = 1.0
            if self.mode == "lamb":
                w_norm = float(np.linalg.norm(p.data))
                u_norm = float(np.linalg.norm(u))
                if w_norm > 0 and u_norm > 0:
                    ratio = min(max(w_norm / u_norm, 0.0), self.max_trust)
            self.last_trust[i] = ratio
            p.data = (p.data - (lr * ratio) * u).astype(p.dtype)

    def state_dict(self, names):
        out = OrderedDict()
        for name, m, v in zip(names, self.m, self.v):
            out[f"m.{name}"] = m
            out[f"v.{name}"] = v
        out["t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state_dict(self, state, names):
        for i, name in enumerate(names):
            for key, buf in ((f"m.{name}", self.m[i]), (f"v.{name}", self.v[i])):
                if key not in state:
                    raise KeyError(f"optimizer state is missing {key!r}")
                if state[key].shape != buf.shape:
                    raise ValueError(f"optimizer state {key!r} has shape {state[key].shape}, expected {buf.shape}")
                buf[...] = state[key]
        self.t = int(state["t"][0])


def warmup_lr(step, base_lr, warmup_steps):
    """Linear ramp from 0 at step 0 to ``base_lr`` at ``warmup_steps``, flat after."""
    if warmup_steps < 1:
        raise ValueError("warmup_steps must be at least 1")
    return base_lr * min(step, warmup_steps) / warmup_steps


@dataclass(frozen=True)
class TrainerConfig:
    steps: int = 500
    batch_size: int = 4
    optimizer_g: str = "adam"
    lr_g: float = 1e-3
    optimizer_d: str = "adam"
    lr_d: float = 1e-3
    warmup: int = 200
    warmup_d: bool = True
    log_every: int = 1
    checkpoint_every: int = 0
    out_dir: str = "run"

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.warmup < 1:
            raise ValueError("steps must be >= 0, batch_size and warmup >= 1")
        for name in ("optimizer_g", "optimizer_d"):
            if getattr(self, name) not in ("adam", "lamb"):
                raise ValueError(f"{name} must be 'adam' or 'lamb'")
        if self.lr_g <= 0 or self.lr_d <= 0:
            raise ValueError("learning rates must be positive")

    @classmethod
    def full_scale(cls, **kw):
        """Full-scale schedule: LAMB 8e-4 for G, Adam 4e-4 for D, 5000 warm-up steps, batch 8."""
        base = dict(optimizer_g="lamb", lr_g=8e-4, optimizer_d="adam", lr_d=4e-4, warmup=5000, batch_size=8)
        base.update(kw)
        return cls(**base)

    def replace(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown trainer config keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    pass


def format_log(step, lr, report: LossReport):
    vals = [report.L_a, report.L_p, report.L_w, report.L_GAN, report.L, report.L_D]
    return f"{step} {lr:.6e} " + " ".join(f"{v:.6e}" for v in vals)


class Trainer:
    """One generator update on the full objective, then one discriminator
    update on the detached estimate, per step.

    ``noisy``/``clean`` are (n, samples) arrays. Batch ``k`` is drawn with
    ``default_rng([seed, k])`` so a resumed run sees the same batches.
    """

    def __init__(self, model: TridentNet, disc: MetricDiscriminator, noisy, clean,
                 cfg: TrainerConfig = TrainerConfig(), weights: LossWeights = LossWeights(),
                 seed=0, quality=quality_proxy):
        noisy = np.asarray(noisy)
        clean = np.asarray(clean)
        if noisy.shape != clean.shape or noisy.ndim != 2:
            raise ValueError(f"noisy/clean must be matching (n, samples) arrays, got {noisy.shape} and {clean.shape}")
        self.model = model
        self.disc = disc
        self.noisy = noisy
        self.clean = clean
        self.cfg = cfg
        self.weights = weights
        self.seed = seed
        self.quality = quality
        self.step = 0
        self.history: list[LossReport] = []
        self.opt_g = Optimizer(model.parameters(), cfg.optimizer_g, cfg.lr_g)
        self.opt_d = Optimizer(disc.parameters(), cfg.optimizer_d, cfg.lr_d)
        self._g_names = [n for n, _ in model.named_parameters()]
        self._d_names = [n for n, _ in disc.named_parameters()]

    def batch_indices(self, step):
        rng = np.random.default_rng([self.seed, step])
        n = len(self.noisy)
        return rng.choice(n, size=self.cfg.batch_size, replace=n < self.cfg.batch_size)

    def learning_rates(self, step):
        c = self.cfg
        lr_g = warmup_lr(step + 1, c.lr_g, c.warmup)
        lr_d = warmup_lr(step + 1, c.lr_d, c.warmup) if c.warmup_d else c.lr_d
        return lr_g, lr_d

    def _check(self, value, what):
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite {what} at step {self.step}; aborting")

    def train_step(self) -> LossReport:
        idx = self.batch_indices(self.step)
        noisy, clean = self.noisy[idx], self.clean[idx]
        lr_g, lr_d = self.learning_rates(self.step)
        dtype = self.model.dtype
        clean_spec = sig.stft(clean, self.model.stft_config, dtype=dtype)

        # generator: D frozen
        self.model.train()
        self.model.requires_grad_(True)
        self.disc.requires_grad_(False)
        with T.Tape() as tape:
            out = self.model(noisy)
            total, report = generator_losses(
                out.spec_real, out.spec_imag, clean_spec.real, clean_spec.imag,
                out.wave, clean.astype(dtype), self.disc, self.weights,
            )
        for name in ("L_a", "L_p", "L_w", "L_GAN", "L"):
            self._check(getattr(report, name), name)
        tape.backward(total)
        self.opt_g.step(lr_g)
        self.model.zero_grad()

        # discriminator: generator frozen, estimate detached
        self.model.requires_grad_(False)
        self.disc.requires_grad_(True)
        p = self.weights.power
        q = self.quality(out.wave.data.astype(np.float64), clean)
        est_mag = compressed_magnitude(T.Tensor._wrap(out.spec_real.data), T.Tensor._wrap(out.spec_imag.data), p)
        cr = T.Tensor._wrap(clean_spec.real)
        ci = T.Tensor._wrap(clean_spec.imag)
        clean_mag = compressed_magnitude(cr, ci, p)
        with T.Tape() as tape:
            d_clean = self.disc(clean_mag, clean_mag)
            d_est = self.disc(clean_mag, est_mag)
            loss_d = discriminator_loss(d_clean, d_est, q)
        report.L_D = float(loss_d.data)
        self._check(report.L_D, "L_D")
        tape.backward(loss_d)
        self.opt_d.step(lr_d)
        self.disc.zero_grad()
        self.model.requires_grad_(True)

        self.history.append(report)
        self.step += 1
        return report

    def run(self, steps=None, log=None, on_step=None):
        """Train until ``self.step == steps`` (default ``cfg.steps``); ``log`` gets one line per logged step."""
        target = self.cfg.steps if steps is None else steps
        while self.step < target:
            lr_g, _ = self.learning_rates(self.step)
            report = self.train_step()
            if log is not None and (self.step - 1) % self.cfg.log_every == 0:
                log(format_log(self.step - 1, lr_g, report))
            if on_step is not None:
                on_step(self)
        return self.history

    # ------------------------------------------------------------ checkpoints

    def train_state(self):
        state = OrderedDict()
        for name, arr in self.disc.state_dict().items():
            state[f"disc.{name}"] = arr
        for name, arr in self.opt_g.state_dict(self._g_names).items():
            state[f"opt_g.{name}"] = arr
        for name, arr in self.opt_d.state_dict(self._d_names).items():
            state[f"opt_d.{name}"] = arr
        state["step"] = np.array([self.step], dtype=np.float32)
        return state

    def load_train_state(self, state):
        def section(prefix):
            return OrderedDict((k[len(prefix):], v) for k, v in state.items() if k.startswith(prefix))

        self.disc.load_state_dict(section("disc."))
        self.opt_g.load_state_dict(section("opt_g."), self._g_names)
        self.opt_d.load_state_dict(section("opt_d."), self._d_names)
        self.step = int(state["step"][0])

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        ckpt.save(os.path.join(directory, "model.tse"), self.model.state_dict())
        ckpt.save(os.path.join(directory, "train_state.tse"), self.train_state())

    def resume(self, directory):
        self.model.load_state_dict(ckpt.load(os.path.join(directory, "model.tse")))
        self.load_train_state(ckpt.load(os.path.join(directory, "train_state.tse")))
        return self


def enhance_batch(model: TridentNet, noisy, batch=8):
    """Inference-mode enhancement of (n, samples) waveforms, returned as float64."""
    was_training = model.training
    model.eval()
    try:
        outs = [model(noisy[i : i + batch]).wave.data for i in range(0, len(noisy), batch)]
    finally:
        model.train(was_training)
    return np.concatenate(outs).astype(np.float64)
