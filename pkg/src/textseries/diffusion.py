"""Conditional denoising-diffusion core.

A patch transformer predicts the injected noise from (corrupted window,
diffusion step, prototype mask, text condition).  Cross-attention keys and
values project from the frozen prototype bank; the per-sample mask adds to
the attention logits before softmax, with non-positive assignments excluded
outright.  Training randomly swaps the fused condition for a learned
unconditional identifier so the model can also sample unconditionally.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import GradTape, OptimizerState, Tensor
from .prototypes import AssignmentNet, PrototypeBank, PrototypeMask, init_bank, mask_components
from .textencode import HashingTextEncoder, TextEncoder, fuse

log = logging.getLogger(__name__)

SAMPLE_MODES = ("paper_literal", "ddpm", "ddim")


class NumericAbort(FloatingPointError):
    """Raised when training or sampling hits non-finite values."""


# ---------------------------------------------------------------------------
# noise schedule
# ---------------------------------------------------------------------------

@dataclass
class NoiseSchedule:
    """Per-step noise levels; arrays are float64 and 0-indexed internally,
    accessors take the 1-based step n."""

    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def n_steps(self) -> int:
        return len(self.beta)

    def b(self, n: int) -> float:
        self._check(n)
        return float(self.beta[n - 1])

    def a(self, n: int) -> float:
        self._check(n)
        return float(self.alpha[n - 1])

    def ab(self, n: int) -> float:
        """Cumulative alpha product up to step n; ab(0) is defined as 1."""
        if n == 0:
            return 1.0
        self._check(n)
        return float(self.alpha_bar[n - 1])

    def _check(self, n: int) -> None:
        if not 1 <= n <= self.n_steps:
            raise ValueError(f"step {n} outside [1, {self.n_steps}]")


def make_schedule(n_steps: int, beta_min: float = 1e-4,
                  beta_max: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with a float64 cumulative product."""
    if n_steps < 2:
        raise ValueError(f"need at least 2 steps, got {n_steps}")
    if not (0 < beta_min <= beta_max < 1):
        raise ValueError(f"invalid beta bounds ({beta_min}, {beta_max})")
    beta = np.linspace(beta_min, beta_max, n_steps, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def corrupt(x0: np.ndarray, n: int | np.ndarray, eps: np.ndarray,
            schedule: NoiseSchedule) -> np.ndarray:
    """Forward corruption: sqrt(ab_n) x0 + sqrt(1 - ab_n) eps.

    ``n`` may be a scalar or one step per leading-batch row.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    if np.isscalar(n) or np.ndim(n) == 0:
        ab = schedule.ab(int(n))
        return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    n = np.asarray(n)
    if n.min() < 1 or n.max() > schedule.n_steps:
        raise ValueError(f"steps outside [1, {schedule.n_steps}]")
    ab = schedule.alpha_bar[n - 1].reshape((-1,) + (1,) * (x0.ndim - 1))
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps).astype(x0.dtype)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class ModelConfig:
    length: int = 168
    patch: int = 8
    dim: int = 64
    blocks: int = 4
    n_prototypes: int = 16
    text_dim: int = 256
    ff_mult: int = 4
    assign_hidden: int = 64
    conv_channels: tuple[int, int] = (16, 32)
    kernel_sizes: tuple[int, int] = (9, 5)
    schedule_steps: int = 100
    beta_min: float = 1e-4
    beta_max: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.length % self.patch != 0:
            raise ValueError(f"length {self.length} not divisible by patch {self.patch}")
        if self.n_prototypes > self.dim:
            raise ValueError("n_prototypes must not exceed dim")

    @property
    def tokens(self) -> int:
        return self.length // self.patch

    def cross_blocks(self) -> list[int]:
        """Cross-attention sits in every other block (the even ones)."""
        return [i for i in range(1, self.blocks + 1) if i % 2 == 0]


@dataclass
class TrainConfig:
    batch_size: int = 32
    steps: int = 2000
    lr: float = 1e-3
    warmup: int = 100
    uncond_drop_prob: float = 0.1
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if min(self.batch_size, self.steps, self.warmup) <= 0 or self.lr <= 0:
            raise ValueError("batch_size, steps, lr, warmup must be positive")
        if not 0.0 <= self.uncond_drop_prob < 1.0:
            raise ValueError("uncond_drop_prob must lie in [0, 1)")


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def step_embedding(n: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of 1-based diffusion steps; (B,) -> (B, dim)."""
    n = np.asarray(n, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)[None, :]
    ang = n * freqs
    out = np.concatenate([np.sin(ang), np.cos(ang)], axis=1)
    if out.shape[1] < dim:
        out = np.concatenate([out, np.zeros((out.shape[0], dim - out.shape[1]))], axis=1)
    return out.astype(dtype)


class GenerationModel:
    """Denoiser + assignment network + fusion layer + unconditional
    identifier, over a frozen prototype bank and a fixed noise schedule."""

    def __init__(self, config: ModelConfig, dtype=None):
        self.config = config
        self.dtype = dtype if dtype is not None else nx.default_dtype()
        self.schedule = make_schedule(config.schedule_steps, config.beta_min,
                                      config.beta_max)
        self.bank: PrototypeBank = init_bank(config.n_prototypes, config.dim,
                                             config.seed)
        self._bank_const = Tensor(self.bank.matrix, dtype=self.dtype)
        self.assign_net = AssignmentNet(
            window_len=config.length, text_dim=config.text_dim,
            n_prototypes=config.n_prototypes, seed=config.seed,
            conv_channels=config.conv_channels, kernel_sizes=config.kernel_sizes,
            hidden=config.assign_hidden, dtype=self.dtype)
        self.params: dict[str, Tensor] = dict(self.assign_net.params)
        self._init_denoiser_params()

    # -- parameters --------------------------------------------------------

    def _init_denoiser_params(self) -> None:
        cfg = self.config
        gen = nx.rng_for(cfg.seed, 0xD1FF)
        dt = self.dtype

        def par(name, shape, scale):
            data = (gen.standard_normal(shape) * scale).astype(dt)
            self.params[name] = nx.parameter(data, name, dtype=dt)

        def zeros(name, shape):
            self.params[name] = nx.parameter(np.zeros(shape, dtype=dt), name, dtype=dt)

        def ones(name, shape):
            self.params[name] = nx.parameter(np.ones(shape, dtype=dt), name, dtype=dt)

        d, p = cfg.dim, cfg.patch
        par("denoise.in.w", (p, d), p ** -0.5)
        zeros("denoise.in.b", (d,))
        for i in range(1, cfg.blocks + 1):
            pre = f"denoise.b{i}"
            ones(f"{pre}.ln1.g", (d,)); zeros(f"{pre}.ln1.b", (d,))
            for m in ("wq", "wk", "wv", "wo"):
                par(f"{pre}.attn.{m}", (d, d), d ** -0.5)
            ones(f"{pre}.ln2.g", (d,)); zeros(f"{pre}.ln2.b", (d,))
            par(f"{pre}.ff.w1", (d, cfg.ff_mult * d), d ** -0.5)
            zeros(f"{pre}.ff.b1", (cfg.ff_mult * d,))
            par(f"{pre}.ff.w2", (cfg.ff_mult * d, d), (cfg.ff_mult * d) ** -0.5)
            zeros(f"{pre}.ff.b2", (d,))
            if i in cfg.cross_blocks():
                ones(f"{pre}.lnc.g", (d,)); zeros(f"{pre}.lnc.b", (d,))
                for m in ("wq", "wk", "wv"):
                    par(f"{pre}.cross.{m}", (d, d), d ** -0.5)
                par(f"{pre}.cross.ff.w", (d, d), d ** -0.5)
                zeros(f"{pre}.cross.ff.b", (d,))
        ones("denoise.lnf.g", (d,)); zeros("denoise.lnf.b", (d,))
        par("denoise.out.w", (d, p), d ** -0.5)
        zeros("denoise.out.b", (p,))
        par("fuse.w", (cfg.text_dim + d, d), (cfg.text_dim + d) ** -0.5)
        zeros("fuse.b", (d,))
        par("uncond.p_u", (d,), 0.02)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- condition assembly -------------------------------------------------

    def prototype_context(self, weights: Tensor) -> Tensor:
        """Convex combination of bank rows over the positive weights; the
        all-masked fallback contributes a zero vector."""
        pos = nx.relu(weights)
        total = nx.mean_last(pos, keepdims=True) * float(self.config.n_prototypes)
        frac = nx.div(pos, total + 1e-8)
        return nx.matmul(frac, self._bank_const)

    def fused_condition(self, text_embs: Tensor, weights: Tensor) -> Tensor:
        ctx = self.prototype_context(weights)
        return fuse(text_embs, ctx, self.params["fuse.w"], self.params["fuse.b"])

    # -- denoiser ------------------------------------------------------------

    def forward(self, x_n: np.ndarray, n: np.ndarray,
                finite_mask: Tensor | None, exclude: np.ndarray | None,
                cond: Tensor) -> Tensor:
        """Predict the injected noise.  (B, L) -> (B, L)."""
        cfg = self.config
        B = x_n.shape[0]
        if x_n.shape != (B, cfg.length):
            raise nx.ShapeError(f"forward: expected (B, {cfg.length}), got {x_n.shape}")
        pm = self.params
        tokens = nx.reshape(Tensor(x_n, dtype=self.dtype), (B, cfg.tokens, cfg.patch))
        tokens = nx.add(nx.matmul(tokens, pm["denoise.in.w"]), pm["denoise.in.b"])
        emb = step_embedding(n, cfg.dim, dtype=self.dtype)[:, None, :]
        tokens = nx.add(tokens, Tensor(emb, dtype=self.dtype))
        tokens = nx.add(tokens, nx.expand_dims(cond, 1))
        scale = 1.0 / math.sqrt(cfg.dim)
        excl3 = exclude[:, None, :] if exclude is not None else None
        for i in range(1, cfg.blocks + 1):
            pre = f"denoise.b{i}"
            h = nx.layer_norm(tokens, pm[f"{pre}.ln1.g"], pm[f"{pre}.ln1.b"])
            q = nx.matmul(h, pm[f"{pre}.attn.wq"])
            k = nx.matmul(h, pm[f"{pre}.attn.wk"])
            v = nx.matmul(h, pm[f"{pre}.attn.wv"])
            scores = nx.matmul(q, nx.transpose_last(k)) * scale
            sa = nx.matmul(nx.softmax(scores), v)
            tokens = nx.add(tokens, nx.matmul(sa, pm[f"{pre}.attn.wo"]))
            if i in cfg.cross_blocks():
                hc = nx.layer_norm(tokens, pm[f"{pre}.lnc.g"], pm[f"{pre}.lnc.b"])
                cz = nx.add(hc, nx.expand_dims(cond, 1))
                qc = nx.matmul(cz, pm[f"{pre}.cross.wq"])
                kc = nx.matmul(self._bank_const, pm[f"{pre}.cross.wk"])
                vc = nx.matmul(self._bank_const, pm[f"{pre}.cross.wv"])
                scores = nx.matmul(qc, nx.transpose_last(kc)) * scale
                if finite_mask is not None:
                    scores = nx.add(scores, nx.expand_dims(finite_mask, 1))
                attn = nx.softmax(scores, exclude=excl3)
                z = nx.matmul(attn, vc)
                z = nx.silu(nx.add(nx.matmul(z, pm[f"{pre}.cross.ff.w"]),
                                   pm[f"{pre}.cross.ff.b"]))
                tokens = nx.add(tokens, z)
            h2 = nx.layer_norm(tokens, pm[f"{pre}.ln2.g"], pm[f"{pre}.ln2.b"])
            ff = nx.silu(nx.add(nx.matmul(h2, pm[f"{pre}.ff.w1"]), pm[f"{pre}.ff.b1"]))
            ff = nx.add(nx.matmul(ff, pm[f"{pre}.ff.w2"]), pm[f"{pre}.ff.b2"])
            tokens = nx.add(tokens, ff)
        out = nx.layer_norm(tokens, pm["denoise.lnf.g"], pm["denoise.lnf.b"])
        out = nx.add(nx.matmul(out, pm["denoise.out.w"]), pm["denoise.out.b"])
        return nx.reshape(out, (B, cfg.length))


def denoiser_forward(model: GenerationModel, x_n: np.ndarray, n: int,
                     mask: PrototypeMask | None,
                     text_emb: np.ndarray | None) -> np.ndarray:
    """Single-window convenience wrapper around the batched forward pass."""
    cfg = model.config
    if mask is not None and text_emb is not None:
        finite = Tensor(mask.finite_values[None, :], dtype=model.dtype)
        exclude = mask.excluded[None, :]
        cond = model.fused_condition(Tensor(text_emb[None, :], dtype=model.dtype),
                                     Tensor(mask.finite_values[None, :], dtype=model.dtype))
    else:
        finite, exclude = None, None
        cond = nx.reshape(model.params["uncond.p_u"], (1, cfg.dim))
    out = model.forward(x_n[None, :].astype(model.dtype), np.array([n]),
                        finite, exclude, cond)
    return out.data[0]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainHistory:
    losses: list[float] = field(default_factory=list)

    def moving_average(self, span: int = 50) -> list[float]:
        out = []
        for i in range(len(self.losses)):
            lo = max(0, i - span + 1)
            out.append(float(np.mean(self.losses[lo:i + 1])))
        return out


def encode_texts(texts: list[str], encoder: TextEncoder) -> np.ndarray:
    return np.stack([encoder.encode(t).vector for t in texts]).astype(np.float32)


def train_step(model: GenerationModel, x0: np.ndarray, text_embs: np.ndarray,
               opt: OptimizerState, tconf: TrainConfig,
               gen: np.random.Generator) -> float:
    """One optimization step over a batch of (window, text-embedding) rows."""
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    cfg = model.config
    B = x0.shape[0]
    n = gen.integers(1, cfg.schedule_steps + 1, size=B)
    eps = nx.gaussian_array(gen, (B, cfg.length), dtype=model.dtype)
    x_n = corrupt(x0.astype(model.dtype), n, eps, model.schedule)
    drop = (gen.random(B) < tconf.uncond_drop_prob).astype(model.dtype)[:, None]

    with GradTape() as tape:
        w = model.assign_net.assign(Tensor(x0, dtype=model.dtype),
                                    Tensor(text_embs, dtype=model.dtype))
        keep_mult, exclude = mask_components(w.data)
        # a dropped sample sees the unconditional identifier and a neutral mask
        finite_mask = w * Tensor(keep_mult * (1.0 - drop), dtype=model.dtype)
        exclude = exclude & (drop[:, 0] == 0.0)[:, None]
        fused = model.fused_condition(Tensor(text_embs, dtype=model.dtype), w)
        keep_cond = Tensor(1.0 - drop, dtype=model.dtype)
        cond = fused * keep_cond + model.params["uncond.p_u"] * Tensor(drop, dtype=model.dtype)
        eps_hat = model.forward(x_n, n, finite_mask, exclude, cond)
        loss = nx.mean_all(nx.square(eps_hat - Tensor(eps, dtype=model.dtype)))

    loss_val = loss.item()
    if not math.isfinite(loss_val):
        grad_norm = float("nan")
        raise NumericAbort(
            f"non-finite loss at optimizer step {opt.step + 1} "
            f"(lr={opt.effective_lr():.3e}, grad_norm={grad_norm})")
    grads = tape.gradients(loss)
    named = grads.of(model.params)
    total = math.fsum(float(np.sum(g.astype(np.float64) ** 2)) for g in named.values())
    grad_norm = math.sqrt(total)
    if not math.isfinite(grad_norm):
        bad = [k for k, g in named.items() if not np.isfinite(g).all()]
        raise NumericAbort(
            f"non-finite gradient at step {opt.step + 1} in {bad[:3]} "
            f"(lr={opt.effective_lr():.3e})")
    nx.optimizer_step(model.params, named, opt)
    return loss_val


def train(model: GenerationModel, windows: np.ndarray, texts: list[str],
          tconf: TrainConfig, encoder: TextEncoder | None = None,
          opt: OptimizerState | None = None,
          history: TrainHistory | None = None) -> tuple[TrainHistory, OptimizerState]:
    """Full training loop over (window, text) pairs.

    ``windows`` is (M, L) in the normalized domain; ``texts`` align by row.
    Resuming continues from the optimizer state's step counter.
    """
    cfg = model.config
    windows = np.asarray(windows, dtype=model.dtype)
    if windows.ndim != 2 or windows.shape[1] != cfg.length:
        raise ValueError(f"windows must be (M, {cfg.length}), got {windows.shape}")
    if len(texts) != windows.shape[0]:
        raise ValueError("texts and windows must align")
    encoder = encoder or HashingTextEncoder(cfg.text_dim)
    embs = encode_texts(texts, encoder)
    opt = opt or OptimizerState(lr=tconf.lr, warmup=tconf.warmup)
    history = history or TrainHistory()
    start = opt.step
    gen = nx.rng_for(tconf.seed, 0x7EA1, start)
    m = windows.shape[0]
    for step in range(start, tconf.steps):
        idx = gen.integers(0, m, size=min(tconf.batch_size, m))
        loss = train_step(model, windows[idx], embs[idx], opt, tconf, gen)
        history.losses.append(loss)
        if tconf.log_every and (step + 1) % tconf.log_every == 0:
            log.info("step %d/%d loss %.4f", step + 1, tconf.steps, loss)
    return history, opt


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def reverse_loop(predict_fn, schedule: NoiseSchedule, length: int, num: int,
                 seed: int, mode: str = "ddpm",
                 x_init: np.ndarray | None = None) -> np.ndarray:
    """Run the reverse process from seeded Gaussian noise.

    ``predict_fn(x, n) -> eps_hat`` receives the whole (num, length) batch
    and the scalar 1-based step.  Each draw owns an RNG stream derived from
    (seed, draw index), so draws are independent of batch size.
    """
    if mode not in SAMPLE_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {SAMPLE_MODES}")
    gens = [nx.rng_for(seed, i) for i in range(num)]
    if x_init is None:
        x = np.stack([nx.gaussian_array(g, (length,)) for g in gens])
    else:
        x = np.asarray(x_init, dtype=np.float32).copy()
    N = schedule.n_steps
    for n in range(N, 0, -1):
        eps_hat = predict_fn(x, n)
        a_n, ab_n, b_n = schedule.a(n), schedule.ab(n), schedule.b(n)
        ab_prev = schedule.ab(n - 1)
        if mode == "paper_literal":
            x = (x - math.sqrt(1.0 - ab_n) * eps_hat) / math.sqrt(a_n)
        elif mode == "ddpm":
            mean = (x - (b_n / math.sqrt(1.0 - ab_n)) * eps_hat) / math.sqrt(a_n)
            if n > 1:
                sigma = math.sqrt(b_n * (1.0 - ab_prev) / (1.0 - ab_n))
                z = np.stack([nx.gaussian_array(g, (length,)) for g in gens])
                x = mean + sigma * z
            else:
                x = mean
        else:  # ddim
            x0_pred = (x - math.sqrt(1.0 - ab_n) * eps_hat) / math.sqrt(ab_n)
            x = math.sqrt(ab_prev) * x0_pred + math.sqrt(1.0 - ab_prev) * eps_hat
        if not np.isfinite(x).all():
            raise NumericAbort(f"non-finite sample values at reverse step {n}")
    return x.astype(np.float32)


def sample(model: GenerationModel, *, num: int = 1, seed: int = 0,
           mode: str = "ddpm", text: str | None = None,
           weights: np.ndarray | None = None,
           encoder: TextEncoder | None = None,
           guidance_scale: float = 1.0) -> np.ndarray:
    """Generate windows.

    Conditioning: ``weights`` is a prototype-weight vector (from the
    assignment net or few-shot extraction) and ``text`` a description; both
    are optional.  With neither, generation runs through the learned
    unconditional identifier.  ``guidance_scale`` s != 1 blends the
    conditional and unconditional predictions as eps_u + s (eps_c - eps_u).
    """
    cfg = model.config
    encoder = encoder or HashingTextEncoder(cfg.text_dim)
    conditional = text is not None or weights is not None

    if conditional:
        if isinstance(weights, PrototypeMask):
            finite_row = weights.finite_values[None, :].astype(np.float32)
            exclude_row = weights.excluded[None, :]
        elif weights is not None:
            w = np.asarray(weights, dtype=np.float32)
            keep_mult, exclude_row = mask_components(w[None, :])
            finite_row = (w[None, :] * keep_mult).astype(np.float32)
        else:
            finite_row = np.zeros((1, cfg.n_prototypes), dtype=np.float32)
            exclude_row = np.zeros((1, cfg.n_prototypes), dtype=bool)
        temb = (encoder.encode(text).vector if text is not None
                else np.zeros(cfg.text_dim, dtype=np.float32))
        cond_row = model.fused_condition(
            Tensor(temb[None, :].astype(model.dtype), dtype=model.dtype),
            Tensor(finite_row, dtype=model.dtype)).data
    p_u = model.params["uncond.p_u"].data[None, :]

    def predict(x: np.ndarray, n: int) -> np.ndarray:
        B = x.shape[0]
        nv = np.full(B, n)
        if not conditional:
            cond = Tensor(np.repeat(p_u, B, axis=0), dtype=model.dtype)
            return model.forward(x, nv, None, None, cond).data
        cond = Tensor(np.repeat(cond_row, B, axis=0), dtype=model.dtype)
        fin = Tensor(np.repeat(finite_row, B, axis=0), dtype=model.dtype)
        excl = np.repeat(exclude_row, B, axis=0)
        eps_c = model.forward(x, nv, fin, excl, cond).data
        if guidance_scale == 1.0:
            return eps_c
        cond_u = Tensor(np.repeat(p_u, B, axis=0), dtype=model.dtype)
        eps_u = model.forward(x, nv, None, None, cond_u).data
        return eps_u + guidance_scale * (eps_c - eps_u)

    return reverse_loop(predict, model.schedule, cfg.length, num, seed, mode)
