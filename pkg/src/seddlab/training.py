"""Objectives and the training loop.

The denoising score-entropy loss comes in two modes: "train" is the
displayed form sum w * (s - r log s); "bound" adds the score-free
normalizer K(r) = r log r - r, which moves the pointwise minimum to zero
so the time integral upper-bounds negative log-likelihood. K is constant
in the parameters, so both modes share gradients.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from seddlab import engine as E
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Corpus, Vocab, batch_stream, build_vocab
from .noise import (
    NoiseKernel,
    Schedule,
    T_FLOOR,
    make_schedule,
    ratio_table,
    sample_marginal,
    weight_table,
)


class TrainingError(RuntimeError):
    pass


def _xlogx(r: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    pos = r > 0
    out[pos] = r[pos] * np.log(r[pos])
    return out


@dataclass
class DseBatchLoss:
    loss: E.Tensor            # scalar, nats per token (engine node for backprop)
    per_sequence: np.ndarray  # (B,) nats per token, including K in bound mode
    weighted_positions: int   # positions with any nonzero loss weight

    @property
    def value(self) -> float:
        return float(self.loss.data)


def dse_loss(score_field: E.Tensor, x0: np.ndarray, x_t: np.ndarray, sigma_bar,
             sigma_t, kernel: NoiseKernel, mode: str = "train",
             sequence_weights: np.ndarray | None = None,
             position_mask: np.ndarray | None = None) -> DseBatchLoss:
    """Score-entropy loss over a corrupted batch, normalized to nats per token.

    score_field: positive (B, L, N); x0/x_t: (B, L) int; sigma_bar/sigma_t:
    scalar or (B,). sequence_weights reweight rows (for exact-expectation
    training); position_mask zeroes the loss at masked-out positions (for
    conditional bounds on continuations).
    """
    if mode not in ("train", "bound"):
        raise ValueError(f"unknown dse mode {mode!r}")
    x0 = np.atleast_2d(np.asarray(x0))
    x_t = np.atleast_2d(np.asarray(x_t))
    if score_field.data.ndim == 2:
        score_field = E.reshape(score_field, (1,) + score_field.shape)
    b, length, n = score_field.shape
    if x0.shape != (b, length) or x_t.shape != (b, length) or n != kernel.n:
        raise ValueError(
            f"dse_loss: shapes disagree (field {score_field.shape}, x0 {x0.shape}, "
            f"x_t {x_t.shape}, kernel N={kernel.n})")
    sigma_bar = np.broadcast_to(np.asarray(sigma_bar, dtype=np.float64), (b,))
    sigma_t = np.broadcast_to(np.asarray(sigma_t, dtype=np.float64), (b,))
    if np.any(sigma_t <= 0):
        raise ValueError("sigma_t must be positive")

    w = weight_table(kernel, sigma_t, x_t)
    if position_mask is not None:
        w = w * np.asarray(position_mask, dtype=np.float64)[..., None]
    r = ratio_table(kernel, sigma_bar, x0, x_t)

    if sequence_weights is None:
        seq_w = np.ones(b)
    else:
        seq_w = np.asarray(sequence_weights, dtype=np.float64)
        if seq_w.shape != (b,):
            raise ValueError(f"sequence_weights must have shape ({b},)")
    norm = length * seq_w.sum()
    w_eff = w * (seq_w[:, None, None] / norm)

    k_term = _xlogx(r) - r if mode == "bound" else np.zeros_like(r)

    dt = score_field.dtype
    term_s = E.tsum(E.mul_const(score_field, w_eff.astype(dt)))
    term_log = E.tsum(E.mul_const(E.log(score_field), (w_eff * r).astype(dt)))
    loss = E.sub(term_s, term_log)
    if mode == "bound":
        loss = E.add_const(loss, np.asarray((w_eff * k_term).sum(), dtype=dt))

    s_data = score_field.data.astype(np.float64)
    log_s = np.log(np.maximum(s_data, 1e-30))
    pointwise = w * (s_data - r * log_s + k_term)
    per_sequence = pointwise.sum(axis=(1, 2)) / length
    weighted_positions = int((w.sum(axis=-1) > 0).sum())
    return DseBatchLoss(loss=loss, per_sequence=per_sequence,
                        weighted_positions=weighted_positions)


def ce_loss(ar_logits: E.Tensor, targets: np.ndarray) -> E.Tensor:
    """Mean negative log-softmax at the target ids, in nats per token."""
    targets = np.asarray(targets)
    if ar_logits.shape[:-1] != targets.shape:
        raise ValueError(
            f"ce_loss: logits {ar_logits.shape} do not match targets {targets.shape}")
    picked = E.take_last(E.log_softmax(ar_logits), targets)
    return E.scale(E.tmean(picked), -1.0)


@dataclass
class NelboResult:
    nats_per_token: np.ndarray  # (M,) one bound per input sequence
    stderr: np.ndarray          # (M,)
    n_time_samples: int

    def single(self) -> tuple[float, float]:
        return float(self.nats_per_token[0]), float(self.stderr[0])


def nelbo_per_token(model, sequences: np.ndarray, kernel: NoiseKernel,
                    schedule: Schedule, n_time_samples: int = 64,
                    n_noise_samples: int = 4, seed: int = 0,
                    t_floor: float = T_FLOOR,
                    position_mask: np.ndarray | None = None) -> NelboResult:
    """Monte Carlo likelihood bound: stratified t, fresh corruption per stratum.

    sequences: (M, L) or (L,). position_mask (M, L) restricts both the
    corruption and the loss to the selected positions (prompt tokens stay
    clean and contribute nothing).
    """
    if n_time_samples < 1:
        raise ValueError("n_time_samples must be >= 1")
    sequences = np.atleast_2d(np.asarray(sequences))
    m, length = sequences.shape
    rng = np.random.default_rng(seed)
    k = n_time_samples
    samples = np.empty((k, m))
    mask = None if position_mask is None else np.asarray(position_mask, dtype=bool)
    for stratum in range(k):
        t = t_floor + (stratum + rng.random()) / k * (1.0 - t_floor)
        sig_bar = float(schedule.total(t))
        sig_t = float(schedule.rate(t))
        x0_rep = np.repeat(sequences, n_noise_samples, axis=0)
        x_t = sample_marginal(kernel, np.full(x0_rep.shape[0], sig_bar), x0_rep, rng)
        pm = None
        if mask is not None:
            pm = np.repeat(mask, n_noise_samples, axis=0)
            x_t = np.where(pm, x_t, x0_rep)
        field = E.Tensor(model.score_array(x_t, sig_bar), dtype=np.float64)
        batch = dse_loss(field, x0_rep, x_t, sig_bar, sig_t, kernel, mode="bound",
                         position_mask=pm)
        samples[stratum] = batch.per_sequence.reshape(m, n_noise_samples).mean(axis=1)
    width = 1.0 - t_floor
    nats = width * samples.mean(axis=0)
    if k > 1:
        stderr = width * samples.std(axis=0, ddof=1) / np.sqrt(k)
    else:
        stderr = np.full(m, np.inf)
    return NelboResult(nats_per_token=nats, stderr=stderr, n_time_samples=k)


def perplexity_aggregate(per_sequence_nll, order: str = "mean_exp") -> float:
    """Dataset perplexity from per-token nats: exp(mean(A)) or mean(exp(A))."""
    values = np.asarray(per_sequence_nll, dtype=np.float64)
    if values.size == 0:
        raise ValueError("perplexity_aggregate: empty input")
    if order == "mean_exp":
        return float(np.exp(values.mean()))
    if order == "exp_mean":
        return float(np.exp(values).mean())
    raise ValueError(f"unknown aggregation order {order!r}")


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    objective: str = "diffusion"        # "diffusion" or "ar"
    kernel: str = "absorb"              # diffusion only
    schedule: str = "loglinear"
    layers: int = 4
    heads: int = 4
    dim: int = 128
    context: int = 256
    time_dim: int = 64
    batch_size: int = 16
    steps: int = 200
    lr: float = 3e-4
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    eval_cadence: int = 0               # 0: checkpoint only at the end
    n_time_samples: int = 64
    n_noise_samples: int = 4

    def __post_init__(self):
        if self.objective not in ("diffusion", "ar"):
            raise ValueError(f"unknown objective {self.objective!r}")
        for name in ("layers", "heads", "dim", "context", "batch_size", "steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0:
            raise ValueError("lr must be positive")


@dataclass
class TrainResult:
    checkpoint_path: Path
    losses: list[float]
    metrics: list[dict]
    vocab: Vocab


def _build_model(config: TrainConfig, vocab: Vocab, seed: int):
    from .models import ARTransformer, ScoreTransformer, ar_spec, score_spec

    if config.objective == "diffusion":
        spec = score_spec(vocab.n, mask_id=vocab.mask_id, layers=config.layers,
                          heads=config.heads, dim=config.dim, context=config.context,
                          time_dim=config.time_dim)
        return ScoreTransformer(spec, seed=seed)
    spec = ar_spec(vocab.n, layers=config.layers, heads=config.heads, dim=config.dim,
                   context=config.context)
    return ARTransformer(spec, seed=seed)


def train(config: TrainConfig, corpus: Corpus, out_dir: str | Path,
          resume_from: str | Path | None = None) -> TrainResult:
    """Train either objective; writes checkpoints and a line-JSON training log."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kernel_kind = config.kernel if config.objective == "diffusion" else "uniform"
    vocab = build_vocab(corpus, kernel_kind)
    kernel = NoiseKernel(config.kernel, vocab.n) if config.objective == "diffusion" else None
    schedule = make_schedule(config.schedule) if config.objective == "diffusion" else None

    model = _build_model(config, vocab, seed=config.seed)
    params = model.param_list()
    names = model.param_names()
    state = E.OptimState(params, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed + 1)
    start_step = 0

    if resume_from is not None:
        meta, arrays = load_checkpoint(resume_from)
        model.load_arrays(arrays)
        state.load_state_arrays([arrays[f"opt.m.{n}"] for n in names]
                                + [arrays[f"opt.v.{n}"] for n in names],
                                step_count=meta["step"])
        rng.bit_generator.state = meta["rng_state"]
        start_step = meta["step"]

    window = config.context + 1 if config.objective == "ar" else config.context
    stream = batch_stream(corpus, vocab, window, config.batch_size,
                          seed=config.seed, split="train")
    for _ in range(start_step):
        next(stream)

    losses: list[float] = []
    metrics: list[dict] = []
    log_path = out_dir / "train_log.jsonl"
    log_file = open(log_path, "a" if resume_from else "w")

    def write_ckpt(path: Path, step: int) -> None:
        arrays = {n: p.data for n, p in zip(names, params)}
        arrays.update({f"opt.m.{n}": m for n, m in zip(names, state.m)})
        arrays.update({f"opt.v.{n}": v for n, v in zip(names, state.v)})
        meta = {
            "model": model.spec.to_dict(),
            "vocab": vocab.to_json(),
            "config": asdict(config),
            "step": step,
            "rng_state": rng.bit_generator.state,
        }
        save_checkpoint(path, meta, arrays)

    final_path = out_dir / "checkpoint.bin"
    try:
        for step in range(start_step, config.steps):
            tic = time.perf_counter()
            batch = next(stream)
            with E.record() as tape:
                if config.objective == "diffusion":
                    t = T_FLOOR + (1.0 - T_FLOOR) * rng.random(config.batch_size)
                    sig_bar = schedule.total(t)
                    sig_t = schedule.rate(t)
                    x_t = sample_marginal(kernel, sig_bar, batch, rng)
                    field = model.score_forward(x_t, sig_bar)
                    loss = dse_loss(field, batch, x_t, sig_bar, sig_t, kernel).loss
                else:
                    logits = model.ar_forward(batch[:, :-1])
                    loss = ce_loss(logits, batch[:, 1:])
            loss_val = float(loss.data)
            grads = tape.backward(loss, params=params)
            grads, grad_norm = E.clip_global_norm(grads, config.grad_clip)
            if not np.isfinite(loss_val) or not np.isfinite(grad_norm):
                raise TrainingError(
                    f"non-finite loss at step {step}: loss={loss_val}, "
                    f"lr={config.lr}, grad_norm={grad_norm}")
            E.optimizer_step(params, grads, state)
            losses.append(loss_val)
            wall_ms = (time.perf_counter() - tic) * 1000.0
            log_file.write(json.dumps({"step": step, "loss": loss_val,
                                       "grad_norm": grad_norm, "wall_ms": wall_ms}) + "\n")
            if config.eval_cadence and (step + 1) % config.eval_cadence == 0:
                write_ckpt(out_dir / f"checkpoint_step{step + 1}.bin", step + 1)
                metrics.append({"step": step + 1, "train_loss": loss_val})
        write_ckpt(final_path, config.steps)
    finally:
        log_file.close()
    return TrainResult(checkpoint_path=final_path, losses=losses, metrics=metrics,
                       vocab=vocab)


def load_model(path: str | Path):
    """Rebuild a model (score or AR) from a checkpoint."""
    from .models import ARTransformer, ScoreTransformer
    from .models.descriptor import TransformerSpec

    meta, arrays = load_checkpoint(path)
    spec = TransformerSpec.from_dict(meta["model"])
    cls = ScoreTransformer if spec.kind == "score" else ARTransformer
    model = cls(spec, seed=0)
    model.load_arrays(arrays)
    vocab = Vocab.from_json(meta["vocab"])
    return model, vocab, meta
