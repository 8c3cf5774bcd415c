"""Transformer score estimator and causal autoregressive baseline.

The score model follows the diffusion-transformer recipe: bidirectional
attention with rotary positions, and the noise level entering through
sinusoidal features of log(sigma_bar) that an MLP turns into per-block
layer-norm scale/shift. The AR baseline is a pre-LN causal transformer with
learned absolute positions and an incremental KV-cached decode path.
"""

from __future__ import annotations

import numpy as np

from seddlab import engine as E
from .descriptor import TransformerSpec


class ModelError(ValueError):
    pass


class Counters:
    """Instrumentation shared by both models: pass counts and attention work."""

    def __init__(self):
        self.reset()

    def reset(self):
        self.forward_passes = 0
        self.attn_key_visits = 0
        self.masked_fraction = None

    def snapshot(self) -> dict:
        return {"forward_passes": self.forward_passes,
                "attn_key_visits": self.attn_key_visits,
                "masked_fraction": self.masked_fraction}


def _rope_tables(length: int, head_dim: int, dtype) -> tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    freqs = 10000.0 ** (-np.arange(half) / half)
    angles = np.arange(length)[:, None] * freqs[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _time_features(log_sigma: np.ndarray, width: int, dtype) -> np.ndarray:
    """Sinusoidal features of log(sigma_bar), shape (B, width)."""
    half = width // 2
    freqs = np.exp(np.linspace(np.log(0.1), np.log(2.0), half))
    angles = log_sigma[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1).astype(dtype)


class _TransformerBase:
    def __init__(self, spec: TransformerSpec, seed: int = 0, dtype=np.float32):
        self.spec = spec
        self.dtype = dtype
        self.counters = Counters()
        self.params: dict[str, E.Tensor] = {}
        self._rng = np.random.default_rng(seed)
        self._build()

    def _p(self, name: str, shape: tuple[int, ...], std: float | None = 0.02) -> E.Tensor:
        if std is None:
            data = np.zeros(shape)
        else:
            data = self._rng.normal(0.0, std, size=shape)
        t = E.parameter(data, dtype=self.dtype)
        self.params[name] = t
        return t

    def param_list(self) -> list[E.Tensor]:
        return list(self.params.values())

    def param_names(self) -> list[str]:
        return list(self.params.keys())

    def param_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def load_arrays(self, named: dict[str, np.ndarray]) -> None:
        for name, tensor in self.params.items():
            arr = named[name]
            if arr.shape != tensor.data.shape:
                raise ModelError(f"param {name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.astype(self.dtype, copy=True)

    def _check_tokens(self, tokens: np.ndarray) -> np.ndarray:
        tokens = np.asarray(tokens)
        squeeze = tokens.ndim == 1
        if squeeze:
            tokens = tokens[None, :]
        if tokens.ndim != 2:
            raise ModelError(f"tokens must be 1-D or 2-D, got shape {tokens.shape}")
        if tokens.shape[1] > self.spec.context:
            raise ModelError(
                f"sequence length {tokens.shape[1]} exceeds context {self.spec.context}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.spec.vocab_size):
            raise ModelError(f"token id out of range for vocab {self.spec.vocab_size}")
        return tokens, squeeze

    def _attention(self, x: E.Tensor, prefix: str, causal: bool, rope_tabs=None) -> E.Tensor:
        s = self.spec
        b, length, _ = x.shape
        dh = s.dim // s.heads
        q = E.matmul(x, self.params[f"{prefix}.wq"])
        k = E.matmul(x, self.params[f"{prefix}.wk"])
        v = E.matmul(x, self.params[f"{prefix}.wv"])

        def heads(t):
            t = E.reshape(t, (b, length, s.heads, dh))
            return E.transpose(t, (0, 2, 1, 3))

        q, k, v = heads(q), heads(k), heads(v)
        if rope_tabs is not None:
            cos, sin = rope_tabs
            q = E.rope(q, cos, sin)
            k = E.rope(k, cos, sin)
        scores = E.scale(E.matmul(q, E.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        if causal:
            mask = np.triu(np.ones((length, length), dtype=bool), k=1)
            scores = E.masked_fill(scores, mask, -1e9)
            self.counters.attn_key_visits += b * s.heads * (length * (length + 1)) // 2
        else:
            self.counters.attn_key_visits += b * s.heads * length * length
        att = E.softmax(scores)
        out = E.matmul(att, v)
        out = E.reshape(E.transpose(out, (0, 2, 1, 3)), (b, length, s.dim))
        return E.matmul(out, self.params[f"{prefix}.wo"])

    def _mlp(self, x: E.Tensor, prefix: str) -> E.Tensor:
        h = E.gelu(E.add(E.matmul(x, self.params[f"{prefix}.w1"]), self.params[f"{prefix}.b1"]))
        return E.add(E.matmul(h, self.params[f"{prefix}.w2"]), self.params[f"{prefix}.b2"])


class ScoreTransformer(_TransformerBase):
    """Estimates the concrete score as exp(logits); attention is non-causal."""

    def _build(self):
        s = self.spec
        hidden = s.mlp_mult * s.dim
        self._p("tok_emb", (s.vocab_size, s.dim))
        self._p("time.w1", (s.time_dim, s.time_dim))
        self._p("time.b1", (s.time_dim,), std=None)
        self._p("time.w2", (s.time_dim, s.time_dim))
        self._p("time.b2", (s.time_dim,), std=None)
        for i in range(s.layers):
            pre = f"l{i}"
            self._p(f"{pre}.wq", (s.dim, s.dim))
            self._p(f"{pre}.wk", (s.dim, s.dim))
            self._p(f"{pre}.wv", (s.dim, s.dim))
            self._p(f"{pre}.wo", (s.dim, s.dim))
            self._p(f"{pre}.w1", (s.dim, hidden))
            self._p(f"{pre}.b1", (hidden,), std=None)
            self._p(f"{pre}.w2", (hidden, s.dim))
            self._p(f"{pre}.b2", (s.dim,), std=None)
            # zero-init conditioning heads: identity modulation at start
            for site in ("attn", "mlp"):
                self._p(f"{pre}.ada_{site}.scale", (s.time_dim, s.dim), std=None)
                self._p(f"{pre}.ada_{site}.shift", (s.time_dim, s.dim), std=None)
        self._p("final.ada.scale", (s.time_dim, s.dim), std=None)
        self._p("final.ada.shift", (s.time_dim, s.dim), std=None)
        self._p("head.w", (s.dim, s.vocab_size), std=None)
        self._p("head.b", (s.vocab_size,), std=None)

    def _condition(self, sigma_bar: np.ndarray, batch: int) -> E.Tensor:
        sig = np.broadcast_to(np.asarray(sigma_bar, dtype=np.float64), (batch,))
        if np.any(sig < 0):
            raise ModelError("sigma_bar must be nonnegative")
        feats = _time_features(np.log(np.maximum(sig, 1e-12)), self.spec.time_dim, self.dtype)
        h = E.gelu(E.add(E.matmul(E.Tensor(feats, dtype=self.dtype), self.params["time.w1"]),
                         self.params["time.b1"]))
        return E.gelu(E.add(E.matmul(h, self.params["time.w2"]), self.params["time.b2"]))

    def _modulated(self, x: E.Tensor, cond: E.Tensor, site: str) -> E.Tensor:
        scale = E.matmul(cond, self.params[f"{site}.scale"])
        shift = E.matmul(cond, self.params[f"{site}.shift"])
        return E.modulate(E.layer_norm(x), scale, shift)

    def score_logits(self, tokens, sigma_bar) -> E.Tensor:
        tokens, squeeze = self._check_tokens(tokens)
        b, length = tokens.shape
        s = self.spec
        self.counters.forward_passes += 1
        if s.mask_id is not None:
            self.counters.masked_fraction = float((tokens == s.mask_id).mean())
        cond = self._condition(sigma_bar, b)
        rope_tabs = _rope_tables(length, s.dim // s.heads, self.dtype) if s.rope else None
        x = E.embedding(self.params["tok_emb"], tokens)
        for i in range(s.layers):
            h = self._modulated(x, cond, f"l{i}.ada_attn")
            x = E.add(x, self._attention(h, f"l{i}", causal=False, rope_tabs=rope_tabs))
            h = self._modulated(x, cond, f"l{i}.ada_mlp")
            x = E.add(x, self._mlp(h, f"l{i}"))
        x = self._modulated(x, cond, "final.ada")
        logits = E.add(E.matmul(x, self.params["head.w"]), self.params["head.b"])
        if squeeze:
            logits = E.reshape(logits, (length, s.vocab_size))
        return logits

    def score_forward(self, tokens, sigma_bar) -> E.Tensor:
        """Positive score field exp(logits), shape (B, L, N) (or (L, N) for 1-D input)."""
        return E.exp(self.score_logits(tokens, sigma_bar))

    def score_array(self, tokens, sigma_bar) -> np.ndarray:
        """Inference-only score field as a plain array (no tape)."""
        with E.no_grad():
            return self.score_forward(tokens, sigma_bar).data


class ARTransformer(_TransformerBase):
    """Causal next-token model with learned absolute positions and a KV cache."""

    def _build(self):
        s = self.spec
        hidden = s.mlp_mult * s.dim
        self._p("tok_emb", (s.vocab_size, s.dim))
        self._p("pos_emb", (s.context, s.dim))
        for i in range(s.layers):
            pre = f"l{i}"
            self._p(f"{pre}.wq", (s.dim, s.dim))
            self._p(f"{pre}.wk", (s.dim, s.dim))
            self._p(f"{pre}.wv", (s.dim, s.dim))
            self._p(f"{pre}.wo", (s.dim, s.dim))
            self._p(f"{pre}.w1", (s.dim, hidden))
            self._p(f"{pre}.b1", (hidden,), std=None)
            self._p(f"{pre}.w2", (hidden, s.dim))
            self._p(f"{pre}.b2", (s.dim,), std=None)
            for site in ("ln1", "ln2"):
                self._p(f"{pre}.{site}.gamma", (s.dim,), std=None)
                self._p(f"{pre}.{site}.beta", (s.dim,), std=None)
        self._p("final.ln.gamma", (s.dim,), std=None)
        self._p("final.ln.beta", (s.dim,), std=None)
        self._p("head.w", (s.dim, s.vocab_size), std=None)
        self._p("head.b", (s.vocab_size,), std=None)
        # affine layer norms start as identity
        for name, t in self.params.items():
            if name.endswith(".gamma"):
                t.data = np.ones_like(t.data)

    def _ln(self, x: E.Tensor, site: str) -> E.Tensor:
        normed = E.layer_norm(x)
        return E.add(E.mul(normed, self.params[f"{site}.gamma"]), self.params[f"{site}.beta"])

    def ar_forward(self, tokens) -> E.Tensor:
        """Next-token logits, position j attending to tokens <= j only."""
        tokens, squeeze = self._check_tokens(tokens)
        b, length = tokens.shape
        s = self.spec
        self.counters.forward_passes += 1
        x = E.embedding(self.params["tok_emb"], tokens)
        x = E.add(x, _slice_rows(self.params["pos_emb"], length))
        for i in range(s.layers):
            x = E.add(x, self._attention(self._ln(x, f"l{i}.ln1"), f"l{i}", causal=True))
            x = E.add(x, self._mlp(self._ln(x, f"l{i}.ln2"), f"l{i}"))
        x = self._ln(x, "final.ln")
        logits = E.add(E.matmul(x, self.params["head.w"]), self.params["head.b"])
        if squeeze:
            logits = E.reshape(logits, (length, s.vocab_size))
        return logits

    def logits_array(self, tokens) -> np.ndarray:
        with E.no_grad():
            return self.ar_forward(tokens).data

    # ---- incremental decoding ------------------------------------------------

    def make_cache(self) -> "KVCache":
        return KVCache(self.spec, self.dtype)

    def decode_step(self, cache: "KVCache", token: int) -> np.ndarray:
        """Append one token; returns next-token logits over N.

        Pure-numpy fast path; must agree with ar_forward on the same prefix
        (the tests pin this at 1e-5).
        """
        s = self.spec
        if cache.length >= s.context:
            raise ModelError(f"KV cache full at context length {s.context}")
        if not 0 <= token < s.vocab_size:
            raise ModelError(f"token id {token} out of range")
        self.counters.forward_passes += 1
        pos = cache.length
        p = {k: t.data for k, t in self.params.items()}
        x = p["tok_emb"][token] + p["pos_emb"][pos]
        dh = s.dim // s.heads
        for i in range(s.layers):
            h = _ln_vec(x, p[f"l{i}.ln1.gamma"], p[f"l{i}.ln1.beta"])
            q = (h @ p[f"l{i}.wq"]).reshape(s.heads, dh)
            k_new = (h @ p[f"l{i}.wk"]).reshape(s.heads, dh)
            v_new = (h @ p[f"l{i}.wv"]).reshape(s.heads, dh)
            cache.k[i][pos] = k_new
            cache.v[i][pos] = v_new
            keys = cache.k[i][: pos + 1]      # (pos+1, H, dh)
            values = cache.v[i][: pos + 1]
            self.counters.attn_key_visits += s.heads * (pos + 1)
            scores = np.einsum("hd,phd->hp", q, keys) / np.sqrt(dh)
            scores -= scores.max(axis=1, keepdims=True)
            att = np.exp(scores)
            att /= att.sum(axis=1, keepdims=True)
            ctx = np.einsum("hp,phd->hd", att, values).reshape(s.dim)
            x = x + ctx @ p[f"l{i}.wo"]
            h = _ln_vec(x, p[f"l{i}.ln2.gamma"], p[f"l{i}.ln2.beta"])
            inner = h @ p[f"l{i}.w1"] + p[f"l{i}.b1"]
            inner = _gelu_np(inner)
            x = x + inner @ p[f"l{i}.w2"] + p[f"l{i}.b2"]
        h = _ln_vec(x, p["final.ln.gamma"], p["final.ln.beta"])
        cache.length += 1
        return h @ p["head.w"] + p["head.b"]


class KVCache:
    """Preallocated per-layer key/value store for incremental decoding."""

    def __init__(self, spec: TransformerSpec, dtype):
        dh = spec.dim // spec.heads
        self.k = [np.zeros((spec.context, spec.heads, dh), dtype=dtype)
                  for _ in range(spec.layers)]
        self.v = [np.zeros((spec.context, spec.heads, dh), dtype=dtype)
                  for _ in range(spec.layers)]
        self.length = 0


def _slice_rows(t: E.Tensor, length: int) -> E.Tensor:
    """First `length` rows of a parameter matrix, with gradient routed back."""
    return E.embedding(t, np.arange(length))


def _ln_vec(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    mean = x.mean()
    var = ((x - mean) ** 2).mean()
    return (x - mean) / np.sqrt(var + eps) * gamma + beta


def _gelu_np(x: np.ndarray) -> np.ndarray:
    c = np.sqrt(2.0 / np.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))
