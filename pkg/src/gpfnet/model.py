"""Gated progressive fusion network over image and text embeddings.

Data flow for one sample::

    I  = W_img x_img + b                    (image projection)
    T  = W_txt mean(tokens) + b             (text projection)
    [I; T] += sinusoidal positions
    K_0 = T
    K_l = fusion_layer(I, K_{l-1})          l = 1..fusion_layers
    K_f = mean(encoder([I; K_f1]))          K_f1 = last K_l

Each fusion layer gates with ``z = sigmoid(W_z I + b_z)``, mixes
``K' = z*K + (1-z)*I``, layer-normalises the two-token sequence ``[I; K']``,
runs multi-head self-attention with a residual connection and a second
LayerNorm, and keeps the token in the ``K'`` slot.

All functions work on batches: vectors are ``(B, d)``, sequences ``(B, s, d)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ABLATION_MODES = ("baseline", "text_only", "image_only", "full")
LN_EPS = 1e-5


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 512
    img_dim: int = 2048
    txt_dim: int = 768
    fusion_layers: int = 4
    fusion_heads: int = 8
    encoder_layers: int = 4
    encoder_heads: int = 4
    num_identities: int = 2
    ablation_mode: str = "full"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "img_dim", "txt_dim", "fusion_heads", "encoder_heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.fusion_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by fusion_heads={self.fusion_heads}"
            )
        if self.d_model % self.encoder_heads:
            raise ConfigError(
                f"d_model={self.d_model} is not divisible by encoder_heads={self.encoder_heads}"
            )
        if self.fusion_layers < 1 or self.encoder_layers < 1:
            raise ConfigError("fusion_layers and encoder_layers must be >= 1")
        if self.num_identities < 2:
            raise ConfigError("num_identities must be >= 2")
        if self.ablation_mode not in ABLATION_MODES:
            raise ConfigError(
                f"ablation_mode must be one of {ABLATION_MODES}, got {self.ablation_mode!r}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FusedFeature:
    vector: np.ndarray  # K_f, (B, d_model)
    intermediate: np.ndarray | None  # K_f1, None in baseline mode


def positional_encoding(s: int, d_model: int) -> np.ndarray:
    """Fixed sinusoidal table of shape ``(s, d_model)``."""
    if s < 1:
        raise ValueError("sequence length must be >= 1")
    pos = np.arange(s, dtype=np.float64)[:, None]
    two_i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, two_i / d_model)
    pe = np.zeros((s, d_model))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return pe


def _xavier(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for ``x`` of shape ``(..., in)``; ``weight`` is ``(out, in)``."""
    if x.shape[-1] != weight.shape[1]:
        raise ad.ShapeError(f"linear: input width {x.shape[-1]} vs weight {weight.shape}")
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1])) if x.ndim != 2 else x
    y = ad.matmul_t(flat, weight)
    if bias is not None:
        y = ad.add_bias(y, bias)
    return ad.reshape(y, lead + (weight.shape[0],)) if x.ndim != 2 else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    return ad.layer_norm(x, gamma, beta, eps)


def gated_mix(z: Tensor, t_state: Tensor, image: Tensor) -> Tensor:
    """Elementwise ``z*t_state + (1-z)*image``."""
    if not (z.shape == t_state.shape == image.shape):
        raise ad.ShapeError(f"gated_mix: shapes {z.shape}, {t_state.shape}, {image.shape} differ")
    return z * t_state + (1.0 - z) * image


def multi_head_attention(
    seq: Tensor,
    heads: int,
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``seq`` of shape ``(B, s, d)``.

    With ``return_weights`` the ``(B, heads, s, s)`` attention matrix is
    returned alongside the output.
    """
    b, s, d = seq.shape
    if d % heads:
        raise ConfigError(f"width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (b, s, heads, dh)), (0, 2, 1, 3))

    q = split(linear(seq, wq))
    k = split(linear(seq, wk))
    v = split(linear(seq, wv))
    scores = ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    ctx = ad.matmul(weights, v)
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (b, s, d))
    out = linear(merged, wo)
    return (out, weights.data) if return_weights else out


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; weight matrices are ``(out, in)``."""
    d = config.d_model
    shapes: dict[str, tuple[int, ...]] = {}

    def dense(name, fan_out, fan_in, bias=True):
        shapes[f"{name}.weight"] = (fan_out, fan_in)
        if bias:
            shapes[f"{name}.bias"] = (fan_out,)

    def norm(name):
        shapes[f"{name}.gamma"] = (d,)
        shapes[f"{name}.beta"] = (d,)

    def attention(prefix):
        for w in ("q", "k", "v", "o"):
            dense(f"{prefix}.attn.{w}", d, d, bias=False)

    dense("img_proj", d, config.img_dim)
    dense("txt_proj", d, config.txt_dim)
    for layer in range(config.fusion_layers):
        pre = f"fusion.{layer}"
        dense(f"{pre}.gate", d, d)
        attention(pre)
        norm(f"{pre}.ln1")
        norm(f"{pre}.ln2")
    for layer in range(config.encoder_layers):
        pre = f"encoder.{layer}"
        attention(pre)
        dense(f"{pre}.ff1", 4 * d, d)
        dense(f"{pre}.ff2", d, 4 * d)
        norm(f"{pre}.ln1")
        norm(f"{pre}.ln2")
    dense("classifier", config.num_identities, d)
    return shapes


class GpfModel:
    """Parameter container plus the forward pass.

    Parameters live in an insertion-ordered ``params`` dict keyed by dotted
    names (``fusion.0.gate.weight`` etc.); weight matrices are stored
    ``(out, in)``.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self._pe = positional_encoding(2, config.d_model)

    @classmethod
    def init(cls, config: ModelConfig, seed: int | np.random.Generator = 0) -> GpfModel:
        """Xavier-uniform matrices, zero biases, unit LayerNorm gains.

        The classifier is the exception: N(0, 1e-3) weights keep the untrained
        logits near uniform.
        """
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config).items():
            if name == "classifier.weight":
                value = rng.normal(0.0, 1e-3, size=shape)
            elif name.endswith(".weight"):
                value = _xavier(rng, *shape)
            elif name.endswith(".gamma"):
                value = np.ones(shape)
            else:
                value = np.zeros(shape)
            params[name] = Tensor(value, requires_grad=True)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return int(np.sum([t.data.size for t in self.params.values()]))

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    # components --------------------------------------------------------------
    def project_image(self, x_img) -> Tensor:
        x = ad.as_tensor(np.atleast_2d(x_img) if not isinstance(x_img, Tensor) else x_img)
        if x.shape[-1] != self.config.img_dim:
            raise ad.ShapeError(
                f"image vector length {x.shape[-1]} != img_dim {self.config.img_dim}"
            )
        return linear(x, self["img_proj.weight"], self["img_proj.bias"])

    def project_text(self, tokens) -> Tensor:
        """Mean-pool each sample's ``(n, txt_dim)`` token matrix, then project.

        ``tokens`` is a single matrix, a list of matrices (one per sample,
        possibly different ``n``), or a ``(B, n, txt_dim)`` array.
        """
        pooled = pool_tokens(tokens, self.config.txt_dim)
        return linear(Tensor(pooled), self["txt_proj.weight"], self["txt_proj.bias"])

    def gate(self, image: Tensor, layer: int) -> Tensor:
        pre = f"fusion.{layer}.gate"
        return ad.sigmoid(linear(image, self[f"{pre}.weight"], self[f"{pre}.bias"]))

    def attention(self, seq: Tensor, prefix: str, heads: int, return_weights: bool = False):
        return multi_head_attention(
            seq,
            heads,
            self[f"{prefix}.attn.q.weight"],
            self[f"{prefix}.attn.k.weight"],
            self[f"{prefix}.attn.v.weight"],
            self[f"{prefix}.attn.o.weight"],
            return_weights=return_weights,
        )

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return layer_norm(x, self[f"{prefix}.gamma"], self[f"{prefix}.beta"])

    def fusion_layer(self, image: Tensor, k_state: Tensor, layer: int) -> Tensor:
        if image.shape != k_state.shape:
            raise ad.ShapeError(f"fusion_layer: {image.shape} vs {k_state.shape}")
        pre = f"fusion.{layer}"
        z = self.gate(image, layer)
        mixed = gated_mix(z, k_state, image)
        seq = self._norm(ad.stack([image, mixed], axis=1), f"{pre}.ln1")
        seq = self._norm(seq + self.attention(seq, pre, self.config.fusion_heads), f"{pre}.ln2")
        return seq[:, 1, :]

    def encoder_layer(self, seq: Tensor, layer: int) -> Tensor:
        pre = f"encoder.{layer}"
        seq = self._norm(seq + self.attention(seq, pre, self.config.encoder_heads), f"{pre}.ln1")
        hidden = ad.relu(linear(seq, self[f"{pre}.ff1.weight"], self[f"{pre}.ff1.bias"]))
        ff = linear(hidden, self[f"{pre}.ff2.weight"], self[f"{pre}.ff2.bias"])
        return self._norm(seq + ff, f"{pre}.ln2")

    def encode(self, x_img, tokens) -> tuple[Tensor, Tensor | None]:
        """Graph-building forward pass returning ``(K_f, K_f1)`` tensors."""
        cfg = self.config
        x_img = np.atleast_2d(np.asarray(x_img, dtype=np.float64))
        pooled = pool_tokens(tokens, cfg.txt_dim)
        if pooled.shape[0] != x_img.shape[0]:
            raise ad.ShapeError(
                f"batch mismatch: {x_img.shape[0]} image vectors vs {pooled.shape[0]} token sets"
            )
        if cfg.ablation_mode == "text_only":
            x_img = np.zeros_like(x_img)
        elif cfg.ablation_mode == "image_only":
            pooled = np.zeros_like(pooled)

        image = self.project_image(x_img)
        if cfg.ablation_mode == "baseline":
            return image, None
        text = linear(Tensor(pooled), self["txt_proj.weight"], self["txt_proj.bias"])
        image = ad.add_bias(image, Tensor(self._pe[0]))
        state = ad.add_bias(text, Tensor(self._pe[1]))
        for layer in range(cfg.fusion_layers):
            state = self.fusion_layer(image, state, layer)
        k_f1 = state
        seq = ad.stack([image, k_f1], axis=1)
        for layer in range(cfg.encoder_layers):
            seq = self.encoder_layer(seq, layer)
        return ad.mean(seq, axis=1), k_f1

    def forward(self, x_img, tokens) -> FusedFeature:
        with ad.no_grad():
            k_f, k_f1 = self.encode(x_img, tokens)
        return FusedFeature(k_f.data, None if k_f1 is None else k_f1.data)

    def classify(self, k_f: Tensor) -> Tensor:
        k_f = ad.as_tensor(k_f)
        if k_f.shape[-1] != self.config.d_model:
            raise ad.ShapeError(f"classify: feature width {k_f.shape[-1]} != {self.config.d_model}")
        return linear(k_f, self["classifier.weight"], self["classifier.bias"])

    def embed(self, x_img, tokens, batch_size: int = 256) -> np.ndarray:
        """L2-normalised ``K_f`` rows for retrieval, computed without a graph."""
        x_img = np.atleast_2d(np.asarray(x_img, dtype=np.float64))
        tokens = _as_token_list(tokens)
        out = []
        for start in range(0, len(x_img), batch_size):
            feat = self.forward(x_img[start : start + batch_size], tokens[start : start + batch_size])
            out.append(feat.vector)
        feats = np.concatenate(out, axis=0) if out else np.zeros((0, self.config.d_model))
        return feats / np.linalg.norm(feats, axis=1, keepdims=True)


def _as_token_list(tokens) -> list[np.ndarray]:
    if isinstance(tokens, np.ndarray):
        if tokens.ndim == 2:
            return [tokens]
        if tokens.ndim == 3:
            return list(tokens)
        raise ad.ShapeError(f"token array must be 2-D or 3-D, got shape {tokens.shape}")
    return [np.asarray(t, dtype=np.float64) for t in tokens]


def pool_tokens(tokens, txt_dim: int) -> np.ndarray:
    """Mean over each sample's tokens; returns ``(B, txt_dim)``."""
    mats: Sequence[np.ndarray] = _as_token_list(tokens)
    pooled = np.empty((len(mats), txt_dim))
    for i, m in enumerate(mats):
        m = np.atleast_2d(m)
        if m.shape[0] == 0 or m.size == 0:
            raise ValueError(f"sample {i}: empty text (no tokens)")
        if m.shape[1] != txt_dim:
            raise ad.ShapeError(f"sample {i}: token width {m.shape[1]} != txt_dim {txt_dim}")
        pooled[i] = m.mean(axis=0)
    return pooled
