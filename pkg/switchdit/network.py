"""
Toy DiT denoiser with timestep-gated sparse mixtures of experts.

Images are (B, C, H, W) arrays. Every transformer block is preceded by an
SMoE layer whose output m(z) is folded into the block according to the
configured integration mode; all routing comes from the timestep embedding.
"""

import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from .config import IntegrationMode, ModelConfig
from .errors import ConfigError, ShapeError, TimestepError
from .gating import GateOutput, GatingNetwork, TimestepEmbedder
from .layers import Linear, Module
from .smoe import SMoELayer, init_experts_identity, integrate
from .tensor import Tensor, add, expand, gelu, layer_norm, matmul, mul, scale, silu, softmax

logger = logging.getLogger(__name__)


#################################################################################
#                            Patch rearrangement                                #
#################################################################################


def patchify(img, patch_size: int) -> Tensor:
    """(B, C, H, W) or (H, W) pixels -> (B, L, P*P*C) patch vectors, row-major patches."""
    img = img if isinstance(img, Tensor) else Tensor(img)
    if img.ndim == 2:
        img = img.reshape(1, 1, *img.shape)
    if img.ndim != 4:
        raise ShapeError(f"patchify: expected (B, C, H, W), got {img.shape}")
    B, C, H, W = img.shape
    P = patch_size
    if H % P or W % P:
        raise ShapeError(f"patchify: image {H}x{W} not divisible by patch size {P}")
    h, w = H // P, W // P
    x = img.reshape(B, C, h, P, w, P).transpose((0, 2, 4, 3, 5, 1))
    return x.reshape(B, h * w, P * P * C)


def unpatchify(tokens, patch_size: int, channels: int, height: int, width: int) -> Tensor:
    """Inverse of patchify: (B, L, P*P*C) -> (B, C, H, W)."""
    tokens = tokens if isinstance(tokens, Tensor) else Tensor(tokens)
    P, C = patch_size, channels
    h, w = height // P, width // P
    B = tokens.shape[0]
    if tokens.shape[1:] != (h * w, P * P * C):
        raise ShapeError(f"unpatchify: tokens {tokens.shape} do not tile a {C}x{height}x{width} image")
    x = tokens.reshape(B, h, w, P, P, C).transpose((0, 5, 1, 3, 2, 4))
    return x.reshape(B, C, height, width)


def sincos_pos_embed_2d(embed_dim: int, grid_size: int) -> np.ndarray:
    """Fixed 2-D sine/cosine position table, (grid_size**2, embed_dim)."""
    if embed_dim % 4:
        raise ConfigError(f"2-D position embedding needs a multiple of 4, got {embed_dim}")
    coords = np.arange(grid_size, dtype=np.float64)
    grid_w, grid_h = np.meshgrid(coords, coords)

    def encode(dim: int, pos: np.ndarray) -> np.ndarray:
        omega = 1.0 / 10000 ** (np.arange(dim // 2, dtype=np.float64) / (dim / 2.0))
        out = np.outer(pos.reshape(-1), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate(
        [encode(embed_dim // 2, grid_h), encode(embed_dim // 2, grid_w)], axis=1
    )


#################################################################################
#                               Building blocks                                 #
#################################################################################


def modulate(x: Tensor, shift: Tensor, scale_: Tensor) -> Tensor:
    """x * (1 + scale) + shift with (B, d) modulation broadcast over tokens."""
    B, L, d = x.shape
    scale_ = expand(scale_.reshape(B, 1, d), x.shape)
    shift = expand(shift.reshape(B, 1, d), x.shape)
    return add(add(x, mul(x, scale_)), shift)


def _gated(x: Tensor, gate: Tensor) -> Tensor:
    B, L, d = x.shape
    return mul(expand(gate.reshape(B, 1, d), x.shape), x)


class Attention(Module):
    """Multi-head self-attention over (B, L, d)."""

    def __init__(self, dim: int, num_heads: int, rng: np.random.Generator):
        self.num_heads = num_heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        B, L, d = x.shape
        H = self.num_heads
        hd = d // H
        qkv = self.qkv(x).reshape(B, L, 3, H, hd).transpose((2, 0, 3, 1, 4))
        q = qkv[0].reshape(B * H, L, hd)
        k = qkv[1].reshape(B * H, L, hd)
        v = qkv[2].reshape(B * H, L, hd)
        att = softmax(scale(matmul(q, k.transpose()), 1.0 / np.sqrt(hd)), axis=-1)
        out = matmul(att, v).reshape(B, H, L, hd).transpose((0, 2, 1, 3)).reshape(B, L, d)
        return self.proj(out)


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class DiTBlock(Module):
    """Transformer block with adaLN-Zero conditioning; starts as the identity map."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float, eps: float, rng: np.random.Generator):
        self.eps = eps
        self.attn = Attention(dim, num_heads, rng)
        self.mlp = FeedForward(dim, int(dim * mlp_ratio), rng)
        self.adaLN_modulation = Linear(dim, 6 * dim, zero=True)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        d = x.shape[-1]
        mod = self.adaLN_modulation(silu(c))
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = (
            mod[:, i * d : (i + 1) * d] for i in range(6)
        )
        h = modulate(layer_norm(x, eps=self.eps), shift_msa, scale_msa)
        x = add(x, _gated(self.attn(h), gate_msa))
        h = modulate(layer_norm(x, eps=self.eps), shift_mlp, scale_mlp)
        return add(x, _gated(self.mlp(h), gate_mlp))


class SwitchDiTBlock(Module):
    """SMoE layer followed by a DiT block, joined per the integration mode."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.mode = IntegrationMode(cfg.integration)
        self.block = DiTBlock(cfg.hidden_size, cfg.num_heads, cfg.mlp_ratio, cfg.layer_norm_eps, rng)
        self.smoe = None
        if self.mode.uses_smoe:
            hidden = int(cfg.hidden_size * cfg.expert_ratio)
            self.smoe = SMoELayer(cfg.hidden_size, cfg.num_experts, hidden, rng)
            if self.mode.identity_init:
                init_experts_identity(self.smoe)

    def __call__(self, z: Tensor, c: Tensor, g: Optional[Tensor] = None, bypass_smoe: bool = False) -> Tensor:
        if self.smoe is None or bypass_smoe:
            return self.block(z, c)
        m = self.smoe(z, g)
        block_input, residual = integrate(z, m, self.mode)
        out = self.block(block_input, c)
        return out if residual is None else add(out, residual)


class FinalLayer(Module):
    def __init__(self, dim: int, patch_size: int, channels: int, eps: float):
        self.eps = eps
        self.adaLN_modulation = Linear(dim, 2 * dim, zero=True)
        self.linear = Linear(dim, patch_size * patch_size * channels, zero=True)

    def __call__(self, x: Tensor, c: Tensor) -> Tensor:
        d = x.shape[-1]
        mod = self.adaLN_modulation(silu(c))
        x = modulate(layer_norm(x, eps=self.eps), mod[:, :d], mod[:, d:])
        return self.linear(x)


class LabelEmbedder(Module):
    """Class table with one extra null row (index = num_classes) for guidance."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.table = Tensor(rng.normal(0.0, 0.02, size=(num_classes + 1, dim)), requires_grad=True)

    @property
    def null_class(self) -> int:
        return self.num_classes

    def drop(self, labels: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
        """Replace each label with the null class with probability `prob`."""
        labels = np.asarray(labels, dtype=np.int64)
        return np.where(rng.random(labels.shape) < prob, self.null_class, labels)

    def __call__(self, labels: np.ndarray) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if np.any(labels < 0) or np.any(labels > self.num_classes):
            raise ConfigError(f"labels must lie in [0, {self.num_classes}], got {labels.tolist()}")
        return self.table[labels]


#################################################################################
#                                 Switch-DiT                                    #
#################################################################################


class SwitchDiT(Module):
    """Noise predictor eps_theta(x_t, t, y) returning its gating byproducts."""

    def __init__(self, cfg: ModelConfig, timesteps: int, seed: int = 0):
        self.cfg = cfg
        self.timesteps = int(timesteps)
        rng = np.random.default_rng(seed)
        d = cfg.hidden_size
        self.x_embedder = Linear(cfg.patch_size**2 * cfg.channels, d, rng)
        self._pos_embed = sincos_pos_embed_2d(d, cfg.image_size // cfg.patch_size)
        self.t_embedder = TimestepEmbedder(d, cfg.frequency_dim, rng)
        self.y_embedder = LabelEmbedder(cfg.num_classes, d, rng) if cfg.conditional else None
        self.gating = None
        if cfg.integration.uses_smoe:
            self.gating = GatingNetwork(
                cfg.depth, d, cfg.num_experts, cfg.top_k, cfg.renormalize_gates, cfg.noisy_gating
            )
        self.blocks: List[SwitchDiTBlock] = [SwitchDiTBlock(cfg, rng) for _ in range(cfg.depth)]
        self.final_layer = FinalLayer(d, cfg.patch_size, cfg.channels, cfg.layer_norm_eps)
        logger.debug(f"Built SwitchDiT ({cfg.integration.value}) with {self.num_parameters()} parameters")

    @property
    def conditional(self) -> bool:
        return self.y_embedder is not None

    def expert_evaluations(self) -> np.ndarray:
        """(N, M) evaluation counts since the last reset."""
        if self.gating is None:
            return np.zeros((len(self.blocks), 0), dtype=np.int64)
        return np.stack([b.smoe.evaluations for b in self.blocks])

    def reset_counters(self) -> None:
        for b in self.blocks:
            if b.smoe is not None:
                b.smoe.reset_counters()

    def condition(self, t: np.ndarray, y: Optional[np.ndarray]) -> Tuple[Tensor, Tensor]:
        """(e_t, c): timestep embedding and conditioning vector c = e_t + y_embed."""
        e = self.t_embedder(t)
        if self.y_embedder is None:
            if y is not None:
                raise ConfigError("labels given to an unconditional model")
            return e, e
        if y is None:
            y = np.full(len(t), self.y_embedder.null_class)
        return e, add(e, self.y_embedder(y))

    def predict_noise(
        self,
        x_t,
        t,
        y=None,
        rng: Optional[np.random.Generator] = None,
        bypass_smoe: bool = False,
    ) -> Tuple[Tensor, Optional[GateOutput]]:
        """Predict the noise in x_t.

        Args:
            x_t: (B, C, H, W) noisy images.
            t: one timestep per image, or a single int for the whole batch.
            y: class labels (conditional models); None selects the null class.
            rng: draws gating noise when noisy gating is on.
            bypass_smoe: run the blocks without their SMoE layers.

        Returns:
            (eps_hat, gates); gates is None for the plain DiT.
        """
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        cfg = self.cfg
        expected = (cfg.channels, cfg.image_size, cfg.image_size)
        if x_t.ndim != 4 or x_t.shape[1:] != expected:
            raise ShapeError(f"predict_noise: input {x_t.shape}, expected (B, {', '.join(map(str, expected))})")
        B = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        if np.any(t < 1) or np.any(t > self.timesteps):
            raise TimestepError(f"timesteps {t.tolist()} outside [1, {self.timesteps}]")

        tokens = self.x_embedder(patchify(x_t, cfg.patch_size))
        z = add(tokens, expand(Tensor(self._pos_embed), tokens.shape))
        e, c = self.condition(t, y)
        gates = None
        if self.gating is not None and not bypass_smoe:
            gates = self.gating(e, rng)
        for i, block in enumerate(self.blocks):
            g = gates.g[:, i, :] if gates is not None else None
            z = block(z, c, g, bypass_smoe=bypass_smoe)
        out = self.final_layer(z, c)
        eps_hat = unpatchify(out, cfg.patch_size, cfg.channels, cfg.image_size, cfg.image_size)
        return eps_hat, gates

    __call__ = predict_noise


class EMA:
    """Shadow copy of a model's parameters: ema <- decay * ema + (1 - decay) * online."""

    def __init__(self, model: Module, decay: float):
        if not 0.0 <= decay < 1.0:
            raise ConfigError(f"EMA decay must lie in [0, 1), got {decay}")
        self.decay = decay
        self.shadow: Dict[str, np.ndarray] = model.state_dict()

    def update(self, model: Module) -> None:
        ema_update(self.shadow, model, self.decay)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: array.copy() for name, array in self.shadow.items()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, array in state.items():
            if name not in self.shadow or np.shape(array) != self.shadow[name].shape:
                raise ShapeError(f"EMA entry {name} does not match the model")
            self.shadow[name] = np.array(array, dtype=np.float64)


def ema_update(shadow: Dict[str, np.ndarray], model: Module, decay: float) -> None:
    if not 0.0 <= decay < 1.0:
        raise ConfigError(f"EMA decay must lie in [0, 1), got {decay}")
    for name, p in model.named_parameters():
        shadow[name] = decay * shadow[name] + (1.0 - decay) * p.data
