"""ViT patch encoder with trainable prompt tokens.

Token layout at every layer is ``[patch tokens, prompt tokens, class token]``.
The instance feature is the final-layernormed class token (row ``w + k``).
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import INFERENCE, RECORDING, Graph, Tensor

PROMPT_INIT_STD = 0.02


@dataclass
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 32
    num_layers: int = 2
    num_heads: int = 2
    mlp_ratio: float = 2.0
    num_prompts: int = 1

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if self.num_prompts < 0:
            raise ValueError("num_prompts must be >= 0")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def mlp_dim(self) -> int:
        return int(round(self.embed_dim * self.mlp_ratio))


class PromptSet:
    """The k shared prompt tokens, a single trainable (k, d) leaf."""

    def __init__(self, tokens):
        self.tokens = Tensor(np.array(tokens, dtype=np.float64, copy=True), requires_grad=True,
                             name="prompt")
        if self.tokens.ndim != 2:
            raise ValueError(f"prompt tokens must be (k, d), got {self.tokens.shape}")

    @classmethod
    def init(cls, k: int, d: int, seed: int = 0, std: float = PROMPT_INIT_STD) -> PromptSet:
        rng = np.random.default_rng(seed)
        return cls(rng.normal(0.0, std, size=(k, d)))

    @property
    def k(self) -> int:
        return self.tokens.shape[0]

    @property
    def num_params(self) -> int:
        return self.tokens.size


def patchify(images, patch_size: int) -> np.ndarray:
    """Split (H, W, C) or (B, H, W, C) images into row-major flattened patches.

    Each patch is flattened in (row, col, channel) order, so the result is
    (w, p*p*C) or (B, w, p*p*C).
    """
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (B, H, W, C) images, got shape {x.shape}")
    b, h, w, c = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image size {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    out = (x.reshape(b, gh, patch_size, gw, patch_size, c)
            .transpose(0, 1, 3, 2, 4, 5)
            .reshape(b, gh * gw, patch_size * patch_size * c))
    return out[0] if single else out


class ViT:
    """Frozen-by-default ViT backbone; parameters live in ``self.params``."""

    def __init__(self, config: ViTConfig, seed: int = 0):
        self.config = config
        self.params: dict[str, Tensor] = {}
        self._init(seed)
        self.set_trainable(False)

    def _init(self, seed: int) -> None:
        cfg = self.config
        rng = np.random.default_rng(seed)
        d, hid = cfg.embed_dim, cfg.mlp_dim

        def trunc(shape, std=0.02):
            return np.clip(rng.normal(0.0, std, size=shape), -2 * std, 2 * std)

        def linear(fan_in, fan_out):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-lim, lim, size=(fan_in, fan_out))

        p = {
            "patch_embed.weight": linear(cfg.patch_dim, d),
            "patch_embed.bias": np.zeros(d),
            "pos_embed": trunc((cfg.num_patches + 1, d)),
            "cls_token": trunc((1, d)),
        }
        for i in range(cfg.num_layers):
            pre = f"blocks.{i}."
            p[pre + "norm1.weight"] = np.ones(d)
            p[pre + "norm1.bias"] = np.zeros(d)
            p[pre + "attn.qkv.weight"] = linear(d, 3 * d)
            p[pre + "attn.qkv.bias"] = np.zeros(3 * d)
            p[pre + "attn.proj.weight"] = linear(d, d)
            p[pre + "attn.proj.bias"] = np.zeros(d)
            p[pre + "norm2.weight"] = np.ones(d)
            p[pre + "norm2.bias"] = np.zeros(d)
            p[pre + "mlp.fc1.weight"] = linear(d, hid)
            p[pre + "mlp.fc1.bias"] = np.zeros(hid)
            p[pre + "mlp.fc2.weight"] = linear(hid, d)
            p[pre + "mlp.fc2.bias"] = np.zeros(d)
        p["norm.weight"] = np.ones(d)
        p["norm.bias"] = np.zeros(d)
        self.params = {k: Tensor(v, name=k) for k, v in p.items()}

    def set_trainable(self, flag: bool) -> None:
        for t in self.params.values():
            t.requires_grad = flag

    @property
    def trainable(self) -> bool:
        return any(t.requires_grad for t in self.params.values())

    @property
    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def layer_params(self, i: int) -> dict[str, Tensor]:
        pre = f"blocks.{i}."
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].data).tobytes())
        return h.hexdigest()

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params:
                raise KeyError(f"unknown backbone parameter {k!r}")
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)


def embed(patches, vit: ViT) -> Tensor:
    """Linear patch embedding plus the patch positional embeddings."""
    cfg = vit.config
    patches = ad.as_tensor(patches)
    if patches.shape[-1] != cfg.patch_dim:
        raise ad.ShapeError(
            f"patch vector length {patches.shape[-1]} != patch_size^2*channels = {cfg.patch_dim}")
    w = patches.shape[-2]
    p = vit.params
    tokens = ad.matmul(patches, p["patch_embed.weight"]) + p["patch_embed.bias"]
    return tokens + p["pos_embed"][:w]


def class_token(vit: ViT) -> Tensor:
    """Class token with the class-position embedding added."""
    p = vit.params
    w = vit.config.num_patches
    return p["cls_token"] + p["pos_embed"][w:w + 1]


def assemble_sequence(patch_tokens: Tensor, prompt: PromptSet | None, cls: Tensor) -> Tensor:
    """Concatenate ``[patch tokens, prompt tokens, class token]`` along the token axis."""
    batch = patch_tokens.shape[:-2]
    d = patch_tokens.shape[-1]
    parts = [patch_tokens]
    if prompt is not None and prompt.k > 0:
        if prompt.tokens.shape[-1] != d:
            raise ad.ShapeError(
                f"prompt dim {prompt.tokens.shape[-1]} != token dim {d}")
        parts.append(ad.broadcast_to(prompt.tokens, batch + prompt.tokens.shape))
    if cls.shape[-1] != d:
        raise ad.ShapeError(f"class token dim {cls.shape[-1]} != token dim {d}")
    parts.append(ad.broadcast_to(cls, batch + (1, d)))
    return ad.concat(parts, axis=-2)


def attention(x: Tensor, lp: dict[str, Tensor], num_heads: int,
              last_query_only: bool = False) -> Tensor:
    *batch, t, d = x.shape
    dh = d // num_heads
    qkv = ad.matmul(x, lp["attn.qkv.weight"]) + lp["attn.qkv.bias"]
    qkv = qkv.reshape(*batch, t, 3, num_heads, dh)
    nb = len(batch)
    lead = tuple(range(nb))
    qkv = qkv.permute(nb + 1, *lead, nb + 2, nb, nb + 3)  # (3, *B, H, T, dh)
    q, k, v = qkv[0], qkv[1], qkv[2]
    if last_query_only:
        q = q[..., t - 1:, :]
    scores = ad.matmul(q, k.transpose(-2, -1)) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    out = ad.matmul(attn, v)  # (*B, H, Tq, dh)
    tq = out.shape[-2]
    out = out.permute(*lead, nb + 1, nb, nb + 2).reshape(*batch, tq, d)
    return ad.matmul(out, lp["attn.proj.weight"]) + lp["attn.proj.bias"]


def encoder_layer(x: Tensor, lp: dict[str, Tensor], num_heads: int,
                  last_token_only: bool = False) -> Tensor:
    """Pre-norm transformer block with full self-attention over all tokens.

    With ``last_token_only`` only the output row of the final token (the
    class token) is computed; it is identical to that row of the full output.
    """
    a = attention(ad.layernorm(x, lp["norm1.weight"], lp["norm1.bias"]), lp, num_heads,
                  last_query_only=last_token_only)
    if last_token_only:
        t = x.shape[-2]
        x = x[..., t - 1:, :]
    x = x + a
    y = ad.layernorm(x, lp["norm2.weight"], lp["norm2.bias"])
    y = ad.gelu(ad.matmul(y, lp["mlp.fc1.weight"]) + lp["mlp.fc1.bias"])
    y = ad.matmul(y, lp["mlp.fc2.weight"]) + lp["mlp.fc2.bias"]
    return x + y


def encode(images, vit: ViT, prompt: PromptSet | None) -> Tensor:
    """Features (B, d) for a stack of images, recorded on the active graph."""
    cfg = vit.config
    images = np.asarray(images, dtype=vit.params["patch_embed.weight"].dtype)
    if images.ndim != 4:
        raise ValueError(f"expected (B, H, W, C) images, got shape {images.shape}")
    tokens = embed(patchify(images, cfg.patch_size), vit)
    x = assemble_sequence(tokens, prompt, class_token(vit))
    last = cfg.num_layers - 1
    for i in range(cfg.num_layers):
        # only the class token is read out of the final layer
        x = encoder_layer(x, vit.layer_params(i), cfg.num_heads, last_token_only=i == last)
    cls = x[..., x.shape[-2] - 1, :]
    p = vit.params
    return ad.layernorm(cls, p["norm.weight"], p["norm.bias"])


def forward_features(images, vit: ViT, prompt: PromptSet | None, mode: str = INFERENCE,
                     batch_size: int | None = None, meter: ad.MemMeter | None = None):
    """Per-instance features ``h`` (n, d) for one bag.

    In INFERENCE mode the result is a plain (n, d) array and nothing is
    recorded. In RECORDING mode the whole bag is recorded on the currently
    active graph and a Tensor is returned.
    """
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError(f"empty bag or bad instance stack, shape {images.shape}")
    n = images.shape[0]
    bs = n if batch_size is None else batch_size
    if mode == INFERENCE:
        rows = []
        with Graph(mode=INFERENCE, meter=meter):
            for s in range(0, n, bs):
                rows.append(encode(images[s:s + bs], vit, prompt).data)
        return np.concatenate(rows, axis=0)
    if mode != RECORDING:
        raise ValueError(f"unknown mode {mode!r}")
    if ad.current_graph() is None or not ad.current_graph().recording:
        raise ad.GraphError("RECORDING forward needs an active recording graph")
    parts = [encode(images[s:s + bs], vit, prompt) for s in range(0, n, bs)]
    return parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)


def count_trainable_params(vit: ViT, prompt: PromptSet | None, head) -> dict:
    """Parameter census: trainable prompt and head counts, backbone size and state."""
    k_params = prompt.num_params if prompt is not None else 0
    return {
        "prompt": k_params,
        "head": head.num_params if head is not None else 0,
        "backbone": vit.num_params,
        "backbone_frozen": not vit.trainable,
        "trainable_total": k_params + (head.num_params if head is not None else 0)
        + (vit.num_params if vit.trainable else 0),
    }


def config_dict(cfg: ViTConfig) -> dict:
    return asdict(cfg)
