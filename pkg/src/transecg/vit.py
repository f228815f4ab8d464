"""1D vision transformer for ECG windows: patch embedding, class token,
post-norm encoder layers with stochastic depth, and an MLP head.

With hidden_dim=256 and 6 heads the per-head width is floor(256/6)=42, so the
concatenated heads span 252 dims and the output projection maps 252 -> 256.
The convolutional patch embedding with kernel=stride=patch_size is identical
to flattening each patch and applying one linear projection, which is how it
is implemented here.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class VitConfig:
    seq_len: int = 2000
    patch_size: int = 20
    hidden_dim: int = 256
    n_layers: int = 6
    n_heads: int = 6
    mlp_dim: int = 128
    n_classes: int = 2
    survival_prob: float = 0.8
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.seq_len % self.patch_size != 0:
            raise ValueError(
                f"seq_len {self.seq_len} not divisible by patch_size {self.patch_size}"
            )
        if self.n_heads < 1:
            raise ValueError("n_heads must be >= 1")
        if self.head_dim < 1:
            raise ValueError("hidden_dim too small for n_heads")
        if not (0.0 < self.survival_prob <= 1.0):
            raise ValueError("survival_prob must be in (0, 1]")

    @property
    def n_patches(self) -> int:
        return self.seq_len // self.patch_size

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.n_heads


@dataclass
class ForwardArtifacts:
    logits: Tensor                      # [B, K]
    probs: Tensor                       # [B, K]
    attention: list[np.ndarray] | None  # per layer, [B, H, N+1, N+1]
    final_class_token: np.ndarray       # [B, D]


def _truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_params(config: VitConfig, seed: int) -> dict[str, Tensor]:
    """Deterministic parameter initialization for a given seed."""
    rng = np.random.default_rng(seed)
    d, hdh = config.hidden_dim, config.n_heads * config.head_dim
    p: dict[str, np.ndarray] = {}
    p["embed.E"] = _truncated_normal(rng, (config.patch_size, d))
    p["embed.E_pos"] = _truncated_normal(rng, (config.n_patches + 1, d))
    p["embed.cls"] = np.zeros(d)
    for i in range(config.n_layers):
        pre = f"layers.{i}."
        p[pre + "w_q"] = _truncated_normal(rng, (d, hdh))
        p[pre + "w_k"] = _truncated_normal(rng, (d, hdh))
        p[pre + "w_v"] = _truncated_normal(rng, (d, hdh))
        p[pre + "w_o"] = _truncated_normal(rng, (hdh, d))
        p[pre + "ln1.gamma"] = np.ones(d)
        p[pre + "ln1.beta"] = np.zeros(d)
        p[pre + "ln2.gamma"] = np.ones(d)
        p[pre + "ln2.beta"] = np.zeros(d)
        p[pre + "ffn.w1"] = _truncated_normal(rng, (d, config.mlp_dim))
        p[pre + "ffn.b1"] = np.zeros(config.mlp_dim)
        p[pre + "ffn.w2"] = _truncated_normal(rng, (config.mlp_dim, d))
        p[pre + "ffn.b2"] = np.zeros(d)
    p["head.w"] = _truncated_normal(rng, (d, config.n_classes))
    p["head.b"] = np.zeros(config.n_classes)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in p.items()}


def embed_patches(x: Tensor, params: dict[str, Tensor], config: VitConfig) -> Tensor:
    """Project patches and prepend the class token: [B, seq_len] -> [B, N+1, D]."""
    b = x.shape[0]
    n, d = config.n_patches, config.hidden_dim
    patches = x.reshape((b, n, config.patch_size))
    z = ad.matmul(patches, params["embed.E"])                   # [B, N, D]
    cls = ad.add(Tensor(np.zeros((b, 1, d))), params["embed.cls"].reshape((1, 1, d)))
    z0 = ad.concat([cls, z], axis=1)
    return ad.add(z0, params["embed.E_pos"])


def mhsa(z: Tensor, params: dict[str, Tensor], prefix: str, config: VitConfig,
         capture: bool = False) -> tuple[Tensor, np.ndarray | None]:
    """Multi-head self-attention; optionally returns post-softmax maps [B, H, T, T]."""
    b, t, _ = z.shape
    h, dh = config.n_heads, config.head_dim

    def heads(w):
        y = ad.matmul(z, params[prefix + w])         # [B, T, H*Dh]
        return ad.transpose(y.reshape((b, t, h, dh)), (0, 2, 1, 3))

    q, k, v = heads("w_q"), heads("w_k"), heads("w_v")
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)               # [B, H, T, T]
    out = ad.matmul(attn, v)                         # [B, H, T, Dh]
    out = ad.transpose(out, (0, 2, 1, 3)).reshape((b, t, h * dh))
    out = ad.matmul(out, params[prefix + "w_o"])
    maps = attn.data.copy() if capture else None
    return out, maps


def encoder_layer(z: Tensor, params: dict[str, Tensor], layer: int, config: VitConfig,
                  training: bool = False, rng: np.random.Generator | None = None,
                  capture: bool = False) -> tuple[Tensor, np.ndarray | None]:
    """Post-norm residual block: LN(Z + MHSA(Z)) then LN(Z' + FFN(Z'))."""
    pre = f"layers.{layer}."
    p = config.survival_prob

    def keep_branch() -> bool:
        if not training or p >= 1.0:
            return True
        return bool(rng.random() < p)

    att, maps = mhsa(z, params, pre, config, capture=capture)
    if keep_branch():
        branch = att if not training or p >= 1.0 else ad.scale(att, 1.0 / p)
        z = ad.add(z, branch)
    z = ad.layer_norm(z, params[pre + "ln1.gamma"], params[pre + "ln1.beta"], config.ln_eps)

    if keep_branch():
        hdn = ad.gelu(ad.linear(z, params[pre + "ffn.w1"], params[pre + "ffn.b1"]))
        ffn = ad.linear(hdn, params[pre + "ffn.w2"], params[pre + "ffn.b2"])
        if training and p < 1.0:
            ffn = ad.scale(ffn, 1.0 / p)
        z = ad.add(z, ffn)
    z = ad.layer_norm(z, params[pre + "ln2.gamma"], params[pre + "ln2.beta"], config.ln_eps)
    return z, maps


def forward(x: np.ndarray | Tensor, params: dict[str, Tensor], config: VitConfig,
            training: bool = False, capture_attention: bool = False,
            rng: np.random.Generator | None = None) -> ForwardArtifacts:
    """Full model pass over a batch of windows [B, seq_len]."""
    if not isinstance(x, Tensor):
        x = Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))
    if x.shape[-1] != config.seq_len:
        raise ValueError(f"window length {x.shape[-1]} != seq_len {config.seq_len}")
    if training and config.survival_prob < 1.0 and rng is None:
        raise ValueError("training with stochastic depth requires an rng")

    z = embed_patches(x, params, config)
    attention = [] if capture_attention else None
    for layer in range(config.n_layers):
        z, maps = encoder_layer(
            z, params, layer, config,
            training=training, rng=rng, capture=capture_attention,
        )
        if capture_attention:
            attention.append(maps)
    z0 = z[:, 0, :]                                  # [B, D]
    logits = ad.linear(z0, params["head.w"], params["head.b"])
    probs = ad.softmax(logits, axis=-1)
    return ForwardArtifacts(
        logits=logits, probs=probs, attention=attention,
        final_class_token=z0.data.copy(),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, Tensor], config: VitConfig,
                    vocab: dict[str, int], meta: dict | None = None) -> None:
    """Write config header + label vocabulary + parameter container."""
    header = json.dumps(
        {"config": asdict(config), "vocab": vocab, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    ad.save_tensors(buf, {k: t.data for k, t in params.items()})
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(buf.getvalue())


def load_checkpoint(path) -> tuple[dict[str, Tensor], VitConfig, dict[str, int], dict]:
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<Q", f.read(8))
        doc = json.loads(f.read(hlen).decode("utf-8"))
        arrays = ad.load_tensors(f)
    config = VitConfig(**doc["config"])
    params = {k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()}
    return params, config, doc["vocab"], doc.get("meta", {})
