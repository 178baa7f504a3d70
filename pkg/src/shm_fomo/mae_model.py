"""Masked autoencoder over spectrogram patches, plus its regression variant.

The model is a flat dict of named numpy arrays: a linear patch embedding, a
3-block pre-norm transformer encoder, a trainable mask token, a 3-block
decoder reconstructing masked patches, and (after the head swap for traffic
estimation) a single linear output neuron on the mean-pooled latents.
Positional tables are fixed 2-D sinusoids and are not trained or persisted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn_core
from .errors import ConfigError, DataError, FormatError
from .io_formats import read_container, write_container
from .signal_pipeline import SPEC_SIZE

CHECKPOINT_MAGIC = b"MAEC"

# (encoder width, decoder width) family, halving from the largest member
SIZE_FAMILY = [(768, 512), (384, 256), (192, 128), (96, 64), (48, 32), (24, 16)]

# head counts keep per-head width >= 8 at every family size
ENC_HEADS = {768: 12, 384: 6, 192: 3, 96: 3, 48: 3, 24: 3}
DEC_HEADS = {512: 8, 256: 8, 128: 4, 64: 4, 32: 4, 16: 2}

INIT_STD = 0.02


def _default_heads(dim: int, table: dict) -> int:
    if dim in table:
        return table[dim]
    for h in (16, 12, 8, 6, 4, 3, 2, 1):
        if dim % h == 0 and dim // h >= 8:
            return h
    return 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters for one family member."""

    e_dim: int = 768
    d_dim: int = 512
    n_blocks: int = 3
    patch_size: int = 10
    mask_ratio: float = 0.8
    e_heads: int = 0
    d_heads: int = 0
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.e_heads == 0:
            object.__setattr__(self, "e_heads", _default_heads(self.e_dim, ENC_HEADS))
        if self.d_heads == 0:
            object.__setattr__(self, "d_heads", _default_heads(self.d_dim, DEC_HEADS))
        if self.e_dim % self.e_heads:
            raise ConfigError(f"e_dim {self.e_dim} not divisible by e_heads {self.e_heads}")
        if self.d_dim % self.d_heads:
            raise ConfigError(f"d_dim {self.d_dim} not divisible by d_heads {self.d_heads}")
        if SPEC_SIZE % self.patch_size:
            raise ConfigError(f"patch_size {self.patch_size} must divide {SPEC_SIZE}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must be in [0,1), got {self.mask_ratio}")
        if self.e_dim % 4 or self.d_dim % 4:
            raise ConfigError("embedding widths must be multiples of 4")

    @property
    def grid(self) -> int:
        return SPEC_SIZE // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2


def param_shapes(cfg: ModelConfig, with_decoder: bool = True,
                 with_reg_head: bool = False) -> dict[str, tuple]:
    """Shape table for every trainable tensor; init and param_count share it."""
    shapes = {
        "patch_embed.w": (cfg.patch_dim, cfg.e_dim),
        "patch_embed.b": (cfg.e_dim,),
    }

    def add_side(side: str, dim: int):
        hidden = dim * cfg.mlp_ratio
        for i in range(cfg.n_blocks):
            pre = f"{side}.{i}"
            shapes.update({
                f"{pre}.ln1.g": (dim,), f"{pre}.ln1.b": (dim,),
                f"{pre}.attn.wq": (dim, dim), f"{pre}.attn.bq": (dim,),
                f"{pre}.attn.wk": (dim, dim), f"{pre}.attn.bk": (dim,),
                f"{pre}.attn.wv": (dim, dim), f"{pre}.attn.bv": (dim,),
                f"{pre}.attn.wo": (dim, dim), f"{pre}.attn.bo": (dim,),
                f"{pre}.ln2.g": (dim,), f"{pre}.ln2.b": (dim,),
                f"{pre}.mlp.w1": (dim, hidden), f"{pre}.mlp.b1": (hidden,),
                f"{pre}.mlp.w2": (hidden, dim), f"{pre}.mlp.b2": (dim,),
            })
        shapes[f"{side}.norm.g"] = (dim,)
        shapes[f"{side}.norm.b"] = (dim,)

    add_side("enc", cfg.e_dim)
    if with_decoder:
        add_side("dec", cfg.d_dim)
        shapes.update({
            "enc_to_dec.w": (cfg.e_dim, cfg.d_dim), "enc_to_dec.b": (cfg.d_dim,),
            "mask_token": (cfg.d_dim,),
            "recon_head.w": (cfg.d_dim, cfg.patch_dim), "recon_head.b": (cfg.patch_dim,),
        })
    if with_reg_head:
        shapes.update({"reg_head.w": (cfg.e_dim, 1), "reg_head.b": (1,)})
    return shapes


def param_count(cfg: ModelConfig, with_decoder: bool = True,
                with_reg_head: bool = False) -> int:
    """Exact number of trainable scalars (fixed positional tables excluded)."""
    return sum(int(np.prod(s)) for s in
               param_shapes(cfg, with_decoder, with_reg_head).values())


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) resampled until within +-2 std, like standard ViT init."""
    x = rng.normal(0.0, std, size=shape)
    bad = np.abs(x) > 2 * std
    while bad.any():
        x[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(x) > 2 * std
    return x


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32,
                with_decoder: bool = True, with_reg_head: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg, with_decoder, with_reg_head).items():
        if name == "mask_token":
            arr = rng.normal(0.0, INIT_STD, size=shape)
        elif name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith((".b", ".bq", ".bk", ".bv", ".bo")):
            arr = np.zeros(shape)
        else:
            arr = _trunc_normal(rng, shape, INIT_STD)
        params[name] = arr.astype(dtype)
    return params


@dataclass
class MaeModel:
    """Parameter set plus fixed positional tables for one configuration."""

    config: ModelConfig
    params: dict[str, np.ndarray]
    enc_pos: np.ndarray = field(repr=False, default=None)
    dec_pos: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        dtype = self.dtype
        if self.enc_pos is None:
            self.enc_pos = nn_core.sincos_table_2d(
                self.config.grid, self.config.e_dim).astype(dtype)
        if self.dec_pos is None and self.has_decoder:
            self.dec_pos = nn_core.sincos_table_2d(
                self.config.grid, self.config.d_dim).astype(dtype)

    @property
    def dtype(self):
        return self.params["patch_embed.w"].dtype

    @property
    def has_decoder(self) -> bool:
        return "mask_token" in self.params

    @property
    def has_reg_head(self) -> bool:
        return "reg_head.w" in self.params

    def n_params(self) -> int:
        return sum(int(p.size) for p in self.params.values())

    def copy(self) -> "MaeModel":
        return MaeModel(config=self.config,
                        params={k: v.copy() for k, v in self.params.items()},
                        enc_pos=self.enc_pos, dec_pos=self.dec_pos)

    def astype(self, dtype) -> "MaeModel":
        return MaeModel(config=self.config,
                        params={k: v.astype(dtype) for k, v in self.params.items()})


def build_model(cfg: ModelConfig, seed: int, dtype=np.float32,
                with_decoder: bool = True, with_reg_head: bool = False) -> MaeModel:
    return MaeModel(config=cfg,
                    params=init_params(cfg, seed, dtype, with_decoder, with_reg_head))


def attach_regression_head(model: MaeModel, seed: int) -> MaeModel:
    """Drop the decoder and append the single-output linear head."""
    cfg = model.config
    params = {k: v.copy() for k, v in model.params.items()
              if k.startswith(("patch_embed", "enc."))}
    rng = np.random.default_rng(seed)
    params["reg_head.w"] = _trunc_normal(rng, (cfg.e_dim, 1), INIT_STD).astype(model.dtype)
    params["reg_head.b"] = np.zeros((1,), dtype=model.dtype)
    return MaeModel(config=cfg, params=params)


# ---------------------------------------------------------------------------
# patches and masking


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split square image(s) into a row-major grid of flattened patches."""
    single = images.ndim == 2
    if single:
        images = images[None]
    b, h, w = images.shape
    if h % patch_size or w % patch_size:
        raise ConfigError(f"patch_size {patch_size} does not divide image {h}x{w}")
    g = h // patch_size
    patches = (images.reshape(b, g, patch_size, g, patch_size)
               .transpose(0, 1, 3, 2, 4)
               .reshape(b, g * g, patch_size * patch_size))
    return patches[0] if single else patches


def depatchify(patches: np.ndarray, patch_size: int) -> np.ndarray:
    """Inverse of patchify; exact round-trip."""
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b, n, p2 = patches.shape
    g = int(round(np.sqrt(n)))
    images = (patches.reshape(b, g, g, patch_size, patch_size)
              .transpose(0, 1, 3, 2, 4)
              .reshape(b, g * patch_size, g * patch_size))
    return images[0] if single else images


@dataclass
class MaskPlan:
    """Partition of patch indices into masked and visible sets."""

    masked_idx: np.ndarray
    visible_idx: np.ndarray
    seed: Optional[int] = None

    @property
    def n_masked(self) -> int:
        return int(self.masked_idx.shape[0])


def full_plan(num_patches: int) -> MaskPlan:
    return MaskPlan(masked_idx=np.empty(0, dtype=np.int64),
                    visible_idx=np.arange(num_patches), seed=None)


def sample_mask(num_patches: int, p: float, seed: int) -> MaskPlan:
    """Uniformly random subset of exactly round(p * num_patches) masked indices."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"mask ratio must be in [0,1), got {p}")
    n_mask = int(round(p * num_patches))
    perm = np.random.default_rng(seed).permutation(num_patches)
    return MaskPlan(masked_idx=np.sort(perm[:n_mask]),
                    visible_idx=np.sort(perm[n_mask:]), seed=seed)


def sample_mask_batch(num_patches: int, p: float, batch: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Batch masking: (masked_idx, visible_idx) arrays of shape (batch, ...)."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"mask ratio must be in [0,1), got {p}")
    n_mask = int(round(p * num_patches))
    order = np.argsort(rng.random((batch, num_patches)), axis=1, kind="stable")
    return np.sort(order[:, :n_mask], axis=1), np.sort(order[:, n_mask:], axis=1)


# ---------------------------------------------------------------------------
# forward / backward


def _encode_batch(model: MaeModel, images: np.ndarray,
                  visible_idx: Optional[np.ndarray]):
    cfg = model.config
    p = model.params
    patches = patchify(np.asarray(images), cfg.patch_size).astype(model.dtype, copy=False)
    if visible_idx is None:
        vis_patches = patches
        pos = model.enc_pos[None, :, :]
    else:
        vis_patches = np.take_along_axis(patches, visible_idx[:, :, None], axis=1)
        pos = model.enc_pos[visible_idx]
    tokens = nn_core.linear_fwd(vis_patches, p["patch_embed.w"], p["patch_embed.b"]) + pos
    latents, stack_cache = nn_core.stack_fwd(tokens, p, "enc", cfg.n_blocks, cfg.e_heads)
    return latents, (patches, vis_patches, stack_cache)


def _encode_backward(model: MaeModel, dlatents: np.ndarray, cache) -> dict:
    cfg = model.config
    _, vis_patches, stack_cache = cache
    dtokens, grads = nn_core.stack_bwd(dlatents, stack_cache, model.params,
                                       "enc", cfg.n_blocks, cfg.e_heads)
    _, dw, db = nn_core.linear_bwd(dtokens, vis_patches, model.params["patch_embed.w"])
    grads["patch_embed.w"] = dw
    grads["patch_embed.b"] = db
    return grads


def encode(model: MaeModel, image: np.ndarray,
           plan: Optional[MaskPlan] = None) -> np.ndarray:
    """Latent vectors for the visible patches of one image (all, if plan=None)."""
    visible = None if plan is None else plan.visible_idx[None, :]
    latents, _ = _encode_batch(model, image[None], visible)
    return latents[0]


def _decode_batch(model: MaeModel, latents: np.ndarray,
                  masked_idx: np.ndarray, visible_idx: np.ndarray):
    cfg = model.config
    p = model.params
    b = latents.shape[0]
    z = nn_core.linear_fwd(latents, p["enc_to_dec.w"], p["enc_to_dec.b"])
    tokens = np.broadcast_to(p["mask_token"], (b, cfg.num_patches, cfg.d_dim)).copy()
    np.put_along_axis(tokens, visible_idx[:, :, None], z, axis=1)
    tokens = tokens + model.dec_pos[None, :, :]
    hidden, stack_cache = nn_core.stack_fwd(tokens, p, "dec", cfg.n_blocks, cfg.d_heads)
    pred_patches = nn_core.linear_fwd(hidden, p["recon_head.w"], p["recon_head.b"])
    return pred_patches, (latents, z, hidden, stack_cache, masked_idx, visible_idx)


def _decode_backward(model: MaeModel, dpred: np.ndarray, cache):
    cfg = model.config
    p = model.params
    latents, z, hidden, stack_cache, masked_idx, visible_idx = cache
    grads = {}
    dhidden, grads["recon_head.w"], grads["recon_head.b"] = nn_core.linear_bwd(
        dpred, hidden, p["recon_head.w"])
    dtokens, stack_grads = nn_core.stack_bwd(dhidden, stack_cache, p,
                                             "dec", cfg.n_blocks, cfg.d_heads)
    grads.update(stack_grads)
    dz = np.take_along_axis(dtokens, visible_idx[:, :, None], axis=1)
    dmasked = np.take_along_axis(dtokens, masked_idx[:, :, None], axis=1)
    grads["mask_token"] = dmasked.sum(axis=(0, 1))
    dlatents, grads["enc_to_dec.w"], grads["enc_to_dec.b"] = nn_core.linear_bwd(
        dz, latents, p["enc_to_dec.w"])
    return dlatents, grads


def decode_reconstruct(model: MaeModel, latents: np.ndarray,
                       plan: MaskPlan) -> np.ndarray:
    """Reconstruct the full image from visible-patch latents and the mask plan."""
    if not model.has_decoder:
        raise ConfigError("model has no decoder")
    if latents.shape[0] != plan.visible_idx.shape[0]:
        raise DataError("latents do not match the plan's visible set")
    pred_patches, _ = _decode_batch(model, latents[None],
                                    plan.masked_idx[None], plan.visible_idx[None])
    return depatchify(pred_patches[0], model.config.patch_size)


def pretrain_loss(pred_image: np.ndarray, true_image: np.ndarray,
                  plan: MaskPlan, patch_size: int = 10) -> float:
    """Mean squared error over pixels of masked patches only."""
    if pred_image.shape != true_image.shape:
        raise DataError(f"shape mismatch {pred_image.shape} vs {true_image.shape}")
    if plan.n_masked == 0:
        raise DataError("pretraining loss undefined for an empty masked set")
    pred = patchify(np.asarray(pred_image, dtype=np.float64), patch_size)[plan.masked_idx]
    true = patchify(np.asarray(true_image, dtype=np.float64), patch_size)[plan.masked_idx]
    return float(np.mean((pred - true) ** 2))


def pretrain_forward_batch(model: MaeModel, images: np.ndarray,
                           masked_idx: np.ndarray, visible_idx: np.ndarray):
    """Batched masked reconstruction; returns (loss, cache for backward)."""
    latents, enc_cache = _encode_batch(model, images, visible_idx)
    pred_patches, dec_cache = _decode_batch(model, latents, masked_idx, visible_idx)
    true_patches = enc_cache[0]
    pred_m = np.take_along_axis(pred_patches, masked_idx[:, :, None], axis=1)
    true_m = np.take_along_axis(true_patches, masked_idx[:, :, None], axis=1)
    diff = pred_m - true_m
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (enc_cache, dec_cache, diff, pred_patches.shape, masked_idx)


def pretrain_backward(model: MaeModel, cache) -> dict:
    enc_cache, dec_cache, diff, pred_shape, masked_idx = cache
    dpred = np.zeros(pred_shape, dtype=model.dtype)
    scale = np.asarray(2.0 / diff.size, dtype=model.dtype)
    np.put_along_axis(dpred, masked_idx[:, :, None], diff * scale, axis=1)
    dlatents, grads = _decode_backward(model, dpred, dec_cache)
    grads.update(_encode_backward(model, dlatents, enc_cache))
    return grads


def pretrain_loss_and_grads(model: MaeModel, images: np.ndarray,
                            masked_idx: np.ndarray, visible_idx: np.ndarray):
    loss, cache = pretrain_forward_batch(model, images, masked_idx, visible_idx)
    return loss, pretrain_backward(model, cache)


def regress_forward_batch(model: MaeModel, images: np.ndarray):
    """Predictions for a batch: linear head on mean-pooled full-image latents."""
    if not model.has_reg_head:
        raise ConfigError("model has no regression head; attach one first")
    latents, enc_cache = _encode_batch(model, np.asarray(images), None)
    pooled = latents.mean(axis=1)
    yhat = nn_core.linear_fwd(pooled, model.params["reg_head.w"],
                              model.params["reg_head.b"])[:, 0]
    return yhat, (enc_cache, latents, pooled)


def regress_backward(model: MaeModel, cache, dyhat: np.ndarray) -> dict:
    enc_cache, latents, pooled = cache
    dy = dyhat[:, None].astype(model.dtype)
    dpooled, dw, db = nn_core.linear_bwd(dy, pooled, model.params["reg_head.w"])
    dlatents = np.repeat(dpooled[:, None, :], latents.shape[1], axis=1) / latents.shape[1]
    grads = _encode_backward(model, dlatents.astype(model.dtype), enc_cache)
    grads["reg_head.w"] = dw
    grads["reg_head.b"] = db
    return grads


def forward_regress(model: MaeModel, image: np.ndarray) -> float:
    """Scalar traffic prediction for one spectrogram."""
    yhat, _ = regress_forward_batch(model, image[None])
    return float(yhat[0])


def reconstruction_error(model: MaeModel, image: np.ndarray, eval_seed: int) -> float:
    """Masked-patch MSE under a deterministic evaluation mask.

    The mask is drawn with the model's training ratio from ``eval_seed`` so the
    error for a given window is bit-reproducible.
    """
    if not model.has_decoder:
        raise ConfigError("reconstruction error needs the decoder")
    plan = sample_mask(model.config.num_patches, model.config.mask_ratio, eval_seed)
    loss, _ = pretrain_forward_batch(model, image[None],
                                     plan.masked_idx[None], plan.visible_idx[None])
    return loss


def reconstruction_errors(model: MaeModel, windows, base_seed: int = 0) -> np.ndarray:
    """Per-window reconstruction errors with seeds base_seed XOR window index."""
    return np.array([reconstruction_error(model, w.image, base_seed ^ i)
                     for i, w in enumerate(windows)])


# ---------------------------------------------------------------------------
# persistence


def save_model(model: MaeModel, path, provenance: str = "",
               extra_meta: Optional[dict] = None) -> None:
    """Self-describing checkpoint: config header + named f32 tensors."""
    cfg = model.config
    meta = {
        "e_dim": cfg.e_dim, "d_dim": cfg.d_dim, "n_blocks": cfg.n_blocks,
        "patch_size": cfg.patch_size, "mask_ratio": cfg.mask_ratio,
        "e_heads": cfg.e_heads, "d_heads": cfg.d_heads, "mlp_ratio": cfg.mlp_ratio,
        "has_decoder": model.has_decoder, "has_reg_head": model.has_reg_head,
        "provenance": provenance,
    }
    if extra_meta:
        meta.update(extra_meta)
    write_container(path, CHECKPOINT_MAGIC, meta, model.params)


def load_model(path) -> MaeModel:
    meta, tensors = read_container(path, CHECKPOINT_MAGIC)
    try:
        cfg = ModelConfig(
            e_dim=int(meta["e_dim"]), d_dim=int(meta["d_dim"]),
            n_blocks=int(meta["n_blocks"]), patch_size=int(meta["patch_size"]),
            mask_ratio=float(meta["mask_ratio"]), e_heads=int(meta["e_heads"]),
            d_heads=int(meta["d_heads"]), mlp_ratio=int(meta["mlp_ratio"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing config field {exc}") from exc
    expected = param_shapes(cfg, with_decoder=bool(meta["has_decoder"]),
                            with_reg_head=bool(meta["has_reg_head"]))
    if set(expected) != set(tensors):
        missing = sorted(set(expected) ^ set(tensors))
        raise FormatError(f"{path}: tensor set mismatch near {missing[:4]}")
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise FormatError(
                f"{path}: tensor {name} has shape {tensors[name].shape}, "
                f"expected {shape}")
    return MaeModel(config=cfg, params=tensors)


def load_meta(path) -> dict:
    meta, _ = read_container(path, CHECKPOINT_MAGIC)
    return meta
