"""Small 2D U-Net, focal + soft-Dice loss, and domain-specific batch norm."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    num_classes: int = 3
    depth: int = 3
    base_channels: int = 8
    norm_mode: str = "batch"  # "batch" or "dsbn"
    num_domains: int = 2
    bn_momentum: float = 0.1

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 4:
            raise ValueError(f"base_channels must be >= 4, got {self.base_channels}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.norm_mode not in ("batch", "dsbn"):
            raise ValueError(f"norm_mode must be 'batch' or 'dsbn', got {self.norm_mode!r}")
        if self.norm_mode == "dsbn" and self.num_domains < 1:
            raise ValueError("dsbn needs num_domains >= 1")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


def is_buffer(name: str) -> bool:
    return ".running_" in name


def trainable_names(params) -> list[str]:
    return [n for n in params if not is_buffer(n)]


def _bn_names(cfg: UNetConfig, prefix: str) -> list[str]:
    if cfg.norm_mode == "dsbn":
        return [f"{prefix}.running_{s}.d{d}" for d in range(cfg.num_domains) for s in ("mean", "var")]
    return [f"{prefix}.running_mean", f"{prefix}.running_var"]


def init_params(cfg: UNetConfig, rng: np.random.Generator) -> "OrderedDict[str, np.ndarray]":
    """He-normal conv weights, zero biases, unit BN scale."""
    params: OrderedDict[str, np.ndarray] = OrderedDict()

    def conv(name, cin, cout, k):
        std = np.sqrt(2.0 / (cin * k * k))
        params[f"{name}.weight"] = (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)

    def bn(name, c):
        params[f"{name}.weight"] = np.ones(c, dtype=np.float32)
        params[f"{name}.bias"] = np.zeros(c, dtype=np.float32)
        for buf in _bn_names(cfg, name):
            params[buf] = np.zeros(c, dtype=np.float32) if "mean" in buf else np.ones(c, dtype=np.float32)

    for lvl in range(cfg.depth):
        cin = cfg.in_channels if lvl == 0 else cfg.channels(lvl - 1)
        c = cfg.channels(lvl)
        conv(f"enc{lvl}.conv0", cin, c, 3)
        bn(f"enc{lvl}.bn0", c)
        conv(f"enc{lvl}.conv1", c, c, 3)
        bn(f"enc{lvl}.bn1", c)
    for lvl in range(cfg.depth - 2, -1, -1):
        c = cfg.channels(lvl)
        conv(f"dec{lvl}.conv0", cfg.channels(lvl + 1) + c, c, 3)
        bn(f"dec{lvl}.bn0", c)
        conv(f"dec{lvl}.conv1", c, c, 3)
        bn(f"dec{lvl}.bn1", c)
    conv("head", cfg.channels(0), cfg.num_classes, 1)
    return params


def copy_params(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.copy()) for k, v in params.items())


def dsbn_normalize(x: Tensor, domain: int, params, prefix: str, gamma: Tensor, beta: Tensor, train_mode: bool,
                   num_domains: int, momentum: float = 0.1) -> Tensor:
    """Batch norm with running statistics kept per domain; scale/shift shared."""
    if domain is None or not 0 <= int(domain) < num_domains:
        raise ValueError(f"unknown domain id {domain!r}; expected 0..{num_domains - 1}")
    rm = params[f"{prefix}.running_mean.d{int(domain)}"]
    rv = params[f"{prefix}.running_var.d{int(domain)}"]
    return T.batch_norm(x, gamma, beta, rm, rv, train_mode, momentum)


def unet_forward(params, x, cfg: UNetConfig, domain: int | None = None, train_mode: bool = False,
                 leaves: dict | None = None) -> Tensor:
    """Logits (N, num_classes, H, W) for a batch ``x`` (N, 1, H, W).

    If ``leaves`` is a dict, trainable parameters become gradient-tracked
    tensors and are recorded there by name.  In training mode the running BN
    statistics inside ``params`` are updated in place.
    """
    x = T.as_tensor(x)
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"unet_forward expects [N,{cfg.in_channels},H,W]", x.shape)
    div = 2 ** (cfg.depth - 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ShapeError(f"unet_forward: H and W must be divisible by {div} (2^(depth-1))", x.shape)
    if cfg.norm_mode == "dsbn" and domain is None:
        raise ValueError("unet_forward: a domain id is required when norm_mode is 'dsbn'")

    def p(name):
        if leaves is None:
            return Tensor(params[name])
        t = leaves.get(name)
        if t is None:
            t = leaves[name] = Tensor(params[name], requires_grad=True)
        return t

    def block(h, prefix):
        for j in range(2):
            h = T.conv2d(h, p(f"{prefix}.conv{j}.weight"), p(f"{prefix}.conv{j}.bias"), 1, 1)
            bn = f"{prefix}.bn{j}"
            if cfg.norm_mode == "dsbn":
                h = dsbn_normalize(h, domain, params, bn, p(f"{bn}.weight"), p(f"{bn}.bias"), train_mode,
                                   cfg.num_domains, cfg.bn_momentum)
            else:
                h = T.batch_norm(h, p(f"{bn}.weight"), p(f"{bn}.bias"), params[f"{bn}.running_mean"],
                                 params[f"{bn}.running_var"], train_mode, cfg.bn_momentum)
            h = T.relu(h)
        return h

    skips = []
    h = x
    for lvl in range(cfg.depth):
        h = block(h, f"enc{lvl}")
        if lvl < cfg.depth - 1:
            skips.append(h)
            h = T.max_pool2d(h)
    for lvl in range(cfg.depth - 2, -1, -1):
        h = T.concat([T.upsample2d(h), skips[lvl]], axis=1)
        h = block(h, f"dec{lvl}")
    return T.conv2d(h, p("head.weight"), p("head.bias"), 1, 0)

# ---------------------------------------------------------------------------
# loss


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 2.0
    class_weights: tuple | None = None
    dice_eps: float = 1e-5
    w_focal: float = 1.0
    w_dice: float = 1.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("focal gamma must be >= 0")
        if self.w_focal < 0 or self.w_dice < 0 or self.w_focal + self.w_dice <= 0:
            raise ValueError("loss weights must be >= 0 with a positive sum")
        if self.class_weights is not None and any(w < 0 for w in self.class_weights):
            raise ValueError("class weights must be >= 0")


def one_hot(target: np.ndarray, num_classes: int) -> np.ndarray:
    """(N, H, W) integer labels -> (N, C, H, W) float32 one-hot."""
    t = np.asarray(target)
    if t.min() < 0 or t.max() >= num_classes:
        raise ValueError(f"labels must lie in [0, {num_classes}), got range [{t.min()}, {t.max()}]")
    ti = t.astype(np.int64)
    if not np.array_equal(ti, t):
        raise ValueError("labels must be integer valued")
    return (np.arange(num_classes).reshape(1, -1, 1, 1) == ti[:, None]).astype(np.float32)


def focal_dice_loss(logits: Tensor, target: np.ndarray, config: LossConfig = LossConfig(),
                    return_parts: bool = False):
    """``w_focal * focal + w_dice * (1 - mean foreground soft Dice)``.

    The focal term is averaged over pixels; soft Dice is pooled over the batch
    per class, smoothed by ``dice_eps`` in numerator and denominator.
    """
    n, c = logits.shape[:2]
    y = one_hot(target, c)
    if y.shape != logits.shape:
        raise ShapeError("focal_dice_loss: target does not match logits", target.shape, logits.shape)
    logp = T.log_softmax(logits, axis=1)
    prob = T.exp(logp)
    weights = y if config.class_weights is None else y * np.asarray(config.class_weights, np.float32).reshape(1, -1, 1, 1)
    modulated = logp if config.gamma == 0 else T.mul(T.pow_scalar(T.sub(1.0, prob), config.gamma), logp)
    pixels = n * logits.shape[2] * logits.shape[3]
    focal = T.mul(T.sum_(T.mul(modulated, Tensor(weights))), -1.0 / pixels)

    axes = (0, 2, 3)
    inter = T.sum_(T.mul(prob, Tensor(y)), axis=axes)
    denom = T.add(T.sum_(prob, axis=axes), Tensor(y.sum(axis=axes) + np.float32(config.dice_eps)))
    dice = T.div(T.add(T.mul(inter, 2.0), config.dice_eps), denom)
    fg = np.zeros(c, dtype=np.float32)
    fg[1:] = 1.0
    dice_fg = T.mul(T.sum_(T.mul(dice, Tensor(fg))), 1.0 / (c - 1))
    dice_loss = T.sub(1.0, dice_fg)
    loss = T.add(T.mul(focal, config.w_focal), T.mul(dice_loss, config.w_dice))
    if return_parts:
        return loss, focal.item(), dice_loss.item()
    return loss
