"""Score-model training on folded Hankel tensors (or raw image patches).

The approximator is a small time-conditioned convolutional network wrapped
around a Gaussian backbone: it predicts a mean field m(x, sigma) and a
per-channel variance v, and scores as -(x - m) / (v + sigma^2).  The mean
combines a learnable template (initialized at the data mid-gray) with a
convolutional correction whose influence is gated off at small noise scales.
Constant output gains on the template and variance parameters speed up
function-space travel without changing the optimizer.

All randomness (initialization, crops, noise draws) comes from one numpy
generator so that training is byte-reproducible under a fixed seed.
"""

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as tf

from . import hankel
from .hankel import HankelLayout
from .patches import list_training_images, load_image, random_crop
from .score import NoiseSchedule

SIGMA_DATA = 0.5

CHECKPOINT_MAGIC = b"SHGM"
CHECKPOINT_VERSION = 1

TRAIN_DOMAIN_HANKEL = "hankel"
TRAIN_DOMAIN_IMAGE = "image"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    steps: int = 2000
    images: int = 10
    batch: int = 1              # perturbation draws per crop and step
    train_domain: str = TRAIN_DOMAIN_HANKEL
    hidden: int = 32
    blocks: int = 2
    pos_channels: int = 8
    emb_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.images < 1:
            raise ValueError("images count must be >= 1")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")
        if self.train_domain not in (TRAIN_DOMAIN_HANKEL, TRAIN_DOMAIN_IMAGE):
            raise ValueError(f"unknown train domain {self.train_domain!r}")


class _FilmBlock(nn.Module):
    def __init__(self, width, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.film = nn.Linear(emb_dim, 2 * width)

    def forward(self, h, emb):
        scale, shift = self.film(emb).chunk(2, dim=-1)
        u = tf.silu(self.conv1(h))
        u = u * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return h + self.conv2(tf.silu(u))


class ScoreNet(nn.Module):
    """Gaussian-backbone score network over (B, C, H, W) float32 tensors."""

    GAIN_TEMPLATE = 16.0
    GAIN_CONV = 2.0
    GAIN_VAR = 12.0
    INIT_VAR = 0.25

    def __init__(self, channels, height, width, hidden=32, blocks=2,
                 pos_channels=8, emb_dim=64):
        super().__init__()
        self.geometry = (channels, height, width)
        self.register_buffer("freqs", torch.zeros(emb_dim // 2))
        self.emb_mlp = nn.Sequential(
            nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.template = nn.Parameter(torch.zeros(1, channels, height, width))
        self.w_v = nn.Parameter(torch.zeros(channels))
        self.pos = nn.Parameter(torch.zeros(1, pos_channels, height, width))
        self.conv_in = nn.Conv2d(channels + pos_channels, hidden, 3, padding=1)
        self.blocks = nn.ModuleList(
            _FilmBlock(hidden, emb_dim) for _ in range(blocks))
        self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)

    def mean_var(self, x, log_sigma):
        sigma = torch.exp(log_sigma)
        c_in = 1.0 / torch.sqrt(sigma ** 2 + SIGMA_DATA ** 2)
        ang = log_sigma[:, None] * self.freqs[None, :]
        emb = self.emb_mlp(torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1))
        u = c_in[:, None, None, None] * x
        p = self.pos.expand(x.shape[0], -1, -1, -1)
        h = tf.silu(self.conv_in(torch.cat([u, p], dim=1)))
        for blk in self.blocks:
            h = blk(h, emb)
        conv_gate = (sigma ** 2 / (sigma ** 2 + SIGMA_DATA ** 2))[:, None, None, None]
        m = (0.5 + self.GAIN_TEMPLATE * self.template
             + conv_gate * self.GAIN_CONV * self.conv_out(h))
        v = (self.GAIN_VAR * self.w_v) ** 2
        return m, v

    def forward(self, x, log_sigma):
        m, v = self.mean_var(x, log_sigma)
        sigma = torch.exp(log_sigma)
        denom = v[None, :, None, None] + (sigma ** 2)[:, None, None, None]
        return -(x - m) / denom


def _init_parameters(net: ScoreNet, rng: np.random.Generator) -> None:
    """Deterministic initialization driven entirely by the numpy generator."""
    def fill(tensor, values):
        with torch.no_grad():
            tensor.copy_(torch.from_numpy(np.asarray(values, dtype=np.float32)))

    fill(net.freqs, rng.standard_normal(net.freqs.shape) * 2.0)
    fill(net.template, rng.standard_normal(net.template.shape) * 0.002)
    fill(net.w_v, np.full(net.w_v.shape, np.sqrt(net.INIT_VAR) / net.GAIN_VAR))
    fill(net.pos, rng.standard_normal(net.pos.shape))
    for name, module in net.named_modules():
        if not isinstance(module, (nn.Conv2d, nn.Linear)):
            continue
        if name == "conv_out":
            fill(module.weight, np.zeros(module.weight.shape))
            fill(module.bias, np.zeros(module.bias.shape))
            continue
        fan_in = int(np.prod(module.weight.shape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        fill(module.weight, rng.uniform(-bound, bound, size=module.weight.shape))
        if module.bias is not None:
            fill(module.bias, rng.uniform(-bound, bound, size=module.bias.shape))


@dataclass
class TrainedScore:
    """Numpy-facing score function backed by a trained torch network.

    Accepts (H, W, C) channels-last float arrays matching the training
    geometry and evaluates in float32, converting at the boundary.
    """

    net: ScoreNet
    layout: HankelLayout
    schedule: NoiseSchedule
    train_domain: str
    config: TrainConfig
    fold_target: tuple[int, int]
    history: list = field(default_factory=list, repr=False)

    def __call__(self, x: np.ndarray, sigma: float) -> np.ndarray:
        c, h, w = self.net.geometry
        if x.shape != (h, w, c):
            raise ValueError(f"tensor shape {x.shape} != model geometry {(h, w, c)}")
        with torch.no_grad():
            xt = torch.from_numpy(
                np.ascontiguousarray(np.moveaxis(x, -1, 0), dtype=np.float32))[None]
            log_sigma = torch.log(torch.full((1,), float(sigma), dtype=torch.float32))
            out = self.net(xt, log_sigma)[0]
        return np.moveaxis(out.numpy().astype(np.float64), 0, -1)


def _score_geometry(layout: HankelLayout, fold_target, train_domain: str):
    if train_domain == TRAIN_DOMAIN_IMAGE:
        return hankel.CHANNELS, layout.patch_h, layout.patch_w
    spec = hankel.fold_spec(layout, *fold_target)
    return spec.fold_c, spec.fold_h, spec.fold_w


def _to_training_tensor(patch: np.ndarray, layout: HankelLayout, fold_target,
                        train_domain: str) -> np.ndarray:
    """Channels-first float32 tensor for one training patch."""
    if train_domain == TRAIN_DOMAIN_IMAGE:
        arr = patch
    else:
        arr = hankel.fold(hankel.lift(patch, layout), *fold_target).data
    return np.moveaxis(arr, -1, 0).astype(np.float32)


def train(dataset, layout: HankelLayout, schedule: NoiseSchedule,
          cfg: TrainConfig, fold_target: tuple[int, int] | None = None,
          log_every: int = 0) -> TrainedScore:
    """Train the score approximator; see the module docstring for the model.

    `dataset` is a directory of PNGs (the first cfg.images files in
    lexicographic order are used) or a sequence of [0, 1] image arrays.
    Each step draws one random patch-sized crop per training image, maps it
    to the training domain, and takes one Adam step on the sigma^2-weighted
    denoising-score-matching loss.
    """
    if fold_target is None:
        fold_target = hankel.default_fold_target(layout)
    if isinstance(dataset, (str, Path)):
        files = list_training_images(dataset, cfg.images)
        if not files:
            raise ValueError(f"no training images found in {dataset}")
        images = [load_image(f) for f in files]
    else:
        images = [np.asarray(im, dtype=np.float64) for im in dataset]
        if not images:
            raise ValueError("empty training dataset")
        images = images[:cfg.images]
    for im in images:
        if im.shape[0] < layout.patch_h or im.shape[1] < layout.patch_w:
            raise ValueError(
                f"training image {im.shape} smaller than patch "
                f"{layout.patch_h}x{layout.patch_w}")

    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x5c07e]))
    c, h, w = _score_geometry(layout, fold_target, cfg.train_domain)
    net = ScoreNet(c, h, w, hidden=cfg.hidden, blocks=cfg.blocks,
                   pos_channels=cfg.pos_channels, emb_dim=cfg.emb_dim)
    _init_parameters(net, rng)
    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr, betas=(0.95, 0.99))

    sigmas = schedule.sigmas
    history = []
    for step in range(cfg.steps):
        items = []
        for img in images:
            crop = random_crop(img, layout.patch_h, rng)
            tensor = _to_training_tensor(crop, layout, fold_target,
                                         cfg.train_domain)
            for _ in range(cfg.batch):
                items.append(tensor)
        batch = torch.from_numpy(np.stack(items))
        idx = rng.integers(schedule.count, size=len(items))
        sig = torch.from_numpy(sigmas[idx].astype(np.float32))
        z = torch.from_numpy(
            rng.standard_normal(batch.shape).astype(np.float32))
        x_t = batch + sig[:, None, None, None] * z
        s = net(x_t, torch.log(sig))
        resid = sig[:, None, None, None] * s + z
        loss = (resid ** 2).sum(dim=(1, 2, 3)).mean()
        if not torch.isfinite(loss):
            raise FloatingPointError(
                f"non-finite training loss at step {step} "
                f"(sigma indices {idx.tolist()})")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss))
        if log_every and (step + 1) % log_every == 0:
            tail = history[-min(50, len(history)):]
            print(f"step {step + 1}/{cfg.steps} loss {float(np.mean(tail)):.1f}",
                  flush=True)

    net.eval()
    return TrainedScore(net=net, layout=layout, schedule=schedule,
                        train_domain=cfg.train_domain, config=cfg,
                        fold_target=fold_target, history=history)


def _pack_params(net: ScoreNet) -> bytes:
    buf = io.BytesIO()
    entries = sorted(list(net.named_parameters()) + list(net.named_buffers()))
    buf.write(struct.pack("<I", len(entries)))
    for name, tensor in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        arr = tensor.detach().numpy().astype("<f4")
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def _unpack_params(net: ScoreNet, blob: bytes) -> None:
    buf = io.BytesIO(blob)
    (count,) = struct.unpack("<I", buf.read(4))
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", buf.read(2))
        name = buf.read(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}I", buf.read(4 * ndim))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape)
        state[name] = torch.from_numpy(arr.copy())
    net.load_state_dict(state)


def save_checkpoint(model: TrainedScore, path) -> None:
    """SHGM checkpoint: magic, version, geometry, schedule, domain, params."""
    cfg = model.config
    layout = model.layout
    domain_flag = 0 if model.train_domain == TRAIN_DOMAIN_HANKEL else 1
    header = struct.pack(
        "<4sI6I2dI B 4I",
        CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
        layout.patch_h, layout.patch_w, hankel.CHANNELS, layout.window,
        model.fold_target[0], model.fold_target[1],
        model.schedule.sigma_min, model.schedule.sigma_max,
        model.schedule.count,
        domain_flag,
        cfg.hidden, cfg.blocks, cfg.pos_channels, cfg.emb_dim)
    blob = _pack_params(model.net)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)


def load_checkpoint(path) -> TrainedScore:
    with open(path, "rb") as fh:
        head_size = struct.calcsize("<4sI6I2dI B 4I")
        head = fh.read(head_size)
        if len(head) != head_size:
            raise ValueError("truncated checkpoint")
        (magic, version, patch_h, patch_w, channels, window,
         fold_h, fold_w, sigma_min, sigma_max, count, domain_flag,
         hidden, blocks, pos_channels, emb_dim) = struct.unpack(
            "<4sI6I2dI B 4I", head)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError("not a SHGM checkpoint")
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if channels != hankel.CHANNELS:
            raise ValueError(f"unsupported channel count {channels}")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        blob = fh.read(blob_len)
    layout = HankelLayout(patch_h, patch_w, window)
    schedule = NoiseSchedule(sigma_min, sigma_max, count)
    train_domain = TRAIN_DOMAIN_HANKEL if domain_flag == 0 else TRAIN_DOMAIN_IMAGE
    cfg = TrainConfig(hidden=hidden, blocks=blocks, pos_channels=pos_channels,
                      emb_dim=emb_dim, train_domain=train_domain)
    c, h, w = _score_geometry(layout, (fold_h, fold_w), train_domain)
    net = ScoreNet(c, h, w, hidden=hidden, blocks=blocks,
                   pos_channels=pos_channels, emb_dim=emb_dim)
    _unpack_params(net, blob)
    net.eval()
    return TrainedScore(net=net, layout=layout, schedule=schedule,
                        train_domain=train_domain, config=cfg,
                        fold_target=(fold_h, fold_w))
