"""Bayesian U-Net: dropout-equipped encoder-decoder, deterministic and
MC-dropout forward passes, and cross-entropy training.

Dropout placement follows the Bayesian-SegNet scheme: a dropout layer
before each max pooling and after each up-convolution. At inference,
MC sampling draws independent Bernoulli masks per sample from a
generator derived from (seed, slice index, sample index), so parallel
schedules cannot change results.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .core import DatasetManifest, LabelMap, Volume3D, _atomic_write_text, read_volume
from .pipeline import AugmentParams, augment, normalize_intensity

DROPOUT_PLACEMENTS = ("bayesian_unet", "none")


def derive_seed(*parts) -> int:
    """Stable 63-bit seed derived from a tuple of integers."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0] & 0x7FFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class UNetConfig:
    in_size: tuple[int, int] = (128, 128)  # (H, W)
    n_classes: int = 2
    depth: int = 4
    base_channels: int = 16
    dropout_rate: float = 0.5
    dropout_placement: str = "bayesian_unet"

    def __post_init__(self):
        h, w = self.in_size
        if h % (1 << self.depth) or w % (1 << self.depth):
            raise ValueError(
                f"in_size {self.in_size} must be divisible by 2^depth = {1 << self.depth}"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.dropout_placement not in DROPOUT_PLACEMENTS:
            raise ValueError(f"unknown dropout_placement {self.dropout_placement!r}")

    def to_dict(self) -> dict:
        return {
            "in_size": list(self.in_size),
            "n_classes": self.n_classes,
            "depth": self.depth,
            "base_channels": self.base_channels,
            "dropout_rate": self.dropout_rate,
            "dropout_placement": self.dropout_placement,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(
            in_size=tuple(d["in_size"]),
            n_classes=int(d["n_classes"]),
            depth=int(d["depth"]),
            base_channels=int(d["base_channels"]),
            dropout_rate=float(d["dropout_rate"]),
            dropout_placement=d["dropout_placement"],
        )


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 3
    max_iterations: int | None = None
    max_epochs: int | None = 300
    patience_epochs: int = 20
    min_delta: float = 1e-4
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class UNet(nn.Module):
    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        ch = config.base_channels
        self.encoders = nn.ModuleList()
        in_ch = 1
        channels = []
        for d in range(config.depth):
            out_ch = ch * (1 << d)
            self.encoders.append(_conv_block(in_ch, out_ch))
            channels.append(out_ch)
            in_ch = out_ch
        self.bottleneck = _conv_block(in_ch, ch * (1 << config.depth))
        self.upconvs = nn.ModuleList()
        self.decoders = nn.ModuleList()
        up_in = ch * (1 << config.depth)
        for d in reversed(range(config.depth)):
            skip_ch = channels[d]
            self.upconvs.append(nn.ConvTranspose2d(up_in, skip_ch, 2, stride=2))
            self.decoders.append(_conv_block(skip_ch * 2, skip_ch))
            up_in = skip_ch
        self.head = nn.Conv2d(up_in, config.n_classes, 1)

    def _dropout(self, x, generator):
        p = self.config.dropout_rate
        if self.config.dropout_placement == "none" or p == 0.0:
            return x
        if generator is None:
            return x  # masks all-ones: deterministic forward
        mask = (torch.rand(x.shape, generator=generator, device=x.device) >= p)
        return x * mask.to(x.dtype) / (1.0 - p)

    def forward(self, x, generator=None):
        """Logits for a batch (N, 1, H, W). A non-None generator draws one
        Bernoulli dropout mask set; None disables dropout."""
        skips = []
        for enc in self.encoders:
            x = enc(x)
            x = self._dropout(x, generator)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        x = self.bottleneck(x)
        for up, dec, skip in zip(self.upconvs, self.decoders, reversed(skips)):
            x = up(x)
            x = self._dropout(x, generator)
            x = dec(torch.cat([skip, x], dim=1))
        return self.head(x)


@dataclass
class ModelWeights:
    """Network parameters plus training provenance."""

    net: UNet
    config: UNetConfig
    iterations: int = 0
    seed: int = 0
    loss_history: list = field(default_factory=list)


def build_model(config: UNetConfig, seed: int = 0) -> ModelWeights:
    """He-initialized model, deterministic for a fixed seed."""
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, 0xB111D))
        net = UNet(config)
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d)):
                nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    net.eval()
    return ModelWeights(net=net, config=config, seed=seed)


def _to_input_tensor(image: np.ndarray, config: UNetConfig) -> torch.Tensor:
    img = np.asarray(image)
    if img.shape != tuple(config.in_size):
        raise ValueError(f"image shape {img.shape} != in_size {config.in_size}")
    if img.dtype == np.uint8:
        arr = img.astype(np.float32) / 255.0
    else:
        arr = img.astype(np.float32)
    return torch.from_numpy(arr)[None, None]


def forward_deterministic(weights: ModelWeights, image: np.ndarray) -> np.ndarray:
    """Softmax output with dropout disabled (masks all-ones); shape (C, H, W)."""
    weights.net.eval()
    with torch.no_grad():
        logits = weights.net(_to_input_tensor(image, weights.config))
        probs = torch.softmax(logits, dim=1)
    return probs[0].numpy()


def mc_forward(
    weights: ModelWeights,
    image: np.ndarray,
    t_mc: int,
    seed: int = 0,
    return_samples: bool = False,
):
    """MC-dropout prediction: mean softmax over t_mc dropout samples and the
    per-class predictive variance E[p^2] - E[p]^2, computed streaming.

    Returns (mean, variance[, samples]) with shapes (C, H, W).
    """
    if t_mc < 1:
        raise ValueError("t_mc must be >= 1")
    weights.net.eval()
    x = _to_input_tensor(image, weights.config)
    acc = None
    acc_sq = None
    samples = [] if return_samples else None
    with torch.no_grad():
        for t in range(t_mc):
            gen = torch.Generator()
            gen.manual_seed(derive_seed(seed, t, 0x5A11CE))
            p = torch.softmax(weights.net(x, generator=gen), dim=1)[0].double()
            if acc is None:
                acc = p.clone()
                acc_sq = p * p
            else:
                acc += p
                acc_sq += p * p
            if samples is not None:
                samples.append(p.numpy())
    mean = (acc / t_mc).numpy()
    var = np.maximum((acc_sq / t_mc).numpy() - mean * mean, 0.0)
    if return_samples:
        return mean, var, np.stack(samples)
    return mean, var


def predict_volume(
    weights: ModelWeights, volume: Volume3D, t_mc: int = 20, seed: int = 0
) -> tuple[LabelMap, np.ndarray, np.ndarray]:
    """Slice-by-slice MC-dropout prediction over a normalized volume.

    Returns (labels (Z,H,W), variance (C,Z,H,W), mean probs (Z,C,H,W)).
    Applies no post-processing.
    """
    c = weights.config.n_classes
    nz = volume.n_slices
    h, w = weights.config.in_size
    labels = np.zeros((nz, h, w), dtype=np.uint8)
    variance = np.zeros((c, nz, h, w), dtype=np.float64)
    means = np.zeros((nz, c, h, w), dtype=np.float64)
    for z in range(nz):
        mean, var = mc_forward(
            weights, volume.voxels[z], t_mc, seed=derive_seed(seed, z)
        )
        labels[z] = mean.argmax(axis=0).astype(np.uint8)  # ties -> lowest class
        variance[:, z] = var
        means[z] = mean
    return (
        LabelMap(labels=labels, n_classes=c),
        variance,
        means,
    )


def _prepare_slices(manifest: DatasetManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    slices = []
    for case in manifest.cases:
        if not case.labeled_slice_indices:
            continue
        vol = read_volume(case.volume_path)
        if vol.voxels.dtype == np.int16:
            vol = normalize_intensity(vol)
        lab = read_volume(case.label_path)
        for z in sorted(case.labeled_slice_indices):
            slices.append((vol.voxels[z], lab.voxels[z].astype(np.int64)))
    return slices


def train(
    weights: ModelWeights,
    manifest: DatasetManifest,
    train_config: TrainConfig,
    augment_params: AugmentParams | None = None,
    rng: np.random.Generator | None = None,
):
    """Train on the labeled slices of a manifest; see train_on_slices."""
    slices = _prepare_slices(manifest)
    return train_on_slices(weights, slices, train_config, augment_params, rng,
                           n_classes=manifest.n_classes)


def train_on_slices(
    weights: ModelWeights,
    slices: list[tuple[np.ndarray, np.ndarray]],
    train_config: TrainConfig,
    augment_params: AugmentParams | None = None,
    rng: np.random.Generator | None = None,
    n_classes: int | None = None,
):
    """Minimize pixel-wise cross-entropy over (image, label) slice pairs.

    Stops at max iterations/epochs, or early when validation loss fails to
    improve by min_delta for patience_epochs. Dropout stays active during
    training. Returns (weights, per-epoch loss history).
    """
    if not slices:
        raise ValueError("empty labeled set")
    c = n_classes or weights.config.n_classes
    for _, lab in slices:
        if lab.max() >= c:
            raise ValueError(f"label id {lab.max()} >= n_classes {c}")
    if rng is None:
        rng = np.random.default_rng(weights.seed)
    if train_config.max_iterations == 0 or train_config.max_epochs == 0:
        return weights, []

    # Held-out fraction for early stopping; skipped for tiny sets.
    n_val = int(round(train_config.val_fraction * len(slices)))
    use_early_stop = n_val >= 1 and len(slices) - n_val >= 1
    if use_early_stop:
        order = rng.permutation(len(slices))
        val_idx = set(order[:n_val].tolist())
        train_set = [s for i, s in enumerate(slices) if i not in val_idx]
        val_set = [slices[i] for i in sorted(val_idx)]
    else:
        train_set, val_set = list(slices), []

    net = weights.net
    net.train()
    opt = torch.optim.Adam(net.parameters(), lr=train_config.learning_rate)
    torch_gen = torch.Generator()
    torch_gen.manual_seed(derive_seed(weights.seed, weights.iterations, 0x7124))

    history = []
    best_val = np.inf
    stall = 0
    iteration = 0
    max_iter = train_config.max_iterations or np.inf
    max_epochs = train_config.max_epochs or np.inf
    epoch = 0
    done = False
    while not done and epoch < max_epochs:
        order = rng.permutation(len(train_set))
        epoch_losses = []
        for start in range(0, len(order), train_config.batch_size):
            batch_idx = order[start:start + train_config.batch_size]
            imgs, labs = [], []
            for i in batch_idx:
                img, lab = train_set[i]
                if augment_params is not None:
                    img, lab = augment(img, lab, augment_params, rng)
                imgs.append(_to_input_tensor(img, weights.config)[0])
                labs.append(torch.from_numpy(np.ascontiguousarray(lab)).long())
            x = torch.stack(imgs)
            y = torch.stack(labs)
            logits = net(x, generator=torch_gen)
            loss = F.cross_entropy(logits, y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.item()))
            iteration += 1
            if iteration >= max_iter:
                done = True
                break
        history.append(float(np.mean(epoch_losses)))
        epoch += 1
        if val_set and not done:
            val_loss = _validation_loss(net, val_set, weights.config)
            if val_loss < best_val - train_config.min_delta:
                best_val = val_loss
                stall = 0
            else:
                stall += 1
                if use_early_stop and stall >= train_config.patience_epochs:
                    done = True
    net.eval()
    weights.iterations += iteration
    weights.loss_history.extend(history)
    return weights, history


def _validation_loss(net, val_set, config) -> float:
    net.eval()
    losses = []
    with torch.no_grad():
        for img, lab in val_set:
            x = _to_input_tensor(img, config)
            y = torch.from_numpy(np.ascontiguousarray(lab)).long()[None]
            losses.append(float(F.cross_entropy(net(x), y).item()))
    net.train()
    return float(np.mean(losses))


def corrupt_weights(weights: ModelWeights, noise_std: float, seed: int = 0) -> ModelWeights:
    """Copy of the model with Gaussian noise added to every parameter.

    Used to produce variants spanning segmentation quality levels.
    """
    clone = build_model(weights.config, seed=weights.seed)
    clone.net.load_state_dict(weights.net.state_dict())
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, 0xC0221))
    with torch.no_grad():
        for p in clone.net.parameters():
            p.add_(torch.randn(p.shape, generator=gen) * noise_std)
    clone.iterations = weights.iterations
    return clone


def save_checkpoint(weights: ModelWeights, path: str) -> None:
    """Binary state dict + YAML metadata sidecar."""
    torch.save(weights.net.state_dict(), path + ".pt")
    meta = {
        "config": weights.config.to_dict(),
        "iterations": int(weights.iterations),
        "seed": int(weights.seed),
        "loss_history": [float(v) for v in weights.loss_history],
    }
    _atomic_write_text(path + ".yaml", yaml.safe_dump(meta, sort_keys=False))


def load_checkpoint(path: str) -> ModelWeights:
    with open(path + ".yaml") as f:
        meta = yaml.safe_load(f)
    config = UNetConfig.from_dict(meta["config"])
    weights = build_model(config, seed=int(meta["seed"]))
    weights.net.load_state_dict(torch.load(path + ".pt", weights_only=True))
    weights.iterations = int(meta["iterations"])
    weights.loss_history = [float(v) for v in meta.get("loss_history", [])]
    return weights


class BayesianSegmenter:
    """Estimator-style wrapper: fit on labeled slices, predict label volumes.

    Follows the fit/predict/get_params convention so the model composes
    with pipeline tooling from the wider ecosystem.
    """

    def __init__(self, in_size=(128, 128), n_classes=2, depth=4, base_channels=16,
                 dropout_rate=0.5, dropout_placement="bayesian_unet",
                 learning_rate=1e-4, batch_size=3, max_epochs=300,
                 max_iterations=None, t_mc=20, seed=0, augment=True):
        self.in_size = in_size
        self.n_classes = n_classes
        self.depth = depth
        self.base_channels = base_channels
        self.dropout_rate = dropout_rate
        self.dropout_placement = dropout_placement
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.max_iterations = max_iterations
        self.t_mc = t_mc
        self.seed = seed
        self.augment = augment

    _param_names = (
        "in_size", "n_classes", "depth", "base_channels", "dropout_rate",
        "dropout_placement", "learning_rate", "batch_size", "max_epochs",
        "max_iterations", "t_mc", "seed", "augment",
    )

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names}

    def set_params(self, **params):
        for name, value in params.items():
            if name not in self._param_names:
                raise ValueError(f"unknown parameter {name!r}")
            setattr(self, name, value)
        return self

    def fit(self, slices, y=None):
        config = UNetConfig(
            in_size=tuple(self.in_size), n_classes=self.n_classes,
            depth=self.depth, base_channels=self.base_channels,
            dropout_rate=self.dropout_rate,
            dropout_placement=self.dropout_placement,
        )
        self.weights_ = build_model(config, seed=self.seed)
        tc = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size,
            max_epochs=self.max_epochs, max_iterations=self.max_iterations,
        )
        params = AugmentParams() if self.augment else None
        train_on_slices(self.weights_, list(slices), tc, params,
                        np.random.default_rng(self.seed))
        return self

    def predict(self, volume: Volume3D) -> LabelMap:
        labels, _, _ = predict_volume(self.weights_, volume, self.t_mc, self.seed)
        return labels

    def predict_with_uncertainty(self, volume: Volume3D):
        return predict_volume(self.weights_, volume, self.t_mc, self.seed)
