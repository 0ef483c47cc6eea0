"""M-shaped encoder-decoder with MSU skip connections and deep supervision.

Topology for ``levels = D`` and channel widths ``c_i = base * 2**i``:

* the input stack ``x`` is standardized per channel (``standardize_input``),
  which removes per-image brightness offsets before any convolution;
* encoder ``e^0 = block(x)``; for ``i >= 1``
  ``e^i = block(concat(maxpool(e^{i-1}), relu(inject_i(avgpool^i(x)))))``
  (the input pyramid is the left leg of the "M");
* skip ``s^i = e^i + MSU_i(e^i, up(proj_i(e^{i+1})))`` for ``i < D``;
* decoder ``d^D = e^D``, ``d^i = block(concat(s^i, up(d^{i+1})))``;
* side head ``z_i = up^i(conv1x1(d^i))`` per decoder level (the right leg),
  side map ``sigmoid(z_i)``, final map ``sigmoid(sum_i w_i z_i)``.

``block`` is conv3x3-ReLU-conv3x3-ReLU. In front of the network the DPCN turns
the preprocessed image into its iteration sequence; the selected iterations
are stacked after the image to form the input.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ops
from .dpcn import DeformConvLayer, DpcnParams, dpcn_run, select_iterations
from .layers import Conv2d
from .loss import LossConfig, combined_supervision_loss
from .msu import MsuBlock, msu_forward
from .optim import AdamState, adam_step
from .tensor import ContractError, DimensionError, Tensor, backward, no_grad

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class M2NetConfig:
    levels: int = 4
    base_channels: int = 16
    use_dpcn: bool = True
    dpcn_iterations: tuple[int, ...] = (5, 10, 15)
    dpcn: DpcnParams = field(default_factory=DpcnParams)
    deep_supervision: bool = True
    standardize_input: bool = True
    side_output_weights: Optional[tuple[float, ...]] = None  # uniform when None

    @property
    def in_channels(self) -> int:
        return 1 + (len(self.dpcn_iterations) if self.use_dpcn else 0)

    @property
    def channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.levels + 1)]

    @property
    def fusion_weights(self) -> tuple[float, ...]:
        if self.side_output_weights is None:
            return tuple([1.0 / self.levels] * self.levels)
        return tuple(self.side_output_weights)

    def validate(self) -> None:
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        w = self.fusion_weights
        if len(w) != self.levels or abs(sum(w) - 1.0) > 1e-9 or min(w) < 0:
            raise ConfigError(f"side_output_weights must be {self.levels} non-negative reals summing to 1")
        if self.use_dpcn:
            if not self.dpcn_iterations:
                raise ConfigError("dpcn_iterations must not be empty")
            for n in self.dpcn_iterations:
                if not 1 <= n <= self.dpcn.iterations:
                    raise ConfigError(f"dpcn iteration {n} outside 1..{self.dpcn.iterations}")


@dataclass
class DoubleConv:
    a: Conv2d
    b: Conv2d

    @classmethod
    def create(cls, rng, c_in: int, c_out: int) -> "DoubleConv":
        return cls(Conv2d.create(rng, c_in, c_out, 3), Conv2d.create(rng, c_out, c_out, 3))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.relu(self.b(ops.relu(self.a(x))))

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {**self.a.named_parameters(f"{prefix}.a"), **self.b.named_parameters(f"{prefix}.b")}


@dataclass
class Output:
    prob: Tensor  # final fused map [1, H, W]
    sides: list[Tensor]  # per decoder level, full resolution, level 0 first


class M2NetModel:
    def __init__(self, cfg: M2NetConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        ch = cfg.channels
        d = cfg.levels
        self.encoder = [DoubleConv.create(rng, cfg.in_channels, ch[0])]
        self.inject: list[Conv2d] = []
        for i in range(1, d + 1):
            self.inject.append(Conv2d.create(rng, cfg.in_channels, ch[i - 1], 1))
            self.encoder.append(DoubleConv.create(rng, 2 * ch[i - 1], ch[i]))
        self.proj = [Conv2d.create(rng, ch[i + 1], ch[i], 1) for i in range(d)]
        self.msu = [MsuBlock.create(rng, ch[i]) for i in range(d)]
        self.decoder = [DoubleConv.create(rng, ch[i] + ch[i + 1], ch[i]) for i in range(d)]
        self.heads = [Conv2d.create(rng, ch[i], 1, 1) for i in range(d)]
        self.dpcn_layer = DeformConvLayer.create() if cfg.use_dpcn else None

    # ------------------------------------------------------------ parameters

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.encoder):
            params.update(blk.named_parameters(f"enc{i}"))
        for i, conv in enumerate(self.inject, start=1):
            params.update(conv.named_parameters(f"inject{i}"))
        for i in range(self.cfg.levels):
            params.update(self.proj[i].named_parameters(f"proj{i}"))
            params.update(self.msu[i].named_parameters(f"msu{i}"))
            params.update(self.decoder[i].named_parameters(f"dec{i}"))
            params.update(self.heads[i].named_parameters(f"head{i}"))
        if self.dpcn_layer is not None:
            params.update(self.dpcn_layer.named_parameters("dpcn"))
        return params

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        if missing:
            raise ContractError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data[...] = arr

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    # --------------------------------------------------------------- forward

    def stack_input(self, image) -> Tensor:
        """Preprocessed gray image ``[H, W]`` -> network input ``[in_channels, H, W]``."""
        img = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=np.float64))
        if img.data.ndim == 2:
            img = Tensor(img.data[None])
        if not self.cfg.use_dpcn:
            return img
        seq = dpcn_run(img, self.cfg.dpcn, self.dpcn_layer)
        return ops.concat_channels([img, select_iterations(seq, self.cfg.dpcn_iterations)])

    def forward(self, x: Tensor) -> Output:
        cfg = self.cfg
        d = cfg.levels
        if x.data.ndim != 3 or x.shape[0] != cfg.in_channels:
            raise DimensionError(f"expected [{cfg.in_channels}, H, W] input, got {x.shape}")
        h, w = x.shape[1:]
        if h % 2**d or w % 2**d:
            raise DimensionError(f"input {h}x{w} is not divisible by 2^{d}")

        if cfg.standardize_input:
            x = ops.standardize_channels(x)
        feats = [self.encoder[0](x)]
        pyramid = x
        for i in range(1, d + 1):
            pyramid = ops.avgpool2(pyramid)
            injected = ops.relu(self.inject[i - 1](pyramid))
            feats.append(self.encoder[i](ops.concat_channels([ops.maxpool2(feats[-1]), injected])))

        skips = []
        for i in range(d):
            below = ops.upsample_bilinear2(self.proj[i](feats[i + 1]))
            skips.append(ops.add(feats[i], msu_forward(feats[i], below, self.msu[i])))

        dec = feats[d]
        decoded: list[Tensor] = [None] * d  # type: ignore[list-item]
        for i in reversed(range(d)):
            dec = self.decoder[i](ops.concat_channels([skips[i], ops.upsample_bilinear2(dec)]))
            decoded[i] = dec

        logits = []
        for i in range(d):
            z = self.heads[i](decoded[i])
            for _ in range(i):
                z = ops.upsample_bilinear2(z)
            logits.append(z)
        fused = None
        for z, wgt in zip(logits, cfg.fusion_weights):
            term = ops.scale(z, wgt)
            fused = term if fused is None else ops.add(fused, term)
        return Output(prob=ops.sigmoid(fused), sides=[ops.sigmoid(z) for z in logits])

    def __call__(self, image) -> Output:
        return self.forward(self.stack_input(image))


def build(cfg: M2NetConfig = M2NetConfig(), seed: int = 0) -> M2NetModel:
    model = M2NetModel(cfg, seed)
    log.info("built M2Net: %d parameters", model.parameter_count())
    return model


def predict(model: M2NetModel, image, threshold: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Probability map ``[H, W]`` and binary mask (``prob >= threshold`` is vessel)."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError("threshold must lie in [0, 1]")
    with no_grad():
        prob = model(image).prob.data[0]
    return prob, (prob >= threshold).astype(np.uint8)


# ----------------------------------------------------------------- training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0


@dataclass
class Sample:
    """One training item: preprocessed image, binary label, FOV mask (all ``[H, W]``)."""

    image: np.ndarray
    label: np.ndarray
    fov: Optional[np.ndarray] = None


def sample_loss(model: M2NetModel, item: Sample, loss_cfg: LossConfig) -> Tensor:
    out = model(item.image)
    if model.cfg.deep_supervision:
        maps = [*out.sides, out.prob]
    else:
        maps = [out.prob]
    return combined_supervision_loss(maps, item.label, item.fov, loss_cfg)


def train(
    model: M2NetModel,
    dataset: Sequence[Sample],
    loss_cfg: LossConfig = LossConfig(),
    train_cfg: TrainConfig = TrainConfig(),
    callback: Optional[Callable[[dict], None]] = None,
) -> list[dict]:
    """Mini-batch Adam training. Returns one ``{epoch, mean_loss, lr}`` record per epoch.

    Gradients of the items in a batch are summed in item order, averaged, then
    applied in one Adam step; the shuffle is seeded, so runs replay exactly.
    """
    if not dataset:
        raise ContractError("training dataset is empty")
    if train_cfg.batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    params = model.parameters()
    state = AdamState(lr=train_cfg.lr, beta1=train_cfg.beta1, beta2=train_cfg.beta2, eps=train_cfg.eps)
    rng = np.random.default_rng(train_cfg.seed)
    history = []
    for epoch in range(1, train_cfg.epochs + 1):
        order = rng.permutation(len(dataset))
        losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start : start + train_cfg.batch_size]
            model.zero_grad()
            for idx in batch:
                loss = sample_loss(model, dataset[idx], loss_cfg)
                backward(loss)
                losses.append(loss.item())
            grads = {k: p.grad / len(batch) for k, p in params.items() if p.grad is not None}
            adam_step(params, grads, state)
        model.zero_grad()
        record = {"epoch": epoch, "mean_loss": float(np.mean(losses)), "lr": state.lr}
        history.append(record)
        log.info("epoch %d mean loss %.6f", epoch, record["mean_loss"])
        if callback is not None:
            callback(record)
    return history
