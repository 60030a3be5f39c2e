"""InceptionTime-style 1-D CNN with a strided stem and swappable output heads."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
from torch import nn

CHECKPOINT_VERSION = 1

PRETRAIN = "pretrain"
FINETUNE = "finetune"


class CheckpointError(RuntimeError):
    pass


class HeadMismatchError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    n_leads: int = 8
    input_len: int = 800
    stem_kernel: int = 5
    stem_stride: int = 2
    stem_channels: int = 32
    n_blocks: int = 6
    inception_kernels: tuple = field(default=(9, 19, 39))
    n_filters: int = 32
    bottleneck: int = 32
    residual_every: int = 3

    def __post_init__(self):
        self.inception_kernels = tuple(int(k) for k in self.inception_kernels)
        if any(k % 2 == 0 for k in self.inception_kernels) or self.stem_kernel % 2 == 0:
            raise ValueError("kernel sizes must be odd")
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be at least 1")

    @property
    def feature_dim(self) -> int:
        return self.n_filters * (len(self.inception_kernels) + 1)

    def stem_lengths(self) -> list[int]:
        pad = self.stem_kernel // 2
        lengths, n = [], self.input_len
        for _ in range(2):
            n = (n + 2 * pad - self.stem_kernel) // self.stem_stride + 1
            lengths.append(n)
        return lengths


class InceptionBlock(nn.Module):
    def __init__(self, in_channels: int, n_filters: int, bottleneck: int, kernels):
        super().__init__()
        if in_channels > 1 and bottleneck > 0:
            self.bottleneck = nn.Conv1d(in_channels, bottleneck, 1, bias=False)
            branch_in = bottleneck
        else:
            self.bottleneck = nn.Identity()
            branch_in = in_channels
        self.convs = nn.ModuleList(
            nn.Conv1d(branch_in, n_filters, k, padding=k // 2, bias=False) for k in kernels
        )
        self.pool = nn.MaxPool1d(3, stride=1, padding=1)
        self.pool_conv = nn.Conv1d(in_channels, n_filters, 1, bias=False)
        self.bn = nn.BatchNorm1d(n_filters * (len(kernels) + 1), eps=1e-5, momentum=0.1)
        self.act = nn.ReLU()

    def forward(self, x):
        z = self.bottleneck(x)
        out = [conv(z) for conv in self.convs]
        out.append(self.pool_conv(self.pool(x)))
        return self.act(self.bn(torch.cat(out, dim=1)))


class Shortcut(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv = nn.Conv1d(in_channels, out_channels, 1, bias=False)
        self.bn = nn.BatchNorm1d(out_channels, eps=1e-5, momentum=0.1)

    def forward(self, x):
        return self.bn(self.conv(x))


class FeatureExtractor(nn.Module):
    """Stem (two strided conv+BN+GELU) -> inception blocks -> global average pool."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        pad = cfg.stem_kernel // 2
        c = cfg.stem_channels
        self.stem = nn.Sequential(
            nn.Conv1d(cfg.n_leads, c, cfg.stem_kernel, stride=cfg.stem_stride, padding=pad),
            nn.BatchNorm1d(c, eps=1e-5, momentum=0.1),
            nn.GELU(),
            nn.Conv1d(c, c, cfg.stem_kernel, stride=cfg.stem_stride, padding=pad),
            nn.BatchNorm1d(c, eps=1e-5, momentum=0.1),
            nn.GELU(),
        )
        F = cfg.feature_dim
        self.blocks = nn.ModuleList()
        self.shortcuts = nn.ModuleDict()
        in_ch, res_ch = c, c
        for i in range(cfg.n_blocks):
            self.blocks.append(InceptionBlock(in_ch, cfg.n_filters, cfg.bottleneck, cfg.inception_kernels))
            in_ch = F
            if (i + 1) % cfg.residual_every == 0:
                self.shortcuts[str(i)] = Shortcut(res_ch, F)
                res_ch = F
        self.act = nn.ReLU()

    def forward(self, x):
        expected = (self.cfg.n_leads, self.cfg.input_len)
        if x.dim() != 3 or tuple(x.shape[1:]) != expected:
            raise ValueError(f"expected input [b x {expected[0]} x {expected[1]}], got {list(x.shape)}")
        x = self.stem(x)
        res = x
        for i, block in enumerate(self.blocks):
            x = block(x)
            if str(i) in self.shortcuts:
                x = self.act(x + self.shortcuts[str(i)](res))
                res = x
        return x.mean(dim=-1)


class ECGNet(nn.Module):
    """Feature extractor plus one linear head.

    The pretraining head has ``n_bins * n_tests`` rows ordered test-major
    (all bins of test 0, then test 1, ...); the fine-tuning head has one row.
    """

    def __init__(self, cfg: ModelConfig | None = None, head: str = PRETRAIN,
                 n_bins: int = 100, n_tests: int = 11):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.features = FeatureExtractor(self.cfg)
        self.head_kind = head
        self.n_bins = n_bins
        self.n_tests = n_tests
        out = n_bins * n_tests if head == PRETRAIN else 1
        if head not in (PRETRAIN, FINETUNE):
            raise ValueError(f"unknown head kind {head!r}")
        self.head = nn.Linear(self.cfg.feature_dim, out)
        init_head(self.head)

    def forward_features(self, x):
        return self.features(x)

    def forward_pretrain(self, x):
        if self.head_kind != PRETRAIN:
            raise HeadMismatchError(f"model carries a {self.head_kind} head, not a pretraining head")
        flat = self.head(self.features(x))
        return flat.view(-1, self.n_tests, self.n_bins).transpose(1, 2)

    def forward_finetune(self, x):
        if self.head_kind != FINETUNE:
            raise HeadMismatchError(f"model carries a {self.head_kind} head, not a fine-tuning head")
        return self.head(self.features(x)).squeeze(-1)

    def forward(self, x):
        if self.head_kind == PRETRAIN:
            return self.forward_pretrain(x)
        return self.forward_finetune(x)


def init_head(linear: nn.Linear, generator: torch.Generator | None = None) -> None:
    bound = 1.0 / math.sqrt(linear.in_features)
    with torch.no_grad():
        linear.weight.uniform_(-bound, bound, generator=generator)
        linear.bias.uniform_(-bound, bound, generator=generator)


def flatten_logits(logits: torch.Tensor) -> torch.Tensor:
    """Inverse of the [b, B, T] view: back to the head's test-major [b, B*T] layout."""
    return logits.transpose(1, 2).reshape(logits.shape[0], -1)


def swap_head(source, seed: int = 0) -> ECGNet:
    """A fine-tuning model sharing ``source``'s feature weights, with a fresh seeded head.

    ``source`` is a pretrained ``ECGNet``, a checkpoint dict or a checkpoint path.
    """
    if isinstance(source, (str, Path)):
        source = load_checkpoint(source)
    if isinstance(source, dict):
        source = model_from_checkpoint(source)
    if source.head_kind != PRETRAIN:
        raise HeadMismatchError("swap_head expects a model with a pretraining head")
    model = ECGNet(source.cfg, head=FINETUNE, n_bins=source.n_bins, n_tests=source.n_tests)
    model.features.load_state_dict(source.features.state_dict())
    model = model.to(dtype=next(source.parameters()).dtype)
    g = torch.Generator().manual_seed(int(seed))
    init_head(model.head, g)
    return model


def make_checkpoint(model: ECGNet, **meta) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.cfg),
        "head_kind": model.head_kind,
        "n_bins": model.n_bins,
        "n_tests": model.n_tests,
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "meta": meta,
    }


def model_from_checkpoint(ckpt: dict) -> ECGNet:
    try:
        if ckpt.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {ckpt.get('version')!r}")
        model = ECGNet(ModelConfig(**ckpt["config"]), head=ckpt["head_kind"],
                       n_bins=ckpt["n_bins"], n_tests=ckpt["n_tests"])
        dtype = next(iter(ckpt["state_dict"].values())).dtype
        model = model.to(dtype=dtype)
        model.load_state_dict(ckpt["state_dict"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, RuntimeError, AttributeError, StopIteration) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    model.eval()
    return model


def save_checkpoint(ckpt: dict, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(ckpt, path)


def load_checkpoint(path) -> dict:
    try:
        ckpt = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:  # torch raises a variety of unpickling errors
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(ckpt, dict) or "state_dict" not in ckpt:
        raise CheckpointError(f"{path} is not a model checkpoint")
    return ckpt
