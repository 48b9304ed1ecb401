"""Convolutional building blocks shared by the encoder, decoder, and matching heads.

Everything here is ordinary feed-forward machinery: PReLU activations, residual
blocks built from valid strided convolutions, their transposed counterparts for
generation, affine embedding heads, and a thin GRU-step wrapper. The matching
procedures themselves live in :mod:`genmatch.matching`.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn
from torch.nn import functional as F

PRELU_INIT_SLOPE = 0.25


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric rectifier: ``max(x, 0) + slope * min(x, 0)`` elementwise.

    ``slope`` broadcasts against ``x`` (per-channel slopes are shaped so that
    they align with the channel dimension by the caller).
    """
    return torch.where(x >= 0, x, slope * x)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Spatial size after a valid (unpadded) convolution."""
    if size < kernel:
        raise ValueError(f"input size {size} is smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


def deconv_output_size(size: int, kernel: int, stride: int) -> int:
    """Spatial size after an unpadded transposed convolution."""
    if size < 1:
        raise ValueError(f"input size must be positive, got {size}")
    return (size - 1) * stride + kernel


def same_padding(kernel: int) -> tuple[int, int]:
    """(leading, trailing) padding that keeps a stride-1 conv size-preserving.

    Odd kernels pad symmetrically. Even kernels need an odd total of
    ``kernel - 1``, which goes on the leading edge.
    """
    total = kernel - 1
    lead = (total + 1) // 2
    return lead, total - lead


def _kaiming_init(module: nn.Module) -> None:
    """Fan-in scaled normal init matched to the PReLU slope, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(
                m.weight, a=PRELU_INIT_SLOPE, nonlinearity="leaky_relu"
            )
            if m.bias is not None:
                nn.init.zeros_(m.bias)


@dataclass(frozen=True)
class ResidualBlockSpec:
    """One residual block: strided kernel, size-preserving kernel, width, stride."""

    kernel1: tuple[int, int]
    kernel2: tuple[int, int]
    filters: int
    stride: int

    def __post_init__(self) -> None:
        for k in (*self.kernel1, *self.kernel2):
            if k < 1:
                raise ValueError(f"kernel sizes must be positive, got {self!r}")
        if self.filters < 1 or self.stride < 1:
            raise ValueError(f"filters and stride must be positive, got {self!r}")

    def scaled(self, width: float) -> "ResidualBlockSpec":
        filters = max(1, round(self.filters * width))
        return ResidualBlockSpec(self.kernel1, self.kernel2, filters, self.stride)


ENCODER_BLOCKS: tuple[ResidualBlockSpec, ...] = (
    ResidualBlockSpec((4, 4), (3, 3), 16, 2),
    ResidualBlockSpec((3, 3), (3, 3), 16, 2),
    ResidualBlockSpec((2, 2), (2, 2), 32, 2),
)

DECODER_BLOCKS: tuple[ResidualBlockSpec, ...] = (
    ResidualBlockSpec((2, 2), (2, 2), 32, 2),
    ResidualBlockSpec((3, 3), (3, 3), 16, 2),
    ResidualBlockSpec((4, 4), (3, 3), 16, 2),
)

IMAGE_SIZE = 28
DECODER_SEED_SIZE = 3


def _pad_same(x: Tensor, kernel: tuple[int, int]) -> Tensor:
    ph = same_padding(kernel[0])
    pw = same_padding(kernel[1])
    # F.pad takes (left, right, top, bottom) for the last two dims.
    return F.pad(x, (pw[0], pw[1], ph[0], ph[1]))


class ResidualEncoderBlock(nn.Module):
    """Strided residual downsampling block.

    ``h = conv1(x)`` (valid, stride S) is refined by a size-preserving conv
    with a residual connection and a PReLU, then a strided 1x1 projection of
    the input is added back. The projection output is cropped top-left to the
    main path's size because a 1x1 stride-S map can overshoot the valid-conv
    grid by one row/column.
    """

    def __init__(self, in_channels: int, spec: ResidualBlockSpec) -> None:
        super().__init__()
        self.spec = spec
        self.conv1 = nn.Conv2d(in_channels, spec.filters, spec.kernel1, spec.stride)
        self.conv2 = nn.Conv2d(spec.filters, spec.filters, spec.kernel2, 1)
        self.project = nn.Conv2d(in_channels, spec.filters, 1, spec.stride)
        self.slope = nn.Parameter(
            torch.full((spec.filters, 1, 1), PRELU_INIT_SLOPE)
        )
        _kaiming_init(self)

    def output_size(self, size: int) -> int:
        return conv_output_size(size, self.spec.kernel1[0], self.spec.stride)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        y = prelu(self.conv2(_pad_same(h, self.spec.kernel2)) + h, self.slope)
        skip = self.project(x)[..., : y.shape[-2], : y.shape[-1]]
        return y + skip


class ResidualDecoderBlock(nn.Module):
    """Strided residual upsampling block.

    The strided conv is transposed; the skip path is a 1x1 channel projection
    followed by bilinear resizing to the main path's spatial size.
    """

    def __init__(self, in_channels: int, spec: ResidualBlockSpec) -> None:
        super().__init__()
        self.spec = spec
        self.conv1 = nn.ConvTranspose2d(
            in_channels, spec.filters, spec.kernel1, spec.stride
        )
        self.conv2 = nn.Conv2d(spec.filters, spec.filters, spec.kernel2, 1)
        self.project = nn.Conv2d(in_channels, spec.filters, 1, 1)
        self.slope = nn.Parameter(
            torch.full((spec.filters, 1, 1), PRELU_INIT_SLOPE)
        )
        _kaiming_init(self)

    def output_size(self, size: int) -> int:
        return deconv_output_size(size, self.spec.kernel1[0], self.spec.stride)

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv1(x)
        y = prelu(self.conv2(_pad_same(h, self.spec.kernel2)) + h, self.slope)
        skip = F.interpolate(
            self.project(x),
            size=y.shape[-2:],
            mode="bilinear",
            align_corners=False,
        )
        return y + skip


def _flatten_leading(x: Tensor, event_dims: int) -> tuple[Tensor, tuple[int, ...]]:
    lead = x.shape[: x.dim() - event_dims]
    flat = x.reshape(-1, *x.shape[x.dim() - event_dims :])
    return flat, tuple(lead)


class ImageEncoder(nn.Module):
    """Maps binary 28x28 images to flat feature vectors.

    Accepts any leading batch shape: ``(..., 28, 28) -> (..., feature_dim)``.
    With unit width the spatial chain is 28 -> 13 -> 6 -> 3 over 16/16/32
    channels, giving 288 features.
    """

    def __init__(self, width: float = 1.0) -> None:
        super().__init__()
        blocks = []
        in_channels = 1
        size = IMAGE_SIZE
        sizes = [size]
        for base in ENCODER_BLOCKS:
            spec = base.scaled(width)
            blocks.append(ResidualEncoderBlock(in_channels, spec))
            in_channels = spec.filters
            size = blocks[-1].output_size(size)
            sizes.append(size)
        self.blocks = nn.ModuleList(blocks)
        self.spatial_sizes = tuple(sizes)
        self.feature_dim = size * size * in_channels

    def forward(self, images: Tensor) -> Tensor:
        if images.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(
                f"expected trailing image shape ({IMAGE_SIZE}, {IMAGE_SIZE}),"
                f" got {tuple(images.shape[-2:])}"
            )
        flat, lead = _flatten_leading(images, 2)
        x = flat.unsqueeze(1)
        for block in self.blocks:
            x = block(x)
        return x.reshape(*lead, self.feature_dim)


class ImageDecoder(nn.Module):
    """Maps flat conditioning vectors to 28x28 Bernoulli logits.

    An affine layer seeds a 3x3 feature map, three transposed residual blocks
    upsample 3 -> 6 -> 13 -> 28, and the final logits are the sum over the last
    block's channels. Accepts ``(..., input_dim) -> (..., 28, 28)``.
    """

    def __init__(self, input_dim: int, width: float = 1.0) -> None:
        super().__init__()
        if input_dim < 1:
            raise ValueError(f"input_dim must be positive, got {input_dim}")
        self.input_dim = input_dim
        specs = [base.scaled(width) for base in DECODER_BLOCKS]
        seed_channels = specs[0].filters
        self.seed_channels = seed_channels
        self.input_affine = nn.Linear(
            input_dim, DECODER_SEED_SIZE * DECODER_SEED_SIZE * seed_channels
        )
        _kaiming_init(self.input_affine)
        blocks = []
        in_channels = seed_channels
        size = DECODER_SEED_SIZE
        sizes = [size]
        for spec in specs:
            blocks.append(ResidualDecoderBlock(in_channels, spec))
            in_channels = spec.filters
            size = blocks[-1].output_size(size)
            sizes.append(size)
        if size != IMAGE_SIZE:
            raise ValueError(
                f"decoder blocks produce size {size}, expected {IMAGE_SIZE}"
            )
        self.blocks = nn.ModuleList(blocks)
        self.spatial_sizes = tuple(sizes)

    def forward(self, inputs: Tensor) -> Tensor:
        if inputs.shape[-1] != self.input_dim:
            raise ValueError(
                f"expected input dim {self.input_dim}, got {inputs.shape[-1]}"
            )
        flat, lead = _flatten_leading(inputs, 1)
        x = self.input_affine(flat).reshape(
            -1, self.seed_channels, DECODER_SEED_SIZE, DECODER_SEED_SIZE
        )
        for block in self.blocks:
            x = block(x)
        logits = x.sum(dim=1)
        return logits.reshape(*lead, IMAGE_SIZE, IMAGE_SIZE)


class AffineHead(nn.Module):
    """Affine map plus PReLU, used for all matching-space embeddings.

    Operates on the trailing dimension: ``(..., in_dim) -> (..., out_dim)``.
    The rectifier slope is learned per output unit.
    """

    def __init__(self, in_dim: int, out_dim: int) -> None:
        super().__init__()
        self.linear = nn.Linear(in_dim, out_dim)
        self.slope = nn.Parameter(torch.full((out_dim,), PRELU_INIT_SLOPE))
        _kaiming_init(self)

    def forward(self, x: Tensor) -> Tensor:
        return prelu(self.linear(x), self.slope)


def gru_step(cell: nn.GRUCell, state: Tensor, inputs: Tensor) -> Tensor:
    """One GRU update ``state -> state'`` with arbitrary leading batch dims.

    Gate convention (torch layout, rows ordered reset/update/candidate):
    ``r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)``,
    ``u = sigmoid(W_iz x + b_iz + W_hz h + b_hz)``,
    ``n = tanh(W_in x + b_in + r * (W_hn h + b_hn))``,
    ``h' = (1 - u) * n + u * h``. Saturating ``u`` high copies the state;
    saturating it low overwrites with the candidate.
    """
    if state.shape != inputs.shape[: inputs.dim() - 1] + (cell.hidden_size,):
        raise ValueError(
            f"state shape {tuple(state.shape)} does not match inputs"
            f" {tuple(inputs.shape)} for hidden size {cell.hidden_size}"
        )
    flat_in, lead = _flatten_leading(inputs, 1)
    flat_state = state.reshape(-1, cell.hidden_size)
    out = cell(flat_in, flat_state)
    return out.reshape(*lead, cell.hidden_size)
