"""Network architectures: attention-gated residual generator, PatchGAN, fusion network."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    out_channels: int = 3
    base_filters: int = 64
    n_down: int = 3
    n_residual_blocks: int = 9
    use_attention_gates: bool = True
    downsample: str = "stride"  # or "pool"
    short_residual: bool = False
    init_std: Optional[float] = None  # None keeps torch's default init

    def __post_init__(self):
        if self.n_down < 1 or self.base_filters < 1 or self.n_residual_blocks < 0:
            raise ValueError(f"invalid generator spec {self}")
        if self.init_std is not None and self.init_std <= 0:
            raise ValueError("init_std must be positive")
        if self.downsample not in ("stride", "pool"):
            raise ValueError(f"downsample must be 'stride' or 'pool', got {self.downsample!r}")

    @property
    def size_multiple(self) -> int:
        return 2 ** (self.n_down - 1)


def FusionSpec(**overrides) -> GeneratorSpec:
    """Generator spec with the fusion deltas: one residual block, 1 output channel, short residuals."""
    base = dict(out_channels=1, n_residual_blocks=1, short_residual=True)
    base.update(overrides)
    return GeneratorSpec(**base)


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    n_layers: int = 4
    base_filters: int = 64
    kernel_size: int = 4
    init_std: Optional[float] = None

    def __post_init__(self):
        if self.n_layers < 2 or self.base_filters < 1:
            raise ValueError(f"invalid discriminator spec {self}")
        if self.init_std is not None and self.init_std <= 0:
            raise ValueError("init_std must be positive")

    @property
    def strides(self):
        # all feature blocks stride 2 except the last, then a stride-1 logit layer
        return [2] * (self.n_layers - 1) + [1, 1]

    def output_size(self, n: int) -> int:
        """Logit-map side length for an input side ``n`` (padding 1 throughout)."""
        for s in self.strides:
            n = (n + 2 - self.kernel_size) // s + 1
        return n

    @property
    def receptive_field(self) -> int:
        rf = 1
        for s in reversed(self.strides):
            rf = (rf - 1) * s + self.kernel_size
        return rf


def init_normal_(net: nn.Module, std: float) -> nn.Module:
    """Conv weights ~ N(0, std), biases zero."""
    for m in net.modules():
        if isinstance(m, nn.Conv2d):
            nn.init.normal_(m.weight, 0.0, std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)
    return net


def _conv_block(cin, cout, kernel=3, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, kernel, stride=stride, padding=kernel // 2, padding_mode="reflect"),
        nn.InstanceNorm2d(cout),
        nn.ReLU(inplace=True),
    )


class ShortResidual(nn.Module):
    """Wrap a conv layer with an additive shortcut (1x1 projection when shapes differ)."""

    def __init__(self, body: nn.Module, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.body = body
        if cin == cout and stride == 1:
            self.proj = nn.Identity()
        else:
            self.proj = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        return self.body(x) + self.proj(x)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.block = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            nn.InstanceNorm2d(channels),
        )

    def forward(self, x):
        return x + self.block(x)


class AttentionGate(nn.Module):
    """Additive attention on a skip connection.

    ``a = sigmoid(psi(relu(W_x x + W_g g + b)))`` is one coefficient per pixel,
    broadcast over the skip's channels; the output is ``a * x``.
    """

    def __init__(self, skip_channels: int, gate_channels: int, inter_channels: Optional[int] = None):
        super().__init__()
        inter = inter_channels or max(1, skip_channels // 2)
        self.skip_channels = skip_channels
        self.gate_channels = gate_channels
        self.W_x = nn.Conv2d(skip_channels, inter, 1, bias=False)
        self.W_g = nn.Conv2d(gate_channels, inter, 1, bias=True)
        self.psi = nn.Conv2d(inter, 1, 1, bias=True)

    def coefficients(self, x, g):
        if x.shape[1] != self.skip_channels or g.shape[1] != self.gate_channels:
            raise ValueError(
                f"attention gate expects {self.skip_channels}/{self.gate_channels} channels, "
                f"got {x.shape[1]}/{g.shape[1]}"
            )
        if g.shape[-2:] != x.shape[-2:]:
            g = F.interpolate(g, size=x.shape[-2:], mode="nearest")
        return torch.sigmoid(self.psi(F.relu(self.W_x(x) + self.W_g(g))))

    def forward(self, x, g):
        return x * self.coefficients(x, g)


class AttentionResUNet(nn.Module):
    """Residual encoder/decoder with attention-gated long skips.

    Encoder: a 7x7 stem then ``n_down - 1`` stride-2 convolutions (or conv +
    average pooling). Bottleneck: ``n_residual_blocks`` residual blocks.
    Decoder: one stage per encoder level, deepest first; each stage gates the
    mirror skip, concatenates, convolves, and (except the last) upsamples by
    nearest-neighbour resize followed by a 3x3 convolution. A 7x7 projection
    and a sigmoid produce the output in [0, 1].
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        nf = spec.base_filters
        widths = [nf * 2 ** i for i in range(spec.n_down)]
        self.widths = widths

        def wrap(body, cin, cout, stride=1):
            return ShortResidual(body, cin, cout, stride) if spec.short_residual else body

        enc = [wrap(_conv_block(spec.in_channels, widths[0], kernel=7), spec.in_channels, widths[0])]
        for i in range(1, spec.n_down):
            if spec.downsample == "stride":
                body = _conv_block(widths[i - 1], widths[i], stride=2)
            else:
                body = nn.Sequential(_conv_block(widths[i - 1], widths[i]), nn.AvgPool2d(2))
            enc.append(wrap(body, widths[i - 1], widths[i], stride=2))
        self.encoder = nn.ModuleList(enc)
        self.bottleneck = nn.Sequential(*[ResidualBlock(widths[-1]) for _ in range(spec.n_residual_blocks)])

        gates, merges, ups = [], [], []
        for level in reversed(range(spec.n_down)):
            c = widths[level]
            gates.append(AttentionGate(c, c) if spec.use_attention_gates else None)
            merges.append(wrap(_conv_block(2 * c, c), 2 * c, c))
            if level > 0:
                ups.append(wrap(_conv_block(c, widths[level - 1]), c, widths[level - 1]))
        self.gates = nn.ModuleList([g for g in gates if g is not None])
        self.merges = nn.ModuleList(merges)
        self.ups = nn.ModuleList(ups)
        self.head = nn.Conv2d(widths[0], spec.out_channels, 7, padding=3, padding_mode="reflect")
        if spec.init_std is not None:
            init_normal_(self, spec.init_std)

    def check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        m = self.spec.size_multiple
        if x.shape[-2] % m or x.shape[-1] % m:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} is not divisible by {m}")

    def forward(self, x, return_attention: bool = False):
        self.check_input(x)
        skips = []
        h = x
        for layer in self.encoder:
            h = layer(h)
            skips.append(h)
        h = self.bottleneck(h)
        attention = []
        for stage, level in enumerate(reversed(range(self.spec.n_down))):
            skip = skips[level]
            if self.spec.use_attention_gates:
                gate = self.gates[stage]
                a = gate.coefficients(skip, h)
                attention.append(a)
                skip = skip * a
            h = self.merges[stage](torch.cat([h, skip], dim=1))
            if level > 0:
                h = F.interpolate(h, scale_factor=2, mode="nearest")
                h = self.ups[stage](h)
        out = torch.sigmoid(self.head(h))
        return (out, attention) if return_attention else out


class PatchDiscriminator(nn.Module):
    """PatchGAN: one real/fake logit per receptive-field patch."""

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        k = spec.kernel_size
        layers = []
        cin = spec.in_channels
        for i, stride in enumerate(spec.strides[:-1]):
            cout = spec.base_filters * min(2 ** i, 8)
            layers.append(nn.Conv2d(cin, cout, k, stride=stride, padding=1))
            if i > 0:
                layers.append(nn.InstanceNorm2d(cout))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            cin = cout
        layers.append(nn.Conv2d(cin, 1, k, stride=1, padding=1))
        self.model = nn.Sequential(*layers)
        if spec.init_std is not None:
            init_normal_(self, spec.init_std)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected (N, {self.spec.in_channels}, H, W), got {tuple(x.shape)}")
        if min(self.spec.output_size(int(x.shape[-2])), self.spec.output_size(int(x.shape[-1]))) < 1:
            raise ValueError(
                f"input {tuple(x.shape[-2:])} too small for the discriminator's conv chain"
            )
        return self.model(x)


def build_generator(spec: GeneratorSpec = GeneratorSpec()) -> AttentionResUNet:
    return AttentionResUNet(spec)


def build_fusion(spec: Optional[GeneratorSpec] = None) -> AttentionResUNet:
    return AttentionResUNet(spec if spec is not None else FusionSpec())


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec()) -> PatchDiscriminator:
    return PatchDiscriminator(spec)


NETWORK_NAMES = ("G_cbct2ct", "G_ct2cbct", "D_ct", "D_cbct", "F_fusion")


@dataclass
class ModelBundle:
    """The five trainable networks plus the specs that built them."""

    G_cbct2ct: AttentionResUNet
    G_ct2cbct: AttentionResUNet
    D_ct: PatchDiscriminator
    D_cbct: PatchDiscriminator
    F_fusion: AttentionResUNet
    generator_spec: GeneratorSpec = GeneratorSpec()
    discriminator_spec: DiscriminatorSpec = DiscriminatorSpec()
    fusion_spec: GeneratorSpec = field(default_factory=FusionSpec)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def build(cls, generator_spec=None, discriminator_spec=None, fusion_spec=None, seed: int = 0):
        """Fresh bundle; weights depend only on ``seed``."""
        g = generator_spec or GeneratorSpec()
        d = discriminator_spec or DiscriminatorSpec()
        f = fusion_spec or FusionSpec(base_filters=g.base_filters)
        torch.manual_seed(int(seed))
        return cls(
            G_cbct2ct=build_generator(g),
            G_ct2cbct=build_generator(g),
            D_ct=build_discriminator(d),
            D_cbct=build_discriminator(d),
            F_fusion=build_fusion(f),
            generator_spec=g,
            discriminator_spec=d,
            fusion_spec=f,
        )

    def networks(self):
        return {name: getattr(self, name) for name in NETWORK_NAMES}

    def generator_parameters(self):
        for name in ("G_cbct2ct", "G_ct2cbct", "F_fusion"):
            yield from getattr(self, name).parameters()

    def discriminator_parameters(self):
        for name in ("D_ct", "D_cbct"):
            yield from getattr(self, name).parameters()

    def train(self, mode: bool = True):
        for net in self.networks().values():
            net.train(mode)
        return self

    def eval(self):
        return self.train(False)

    def save(self, directory, **metadata) -> Path:
        """Write one ``<name>.pt`` state dict per network plus ``bundle.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, net in self.networks().items():
            torch.save(net.state_dict(), directory / f"{name}.pt")
        meta = dict(self.metadata)
        meta.update(metadata)
        header = {
            "format": CHECKPOINT_FORMAT,
            "generator_spec": asdict(self.generator_spec),
            "discriminator_spec": asdict(self.discriminator_spec),
            "fusion_spec": asdict(self.fusion_spec),
            "networks": {name: f"{name}.pt" for name in NETWORK_NAMES},
            **meta,
        }
        (directory / "bundle.json").write_text(json.dumps(header, indent=2, sort_keys=True))
        return directory

    @classmethod
    def load(cls, directory) -> "ModelBundle":
        directory = Path(directory)
        header_path = directory / "bundle.json"
        if not header_path.exists():
            raise FileNotFoundError(f"no bundle.json in {directory}")
        header = json.loads(header_path.read_text())
        bundle = cls.build(
            GeneratorSpec(**header["generator_spec"]),
            DiscriminatorSpec(**header["discriminator_spec"]),
            GeneratorSpec(**header["fusion_spec"]),
        )
        for name, fname in header["networks"].items():
            path = directory / fname
            if not path.exists():
                raise FileNotFoundError(f"checkpoint is missing network {name} ({path})")
            getattr(bundle, name).load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
        bundle.metadata = {k: v for k, v in header.items()
                           if k not in ("generator_spec", "discriminator_spec", "fusion_spec", "networks")}
        return bundle.eval()
