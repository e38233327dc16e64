"""
U-Net, Y-Net et T-Net assemblés à partir de nn.layers.

Tous les modèles prennent [N,1,128,128] et rendent des probabilités [N,1,128,128]
strictement dans (0,1).
"""
import logging
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np

from config import settings
from models import ArchitectureConfig, ModelName
from nn import functional as F
from nn.layers import (
    Conv2d, DoubleConv, Dropout, Module, ModuleList, PatchEmbed, PyramidPooling,
    TransformerEncoderUnit, UpConv, seeded_rng,
)
from nn.tensor import Tensor, clamp, no_grad, relu, sigmoid

logger = logging.getLogger(__name__)

ForwardResult = Union[Tensor, Tuple[Tensor, Dict[str, Tensor]]]

class SegmentationModel(Module):
    """Base commune: tête sigmoïde bornée et prédiction numpy"""

    name: ModelName

    def __init__(self, seed: int):
        super().__init__()
        self.seed = seed

    def layout(self) -> Dict:
        return {}

    def describe(self) -> ArchitectureConfig:
        return ArchitectureConfig(name=self.name, seed=self.seed, layout=self.layout())

    @staticmethod
    def _head(logits: Tensor) -> Tensor:
        return clamp(sigmoid(logits), settings.PROB_EPS, 1 - settings.PROB_EPS)

    @staticmethod
    def _check_input(x: Tensor) -> None:
        size = settings.PATCH_SIZE
        if x.ndim != 4 or x.shape[1:] != (1, size, size):
            raise ValueError(f"Entrée [N,1,{size},{size}] attendue, reçu {x.shape}")

    def forward(self, x: Tensor, training: bool = False, rng: Optional[np.random.Generator] = None,
                return_taps: bool = False) -> ForwardResult:
        raise NotImplementedError

    def predict_proba(self, batch: np.ndarray) -> np.ndarray:
        """Passe avant sans bande sur un lot [N,1,H,W] ou [N,H,W]"""
        batch = np.asarray(batch)
        if batch.ndim == 3:
            batch = batch[:, None]
        with no_grad():
            return self.forward(Tensor(batch.astype(self.dtype, copy=False))).data

class UNet(SegmentationModel):
    name = ModelName.UNET
    ladder = (16, 32, 64, 128)
    bottleneck_channels = 256

    def __init__(self, seed: int):
        super().__init__(seed)
        rng = seeded_rng(seed)
        chans = (1,) + self.ladder
        self.encoders = ModuleList([DoubleConv(chans[i], chans[i + 1], rng) for i in range(len(self.ladder))])
        self.bottleneck = DoubleConv(self.ladder[-1], self.bottleneck_channels, rng)
        self.drop = Dropout(settings.DROPOUT_RATE)
        ups, decs = [], []
        prev = self.bottleneck_channels
        for c in reversed(self.ladder):
            ups.append(UpConv(prev, c, rng=rng))
            decs.append(DoubleConv(2 * c, c, rng))
            prev = c
        self.ups = ModuleList(ups)
        self.decoders = ModuleList(decs)
        self.head = Conv2d(self.ladder[0], 1, 1, padding=0, rng=rng)

    def layout(self) -> Dict:
        return {"encoder": list(self.ladder), "bottleneck": self.bottleneck_channels,
                "decoder": list(reversed(self.ladder)), "upsampling": "transposed 2x2/2",
                "dropout": settings.DROPOUT_RATE}

    def forward(self, x, training=False, rng=None, return_taps=False):
        self._check_input(x)
        skips = []
        h = x
        for enc in self.encoders:
            h = enc(h)
            skips.append(h)
            h = F.max_pool2d(h)
        bottleneck = self.drop(self.bottleneck(h), training, rng)
        h = bottleneck
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            h = dec(F.channel_concat([up(h), skip]))
        out = self._head(self.head(h))
        if return_taps:
            return out, {"bottleneck": bottleneck}
        return out

class YNet(SegmentationModel):
    name = ModelName.YNET
    regular = (24, 48, 96, 192)
    dilated_channels = 16
    bins = (1, 2, 4)
    fused_channels = 192

    def __init__(self, seed: int):
        super().__init__(seed)
        rng = seeded_rng(seed)
        chans = (1,) + self.regular
        self.reg_convs = ModuleList([Conv2d(chans[i], chans[i + 1], 3, rng=rng) for i in range(len(self.regular))])
        # Quatre convolutions dilatées de pas 2: 128 -> 8
        dil_in = (1,) + (self.dilated_channels,) * 3
        self.dil_convs = ModuleList([
            Conv2d(c, self.dilated_channels, 3, stride=2, padding=2, dilation=2, rng=rng) for c in dil_in
        ])
        self.ppm = PyramidPooling(self.dilated_channels, self.bins, rng=rng)
        dilated_out = self.dilated_channels * (1 + len(self.bins))
        self.fuse = Conv2d(self.regular[-1] + dilated_out, self.fused_channels, 3, rng=rng)
        self.drop = Dropout(settings.DROPOUT_RATE)
        ups, decs = [], []
        prev = self.fused_channels
        for skip in reversed(self.regular):
            out = skip // 2
            ups.append(UpConv(prev, out, rng=rng))
            decs.append(Conv2d(out + skip, out, 3, rng=rng))
            prev = out
        self.ups = ModuleList(ups)
        self.decoders = ModuleList(decs)
        self.head = Conv2d(prev, 1, 1, padding=0, rng=rng)

    def layout(self) -> Dict:
        return {"regular": list(self.regular), "dilated": {"channels": self.dilated_channels, "dilation": 2,
                "stride": 2, "stages": len(self.dil_convs)}, "pyramid_bins": list(self.bins),
                "fused": self.fused_channels, "decoder": [c // 2 for c in reversed(self.regular)],
                "dropout": settings.DROPOUT_RATE}

    def forward(self, x, training=False, rng=None, return_taps=False):
        self._check_input(x)
        skips = []
        h = x
        for conv in self.reg_convs:
            h = relu(conv(h))
            skips.append(h)
            h = F.max_pool2d(h)
        d = x
        for conv in self.dil_convs:
            d = relu(conv(d))
        dilated = d
        branch = F.channel_concat([dilated, self.ppm(dilated)])
        h = relu(self.fuse(F.channel_concat([h, branch])))
        h = self.drop(h, training, rng)
        for up, dec, skip in zip(self.ups, self.decoders, reversed(skips)):
            h = relu(dec(F.channel_concat([up(h), skip])))
        out = self._head(self.head(h))
        if return_taps:
            return out, {"dilated": dilated, "bottleneck": h}
        return out

class TNet(SegmentationModel):
    name = ModelName.TNET
    num_units = 8
    tap_every = 2
    bottom_channels = 256
    widths = (128, 64, 32, 16)

    def __init__(self, seed: int):
        super().__init__(seed)
        rng = seeded_rng(seed)
        dim = settings.EMBED_DIM
        self.embed = PatchEmbed(rng=rng)
        self.units = ModuleList([
            TransformerEncoderUnit(dim, settings.NUM_HEADS, settings.MLP_RATIO, settings.DROPOUT_RATE, rng=rng)
            for _ in range(self.num_units)
        ])
        self.bottom = Conv2d(dim, self.bottom_channels, 3, rng=rng)
        # Étapes 16, 32, 64 avec un tap; la dernière (128) sans tap
        ups, decs = [], []
        prev = self.bottom_channels + dim
        for i, w in enumerate(self.widths):
            ups.append(UpConv(prev, w, rng=rng))
            extra = dim if i < len(self.widths) - 1 else 0
            decs.append(Conv2d(w + extra, w, 3, rng=rng))
            prev = w
        self.ups = ModuleList(ups)
        self.decoders = ModuleList(decs)
        self.head = Conv2d(prev, 1, 1, padding=0, rng=rng)

    def layout(self) -> Dict:
        return {"tokens": self.embed.num_tokens, "embed_dim": settings.EMBED_DIM,
                "sub_patch": self.embed.sub_patch, "units": self.num_units, "heads": settings.NUM_HEADS,
                "mlp_ratio": settings.MLP_RATIO, "taps": [2, 4, 6, 8], "bottom": self.bottom_channels,
                "decoder": list(self.widths), "dropout": settings.DROPOUT_RATE}

    def forward(self, x, training=False, rng=None, return_taps=False):
        self._check_input(x)
        grid = self.embed.grid
        h = self.embed(x)
        taps: Dict[str, Tensor] = {}
        for i, unit in enumerate(self.units, start=1):
            h = unit(h, training, rng)
            if i % self.tap_every == 0:
                taps[f"tap{i}"] = F.tokens_to_grid(h, grid)
        tap8 = taps[f"tap{self.num_units}"]
        z = F.channel_concat([relu(self.bottom(tap8)), tap8])
        # tap6 à 16x16, tap4 à 32x32, tap2 à 64x64
        stage_taps = ["tap6", "tap4", "tap2", None]
        for up, dec, tap_name in zip(self.ups, self.decoders, stage_taps):
            z = up(z)
            if tap_name is not None:
                factor = z.shape[-1] // grid
                z = F.channel_concat([z, F.upsample_nearest(taps[tap_name], factor)])
            z = relu(dec(z))
        out = self._head(self.head(z))
        if return_taps:
            return out, taps
        return out

def build_unet(seed: int) -> UNet:
    return UNet(seed)

def build_ynet(seed: int) -> YNet:
    return YNet(seed)

def build_tnet(seed: int) -> TNet:
    return TNet(seed)

BUILDERS: Dict[ModelName, Callable[[int], SegmentationModel]] = {
    ModelName.UNET: build_unet,
    ModelName.YNET: build_ynet,
    ModelName.TNET: build_tnet,
}

def build_model(name: Union[ModelName, str], seed: int) -> SegmentationModel:
    try:
        builder = BUILDERS[ModelName(name)]
    except ValueError:
        raise ValueError(f"Modèle inconnu: {name} (attendu unet, ynet ou tnet)")
    model = builder(seed)
    logger.debug("Modèle %s construit (graine %s, %s paramètres)", model.name.value, seed, model.num_parameters())
    return model
