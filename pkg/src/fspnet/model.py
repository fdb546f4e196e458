"""FSPNet assembly and the B / B+D / B+D+T ablation variants."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import functional as F
from .encoder import Encoder, EncoderConfig, deserialize
from .fsd import FeatureShrinkageDecoder
from .loss import total_loss
from .nltem import NlTem, enhance_pairs
from .nn import Conv2d, Module, make_rng
from .tensor import Tensor, concat

VARIANTS = ("B", "B+D", "B+D+T")


class FSPNet(Module):
    """Transformer encoder, optional NL-TEM pairs, optional shrinkage decoder.

    ``B``      all 12 encoder layers concatenated, 1x1 conv, upsample
    ``B+D``    encoder layers decoded by the shrinkage pyramid
    ``B+D+T``  NL-TEM enhanced layer pairs decoded by the pyramid (full model)
    """

    def __init__(
        self,
        encoder_config: EncoderConfig,
        n_vertices: int = 16,
        decoder_width: int = 32,
        variant: str = "B+D+T",
        seed: int = 0,
    ):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {VARIANTS}")
        encoder_config.validate()
        if encoder_config.num_layers != 12 and variant != "B":
            raise ValueError("the shrinkage decoder needs exactly 12 encoder layers")
        rng = make_rng(seed)
        self.variant = variant
        self.config = encoder_config
        c = encoder_config.embed_dim
        self.encoder = Encoder(rng, encoder_config)
        self.nltems = (
            [NlTem(rng, c, n_vertices) for _ in range(encoder_config.num_layers // 2)]
            if variant == "B+D+T"
            else []
        )
        if variant == "B":
            self.baseline_head = Conv2d(rng, c * encoder_config.num_layers, 1, 1, init="zeros")
            self.decoder = None
        else:
            self.baseline_head = None
            self.decoder = FeatureShrinkageDecoder(rng, c, decoder_width)
        self.name_parameters()

    def features(self, images: Tensor) -> list[Tensor]:
        layers = self.encoder(images)
        if self.nltems:
            return enhance_pairs(self.nltems, layers)
        return [deserialize(seq) for seq in layers]

    def forward(self, images: Tensor) -> list[Tensor]:
        """Probability maps at input resolution: [P0..P3], or a single map for ``B``."""
        h, w = images.shape[2:]
        feats = self.features(images)
        if self.decoder is None:
            logits = self.baseline_head(concat(feats, axis=1))
            return [F.bilinear_resize(F.sigmoid(logits), h, w)]
        return self.decoder(feats, h, w)

    def loss(self, images: Tensor, masks: np.ndarray) -> Tensor:
        """masks: (B, H, W) binary."""
        preds = self.forward(images)
        target = Tensor(np.asarray(masks, dtype=np.float64)[:, None])
        return objective(preds, target)


def objective(preds: Sequence[Tensor], target: Tensor) -> Tensor:
    if len(preds) == 1:
        return F.bce(preds[0], target)
    return total_loss(preds, target)
